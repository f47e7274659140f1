//! Trajectory CSV: `frame,particle,px,py[,pz],vx,vy[,vz]`, LF line endings,
//! shortest round-trip decimals.

use std::io::Write;

use shapematch::{Dim, KinematicState};

pub fn header(dim: Dim) -> Vec<&'static str> {
    match dim {
        Dim::Two => vec!["frame", "particle", "px", "py", "vx", "vy"],
        Dim::Three => vec!["frame", "particle", "px", "py", "pz", "vx", "vy", "vz"],
    }
}

pub struct TrajectoryWriter<W: Write> {
    inner: csv::Writer<W>,
    dim: Dim,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W, dim: Dim) -> csv::Result<Self> {
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        inner.write_record(header(dim))?;
        Ok(TrajectoryWriter { inner, dim })
    }

    pub fn frame(&mut self, index: usize, state: &KinematicState) -> csv::Result<()> {
        let d = self.dim.size();
        for (r, (q, v)) in state.positions.iter().zip(&state.velocities).enumerate() {
            let mut row = Vec::with_capacity(2 + 2 * d);
            row.push(index.to_string());
            row.push(r.to_string());
            row.extend(q.iter().take(d).map(|x| x.to_string()));
            row.extend(v.iter().take(d).map(|x| x.to_string()));
            self.inner.write_record(&row)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapematch::Vec3;

    #[test]
    fn rows_round_trip() {
        let state = KinematicState::new(
            vec![Vec3::new(0.1, -1.0 / 3.0, 0.0), Vec3::new(1e-300, 2.5, 0.0)],
            vec![Vec3::new(0.0, -1.0, 0.0), Vec3::new(f64::MIN_POSITIVE, 7.0, 0.0)],
        );
        let mut w = TrajectoryWriter::new(Vec::new(), Dim::Two).unwrap();
        w.frame(3, &state).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], "frame,particle,px,py,vx,vy");
        assert_eq!(lines[1], format!("3,0,0.1,{},0,-1", -1.0 / 3.0));
        assert!(!text.contains('\r'));
        let parsed: Vec<f64> = lines[2].split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert_eq!(parsed, vec![1e-300, 2.5, f64::MIN_POSITIVE, 7.0]);
    }
}
