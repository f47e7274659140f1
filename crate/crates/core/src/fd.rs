//! Finite-difference differentiation used as an independent oracle.
//!
//! Everything here works on closures over flat coordinate slices and never
//! touches the analytic derivative code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default absolute floor below which two entries count as both zero.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdScheme {
    /// `(f(x + h) - f(x - h)) / 2h`, error `O(h^2)`.
    #[default]
    Central,
    /// `(f(x + h) - f(x)) / h`, error `O(h)`.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub scheme: FdScheme,
    /// One level of Richardson extrapolation using steps `h` and `h/2`.
    pub richardson: bool,
}

impl FdConfig {
    pub fn central(step: f64) -> Self {
        FdConfig {
            step,
            scheme: FdScheme::Central,
            richardson: false,
        }
    }

    pub fn forward(step: f64) -> Self {
        FdConfig {
            step,
            scheme: FdScheme::Forward,
            richardson: false,
        }
    }

    pub fn with_richardson(mut self) -> Self {
        self.richardson = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("step", format!("must be positive, got {}", self.step)));
        }
        Ok(())
    }
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig::central(1e-5)
    }
}

fn eval_failure(coordinate: usize, err: Error) -> Error {
    Error::OracleEvalFailure {
        coordinate,
        message: err.to_string(),
    }
}

/// Difference quotient along coordinate `k` for one step size.
fn quotient<F>(f: &F, x: &[f64], k: usize, h: f64, scheme: FdScheme, base: Option<&DVector<f64>>) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let mut probe = x.to_vec();
    probe[k] = x[k] + h;
    let plus = f(&probe).map_err(|e| eval_failure(k, e))?;
    match scheme {
        FdScheme::Central => {
            probe[k] = x[k] - h;
            let minus = f(&probe).map_err(|e| eval_failure(k, e))?;
            check_len(&plus, &minus)?;
            Ok((plus - minus) / (2.0 * h))
        }
        FdScheme::Forward => {
            let base = base.expect("forward differences need the base value");
            check_len(&plus, base)?;
            Ok((plus - base) / h)
        }
    }
}

fn check_len(a: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            analytic: a.len(),
            numeric: b.len(),
        });
    }
    Ok(())
}

fn derivative<F>(f: &F, x: &[f64], k: usize, cfg: &FdConfig, base: Option<&DVector<f64>>) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let coarse = quotient(f, x, k, cfg.step, cfg.scheme, base)?;
    if !cfg.richardson {
        return Ok(coarse);
    }
    let fine = quotient(f, x, k, 0.5 * cfg.step, cfg.scheme, base)?;
    Ok(match cfg.scheme {
        FdScheme::Central => (fine * 4.0 - coarse) / 3.0,
        FdScheme::Forward => fine * 2.0 - coarse,
    })
}

/// Jacobian of a vector function, one column per input coordinate.
pub fn fd_jacobian<F>(f: F, x: &[f64], cfg: &FdConfig) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let g = |p: &[f64]| f(p).map(DVector::from_vec);
    let base = match cfg.scheme {
        FdScheme::Forward => Some(g(x).map_err(|e| eval_failure(0, e))?),
        FdScheme::Central => None,
    };
    let mut columns = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        columns.push(derivative(&g, x, k, cfg, base.as_ref())?);
    }
    if columns.is_empty() {
        let rows = g(x).map_err(|e| eval_failure(0, e))?.len();
        return Ok(DMatrix::zeros(rows, 0));
    }
    let rows = columns[0].len();
    if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
        return Err(Error::ShapeMismatch {
            analytic: rows,
            numeric: bad.len(),
        });
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &[f64], cfg: &FdConfig) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let jac = fd_jacobian(|p| f(p).map(|v| vec![v]), x, cfg)?;
    Ok(jac.row(0).transpose())
}

/// Symmetrized Hessian together with the asymmetry of the raw estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FdHessian {
    pub matrix: DMatrix<f64>,
    /// `|H - H^T|_F` of the raw nested difference.
    pub asymmetry: f64,
}

/// Hessian of a scalar function as the difference of its FD gradient, the
/// outer step being `h^(2/3) max(1, |x|_inf)`.
pub fn fd_hessian<F>(f: F, x: &[f64], cfg: &FdConfig) -> Result<FdHessian>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let outer = FdConfig {
        step: cfg.step.powf(2.0 / 3.0) * scale,
        ..*cfg
    };
    let raw = fd_jacobian(|p| fd_gradient(&f, p, cfg).map(|g| g.as_slice().to_vec()), x, &outer)?;
    let asymmetry = (&raw - raw.transpose()).norm();
    Ok(FdHessian {
        matrix: (&raw + raw.transpose()) * 0.5,
        asymmetry,
    })
}

/// Result of an entry-wise comparison of analytic and numeric arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub max_error: f64,
    /// Flat index of the worst entry, `None` for empty arrays.
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Per-entry error `max(|a - n| - floor, 0) / max(|a|, |n|, floor)`.
pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> Result<ComparisonReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::ShapeMismatch {
            analytic: analytic.len(),
            numeric: numeric.len(),
        });
    }
    let mut report = ComparisonReport {
        max_error: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance: rel_tol,
        passed: true,
    };
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = if a.is_nan() || n.is_nan() {
            f64::INFINITY
        } else {
            ((a - n).abs() - abs_floor).max(0.0) / a.abs().max(n.abs()).max(abs_floor)
        };
        if report.worst_index.is_none() || err > report.max_error {
            report.max_error = err;
            report.worst_index = Some(k);
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report.passed = report.max_error <= rel_tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_square_norm() {
        let g = fd_gradient(|x| Ok(0.5 * (x[0] * x[0] + x[1] * x[1])), &[1.0, 2.0], &FdConfig::default()).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = fd_gradient(|_| Ok(3.25), &[0.3, -1.0, 7.0], &FdConfig::default()).unwrap();
        assert!(g.amax() < 1e-14);
    }

    #[test]
    fn linear_map_jacobian() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]);
        let f = |x: &[f64]| Ok((&a * DVector::from_column_slice(x)).as_slice().to_vec());
        for cfg in [FdConfig::default(), FdConfig::forward(1e-6), FdConfig::default().with_richardson()] {
            let j = fd_jacobian(f, &[0.2, 0.4, -0.1], &cfg).unwrap();
            assert!((j - &a).amax() < 1e-9);
        }
        let id = fd_jacobian(|x| Ok(x.to_vec()), &[1.0, 2.0], &FdConfig::default()).unwrap();
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn quadratic_form_hessian() {
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.5]);
        let f = |x: &[f64]| {
            let v = DVector::from_column_slice(x);
            Ok(0.5 * v.dot(&(&q * &v)))
        };
        let h = fd_hessian(f, &[0.3, -0.2, 0.9], &FdConfig::central(1e-4)).unwrap();
        assert!((h.matrix - &q).amax() < 1e-8);
        let lin = fd_hessian(|x| Ok(3.0 * x[0] - x[1]), &[1.0, 1.0], &FdConfig::central(1e-4)).unwrap();
        assert!(lin.matrix.amax() < 1e-8);
    }

    #[test]
    fn failures_name_the_coordinate() {
        let f = |x: &[f64]| {
            if x[1] > 1.0 {
                Err(Error::invalid("x", "out of domain"))
            } else {
                Ok(x[0])
            }
        };
        let err = fd_gradient(f, &[0.0, 1.0], &FdConfig::default()).unwrap_err();
        assert!(matches!(err, Error::OracleEvalFailure { coordinate: 1, .. }));
        assert!(fd_gradient(f, &[0.0, 0.0], &FdConfig::central(0.0)).is_err());
    }

    #[test]
    fn compare_reports() {
        let r = compare(&[1.0, 2.0], &[1.0, 2.0], 1e-12, DEFAULT_ABS_FLOOR).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_error, 0.0);
        let z = compare(&[0.0, 1e-12], &[0.0, -1e-12], 1e-12, DEFAULT_ABS_FLOOR).unwrap();
        assert!(z.passed);
        assert_eq!(z.max_error, 0.0);
        let bad = compare(&[1.0, 2.0], &[1.0, 2.2], 1e-3, DEFAULT_ABS_FLOOR).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst_index, Some(1));
        assert!((bad.max_error - (0.2 - 1e-9) / 2.2).abs() < 1e-12);
        assert_eq!(
            compare(&[1.0], &[1.0, 2.0], 1e-3, 0.0),
            Err(Error::ShapeMismatch { analytic: 1, numeric: 2 })
        );
        let nan = compare(&[f64::NAN], &[1.0], 1e-3, 0.0).unwrap();
        assert!(!nan.passed);
    }

    /// `f(x) = sum_k c_k x_k^2 + sin(x_k)` and its exact gradient.
    fn smooth_family(c: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let value = c.iter().zip(x).map(|(c, x)| c * x * x + x.sin()).sum();
        let grad = c.iter().zip(x).map(|(c, x)| 2.0 * c * x + x.cos()).collect();
        (value, grad)
    }

    #[test]
    fn central_differences_converge_quadratically() {
        let c = [0.7, -1.3, 2.1];
        let x = [0.4, 1.1, -0.6];
        let exact = smooth_family(&c, &x).1;
        let errors: Vec<f64> = [1e-3, 5e-4, 2.5e-4]
            .iter()
            .map(|&h| {
                let g = fd_gradient(|p| Ok(smooth_family(&c, p).0), &x, &FdConfig::central(h)).unwrap();
                g.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        for pair in errors.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn richardson_beats_plain_central() {
        let c = [0.7, -1.3];
        let x = [0.4, 1.1];
        let exact = smooth_family(&c, &x).1;
        let err = |cfg: FdConfig| {
            let g = fd_gradient(|p| Ok(smooth_family(&c, p).0), &x, &cfg).unwrap();
            g.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        assert!(err(FdConfig::central(1e-2).with_richardson()) < 1e-2 * err(FdConfig::central(1e-2)));
        assert!(err(FdConfig::forward(1e-3).with_richardson()) < 1e-2 * err(FdConfig::forward(1e-3)));
    }

    proptest! {
        #[test]
        fn compare_is_symmetric_and_bounded(a in proptest::collection::vec(-10.0..10.0f64, 1..8), s in 0.5..2.0f64) {
            let n: Vec<f64> = a.iter().map(|v| v * s).collect();
            let ab = compare(&a, &n, 1.0, DEFAULT_ABS_FLOOR).unwrap();
            let ba = compare(&n, &a, 1.0, DEFAULT_ABS_FLOOR).unwrap();
            prop_assert_eq!(ab.max_error, ba.max_error);
            prop_assert!(ab.max_error <= 1.0);
        }
    }
}
