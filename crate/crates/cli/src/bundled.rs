//! Scenes compiled into the binary, addressable by name.

pub const SCENES: &[(&str, &str)] = &[
    ("square_drop_2d", include_str!("../scenes/square_drop_2d.json")),
    ("stiff_grid_2d", include_str!("../scenes/stiff_grid_2d.json")),
    ("free_fall_2d", include_str!("../scenes/free_fall_2d.json")),
];

/// JSON text of the bundled scene called `name`.
pub fn get(name: &str) -> Option<&'static str> {
    SCENES.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    SCENES.iter().map(|(n, _)| *n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneFile;

    #[test]
    fn bundled_scenes_build() {
        for (name, text) in SCENES {
            let scene = SceneFile::from_json(text).and_then(|f| f.build());
            assert!(scene.is_ok(), "{name}: {:?}", scene.err());
        }
        assert!(get("nope").is_none());
        assert_eq!(names().count(), SCENES.len());
    }
}
