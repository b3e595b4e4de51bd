use std::fs;
use std::path::Path;

use super::{Episode, Result, WorldError, WorldGraph};

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| WorldError::Json {
        path: path.display().to_string(),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn save_world(world: &WorldGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write(path, to_json(world, path)?)
}

/// Load and validate a world file.
pub fn load_world(path: impl AsRef<Path>) -> Result<WorldGraph> {
    let path = path.as_ref();
    let mut world: WorldGraph = serde_json::from_str(&read(path)?).map_err(|source| WorldError::Json {
        path: path.display().to_string(),
        source,
    })?;
    world.reindex();
    world.validate().map_err(|e| match e {
        WorldError::Validation { location, message } => WorldError::Validation {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })?;
    Ok(world)
}

pub fn save_episodes(episodes: &[Episode], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write(path, to_json(&episodes, path)?)
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    serde_json::from_str(&read(path)?).map_err(|source| WorldError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Check episodes against the world they were generated for.
pub fn validate_episodes(world: &WorldGraph, episodes: &[Episode]) -> Result<()> {
    for ep in episodes {
        let bad = |message: String| WorldError::Validation {
            location: format!("episode {}", ep.id),
            message,
        };
        if ep.gt_path.first() != Some(&ep.start) || ep.gt_path.last() != Some(&ep.goal) {
            return Err(bad("gt_path must run from start to goal".into()));
        }
        for id in &ep.gt_path {
            world.get(id).map_err(|_| bad(format!("unknown viewpoint {id:?}")))?;
        }
        for seg in ep.gt_path.windows(2) {
            if world.get(&seg[0])?.slot_towards(&seg[1]).is_none() {
                return Err(bad(format!("{} and {} are not adjacent", seg[0], seg[1])));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_episodes, generate_world, InstructionStyle, WorldParams};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&WorldParams::new(21, 30, 3.0)).unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_world(&w, &p1).unwrap();
        let loaded = load_world(&p1).unwrap();
        assert_eq!(loaded, w);
        save_world(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let eps = generate_episodes(&w, 0, 5, InstructionStyle::FineGrained, 2).unwrap();
        let e1 = dir.path().join("e1.json");
        let e2 = dir.path().join("e2.json");
        save_episodes(&eps, &e1).unwrap();
        let back = load_episodes(&e1).unwrap();
        validate_episodes(&w, &back).unwrap();
        save_episodes(&back, &e2).unwrap();
        assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    }

    #[test]
    fn dangling_neighbor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&WorldParams::new(21, 6, 2.0)).unwrap();
        let mut json = serde_json::to_value(&w).unwrap();
        let slots = json["viewpoints"][0]["slots"].as_array_mut().unwrap();
        let free = slots.iter().position(|s| s.get("navigable_to").is_none()).unwrap();
        slots[free]["navigable_to"] = serde_json::json!("idX");
        let p = dir.path().join("bad.json");
        fs::write(&p, serde_json::to_string(&json).unwrap()).unwrap();
        let err = load_world(&p).unwrap_err().to_string();
        assert!(err.contains("idX"), "{err}");
    }

    #[test]
    fn malformed_json_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(load_world(&p), Err(WorldError::Json { .. })));
    }
}
