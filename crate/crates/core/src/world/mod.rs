//! Synthetic topological environments.
//!
//! A [`WorldGraph`] is a set of viewpoints in a plane. Each viewpoint carries a
//! 12-bin panorama ([`DirectionSlot`]); a slot either looks at a neighbouring
//! viewpoint (and is navigable) or shows local scenery. Edge length is the
//! Euclidean distance between positions.

mod episode;
mod generate;
mod geodesic;
mod io;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use episode::{
    generate_episode, generate_episodes, parse_instruction_tags, Episode, Instruction, InstructionStyle,
    INSTRUCTION_TEMPLATE_VERSION,
};
pub use generate::{default_tag_vocab, generate_world, tag_embedding, WorldParams};
pub use geodesic::{geodesic, geodesic_distances};
pub use io::{load_episodes, load_world, save_episodes, save_world, validate_episodes};

/// Number of heading bins in every panorama.
pub const SLOT_COUNT: usize = 12;
/// Angular width of one heading bin.
pub const SLOT_WIDTH: f64 = TAU / SLOT_COUNT as f64;
/// Dimension of synthetic visual embeddings produced by the generator.
pub const FEATURE_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("could not build a connected world for seed {seed} after {attempts} attempts")]
    Connectivity { seed: u64, attempts: usize },
    #[error("unknown viewpoint id {0:?}")]
    UnknownViewpoint(String),
    #[error("invalid world at {location}: {message}")]
    Validation { location: String, message: String },
    #[error("no start/goal pair satisfies the episode constraints (seed {seed}, min_hops {min_hops})")]
    NoEpisode { seed: u64, min_hops: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Wrap an angle into [-π, π).
pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(TAU) - PI;
    if y >= PI {
        -PI
    } else {
        y
    }
}

/// Absolute heading of slot `bin`.
pub fn slot_heading(bin: usize) -> f64 {
    wrap_angle(bin as f64 * SLOT_WIDTH)
}

/// Heading bin nearest to `heading`.
pub fn heading_bin(heading: f64) -> usize {
    let k = (wrap_angle(heading) / SLOT_WIDTH).round() as i64;
    k.rem_euclid(SLOT_COUNT as i64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSlot {
    pub heading: f64,
    pub elevation: f64,
    pub feature: Vec<f64>,
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub navigable_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: String,
    pub position: [f64; 3],
    pub slots: Vec<DirectionSlot>,
}

impl Viewpoint {
    /// Ids of navigable neighbours in slot order.
    pub fn neighbors(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().filter_map(|s| s.navigable_to.as_deref())
    }

    pub fn slot_towards(&self, target: &str) -> Option<&DirectionSlot> {
        self.slots
            .iter()
            .find(|s| s.navigable_to.as_deref() == Some(target))
    }

    /// Tags of the non-navigable slots: what is visible at the viewpoint itself.
    pub fn local_tags(&self) -> BTreeSet<&str> {
        self.slots
            .iter()
            .filter(|s| s.navigable_to.is_none())
            .flat_map(|s| s.tags.iter().map(String::as_str))
            .collect()
    }

    /// Mean of all slot features.
    pub fn panorama_embedding(&self) -> Vec<f64> {
        let dim = self.slots.first().map_or(0, |s| s.feature.len());
        let mut out = vec![0.0; dim];
        for s in &self.slots {
            for (o, f) in out.iter_mut().zip(&s.feature) {
                *o += f;
            }
        }
        let n = self.slots.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Immutable environment graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldGraph {
    pub seed: u64,
    pub feature_dim: usize,
    pub tag_vocab: Vec<String>,
    pub viewpoints: Vec<Viewpoint>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl WorldGraph {
    /// Build a world from parts and check every invariant.
    pub fn new(seed: u64, feature_dim: usize, tag_vocab: Vec<String>, viewpoints: Vec<Viewpoint>) -> Result<Self> {
        let mut w = Self {
            seed,
            feature_dim,
            tag_vocab,
            viewpoints,
            index: HashMap::new(),
        };
        w.reindex();
        w.validate()?;
        Ok(w)
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self
            .viewpoints
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Result<&Viewpoint> {
        self.index_of(id)
            .map(|i| &self.viewpoints[i])
            .ok_or_else(|| WorldError::UnknownViewpoint(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Result<[f64; 3]> {
        self.get(id).map(|v| v.position)
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        let (pa, pb) = (self.position(a)?, self.position(b)?);
        Ok(euclid(pa, pb))
    }

    pub fn neighbors(&self, id: &str) -> Result<Vec<&str>> {
        Ok(self.get(id)?.neighbors().collect())
    }

    pub fn edge_count(&self) -> usize {
        self.viewpoints.iter().map(|v| v.neighbors().count()).sum::<usize>() / 2
    }

    /// Check every structural invariant; errors name the offending location.
    pub fn validate(&self) -> Result<()> {
        let bad = |location: String, message: String| WorldError::Validation { location, message };
        if self.viewpoints.is_empty() {
            return Err(bad("viewpoints".into(), "world has no viewpoints".into()));
        }
        if self.index.len() != self.viewpoints.len() {
            let mut seen = BTreeSet::new();
            for v in &self.viewpoints {
                if !seen.insert(v.id.as_str()) {
                    return Err(bad(format!("viewpoint {}", v.id), "duplicate viewpoint id".into()));
                }
            }
        }
        for v in &self.viewpoints {
            let at = format!("viewpoint {}", v.id);
            if v.position.iter().any(|p| !p.is_finite()) {
                return Err(bad(at, "non-finite position".into()));
            }
            if v.slots.len() != SLOT_COUNT {
                return Err(bad(at, format!("expected {SLOT_COUNT} slots, found {}", v.slots.len())));
            }
            let mut targets = BTreeSet::new();
            for (k, s) in v.slots.iter().enumerate() {
                let at = format!("viewpoint {} slot {k}", v.id);
                if s.feature.len() != self.feature_dim {
                    return Err(bad(
                        at,
                        format!("feature has {} dims, world declares {}", s.feature.len(), self.feature_dim),
                    ));
                }
                if !(s.heading.is_finite() && (-PI..PI).contains(&s.heading)) {
                    return Err(bad(at, format!("heading {} outside [-pi, pi)", s.heading)));
                }
                if s.feature.iter().any(|f| !f.is_finite()) {
                    return Err(bad(at, "non-finite feature".into()));
                }
                if let Some(t) = &s.navigable_to {
                    if !self.contains(t) {
                        return Err(bad(at, format!("navigable_to references unknown viewpoint {t:?}")));
                    }
                    if t == &v.id {
                        return Err(bad(at, "slot navigates to its own viewpoint".into()));
                    }
                    if !targets.insert(t.as_str()) {
                        return Err(bad(at, format!("second slot towards {t:?}")));
                    }
                    let back = self.get(t)?;
                    if back.slot_towards(&v.id).is_none() {
                        return Err(bad(at, format!("edge to {t:?} has no reverse slot")));
                    }
                }
            }
        }
        if !self.is_connected() {
            return Err(bad("viewpoints".into(), "graph is disconnected".into()));
        }
        Ok(())
    }

    /// BFS reachability from the first viewpoint.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for n in self.viewpoints[i].neighbors() {
                if let Some(j) = self.index_of(n) {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Panorama at `vp` with headings re-expressed relative to `agent_heading`.
    pub fn observe(&self, vp: &str, agent_heading: f64) -> Result<Observation> {
        let v = self.get(vp)?;
        let slots: Vec<ObservedSlot> = v
            .slots
            .iter()
            .enumerate()
            .map(|(index, s)| ObservedSlot {
                index,
                heading: s.heading,
                relative_heading: wrap_angle(s.heading - agent_heading),
                feature: s.feature.clone(),
                tags: s.tags.clone(),
                navigable_to: s.navigable_to.clone(),
            })
            .collect();
        let candidates = slots
            .iter()
            .filter_map(|s| {
                s.navigable_to.as_ref().map(|t| Candidate {
                    slot: s.index,
                    target: t.clone(),
                    heading: s.heading,
                    relative_heading: s.relative_heading,
                    tags: s.tags.clone(),
                })
            })
            .collect();
        Ok(Observation {
            viewpoint: vp.to_string(),
            agent_heading: wrap_angle(agent_heading),
            slots,
            candidates,
        })
    }
}

/// Order ids like `id_2 < id_10`: compare the non-numeric prefix, then the numeric suffix.
pub fn id_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    fn split(s: &str) -> (&str, Option<u64>) {
        let cut = s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        (&s[..cut], s[cut..].parse().ok())
    }
    let (pa, na) = split(a);
    let (pb, nb) = split(b);
    pa.cmp(pb).then(na.cmp(&nb)).then(a.cmp(b))
}

pub(crate) fn euclid(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSlot {
    pub index: usize,
    pub heading: f64,
    pub relative_heading: f64,
    pub feature: Vec<f64>,
    pub tags: Vec<String>,
    pub navigable_to: Option<String>,
}

/// A navigable direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub slot: usize,
    pub target: String,
    pub heading: f64,
    pub relative_heading: f64,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub viewpoint: String,
    pub agent_heading: f64,
    pub slots: Vec<ObservedSlot>,
    pub candidates: Vec<Candidate>,
}

impl Observation {
    pub fn candidate(&self, target: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.target == target)
    }

    /// Slot the agent is facing.
    pub fn facing(&self) -> &ObservedSlot {
        &self.slots[heading_bin(self.agent_heading).min(self.slots.len() - 1)]
    }

    pub fn local_tags(&self) -> BTreeSet<&str> {
        self.slots
            .iter()
            .filter(|s| s.navigable_to.is_none())
            .flat_map(|s| s.tags.iter().map(String::as_str))
            .collect()
    }
}
