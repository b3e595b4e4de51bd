//! Learned trajectory-anomaly scorer.
//!
//! The history is featurized as a [`TrajectoryGraph`] (visited and frontier
//! viewpoints, traversal and observation edges) and scored by a two-layer
//! graph attention network ([`GatParams`]). Training data come from fast
//! policy rollouts labelled after each episode ends: a snapshot is nominal (0)
//! when the episode succeeded or every viewpoint visited so far lies on the
//! ground-truth path, anomalous (1) otherwise.

mod features;
mod gat;
mod train;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryBank;
use crate::num::Scalar;
use crate::runner::Policy;
use crate::world::{Episode, WorldGraph};

pub use features::{build_features, node_dim, GraphEdge, TrajectoryGraph, EDGE_DIM};
pub use gat::{forward, loss, loss_and_grad, logit, GatParams, PreparedGraph};
pub use train::{split_by_episode, train_scorer, ScorerSettings, ScorerTrainReport};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("cannot featurize an empty memory bank")]
    EmptyBank,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training needs both labels present")]
    SingleClass,
    #[error("scorer training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("{path}:{line}: {message}")]
    Snapshot { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
    #[error(transparent)]
    Checkpoint(#[from] crate::params::CheckpointError),
    #[error("rollout failed: {0}")]
    Rollout(String),
}

/// Anomaly probability of the current history.
pub fn score<S: Scalar>(params: &GatParams<S>, bank: &MemoryBank, world: &WorldGraph, step_cap: usize) -> Result<f64, ScorerError> {
    let g = build_features(bank, world, step_cap)?;
    Ok(forward(params, &g)?.to_f64_lossy())
}

/// Nominal (0) iff the episode succeeded or the visited prefix stays on `gt_path`.
pub fn pseudo_label(visited: &[String], gt_path: &[String], success: bool) -> u8 {
    if success || visited.iter().all(|v| gt_path.contains(v)) {
        0
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSnapshot {
    pub episode: String,
    pub t: usize,
    pub label: u8,
    /// Outcome of the whole episode; known only once it ended.
    pub success: bool,
    /// Viewpoints visited up to and including `t`.
    pub trajectory: Vec<String>,
    pub graph: TrajectoryGraph,
}

/// Roll the fast policy alone on each episode and label every timestep.
pub fn collect_snapshots(
    sets: &[(&WorldGraph, &[Episode])],
    policy: &dyn Policy,
    step_cap: usize,
) -> Result<Vec<LabeledSnapshot>, ScorerError> {
    let jobs: Vec<(&WorldGraph, &Episode)> = sets.iter().flat_map(|(w, eps)| eps.iter().map(move |e| (*w, e))).collect();
    let per: Vec<Result<Vec<LabeledSnapshot>, ScorerError>> = jobs
        .par_iter()
        .map(|(world, ep)| {
            let rollout = crate::harness::runner_rollout(world, ep, policy, step_cap).map_err(|e| ScorerError::Rollout(e.to_string()))?;
            let success = crate::harness::is_success(world, rollout.final_viewpoint(), &ep.goal)?;
            let mut bank = MemoryBank::new();
            let mut visited = Vec::new();
            let mut out = Vec::with_capacity(rollout.records.len());
            for r in &rollout.records {
                bank.append(r.clone()).map_err(|e| ScorerError::Rollout(e.to_string()))?;
                visited.push(r.viewpoint.clone());
                out.push(LabeledSnapshot {
                    episode: ep.id.clone(),
                    t: r.t,
                    label: pseudo_label(&visited, &ep.gt_path, success),
                    success,
                    trajectory: visited.clone(),
                    graph: build_features(&bank, world, step_cap)?,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for p in per {
        all.extend(p?);
    }
    Ok(all)
}

pub fn save_snapshots(path: impl AsRef<Path>, snapshots: &[LabeledSnapshot]) -> Result<(), ScorerError> {
    let path = path.as_ref();
    let io = |source| ScorerError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for s in snapshots {
        let line = serde_json::to_string(s).expect("snapshot serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn load_snapshots(path: impl AsRef<Path>) -> Result<Vec<LabeledSnapshot>, ScorerError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScorerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ScorerError::Snapshot {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Area under the ROC curve via the Mann-Whitney statistic (ties count half).
/// `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    Some((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn label_rule() {
        let gt = ids(&["a", "b", "c"]);
        assert_eq!(pseudo_label(&ids(&["a", "x"]), &gt, true), 0);
        assert_eq!(pseudo_label(&ids(&["a", "b", "a", "b"]), &gt, false), 0);
        assert_eq!(pseudo_label(&ids(&["a", "b", "x"]), &gt, false), 1);
    }

    #[test]
    fn auc_of_known_orderings() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]), Some(0.0));
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]), Some(0.5));
        // one discordant pair out of four
        assert_eq!(auc(&[0.1, 0.6, 0.5, 0.9], &[0, 0, 1, 1]), Some(0.75));
        assert_eq!(auc(&[0.1], &[1]), None);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(xs in proptest::collection::vec((0u8..5, 0u8..2), 2..40)) {
            let scores: Vec<f64> = xs.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<u8> = xs.iter().map(|(_, y)| *y).collect();
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            match auc(&scores, &labels) {
                Some(a) => prop_assert!((a - num / den).abs() < 1e-12),
                None => prop_assert_eq!(den, 0.0),
            }
        }
    }
}
