use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ScorerError;
use crate::memory::MemoryBank;
use crate::world::{id_cmp, WorldGraph};

/// Displacement (3) + traversal order (1) + frontier flag (1).
pub const EDGE_DIM: usize = 5;

/// Position (3) + last visit (1) + visual embedding.
pub fn node_dim(feature_dim: usize) -> usize {
    4 + feature_dim
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub feature: Vec<f64>,
}

/// Visited and frontier viewpoints with traversal and observation edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGraph {
    pub ids: Vec<String>,
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<GraphEdge>,
}

impl TrajectoryGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Same graph with node `i` moved to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        let mut ids = vec![String::new(); n];
        let mut nodes = vec![Vec::new(); n];
        for i in 0..n {
            ids[perm[i]] = self.ids[i].clone();
            nodes[perm[i]] = self.nodes[i].clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|e| GraphEdge {
                src: perm[e.src],
                dst: perm[e.dst],
                feature: e.feature.clone(),
            })
            .collect();
        Self { ids, nodes, edges }
    }

    pub fn check(&self, node_dim: usize, edge_dim: usize) -> Result<(), ScorerError> {
        if self.nodes.is_empty() {
            return Err(ScorerError::Shape("graph has no nodes".into()));
        }
        if let Some((i, x)) = self.nodes.iter().enumerate().find(|(_, x)| x.len() != node_dim) {
            return Err(ScorerError::Shape(format!("node {i} has {} features, expected {node_dim}", x.len())));
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.src >= self.len() || e.dst >= self.len() {
                return Err(ScorerError::Shape(format!("edge {k} references a missing node")));
            }
            if e.feature.len() != edge_dim {
                return Err(ScorerError::Shape(format!(
                    "edge {k} has {} features, expected {edge_dim}",
                    e.feature.len()
                )));
            }
        }
        if self.nodes.iter().flatten().chain(self.edges.iter().flat_map(|e| &e.feature)).any(|x| !x.is_finite()) {
            return Err(ScorerError::Shape("non-finite feature".into()));
        }
        Ok(())
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Featurize the bank's history as a trajectory graph.
///
/// Timesteps are divided by `step_cap`; frontier nodes get last visit -1.
/// Positions are metres relative to the first recorded viewpoint.
pub fn build_features(bank: &MemoryBank, world: &WorldGraph, step_cap: usize) -> Result<TrajectoryGraph, ScorerError> {
    let first = bank.records().first().ok_or(ScorerError::EmptyBank)?;
    let origin = world.position(&first.viewpoint)?;
    let cap = step_cap.max(1) as f64;
    let map = bank.map();

    let mut ids: Vec<String> = map.nodes.iter().cloned().collect();
    ids.sort_by(|a, b| id_cmp(a, b));
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut nodes = Vec::with_capacity(ids.len());
    for id in &ids {
        let rel = sub(world.position(id)?, origin);
        let mut x = rel.to_vec();
        let embedding = if map.is_visited(id) {
            x.push(map.last_visit[id] as f64 / cap);
            world.get(id)?.panorama_embedding()
        } else {
            x.push(-1.0);
            let mut acc = vec![0.0; world.feature_dim];
            let mut seen = 0usize;
            for v in map.adjacent(id).into_iter().filter(|v| map.is_visited(v)) {
                if let Some(slot) = world.get(v)?.slot_towards(id) {
                    for (a, f) in acc.iter_mut().zip(&slot.feature) {
                        *a += f;
                    }
                    seen += 1;
                }
            }
            if seen > 0 {
                acc.iter_mut().for_each(|a| *a /= seen as f64);
            }
            acc
        };
        x.extend(embedding);
        nodes.push(x);
    }

    let mut edges = Vec::new();
    let records = bank.records();
    for (k, pair) in records.windows(2).enumerate() {
        let (a, b) = (&pair[0].viewpoint, &pair[1].viewpoint);
        if a == b {
            continue;
        }
        let d = sub(world.position(b)?, world.position(a)?);
        edges.push(GraphEdge {
            src: index[a.as_str()],
            dst: index[b.as_str()],
            feature: vec![d[0], d[1], d[2], (k + 1) as f64 / cap, 0.0],
        });
    }
    for (a, b) in &map.edges {
        if map.is_visited(a) == map.is_visited(b) {
            continue;
        }
        for (s, t) in [(a, b), (b, a)] {
            let d = sub(world.position(t)?, world.position(s)?);
            edges.push(GraphEdge {
                src: index[s.as_str()],
                dst: index[t.as_str()],
                feature: vec![d[0], d[1], d[2], 0.0, 1.0],
            });
        }
    }
    Ok(TrajectoryGraph { ids, nodes, edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{MemoryEntry, StepRecord};
    use crate::runner::{Action, Mode};
    use crate::world::{generate_world, WorldParams};

    fn walk(world: &WorldGraph, path: &[&str]) -> MemoryBank {
        let mut bank = MemoryBank::new();
        for (t, vp) in path.iter().enumerate() {
            bank.append(StepRecord {
                t,
                viewpoint: vp.to_string(),
                heading: 0.0,
                action: (t > 0).then(|| Action::move_to(*vp)),
                mode: Mode::Runner,
                memory_entry: MemoryEntry::OrientedView {
                    feature: vec![],
                    tags: vec![],
                },
                neighbors: world.neighbors(vp).unwrap().into_iter().map(String::from).collect(),
            })
            .unwrap();
        }
        bank
    }

    fn line(world: &WorldGraph, len: usize) -> Vec<String> {
        let mut path = vec![world.viewpoints[0].id.clone()];
        while path.len() < len {
            let here = path.last().unwrap().clone();
            let next = world
                .neighbors(&here)
                .unwrap()
                .into_iter()
                .find(|n| !path.iter().any(|p| p == n))
                .expect("fresh neighbour");
            path.push(next.to_string());
        }
        path
    }

    #[test]
    fn single_step_has_only_frontier_edges() {
        let w = generate_world(&WorldParams::new(1, 30, 3.0)).unwrap();
        let a = &w.viewpoints[0].id;
        let g = build_features(&walk(&w, &[a]), &w, 40).unwrap();
        let deg = w.neighbors(a).unwrap().len();
        assert_eq!(g.len(), 1 + deg);
        assert!(g.edges.iter().all(|e| e.feature[4] == 1.0));
        assert_eq!(g.edges.len(), 2 * deg);
        let i = g.index_of(a).unwrap();
        assert_eq!(&g.nodes[i][..4], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn traversal_edges_follow_the_path() {
        let w = generate_world(&WorldParams::new(1, 30, 3.0)).unwrap();
        let p = line(&w, 3);
        let refs: Vec<&str> = p.iter().map(String::as_str).collect();
        let g = build_features(&walk(&w, &refs), &w, 40).unwrap();
        let walked: Vec<(String, String)> = g
            .edges
            .iter()
            .filter(|e| e.feature[4] == 0.0)
            .map(|e| (g.ids[e.src].clone(), g.ids[e.dst].clone()))
            .collect();
        assert_eq!(walked, vec![(p[0].clone(), p[1].clone()), (p[1].clone(), p[2].clone())]);
        let c = g.index_of(&p[2]).unwrap();
        assert_eq!(g.nodes[c][3], 2.0 / 40.0);
    }

    #[test]
    fn frontier_embedding_averages_directional_views() {
        let w = generate_world(&WorldParams::new(4, 60, 4.0)).unwrap();
        // find visited pair a-b sharing an unvisited neighbour f
        let (a, b, f) = w
            .viewpoints
            .iter()
            .find_map(|v| {
                let na = w.neighbors(&v.id).unwrap();
                na.iter().find_map(|b| {
                    let nb = w.neighbors(b).unwrap();
                    na.iter()
                        .find(|f| **f != *b && nb.contains(f))
                        .map(|f| (v.id.clone(), b.to_string(), f.to_string()))
                })
            })
            .expect("a triangle");
        let g = build_features(&walk(&w, &[&a, &b]), &w, 40).unwrap();
        let e1 = &w.get(&a).unwrap().slot_towards(&f).unwrap().feature;
        let e2 = &w.get(&b).unwrap().slot_towards(&f).unwrap().feature;
        let node = &g.nodes[g.index_of(&f).unwrap()];
        assert_eq!(node[3], -1.0);
        for k in 0..w.feature_dim {
            assert!((node[4 + k] - (e1[k] + e2[k]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_bank_is_rejected() {
        let w = generate_world(&WorldParams::new(1, 10, 3.0)).unwrap();
        assert!(matches!(build_features(&MemoryBank::new(), &w, 40), Err(ScorerError::EmptyBank)));
    }
}
