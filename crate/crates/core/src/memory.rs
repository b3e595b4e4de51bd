//! The memory bank shared by the fast policy and the LLM navigator.
//!
//! It accumulates the step history, the observed topological map (visited
//! viewpoints plus their observed-but-unvisited neighbours), one memory entry
//! per viewpoint and the active plan. Everything in [`ObservedMap`] is a pure
//! function of the ordered [`StepRecord`] list; see [`MemoryBank::replay`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ruminator::verbalize_action;
use crate::runner::{Action, Mode};
use crate::world::{id_cmp, wrap_angle, WorldGraph};

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("out-of-order record: expected t={expected}, got t={got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("record t={t}: {mode:?} mode must record a {expected} entry")]
    EntryKind { t: usize, mode: Mode, expected: &'static str },
    #[error("record t={t}: first record carries no action, later ones must")]
    ActionPresence { t: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryEntry {
    /// The slot faced on arrival (recorded while the fast policy drives).
    OrientedView { feature: Vec<f64>, tags: Vec<String> },
    /// Surrounding description produced by the LLM navigator.
    SceneDescription { text: String },
}

impl MemoryEntry {
    pub fn render(&self) -> String {
        match self {
            MemoryEntry::OrientedView { tags, .. } if tags.is_empty() => "nothing notable".to_string(),
            MemoryEntry::OrientedView { tags, .. } => tags.join(", "),
            MemoryEntry::SceneDescription { text } => text.clone(),
        }
    }

    fn expected_for(mode: Mode) -> &'static str {
        match mode {
            Mode::Runner => "oriented_view",
            Mode::Ruminator => "scene_description",
        }
    }

    fn matches(&self, mode: Mode) -> bool {
        matches!(
            (self, mode),
            (MemoryEntry::OrientedView { .. }, Mode::Runner) | (MemoryEntry::SceneDescription { .. }, Mode::Ruminator)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub viewpoint: String,
    /// Agent heading on arrival.
    pub heading: f64,
    /// Action that brought the agent here; absent for the first record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    pub mode: Mode,
    pub memory_entry: MemoryEntry,
    /// Navigable neighbours observed on arrival.
    pub neighbors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservedMap {
    pub nodes: BTreeSet<String>,
    /// Unordered pairs stored with the smaller id first.
    pub edges: BTreeSet<(String, String)>,
    pub last_visit: BTreeMap<String, usize>,
    /// Zero for frontier nodes.
    pub visit_count: BTreeMap<String, usize>,
}

impl ObservedMap {
    fn add_edge(&mut self, a: &str, b: &str) {
        if a == b {
            return;
        }
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.edges.insert((x.to_string(), y.to_string()));
    }

    pub fn is_visited(&self, id: &str) -> bool {
        self.visit_count.get(id).is_some_and(|&c| c > 0)
    }

    pub fn frontier(&self) -> impl Iterator<Item = &str> {
        self.visit_count
            .iter()
            .filter(|(_, &c)| c == 0)
            .map(|(k, _)| k.as_str())
    }

    /// Neighbours of `id` in the observed map, naturally ordered.
    pub fn adjacent(&self, id: &str) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .edges
            .iter()
            .filter_map(|(a, b)| {
                if a == id {
                    Some(b.as_str())
                } else if b == id {
                    Some(a.as_str())
                } else {
                    None
                }
            })
            .collect();
        out.sort_by(|a, b| id_cmp(a, b));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOrigin {
    Ruminator,
    Formulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub t: usize,
    pub text: String,
    pub origin: PlanOrigin,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    records: Vec<StepRecord>,
    map: ObservedMap,
    entries: BTreeMap<String, MemoryEntry>,
    plan: Option<Plan>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild a bank from a record list.
    pub fn replay(records: &[StepRecord]) -> Result<Self, MemoryError> {
        let mut bank = Self::new();
        for r in records {
            bank.append(r.clone())?;
        }
        Ok(bank)
    }

    pub fn append(&mut self, record: StepRecord) -> Result<(), MemoryError> {
        let expected = self.records.len();
        if record.t != expected {
            return Err(MemoryError::OutOfOrder { expected, got: record.t });
        }
        if record.action.is_some() == (record.t == 0) {
            return Err(MemoryError::ActionPresence { t: record.t });
        }
        if !record.memory_entry.matches(record.mode) {
            return Err(MemoryError::EntryKind {
                t: record.t,
                mode: record.mode,
                expected: MemoryEntry::expected_for(record.mode),
            });
        }
        let vp = record.viewpoint.clone();
        if let Some(prev) = self.records.last() {
            let prev = prev.viewpoint.clone();
            self.map.add_edge(&prev, &vp);
        }
        self.map.nodes.insert(vp.clone());
        *self.map.visit_count.entry(vp.clone()).or_insert(0) += 1;
        self.map.last_visit.insert(vp.clone(), record.t);
        for n in &record.neighbors {
            self.map.nodes.insert(n.clone());
            self.map.visit_count.entry(n.clone()).or_insert(0);
            self.map.add_edge(&vp, n);
        }
        self.entries.insert(vp, record.memory_entry.clone());
        self.records.push(record);
        Ok(())
    }

    /// Overwrite the memory entry of an already visited viewpoint.
    pub fn set_entry(&mut self, viewpoint: &str, entry: MemoryEntry) {
        self.entries.insert(viewpoint.to_string(), entry);
    }

    pub fn set_plan(&mut self, plan: Plan) {
        self.plan = Some(plan);
    }

    pub fn plan(&self) -> Option<&Plan> {
        self.plan.as_ref()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn map(&self) -> &ObservedMap {
        &self.map
    }

    pub fn entry(&self, viewpoint: &str) -> Option<&MemoryEntry> {
        self.entries.get(viewpoint)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn current_t(&self) -> Option<usize> {
        self.records.last().map(|r| r.t)
    }

    /// Largest visit count over all viewpoints (0 when empty).
    pub fn max_revisit(&self) -> usize {
        self.map.visit_count.values().copied().max().unwrap_or(0)
    }

    /// Number of actions taken.
    pub fn trajectory_len(&self) -> usize {
        self.records.iter().filter(|r| r.action.is_some()).count()
    }

    /// Visited viewpoints in the order of first visit.
    pub fn visit_order(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.viewpoint.as_str()))
            .map(|r| r.viewpoint.as_str())
            .collect()
    }

    /// Render the trajectory and map blocks of the navigator prompt.
    pub fn verbalize(&self, world: &WorldGraph) -> (String, String) {
        let see = |vp: &str| self.entry(vp).map_or_else(|| "nothing notable".to_string(), MemoryEntry::render);
        let mut traj = String::new();
        for (k, r) in self.records.iter().enumerate() {
            if k == 0 {
                traj.push_str(&format!("You begin the navigation at {} where you see {}", r.viewpoint, see(&r.viewpoint)));
                continue;
            }
            let prev = &self.records[k - 1];
            let act = match &r.action {
                Some(Action::Move { target }) => {
                    let rel = world
                        .get(&prev.viewpoint)
                        .ok()
                        .and_then(|v| v.slot_towards(target))
                        .map_or(0.0, |s| wrap_angle(s.heading - prev.heading));
                    verbalize_action(rel, target)
                }
                _ => format!("go forward to {}", r.viewpoint),
            };
            traj.push_str(&format!("; step {k}: {act} where you see {}", see(&r.viewpoint)));
        }
        if !traj.is_empty() {
            traj.push('.');
        }

        let map = self
            .visit_order()
            .into_iter()
            .map(|v| format!("{v} is connected with {}", self.map.adjacent(v).join(", ")))
            .collect::<Vec<_>>()
            .join("; ");
        let map = if map.is_empty() { map } else { map + "." };
        (traj, map)
    }
}
