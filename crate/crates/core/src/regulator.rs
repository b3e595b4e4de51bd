//! Switching controller between the fast policy and the deliberate navigator.
//!
//! Stage 1 checks, in order, looping (revisits or trajectory length), the
//! learned anomaly score and, when the fast policy wants to stop, an LLM
//! verification that the agent is at the destination. Stage 2 asks the LLM
//! whether to continue from here or restart from the initial viewpoint.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{LlmClient, LlmError, PromptContext, Stage};
use crate::memory::{MemoryBank, Plan, PlanOrigin};
use crate::num::Scalar;
use crate::ruminator::{instruction_block, observation_block, PromptBundle};
use crate::runner::Action;
use crate::scorer::{score, GatParams, ScorerError};
use crate::world::{Instruction, Observation, WorldGraph};

/// What to do when the ending check gets no usable answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndingFallback {
    AcceptStop,
    Switch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorConfig {
    pub tau_r: usize,
    pub tau_l: usize,
    pub tau_g: f64,
    pub looping: bool,
    pub scoring: bool,
    pub ending: bool,
    pub formulation: bool,
    pub step_cap: usize,
    /// Jump straight to the start on restart instead of walking back.
    pub restart_teleport: bool,
    pub ending_fallback: EndingFallback,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            tau_r: 4,
            tau_l: 20,
            tau_g: 0.35,
            looping: true,
            scoring: true,
            ending: true,
            formulation: true,
            step_cap: 40,
            restart_teleport: false,
            ending_fallback: EndingFallback::AcceptStop,
        }
    }
}

impl RegulatorConfig {
    /// No criterion enabled: the fast policy navigates alone.
    pub fn runner_alone(step_cap: usize) -> Self {
        Self {
            looping: false,
            scoring: false,
            ending: false,
            formulation: false,
            step_cap,
            ..Self::default()
        }
    }

    pub fn any_criterion(&self) -> bool {
        self.looping || self.scoring || self.ending
    }

    pub fn validate(&self) -> Result<(), RegulatorError> {
        let bad = |m: String| Err(RegulatorError::Config(m));
        if self.tau_r < 1 || self.tau_l < 1 {
            return bad(format!("tau_r = {} and tau_l = {} must be at least 1", self.tau_r, self.tau_l));
        }
        if !(self.tau_g > 0.0 && self.tau_g < 1.0) {
            return bad(format!("tau_g = {} must lie in (0, 1)", self.tau_g));
        }
        if self.step_cap < self.tau_l {
            return bad(format!("step_cap = {} must be at least tau_l = {}", self.step_cap, self.tau_l));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RegulatorError {
    #[error("invalid regulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchReason {
    Looping,
    Scoring,
    Ending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    Proceed,
    Switch(SwitchReason),
    EndEpisode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndingCheck {
    pub at_goal: bool,
    pub retries: usize,
    /// No usable answer; the configured fallback decided.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ending: Option<EndingCheck>,
}

/// Revisit count above `tau_r` or trajectory length above `tau_l`.
pub fn looping_fires(cfg: &RegulatorConfig, bank: &MemoryBank) -> bool {
    bank.max_revisit() > cfg.tau_r || bank.trajectory_len() > cfg.tau_l
}

pub fn scoring_fires(cfg: &RegulatorConfig, score: f64) -> bool {
    score > cfg.tau_g
}

/// Stage 1. Call only while the fast policy is in control.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<S: Scalar>(
    cfg: &RegulatorConfig,
    bank: &MemoryBank,
    scorer: Option<&GatParams<S>>,
    world: &WorldGraph,
    action: &Action,
    llm: &LlmClient,
    instruction: &Instruction,
    obs: &Observation,
) -> Result<Evaluation, RegulatorError> {
    let mut ev = Evaluation {
        decision: Decision::Proceed,
        score: None,
        ending: None,
    };
    if cfg.looping && looping_fires(cfg, bank) {
        ev.decision = Decision::Switch(SwitchReason::Looping);
        return Ok(ev);
    }
    if cfg.scoring {
        if let Some(params) = scorer {
            let s = score(params, bank, world, cfg.step_cap)?;
            ev.score = Some(s);
            if scoring_fires(cfg, s) {
                ev.decision = Decision::Switch(SwitchReason::Scoring);
                return Ok(ev);
            }
        }
    }
    if action.is_stop() {
        ev.decision = Decision::EndEpisode;
        if cfg.ending {
            let check = check_ending(cfg, llm, instruction, obs, bank)?;
            ev.ending = Some(check);
            if !check.at_goal {
                ev.decision = Decision::Switch(SwitchReason::Ending);
            }
        }
    }
    Ok(ev)
}

static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").expect("valid regex"));

pub fn parse_yes_no(reply: &str) -> Option<bool> {
    YES_NO.captures(reply).map(|c| c[1].eq_ignore_ascii_case("yes"))
}

pub fn ending_prompt(instruction: &Instruction, obs: &Observation) -> String {
    format!(
        "{}\n{}\nIs the current location the destination described in the instruction? Answer yes or no.",
        instruction_block(instruction),
        observation_block(obs)
    )
}

/// Ask whether the agent stands at the destination.
pub fn check_ending(
    cfg: &RegulatorConfig,
    llm: &LlmClient,
    instruction: &Instruction,
    obs: &Observation,
    bank: &MemoryBank,
) -> Result<EndingCheck, LlmError> {
    let ctx = PromptContext {
        viewpoint: obs.viewpoint.clone(),
        start: bank.records().first().map_or_else(|| obs.viewpoint.clone(), |r| r.viewpoint.clone()),
        options: vec![],
    };
    match llm.ask(Stage::Ending, &ending_prompt(instruction, obs), Some(ctx), parse_yes_no) {
        Ok(a) => Ok(EndingCheck {
            at_goal: a.value,
            retries: a.retries,
            fallback: false,
        }),
        Err(e) => {
            let retries = match &e {
                LlmError::Unparseable { attempts, .. } => attempts - 1,
                _ => 0,
            };
            let at_goal = cfg.ending_fallback == EndingFallback::AcceptStop;
            tracing::warn!(error = %e, at_goal, "ending check failed; applying fallback");
            Ok(EndingCheck {
                at_goal,
                retries,
                fallback: true,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulationKind {
    Continue,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulationOutcome {
    pub kind: FormulationKind,
    pub plan: Plan,
    pub retries: usize,
    /// No usable answer; continued with a stub plan.
    pub fallback: bool,
}

pub const STUB_PLAN: &str = "Continue toward the destination described in the instruction.";

static DECISION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)DECISION:\s*(CONTINUE|RESTART)\b").expect("valid regex"));
static PLAN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)PLAN:\s*(.*?)\s*$").expect("valid regex"));

pub fn parse_formulation(reply: &str) -> Option<(FormulationKind, String)> {
    let kind = match DECISION.captures(reply)?[1].to_ascii_uppercase().as_str() {
        "RESTART" => FormulationKind::Restart,
        _ => FormulationKind::Continue,
    };
    let plan = PLAN.captures(reply).map(|c| c[1].to_string()).unwrap_or_default();
    Some((kind, if plan.is_empty() { STUB_PLAN.to_string() } else { plan }))
}

pub fn formulation_prompt(instruction: &Instruction, bank: &MemoryBank, obs: &Observation, world: &WorldGraph) -> String {
    let b = PromptBundle::build(instruction, obs, bank, world);
    format!(
        "{}\n{}\n{}\n{}\nThe navigation has gone off course. Decide whether to continue from here or to restart from the initial viewpoint, and give a corrective plan. Reply in the form:\nDECISION: CONTINUE or RESTART\nPLAN: <plan>",
        b.instruction_block, b.observation_block, b.trajectory_block, b.map_block
    )
}

/// Stage 2: continue with a corrective plan or restart.
pub fn critical_formulation(
    llm: &LlmClient,
    instruction: &Instruction,
    bank: &MemoryBank,
    obs: &Observation,
    world: &WorldGraph,
) -> Result<FormulationOutcome, LlmError> {
    let ctx = PromptContext {
        viewpoint: obs.viewpoint.clone(),
        start: bank.records().first().map_or_else(|| obs.viewpoint.clone(), |r| r.viewpoint.clone()),
        options: vec![],
    };
    let t = bank.current_t().unwrap_or(0);
    match llm.ask(Stage::Formulation, &formulation_prompt(instruction, bank, obs, world), Some(ctx), parse_formulation) {
        Ok(a) => Ok(FormulationOutcome {
            kind: a.value.0,
            plan: Plan {
                t,
                text: a.value.1,
                origin: PlanOrigin::Formulation,
            },
            retries: a.retries,
            fallback: false,
        }),
        Err(LlmError::Unparseable { attempts, .. }) => {
            tracing::warn!("formulation reply unparseable; continuing with a stub plan");
            Ok(FormulationOutcome {
                kind: FormulationKind::Continue,
                plan: Plan {
                    t,
                    text: STUB_PLAN.to_string(),
                    origin: PlanOrigin::Formulation,
                },
                retries: attempts - 1,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(PartialEq)]
struct Item(f64, String);

impl Eq for Item {}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Shortest path from `from` to `to` using only visited viewpoints and
/// edges the bank has seen.
pub fn retrace_path(bank: &MemoryBank, world: &WorldGraph, from: &str, to: &str) -> Option<Vec<String>> {
    let map = bank.map();
    let visited: BTreeSet<&str> = map.visit_count.iter().filter(|(_, &c)| c > 0).map(|(k, _)| k.as_str()).collect();
    if !visited.contains(from) || !visited.contains(to) {
        return None;
    }
    let mut dist: BTreeMap<String, f64> = BTreeMap::new();
    let mut prev: BTreeMap<String, String> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(from.to_string(), 0.0);
    heap.push(Item(0.0, from.to_string()));
    while let Some(Item(d, u)) = heap.pop() {
        if u == to {
            break;
        }
        if d > dist[&u] {
            continue;
        }
        for v in map.adjacent(&u) {
            if !visited.contains(v) {
                continue;
            }
            let nd = d + world.distance(&u, v).ok()?;
            if dist.get(v).is_none_or(|&old| nd < old) {
                dist.insert(v.to_string(), nd);
                prev.insert(v.to_string(), u.clone());
                heap.push(Item(nd, v.to_string()));
            }
        }
    }
    if !dist.contains_key(to) {
        return None;
    }
    let mut path = vec![to.to_string()];
    while path.last().map(String::as_str) != Some(from) {
        path.push(prev[path.last().expect("non-empty")].clone());
    }
    path.reverse();
    Some(path)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::llm::ScriptedTransport;
    use crate::memory::{MemoryEntry, StepRecord};
    use crate::runner::Mode;
    use crate::world::{generate_world, WorldParams};

    fn bank_of(path: &[&str]) -> MemoryBank {
        let mut bank = MemoryBank::new();
        for (t, v) in path.iter().enumerate() {
            bank.append(StepRecord {
                t,
                viewpoint: v.to_string(),
                heading: 0.0,
                action: (t > 0).then(|| Action::move_to(*v)),
                mode: Mode::Runner,
                memory_entry: MemoryEntry::OrientedView {
                    feature: vec![],
                    tags: vec![],
                },
                neighbors: vec![],
            })
            .unwrap();
        }
        bank
    }

    #[test]
    fn config_bounds() {
        assert!(RegulatorConfig::default().validate().is_ok());
        let bad = RegulatorConfig {
            tau_g: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegulatorConfig {
            step_cap: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_yes_no("Yes, this is it."), Some(true));
        assert_eq!(parse_yes_no("no"), Some(false));
        assert_eq!(parse_yes_no("maybe"), None);
        assert_eq!(parse_yes_no("nothing"), None);
        assert_eq!(
            parse_formulation("DECISION: RESTART\nPLAN: head to the kitchen first"),
            Some((FormulationKind::Restart, "head to the kitchen first".to_string()))
        );
        assert_eq!(parse_formulation("DECISION: CONTINUE\nPLAN: go on").unwrap().0, FormulationKind::Continue);
        assert_eq!(parse_formulation("restart please"), None);
    }

    #[test]
    fn ending_retries_then_rejects() {
        let w = generate_world(&WorldParams::new(2, 10, 3.0)).unwrap();
        let obs = w.observe(&w.viewpoints[0].id, 0.0).unwrap();
        let instr = Instruction {
            text: "Bring me the lamp.".into(),
            style: crate::world::InstructionStyle::CoarseGrained,
        };
        let llm = LlmClient::new(Arc::new(ScriptedTransport::replies(["maybe", "maybe", "No"])));
        let c = check_ending(&RegulatorConfig::default(), &llm, &instr, &obs, &MemoryBank::new()).unwrap();
        assert_eq!(c, EndingCheck { at_goal: false, retries: 2, fallback: false });
        let llm = LlmClient::new(Arc::new(ScriptedTransport::replies(["maybe"; 3])));
        let c = check_ending(&RegulatorConfig::default(), &llm, &instr, &obs, &MemoryBank::new()).unwrap();
        assert!(c.at_goal && c.fallback);
    }

    #[test]
    fn looping_thresholds_are_strict() {
        let cfg = RegulatorConfig::default();
        let pingpong = |n: usize| -> Vec<&str> { (0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect() };
        // a visited 4 times: a b a b a b a
        assert!(!looping_fires(&cfg, &bank_of(&pingpong(7))));
        assert!(looping_fires(&cfg, &bank_of(&pingpong(9))));
        let names: Vec<String> = (0..22).map(|i| format!("v{i}")).collect();
        let line: Vec<&str> = names.iter().map(String::as_str).collect();
        assert!(!looping_fires(&cfg, &bank_of(&line[..21])));
        assert!(looping_fires(&cfg, &bank_of(&line[..22])));
    }

    #[test]
    fn retrace_stays_inside_visited_map() {
        let w = generate_world(&WorldParams::new(6, 40, 3.0)).unwrap();
        let a = w.viewpoints[0].id.clone();
        let mut path = vec![a.clone()];
        for _ in 0..6 {
            let here = path.last().unwrap().clone();
            let next = w.neighbors(&here).unwrap().into_iter().find(|n| !path.iter().any(|p| p == n)).unwrap().to_string();
            path.push(next);
        }
        let mut bank = MemoryBank::new();
        for (t, v) in path.iter().enumerate() {
            bank.append(StepRecord {
                t,
                viewpoint: v.clone(),
                heading: 0.0,
                action: (t > 0).then(|| Action::move_to(v.clone())),
                mode: Mode::Runner,
                memory_entry: MemoryEntry::OrientedView { feature: vec![], tags: vec![] },
                neighbors: w.neighbors(v).unwrap().into_iter().map(String::from).collect(),
            })
            .unwrap();
        }
        let back = retrace_path(&bank, &w, path.last().unwrap(), &a).unwrap();
        assert_eq!(back.first(), path.last());
        assert_eq!(back.last(), Some(&a));
        assert!(back.iter().all(|v| path.contains(v)));
        assert!(back.len() <= path.len());
        for s in back.windows(2) {
            assert!(w.neighbors(&s[0]).unwrap().contains(&s[1].as_str()));
        }
    }
}
