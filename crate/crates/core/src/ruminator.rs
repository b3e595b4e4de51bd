//! The deliberate navigator.
//!
//! Each step runs perception, planning and prediction as three separate chat
//! calls over a textual rendering of the state ([`PromptBundle`]).

use std::f64::consts::FRAC_PI_4;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{LlmClient, LlmError, PromptContext, Stage};
use crate::memory::{MemoryBank, MemoryEntry, MemoryError, Plan, PlanOrigin, StepRecord};
use crate::runner::{Action, Mode};
use crate::world::{id_cmp, parse_instruction_tags, Instruction, Observation, WorldError, WorldGraph};

pub const NO_PREVIOUS_PLAN: &str = "no previous plan";

/// Spoken form of a move whose bearing is `rel` radians from the agent's
/// heading (counter-clockwise positive).
pub fn verbalize_action(rel: f64, target: &str) -> String {
    let rel = crate::world::wrap_angle(rel);
    let verb = if rel.abs() <= FRAC_PI_4 {
        "go forward to"
    } else if rel > FRAC_PI_4 && rel < 3.0 * FRAC_PI_4 {
        "turn left to"
    } else if (-3.0 * FRAC_PI_4..-FRAC_PI_4).contains(&rel) {
        "turn right to"
    } else {
        "turn back to"
    };
    format!("{verb} {target}")
}

#[derive(Debug, Error)]
pub enum RuminatorError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    World(#[from] WorldError),
}

fn letter(k: usize) -> char {
    char::from(b'A' + k as u8)
}

/// Navigable options in prompt order: by |relative heading|, then signed
/// heading, then id; the final option is always stop.
pub fn ordered_options(obs: &Observation) -> Vec<(Action, Option<f64>)> {
    let mut c: Vec<_> = obs.candidates.iter().collect();
    c.sort_by(|a, b| {
        a.relative_heading
            .abs()
            .total_cmp(&b.relative_heading.abs())
            .then(a.relative_heading.total_cmp(&b.relative_heading))
            .then(id_cmp(&a.target, &b.target))
    });
    let mut out: Vec<_> = c.into_iter().map(|c| (Action::move_to(c.target.clone()), Some(c.relative_heading))).collect();
    out.push((Action::Stop, None));
    out
}

fn tag_list(tags: &[String]) -> String {
    if tags.is_empty() {
        "nothing notable".into()
    } else {
        tags.join(", ")
    }
}

/// The five text blocks of the navigator prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction_block: String,
    pub observation_block: String,
    pub trajectory_block: String,
    pub map_block: String,
    pub option_block: String,
    pub options: Vec<Action>,
}

pub fn instruction_block(instruction: &Instruction) -> String {
    format!("Instruction: {}", instruction.text)
}

/// Every panorama slot as a tag list.
pub fn observation_block(obs: &Observation) -> String {
    let slots = obs
        .slots
        .iter()
        .map(|s| format!("img_{}: {}", s.index, tag_list(&s.tags)))
        .collect::<Vec<_>>()
        .join("; ");
    format!("Observation: {slots}")
}

impl PromptBundle {
    pub fn build(instruction: &Instruction, obs: &Observation, bank: &MemoryBank, world: &WorldGraph) -> Self {
        let (trajectory, map) = if bank.is_empty() {
            let mut near: Vec<&str> = obs.candidates.iter().map(|c| c.target.as_str()).collect();
            near.sort_by(|a, b| id_cmp(a, b));
            (
                format!("You begin the navigation at {}.", obs.viewpoint),
                format!("{} is connected with {}.", obs.viewpoint, near.join(", ")),
            )
        } else {
            bank.verbalize(world)
        };
        let opts = ordered_options(obs);
        let option_block = opts
            .iter()
            .enumerate()
            .map(|(k, (a, rel))| match (a, rel) {
                (Action::Move { target }, Some(rel)) => format!("{}. {}", letter(k), verbalize_action(*rel, target)),
                _ => format!("{}. stop", letter(k)),
            })
            .collect::<Vec<_>>()
            .join("; ");
        Self {
            instruction_block: instruction_block(instruction),
            observation_block: observation_block(obs),
            trajectory_block: format!("Trajectory: {trajectory}"),
            map_block: format!("Map: {map}"),
            option_block: format!("Option: {option_block}"),
            options: opts.into_iter().map(|(a, _)| a).collect(),
        }
    }

    pub fn render(&self) -> String {
        [
            &self.instruction_block,
            &self.observation_block,
            &self.trajectory_block,
            &self.map_block,
            &self.option_block,
        ]
        .map(String::as_str)
        .join("\n")
    }

    pub fn perception_prompt(&self) -> String {
        format!(
            "{}\n{}\nDescribe the surroundings in one or two sentences, naming the objects the instruction is likely to refer to.",
            self.instruction_block, self.observation_block
        )
    }

    pub fn planning_prompt(&self, prev_plan: Option<&Plan>, description: &str) -> String {
        format!(
            "{}\nPrevious plan: {}\nDescription: {}\n{}\n{}\nWrite the updated navigation plan.",
            self.instruction_block,
            prev_plan.map_or(NO_PREVIOUS_PLAN, |p| p.text.as_str()),
            description,
            self.trajectory_block,
            self.map_block
        )
    }

    pub fn prediction_prompt(&self, plan: Option<&Plan>, obs: &Observation) -> String {
        let navigable = obs
            .slots
            .iter()
            .filter(|s| s.navigable_to.is_some())
            .map(|s| format!("img_{}: {}", s.index, tag_list(&s.tags)))
            .collect::<Vec<_>>()
            .join("; ");
        format!(
            "{}\nPlan: {}\nObservation: {}\n{}\nAnswer with the letter of one option.",
            self.instruction_block,
            plan.map_or(NO_PREVIOUS_PLAN, |p| p.text.as_str()),
            if navigable.is_empty() { "no navigable directions" } else { &navigable },
            self.option_block
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub text: String,
    pub referenced_tags: Vec<String>,
}

fn context(obs: &Observation, bank: &MemoryBank, options: &[Action]) -> PromptContext {
    PromptContext {
        viewpoint: obs.viewpoint.clone(),
        start: bank.records().first().map_or_else(|| obs.viewpoint.clone(), |r| r.viewpoint.clone()),
        options: options.to_vec(),
    }
}

fn nonempty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Instruction objects mentioned in `text`.
pub fn referenced_tags(text: &str, instruction: &Instruction) -> Vec<String> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).collect();
    let mut out: Vec<String> = Vec::new();
    for tag in instruction.tags() {
        if words.contains(&tag.as_str()) && !out.contains(&tag) {
            out.push(tag);
        }
    }
    out
}

pub fn perceive(llm: &LlmClient, instruction: &Instruction, obs: &Observation, bank: &MemoryBank, world: &WorldGraph) -> Result<(SceneDescription, usize), LlmError> {
    let bundle = PromptBundle::build(instruction, obs, bank, world);
    let a = llm.ask(Stage::Perception, &bundle.perception_prompt(), Some(context(obs, bank, &bundle.options)), nonempty)?;
    let referenced = referenced_tags(&a.value, instruction);
    Ok((
        SceneDescription {
            text: a.value,
            referenced_tags: referenced,
        },
        a.retries,
    ))
}

/// New plan, or `None` when every reply was empty and the previous plan stands.
pub fn plan(
    llm: &LlmClient,
    instruction: &Instruction,
    description: &SceneDescription,
    obs: &Observation,
    bank: &MemoryBank,
    world: &WorldGraph,
) -> Result<Option<Plan>, LlmError> {
    let bundle = PromptBundle::build(instruction, obs, bank, world);
    let prompt = bundle.planning_prompt(bank.plan(), &description.text);
    match llm.ask(Stage::Planning, &prompt, Some(context(obs, bank, &bundle.options)), nonempty) {
        Ok(a) => Ok(Some(Plan {
            t: bank.current_t().unwrap_or(0),
            text: a.value,
            origin: PlanOrigin::Ruminator,
        })),
        Err(LlmError::Unparseable { .. }) => {
            tracing::warn!("empty plan replies; keeping the previous plan");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

static LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").expect("valid regex"));

/// First standalone capital letter naming a valid option.
pub fn parse_option(reply: &str, options: &[Action]) -> Option<Action> {
    LETTER
        .captures_iter(reply)
        .filter_map(|c| c[1].bytes().next())
        .map(|b| (b - b'A') as usize)
        .find(|&k| k < options.len())
        .map(|k| options[k].clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub action: Action,
    pub retries: usize,
    /// The reply never parsed and a fallback choice was made.
    pub degraded: bool,
}

pub fn predict(
    llm: &LlmClient,
    instruction: &Instruction,
    obs: &Observation,
    bank: &MemoryBank,
    world: &WorldGraph,
) -> Result<Prediction, LlmError> {
    let bundle = PromptBundle::build(instruction, obs, bank, world);
    let prompt = bundle.prediction_prompt(bank.plan(), obs);
    let options = bundle.options.clone();
    match llm.ask(Stage::Prediction, &prompt, Some(context(obs, bank, &options)), |r| parse_option(r, &options)) {
        Ok(a) => Ok(Prediction {
            action: a.value,
            retries: a.retries,
            degraded: false,
        }),
        Err(LlmError::Unparseable { attempts, .. }) => {
            let wanted = bank.plan().map(|p| parse_instruction_tags(&p.text)).unwrap_or_default();
            let by_tag = options.iter().find(|a| {
                a.target()
                    .and_then(|t| obs.candidate(t))
                    .is_some_and(|c| c.tags.iter().any(|t| wanted.contains(t)))
            });
            let action = by_tag.unwrap_or(&options[0]).clone();
            tracing::warn!(?action, "no parseable option; using fallback");
            Ok(Prediction {
                action,
                retries: attempts - 1,
                degraded: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Whether the record for the current viewpoint still has to be appended.
#[derive(Debug, Clone, PartialEq)]
pub enum Arrival {
    Recorded,
    Pending { action: Option<Action> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub viewpoint: String,
    pub heading: f64,
    pub arrival: Arrival,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuminatorStep {
    pub action: Action,
    pub description: SceneDescription,
    pub plan_kept: bool,
    pub degraded: bool,
    pub retries: usize,
}

/// One perception, planning and prediction cycle at `pose`.
pub fn step_ruminator(
    llm: &LlmClient,
    instruction: &Instruction,
    bank: &mut MemoryBank,
    world: &WorldGraph,
    pose: &Pose,
) -> Result<RuminatorStep, RuminatorError> {
    let obs = world.observe(&pose.viewpoint, pose.heading)?;
    let (description, r1) = perceive(llm, instruction, &obs, bank, world)?;
    let entry = MemoryEntry::SceneDescription {
        text: description.text.clone(),
    };
    match &pose.arrival {
        Arrival::Pending { action } => bank.append(StepRecord {
            t: bank.records().len(),
            viewpoint: pose.viewpoint.clone(),
            heading: pose.heading,
            action: action.clone(),
            mode: Mode::Ruminator,
            memory_entry: entry,
            neighbors: obs.candidates.iter().map(|c| c.target.clone()).collect(),
        })?,
        Arrival::Recorded => bank.set_entry(&pose.viewpoint, entry),
    }
    let new_plan = plan(llm, instruction, &description, &obs, bank, world)?;
    let plan_kept = new_plan.is_none();
    if let Some(p) = new_plan {
        bank.set_plan(p);
    }
    let pred = predict(llm, instruction, &obs, bank, world)?;
    Ok(RuminatorStep {
        action: pred.action,
        description,
        plan_kept,
        degraded: pred.degraded,
        retries: r1 + pred.retries,
    })
}
