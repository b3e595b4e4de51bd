//! Episode orchestration, metrics, benchmark suites and ablations.

mod episode;
mod metrics;
mod suite;

use thiserror::Error;

use crate::runner::Policy;
use crate::world::{geodesic, Episode, WorldError, WorldGraph};

pub use episode::{run_episode, EpisodeResult, EpisodeSetup, EpisodeTrace, SwitchEvent, Termination, WallTimes};
pub use metrics::{metrics, render_table, spl_term, SuiteReport};
pub use suite::{
    ablate, build_workload, run_suite, standard_runner, Arm, LlmSpec, SuiteOutput, SuiteRun, Switch, WorkloadSpec,
    STANDARD_NOISE, STANDARD_PREMATURE_STOP_PROB, STANDARD_TRAP_PROB,
};

/// Log line schema tag.
pub const LOG_SCHEMA: &str = "r3.episode.v1";
/// Navigation error below which an episode counts as a success, in metres.
pub const SUCCESS_RADIUS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Memory(#[from] crate::memory::MemoryError),
    #[error(transparent)]
    Regulator(#[from] crate::regulator::RegulatorError),
    #[error(transparent)]
    Ruminator(#[from] crate::ruminator::RuminatorError),
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
    #[error("policy moved from {from} to {to}, which is not a navigable candidate")]
    InvalidMove { from: String, to: String },
    #[error("no path from {from} back to {to} inside the visited map")]
    Retrace { from: String, to: String },
    #[error("report {0:?} has no episodes")]
    EmptyReport(String),
    #[error("the scoring criterion is enabled but no scorer parameters were given")]
    MissingScorer,
    #[error("unknown ablation switch {0:?}")]
    UnknownSwitch(String),
    #[error("episode {episode} failed: {message}")]
    Episode { episode: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Geodesic distance to the goal below [`SUCCESS_RADIUS`].
pub fn is_success(world: &WorldGraph, viewpoint: &str, goal: &str) -> Result<bool, WorldError> {
    Ok(geodesic(world, viewpoint, goal)?.0 < SUCCESS_RADIUS)
}

/// Sum of edge lengths between consecutive viewpoints; jumps between
/// non-adjacent viewpoints contribute nothing.
pub fn path_length(world: &WorldGraph, trajectory: &[String]) -> f64 {
    trajectory
        .windows(2)
        .filter(|p| world.neighbors(&p[0]).is_ok_and(|n| n.contains(&p[1].as_str())))
        .map(|p| world.distance(&p[0], &p[1]).unwrap_or(0.0))
        .sum()
}

impl EpisodeTrace {
    pub fn final_viewpoint(&self) -> &str {
        self.result.trajectory.last().expect("trajectory starts at the start viewpoint")
    }
}

/// The fast policy alone, without regulator or language model.
pub fn runner_rollout(world: &WorldGraph, episode: &Episode, policy: &dyn Policy, step_cap: usize) -> Result<EpisodeTrace, HarnessError> {
    let config = crate::regulator::RegulatorConfig::runner_alone(step_cap);
    let llm = crate::llm::LlmClient::disabled();
    let trace = run_episode(&EpisodeSetup {
        world,
        episode,
        policy,
        config: &config,
        scorer: None,
        llm: &llm,
        share_memory: true,
    });
    match &trace.result.error {
        Some(message) => Err(HarnessError::Episode {
            episode: episode.id.clone(),
            message: message.clone(),
        }),
        None => Ok(trace),
    }
}
