//! The fast policy.
//!
//! [`Policy`] is the decision interface the episode loop drives. Two
//! implementations ship: [`HeuristicPolicy`], a tag-following navigator with
//! controllable failure modes, and [`BcPolicy`], a small scorer trained by
//! behavior cloning.

mod bc;
mod heuristic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryBank;
use crate::world::{Instruction, Observation};

pub use bc::{bc_gradient, bc_loss, train_bc, BcPolicy, BcSettings, BcState, BcTrainReport, PolicyParamsT};
pub use heuristic::HeuristicPolicy;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Move { target: String },
    Stop,
}

impl Action {
    pub fn move_to(target: impl Into<String>) -> Self {
        Action::Move { target: target.into() }
    }

    pub fn target(&self) -> Option<&str> {
        match self {
            Action::Move { target } => Some(target),
            Action::Stop => None,
        }
    }

    pub fn is_stop(&self) -> bool {
        matches!(self, Action::Stop)
    }
}

/// Which thinking mode produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Runner,
    Ruminator,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid policy parameter {name} = {value}: must lie in [0, 1]")]
    Parameter { name: &'static str, value: f64 },
    #[error("behavior cloning needs at least one episode")]
    NoEpisodes,
    #[error("behavior cloning diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
    #[error(transparent)]
    Checkpoint(#[from] crate::params::CheckpointError),
}

pub trait Policy: Send + Sync {
    /// Choose Stop or a Move to one of `obs.candidates`.
    fn decide(&self, instruction: &Instruction, obs: &Observation, bank: &MemoryBank) -> Action;

    fn name(&self) -> String;
}
