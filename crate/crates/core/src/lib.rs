//! Dual-process navigation: a fast trajectory policy, a regulator that decides
//! when to hand control over, and a slow language-model navigator that reasons
//! over a shared trajectory memory.
//!
//! Learned components are generic over the scalar type; the aliases below fix
//! the common choices.

pub mod cli;
pub mod harness;
pub mod llm;
pub mod memory;
pub mod num;
pub mod params;
pub mod regulator;
pub mod rng;
pub mod ruminator;
pub mod runner;
pub mod scorer;
pub mod world;

/// Graph attention scorer weights in double precision.
pub type ScorerParams = scorer::GatParams<f64>;
/// Graph attention scorer weights in single precision.
pub type ScorerParamsF32 = scorer::GatParams<f32>;
/// Behaviour-cloned policy weights in double precision.
pub type PolicyParams = runner::PolicyParamsT<f64>;
/// Behaviour-cloned policy weights in single precision.
pub type PolicyParamsF32 = runner::PolicyParamsT<f32>;
