use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics, run_episode, EpisodeSetup, EpisodeTrace, HarnessError, SuiteReport};
use crate::llm::{ChatTransport, HttpTransport, LlmClient, OracleTransport, ScriptedTransport};
use crate::regulator::RegulatorConfig;
use crate::runner::{HeuristicPolicy, Policy};
use crate::scorer::GatParams;
use crate::world::{generate_episodes, generate_world, Episode, InstructionStyle, WorldGraph, WorldParams};

/// Seeded recipe for a set of worlds and episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub world_seeds: Vec<u64>,
    pub n_viewpoints: usize,
    pub mean_degree: f64,
    pub episodes_per_world: usize,
    pub episode_seed: u64,
    pub min_hops: usize,
    pub style: InstructionStyle,
}

/// Fast-policy anomaly rates of the standard suite.
pub const STANDARD_NOISE: f64 = 0.1;
pub const STANDARD_TRAP_PROB: f64 = 0.3;
pub const STANDARD_PREMATURE_STOP_PROB: f64 = 0.1;

/// The trap-prone heuristic policy used on the standard suite.
pub fn standard_runner(seed: u64) -> HeuristicPolicy {
    HeuristicPolicy {
        noise: STANDARD_NOISE,
        trap_prob: STANDARD_TRAP_PROB,
        premature_stop_prob: STANDARD_PREMATURE_STOP_PROB,
        seed,
    }
}

impl WorkloadSpec {
    /// Scorer training worlds, disjoint from [`WorkloadSpec::standard`].
    pub fn scorer_training() -> Self {
        Self {
            world_seeds: (2000..2020).collect(),
            ..Self::standard()
        }
    }

    /// 10 worlds x 10 fine-grained episodes on 60-viewpoint worlds.
    pub fn standard() -> Self {
        Self {
            world_seeds: (1000..1010).collect(),
            n_viewpoints: 60,
            mean_degree: 3.0,
            episodes_per_world: 10,
            episode_seed: 7,
            min_hops: 5,
            style: InstructionStyle::FineGrained,
        }
    }
}

pub fn build_workload(spec: &WorkloadSpec) -> Result<Vec<(WorldGraph, Vec<Episode>)>, HarnessError> {
    spec.world_seeds
        .iter()
        .map(|&seed| {
            let w = generate_world(&WorldParams::new(seed, spec.n_viewpoints, spec.mean_degree))?;
            let eps = generate_episodes(&w, spec.episode_seed, spec.episodes_per_world, spec.style, spec.min_hops)?;
            Ok((w, eps))
        })
        .collect()
}

/// Language model backing for a suite.
#[derive(Clone)]
pub enum LlmSpec {
    /// No model; any call fails.
    None,
    /// Ground truth per episode.
    Oracle,
    /// One transcript consumed across the whole suite, episodes run in order.
    Scripted(Arc<ScriptedTransport>),
    Http(Arc<HttpTransport>),
}

impl LlmSpec {
    fn sequential(&self) -> bool {
        matches!(self, LlmSpec::Scripted(_) | LlmSpec::Http(_))
    }

    fn client(&self, world: &Arc<WorldGraph>, episode: &Episode) -> Result<LlmClient, HarnessError> {
        let transport: Arc<dyn ChatTransport> = match self {
            LlmSpec::None => return Ok(LlmClient::disabled()),
            LlmSpec::Oracle => Arc::new(OracleTransport::new(world.clone(), &episode.goal)?),
            LlmSpec::Scripted(t) => t.clone(),
            LlmSpec::Http(t) => t.clone(),
        };
        Ok(LlmClient::new(transport))
    }
}

/// One configuration of the system under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub regulator: RegulatorConfig,
    pub share_memory: bool,
}

impl Arm {
    pub fn full(regulator: RegulatorConfig) -> Self {
        Self {
            label: "full".into(),
            regulator,
            share_memory: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Switch {
    NoLooping,
    NoScoring,
    NoEnding,
    NoFormulation,
    /// The fast policy navigates alone.
    NoLlm,
    /// The deliberate navigator starts from an empty bank.
    NoMemory,
}

impl Switch {
    pub const ALL: [Switch; 6] = [
        Switch::NoLooping,
        Switch::NoScoring,
        Switch::NoEnding,
        Switch::NoFormulation,
        Switch::NoLlm,
        Switch::NoMemory,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Switch::NoLooping => "no-looping",
            Switch::NoScoring => "no-scoring",
            Switch::NoEnding => "no-ending",
            Switch::NoFormulation => "no-formulation",
            Switch::NoLlm => "no-llm",
            Switch::NoMemory => "no-memory",
        }
    }

    pub fn apply(self, arm: &mut Arm) {
        let r = &mut arm.regulator;
        match self {
            Switch::NoLooping => r.looping = false,
            Switch::NoScoring => r.scoring = false,
            Switch::NoEnding => r.ending = false,
            Switch::NoFormulation => r.formulation = false,
            Switch::NoLlm => *r = RegulatorConfig::runner_alone(r.step_cap),
            Switch::NoMemory => arm.share_memory = false,
        }
    }

    /// Parse `a+b` as one combined arm.
    pub fn parse_set(s: &str) -> Result<Vec<Switch>, HarnessError> {
        s.split('+').map(|t| t.trim().parse()).collect()
    }

    pub fn arm(base: &Arm, set: &[Switch]) -> Arm {
        let mut arm = base.clone();
        for s in set {
            s.apply(&mut arm);
        }
        arm.label = set.iter().map(|s| s.token()).collect::<Vec<_>>().join("+");
        arm
    }
}

impl FromStr for Switch {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Switch::ALL
            .into_iter()
            .find(|k| k.token() == s)
            .ok_or_else(|| HarnessError::UnknownSwitch(s.to_string()))
    }
}

pub struct SuiteRun<'a> {
    pub name: &'a str,
    pub workload: &'a [(WorldGraph, Vec<Episode>)],
    pub policy: &'a dyn Policy,
    pub scorer: Option<&'a GatParams<f64>>,
    pub llm: &'a LlmSpec,
    /// Episode logs go to `<log_dir>/<name>-<arm>/<episode>.jsonl`.
    pub log_dir: Option<&'a Path>,
}

pub struct SuiteOutput {
    pub report: SuiteReport,
    pub traces: Vec<EpisodeTrace>,
}

fn write_logs(dir: &Path, traces: &[EpisodeTrace]) -> Result<(), HarnessError> {
    let io = |p: &Path, source| HarnessError::Io {
        path: p.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for t in traces {
        let path = dir.join(format!("{}.jsonl", t.result.episode));
        fs::write(&path, t.log_text()).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

/// Run every episode of the workload under one arm.
pub fn run_suite(run: &SuiteRun<'_>, arm: &Arm) -> Result<SuiteOutput, HarnessError> {
    arm.regulator.validate()?;
    if arm.regulator.scoring && run.scorer.is_none() {
        return Err(HarnessError::MissingScorer);
    }
    let jobs: Vec<(Arc<WorldGraph>, &Episode)> = run
        .workload
        .iter()
        .flat_map(|(w, eps)| {
            let w = Arc::new(w.clone());
            eps.iter().map(move |e| (w.clone(), e))
        })
        .collect();
    let one = |(world, ep): &(Arc<WorldGraph>, &Episode)| -> Result<EpisodeTrace, HarnessError> {
        let llm = run.llm.client(world, ep)?;
        Ok(run_episode(&EpisodeSetup {
            world,
            episode: ep,
            policy: run.policy,
            config: &arm.regulator,
            scorer: run.scorer,
            llm: &llm,
            share_memory: arm.share_memory,
        }))
    };
    let traces: Vec<EpisodeTrace> = if run.llm.sequential() {
        jobs.iter().map(one).collect::<Result<_, _>>()?
    } else {
        jobs.par_iter().map(one).collect::<Result<_, _>>()?
    };
    let label = format!("{}-{}", run.name, arm.label);
    if let Some(dir) = run.log_dir {
        write_logs(&dir.join(&label), &traces)?;
    }
    let report = metrics(&arm.label, traces.iter().map(|t| t.result.clone()).collect())?;
    Ok(SuiteOutput { report, traces })
}

/// The base arm followed by one arm per switch set, all on identical seeds.
pub fn ablate(run: &SuiteRun<'_>, base: &Arm, sets: &[Vec<Switch>]) -> Result<Vec<SuiteOutput>, HarnessError> {
    let mut arms = vec![base.clone()];
    arms.extend(sets.iter().map(|s| Switch::arm(base, s)));
    arms.iter()
        .map(|arm| {
            if arm.regulator.scoring && run.scorer.is_none() {
                return Err(HarnessError::MissingScorer);
            }
            run_suite(run, arm)
        })
        .collect()
}
