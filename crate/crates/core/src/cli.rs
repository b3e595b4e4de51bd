//! Command-line front end for the `r3` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::harness::{
    ablate, build_workload, render_table, run_suite, Arm, LlmSpec, SuiteOutput, SuiteReport, SuiteRun, Switch, WorkloadSpec,
    STANDARD_NOISE, STANDARD_PREMATURE_STOP_PROB, STANDARD_TRAP_PROB,
};
use crate::llm::{HttpTransport, ScriptEntry, ScriptedTransport, DEFAULT_ENDPOINT, DEFAULT_MODEL};
use crate::regulator::{EndingFallback, RegulatorConfig};
use crate::runner::{train_bc, BcPolicy, BcSettings, HeuristicPolicy, Policy, PolicyParamsT};
use crate::scorer::{collect_snapshots, load_snapshots, save_snapshots, train_scorer, GatParams, ScorerSettings};
use crate::world::{
    generate_episodes, generate_world, load_episodes, load_world, save_episodes, save_world, validate_episodes, Episode,
    InstructionStyle, WorldGraph, WorldParams,
};

#[derive(Debug, Parser)]
#[command(name = "r3", version, about = "Dual-process navigation over synthetic topological worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a world graph.
    GenWorld(GenWorldArgs),
    /// Generate episodes on a world.
    GenEpisodes(GenEpisodesArgs),
    /// Roll the fast policy and write pseudo-labelled scorer snapshots.
    Collect(CollectArgs),
    /// Train the trajectory anomaly scorer.
    TrainScorer(TrainScorerArgs),
    /// Behaviour-clone the fast policy on ground-truth paths.
    TrainRunner(TrainRunnerArgs),
    /// Run one suite arm.
    Run(RunArgs),
    /// Run the full arm and one arm per switch set.
    Ablate(AblateArgs),
    /// Render a report file as a table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StyleArg {
    Fine,
    Coarse,
}

impl From<StyleArg> for InstructionStyle {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Fine => InstructionStyle::FineGrained,
            StyleArg::Coarse => InstructionStyle::CoarseGrained,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub viewpoints: usize,
    #[arg(long, default_value_t = 3.0)]
    pub degree: f64,
    #[arg(long, default_value = "world.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenEpisodesArgs {
    #[arg(long, default_value = "world.json")]
    pub world: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = StyleArg::Fine)]
    pub style: StyleArg,
    #[arg(long, default_value_t = 5)]
    pub min_hops: usize,
    #[arg(long, default_value = "episodes.json")]
    pub out: PathBuf,
}

/// Worlds and episodes, either from files (paired by position) or generated.
#[derive(Debug, Args)]
pub struct WorkloadArgs {
    /// World file; repeat together with --episodes.
    #[arg(long = "world")]
    pub worlds: Vec<PathBuf>,
    #[arg(long = "episodes")]
    pub episodes: Vec<PathBuf>,
    /// Generate the standard workload instead of reading files.
    #[arg(long, conflicts_with_all = ["worlds", "episodes"])]
    pub standard: bool,
    /// Generate the scorer-training workload (worlds disjoint from --standard).
    #[arg(long, conflicts_with_all = ["worlds", "episodes", "standard"])]
    pub training: bool,
}

impl WorkloadArgs {
    pub fn load(&self) -> Result<Vec<(WorldGraph, Vec<Episode>)>> {
        if self.standard {
            return Ok(build_workload(&WorkloadSpec::standard())?);
        }
        if self.training {
            return Ok(build_workload(&WorkloadSpec::scorer_training())?);
        }
        ensure!(!self.worlds.is_empty(), "give --world/--episodes pairs, --standard or --training");
        ensure!(
            self.worlds.len() == self.episodes.len(),
            "{} --world files but {} --episodes files",
            self.worlds.len(),
            self.episodes.len()
        );
        self.worlds
            .iter()
            .zip(&self.episodes)
            .map(|(w, e)| {
                let world = load_world(w).with_context(|| format!("loading {}", w.display()))?;
                let eps = load_episodes(e).with_context(|| format!("loading {}", e.display()))?;
                validate_episodes(&world, &eps).with_context(|| format!("{} on {}", e.display(), w.display()))?;
                Ok((world, eps))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RunnerKind {
    Heuristic,
    Bc,
}

#[derive(Debug, Args)]
pub struct RunnerArgs {
    #[arg(long, value_enum, default_value_t = RunnerKind::Heuristic)]
    pub runner: RunnerKind,
    /// Behaviour-cloned checkpoint, required with `--runner bc`.
    #[arg(long)]
    pub runner_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = STANDARD_NOISE)]
    pub noise: f64,
    #[arg(long, default_value_t = STANDARD_TRAP_PROB)]
    pub trap_prob: f64,
    #[arg(long, default_value_t = STANDARD_PREMATURE_STOP_PROB)]
    pub premature_stop_prob: f64,
    #[arg(long, default_value_t = 11)]
    pub runner_seed: u64,
}

impl RunnerArgs {
    pub fn build(&self) -> Result<Box<dyn Policy>> {
        Ok(match self.runner {
            RunnerKind::Heuristic => Box::new(HeuristicPolicy::new(self.noise, self.trap_prob, self.premature_stop_prob, self.runner_seed)?),
            RunnerKind::Bc => {
                let path = self.runner_ckpt.as_ref().context("--runner bc needs --runner-ckpt")?;
                Box::new(BcPolicy {
                    params: PolicyParamsT::<f64>::load(path).with_context(|| format!("loading {}", path.display()))?,
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FallbackArg {
    AcceptStop,
    Switch,
}

#[derive(Debug, Args)]
pub struct RegulatorArgs {
    #[arg(long, default_value_t = 4)]
    pub tau_r: usize,
    #[arg(long, default_value_t = 20)]
    pub tau_l: usize,
    #[arg(long, default_value_t = 0.35)]
    pub tau_g: f64,
    #[arg(long, default_value_t = 40)]
    pub step_cap: usize,
    /// Jump to the start on restart instead of walking back.
    #[arg(long)]
    pub restart_teleport: bool,
    #[arg(long, value_enum, default_value_t = FallbackArg::AcceptStop)]
    pub ending_fallback: FallbackArg,
}

impl RegulatorArgs {
    pub fn config(&self) -> RegulatorConfig {
        RegulatorConfig {
            tau_r: self.tau_r,
            tau_l: self.tau_l,
            tau_g: self.tau_g,
            step_cap: self.step_cap,
            restart_teleport: self.restart_teleport,
            ending_fallback: match self.ending_fallback {
                FallbackArg::AcceptStop => EndingFallback::AcceptStop,
                FallbackArg::Switch => EndingFallback::Switch,
            },
            ..RegulatorConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LlmArg {
    Http,
    Scripted,
    Oracle,
    None,
}

#[derive(Debug, Args)]
pub struct LlmArgs {
    #[arg(long, value_enum, default_value_t = LlmArg::Oracle)]
    pub llm: LlmArg,
    /// JSONL transcript for `--llm scripted`.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Write every reply of this run as a transcript replayable with `--llm scripted`.
    #[arg(long)]
    pub save_script: Option<PathBuf>,
    #[arg(long, env = "R3_LLM_ENDPOINT", default_value = DEFAULT_ENDPOINT)]
    pub endpoint: String,
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: String,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

impl LlmArgs {
    pub fn spec(&self) -> Result<LlmSpec> {
        Ok(match self.llm {
            LlmArg::None => LlmSpec::None,
            LlmArg::Oracle => LlmSpec::Oracle,
            LlmArg::Scripted => {
                let path = self.script.as_ref().context("--llm scripted needs --script")?;
                LlmSpec::Scripted(Arc::new(ScriptedTransport::load(path)?))
            }
            LlmArg::Http => {
                let key = std::env::var(crate::llm::API_KEY_ENV).ok();
                LlmSpec::Http(Arc::new(HttpTransport::new(
                    &self.endpoint,
                    &self.model,
                    key,
                    Duration::from_secs(self.timeout_secs),
                )?))
            }
        })
    }
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub runner: RunnerArgs,
    #[command(flatten)]
    pub regulator: RegulatorArgs,
    #[command(flatten)]
    pub llm: LlmArgs,
    /// Scorer checkpoint; required unless scoring is switched off.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Suite name, used for the log directory.
    #[arg(long, default_value = "suite")]
    pub name: String,
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub runner: RunnerArgs,
    #[arg(long, default_value_t = 40)]
    pub step_cap: usize,
    #[arg(long, default_value = "snapshots.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainScorerArgs {
    #[arg(long, default_value = "snapshots.jsonl")]
    pub snapshots: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train in single precision (the checkpoint is stored the same way).
    #[arg(long)]
    pub f32: bool,
    #[arg(long, default_value = "scorer.ckpt.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainRunnerArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runner.ckpt.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Switches applied to this run, joined by `+` (e.g. `no-scoring+no-ending`).
    #[arg(long)]
    pub switches: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Comma-separated switch sets; `+` combines switches within one arm.
    #[arg(long, value_delimiter = ',', default_value = "no-looping,no-scoring,no-ending,no-formulation")]
    pub switches: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report file written by `run` or `ablate`.
    #[arg(default_value = "report.json")]
    pub input: PathBuf,
    /// Print the reports as JSON after the table.
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(a) => {
            let w = generate_world(&WorldParams::new(a.seed, a.viewpoints, a.degree))?;
            save_world(&w, &a.out)?;
            println!("{}: {} viewpoints, {} edges", a.out.display(), w.len(), w.edge_count());
        }
        Command::GenEpisodes(a) => {
            let w = load_world(&a.world)?;
            let eps = generate_episodes(&w, a.seed, a.count, a.style.into(), a.min_hops)?;
            save_episodes(&eps, &a.out)?;
            println!("{}: {} episodes", a.out.display(), eps.len());
        }
        Command::Collect(a) => {
            let work = a.workload.load()?;
            let policy = a.runner.build()?;
            let sets: Vec<_> = work.iter().map(|(w, e)| (w, e.as_slice())).collect();
            let snaps = collect_snapshots(&sets, policy.as_ref(), a.step_cap)?;
            save_snapshots(&a.out, &snaps)?;
            let pos = snaps.iter().filter(|s| s.label == 1).count();
            println!("{}: {} snapshots, {} labelled 1", a.out.display(), snaps.len(), pos);
        }
        Command::TrainScorer(a) => {
            let snaps = load_snapshots(&a.snapshots)?;
            let hyper = ScorerSettings {
                epochs: a.epochs,
                hidden: a.hidden,
                lr: a.lr,
                patience: a.patience,
                holdout: a.holdout,
                seed: a.seed,
            };
            let (auc, best) = if a.f32 {
                let r = train_scorer::<f32>(&snaps, &hyper)?;
                r.params.save(&a.out)?;
                (r.val_auc, r.best_epoch)
            } else {
                let r = train_scorer::<f64>(&snaps, &hyper)?;
                r.params.save(&a.out)?;
                (r.val_auc, r.best_epoch)
            };
            println!("{}: best epoch {best}, held-out AUC {auc:.3}", a.out.display());
        }
        Command::TrainRunner(a) => {
            let work = a.workload.load()?;
            ensure!(work.len() == 1, "train-runner takes exactly one world");
            let (world, eps) = &work[0];
            let hyper = BcSettings {
                epochs: a.epochs,
                hidden: a.hidden,
                lr: a.lr,
                seed: a.seed,
            };
            let r = train_bc::<f64>(eps, world, &hyper)?;
            r.params.save(&a.out)?;
            println!("{}: final loss {:.4}", a.out.display(), r.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Run(a) => {
            let sets = match &a.switches {
                Some(s) => vec![Switch::parse_set(s)?],
                None => vec![],
            };
            let outputs = execute(&a.suite, &sets, true)?;
            let report = &outputs[0].report;
            write_json(&a.suite.report, report)?;
            print!("{}", render_table(std::slice::from_ref(report)));
        }
        Command::Ablate(a) => {
            let sets = a.switches.iter().map(|s| Switch::parse_set(s)).collect::<Result<Vec<_>, _>>()?;
            let outputs = execute(&a.suite, &sets, false)?;
            let reports: Vec<SuiteReport> = outputs.into_iter().map(|o| o.report).collect();
            write_json(&a.suite.report, &reports)?;
            print!("{}", render_table(&reports));
        }
        Command::Report(a) => {
            let reports = read_reports(&a.input)?;
            print!("{}", render_table(&reports));
            if a.json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            }
        }
    }
    Ok(())
}

/// With `single`, the switch sets are folded into one arm.
fn execute(a: &SuiteArgs, sets: &[Vec<Switch>], single: bool) -> Result<Vec<SuiteOutput>> {
    let work = a.workload.load()?;
    let policy = a.runner.build()?;
    let llm = a.llm.spec()?;
    let scorer = a
        .scorer
        .as_ref()
        .map(|p| GatParams::<f64>::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let config = a.regulator.config();
    config.validate()?;
    let run = SuiteRun {
        name: &a.name,
        workload: &work,
        policy: policy.as_ref(),
        scorer: scorer.as_ref(),
        llm: &llm,
        log_dir: Some(&a.runs_dir),
    };
    let base = Arm::full(config);
    let outputs = if single {
        let arm = match sets.first() {
            Some(set) => Switch::arm(&base, set),
            None => base,
        };
        vec![run_suite(&run, &arm)?]
    } else {
        ablate(&run, &base, sets)?
    };
    if let Some(path) = &a.llm.save_script {
        save_script(path, &outputs, &work)?;
    }
    Ok(outputs)
}

/// Replies in call order, each guarded by its episode's instruction text.
fn save_script(path: &Path, outputs: &[SuiteOutput], work: &[(WorldGraph, Vec<Episode>)]) -> Result<()> {
    let instruction = |id: &str| {
        work.iter()
            .flat_map(|(_, e)| e)
            .find(|e| e.id == id)
            .map(|e| e.instruction.text.clone())
            .unwrap_or_default()
    };
    let mut text = String::new();
    for o in outputs {
        for t in &o.traces {
            let guard = instruction(&t.result.episode);
            for line in t.log.iter().filter(|l| l["event"] == "llm") {
                let Some(reply) = line["call"]["reply"].as_str() else {
                    bail!("episode {} logged a failed call; nothing to replay", t.result.episode);
                };
                let entry = ScriptEntry {
                    expect_substring: guard.clone(),
                    reply: reply.to_string(),
                };
                text.push_str(&serde_json::to_string(&entry)?);
                text.push('\n');
            }
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Accepts one report or a list. Empty input is an error.
pub fn read_reports(path: &Path) -> Result<Vec<SuiteReport>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(!text.trim().is_empty(), "{} is empty; no results to report", path.display());
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let reports: Vec<SuiteReport> = match value {
        Value::Array(_) => serde_json::from_value(value)?,
        other => vec![serde_json::from_value(other)?],
    };
    ensure!(!reports.is_empty(), "{} holds no reports", path.display());
    reports
        .iter()
        .map(|r| r.recomputed().map_err(anyhow::Error::from))
        .collect()
}
