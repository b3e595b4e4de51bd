use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{is_success, path_length, HarnessError, LOG_SCHEMA};
use crate::llm::LlmClient;
use crate::memory::{MemoryBank, MemoryEntry, StepRecord};
use crate::regulator::{
    critical_formulation, evaluate, retrace_path, Decision, FormulationKind, RegulatorConfig, SwitchReason,
};
use crate::ruminator::{step_ruminator, Arrival, Pose};
use crate::runner::{Action, Mode, Policy};
use crate::scorer::GatParams;
use crate::world::{geodesic, wrap_angle, Episode, Observation, WorldGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The fast policy stopped and the stop was accepted.
    RunnerStop,
    RuminatorStop,
    StepCap,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub reason: SwitchReason,
    /// Number of actions taken before the switch.
    pub step: usize,
}

/// Seconds spent per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WallTimes {
    pub runner: f64,
    pub regulator: f64,
    pub ruminator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: String,
    pub world_seed: u64,
    pub start: String,
    pub goal: String,
    /// Viewpoints in visiting order, starting with `start`. A teleport restart
    /// appends `start` without an action.
    pub trajectory: Vec<String>,
    pub actions: Vec<Action>,
    /// Mode that produced each action.
    pub modes: Vec<Mode>,
    pub switch: Option<SwitchEvent>,
    pub restarts: usize,
    pub llm_calls: usize,
    pub oracle: bool,
    pub degraded_decisions: usize,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub tl: f64,
    pub ne: f64,
    /// Geodesic start-goal distance.
    pub shortest: f64,
    pub success: bool,
    pub wall_time: WallTimes,
}

impl EpisodeResult {
    pub fn runner_steps(&self) -> usize {
        self.modes.iter().filter(|m| **m == Mode::Runner).count()
    }

    pub fn ruminator_steps(&self) -> usize {
        self.modes.len() - self.runner_steps()
    }
}

/// Everything an episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub result: EpisodeResult,
    /// JSONL log lines, without wall-clock data.
    pub log: Vec<Value>,
    /// Every record appended to a memory bank, in order, across resets.
    pub records: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for line in &self.log {
            s.push_str(&serde_json::to_string(line).expect("log line serializes"));
            s.push('\n');
        }
        s
    }
}

pub struct EpisodeSetup<'a> {
    pub world: &'a WorldGraph,
    pub episode: &'a Episode,
    pub policy: &'a dyn Policy,
    pub config: &'a RegulatorConfig,
    pub scorer: Option<&'a GatParams<f64>>,
    pub llm: &'a LlmClient,
    /// When false the deliberate navigator starts from an empty bank.
    pub share_memory: bool,
}

struct Run<'a> {
    s: &'a EpisodeSetup<'a>,
    vp: String,
    heading: f64,
    mode: Mode,
    bank: MemoryBank,
    own_bank: Option<MemoryBank>,
    logged: usize,
    llm_logged: usize,
    trajectory: Vec<String>,
    actions: Vec<Action>,
    modes: Vec<Mode>,
    switch: Option<SwitchEvent>,
    restarts: usize,
    degraded: usize,
    log: Vec<Value>,
    records: Vec<StepRecord>,
    times: WallTimes,
}

impl<'a> Run<'a> {
    fn emit(&mut self, event: &str, mut body: Value) {
        let obj = body.as_object_mut().expect("log body is an object");
        let mut line = serde_json::Map::new();
        line.insert("schema".into(), json!(LOG_SCHEMA));
        line.insert("episode".into(), json!(self.s.episode.id));
        line.insert("event".into(), json!(event));
        line.append(obj);
        self.log.push(Value::Object(line));
    }

    fn active_bank(&mut self) -> &mut MemoryBank {
        match (&mut self.own_bank, self.mode) {
            (Some(b), Mode::Ruminator) => b,
            _ => &mut self.bank,
        }
    }

    /// Log records and chat calls that appeared since the last flush.
    fn flush(&mut self) {
        let fresh: Vec<StepRecord> = {
            let from = self.logged;
            let b = self.active_bank();
            b.records()[from.min(b.records().len())..].to_vec()
        };
        self.logged += fresh.len();
        for r in fresh {
            self.emit("record", json!({ "record": r }));
            self.records.push(r);
        }
        let calls = self.s.llm.transcript_since(self.llm_logged);
        self.llm_logged += calls.len();
        for c in calls {
            self.emit("llm", json!({ "call": c }));
        }
    }

    fn record_runner_arrival(&mut self, obs: &Observation, action: Option<Action>) -> Result<(), HarnessError> {
        let f = obs.facing();
        let rec = StepRecord {
            t: self.bank.records().len(),
            viewpoint: self.vp.clone(),
            heading: self.heading,
            action,
            mode: Mode::Runner,
            memory_entry: MemoryEntry::OrientedView {
                feature: f.feature.clone(),
                tags: f.tags.clone(),
            },
            neighbors: obs.candidates.iter().map(|c| c.target.clone()).collect(),
        };
        self.bank.append(rec)?;
        Ok(())
    }

    fn step_to(&mut self, obs: &Observation, target: &str, mode: Mode) -> Result<(), HarnessError> {
        let c = obs.candidate(target).ok_or_else(|| HarnessError::InvalidMove {
            from: self.vp.clone(),
            to: target.to_string(),
        })?;
        self.heading = wrap_angle(c.heading);
        self.vp = target.to_string();
        self.trajectory.push(self.vp.clone());
        self.actions.push(Action::move_to(target));
        self.modes.push(mode);
        Ok(())
    }

    fn at_cap(&self) -> bool {
        self.actions.len() >= self.s.config.step_cap
    }

    fn drive(&mut self) -> Result<Termination, HarnessError> {
        let s = self.s;
        let (world, ep, cfg) = (s.world, s.episode, s.config);
        let obs = world.observe(&self.vp, self.heading)?;
        self.record_runner_arrival(&obs, None)?;
        let mut arrival = Arrival::Recorded;
        loop {
            self.flush();
            if self.at_cap() {
                return Ok(Termination::StepCap);
            }
            let obs = world.observe(&self.vp, self.heading)?;
            match self.mode {
                Mode::Runner => {
                    let clock = Instant::now();
                    let action = s.policy.decide(&ep.instruction, &obs, &self.bank);
                    self.times.runner += clock.elapsed().as_secs_f64();
                    if let Some(t) = action.target() {
                        if obs.candidate(t).is_none() {
                            return Err(HarnessError::InvalidMove {
                                from: self.vp.clone(),
                                to: t.to_string(),
                            });
                        }
                    }
                    let clock = Instant::now();
                    let ev = evaluate(cfg, &self.bank, s.scorer, world, &action, s.llm, &ep.instruction, &obs);
                    self.times.regulator += clock.elapsed().as_secs_f64();
                    let ev = ev?;
                    self.emit(
                        "decision",
                        json!({ "step": self.actions.len(), "viewpoint": self.vp, "proposed": action, "evaluation": ev }),
                    );
                    match ev.decision {
                        Decision::Proceed => {
                            let target = action.target().expect("proceed implies a move").to_string();
                            self.step_to(&obs, &target, Mode::Runner)?;
                            let obs = world.observe(&self.vp, self.heading)?;
                            self.record_runner_arrival(&obs, Some(action))?;
                        }
                        Decision::EndEpisode => return Ok(Termination::RunnerStop),
                        Decision::Switch(reason) => {
                            self.switch = Some(SwitchEvent {
                                reason,
                                step: self.actions.len(),
                            });
                            self.emit("switch", json!({ "reason": reason, "step": self.actions.len() }));
                            self.mode = Mode::Ruminator;
                            arrival = self.formulate(&obs)?;
                            if !s.share_memory {
                                self.own_bank = Some(MemoryBank::new());
                                self.logged = 0;
                                arrival = Arrival::Pending { action: None };
                            }
                        }
                    }
                }
                Mode::Ruminator => {
                    let pose = Pose {
                        viewpoint: self.vp.clone(),
                        heading: self.heading,
                        arrival: arrival.clone(),
                    };
                    let clock = Instant::now();
                    let step = {
                        let llm = s.llm;
                        let bank = self.active_bank();
                        step_ruminator(llm, &ep.instruction, bank, world, &pose)
                    };
                    self.times.ruminator += clock.elapsed().as_secs_f64();
                    let step = step?;
                    self.degraded += usize::from(step.degraded);
                    self.emit(
                        "ruminator",
                        json!({
                            "step": self.actions.len(),
                            "viewpoint": self.vp,
                            "action": step.action,
                            "plan_kept": step.plan_kept,
                            "degraded": step.degraded,
                        }),
                    );
                    match &step.action {
                        Action::Stop => {
                            self.flush();
                            return Ok(Termination::RuminatorStop);
                        }
                        Action::Move { target } => {
                            self.step_to(&obs, target, Mode::Ruminator)?;
                            arrival = Arrival::Pending {
                                action: Some(step.action.clone()),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Stage 2 after a switch; returns how the current viewpoint stands in the bank.
    fn formulate(&mut self, obs: &Observation) -> Result<Arrival, HarnessError> {
        let s = self.s;
        if !s.config.formulation {
            return Ok(Arrival::Recorded);
        }
        let clock = Instant::now();
        let out = critical_formulation(s.llm, &s.episode.instruction, &self.bank, obs, s.world);
        self.times.regulator += clock.elapsed().as_secs_f64();
        let out = out.map_err(crate::regulator::RegulatorError::from)?;
        self.emit("formulation", json!({ "step": self.actions.len(), "outcome": out }));
        let mut arrival = Arrival::Recorded;
        if out.kind == FormulationKind::Restart {
            self.restarts += 1;
            let start = s.episode.start.clone();
            if s.config.restart_teleport {
                self.vp = start.clone();
                self.heading = 0.0;
                self.trajectory.push(start);
            } else {
                let path = retrace_path(&self.bank, s.world, &self.vp, &start).ok_or_else(|| HarnessError::Retrace {
                    from: self.vp.clone(),
                    to: start.clone(),
                })?;
                for next in path.iter().skip(1) {
                    if self.at_cap() {
                        break;
                    }
                    let here = s.world.observe(&self.vp, self.heading)?;
                    self.step_to(&here, next, Mode::Ruminator)?;
                }
            }
            self.bank.reset();
            self.logged = 0;
            self.emit(
                "restart",
                json!({ "step": self.actions.len(), "viewpoint": self.vp, "max_revisit": self.bank.max_revisit() }),
            );
            arrival = Arrival::Pending { action: None };
        }
        if s.share_memory {
            self.bank.set_plan(out.plan);
        }
        Ok(arrival)
    }
}

/// Drive one episode: fast policy under the regulator, then the deliberate
/// navigator once a switch fires. Component errors end the episode as a
/// failure with the error recorded.
pub fn run_episode(setup: &EpisodeSetup<'_>) -> EpisodeTrace {
    let ep = setup.episode;
    let mut run = Run {
        s: setup,
        vp: ep.start.clone(),
        heading: 0.0,
        mode: Mode::Runner,
        bank: MemoryBank::new(),
        own_bank: None,
        logged: 0,
        llm_logged: setup.llm.calls(),
        trajectory: vec![ep.start.clone()],
        actions: vec![],
        modes: vec![],
        switch: None,
        restarts: 0,
        degraded: 0,
        log: vec![],
        records: vec![],
        times: WallTimes::default(),
    };
    run.emit(
        "start",
        json!({
            "world_seed": setup.world.seed,
            "start": ep.start,
            "goal": ep.goal,
            "instruction": ep.instruction.text,
            "policy": setup.policy.name(),
            "transport": setup.llm.transport_label(),
            "oracle": setup.llm.is_oracle(),
            "config": setup.config,
            "share_memory": setup.share_memory,
        }),
    );
    let calls_before = setup.llm.calls();
    let outcome = run.drive();
    run.flush();
    let (termination, error) = match outcome {
        Ok(t) => (t, None),
        Err(e) => (Termination::Error, Some(e.to_string())),
    };
    let world = setup.world;
    let tl = path_length(world, &run.trajectory);
    let ne = geodesic(world, &run.vp, &ep.goal).map_or(f64::INFINITY, |(d, _)| d);
    let shortest = geodesic(world, &ep.start, &ep.goal).map_or(f64::INFINITY, |(d, _)| d);
    let success = error.is_none() && is_success(world, &run.vp, &ep.goal).unwrap_or(false);
    let result = EpisodeResult {
        episode: ep.id.clone(),
        world_seed: world.seed,
        start: ep.start.clone(),
        goal: ep.goal.clone(),
        trajectory: run.trajectory.clone(),
        actions: run.actions.clone(),
        modes: run.modes.clone(),
        switch: run.switch,
        restarts: run.restarts,
        llm_calls: setup.llm.calls() - calls_before,
        oracle: setup.llm.is_oracle(),
        degraded_decisions: run.degraded,
        termination,
        error,
        tl,
        ne,
        shortest,
        success,
        wall_time: run.times,
    };
    let mut summary = serde_json::to_value(&result).expect("result serializes");
    summary.as_object_mut().expect("object").remove("wall_time");
    run.emit("end", json!({ "result": summary }));
    EpisodeTrace {
        result,
        log: run.log,
        records: run.records,
    }
}
