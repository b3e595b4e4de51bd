//! End-to-end behaviour of an episode across runner, regulator and deliberation.

use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;

use r3_nav::harness::{is_success, path_length, run_episode, EpisodeSetup, EpisodeTrace, Termination};
use r3_nav::llm::{LlmClient, OracleTransport};
use r3_nav::memory::{MemoryBank, MemoryEntry, StepRecord};
use r3_nav::regulator::{RegulatorConfig, SwitchReason};
use r3_nav::runner::{Action, HeuristicPolicy, Mode, Policy};
use r3_nav::world::{
    generate_episodes, generate_world, load_episodes, load_world, validate_episodes, wrap_angle, Episode, InstructionStyle,
    WorldGraph, WorldParams,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn oracle(world: &WorldGraph, ep: &Episode) -> LlmClient {
    LlmClient::new(Arc::new(OracleTransport::new(Arc::new(world.clone()), &ep.goal).unwrap()))
}

fn run(world: &WorldGraph, ep: &Episode, policy: &dyn Policy, config: &RegulatorConfig, llm: &LlmClient) -> EpisodeTrace {
    let trace = run_episode(&EpisodeSetup {
        world,
        episode: ep,
        policy,
        config,
        scorer: None,
        llm,
        share_memory: true,
    });
    assert_eq!(trace.result.error, None, "{}", ep.id);
    trace
}

/// Policy loop written against the world alone, with no regulator in between.
fn bare_rollout(policy: &dyn Policy, world: &WorldGraph, ep: &Episode, cap: usize) -> Vec<String> {
    let mut bank = MemoryBank::new();
    let (mut vp, mut heading) = (ep.start.clone(), 0.0);
    let mut traj = vec![vp.clone()];
    let mut last = None;
    for t in 0.. {
        let obs = world.observe(&vp, heading).unwrap();
        bank.append(StepRecord {
            t,
            viewpoint: vp.clone(),
            heading,
            action: last.take(),
            mode: Mode::Runner,
            memory_entry: MemoryEntry::OrientedView {
                feature: obs.facing().feature.clone(),
                tags: obs.facing().tags.clone(),
            },
            neighbors: obs.candidates.iter().map(|c| c.target.clone()).collect(),
        })
        .unwrap();
        if t == cap {
            break;
        }
        let a = policy.decide(&ep.instruction, &obs, &bank);
        let Action::Move { target } = &a else { break };
        heading = wrap_angle(obs.candidate(target).unwrap().heading);
        vp = target.clone();
        traj.push(vp.clone());
        last = Some(a);
    }
    traj
}

fn world_and_episodes(seed: u64, count: usize) -> (WorldGraph, Vec<Episode>) {
    let w = generate_world(&WorldParams::new(seed, 60, 3.0)).unwrap();
    let eps = generate_episodes(&w, 7, count, InstructionStyle::FineGrained, 5).unwrap();
    (w, eps)
}

#[test]
fn hand_built_fixture_is_valid() {
    let w = load_world(fixture("four_rooms.json")).unwrap();
    let eps = load_episodes(fixture("four_rooms.episodes.json")).unwrap();
    validate_episodes(&w, &eps).unwrap();
    assert_eq!(w.len(), 4);
    assert!((w.distance("a", "c").unwrap() - 5.0).abs() < 1e-12);

    let trace = run(&w, &eps[0], &HeuristicPolicy::greedy(0), &RegulatorConfig::runner_alone(40), &LlmClient::disabled());
    assert_eq!(trace.result.trajectory, ["a", "c", "d"]);
    assert!(trace.result.success);
    assert_eq!(trace.result.tl, 8.0);
}

#[test]
fn disabled_criteria_reproduce_the_bare_policy() {
    let policy = HeuristicPolicy::new(0.2, 0.3, 0.1, 4).unwrap();
    let config = RegulatorConfig::runner_alone(40);
    for seed in [11, 12] {
        let (w, eps) = world_and_episodes(seed, 10);
        for ep in &eps {
            let trace = run(&w, ep, &policy, &config, &LlmClient::disabled());
            assert_eq!(trace.result.trajectory, bare_rollout(&policy, &w, ep, 40), "{}", ep.id);
            assert_eq!(trace.result.llm_calls, 0);
            assert!(trace.result.modes.iter().all(|m| *m == Mode::Runner));
        }
    }
}

#[test]
fn perfect_runner_costs_one_call() {
    let (w, eps) = world_and_episodes(13, 10);
    let config = RegulatorConfig {
        scoring: false,
        ..Default::default()
    };
    for ep in &eps {
        let trace = run(&w, ep, &HeuristicPolicy::greedy(0), &config, &oracle(&w, ep));
        let r = &trace.result;
        assert!(r.success && r.switch.is_none(), "{}", ep.id);
        assert_eq!(r.llm_calls, 1);
        assert_eq!(r.trajectory, ep.gt_path);
        assert_eq!(r.termination, Termination::RunnerStop);
    }
}

#[test]
fn trap_is_caught_by_looping_and_recovered() {
    let (w, eps) = world_and_episodes(14, 6);
    let trap = HeuristicPolicy::new(0.0, 1.0, 0.0, 9).unwrap();
    let config = RegulatorConfig {
        scoring: false,
        ..Default::default()
    };
    for ep in &eps {
        let trace = run(&w, ep, &trap, &config, &oracle(&w, ep));
        let sw = trace.result.switch.expect("trap must trigger a switch");
        assert_eq!(sw.reason, SwitchReason::Looping, "{}", ep.id);
        // ping-pong from the first edge: the start reaches 5 visits after 8 actions
        assert!(sw.step <= 12, "{}: switched at {}", ep.id, sw.step);
        assert!(trace.result.success, "{}: {:?}", ep.id, trace.result.trajectory);
    }
}

#[test]
fn premature_stop_is_vetoed_by_ending() {
    let (w, eps) = world_and_episodes(15, 6);
    let quitter = HeuristicPolicy::new(0.0, 0.0, 1.0, 9).unwrap();
    let config = RegulatorConfig {
        scoring: false,
        ..Default::default()
    };
    for ep in &eps {
        let r = run(&w, ep, &quitter, &config, &oracle(&w, ep)).result;
        assert_eq!(r.switch.map(|s| (s.reason, s.step)), Some((SwitchReason::Ending, 0)), "{}", ep.id);
        assert!(r.success);
        assert!(r.modes.iter().all(|m| *m == Mode::Ruminator));
    }
}

#[test]
fn premature_stop_rate_is_per_episode() {
    let p = 0.3;
    let policy = HeuristicPolicy::new(0.0, 0.0, p, 21).unwrap();
    let (mut early, mut total) = (0usize, 0usize);
    for seed in 30..40 {
        let (w, eps) = world_and_episodes(seed, 30);
        for ep in &eps {
            let traj = bare_rollout(&policy, &w, ep, 40);
            early += usize::from(traj.last() != Some(&ep.goal));
            total += 1;
        }
    }
    let rate = early as f64 / total as f64;
    assert!((rate - p).abs() < 0.07, "early-stop rate {rate:.3} over {total} episodes");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episode_results_are_self_consistent(
        world_seed in 0u64..500,
        ep_seed in 0u64..500,
        noise in 0.0f64..0.5,
        trap in 0.0f64..1.0,
        stop in 0.0f64..0.5,
        policy_seed in 0u64..1000,
        teleport in any::<bool>(),
    ) {
        let w = generate_world(&WorldParams::new(world_seed, 40, 3.0)).unwrap();
        let ep = generate_episodes(&w, ep_seed, 1, InstructionStyle::FineGrained, 3).unwrap().remove(0);
        let policy = HeuristicPolicy::new(noise, trap, stop, policy_seed).unwrap();
        let config = RegulatorConfig { scoring: false, restart_teleport: teleport, ..Default::default() };
        let trace = run(&w, &ep, &policy, &config, &oracle(&w, &ep));
        let r = &trace.result;

        prop_assert_eq!(&r.trajectory[0], &ep.start);
        let jumps = if teleport { r.restarts } else { 0 };
        prop_assert_eq!(r.modes.len() + jumps, r.trajectory.len() - 1);
        prop_assert!(r.modes.len() <= config.step_cap);
        prop_assert_eq!(r.success, is_success(&w, r.trajectory.last().unwrap(), &ep.goal).unwrap());
        prop_assert!((r.tl - path_length(&w, &r.trajectory)).abs() < 1e-9);
        if !teleport {
            for pair in r.trajectory.windows(2) {
                prop_assert!(w.neighbors(&pair[0]).unwrap().contains(&pair[1].as_str()));
            }
        }
        let first_rum = r.modes.iter().position(|m| *m == Mode::Ruminator).unwrap_or(r.modes.len());
        prop_assert!(r.modes[first_rum..].iter().all(|m| *m == Mode::Ruminator));
        match r.switch {
            None => prop_assert!(first_rum == r.modes.len() && r.restarts == 0 && r.llm_calls <= 1),
            Some(sw) => prop_assert_eq!(sw.step, first_rum),
        }
    }
}
