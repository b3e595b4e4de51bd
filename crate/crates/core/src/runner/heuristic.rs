use serde::{Deserialize, Serialize};

use super::{Action, Policy, RunnerError};
use crate::memory::MemoryBank;
use crate::rng::{str_label, unit_draw};
use crate::world::{id_cmp, Candidate, Instruction, Observation};

/// Greedy instruction follower with three injectable failure modes.
///
/// * `noise`: per-step chance of picking a uniformly random candidate.
/// * `trap_prob`: chance that a clean run along the instructed route meets a
///   trap edge. Once traversed, a trap sends the agent back, and since the coin
///   is keyed by the unordered pair it keeps alternating between the two ends.
/// * `premature_stop_prob`: chance that a clean run stops before the goal.
///
/// Episode-level rates become per-check hazards through the route length `L`
/// read off the instruction (one tag per hop): `1 - (1 - p)^(1/n)` with
/// `n = L` stop checks and `n = L - 1` trap checks. A rate of 1 therefore
/// fires at the first opportunity.
///
/// All coins are keyed by (seed, episode, step or edge), so decisions are pure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicPolicy {
    pub noise: f64,
    pub trap_prob: f64,
    pub premature_stop_prob: f64,
    pub seed: u64,
}

impl HeuristicPolicy {
    pub fn new(noise: f64, trap_prob: f64, premature_stop_prob: f64, seed: u64) -> Result<Self, RunnerError> {
        for (name, value) in [
            ("noise", noise),
            ("trap_prob", trap_prob),
            ("premature_stop_prob", premature_stop_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(RunnerError::Parameter { name, value });
            }
        }
        Ok(Self {
            noise,
            trap_prob,
            premature_stop_prob,
            seed,
        })
    }

    pub fn greedy(seed: u64) -> Self {
        Self {
            noise: 0.0,
            trap_prob: 0.0,
            premature_stop_prob: 0.0,
            seed,
        }
    }

    fn episode_key(instruction: &Instruction, obs: &Observation, bank: &MemoryBank) -> u64 {
        let start = bank.records().first().map_or(obs.viewpoint.as_str(), |r| r.viewpoint.as_str());
        str_label(&instruction.text) ^ str_label(start).rotate_left(17)
    }

    fn coin(&self, key: u64, what: &str, label: u64) -> f64 {
        unit_draw(self.seed, &[key, str_label(what), label])
    }
}

/// Per-check hazard giving overall probability `p` across `n` checks.
fn hazard(p: f64, n: usize) -> f64 {
    if p >= 1.0 || n <= 1 {
        p
    } else {
        1.0 - (1.0 - p).powf(1.0 / n as f64)
    }
}

fn first_with_tag<'o>(cands: &'o [Candidate], tag: &str) -> Option<&'o Candidate> {
    cands.iter().find(|c| c.tags.iter().any(|t| t == tag))
}

impl Policy for HeuristicPolicy {
    fn decide(&self, instruction: &Instruction, obs: &Observation, bank: &MemoryBank) -> Action {
        let tags = instruction.tags();
        let target = tags.last().map(String::as_str);
        if target.is_some_and(|g| obs.local_tags().contains(g)) {
            return Action::Stop;
        }
        if obs.candidates.is_empty() {
            return Action::Stop;
        }
        let key = Self::episode_key(instruction, obs, bank);
        let step = bank.trajectory_len() as u64;

        let hops = tags.len().max(1);
        if self.coin(key, "stop", step) < hazard(self.premature_stop_prob, hops) {
            return Action::Stop;
        }

        let records = bank.records();
        if records.len() >= 2 {
            let prev = records[records.len() - 2].viewpoint.as_str();
            let here = obs.viewpoint.as_str();
            if prev != here && obs.candidate(prev).is_some() {
                let (a, b) = if id_cmp(prev, here).is_le() { (prev, here) } else { (here, prev) };
                let edge = str_label(a) ^ str_label(b).rotate_left(29);
                if self.coin(key, "trap", edge) < hazard(self.trap_prob, hops - 1) {
                    return Action::move_to(prev);
                }
            }
        }

        if self.coin(key, "noise", step) < self.noise {
            let k = (self.coin(key, "noise-pick", step) * obs.candidates.len() as f64) as usize;
            return Action::move_to(obs.candidates[k.min(obs.candidates.len() - 1)].target.clone());
        }

        if let Some(c) = target.and_then(|g| first_with_tag(&obs.candidates, g)) {
            return Action::move_to(c.target.clone());
        }
        if let Some(c) = tags.get(step as usize).and_then(|t| first_with_tag(&obs.candidates, t)) {
            return Action::move_to(c.target.clone());
        }

        // lost: prefer the least visited direction that mentions instruction objects
        let visits = |c: &Candidate| bank.map().visit_count.get(&c.target).copied().unwrap_or(0);
        let overlap = |c: &Candidate| c.tags.iter().filter(|t| tags.contains(t)).count();
        let best = obs
            .candidates
            .iter()
            .min_by(|a, b| {
                visits(a)
                    .cmp(&visits(b))
                    .then(overlap(b).cmp(&overlap(a)))
                    .then(a.relative_heading.abs().total_cmp(&b.relative_heading.abs()))
                    .then(id_cmp(&a.target, &b.target))
            })
            .expect("candidates non-empty");
        Action::move_to(best.target.clone())
    }

    fn name(&self) -> String {
        format!(
            "heuristic(noise={}, trap={}, stop={})",
            self.noise, self.trap_prob, self.premature_stop_prob
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{MemoryEntry, StepRecord};
    use crate::runner::Mode;
    use crate::world::{generate_episodes, generate_world, wrap_angle, InstructionStyle, WorldGraph, WorldParams};

    /// Minimal rollout used only by these tests.
    fn rollout(policy: &dyn Policy, world: &WorldGraph, ep: &crate::world::Episode, cap: usize) -> Vec<String> {
        let mut bank = MemoryBank::new();
        let (mut vp, mut heading) = (ep.start.clone(), 0.0);
        let mut traj = vec![vp.clone()];
        let mut last_action = None;
        for t in 0..=cap {
            let obs = world.observe(&vp, heading).unwrap();
            let f = obs.facing();
            bank.append(StepRecord {
                t,
                viewpoint: vp.clone(),
                heading,
                action: last_action.clone(),
                mode: Mode::Runner,
                memory_entry: MemoryEntry::OrientedView {
                    feature: f.feature.clone(),
                    tags: f.tags.clone(),
                },
                neighbors: obs.candidates.iter().map(|c| c.target.clone()).collect(),
            })
            .unwrap();
            let a = policy.decide(&ep.instruction, &obs, &bank);
            match &a {
                Action::Stop => break,
                Action::Move { target } => {
                    let c = obs.candidate(target).expect("move to a candidate");
                    heading = wrap_angle(c.heading);
                    vp = target.clone();
                    traj.push(vp.clone());
                }
            }
            last_action = Some(a);
        }
        traj
    }

    #[test]
    fn greedy_follows_ground_truth() {
        for seed in 0..4 {
            let w = generate_world(&WorldParams::new(seed, 60, 3.0)).unwrap();
            for ep in generate_episodes(&w, 50, 20, InstructionStyle::FineGrained, 3).unwrap() {
                let traj = rollout(&HeuristicPolicy::greedy(1), &w, &ep, 40);
                assert_eq!(traj, ep.gt_path, "{}: {}", ep.id, ep.instruction.text);
            }
        }
    }

    #[test]
    fn moves_toward_visible_goal_and_stops_there() {
        let w = generate_world(&WorldParams::new(3, 60, 3.0)).unwrap();
        let ep = generate_episodes(&w, 0, 1, InstructionStyle::CoarseGrained, 1).unwrap().remove(0);
        let last_hop = &ep.gt_path[ep.gt_path.len() - 2];
        let bank = MemoryBank::new();
        let p = HeuristicPolicy::greedy(0);
        let obs = w.observe(last_hop, 0.0).unwrap();
        assert_eq!(p.decide(&ep.instruction, &obs, &bank), Action::move_to(ep.goal.clone()));
        let at_goal = w.observe(&ep.goal, 0.0).unwrap();
        assert_eq!(p.decide(&ep.instruction, &at_goal, &bank), Action::Stop);
    }

    #[test]
    fn trap_pair_alternates() {
        let w = generate_world(&WorldParams::new(5, 60, 3.0)).unwrap();
        let ep = generate_episodes(&w, 3, 1, InstructionStyle::FineGrained, 4).unwrap().remove(0);
        let p = HeuristicPolicy::new(0.0, 1.0, 0.0, 9).unwrap();
        let traj = rollout(&p, &w, &ep, 10);
        let mut counts = std::collections::BTreeMap::new();
        for v in &traj {
            *counts.entry(v.clone()).or_insert(0) += 1;
        }
        assert!(counts.values().copied().max().unwrap() > 4, "{traj:?}");
        assert_eq!(counts.len(), 2);
    }

    #[test]
    fn certain_premature_stop_stops_at_start() {
        let w = generate_world(&WorldParams::new(5, 60, 3.0)).unwrap();
        let ep = generate_episodes(&w, 3, 1, InstructionStyle::FineGrained, 4).unwrap().remove(0);
        let p = HeuristicPolicy::new(0.0, 0.0, 1.0, 9).unwrap();
        assert_eq!(rollout(&p, &w, &ep, 10), vec![ep.start.clone()]);
    }

    #[test]
    fn noisy_policy_is_deterministic_and_valid() {
        let w = generate_world(&WorldParams::new(5, 60, 3.0)).unwrap();
        let p = HeuristicPolicy::new(0.3, 0.5, 0.05, 4).unwrap();
        for ep in generate_episodes(&w, 0, 10, InstructionStyle::FineGrained, 3).unwrap() {
            let a = rollout(&p, &w, &ep, 30);
            let b = rollout(&p, &w, &ep, 30);
            assert_eq!(a, b);
            for s in a.windows(2) {
                assert!(w.neighbors(&s[0]).unwrap().contains(&s[1].as_str()));
            }
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(HeuristicPolicy::new(1.5, 0.0, 0.0, 0).is_err());
        assert!(HeuristicPolicy::new(0.0, -0.1, 0.0, 0).is_err());
    }
}
