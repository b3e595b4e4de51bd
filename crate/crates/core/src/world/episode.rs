use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{geodesic, Result, WorldError, WorldGraph};
use crate::rng::{str_label, stream};

/// Version of the instruction templates below; bump when wording changes.
pub const INSTRUCTION_TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstructionStyle {
    FineGrained,
    CoarseGrained,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub style: InstructionStyle,
}

impl Instruction {
    /// Tags named by the instruction, in order of mention.
    pub fn tags(&self) -> Vec<String> {
        parse_instruction_tags(&self.text)
    }

    /// The object the instruction ends on.
    pub fn target_tag(&self) -> Option<String> {
        self.tags().pop()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub instruction: Instruction,
    pub start: String,
    pub goal: String,
    pub gt_path: Vec<String>,
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bthe ([a-z_]+)").expect("static regex"))
}

pub fn parse_instruction_tags(text: &str) -> Vec<String> {
    tag_regex()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

fn render_fine(clauses: &[String]) -> String {
    match clauses {
        [] => String::new(),
        [only] => format!("Walk toward the {only} and stop there."),
        [first, middle @ .., last] => {
            let mut s = format!("Walk toward the {first}");
            for c in middle {
                s.push_str(&format!(", then head to the {c}"));
            }
            s.push_str(&format!(", and stop at the {last}."));
            s
        }
    }
}

fn render_coarse(target: &str) -> String {
    format!("Bring me the {target}.")
}

/// Tags of every navigable slot at `vp` except the one towards `except`.
fn other_candidate_tags<'w>(world: &'w WorldGraph, vp: &str, except: &str) -> Result<Vec<&'w str>> {
    Ok(world
        .get(vp)?
        .slots
        .iter()
        .filter(|s| s.navigable_to.as_deref().is_some_and(|t| t != except))
        .flat_map(|s| s.tags.iter().map(String::as_str))
        .collect())
}

/// Pick instruction tags for `path` such that every clause singles out one
/// candidate and the target is not visible anywhere earlier along the route.
fn instruction_for_path(
    world: &WorldGraph,
    path: &[String],
    style: InstructionStyle,
    rng: &mut impl rand::Rng,
) -> Result<Option<Instruction>> {
    let goal = path.last().expect("non-empty path");
    let hops = path.len() - 1;
    let goal_vp = world.get(goal)?;
    let all_goal_tags: Vec<&str> = goal_vp.local_tags().into_iter().collect();
    let mut goal_tags = all_goal_tags.clone();
    goal_tags.retain(|g| {
        path[..hops].iter().enumerate().all(|(k, p)| {
            let vp = world.get(p).expect("path ids validated");
            !vp.local_tags().contains(g)
                && other_candidate_tags(world, p, goal).is_ok_and(|t| !t.contains(g))
                && (k + 1 < hops || vp.slot_towards(goal).is_some_and(|s| s.tags.iter().any(|t| t == g)))
        })
    });
    if goal_tags.is_empty() && style == InstructionStyle::CoarseGrained {
        goal_tags = all_goal_tags;
    }
    let Some(&target) = goal_tags.choose(rng) else {
        return Ok(None);
    };
    let text = match style {
        InstructionStyle::CoarseGrained => render_coarse(target),
        InstructionStyle::FineGrained => {
            let mut clauses = Vec::with_capacity(hops);
            for k in 0..hops.saturating_sub(1) {
                let slot = world.get(&path[k])?.slot_towards(&path[k + 1]);
                let others = other_candidate_tags(world, &path[k], &path[k + 1])?;
                let options: Vec<&String> = slot
                    .map(|s| s.tags.iter().filter(|t| !others.contains(&t.as_str())).collect())
                    .unwrap_or_default();
                let Some(&c) = options.choose(rng) else {
                    return Ok(None);
                };
                clauses.push(c.clone());
            }
            clauses.push(target.to_string());
            render_fine(&clauses)
        }
    };
    Ok(Some(Instruction { text, style }))
}

/// Generate one episode on `world`. The ground-truth path is a shortest path.
pub fn generate_episode(world: &WorldGraph, seed: u64, style: InstructionStyle, min_hops: usize) -> Result<Episode> {
    let mut rng = stream(seed, &[str_label("episode"), world.seed]);
    let ids: Vec<&str> = world.viewpoints.iter().map(|v| v.id.as_str()).collect();
    let mut pairs: Vec<(usize, usize)> = (0..ids.len())
        .flat_map(|a| (0..ids.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    for (a, b) in pairs {
        let (_, path) = geodesic(world, ids[a], ids[b])?;
        if path.len() - 1 < min_hops.max(1) {
            continue;
        }
        if let Some(instruction) = instruction_for_path(world, &path, style, &mut rng)? {
            return Ok(Episode {
                id: format!("w{}-e{}", world.seed, seed),
                instruction,
                start: ids[a].to_string(),
                goal: ids[b].to_string(),
                gt_path: path,
            });
        }
    }
    Err(WorldError::NoEpisode { seed, min_hops })
}

/// `count` episodes with seeds `seed, seed+1, ...`.
pub fn generate_episodes(
    world: &WorldGraph,
    seed: u64,
    count: usize,
    style: InstructionStyle,
    min_hops: usize,
) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|k| generate_episode(world, seed.wrapping_add(k), style, min_hops))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldParams};

    fn world60() -> WorldGraph {
        generate_world(&WorldParams::new(7, 60, 3.0)).unwrap()
    }

    #[test]
    fn two_node_world_episode() {
        let w = generate_world(&WorldParams {
            seed: 7,
            n_viewpoints: 2,
            mean_degree: 1.0,
            tag_vocab: vec!["door".into()],
        })
        .unwrap();
        let ep = generate_episode(&w, 1, InstructionStyle::CoarseGrained, 1).unwrap();
        assert_eq!(ep.gt_path, vec![ep.start.clone(), ep.goal.clone()]);
        assert!(ep.instruction.text.starts_with("Bring me the "));
    }

    #[test]
    fn coarse_instruction_names_goal_tag() {
        let w = world60();
        for seed in 0..10 {
            let ep = generate_episode(&w, seed, InstructionStyle::CoarseGrained, 3).unwrap();
            assert!(ep.instruction.text.starts_with("Bring me the "), "{}", ep.instruction.text);
            let tag = ep.instruction.target_tag().unwrap();
            assert!(w.get(&ep.goal).unwrap().local_tags().contains(tag.as_str()));
        }
    }

    #[test]
    fn fine_clauses_match_segment_tags() {
        let w = world60();
        let mut seen_long = false;
        for seed in 0..20 {
            let ep = generate_episode(&w, seed, InstructionStyle::FineGrained, 4).unwrap();
            let hops = ep.gt_path.len() - 1;
            assert!(hops >= 4);
            seen_long = true;
            let tags = ep.instruction.tags();
            assert_eq!(tags.len(), hops, "{}", ep.instruction.text);
            for (k, tag) in tags.iter().enumerate() {
                let slot = w.get(&ep.gt_path[k]).unwrap().slot_towards(&ep.gt_path[k + 1]).unwrap();
                assert!(slot.tags.contains(tag), "clause {k} tag {tag} not on segment");
            }
        }
        assert!(seen_long);
    }

    #[test]
    fn gt_path_is_geodesic() {
        let w = world60();
        for ep in generate_episodes(&w, 100, 10, InstructionStyle::FineGrained, 3).unwrap() {
            let (d, _) = geodesic(&w, &ep.start, &ep.goal).unwrap();
            let len: f64 = ep.gt_path.windows(2).map(|s| w.distance(&s[0], &s[1]).unwrap()).sum();
            assert!((d - len).abs() < 1e-9);
        }
    }

    #[test]
    fn impossible_min_hops_is_an_error() {
        let w = generate_world(&WorldParams::new(7, 4, 2.0)).unwrap();
        assert!(matches!(
            generate_episode(&w, 0, InstructionStyle::FineGrained, 50),
            Err(WorldError::NoEpisode { .. })
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let w = world60();
        let a = generate_episode(&w, 9, InstructionStyle::FineGrained, 3).unwrap();
        let b = generate_episode(&w, 9, InstructionStyle::FineGrained, 3).unwrap();
        assert_eq!(a, b);
    }
}
