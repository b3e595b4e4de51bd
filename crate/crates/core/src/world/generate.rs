use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{euclid, heading_bin, slot_heading, DirectionSlot, Result, Viewpoint, WorldError, WorldGraph, FEATURE_DIM, SLOT_COUNT};
use crate::rng::{str_label, stream};

/// Side of the square the viewpoints are scattered in, meters.
pub const WORLD_EXTENT: f64 = 30.0;
const MIN_SPACING: f64 = 1.5;
const KNN: usize = 6;
const MAX_DEGREE: usize = 6;
const LANDMARKS_PER_VIEWPOINT: usize = 2;
const FEATURE_NOISE: f64 = 0.1;
const MAX_ATTEMPTS: usize = 16;
const TAG_EMBEDDING_SEED: u64 = 0x5eed_7a65;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub seed: u64,
    pub n_viewpoints: usize,
    pub mean_degree: f64,
    pub tag_vocab: Vec<String>,
}

impl WorldParams {
    pub fn new(seed: u64, n_viewpoints: usize, mean_degree: f64) -> Self {
        Self {
            seed,
            n_viewpoints,
            mean_degree,
            tag_vocab: default_tag_vocab(),
        }
    }
}

pub fn default_tag_vocab() -> Vec<String> {
    [
        "sofa", "lamp", "towel", "bed", "sink", "mirror", "fridge", "stove", "table", "chair", "plant",
        "painting", "rug", "bookshelf", "desk", "window", "door", "bathtub", "toilet", "shower", "dresser",
        "wardrobe", "fireplace", "piano", "television", "clock", "vase", "curtain", "stairs", "cabinet",
        "counter", "oven", "microwave", "pillow", "blanket", "bench", "shelf", "closet", "armchair", "ottoman",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Unit-scale embedding of a tag, shared by every world so learned policies transfer.
pub fn tag_embedding(tag: &str, dim: usize) -> Vec<f64> {
    let mut rng = stream(TAG_EMBEDDING_SEED, &[str_label(tag)]);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Generate a connected planar world. Pure function of the parameters.
pub fn generate_world(params: &WorldParams) -> Result<WorldGraph> {
    let WorldParams {
        seed,
        n_viewpoints: n,
        mean_degree,
        ref tag_vocab,
    } = *params;
    if n < 2 {
        return Err(WorldError::InvalidParams(format!("n_viewpoints must be >= 2, got {n}")));
    }
    if !(mean_degree >= 1.0 && mean_degree.is_finite()) {
        return Err(WorldError::InvalidParams(format!("mean_degree must be >= 1, got {mean_degree}")));
    }
    if tag_vocab.is_empty() {
        return Err(WorldError::InvalidParams("tag_vocab is empty".into()));
    }
    let vocab: Vec<String> = tag_vocab.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(w) = try_generate(seed, attempt as u64, n, mean_degree, &vocab) {
            return Ok(w);
        }
    }
    Err(WorldError::Connectivity {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

fn try_generate(seed: u64, attempt: u64, n: usize, mean_degree: f64, vocab: &[String]) -> Option<WorldGraph> {
    let mut rng = stream(seed, &[str_label("world"), attempt]);

    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(n);
    while positions.len() < n {
        let mut p = [0.0; 3];
        for _ in 0..64 {
            p = [rng.random::<f64>() * WORLD_EXTENT, rng.random::<f64>() * WORLD_EXTENT, 0.0];
            if positions.iter().all(|q| euclid(*q, p) >= MIN_SPACING) {
                break;
            }
        }
        positions.push(p);
    }

    let bin = |a: usize, b: usize| -> usize {
        let (pa, pb) = (positions[a], positions[b]);
        heading_bin((pb[1] - pa[1]).atan2(pb[0] - pa[0]))
    };
    let mut slots: Vec<[Option<usize>; SLOT_COUNT]> = vec![[None; SLOT_COUNT]; n];
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let try_add = |a: usize, b: usize, slots: &mut Vec<[Option<usize>; SLOT_COUNT]>, respect_degree: bool| -> bool {
        let (ba, bb) = (bin(a, b), bin(b, a));
        let deg = |s: &[Option<usize>; SLOT_COUNT]| s.iter().filter(|x| x.is_some()).count();
        if slots[a][ba].is_some() || slots[b][bb].is_some() {
            return false;
        }
        if slots[a].contains(&Some(b)) {
            return false;
        }
        // keep at least one scenery slot per viewpoint
        if deg(&slots[a]) >= SLOT_COUNT - 1 || deg(&slots[b]) >= SLOT_COUNT - 1 {
            return false;
        }
        if respect_degree && (deg(&slots[a]) >= MAX_DEGREE || deg(&slots[b]) >= MAX_DEGREE) {
            return false;
        }
        slots[a][ba] = Some(b);
        slots[b][bb] = Some(a);
        true
    };

    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for a in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        order.sort_by(|&x, &y| euclid(positions[a], positions[x]).total_cmp(&euclid(positions[a], positions[y])));
        for &b in order.iter().take(KNN) {
            candidates.insert((a.min(b), a.max(b)));
        }
    }
    let mut candidates: Vec<(usize, usize)> = candidates.into_iter().collect();
    candidates.sort_by(|x, y| {
        euclid(positions[x.0], positions[x.1])
            .total_cmp(&euclid(positions[y.0], positions[y.1]))
            .then(x.cmp(y))
    });
    let target_edges = ((n as f64 * mean_degree) / 2.0).round().max(1.0) as usize;
    for &(a, b) in &candidates {
        if edges.len() >= target_edges {
            break;
        }
        if try_add(a, b, &mut slots, true) {
            edges.push((a, b));
        }
    }

    // connectivity repair: bridge components with the shortest admissible pair
    loop {
        let comp = components(n, &edges);
        let n_comp = comp.iter().max().map_or(0, |m| m + 1);
        if n_comp <= 1 {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            for b in (a + 1)..n {
                if comp[a] == comp[b] {
                    continue;
                }
                let d = euclid(positions[a], positions[b]);
                if best.is_none_or(|(bd, _, _)| d < bd) && slots[a][bin(a, b)].is_none() && slots[b][bin(b, a)].is_none() {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best?;
        if !try_add(a, b, &mut slots, false) {
            return None;
        }
        edges.push((a, b));
    }

    let ids: Vec<String> = (0..n).map(|i| format!("id_{i}")).collect();
    let mut landmarks: Vec<Vec<String>> = Vec::with_capacity(n);
    for _ in 0..n {
        let k = LANDMARKS_PER_VIEWPOINT.min(vocab.len());
        let mut picked: Vec<String> = vocab.choose_multiple(&mut rng, k).cloned().collect();
        picked.shuffle(&mut rng);
        landmarks.push(picked);
    }

    let mut viewpoints = Vec::with_capacity(n);
    for a in 0..n {
        let mut scenery = 0usize;
        let vslots = (0..SLOT_COUNT)
            .map(|b| {
                let tags = match slots[a][b] {
                    Some(t) => landmarks[t].clone(),
                    None => {
                        let tag = landmarks[a][scenery % landmarks[a].len()].clone();
                        scenery += 1;
                        vec![tag]
                    }
                };
                let mut feature = vec![0.0; FEATURE_DIM];
                for tag in &tags {
                    for (f, e) in feature.iter_mut().zip(tag_embedding(tag, FEATURE_DIM)) {
                        *f += e / tags.len() as f64;
                    }
                }
                for f in feature.iter_mut() {
                    *f += FEATURE_NOISE * rng.sample::<f64, _>(StandardNormal) / (FEATURE_DIM as f64).sqrt();
                }
                DirectionSlot {
                    heading: slot_heading(b),
                    elevation: 0.0,
                    feature,
                    tags,
                    navigable_to: slots[a][b].map(|t| ids[t].clone()),
                }
            })
            .collect();
        viewpoints.push(Viewpoint {
            id: ids[a].clone(),
            position: positions[a],
            slots: vslots,
        });
    }
    WorldGraph::new(seed, FEATURE_DIM, vocab.to_vec(), viewpoints).ok()
}

fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    roots
        .iter()
        .map(|&r| {
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            label[r]
        })
        .collect()
}
