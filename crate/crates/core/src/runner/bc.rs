use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Action, Policy, RunnerError};
use crate::memory::MemoryBank;
use crate::num::Scalar;
use crate::params::{scale, Adam, AdamConfig, Checkpoint, Tensor};
use crate::rng::{str_label, stream};
use crate::world::{wrap_angle, Episode, Instruction, Observation, WorldGraph};

const KIND: &str = "bc-policy";
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const STOP: usize = 4;

/// Weights of the behavior-cloned candidate scorer.
///
/// Each option is scored by `w2 . tanh(W1 x + b1) + b2`, where `x` is the
/// bag-of-tags instruction embedding, the option's visual feature and a
/// sin/cos encoding of its relative heading. The stop option uses the mean
/// scenery feature with a zero heading code, plus `stop_bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParamsT<S> {
    pub vocab: Vec<String>,
    pub feature_dim: usize,
    pub hidden: usize,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> PolicyParamsT<S> {
    pub fn input_dim(&self) -> usize {
        self.vocab.len() + self.feature_dim + 2
    }

    fn shapes(vocab: usize, feature_dim: usize, hidden: usize) -> Vec<(&'static str, Vec<usize>)> {
        let input = vocab + feature_dim + 2;
        vec![
            ("w1", vec![hidden, input]),
            ("b1", vec![hidden]),
            ("w2", vec![hidden]),
            ("b2", vec![1]),
            ("stop_bias", vec![1]),
        ]
    }

    pub fn zeros(vocab: Vec<String>, feature_dim: usize, hidden: usize) -> Self {
        let tensors = Self::shapes(vocab.len(), feature_dim, hidden)
            .iter()
            .map(|(n, d)| Tensor::zeros(n, d))
            .collect();
        Self {
            vocab,
            feature_dim,
            hidden,
            tensors,
        }
    }

    pub fn random(vocab: Vec<String>, feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(vocab, feature_dim, hidden);
        let mut rng = stream(seed, &[str_label("bc-init")]);
        let input = p.input_dim();
        p.tensors[W1] = Tensor::randn("w1", &[hidden, input], 1.0 / (input as f64).sqrt(), &mut rng);
        p.tensors[W2] = Tensor::randn("w2", &[hidden], 1.0 / (hidden as f64).sqrt(), &mut rng);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_tensors(
            KIND,
            serde_json::json!({
                "vocab": self.vocab,
                "feature_dim": self.feature_dim,
                "hidden": self.hidden,
            }),
            &self.tensors,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RunnerError> {
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| crate::params::CheckpointError::Shape {
            name: "meta".into(),
            message: e.to_string(),
        })?;
        let shapes = Self::shapes(meta.vocab.len(), meta.feature_dim, meta.hidden);
        let tensors = ck.tensors_as(KIND, &shapes)?;
        Ok(Self {
            vocab: meta.vocab,
            feature_dim: meta.feature_dim,
            hidden: meta.hidden,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RunnerError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn score(&self, x: &[S]) -> (S, Vec<S>) {
        let (w1, b1, w2, b2) = (&self.tensors[W1].data, &self.tensors[B1].data, &self.tensors[W2].data, self.tensors[B2].data[0]);
        let n = x.len();
        let h: Vec<S> = (0..self.hidden)
            .map(|j| {
                let z = w1[j * n..(j + 1) * n].iter().zip(x).map(|(&w, &xi)| w * xi).sum::<S>() + b1[j];
                z.tanh()
            })
            .collect();
        let s = h.iter().zip(w2).map(|(&a, &b)| a * b).sum::<S>() + b2;
        (s, h)
    }

    /// Scores of every option; the last entry is the stop option.
    pub fn option_scores(&self, state: &BcState) -> Vec<S> {
        let stop_bias = self.tensors[STOP].data[0];
        let last = state.options.len() - 1;
        state
            .options
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let x: Vec<S> = x.iter().map(|&v| S::of(v)).collect();
                let s = self.score(&x).0;
                if k == last {
                    s + stop_bias
                } else {
                    s
                }
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct Meta {
    vocab: Vec<String>,
    feature_dim: usize,
    hidden: usize,
}

/// Featurized decision state: candidate inputs followed by the stop input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcState {
    pub options: Vec<Vec<f64>>,
    pub targets: Vec<Action>,
    /// Index of the demonstrated option, when known.
    pub label: Option<usize>,
}

impl BcState {
    pub fn build(vocab: &[String], feature_dim: usize, instruction: &Instruction, obs: &Observation) -> Self {
        let tags = instruction.tags();
        let bag: Vec<f64> = vocab
            .iter()
            .map(|v| if tags.contains(v) { 1.0 } else { 0.0 })
            .collect();
        let fit = |f: &[f64]| -> Vec<f64> { (0..feature_dim).map(|i| f.get(i).copied().unwrap_or(0.0)).collect() };
        let mut options = Vec::with_capacity(obs.candidates.len() + 1);
        let mut targets = Vec::with_capacity(obs.candidates.len() + 1);
        for c in &obs.candidates {
            let mut x = bag.clone();
            x.extend(fit(&obs.slots[c.slot].feature));
            x.push(c.relative_heading.sin());
            x.push(c.relative_heading.cos());
            options.push(x);
            targets.push(Action::move_to(c.target.clone()));
        }
        let scenery: Vec<&[f64]> = obs
            .slots
            .iter()
            .filter(|s| s.navigable_to.is_none())
            .map(|s| s.feature.as_slice())
            .collect();
        let mut local = vec![0.0; feature_dim];
        for f in &scenery {
            for (l, v) in local.iter_mut().zip(fit(f)) {
                *l += v / scenery.len() as f64;
            }
        }
        let mut x = bag;
        x.extend(local);
        x.extend([0.0, 0.0]);
        options.push(x);
        targets.push(Action::Stop);
        Self {
            options,
            targets,
            label: None,
        }
    }
}

/// Mean cross-entropy over demonstrated states.
pub fn bc_loss<S: Scalar>(params: &PolicyParamsT<S>, states: &[BcState]) -> S {
    let mut total = S::zero();
    for st in states {
        let s = params.option_scores(st);
        let m = s.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = m + s.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
        total += lse - s[st.label.expect("labelled state")];
    }
    total / S::of(states.len().max(1) as f64)
}

/// Analytic gradient of [`bc_loss`].
pub fn bc_gradient<S: Scalar>(params: &PolicyParamsT<S>, states: &[BcState]) -> (S, Vec<Tensor<S>>) {
    let mut grads: Vec<Tensor<S>> = params.tensors.iter().map(Tensor::zeros_like).collect();
    let mut total = S::zero();
    let w2 = &params.tensors[W2].data;
    let n_in = params.input_dim();
    for st in states {
        let y = st.label.expect("labelled state");
        let xs: Vec<Vec<S>> = st.options.iter().map(|x| x.iter().map(|&v| S::of(v)).collect()).collect();
        let fw: Vec<(S, Vec<S>)> = xs.iter().map(|x| params.score(x)).collect();
        let last = xs.len() - 1;
        let scores: Vec<S> = fw
            .iter()
            .enumerate()
            .map(|(k, (s, _))| if k == last { *s + params.tensors[STOP].data[0] } else { *s })
            .collect();
        let m = scores.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = scores.iter().map(|&v| (v - m).exp()).collect();
        let z: S = exps.iter().copied().sum();
        total += m + z.ln() - scores[y];
        for (k, ((_, h), x)) in fw.iter().zip(&xs).enumerate() {
            let mut ds = exps[k] / z;
            if k == y {
                ds -= S::one();
            }
            if k == last {
                grads[STOP].data[0] += ds;
            }
            grads[B2].data[0] += ds;
            for j in 0..params.hidden {
                grads[W2].data[j] += ds * h[j];
                let dz = ds * w2[j] * (S::one() - h[j] * h[j]);
                grads[B1].data[j] += dz;
                let row = &mut grads[W1].data[j * n_in..(j + 1) * n_in];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += dz * xi;
                }
            }
        }
    }
    let inv = S::one() / S::of(states.len().max(1) as f64);
    scale(&mut grads, inv);
    (total * inv, grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcSettings {
    pub epochs: usize,
    pub hidden: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BcSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            hidden: 32,
            lr: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BcTrainReport<S> {
    pub params: PolicyParamsT<S>,
    pub losses: Vec<f64>,
}

/// Teacher-forced demonstration states along every ground-truth path.
pub fn demonstration_states(world: &WorldGraph, episodes: &[Episode], vocab: &[String]) -> Result<Vec<BcState>, RunnerError> {
    let mut out = Vec::new();
    for ep in episodes {
        let mut heading = 0.0;
        for (k, vp) in ep.gt_path.iter().enumerate() {
            let obs = world.observe(vp, heading)?;
            let mut st = BcState::build(vocab, world.feature_dim, &ep.instruction, &obs);
            let want = match ep.gt_path.get(k + 1) {
                Some(next) => Action::move_to(next.clone()),
                None => Action::Stop,
            };
            st.label = st.targets.iter().position(|t| *t == want);
            if st.label.is_none() {
                return Err(crate::world::WorldError::Validation {
                    location: format!("episode {}", ep.id),
                    message: format!("{vp} has no slot towards the next ground-truth viewpoint"),
                }
                .into());
            }
            if let Some(next) = ep.gt_path.get(k + 1) {
                heading = wrap_angle(obs.candidate(next).map_or(heading, |c| c.heading));
            }
            out.push(st);
        }
    }
    Ok(out)
}

/// Full-batch behavior cloning with Adam.
pub fn train_bc<S: Scalar>(episodes: &[Episode], world: &WorldGraph, hyper: &BcSettings) -> Result<BcTrainReport<S>, RunnerError> {
    if episodes.is_empty() {
        return Err(RunnerError::NoEpisodes);
    }
    let vocab = world.tag_vocab.clone();
    let states = demonstration_states(world, episodes, &vocab)?;
    let mut params = PolicyParamsT::<S>::random(vocab, world.feature_dim, hyper.hidden, hyper.seed);
    let mut opt = Adam::new(
        AdamConfig {
            lr: hyper.lr,
            ..Default::default()
        },
        &params.tensors,
    );
    let mut losses = Vec::with_capacity(hyper.epochs + 1);
    for epoch in 0..hyper.epochs {
        let (loss, grads) = bc_gradient(&params, &states);
        let loss = loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(RunnerError::Diverged { epoch, loss });
        }
        losses.push(loss);
        opt.step(&mut params.tensors, &grads);
    }
    let final_loss = bc_loss(&params, &states).to_f64_lossy();
    if !final_loss.is_finite() || !params.is_finite() {
        return Err(RunnerError::Diverged {
            epoch: hyper.epochs,
            loss: final_loss,
        });
    }
    losses.push(final_loss);
    Ok(BcTrainReport { params, losses })
}

/// Deterministic argmax policy over behavior-cloned scores.
#[derive(Debug, Clone)]
pub struct BcPolicy<S> {
    pub params: PolicyParamsT<S>,
}

impl<S: Scalar> Policy for BcPolicy<S> {
    fn decide(&self, instruction: &Instruction, obs: &Observation, _bank: &MemoryBank) -> Action {
        let st = BcState::build(&self.params.vocab, self.params.feature_dim, instruction, obs);
        let scores = self.params.option_scores(&st);
        let mut best = 0;
        for (k, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = k;
            }
        }
        st.targets[best].clone()
    }

    fn name(&self) -> String {
        "behavior-cloned".to_string()
    }
}
