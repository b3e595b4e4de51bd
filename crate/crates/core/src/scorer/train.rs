use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::gat::{loss, loss_and_grad, logit, GatParams, PreparedGraph};
use super::{auc, LabeledSnapshot, ScorerError};
use crate::num::{sigmoid, Scalar};
use crate::params::{add_into, scale, Adam, AdamConfig};
use crate::rng::{str_label, stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerSettings {
    pub epochs: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    /// Fraction of episodes held out.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ScorerSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            hidden: 32,
            lr: 3e-3,
            patience: 30,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScorerTrainReport<S> {
    /// Parameters at the epoch with the lowest held-out loss.
    pub params: GatParams<S>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub val_auc: f64,
    pub train_count: usize,
    pub val_count: usize,
}

/// Split snapshots by episode so no episode straddles the two sets.
pub fn split_by_episode(snapshots: &[LabeledSnapshot], holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut episodes: Vec<&str> = snapshots
        .iter()
        .map(|s| s.episode.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    episodes.shuffle(&mut stream(seed, &[str_label("scorer-split")]));
    let n_val = ((episodes.len() as f64) * holdout).round() as usize;
    let n_val = n_val.clamp(usize::from(episodes.len() > 1), episodes.len().saturating_sub(1));
    let val: BTreeSet<&str> = episodes[..n_val].iter().copied().collect();
    (0..snapshots.len()).partition(|&i| !val.contains(snapshots[i].episode.as_str()))
}

fn mean_loss<S: Scalar>(p: &GatParams<S>, set: &[(PreparedGraph<S>, S)]) -> f64 {
    let total: f64 = set.par_iter().map(|(g, y)| loss(p, g, *y).to_f64_lossy()).collect::<Vec<_>>().iter().sum();
    total / set.len().max(1) as f64
}

/// Full-batch BCE with Adam and early stopping on held-out loss.
pub fn train_scorer<S: Scalar>(snapshots: &[LabeledSnapshot], hyper: &ScorerSettings) -> Result<ScorerTrainReport<S>, ScorerError> {
    let labels: BTreeSet<u8> = snapshots.iter().map(|s| s.label).collect();
    if labels.len() < 2 {
        return Err(ScorerError::SingleClass);
    }
    let node_dim = snapshots[0].graph.nodes.first().map_or(0, Vec::len);
    let prep = |idx: &[usize]| -> Result<Vec<(PreparedGraph<S>, S)>, ScorerError> {
        idx.iter()
            .map(|&i| {
                let s = &snapshots[i];
                Ok((PreparedGraph::new(&s.graph, node_dim, super::EDGE_DIM)?, S::of(s.label as f64)))
            })
            .collect()
    };
    let (tr_idx, va_idx) = split_by_episode(snapshots, hyper.holdout, hyper.seed);
    let train = prep(&tr_idx)?;
    let val = prep(&va_idx)?;
    if train.is_empty() {
        return Err(ScorerError::SingleClass);
    }

    let mut params = GatParams::<S>::random(node_dim, hyper.hidden, hyper.seed);
    let prior = train.iter().map(|(_, y)| y.to_f64_lossy()).sum::<f64>() / train.len() as f64;
    params.set_bias(S::of((prior / (1.0 - prior)).ln()));
    let mut opt = Adam::new(
        AdamConfig {
            lr: hyper.lr,
            ..Default::default()
        },
        &params.tensors,
    );
    let monitor = if val.is_empty() { &train } else { &val };
    let (mut best, mut best_loss, mut best_epoch) = (params.clone(), mean_loss(&params, monitor), 0);
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    let inv = S::one() / S::of(train.len() as f64);

    for epoch in 0..hyper.epochs {
        let per: Vec<(S, Vec<_>)> = train.par_iter().map(|(g, y)| loss_and_grad(&params, g, *y)).collect();
        let mut iter = per.into_iter();
        let (mut l, mut grads) = iter.next().expect("non-empty");
        for (li, gi) in iter {
            l += li;
            add_into(&mut grads, &gi);
        }
        scale(&mut grads, inv);
        let l = (l * inv).to_f64_lossy();
        if !l.is_finite() {
            return Err(ScorerError::Diverged { epoch, loss: l });
        }
        train_loss.push(l);
        opt.step(&mut params.tensors, &grads);
        let v = mean_loss(&params, monitor);
        if !v.is_finite() {
            return Err(ScorerError::Diverged { epoch, loss: v });
        }
        val_loss.push(v);
        if v < best_loss {
            best = params.clone();
            best_loss = v;
            best_epoch = epoch + 1;
        } else if epoch + 1 - best_epoch >= hyper.patience {
            break;
        }
    }

    let val_auc = {
        let scores: Vec<f64> = monitor.par_iter().map(|(g, _)| sigmoid(logit(&best, g)).to_f64_lossy()).collect();
        let ys: Vec<u8> = monitor.iter().map(|(_, y)| (y.to_f64_lossy() > 0.5) as u8).collect();
        auc(&scores, &ys).unwrap_or(f64::NAN)
    };
    Ok(ScorerTrainReport {
        params: best,
        train_loss,
        val_loss,
        best_epoch,
        val_auc,
        train_count: train.len(),
        val_count: val.len(),
    })
}
