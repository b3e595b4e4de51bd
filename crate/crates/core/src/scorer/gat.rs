use std::path::Path;

use serde::Deserialize;

use super::features::{TrajectoryGraph, EDGE_DIM};
use super::ScorerError;
use crate::num::{bce_with_logit, sigmoid, Scalar};
use crate::params::{Checkpoint, Tensor};
use crate::rng::{str_label, stream};

const KIND: &str = "gat-scorer";
const LEAK: f64 = 0.2;

const L1_W: usize = 0;
const L1_WE: usize = 1;
const L1_A: usize = 2;
const L2_W: usize = 3;
const L2_WE: usize = 4;
const L2_A: usize = 5;
const OUT_W: usize = 6;
const OUT_B: usize = 7;

/// Two attention layers with edge encodings, mean-pool readout.
///
/// Per layer, for an edge j -> i with feature f (self-loops use f = 0):
///
/// ```text
/// z = W h,  u = We f
/// e_ij  = leaky_relu(a[..H] . z_i + a[H..2H] . z_j + a[2H..] . u_ij)
/// alpha = softmax of e over the in-edges of i plus its self-loop
/// h'_i  = elu(sum_j alpha_ij (z_j + u_ij))
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GatParams<S> {
    pub node_dim: usize,
    pub edge_dim: usize,
    pub hidden: usize,
    pub tensors: Vec<Tensor<S>>,
}

#[derive(Deserialize)]
struct Meta {
    node_dim: usize,
    edge_dim: usize,
    hidden: usize,
}

fn shapes(node_dim: usize, edge_dim: usize, hidden: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("l1.w", vec![hidden, node_dim]),
        ("l1.we", vec![hidden, edge_dim]),
        ("l1.a", vec![3 * hidden]),
        ("l2.w", vec![hidden, hidden]),
        ("l2.we", vec![hidden, edge_dim]),
        ("l2.a", vec![3 * hidden]),
        ("out.w", vec![hidden]),
        ("out.b", vec![1]),
    ]
}

impl<S: Scalar> GatParams<S> {
    pub fn zeros(node_dim: usize, hidden: usize) -> Self {
        Self {
            node_dim,
            edge_dim: EDGE_DIM,
            hidden,
            tensors: shapes(node_dim, EDGE_DIM, hidden)
                .iter()
                .map(|(n, d)| Tensor::zeros(n, d))
                .collect(),
        }
    }

    /// Glorot-style Gaussian init, zero readout bias.
    pub fn random(node_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(node_dim, hidden);
        let mut rng = stream(seed, &[str_label("gat-init")]);
        for t in p.tensors.iter_mut().take(OUT_W + 1) {
            let fan: usize = t.dims.iter().sum();
            *t = Tensor::randn(&t.name, &t.dims, (2.0 / fan as f64).sqrt(), &mut rng);
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> GatParams<T> {
        GatParams {
            node_dim: self.node_dim,
            edge_dim: self.edge_dim,
            hidden: self.hidden,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bias(&self) -> S {
        self.tensors[OUT_B].data[0]
    }

    pub fn set_bias(&mut self, b: S) {
        self.tensors[OUT_B].data[0] = b;
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_tensors(
            KIND,
            serde_json::json!({"node_dim": self.node_dim, "edge_dim": self.edge_dim, "hidden": self.hidden}),
            &self.tensors,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ScorerError> {
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| ScorerError::Shape(format!("checkpoint meta: {e}")))?;
        let tensors = ck.tensors_as(KIND, &shapes(meta.node_dim, meta.edge_dim, meta.hidden))?;
        Ok(Self {
            node_dim: meta.node_dim,
            edge_dim: meta.edge_dim,
            hidden: meta.hidden,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScorerError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScorerError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// A graph converted to the scalar type with self-loops and per-node in-lists.
#[derive(Debug, Clone)]
pub struct PreparedGraph<S> {
    n: usize,
    x: Vec<S>,
    edge_feat: Vec<Vec<S>>,
    /// For each node: (source node, edge index or None for the self-loop).
    incoming: Vec<Vec<(usize, Option<usize>)>>,
}

impl<S: Scalar> PreparedGraph<S> {
    pub fn new(g: &TrajectoryGraph, node_dim: usize, edge_dim: usize) -> Result<Self, ScorerError> {
        g.check(node_dim, edge_dim)?;
        let n = g.len();
        let mut incoming: Vec<Vec<(usize, Option<usize>)>> = (0..n).map(|i| vec![(i, None)]).collect();
        for (k, e) in g.edges.iter().enumerate() {
            incoming[e.dst].push((e.src, Some(k)));
        }
        Ok(Self {
            n,
            x: g.nodes.iter().flatten().map(|&v| S::of(v)).collect(),
            edge_feat: g.edges.iter().map(|e| e.feature.iter().map(|&v| S::of(v)).collect()).collect(),
            incoming,
        })
    }
}

struct LayerCache<S> {
    z: Vec<S>,
    /// Projected edge features; self-loops project to zero and are not stored.
    u: Vec<Vec<S>>,
    pre: Vec<Vec<S>>,
    alpha: Vec<Vec<S>>,
    m: Vec<S>,
    out: Vec<S>,
}

fn leaky<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        S::of(LEAK) * x
    }
}

fn elu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        x.exp() - S::one()
    }
}

fn matvec<S: Scalar>(w: &[S], rows: usize, cols: usize, x: &[S], out: &mut [S]) {
    for r in 0..rows {
        out[r] = w[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

struct LayerRef<'p, S> {
    w: &'p [S],
    we: &'p [S],
    a: &'p [S],
    din: usize,
    de: usize,
    h: usize,
}

fn layer_forward<S: Scalar>(l: &LayerRef<S>, g: &PreparedGraph<S>, hin: &[S]) -> LayerCache<S> {
    let (n, h) = (g.n, l.h);
    let mut z = vec![S::zero(); n * h];
    for i in 0..n {
        matvec(l.w, h, l.din, &hin[i * l.din..(i + 1) * l.din], &mut z[i * h..(i + 1) * h]);
    }
    let u: Vec<Vec<S>> = g
        .edge_feat
        .iter()
        .map(|f| {
            let mut o = vec![S::zero(); h];
            matvec(l.we, h, l.de, f, &mut o);
            o
        })
        .collect();
    let (a_dst, a_src, a_e) = (&l.a[..h], &l.a[h..2 * h], &l.a[2 * h..]);
    let s_dst: Vec<S> = (0..n).map(|i| dot(a_dst, &z[i * h..(i + 1) * h])).collect();
    let s_src: Vec<S> = (0..n).map(|i| dot(a_src, &z[i * h..(i + 1) * h])).collect();
    let s_e: Vec<S> = u.iter().map(|ue| dot(a_e, ue)).collect();

    let mut pre = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut m = vec![S::zero(); n * h];
    for i in 0..n {
        let p: Vec<S> = g.incoming[i]
            .iter()
            .map(|&(j, k)| s_dst[i] + s_src[j] + k.map_or(S::zero(), |k| s_e[k]))
            .collect();
        let e: Vec<S> = p.iter().map(|&v| leaky(v)).collect();
        let mx = e.iter().copied().fold(S::neg_infinity(), S::max);
        let ex: Vec<S> = e.iter().map(|&v| (v - mx).exp()).collect();
        let tot: S = ex.iter().copied().sum();
        let al: Vec<S> = ex.iter().map(|&v| v / tot).collect();
        let mi = &mut m[i * h..(i + 1) * h];
        for (&(j, k), &a) in g.incoming[i].iter().zip(&al) {
            let zj = &z[j * h..(j + 1) * h];
            for c in 0..h {
                mi[c] += a * (zj[c] + k.map_or(S::zero(), |k| u[k][c]));
            }
        }
        pre.push(p);
        alpha.push(al);
    }
    let out = m.iter().map(|&v| elu(v)).collect();
    LayerCache { z, u, pre, alpha, m, out }
}

/// Accumulates parameter gradients into `gw`, `gwe`, `ga`; returns d(hin).
#[allow(clippy::too_many_arguments)]
fn layer_backward<S: Scalar>(
    l: &LayerRef<S>,
    g: &PreparedGraph<S>,
    hin: &[S],
    c: &LayerCache<S>,
    dout: &[S],
    gw: &mut [S],
    gwe: &mut [S],
    ga: &mut [S],
) -> Vec<S> {
    let (n, h) = (g.n, l.h);
    let dm: Vec<S> = dout
        .iter()
        .zip(&c.m)
        .map(|(&d, &m)| if m > S::zero() { d } else { d * m.exp() })
        .collect();
    let mut dz = vec![S::zero(); n * h];
    let mut du: Vec<Vec<S>> = c.u.iter().map(|v| vec![S::zero(); v.len()]).collect();
    let (a_dst, a_src, a_e) = (&l.a[..h], &l.a[h..2 * h], &l.a[2 * h..]);
    let zero_u = vec![S::zero(); h];

    for i in 0..n {
        let dmi = &dm[i * h..(i + 1) * h];
        let inc = &g.incoming[i];
        let al = &c.alpha[i];
        let dalpha: Vec<S> = inc
            .iter()
            .map(|&(j, k)| {
                let zj = &c.z[j * h..(j + 1) * h];
                let uk = k.map_or(&zero_u[..], |k| &c.u[k][..]);
                (0..h).map(|q| dmi[q] * (zj[q] + uk[q])).sum()
            })
            .collect();
        let mean: S = al.iter().zip(&dalpha).map(|(&a, &d)| a * d).sum();
        for (idx, &(j, k)) in inc.iter().enumerate() {
            let a = al[idx];
            for q in 0..h {
                dz[j * h + q] += a * dmi[q];
            }
            if let Some(k) = k {
                for q in 0..h {
                    du[k][q] += a * dmi[q];
                }
            }
            let de = a * (dalpha[idx] - mean);
            let dpre = if c.pre[i][idx] > S::zero() { de } else { de * S::of(LEAK) };
            let zi = &c.z[i * h..(i + 1) * h];
            let zj = &c.z[j * h..(j + 1) * h];
            for q in 0..h {
                ga[q] += dpre * zi[q];
                dz[i * h + q] += dpre * a_dst[q];
                ga[h + q] += dpre * zj[q];
                dz[j * h + q] += dpre * a_src[q];
            }
            if let Some(k) = k {
                for q in 0..h {
                    ga[2 * h + q] += dpre * c.u[k][q];
                    du[k][q] += dpre * a_e[q];
                }
            }
        }
    }

    for (k, duk) in du.iter().enumerate() {
        let f = &g.edge_feat[k];
        for q in 0..h {
            for (r, &fv) in f.iter().enumerate() {
                gwe[q * l.de + r] += duk[q] * fv;
            }
        }
    }
    let mut dh = vec![S::zero(); n * l.din];
    for i in 0..n {
        let x = &hin[i * l.din..(i + 1) * l.din];
        let dhi = &mut dh[i * l.din..(i + 1) * l.din];
        for q in 0..h {
            let d = dz[i * h + q];
            if d == S::zero() {
                continue;
            }
            let row = q * l.din;
            for r in 0..l.din {
                gw[row + r] += d * x[r];
                dhi[r] += d * l.w[row + r];
            }
        }
    }
    dh
}

struct Forward<S> {
    c1: LayerCache<S>,
    c2: LayerCache<S>,
    pooled: Vec<S>,
    logit: S,
}

fn layers<S: Scalar>(p: &GatParams<S>) -> (LayerRef<'_, S>, LayerRef<'_, S>) {
    let t = &p.tensors;
    (
        LayerRef {
            w: &t[L1_W].data,
            we: &t[L1_WE].data,
            a: &t[L1_A].data,
            din: p.node_dim,
            de: p.edge_dim,
            h: p.hidden,
        },
        LayerRef {
            w: &t[L2_W].data,
            we: &t[L2_WE].data,
            a: &t[L2_A].data,
            din: p.hidden,
            de: p.edge_dim,
            h: p.hidden,
        },
    )
}

fn run<S: Scalar>(p: &GatParams<S>, g: &PreparedGraph<S>) -> Forward<S> {
    let (l1, l2) = layers(p);
    let c1 = layer_forward(&l1, g, &g.x);
    let c2 = layer_forward(&l2, g, &c1.out);
    let h = p.hidden;
    let inv = S::one() / S::of(g.n as f64);
    let mut pooled = vec![S::zero(); h];
    for row in c2.out.chunks_exact(h).take(g.n) {
        for (acc, &x) in pooled.iter_mut().zip(row) {
            *acc += x * inv;
        }
    }
    let logit = dot(&p.tensors[OUT_W].data, &pooled) + p.tensors[OUT_B].data[0];
    Forward { c1, c2, pooled, logit }
}

/// Pre-sigmoid output.
pub fn logit<S: Scalar>(p: &GatParams<S>, g: &PreparedGraph<S>) -> S {
    run(p, g).logit
}

/// Probability that the trajectory is anomalous.
pub fn forward<S: Scalar>(p: &GatParams<S>, graph: &TrajectoryGraph) -> Result<S, ScorerError> {
    let g = PreparedGraph::new(graph, p.node_dim, p.edge_dim)?;
    Ok(sigmoid(logit(p, &g)))
}

/// Binary cross-entropy of one labelled graph and its gradient.
pub fn loss_and_grad<S: Scalar>(p: &GatParams<S>, g: &PreparedGraph<S>, label: S) -> (S, Vec<Tensor<S>>) {
    let f = run(p, g);
    let loss = bce_with_logit(f.logit, label);
    let dlogit = sigmoid(f.logit) - label;
    let mut grads: Vec<Tensor<S>> = p.tensors.iter().map(Tensor::zeros_like).collect();
    let h = p.hidden;
    grads[OUT_B].data[0] = dlogit;
    for q in 0..h {
        grads[OUT_W].data[q] = dlogit * f.pooled[q];
    }
    let inv = S::one() / S::of(g.n as f64);
    let mut d2 = vec![S::zero(); g.n * h];
    for i in 0..g.n {
        for q in 0..h {
            d2[i * h + q] = dlogit * p.tensors[OUT_W].data[q] * inv;
        }
    }
    let (l1, l2) = layers(p);
    let (head, tail) = grads.split_at_mut(L2_W);
    let (g2w, rest) = tail.split_at_mut(1);
    let (g2we, g2a) = rest.split_at_mut(1);
    let d1 = layer_backward(&l2, g, &f.c1.out, &f.c2, &d2, &mut g2w[0].data, &mut g2we[0].data, &mut g2a[0].data);
    let (g1w, rest) = head.split_at_mut(1);
    let (g1we, g1a) = rest.split_at_mut(1);
    layer_backward(&l1, g, &g.x, &f.c1, &d1, &mut g1w[0].data, &mut g1we[0].data, &mut g1a[0].data);
    (loss, grads)
}

pub fn loss<S: Scalar>(p: &GatParams<S>, g: &PreparedGraph<S>, label: S) -> S {
    bce_with_logit(logit(p, g), label)
}

#[cfg(test)]
mod tests {
    use super::super::features::GraphEdge;
    use super::*;

    fn two_node() -> TrajectoryGraph {
        TrajectoryGraph {
            ids: vec!["a".into(), "b".into()],
            nodes: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            edges: vec![GraphEdge {
                src: 0,
                dst: 1,
                feature: vec![1.0, 0.0, 0.0, 0.5, 0.0],
            }],
        }
    }

    #[test]
    fn zero_params_give_one_half() {
        let p = GatParams::<f64>::zeros(2, 4);
        assert_eq!(forward(&p, &two_node()).unwrap(), 0.5);
    }

    #[test]
    fn hand_computed_two_node_graph() {
        // hidden = 1, node_dim = 2
        let mut p = GatParams::<f64>::zeros(2, 1);
        p.tensors[L1_W].data = vec![1.0, 1.0];
        p.tensors[L1_WE].data = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        p.tensors[L1_A].data = vec![1.0, 1.0, 0.0];
        p.tensors[L2_W].data = vec![1.0];
        p.tensors[L2_WE].data = vec![0.0; 5];
        p.tensors[L2_A].data = vec![0.0, 0.0, 0.0];
        p.tensors[OUT_W].data = vec![1.0];
        p.tensors[OUT_B].data = vec![0.0];
        // layer 1: z_a = 1, z_b = 2, u_ab = 1
        // node a: only self-loop -> m = 1, out = 1
        // node b: self pre = 2 + 2 = 4, edge pre = 2 + 1 = 3
        //   alpha_self = e^4 / (e^4 + e^3), m = alpha_self * 2 + alpha_edge * (1 + 1) = 2
        // layer 2 (uniform attention): a -> 1, b -> (2 + 1) / 2 = 1.5
        // pooled = 1.25, output = sigmoid(1.25)
        let want = 1.0 / (1.0 + (-1.25f64).exp());
        let got = forward(&p, &two_node()).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn negative_messages_pass_through_elu() {
        let mut p = GatParams::<f64>::zeros(2, 1);
        p.tensors[L1_W].data = vec![-1.0, 0.0];
        p.tensors[L2_W].data = vec![1.0];
        p.tensors[OUT_W].data = vec![1.0];
        let g = TrajectoryGraph {
            ids: vec!["a".into()],
            nodes: vec![vec![1.0, 0.0]],
            edges: vec![],
        };
        // layer 1 out = elu(-1) = e^-1 - 1; layer 2 out = elu(that)
        let l1 = (-1.0f64).exp() - 1.0;
        let want = 1.0 / (1.0 + (-(l1.exp() - 1.0)).exp());
        assert!((forward(&p, &g).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = GatParams::<f64>::zeros(3, 4);
        assert!(matches!(forward(&p, &two_node()), Err(ScorerError::Shape(_))));
    }
}
