//! Two-headed score network over a noised graph `(X_t, A_t)` at time `t`.
//!
//! Node states start from the features, the normalized weighted degree and a
//! sinusoidal time embedding, then pass through message-passing layers
//! `relu(h W_self + mean_nbr(h) W_nbr + b)`. The feature head is linear in
//! the final node states. The adjacency head scores each unordered pair from
//! `h_i * h_j` (elementwise, hence symmetric), the pair's current adjacency
//! entry and the time embedding through a one-hidden-layer MLP.
//!
//! Both heads predict the standard-normal noise that produced the state;
//! the score is that prediction divided by `-s(t)`. Zero parameters
//! therefore give a zero score.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SdeConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn;
use crate::weights::WeightsFile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreArch {
    pub feature_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub edge_hidden: usize,
    pub num_layers: usize,
}

impl ScoreArch {
    pub fn new(feature_dim: usize) -> Self {
        ScoreArch {
            feature_dim,
            hidden: 32,
            time_dim: 16,
            edge_hidden: 32,
            num_layers: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.edge_hidden == 0
            || self.time_dim == 0
            || !self.time_dim.is_multiple_of(2)
        {
            return Err(Error::InvalidArgument(format!(
                "bad score-net architecture {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpLayer {
    pub w_self: Array2<f64>,
    pub w_nbr: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetParams {
    pub arch: ScoreArch,
    pub sde: SdeConfig,
    pub in_x: Array2<f64>,
    pub in_deg: Array2<f64>,
    pub in_t: Array2<f64>,
    pub in_b: Array2<f64>,
    pub layers: Vec<MpLayer>,
    pub feat_w: Array2<f64>,
    pub feat_b: Array2<f64>,
    pub edge_h: Array2<f64>,
    pub edge_a: Array2<f64>,
    pub edge_t: Array2<f64>,
    pub edge_b: Array2<f64>,
    pub edge_out: Array2<f64>,
    pub edge_out_b: Array2<f64>,
    /// Node-count histogram of the training corpus, used to draw sizes for
    /// unconditional samples.
    pub node_counts: BTreeMap<usize, usize>,
    /// Bounds for clean-graph feature estimates when computing the score:
    /// the training feature range widened by its width on each side.
    pub feature_range: Option<(f64, f64)>,
    pub loss_history: Vec<f64>,
}

/// Whether a tensor is a weight matrix (perturbed by the proxy generator)
/// or a bias row (left alone).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
}

impl ScoreNetParams {
    pub fn zeros(arch: ScoreArch, sde: SdeConfig) -> Result<Self> {
        arch.validate()?;
        let (d, h, e, k) = (
            arch.feature_dim,
            arch.hidden,
            arch.time_dim,
            arch.edge_hidden,
        );
        let z = |r, c| Array2::zeros((r, c));
        Ok(ScoreNetParams {
            arch,
            sde,
            in_x: z(d, h),
            in_deg: z(1, h),
            in_t: z(e, h),
            in_b: z(1, h),
            layers: (0..arch.num_layers)
                .map(|_| MpLayer {
                    w_self: z(h, h),
                    w_nbr: z(h, h),
                    b: z(1, h),
                })
                .collect(),
            feat_w: z(h, d),
            feat_b: z(1, d),
            edge_h: z(h, k),
            edge_a: z(1, k),
            edge_t: z(e, k),
            edge_b: z(1, k),
            edge_out: z(k, 1),
            edge_out_b: z(1, 1),
            node_counts: BTreeMap::new(),
            feature_range: None,
            loss_history: Vec::new(),
        })
    }

    /// Glorot-initialized weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: ScoreArch, sde: SdeConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch, sde)?;
        for (_, t, role) in p.tensors_mut() {
            if role == TensorRole::Weight {
                *t = nn::glorot(rng, t.nrows(), t.ncols());
            }
        }
        Ok(p)
    }

    /// Every tensor with its serialized name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>, TensorRole)> {
        use TensorRole::*;
        let mut v = vec![
            ("input.w_x".to_string(), &self.in_x, Weight),
            ("input.w_deg".to_string(), &self.in_deg, Weight),
            ("input.w_t".to_string(), &self.in_t, Weight),
            ("input.b".to_string(), &self.in_b, Bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            v.push((format!("mp{l}.w_self"), &layer.w_self, Weight));
            v.push((format!("mp{l}.w_nbr"), &layer.w_nbr, Weight));
            v.push((format!("mp{l}.b"), &layer.b, Bias));
        }
        v.extend([
            ("feature_head.w".to_string(), &self.feat_w, Weight),
            ("feature_head.b".to_string(), &self.feat_b, Bias),
            ("edge_head.w_h".to_string(), &self.edge_h, Weight),
            ("edge_head.w_a".to_string(), &self.edge_a, Weight),
            ("edge_head.w_t".to_string(), &self.edge_t, Weight),
            ("edge_head.b".to_string(), &self.edge_b, Bias),
            ("edge_head.w_out".to_string(), &self.edge_out, Weight),
            ("edge_head.b_out".to_string(), &self.edge_out_b, Bias),
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>, TensorRole)> {
        use TensorRole::*;
        let mut v = vec![
            ("input.w_x".to_string(), &mut self.in_x, Weight),
            ("input.w_deg".to_string(), &mut self.in_deg, Weight),
            ("input.w_t".to_string(), &mut self.in_t, Weight),
            ("input.b".to_string(), &mut self.in_b, Bias),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            v.push((format!("mp{l}.w_self"), &mut layer.w_self, Weight));
            v.push((format!("mp{l}.w_nbr"), &mut layer.w_nbr, Weight));
            v.push((format!("mp{l}.b"), &mut layer.b, Bias));
        }
        v.extend([
            ("feature_head.w".to_string(), &mut self.feat_w, Weight),
            ("feature_head.b".to_string(), &mut self.feat_b, Bias),
            ("edge_head.w_h".to_string(), &mut self.edge_h, Weight),
            ("edge_head.w_a".to_string(), &mut self.edge_a, Weight),
            ("edge_head.w_t".to_string(), &mut self.edge_t, Weight),
            ("edge_head.b".to_string(), &mut self.edge_b, Bias),
            ("edge_head.w_out".to_string(), &mut self.edge_out, Weight),
            ("edge_head.b_out".to_string(), &mut self.edge_out_b, Bias),
        ]);
        v
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|(_, t, _)| t.dim()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t, _)| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_weights_file(&self) -> WeightsFile {
        let mut w = WeightsFile::new(
            "score_net",
            serde_json::to_value(self.arch).expect("arch serializes"),
        );
        w.sde = Some(serde_json::to_value(self.sde).expect("sde serializes"));
        w.training = Some(serde_json::json!({
            "node_counts": self.node_counts,
            "feature_range": self.feature_range,
            "loss_history": self.loss_history,
        }));
        for (name, t, _) in self.tensors() {
            w.insert(name, t);
        }
        w
    }

    /// Rebuilds parameters from a weights file. Each call counts as one
    /// deserialization in [`super::score_net_loads`].
    pub fn from_weights_file(w: &WeightsFile) -> Result<Self> {
        super::count_load();
        w.expect_kind("score_net")?;
        let arch: ScoreArch = serde_json::from_value(w.arch.clone())?;
        let sde: SdeConfig = match &w.sde {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Schema("score-net weights lack `sde`".into())),
        };
        sde.validate()?;
        let mut p = Self::zeros(arch, sde)?;
        for (name, t, _) in p.tensors_mut() {
            let m = w.matrix(&name)?;
            if m.dim() != t.dim() {
                return Err(Error::Schema(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    m.dim(),
                    t.dim()
                )));
            }
            *t = m;
        }
        if w.tensors.len() != p.tensors().len() {
            return Err(Error::Schema(
                "unexpected extra tensors in score-net weights".into(),
            ));
        }
        if let Some(t) = &w.training {
            if let Some(c) = t.get("node_counts") {
                p.node_counts = serde_json::from_value(c.clone())?;
            }
            if let Some(r) = t.get("feature_range") {
                p.feature_range = serde_json::from_value(r.clone())?;
            }
            if let Some(h) = t.get("loss_history") {
                p.loss_history = serde_json::from_value(h.clone())?;
            }
        }
        Ok(p)
    }
}

/// `[sin(w_k t), cos(w_k t)]` with frequencies spaced geometrically from 1
/// to 100.
pub fn time_embedding(t: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for k in 0..half {
        let w = if half > 1 {
            100f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[[0, k]] = (w * t).sin();
        out[[0, half + k]] = (w * t).cos();
    }
    out
}

/// Upper-triangle pairs `(i, j)`, `i < j`, in row-major order.
pub fn pairs(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            v.push((i, j));
        }
    }
    v
}

/// Noise predictions: per-node features and per-pair adjacency (upper
/// triangle, [`pairs`] order).
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePrediction {
    pub features: Array2<f64>,
    pub pairs: Array1<f64>,
}

pub(crate) struct Cache {
    x: Array2<f64>,
    a: Array2<f64>,
    deg: Array2<f64>,
    tau: Array2<f64>,
    nbr_scale: f64,
    pre0: Array2<f64>,
    /// Node states after the input layer and after each MP layer.
    h: Vec<Array2<f64>>,
    agg: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pairs: Vec<(usize, usize)>,
    pair_in: Array2<f64>,
    pair_a: Array2<f64>,
    q: Array2<f64>,
    r: Array2<f64>,
}

fn check_input(p: &ScoreNetParams, g: &Graph) -> Result<()> {
    if g.feature_dim() != p.arch.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "graph `{}` has feature dim {}, score net expects {}",
            g.id(),
            g.feature_dim(),
            p.arch.feature_dim
        )));
    }
    Ok(())
}

pub(crate) fn forward(p: &ScoreNetParams, g: &Graph, t: f64) -> Result<(NoisePrediction, Cache)> {
    check_input(p, g)?;
    let n = g.n();
    let x = g.features().clone();
    let a = g.adjacency().clone();
    let nbr_scale = 1.0 / (n.max(2) - 1) as f64;
    let deg = a.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1)) * nbr_scale;
    let tau = time_embedding(t, p.arch.time_dim);

    let mut pre0 = x.dot(&p.in_x) + deg.dot(&p.in_deg);
    nn::add_row(&mut pre0, &(tau.dot(&p.in_t) + &p.in_b));
    let mut h = vec![nn::relu(&pre0)];
    let mut agg = Vec::new();
    let mut pre = Vec::new();
    for layer in &p.layers {
        let prev = h.last().expect("input state");
        let ag = a.dot(prev) * nbr_scale;
        let mut z = prev.dot(&layer.w_self) + ag.dot(&layer.w_nbr);
        nn::add_row(&mut z, &layer.b);
        h.push(nn::relu(&z));
        agg.push(ag);
        pre.push(z);
    }
    let last = h.last().expect("final state");
    let mut eps_x = last.dot(&p.feat_w);
    nn::add_row(&mut eps_x, &p.feat_b);

    let pr = pairs(n);
    let hidden = p.arch.hidden;
    let mut pair_in = Array2::zeros((pr.len(), hidden));
    let mut pair_a = Array2::zeros((pr.len(), 1));
    for (row, &(i, j)) in pr.iter().enumerate() {
        let mut out = pair_in.row_mut(row);
        out.assign(&(&last.row(i) * &last.row(j)));
        pair_a[[row, 0]] = a[[i, j]];
    }
    let mut q = pair_in.dot(&p.edge_h) + pair_a.dot(&p.edge_a);
    nn::add_row(&mut q, &(tau.dot(&p.edge_t) + &p.edge_b));
    let r = nn::relu(&q);
    let eps_pairs = r.dot(&p.edge_out).column(0).to_owned() + p.edge_out_b[[0, 0]];

    Ok((
        NoisePrediction {
            features: eps_x,
            pairs: eps_pairs,
        },
        Cache {
            x,
            a,
            deg,
            tau,
            nbr_scale,
            pre0,
            h,
            agg,
            pre,
            pairs: pr,
            pair_in,
            pair_a,
            q,
            r,
        },
    ))
}

/// Gradients of a scalar loss with respect to every tensor, in
/// [`ScoreNetParams::tensors`] order, given the loss gradient with respect
/// to the two noise predictions.
pub(crate) fn backward(
    p: &ScoreNetParams,
    c: &Cache,
    d_eps_x: &Array2<f64>,
    d_eps_pairs: &Array1<f64>,
) -> Vec<Array2<f64>> {
    let last = c.h.last().expect("final state");
    // adjacency head
    let d_out = d_eps_pairs.view().insert_axis(ndarray::Axis(1)).to_owned();
    let g_edge_out = c.r.t().dot(&d_out);
    let g_edge_out_b = Array2::from_elem((1, 1), d_eps_pairs.sum());
    let mut dq = d_out.dot(&p.edge_out.t());
    nn::relu_backward(&mut dq, &c.q);
    let g_edge_h = c.pair_in.t().dot(&dq);
    let g_edge_a = c.pair_a.t().dot(&dq);
    let dq_sum = nn::col_sums(&dq);
    let g_edge_t = c.tau.t().dot(&dq_sum);
    let g_edge_b = dq_sum;
    let d_pair_in = dq.dot(&p.edge_h.t());
    let mut dh = Array2::zeros(last.dim());
    for (row, &(i, j)) in c.pairs.iter().enumerate() {
        let dp = d_pair_in.row(row);
        let hi = last.row(i).to_owned();
        let hj = last.row(j).to_owned();
        {
            let mut di = dh.row_mut(i);
            di += &(&dp * &hj);
        }
        let mut dj = dh.row_mut(j);
        dj += &(&dp * &hi);
    }
    // feature head
    let g_feat_w = last.t().dot(d_eps_x);
    let g_feat_b = nn::col_sums(d_eps_x);
    dh += &d_eps_x.dot(&p.feat_w.t());
    // message-passing layers, last to first
    let mut layer_grads = Vec::with_capacity(p.layers.len());
    for l in (0..p.layers.len()).rev() {
        let layer = &p.layers[l];
        let mut dz = dh;
        nn::relu_backward(&mut dz, &c.pre[l]);
        let prev = &c.h[l];
        let g_self = prev.t().dot(&dz);
        let g_nbr = c.agg[l].t().dot(&dz);
        let g_b = nn::col_sums(&dz);
        let d_agg = dz.dot(&layer.w_nbr.t());
        dh = dz.dot(&layer.w_self.t()) + c.a.t().dot(&d_agg) * c.nbr_scale;
        layer_grads.push((g_self, g_nbr, g_b));
    }
    layer_grads.reverse();
    // input layer
    let mut d0 = dh;
    nn::relu_backward(&mut d0, &c.pre0);
    let g_in_x = c.x.t().dot(&d0);
    let g_in_deg = c.deg.t().dot(&d0);
    let d0_sum = nn::col_sums(&d0);
    let g_in_t = c.tau.t().dot(&d0_sum);

    let mut out = vec![g_in_x, g_in_deg, g_in_t, d0_sum];
    for (a, b, cc) in layer_grads {
        out.extend([a, b, cc]);
    }
    out.extend([
        g_feat_w,
        g_feat_b,
        g_edge_h,
        g_edge_a,
        g_edge_t,
        g_edge_b,
        g_edge_out,
        g_edge_out_b,
    ]);
    out
}

/// Predicted noise for a noised graph at time `t`.
pub fn predict_noise(p: &ScoreNetParams, g: &Graph, t: f64) -> Result<NoisePrediction> {
    Ok(forward(p, g, t)?.0)
}

/// Symmetric `n x n` matrix from per-pair values.
pub fn pairs_to_matrix(n: usize, values: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    for (&(i, j), &v) in pairs(n).iter().zip(values.iter()) {
        m[[i, j]] = v;
        m[[j, i]] = v;
    }
    m
}

pub fn matrix_to_pairs(m: &Array2<f64>) -> Array1<f64> {
    pairs(m.nrows()).iter().map(|&(i, j)| m[[i, j]]).collect()
}
