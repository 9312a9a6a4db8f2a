//! Score-based graph diffusion with a variance-preserving SDE.
//!
//! Forward: `dG = -1/2 beta(t) G dt + sqrt(beta(t)) dw` with `beta` linear in
//! `t` on `[0, 1]`, applied independently to every feature entry and every
//! upper-triangle adjacency entry (the lower triangle mirrors it, the
//! diagonal stays zero). The marginal at time `t` is Gaussian with mean
//! `m(t) G_0` and variance `s(t)^2 = 1 - m(t)^2`.
//!
//! Reverse: Euler-Maruyama on `dG = [f(G, t) - g(t)^2 S(G, t)] dt + g(t) dw`
//! with negative `dt`, where `S` is the learned score, optionally shifted by
//! the gradient of a guidance loss.

mod score_net;
mod train;

pub use score_net::{
    matrix_to_pairs, pairs, pairs_to_matrix, predict_noise, time_embedding, MpLayer,
    NoisePrediction, ScoreArch, ScoreNetParams, TensorRole,
};
pub use train::{dsm_loss, train_score_net, DsmEval, ScoreTrainConfig};

use std::cell::Cell;

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{symmetrize_upper, AdjacencyForm, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Euler-Maruyama steps used to integrate any reverse interval.
    pub num_steps: usize,
}

impl Default for SdeConfig {
    fn default() -> Self {
        SdeConfig {
            beta_min: 0.1,
            beta_max: 20.0,
            num_steps: 100,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min < beta_max, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument(
                "num_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `log m(t) = -1/2 int_0^t beta`.
    fn log_mean_coeff(&self, t: f64) -> f64 {
        -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
    }

    /// Mean scale `m(t)` of the marginal.
    pub fn mean_coeff(&self, t: f64) -> f64 {
        self.log_mean_coeff(t).exp()
    }

    /// Marginal standard deviation `s(t) = sqrt(1 - m(t)^2)`.
    pub fn std(&self, t: f64) -> f64 {
        (-(2.0 * self.log_mean_coeff(t)).exp_m1()).sqrt()
    }
}

thread_local! {
    static REVERSE_STEPS: Cell<u64> = const { Cell::new(0) };
    static SCORE_NET_LOADS: Cell<u64> = const { Cell::new(0) };
}

/// Reverse-SDE steps executed on the current thread since it started.
pub fn reverse_steps_executed() -> u64 {
    REVERSE_STEPS.with(Cell::get)
}

/// Score-network deserializations performed on the current thread.
pub fn score_net_loads() -> u64 {
    SCORE_NET_LOADS.with(Cell::get)
}

fn count_load() {
    SCORE_NET_LOADS.with(|c| c.set(c.get() + 1));
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0,1]")));
    }
    Ok(())
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Symmetric noise with zero diagonal, one draw per upper-triangle entry.
fn symmetric_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    for (i, j) in pairs(n) {
        let z: f64 = rng.sample(StandardNormal);
        m[[i, j]] = z;
        m[[j, i]] = z;
    }
    m
}

/// A noised graph together with the standard-normal noise that made it.
pub(crate) struct Noised {
    pub graph: Graph,
    pub eps_x: Array2<f64>,
    pub eps_a: Array2<f64>,
}

pub(crate) fn diffuse_with_noise<R: Rng + ?Sized>(
    g0: &Graph,
    t: f64,
    sde: &SdeConfig,
    rng: &mut R,
) -> Result<Noised> {
    check_time(t)?;
    let (m, s) = (sde.mean_coeff(t), sde.std(t));
    let eps_x = normal_matrix(rng, g0.n(), g0.feature_dim());
    let eps_a = symmetric_noise(rng, g0.n());
    let x = m * g0.features() + s * &eps_x;
    let mut a = m * g0.adjacency() + s * &eps_a;
    symmetrize_upper(&mut a);
    let graph = Graph::new(g0.id(), a, x, AdjacencyForm::Relaxed)?.with_label(g0.label());
    Ok(Noised {
        graph,
        eps_x,
        eps_a,
    })
}

/// Samples `G_t` from the forward marginal given `G_0`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    g0: &Graph,
    t: f64,
    sde: &SdeConfig,
    rng: &mut R,
) -> Result<Graph> {
    if t == 0.0 {
        return Ok(g0.clone());
    }
    Ok(diffuse_with_noise(g0, t, sde, rng)?.graph)
}

/// Learned score at `(G_t, t)`: feature part and symmetric adjacency part
/// (zero diagonal). Requires `t > 0`.
///
/// The predicted noise implies a clean-graph estimate
/// `(G_t - s(t) eps) / m(t)`. That estimate is clipped to `[0, 1]` for
/// adjacency entries and to the training feature range for features, and
/// the noise is recomputed from the clipped estimate. A trained network is
/// barely affected; a weight-perturbed one would otherwise drive the
/// reverse trajectory to overflow.
pub fn score(g_t: &Graph, t: f64, params: &ScoreNetParams) -> Result<(Array2<f64>, Array2<f64>)> {
    check_time(t)?;
    if t == 0.0 {
        return Err(Error::InvalidArgument("score is undefined at t = 0".into()));
    }
    let (m, s) = (params.sde.mean_coeff(t), params.sde.std(t));
    let eps = predict_noise(params, g_t, t)?;
    let clipped = |x: f64, e: f64, lo: f64, hi: f64| {
        let x0 = (x - s * e) / m;
        if x0 < lo || x0 > hi {
            (x - m * x0.clamp(lo, hi)) / s
        } else {
            e
        }
    };
    let (lo, hi) = params
        .feature_range
        .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let mut ex = eps.features;
    Zip::from(&mut ex)
        .and(g_t.features())
        .for_each(|e, &x| *e = clipped(x, *e, lo, hi));
    let a = g_t.adjacency();
    let ea: Array1<f64> = pairs(g_t.n())
        .iter()
        .zip(eps.pairs.iter())
        .map(|(&(i, j), &e)| clipped(a[[i, j]], e, 0.0, 1.0))
        .collect();
    let score_x = ex / -s;
    let score_a = pairs_to_matrix(g_t.n(), &ea) / -s;
    Ok((score_x, score_a))
}

/// Gradient of a guidance loss with respect to the graph state, as returned
/// by the FGW gradient: full symmetric adjacency matrix and features.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
}

impl Guidance {
    pub fn zeros(n: usize, d: usize) -> Self {
        Guidance {
            adjacency: Array2::zeros((n, n)),
            features: Array2::zeros((n, d)),
        }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.adjacency *= c;
        self.features *= c;
        self
    }
}

/// Deterministic part of one reverse Euler-Maruyama step:
/// `[f(G, t) - beta(t) (S - grad L)] dt`.
///
/// The adjacency state is the set of upper-triangle entries, each mirrored
/// into the lower triangle, so the guidance gradient for entry `(i, j)` is
/// `dL/dA[i,j] + dL/dA[j,i]`.
pub fn reverse_drift(
    g_t: &Graph,
    t: f64,
    dt: f64,
    score_x: &Array2<f64>,
    score_a: &Array2<f64>,
    guidance: Option<&Guidance>,
    sde: &SdeConfig,
) -> (Array2<f64>, Array2<f64>) {
    let beta = sde.beta(t);
    let mut sx = score_x.clone();
    let mut sa = score_a.clone();
    if let Some(gd) = guidance {
        sx -= &gd.features;
        sa -= &(&gd.adjacency + &gd.adjacency.t());
    }
    let dx = (-0.5 * beta * g_t.features() - beta * &sx) * dt;
    let mut da = (-0.5 * beta * g_t.adjacency() - beta * &sa) * dt;
    symmetrize_upper(&mut da);
    (dx, da)
}

fn check_guidance(g: &Graph, gd: &Guidance) -> Result<()> {
    if gd.adjacency.dim() != (g.n(), g.n()) || gd.features.dim() != g.features().dim() {
        return Err(Error::DimensionMismatch(format!(
            "guidance shapes {:?}/{:?} for graph with {} nodes, {} features",
            gd.adjacency.dim(),
            gd.features.dim(),
            g.n(),
            g.feature_dim()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step_inner<R: Rng + ?Sized>(
    g_t: &Graph,
    t: f64,
    dt: f64,
    params: &ScoreNetParams,
    sde: &SdeConfig,
    rng: &mut R,
    guidance: Option<&Guidance>,
    add_noise: bool,
) -> Result<Graph> {
    if !(t > 0.0 && t <= 1.0 && dt < 0.0 && -dt <= t * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "reverse step needs t in (0,1] and -t <= dt < 0, got t={t}, dt={dt}"
        )));
    }
    if let Some(gd) = guidance {
        check_guidance(g_t, gd)?;
    }
    let (sx, sa) = score(g_t, t, params)?;
    let (dx, da) = reverse_drift(g_t, t, dt, &sx, &sa, guidance, sde);
    let mut x = g_t.features() + &dx;
    let mut a = g_t.adjacency() + &da;
    let zx = normal_matrix(rng, g_t.n(), g_t.feature_dim());
    let za = symmetric_noise(rng, g_t.n());
    if add_noise {
        let diffusion = (sde.beta(t) * -dt).sqrt();
        x.scaled_add(diffusion, &zx);
        a.scaled_add(diffusion, &za);
    }
    symmetrize_upper(&mut a);
    REVERSE_STEPS.with(|c| c.set(c.get() + 1));
    Ok(Graph::new(g_t.id(), a, x, AdjacencyForm::Relaxed)?.with_label(g_t.label()))
}

/// One reverse Euler-Maruyama step from `t` to `t + dt` (`dt < 0`).
pub fn reverse_step<R: Rng + ?Sized>(
    g_t: &Graph,
    t: f64,
    dt: f64,
    params: &ScoreNetParams,
    sde: &SdeConfig,
    rng: &mut R,
    guidance: Option<&Guidance>,
) -> Result<Graph> {
    step_inner(g_t, t, dt, params, sde, rng, guidance, true)
}

/// States visited by a reverse integration, starting state first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(f64, Graph)>,
}

/// Supplies the guidance gradient at each step, given the current state,
/// its time and the step index. Returning `None` leaves the step unguided.
pub type GuidanceFn<'a> = dyn FnMut(&Graph, f64, usize) -> Result<Option<Guidance>> + 'a;

/// Integrates the reverse SDE from `t_start` down to 0 in `sde.num_steps`
/// equal steps. The final step adds no noise, so the result is the mean of
/// the last transition.
pub fn reverse_integrate<R: Rng + ?Sized>(
    start: &Graph,
    t_start: f64,
    params: &ScoreNetParams,
    sde: &SdeConfig,
    rng: &mut R,
    mut guidance: Option<&mut GuidanceFn<'_>>,
    mut trajectory: Option<&mut Trajectory>,
) -> Result<Graph> {
    sde.validate()?;
    if !(t_start > 0.0 && t_start <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "reverse integration must start in (0,1], got {t_start}"
        )));
    }
    let steps = sde.num_steps;
    let dt = -t_start / steps as f64;
    let mut g = start.clone();
    if let Some(tr) = trajectory.as_deref_mut() {
        tr.states.push((t_start, g.clone()));
    }
    for k in 0..steps {
        let t = t_start * (1.0 - k as f64 / steps as f64);
        let gd = match guidance.as_deref_mut() {
            Some(f) => f(&g, t, k)?,
            None => None,
        };
        g = step_inner(&g, t, dt, params, sde, rng, gd.as_ref(), k + 1 < steps)?;
        if let Some(tr) = trajectory.as_deref_mut() {
            let t_next = t_start * (1.0 - (k + 1) as f64 / steps as f64);
            tr.states.push((t_next, g.clone()));
        }
    }
    Ok(g)
}

/// Draws a node count from the training-size histogram.
pub fn draw_node_count<R: Rng + ?Sized>(params: &ScoreNetParams, rng: &mut R) -> Result<usize> {
    let total: usize = params.node_counts.values().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "score net has no node-count histogram; pass an explicit size".into(),
        ));
    }
    let mut u = rng.random_range(0..total);
    for (&n, &c) in &params.node_counts {
        if u < c {
            return Ok(n);
        }
        u -= c;
    }
    unreachable!("u < total")
}

/// Unconditional sample: standard-normal start at `t = 1`, integrated to 0.
/// Without `n_nodes` the size is drawn from the training-size histogram.
pub fn sample<R: Rng + ?Sized>(
    params: &ScoreNetParams,
    sde: &SdeConfig,
    n_nodes: Option<usize>,
    d: usize,
    rng: &mut R,
) -> Result<Graph> {
    if d != params.arch.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "requested feature dim {d}, score net has {}",
            params.arch.feature_dim
        )));
    }
    let n = match n_nodes {
        Some(0) => return Err(Error::InvalidSize("sample needs at least one node".into())),
        Some(n) => n,
        None => draw_node_count(params, rng)?,
    };
    let x = normal_matrix(rng, n, d);
    let a = symmetric_noise(rng, n);
    let start = Graph::new("sample", a, x, AdjacencyForm::Relaxed)?;
    reverse_integrate(&start, 1.0, params, sde, rng, None, None)
}

/// Perturb-then-denoise: diffuse to `t_perturb`, integrate back to 0, clamp
/// adjacency entries into `[0, 1]`.
pub fn reconstruct<R: Rng + ?Sized>(
    g: &Graph,
    params: &ScoreNetParams,
    sde: &SdeConfig,
    t_perturb: f64,
    rng: &mut R,
) -> Result<Graph> {
    if !(t_perturb > 0.0 && t_perturb <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "t_perturb must lie in (0,1], got {t_perturb}"
        )));
    }
    let noised = forward_diffuse(g, t_perturb, sde, rng)?;
    let out = reverse_integrate(&noised, t_perturb, params, sde, rng, None, None)?;
    Ok(out.clamp_unit())
}
