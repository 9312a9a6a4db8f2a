//! Proxy outliers from a weight-perturbed score network.
//!
//! Every weight matrix `W` of the score network is replaced by
//! `W (I + strength * P)` with `P` a fresh standard-normal square matrix;
//! biases are left alone. Samples from the perturbed model follow a shifted
//! denoising trajectory and stand in for out-of-distribution graphs, which
//! are never observed during training.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, ScoreNetParams, SdeConfig, TensorRole};
use crate::error::{Error, Result};
use crate::graph::{quantize_adjacency, serialize_corpus, Graph, DEFAULT_QUANTIZE_THRESHOLD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub strength: f64,
    pub proxy_count: usize,
    /// Seed for the perturbation matrices.
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            strength: 0.5,
            proxy_count: 64,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "perturbation strength {} must be finite and nonnegative",
                self.strength
            )));
        }
        if self.proxy_count == 0 {
            return Err(Error::InvalidArgument(
                "proxy_count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Applies `W <- W (I + strength * P)` to every weight matrix, drawing each
/// `P` (square, side = column count of `W`) from `draw`. A zero strength
/// returns an exact copy without calling `draw`.
pub fn perturb_params_with(
    params: &ScoreNetParams,
    strength: f64,
    draw: &mut dyn FnMut(usize) -> Array2<f64>,
) -> Result<ScoreNetParams> {
    let mut out = params.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    for (name, w, role) in out.tensors_mut() {
        if role != TensorRole::Weight {
            continue;
        }
        let p = draw(w.ncols());
        if p.dim() != (w.ncols(), w.ncols()) {
            return Err(Error::DimensionMismatch(format!(
                "perturbation for `{name}` is {:?}, expected square of side {}",
                p.dim(),
                w.ncols()
            )));
        }
        let delta = w.dot(&p) * strength;
        *w += &delta;
    }
    Ok(out)
}

/// Perturbs with standard-normal matrices from `cfg.seed`.
pub fn perturb_params(params: &ScoreNetParams, cfg: &PerturbConfig) -> Result<ScoreNetParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    perturb_params_with(params, cfg.strength, &mut |k| {
        Array2::from_shape_simple_fn((k, k), || rng.sample(StandardNormal))
    })
}

/// Perturbs once, then draws `cfg.proxy_count` unconditional samples from
/// the perturbed model and quantizes them.
pub fn generate_ood_proxies<R: Rng + ?Sized>(
    params: &ScoreNetParams,
    cfg: &PerturbConfig,
    sde: &SdeConfig,
    rng: &mut R,
) -> Result<Vec<Graph>> {
    let perturbed = perturb_params(params, cfg)?;
    (0..cfg.proxy_count)
        .map(|k| {
            let g = sample(&perturbed, sde, None, params.arch.feature_dim, rng)?;
            Ok(quantize_adjacency(&g, DEFAULT_QUANTIZE_THRESHOLD)?.with_id(format!("proxy{k}")))
        })
        .collect()
}

/// Writes proxies in corpus line format.
pub fn dump_proxies(path: impl AsRef<Path>, proxies: &[Graph]) -> Result<()> {
    std::fs::write(path, serialize_corpus(proxies)?)?;
    Ok(())
}
