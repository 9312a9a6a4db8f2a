//! Denoising score matching for [`ScoreNetParams`].
//!
//! For a clean graph `G_0`, a time `t` and noise `eps`, the noised state is
//! `m(t) G_0 + s(t) eps`; the network is trained to predict `eps` by mean
//! squared error over all feature entries and upper-triangle adjacency
//! entries. A network that always predicts zero scores exactly `E[eps^2] = 1`
//! per entry.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::score_net::{backward, forward, matrix_to_pairs};
use super::{diffuse_with_noise, ScoreArch, ScoreNetParams, SdeConfig};
use crate::error::{Error, Result};
use crate::graph::{Corpus, Graph};
use crate::nn::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training times are drawn uniformly from `[t_min, 1]`.
    pub t_min: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub edge_hidden: usize,
    pub num_layers: usize,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        ScoreTrainConfig {
            steps: 5000,
            batch_size: 16,
            learning_rate: 2e-3,
            t_min: 1e-3,
            hidden: 32,
            time_dim: 16,
            edge_hidden: 32,
            num_layers: 2,
        }
    }
}

/// Squared error of one noised graph, its entry count, and (optionally) the
/// parameter gradients of the summed squared error.
#[allow(clippy::type_complexity)]
fn graph_error<R: Rng + ?Sized>(
    p: &ScoreNetParams,
    g0: &Graph,
    t: f64,
    sde: &SdeConfig,
    rng: &mut R,
    with_grad: bool,
) -> Result<(f64, f64, usize, Option<Vec<Array2<f64>>>)> {
    let noised = diffuse_with_noise(g0, t, sde, rng)?;
    let (pred, cache) = forward(p, &noised.graph, t)?;
    let rx = &pred.features - &noised.eps_x;
    let ra = &pred.pairs - &matrix_to_pairs(&noised.eps_a);
    let err = rx.mapv(|v| v * v).sum() + ra.mapv(|v| v * v).sum();
    let zero =
        noised.eps_x.mapv(|v| v * v).sum() + matrix_to_pairs(&noised.eps_a).mapv(|v| v * v).sum();
    let count = rx.len() + ra.len();
    let grads = with_grad.then(|| backward(p, &cache, &(2.0 * &rx), &(2.0 * &ra)));
    Ok((err, zero, count, grads))
}

/// Held-out denoising loss and the zero-predictor loss on the same draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsmEval {
    pub loss: f64,
    pub zero_predictor: f64,
}

/// Mean squared noise-prediction error per entry over `draws` noised copies
/// of every graph, with times uniform on `[t_min, 1]`.
pub fn dsm_loss(
    params: &ScoreNetParams,
    graphs: &[Graph],
    sde: &SdeConfig,
    t_min: f64,
    draws: usize,
    seed: u64,
) -> Result<DsmEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut err, mut zero, mut count) = (0.0, 0.0, 0usize);
    for g in graphs {
        for _ in 0..draws {
            let t = rng.random_range(t_min..=1.0);
            let (e, z, c, _) = graph_error(params, g, t, sde, &mut rng, false)?;
            err += e;
            zero += z;
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::Empty("no entries to evaluate".into()));
    }
    Ok(DsmEval {
        loss: err / count as f64,
        zero_predictor: zero / count as f64,
    })
}

/// Training feature range widened by its own width on each side.
fn graphs_feature_range(graphs: &[Graph]) -> (f64, f64) {
    let (lo, hi) = graphs
        .iter()
        .flat_map(|g| g.features().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let pad = (hi - lo).max(1.0);
    (lo - pad, hi + pad)
}

/// Fits a score network by denoising score matching with Adam. Minibatches
/// are drawn with replacement from the seeded rng; results are
/// deterministic per seed.
pub fn train_score_net(
    corpus: &Corpus,
    sde: &SdeConfig,
    cfg: &ScoreTrainConfig,
    seed: u64,
) -> Result<ScoreNetParams> {
    if corpus.is_empty() {
        return Err(Error::Empty(
            "cannot train a score network on an empty corpus".into(),
        ));
    }
    sde.validate()?;
    if cfg.batch_size == 0 || !(cfg.t_min > 0.0 && cfg.t_min < 1.0) {
        return Err(Error::InvalidArgument(
            "score training needs batch_size >= 1 and t_min in (0,1)".into(),
        ));
    }
    let arch = ScoreArch {
        feature_dim: corpus.feature_dim(),
        hidden: cfg.hidden,
        time_dim: cfg.time_dim,
        edge_hidden: cfg.edge_hidden,
        num_layers: cfg.num_layers,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ScoreNetParams::init(arch, *sde, &mut rng)?;
    let mut counts = BTreeMap::new();
    for g in corpus.graphs() {
        *counts.entry(g.n()).or_insert(0) += 1;
    }
    p.node_counts = counts;
    let (lo, hi) = graphs_feature_range(corpus.graphs());
    p.feature_range = (lo <= hi).then_some((lo, hi));
    let mut opt = Adam::new(cfg.learning_rate, &p.shapes());
    let graphs = corpus.graphs();
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut acc: Vec<Array2<f64>> = p.shapes().into_iter().map(Array2::zeros).collect();
        let (mut err, mut count) = (0.0, 0usize);
        for _ in 0..cfg.batch_size {
            let g = &graphs[rng.random_range(0..graphs.len())];
            let t = rng.random_range(cfg.t_min..=1.0);
            let (e, _, c, grads) = graph_error(&p, g, t, sde, &mut rng, true)?;
            err += e;
            count += c;
            for (a, g) in acc.iter_mut().zip(grads.expect("requested")) {
                *a += &g;
            }
        }
        let scale = 1.0 / count.max(1) as f64;
        for a in &mut acc {
            *a *= scale;
        }
        history.push(err * scale);
        let params: Vec<&mut Array2<f64>> =
            p.tensors_mut().into_iter().map(|(_, t, _)| t).collect();
        opt.update(params, &acc);
    }
    if !p.is_finite() {
        return Err(Error::InvalidArgument(
            "score training diverged; lower the learning rate".into(),
        ));
    }
    p.loss_history = history;
    Ok(p)
}
