//! Guided generation of prototype graphs.
//!
//! A prototype starts from a training graph diffused to `t_perturb` and is
//! denoised by the reverse SDE with its score shifted by the gradient of
//!
//! ```text
//! L_guide(G) = mean_{B in batch} FGW(B, G) - mean_{P in proxies} FGW(P, G)
//! ```
//!
//! pulling it toward its training batch and pushing it away from the proxy
//! outliers. Gradients hold each FGW coupling fixed. One prototype is made
//! per consecutive training batch; together they form the prototype list
//! used by the detector.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, reverse_integrate, Guidance, ScoreNetParams, SdeConfig};
use crate::error::{Error, Result};
use crate::fgw::{fgw_distance, fgw_gradient_second, Coupling, FgwConfig};
use crate::graph::{parse_corpus, quantize_adjacency, serialize_corpus, Corpus, CorpusRole, Graph};
use crate::proxy::{generate_ood_proxies, PerturbConfig};

pub const PL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    pub fgw: FgwConfig,
    pub batch_size: usize,
    pub t_perturb: f64,
    /// Multiplier on the guidance gradient; 1 applies it unweighted.
    pub guidance_scale: f64,
    /// Re-solve FGW couplings every this many reverse steps; in between the
    /// gradient is re-evaluated at the current state with the cached
    /// couplings.
    pub refresh_every: usize,
    /// Include the pull toward the training batch.
    pub use_id: bool,
    /// Include the push away from the proxies.
    pub use_ood: bool,
    /// Shuffle the corpus before batching; `None` keeps file order.
    pub shuffle_seed: Option<u64>,
    pub perturb: PerturbConfig,
    pub quantize_threshold: f64,
    pub seed: u64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            fgw: FgwConfig::default(),
            batch_size: 128,
            t_perturb: 0.3,
            guidance_scale: 1.0,
            refresh_every: 1,
            use_id: true,
            use_ood: true,
            shuffle_seed: None,
            perturb: PerturbConfig::default(),
            quantize_threshold: crate::graph::DEFAULT_QUANTIZE_THRESHOLD,
            seed: 0,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        self.fgw.validate()?;
        self.perturb.validate()?;
        if self.batch_size == 0 || self.refresh_every == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and refresh_every must be at least 1".into(),
            ));
        }
        if !(self.t_perturb > 0.0 && self.t_perturb <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "t_perturb {} outside (0,1]",
                self.t_perturb
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::InvalidArgument(
                "guidance_scale must be finite".into(),
            ));
        }
        Ok(())
    }
}

fn mean_distance(graphs: &[Graph], gbar: &Graph, fgw: &FgwConfig, what: &str) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::Empty(format!("{what} is empty")));
    }
    let mut total = 0.0;
    for g in graphs {
        total += fgw_distance(g, gbar, fgw)?.value;
    }
    Ok(total / graphs.len() as f64)
}

/// Mean FGW distance from the batch graphs to `gbar`.
pub fn loss_id(batch: &[Graph], gbar: &Graph, fgw: &FgwConfig) -> Result<f64> {
    mean_distance(batch, gbar, fgw, "ID batch")
}

/// Negated mean FGW distance from the proxies to `gbar`.
pub fn loss_ood(proxies: &[Graph], gbar: &Graph, fgw: &FgwConfig) -> Result<f64> {
    Ok(-mean_distance(proxies, gbar, fgw, "proxy list")?)
}

/// Guide loss value and its gradient with respect to `gbar`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideLoss {
    pub total: f64,
    pub loss_id: Option<f64>,
    pub loss_ood: Option<f64>,
    pub grad_adjacency: Array2<f64>,
    pub grad_features: Array2<f64>,
}

/// Solved couplings from each target graph to the current state, kept so
/// the gradient can be re-evaluated between refreshes.
struct Couplings {
    id: Vec<Coupling>,
    ood: Vec<Coupling>,
}

fn solve_all(targets: &[Graph], gbar: &Graph, fgw: &FgwConfig) -> Result<Vec<Coupling>> {
    targets.iter().map(|g| fgw_distance(g, gbar, fgw)).collect()
}

/// `sign / |targets| * sum_k dFGW(target_k, gbar)/dgbar` added into the
/// accumulators.
fn add_gradient(
    targets: &[Graph],
    couplings: &[Coupling],
    gbar: &Graph,
    alpha: f64,
    sign: f64,
    da: &mut Array2<f64>,
    dx: &mut Array2<f64>,
) -> Result<()> {
    let w = sign / targets.len() as f64;
    for (g, c) in targets.iter().zip(couplings) {
        let grad = fgw_gradient_second(g, gbar, c, alpha)?;
        da.scaled_add(w, &grad.adjacency);
        dx.scaled_add(w, &grad.features);
    }
    Ok(())
}

fn gradient_at(
    batch: Option<&[Graph]>,
    proxies: Option<&[Graph]>,
    couplings: &Couplings,
    gbar: &Graph,
    alpha: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut da = Array2::zeros((gbar.n(), gbar.n()));
    let mut dx = Array2::zeros(gbar.features().dim());
    if let Some(b) = batch {
        add_gradient(b, &couplings.id, gbar, alpha, 1.0, &mut da, &mut dx)?;
    }
    if let Some(p) = proxies {
        add_gradient(p, &couplings.ood, gbar, alpha, -1.0, &mut da, &mut dx)?;
    }
    Ok((da, dx))
}

fn mean_value(c: &[Coupling]) -> f64 {
    c.iter().map(|c| c.value).sum::<f64>() / c.len() as f64
}

/// Guide loss with either term optional; at least one must be present.
fn guide_terms(
    batch: Option<&[Graph]>,
    proxies: Option<&[Graph]>,
    gbar: &Graph,
    fgw: &FgwConfig,
) -> Result<(GuideLoss, Couplings)> {
    if batch.is_none() && proxies.is_none() {
        return Err(Error::InvalidArgument(
            "guide loss needs at least one term".into(),
        ));
    }
    for (list, what) in [(batch, "ID batch"), (proxies, "proxy list")] {
        if list.is_some_and(<[Graph]>::is_empty) {
            return Err(Error::Empty(format!("{what} is empty")));
        }
    }
    let couplings = Couplings {
        id: batch.map_or(Ok(Vec::new()), |b| solve_all(b, gbar, fgw))?,
        ood: proxies.map_or(Ok(Vec::new()), |p| solve_all(p, gbar, fgw))?,
    };
    let lid = batch.map(|_| mean_value(&couplings.id));
    let lood = proxies.map(|_| -mean_value(&couplings.ood));
    let (grad_adjacency, grad_features) = gradient_at(batch, proxies, &couplings, gbar, fgw.alpha)?;
    Ok((
        GuideLoss {
            total: lid.unwrap_or(0.0) + lood.unwrap_or(0.0),
            loss_id: lid,
            loss_ood: lood,
            grad_adjacency,
            grad_features,
        },
        couplings,
    ))
}

/// `loss_id + loss_ood` and its gradient with respect to `gbar`.
pub fn guide_loss(
    batch: &[Graph],
    proxies: &[Graph],
    gbar: &Graph,
    fgw: &FgwConfig,
) -> Result<GuideLoss> {
    Ok(guide_terms(Some(batch), Some(proxies), gbar, fgw)?.0)
}

/// Guide-loss terms recorded at a coupling refresh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideStep {
    pub t: f64,
    pub loss_id: Option<f64>,
    pub loss_ood: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    /// Quantized prototype.
    pub graph: Graph,
    /// Final relaxed state before quantization.
    pub relaxed: Graph,
    /// Index of the batch graph used as the starting point.
    pub start_index: usize,
    /// Losses at every refresh, then once more at the final relaxed state.
    pub history: Vec<GuideStep>,
}

/// Generates one prototype. `proxies` may be empty only when the OOD term
/// is disabled.
pub fn generate_prototype<R: Rng + ?Sized>(
    batch: &[Graph],
    proxies: &[Graph],
    params: &ScoreNetParams,
    sde: &SdeConfig,
    cfg: &PrototypeConfig,
    rng: &mut R,
) -> Result<Prototype> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("ID batch is empty".into()));
    }
    let id_terms = cfg.use_id.then_some(batch);
    let ood_terms = cfg.use_ood.then_some(proxies);
    let start_index = rng.random_range(0..batch.len());
    let start = &batch[start_index];
    let noised = forward_diffuse(start, cfg.t_perturb, sde, rng)?;

    let mut history = Vec::new();
    let mut cached: Option<Couplings> = None;
    let mut guide = |g: &Graph, t: f64, k: usize| -> Result<Option<Guidance>> {
        if id_terms.is_none() && ood_terms.is_none() {
            return Ok(None);
        }
        let reuse = cached
            .as_ref()
            .filter(|_| !k.is_multiple_of(cfg.refresh_every));
        let (da, dx) = if let Some(c) = reuse {
            gradient_at(id_terms, ood_terms, c, g, cfg.fgw.alpha)?
        } else {
            let (loss, couplings) = guide_terms(id_terms, ood_terms, g, &cfg.fgw)?;
            history.push(GuideStep {
                t,
                loss_id: loss.loss_id,
                loss_ood: loss.loss_ood,
            });
            cached = Some(couplings);
            (loss.grad_adjacency, loss.grad_features)
        };
        if cfg.guidance_scale == 0.0 {
            return Ok(None);
        }
        Ok(Some(
            Guidance {
                adjacency: da,
                features: dx,
            }
            .scaled(cfg.guidance_scale),
        ))
    };
    let relaxed = reverse_integrate(
        &noised,
        cfg.t_perturb,
        params,
        sde,
        rng,
        Some(&mut guide),
        None,
    )?
    .with_id(format!("prototype-{}", start.id()));
    if id_terms.is_some() || ood_terms.is_some() {
        let (loss, _) = guide_terms(id_terms, ood_terms, &relaxed, &cfg.fgw)?;
        history.push(GuideStep {
            t: 0.0,
            loss_id: loss.loss_id,
            loss_ood: loss.loss_ood,
        });
    }
    let graph = quantize_adjacency(&relaxed, cfg.quantize_threshold)?.with_label(None);
    Ok(Prototype {
        graph,
        relaxed,
        start_index,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlSeeds {
    pub seed: u64,
    pub perturb_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

/// The prototype list with its generation metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeList {
    pub prototypes: Vec<Graph>,
    pub fgw_alpha: f64,
    /// Effective batch size after capping at the corpus size.
    pub batch_size: usize,
    pub seeds: PlSeeds,
    /// Guide-loss history per prototype; not persisted in PL files.
    pub histories: Vec<Vec<GuideStep>>,
}

impl PrototypeList {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }
}

/// `ceil(corpus_len / batch_size)` with the batch size capped at the corpus
/// length.
pub fn batch_count(corpus_len: usize, batch_size: usize) -> usize {
    let b = batch_size.min(corpus_len).max(1);
    corpus_len.div_ceil(b)
}

fn seeded_stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// The proxy set used by [`build_prototype_list`]: empty when the OOD term
/// is disabled, otherwise sampled on rng stream 1 of the config seed. Stream
/// 0 of the perturbation seed draws the perturbation matrices.
pub fn prototype_proxies(
    params: &ScoreNetParams,
    sde: &SdeConfig,
    cfg: &PrototypeConfig,
) -> Result<Vec<Graph>> {
    if !cfg.use_ood {
        return Ok(Vec::new());
    }
    generate_ood_proxies(params, &cfg.perturb, sde, &mut seeded_stream(cfg.seed, 1))
}

/// Builds the prototype list: one proxy set, then one prototype per
/// consecutive batch. Batch `b` uses rng stream `b + 2` of the config seed.
pub fn build_prototype_list(
    corpus: &Corpus,
    params: &ScoreNetParams,
    sde: &SdeConfig,
    cfg: &PrototypeConfig,
) -> Result<PrototypeList> {
    cfg.validate()?;
    check_training_corpus(corpus)?;
    let proxies = prototype_proxies(params, sde, cfg)?;
    build_prototype_list_with_proxies(corpus, &proxies, params, sde, cfg)
}

fn check_training_corpus(corpus: &Corpus) -> Result<()> {
    if corpus.role() != CorpusRole::TrainId {
        return Err(Error::InvalidArgument(format!(
            "prototypes are built from a train_id corpus, got {:?}",
            corpus.role()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus is empty".into()));
    }
    Ok(())
}

/// [`build_prototype_list`] with a precomputed proxy set.
pub fn build_prototype_list_with_proxies(
    corpus: &Corpus,
    proxies: &[Graph],
    params: &ScoreNetParams,
    sde: &SdeConfig,
    cfg: &PrototypeConfig,
) -> Result<PrototypeList> {
    cfg.validate()?;
    check_training_corpus(corpus)?;
    let mut graphs = corpus.graphs().to_vec();
    if let Some(s) = cfg.shuffle_seed {
        graphs.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    let batch_size = cfg.batch_size.min(graphs.len());
    let mut prototypes = Vec::new();
    let mut histories = Vec::new();
    for (b, batch) in graphs.chunks(batch_size).enumerate() {
        let mut rng = seeded_stream(cfg.seed, b as u64 + 2);
        let p = generate_prototype(batch, proxies, params, sde, cfg, &mut rng)?;
        prototypes.push(p.graph.with_id(format!("prototype-{b}")));
        histories.push(p.history);
    }
    Ok(PrototypeList {
        prototypes,
        fgw_alpha: cfg.fgw.alpha,
        batch_size,
        seeds: PlSeeds {
            seed: cfg.seed,
            perturb_seed: cfg.perturb.seed,
            shuffle_seed: cfg.shuffle_seed,
        },
        histories,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlHeader {
    format_version: u32,
    #[serde(rename = "I")]
    count: usize,
    fgw_alpha: f64,
    batch_size: usize,
    seeds: PlSeeds,
}

/// Header line followed by the prototypes in corpus line format.
pub fn serialize_prototype_list(pl: &PrototypeList) -> Result<String> {
    let header = PlHeader {
        format_version: PL_FORMAT_VERSION,
        count: pl.len(),
        fgw_alpha: pl.fgw_alpha,
        batch_size: pl.batch_size,
        seeds: pl.seeds,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    out.push_str(&serialize_corpus(&pl.prototypes)?);
    Ok(out)
}

pub fn parse_prototype_list<R: Read>(reader: R) -> Result<PrototypeList> {
    let mut lines = BufReader::new(reader).lines();
    let first = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing prototype-list header".into(),
    })??;
    let header: PlHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format_version != PL_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported prototype-list version {}",
            header.format_version
        )));
    }
    let rest: Vec<String> = lines.collect::<std::io::Result<_>>()?;
    let body = rest.join("\n");
    let corpus = parse_corpus(body.as_bytes(), CorpusRole::TrainId).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line: line + 1,
            message,
        },
        other => other,
    })?;
    if corpus.len() != header.count {
        return Err(Error::Schema(format!(
            "header declares {} prototypes, file has {}",
            header.count,
            corpus.len()
        )));
    }
    Ok(PrototypeList {
        prototypes: corpus.into_graphs(),
        fgw_alpha: header.fgw_alpha,
        batch_size: header.batch_size,
        seeds: header.seeds,
        histories: Vec::new(),
    })
}

pub fn save_prototype_list(path: impl AsRef<Path>, pl: &PrototypeList) -> Result<()> {
    fs::write(path, serialize_prototype_list(pl)?)?;
    Ok(())
}

pub fn load_prototype_list(path: impl AsRef<Path>) -> Result<PrototypeList> {
    parse_prototype_list(fs::File::open(path)?)
}
