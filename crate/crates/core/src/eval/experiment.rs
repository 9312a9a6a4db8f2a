//! End-to-end experiments: data, pretraining, proxies, prototypes, scoring
//! and metrics, repeated over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, Metrics};
use super::synth::{synth_dataset, SynthConfig};
use crate::detector::{
    judge_score_embedding, judge_score_gr, judge_score_pgr, score_gap, write_scores, JudgeScore,
};
use crate::diffusion::{
    reverse_steps_executed, score_net_loads, train_score_net, ScoreNetParams, ScoreTrainConfig,
    SdeConfig,
};
use crate::encoder::{encode, train_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::fgw::similarity;
use crate::graph::{load_corpus, write_corpus, Corpus, CorpusRole, Graph};
use crate::prototype::{
    build_prototype_list_with_proxies, prototype_proxies, save_prototype_list, PrototypeConfig,
    PrototypeList,
};
use crate::proxy::dump_proxies;

/// Corpus files used instead of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test_id: PathBuf,
    pub test_ood: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One full pipeline run per seed. Each seed replaces the seed of every
    /// stage (synthetic data, score network, encoder, perturbation,
    /// prototypes, reconstruction noise).
    pub seeds: Vec<u64>,
    /// Synthetic benchmark; the reference benchmark when neither `synth` nor
    /// `data` is given.
    pub synth: Option<SynthConfig>,
    pub data: Option<DataPaths>,
    pub sde: SdeConfig,
    pub score_training: ScoreTrainConfig,
    pub encoder: EncoderConfig,
    pub prototypes: PrototypeConfig,
    /// Diffusion time the reconstruction baseline perturbs to.
    pub gr_t_perturb: f64,
    /// Also score the ablations: prototypes without the ID term, without the
    /// OOD term, and the full prototypes compared by embedding cosine
    /// instead of FGW similarity.
    pub ablations: bool,
    pub histogram_bins: usize,
    pub render_svg: bool,
    /// Where artifacts go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            synth: None,
            data: None,
            sde: SdeConfig::default(),
            score_training: ScoreTrainConfig::default(),
            encoder: EncoderConfig::default(),
            prototypes: PrototypeConfig::default(),
            gr_t_perturb: 0.3,
            ablations: false,
            histogram_bins: 20,
            render_svg: true,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.synth.is_some() && self.data.is_some() {
            return Err(Error::Config(
                "give either `synth` or `data`, not both".into(),
            ));
        }
        if !(self.gr_t_perturb > 0.0 && self.gr_t_perturb <= 1.0) {
            return Err(Error::Config(format!(
                "gr_t_perturb {} outside (0,1]",
                self.gr_t_perturb
            )));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be at least 1".into()));
        }
        self.sde.validate()?;
        self.prototypes.validate()
    }
}

pub const PGR: &str = "pgr";
pub const GR_BASELINE: &str = "gr_baseline";
pub const PGR_NO_ID: &str = "pgr_no_id";
pub const PGR_NO_OOD: &str = "pgr_no_ood";
pub const PGR_COSINE: &str = "pgr_cosine";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub metrics: Metrics,
    /// Mean ID score minus mean OOD score.
    pub score_gap: f64,
    pub scoring_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub methods: BTreeMap<String, MethodReport>,
    /// Wall-clock per phase in execution order.
    pub phases: Vec<(String, f64)>,
    pub prototype_count: usize,
    /// Mean FGW similarity over all (prototype, test ID graph) pairs.
    pub prototype_similarity_id: f64,
    /// Mean FGW similarity over all (prototype, test OOD graph) pairs.
    pub prototype_similarity_ood: f64,
    /// Reverse-SDE steps and score-network loads observed while the
    /// prototype path scored the test set.
    pub pgr_reverse_steps: u64,
    pub pgr_score_net_loads: u64,
    pub gr_reverse_steps: u64,
    /// Guide-loss (initial, final) per prototype, ID term then OOD term.
    pub guide_losses: Vec<[Option<f64>; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub auroc: MeanStd,
    pub aupr: MeanStd,
    pub fpr95: MeanStd,
    pub score_gap: MeanStd,
    pub scoring_ms: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    pub summary: BTreeMap<String, MethodSummary>,
}

impl ExperimentReport {
    /// Plain-text table of mean ± sample standard deviation per method.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{} seed(s); values are mean ± sample std over seeds\n{:<12} {:>17} {:>17} {:>17} {:>17}\n",
            self.seeds.len(),
            "method",
            "AUROC",
            "AUPR",
            "FPR95",
            "score gap"
        );
        let cell = |m: MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
        for (name, s) in &self.summary {
            let _ = writeln!(
                out,
                "{name:<12} {:>17} {:>17} {:>17} {:>17}",
                cell(s.auroc),
                cell(s.aupr),
                cell(s.fpr95),
                cell(s.score_gap)
            );
        }
        out
    }
}

/// Loads a TOML experiment config and runs it.
pub fn run_experiment(config_path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let cfg = ExperimentConfig::load(config_path).map_err(|e| e.in_phase("config"))?;
    run_experiment_config(&cfg)
}

pub fn run_experiment_config(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate().map_err(|e| e.in_phase("config"))?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).in_phase("output"))?;
    }
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("experiment seed {seed}");
        seeds.push(run_seed(cfg, seed)?);
    }
    let summary = seeds[0]
        .methods
        .keys()
        .map(|name| {
            let col = |f: &dyn Fn(&MethodReport) -> f64| {
                MeanStd::of(
                    &seeds
                        .iter()
                        .map(|s| f(&s.methods[name]))
                        .collect::<Vec<_>>(),
                )
            };
            let s = MethodSummary {
                auroc: col(&|m| m.metrics.auroc),
                aupr: col(&|m| m.metrics.aupr),
                fpr95: col(&|m| m.metrics.fpr95),
                score_gap: col(&|m| m.score_gap),
                scoring_ms: col(&|m| m.scoring_ms),
            };
            (name.clone(), s)
        })
        .collect();
    let report = ExperimentReport {
        config: cfg.clone(),
        seeds,
        summary,
    };
    if let Some(dir) = &cfg.out_dir {
        let write = || -> Result<()> {
            fs::write(
                dir.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            fs::write(dir.join("summary.txt"), report.summary_table())?;
            Ok(())
        };
        write().map_err(|e| e.in_phase("output"))?;
    }
    Ok(report)
}

struct Phases(Vec<(String, f64)>);

impl Phases {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_phase(name))?;
        self.0
            .push((name.to_string(), start.elapsed().as_secs_f64() * 1e3));
        Ok(out)
    }
}

/// Rng keyed by (seed, tag) so stages seeded with the same run seed draw
/// independent streams.
fn tagged_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const GR_TAG: u64 = 1;

struct Data {
    train: Corpus,
    test_id: Corpus,
    test_ood: Corpus,
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<Data> {
    if let Some(paths) = &cfg.data {
        return Ok(Data {
            train: load_corpus(&paths.train, CorpusRole::TrainId)?,
            test_id: load_corpus(&paths.test_id, CorpusRole::TestId)?,
            test_ood: load_corpus(&paths.test_ood, CorpusRole::TestOod)?,
        });
    }
    let synth = SynthConfig {
        seed,
        ..cfg.synth.unwrap_or_default()
    };
    let s = synth_dataset(&synth)?;
    Ok(Data {
        train: s.train_id,
        test_id: s.test_id,
        test_ood: s.test_ood,
    })
}

/// Test graphs (ID first) with labels: 1 for the ID split, 0 for OOD.
fn labelled_tests(d: &Data) -> (Vec<Graph>, Vec<u8>) {
    let graphs: Vec<Graph> = d
        .test_id
        .graphs()
        .iter()
        .chain(d.test_ood.graphs())
        .cloned()
        .collect();
    let labels = std::iter::repeat_n(1, d.test_id.len())
        .chain(std::iter::repeat_n(0, d.test_ood.len()))
        .collect();
    (graphs, labels)
}

#[allow(clippy::type_complexity)]
fn method_report(scores: &[f64], labels: &[u8], scoring_ms: f64) -> Result<MethodReport> {
    let (id, ood): (Vec<(f64, u8)>, Vec<(f64, u8)>) = scores
        .iter()
        .copied()
        .zip(labels.iter().copied())
        .partition(|&(_, l)| l == 1);
    let first = |v: Vec<(f64, u8)>| v.into_iter().map(|(s, _)| s).collect::<Vec<_>>();
    Ok(MethodReport {
        metrics: compute_metrics(scores, labels)?,
        score_gap: score_gap(&first(id), &first(ood))?,
        scoring_ms,
    })
}

fn pgr_scores(
    tests: &[Graph],
    pl: &PrototypeList,
    cfg: &ExperimentConfig,
) -> Result<Vec<JudgeScore>> {
    tests
        .iter()
        .map(|g| judge_score_pgr(g, &pl.prototypes, &cfg.prototypes.fgw))
        .collect()
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport> {
    let mut phases = Phases(Vec::new());
    let data = phases.run("data", || load_data(cfg, seed))?;
    let (tests, labels) = labelled_tests(&data);
    let (params, encoder) = phases.run("pretrain", || {
        let params = train_score_net(&data.train, &cfg.sde, &cfg.score_training, seed)?;
        let encoder = train_encoder(&data.train, &cfg.encoder, seed)?;
        Ok((params, encoder))
    })?;
    let proto_cfg = PrototypeConfig {
        seed,
        perturb: crate::proxy::PerturbConfig {
            seed,
            ..cfg.prototypes.perturb
        },
        ..cfg.prototypes.clone()
    };
    let proxies = phases.run("proxies", || {
        prototype_proxies(&params, &cfg.sde, &proto_cfg)
    })?;
    let pl = phases.run("prototypes", || {
        build_prototype_list_with_proxies(&data.train, &proxies, &params, &cfg.sde, &proto_cfg)
    })?;

    let steps_before = reverse_steps_executed();
    let loads_before = score_net_loads();
    let start = Instant::now();
    let pgr = phases.run("score_pgr", || pgr_scores(&tests, &pl, cfg))?;
    let pgr_ms = start.elapsed().as_secs_f64() * 1e3;
    let pgr_reverse_steps = reverse_steps_executed() - steps_before;
    let pgr_score_net_loads = score_net_loads() - loads_before;

    let steps_before = reverse_steps_executed();
    let start = Instant::now();
    let gr = phases.run("score_gr", || {
        tests
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let mut rng = tagged_rng(seed, GR_TAG);
                rng.set_stream(k as u64);
                judge_score_gr(g, &params, &encoder, &cfg.sde, cfg.gr_t_perturb, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let gr_ms = start.elapsed().as_secs_f64() * 1e3;
    let gr_reverse_steps = reverse_steps_executed() - steps_before;

    let values = |v: &[JudgeScore]| v.iter().map(|j| j.score).collect::<Vec<_>>();
    let mut methods = phases.run("metrics", || {
        let mut m = BTreeMap::new();
        m.insert(
            PGR.to_string(),
            method_report(&values(&pgr), &labels, pgr_ms)?,
        );
        m.insert(
            GR_BASELINE.to_string(),
            method_report(&values(&gr), &labels, gr_ms)?,
        );
        Ok(m)
    })?;

    let (sim_id, sim_ood) = phases.run("prototype_similarity", || {
        let mean_sim = |graphs: &[Graph]| -> Result<f64> {
            let mut total = 0.0;
            for p in &pl.prototypes {
                for g in graphs {
                    total += similarity(p, g, &cfg.prototypes.fgw)?;
                }
            }
            Ok(total / (pl.len() * graphs.len()) as f64)
        };
        Ok((
            mean_sim(data.test_id.graphs())?,
            mean_sim(data.test_ood.graphs())?,
        ))
    })?;

    if cfg.ablations {
        phases.run("ablations", || {
            run_ablations(
                cfg,
                &data,
                &params,
                &encoder,
                &proxies,
                &pl,
                &proto_cfg,
                &tests,
                &labels,
                &mut methods,
            )
        })?;
    }

    if let Some(dir) = &cfg.out_dir {
        phases.run("output", || {
            write_artifacts(
                cfg,
                &dir.join(format!("seed-{seed}")),
                &data,
                &params,
                &encoder,
                &proxies,
                &pl,
                &pgr,
                &gr,
                &labels,
            )
        })?;
    }

    let guide_losses = pl
        .histories
        .iter()
        .map(|h| {
            let (first, last) = (h.first(), h.last());
            [
                first.and_then(|s| s.loss_id),
                last.and_then(|s| s.loss_id),
                first.and_then(|s| s.loss_ood),
                last.and_then(|s| s.loss_ood),
            ]
        })
        .collect();
    Ok(SeedReport {
        seed,
        methods,
        phases: phases.0,
        prototype_count: pl.len(),
        prototype_similarity_id: sim_id,
        prototype_similarity_ood: sim_ood,
        pgr_reverse_steps,
        pgr_score_net_loads,
        gr_reverse_steps,
        guide_losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_ablations(
    cfg: &ExperimentConfig,
    data: &Data,
    params: &ScoreNetParams,
    encoder: &EncoderParams,
    proxies: &[Graph],
    pl: &PrototypeList,
    proto_cfg: &PrototypeConfig,
    tests: &[Graph],
    labels: &[u8],
    methods: &mut BTreeMap<String, MethodReport>,
) -> Result<()> {
    for (name, use_id, use_ood) in [(PGR_NO_ID, false, true), (PGR_NO_OOD, true, false)] {
        let c = PrototypeConfig {
            use_id,
            use_ood,
            ..proto_cfg.clone()
        };
        let no_proxies: &[Graph] = &[];
        let ablated = build_prototype_list_with_proxies(
            &data.train,
            if use_ood { proxies } else { no_proxies },
            params,
            &cfg.sde,
            &c,
        )?;
        let start = Instant::now();
        let scores: Vec<f64> = pgr_scores(tests, &ablated, cfg)?
            .iter()
            .map(|j| j.score)
            .collect();
        let ms = start.elapsed().as_secs_f64() * 1e3;
        methods.insert(name.to_string(), method_report(&scores, labels, ms)?);
    }
    let start = Instant::now();
    let embeddings = pl
        .prototypes
        .iter()
        .map(|p| encode(p, encoder))
        .collect::<Result<Vec<_>>>()?;
    let scores = tests
        .iter()
        .map(|g| judge_score_embedding(g, &embeddings, encoder))
        .collect::<Result<Vec<_>>>()?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    methods.insert(PGR_COSINE.to_string(), method_report(&scores, labels, ms)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_artifacts(
    cfg: &ExperimentConfig,
    dir: &Path,
    data: &Data,
    params: &ScoreNetParams,
    encoder: &EncoderParams,
    proxies: &[Graph],
    pl: &PrototypeList,
    pgr: &[JudgeScore],
    gr: &[JudgeScore],
    labels: &[u8],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    if cfg.data.is_none() {
        write_corpus(dir.join("train_id.jsonl"), &data.train)?;
        write_corpus(dir.join("test_id.jsonl"), &data.test_id)?;
        write_corpus(dir.join("test_ood.jsonl"), &data.test_ood)?;
    }
    params.to_weights_file().save(dir.join("score_net.json"))?;
    encoder.to_weights_file().save(dir.join("encoder.json"))?;
    if !proxies.is_empty() {
        dump_proxies(dir.join("proxies.jsonl"), proxies)?;
    }
    save_prototype_list(dir.join("prototypes.pl"), pl)?;
    let all: Vec<JudgeScore> = pgr.iter().chain(gr).cloned().collect();
    write_scores(fs::File::create(dir.join("scores.csv"))?, &all)?;
    let mut hists = Vec::new();
    for (name, scores) in [(PGR, pgr), (GR_BASELINE, gr)] {
        let values: Vec<f64> = scores.iter().map(|j| j.score).collect();
        hists.push((name, histogram(&values, labels, cfg.histogram_bins)?));
    }
    fs::write(dir.join("histogram.csv"), histogram_csv(&hists))?;
    if cfg.render_svg {
        fs::write(dir.join("histogram.svg"), histogram_svg(&hists))?;
    }
    Ok(())
}

/// One histogram bin with its ID and OOD counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

/// Equal-width bins over `[min, max]` of the scores; the top edge is
/// inclusive. A constant score vector gets a single unit-width bin.
pub fn histogram(scores: &[f64], labels: &[u8], bins: usize) -> Result<Vec<Bin>> {
    if scores.len() != labels.len() || scores.is_empty() || bins == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs equal-length nonempty scores and labels and at least one bin".into(),
        ));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let (bins, width) = if hi > lo {
        (bins, (hi - lo) / bins as f64)
    } else {
        (1, 1.0)
    };
    let mut out: Vec<Bin> = (0..bins)
        .map(|k| Bin {
            lo: lo + k as f64 * width,
            hi: if k + 1 == bins {
                hi.max(lo + width)
            } else {
                lo + (k + 1) as f64 * width
            },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    for (&s, &l) in scores.iter().zip(labels) {
        let k = (((s - lo) / width) as usize).min(bins - 1);
        if l == 1 {
            out[k].id_count += 1;
        } else {
            out[k].ood_count += 1;
        }
    }
    Ok(out)
}

pub fn histogram_csv(hists: &[(&str, Vec<Bin>)]) -> String {
    let mut out = String::from("method,bin_lo,bin_hi,id_count,ood_count\n");
    for (name, bins) in hists {
        for b in bins {
            let _ = writeln!(
                out,
                "{name},{},{},{},{}",
                b.lo, b.hi, b.id_count, b.ood_count
            );
        }
    }
    out
}

/// Side-by-side bar charts, ID bars in blue and OOD bars in orange.
pub fn histogram_svg(hists: &[(&str, Vec<Bin>)]) -> String {
    let (pw, ph, margin) = (360.0, 200.0, 30.0);
    let width = margin + hists.len() as f64 * (pw + margin);
    let height = ph + 2.0 * margin;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    for (p, (name, bins)) in hists.iter().enumerate() {
        let x0 = margin + p as f64 * (pw + margin);
        let peak = bins
            .iter()
            .map(|b| b.id_count.max(b.ood_count))
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let bw = pw / bins.len().max(1) as f64;
        let _ = writeln!(
            out,
            "<text x=\"{x0}\" y=\"{}\">{name}</text>",
            margin - 10.0
        );
        let _ = writeln!(
            out,
            "<line x1=\"{x0}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            margin + ph,
            x0 + pw,
            margin + ph
        );
        for (k, b) in bins.iter().enumerate() {
            for (count, color, shift) in
                [(b.id_count, "#1f77b4", 0.0), (b.ood_count, "#ff7f0e", 0.5)]
            {
                let h = count as f64 / peak * ph;
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.8\"/>",
                    x0 + k as f64 * bw + shift * bw,
                    margin + ph - h,
                    bw / 2.0,
                    h
                );
            }
        }
        if let (Some(first), Some(last)) = (bins.first(), bins.last()) {
            let _ = writeln!(
                out,
                "<text x=\"{x0}\" y=\"{}\">{:.3}</text>",
                margin + ph + 15.0,
                first.lo
            );
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>",
                x0 + pw,
                margin + ph + 15.0,
                last.hi
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
