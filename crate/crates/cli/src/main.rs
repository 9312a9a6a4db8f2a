//! Command-line front end: synthetic data, training, prototype building,
//! scoring, evaluation and the full experiment pipeline.
//!
//! Every subcommand takes an optional `--config` TOML file whose keys are
//! the flag names in snake_case; flags given on the command line win.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use graphood::detector::{
    detect, judge_score_gr, judge_score_pgr, read_scores, write_scores, Decision, JudgeScore,
};
use graphood::diffusion::{train_score_net, ScoreNetParams, ScoreTrainConfig, SdeConfig};
use graphood::encoder::{train_encoder, EncoderConfig, EncoderParams};
use graphood::eval::{
    compute_metrics, run_experiment_config, synth_dataset, ExperimentConfig, Metrics, SynthConfig,
};
use graphood::fgw::{fgw_distance, similarity_from_distance, FgwConfig, InnerSolver};
use graphood::graph::{load_corpus, write_corpus, Corpus, CorpusRole};
use graphood::prototype::{
    build_prototype_list_with_proxies, load_prototype_list, prototype_proxies, save_prototype_list,
    PrototypeConfig,
};
use graphood::proxy::dump_proxies;
use graphood::weights::WeightsFile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "graphood",
    version,
    about = "Graph out-of-distribution detection with prototype graphs"
)]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train / ID-test / OOD-test corpora.
    Synth(SynthArgs),
    /// Train the score network (and optionally the encoder) on a corpus.
    Pretrain(PretrainArgs),
    /// Generate proxies and the prototype list.
    Prototypes(PrototypesArgs),
    /// Score a corpus against a prototype list.
    Detect(DetectArgs),
    /// Score a corpus with the reconstruction baseline.
    DetectGr(DetectGrArgs),
    /// Compute AUROC, AUPR and FPR95 from a scores file.
    Eval(EvalArgs),
    /// FGW distance between the first graphs of two corpus files.
    Fgw(FgwArgs),
    /// Run the full experiment pipeline from a config file.
    Run(RunArgs),
}

/// Fills every unset field of `$a` from `$b`.
macro_rules! overlay {
    ($a:ident, $b:ident; $($f:ident),+ $(,)?) => {
        $( if $a.$f.is_none() { $a.$f = $b.$f.take(); } )+
    };
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| anyhow!("missing --{flag} (flag or config key)"))
}

/// Tags an error with the phase it aborted.
fn phase<T, E>(name: &str, r: std::result::Result<T, E>) -> Result<T>
where
    E: Into<anyhow::Error>,
{
    r.map_err(|e| e.into().context(format!("{name} phase failed")))
}

// ---------------------------------------------------------------- synth

#[derive(Args)]
struct SynthArgs {
    /// TOML with synthetic-benchmark fields (families, counts, seed) and
    /// optionally `out_dir`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_id_count: Option<usize>,
    #[arg(long)]
    test_ood_count: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

fn synth(a: SynthArgs) -> Result<()> {
    let (mut cfg, file_out) = phase("config", synth_config(a.config.as_deref()))?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.train_count = a.train_count.unwrap_or(cfg.train_count);
    cfg.test_id_count = a.test_id_count.unwrap_or(cfg.test_id_count);
    cfg.test_ood_count = a.test_ood_count.unwrap_or(cfg.test_ood_count);
    cfg.feature_dim = a.feature_dim.unwrap_or(cfg.feature_dim);
    let out = phase("config", required(a.out_dir.or(file_out), "out-dir"))?;
    let splits = phase("data", synth_dataset(&cfg))?;
    phase(
        "output",
        (|| -> Result<()> {
            fs::create_dir_all(&out)?;
            write_corpus(out.join("train_id.jsonl"), &splits.train_id)?;
            write_corpus(out.join("test_id.jsonl"), &splits.test_id)?;
            write_corpus(out.join("test_ood.jsonl"), &splits.test_ood)?;
            Ok(())
        })(),
    )?;
    println!(
        "wrote {} train, {} ID test and {} OOD test graphs to {}",
        splits.train_id.len(),
        splits.test_id.len(),
        splits.test_ood.len(),
        out.display()
    );
    Ok(())
}

fn synth_config(path: Option<&Path>) -> Result<(SynthConfig, Option<PathBuf>)> {
    let Some(path) = path else {
        return Ok((SynthConfig::default(), None));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let out = match table.remove("out_dir") {
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => bail!("out_dir must be a string"),
        None => None,
    };
    let cfg = SynthConfig::deserialize(toml::Value::Table(table))
        .context("synthetic benchmark config")?;
    Ok((cfg, out))
}

// ---------------------------------------------------------------- pretrain

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Training corpus (corpus line format).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Score-network weights file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also train the embedding encoder and write it here.
    #[arg(long)]
    encoder_out: Option<PathBuf>,
    #[arg(skip)]
    score_training: Option<ScoreTrainConfig>,
    #[arg(skip)]
    sde: Option<SdeConfig>,
    #[arg(skip)]
    encoder: Option<EncoderConfig>,
}

fn pretrain(mut a: PretrainArgs) -> Result<()> {
    let mut f: PretrainArgs = phase("config", read_config(a.config.as_deref()))?;
    overlay!(a, f; corpus, out, steps, seed, encoder_out, score_training, sde, encoder);
    let corpus_path = phase("config", required(a.corpus, "corpus"))?;
    let out = phase("config", required(a.out, "out"))?;
    let mut train = a.score_training.unwrap_or_default();
    train.steps = a.steps.unwrap_or(train.steps);
    let seed = a.seed.unwrap_or(0);
    let corpus = phase("data", load_corpus(&corpus_path, CorpusRole::TrainId))?;
    let params = phase(
        "pretrain",
        train_score_net(&corpus, &a.sde.unwrap_or_default(), &train, seed),
    )?;
    phase("output", params.to_weights_file().save(&out))?;
    println!(
        "score network: {} steps, final loss {:.5}, wrote {}",
        train.steps,
        params.loss_history.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    if let Some(path) = a.encoder_out {
        let enc = phase(
            "pretrain",
            train_encoder(&corpus, &a.encoder.unwrap_or_default(), seed),
        )?;
        phase("output", enc.to_weights_file().save(&path))?;
        println!("encoder: wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- prototypes

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PrototypesArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Score-network weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Training corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    fgw_alpha: Option<f64>,
    #[arg(long)]
    perturb_strength: Option<f64>,
    #[arg(long)]
    proxy_count: Option<usize>,
    #[arg(long)]
    t_perturb: Option<f64>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Prototype list file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the proxy graphs in corpus format.
    #[arg(long)]
    dump_proxies: Option<PathBuf>,
    /// Full prototype settings; the flags above override it.
    #[arg(skip)]
    prototypes: Option<PrototypeConfig>,
}

fn load_params(path: &Path) -> graphood::Result<ScoreNetParams> {
    ScoreNetParams::from_weights_file(&WeightsFile::load(path)?)
}

fn load_encoder(path: &Path) -> graphood::Result<EncoderParams> {
    EncoderParams::from_weights_file(&WeightsFile::load(path)?)
}

fn prototypes(mut a: PrototypesArgs) -> Result<()> {
    let mut f: PrototypesArgs = phase("config", read_config(a.config.as_deref()))?;
    overlay!(a, f; weights, corpus, batch_size, fgw_alpha, perturb_strength, proxy_count,
        t_perturb, guidance_scale, out, seed, dump_proxies, prototypes);
    let mut cfg = a.prototypes.unwrap_or_default();
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.fgw.alpha = a.fgw_alpha.unwrap_or(cfg.fgw.alpha);
    cfg.perturb.strength = a.perturb_strength.unwrap_or(cfg.perturb.strength);
    cfg.perturb.proxy_count = a.proxy_count.unwrap_or(cfg.perturb.proxy_count);
    cfg.t_perturb = a.t_perturb.unwrap_or(cfg.t_perturb);
    cfg.guidance_scale = a.guidance_scale.unwrap_or(cfg.guidance_scale);
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.perturb.seed = s;
    }
    phase("config", cfg.validate())?;
    let weights = phase("config", required(a.weights, "weights"))?;
    let corpus_path = phase("config", required(a.corpus, "corpus"))?;
    let out = phase("config", required(a.out, "out"))?;

    let params = phase("load", load_params(&weights))?;
    let corpus = phase("data", load_corpus(&corpus_path, CorpusRole::TrainId))?;
    let proxies = phase("proxies", prototype_proxies(&params, &params.sde, &cfg))?;
    if let Some(path) = &a.dump_proxies {
        phase("output", dump_proxies(path, &proxies))?;
    }
    let pl = phase(
        "prototypes",
        build_prototype_list_with_proxies(&corpus, &proxies, &params, &params.sde, &cfg),
    )?;
    phase("output", save_prototype_list(&out, &pl))?;
    println!(
        "{} prototype(s) from {} proxies, wrote {}",
        pl.len(),
        proxies.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- detect

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DetectArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Prototype list file.
    #[arg(long)]
    prototypes: Option<PathBuf>,
    /// Graphs to score.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Defaults to the value recorded in the prototype list.
    #[arg(long)]
    fgw_alpha: Option<f64>,
    /// Scores file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also report ID/OOD decisions at this threshold.
    #[arg(long)]
    tau: Option<f64>,
}

fn print_decisions(scores: &[JudgeScore], tau: Option<f64>) {
    if let Some(tau) = tau {
        let id = scores
            .iter()
            .filter(|s| detect(s, tau) == Decision::Id)
            .count();
        println!("tau {tau}: {id} ID, {} OOD", scores.len() - id);
    }
}

fn detect_pgr(mut a: DetectArgs) -> Result<()> {
    let mut f: DetectArgs = phase("config", read_config(a.config.as_deref()))?;
    overlay!(a, f; prototypes, corpus, fgw_alpha, out, tau);
    let pl_path = phase("config", required(a.prototypes, "prototypes"))?;
    let corpus_path = phase("config", required(a.corpus, "corpus"))?;
    let out = phase("config", required(a.out, "out"))?;
    let pl = phase("load", load_prototype_list(&pl_path))?;
    let corpus = phase("data", load_corpus(&corpus_path, CorpusRole::TestId))?;
    let fgw = FgwConfig::with_alpha(a.fgw_alpha.unwrap_or(pl.fgw_alpha));
    phase("config", fgw.validate())?;
    let scores = phase(
        "score",
        corpus
            .graphs()
            .iter()
            .map(|g| judge_score_pgr(g, &pl.prototypes, &fgw))
            .collect::<graphood::Result<Vec<_>>>(),
    )?;
    phase("output", write_scores_file(&out, &scores))?;
    println!(
        "scored {} graphs against {} prototypes, wrote {}",
        scores.len(),
        pl.len(),
        out.display()
    );
    print_decisions(&scores, a.tau);
    Ok(())
}

fn write_scores_file(path: &Path, scores: &[JudgeScore]) -> graphood::Result<()> {
    write_scores(fs::File::create(path)?, scores)
}

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DetectGrArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Score-network weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Encoder weights.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    t_perturb: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Graph `k` uses rng stream `k` of this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
}

fn detect_gr(mut a: DetectGrArgs) -> Result<()> {
    let mut f: DetectGrArgs = phase("config", read_config(a.config.as_deref()))?;
    overlay!(a, f; weights, encoder, corpus, t_perturb, out, seed, tau);
    let weights = phase("config", required(a.weights, "weights"))?;
    let encoder = phase("config", required(a.encoder, "encoder"))?;
    let corpus_path = phase("config", required(a.corpus, "corpus"))?;
    let out = phase("config", required(a.out, "out"))?;
    let t_perturb = a.t_perturb.unwrap_or(0.3);
    let seed = a.seed.unwrap_or(0);
    let params = phase("load", load_params(&weights))?;
    let enc = phase("load", load_encoder(&encoder))?;
    let corpus = phase("data", load_corpus(&corpus_path, CorpusRole::TestId))?;
    let scores = phase(
        "score",
        corpus
            .graphs()
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                judge_score_gr(g, &params, &enc, &params.sde, t_perturb, &mut rng)
            })
            .collect::<graphood::Result<Vec<_>>>(),
    )?;
    phase("output", write_scores_file(&out, &scores))?;
    println!(
        "scored {} graphs by reconstruction, wrote {}",
        scores.len(),
        out.display()
    );
    print_decisions(&scores, a.tau);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Scores file (one or more methods).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Labelled corpora supplying the ID (1) / OOD (0) label of each graph id.
    #[arg(long = "labels", num_args = 1..)]
    labels: Option<Vec<PathBuf>>,
    /// JSON report to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalEntry {
    count: usize,
    #[serde(flatten)]
    metrics: Metrics,
    score_gap: f64,
}

fn label_map(paths: &[PathBuf]) -> Result<HashMap<String, u8>> {
    let mut map = HashMap::new();
    for p in paths {
        let corpus: Corpus = load_corpus(p, CorpusRole::TestId)?;
        for g in corpus.graphs() {
            let label = g
                .label()
                .ok_or_else(|| anyhow!("graph `{}` in {} has no label", g.id(), p.display()))?;
            map.insert(g.id().to_string(), label);
        }
    }
    Ok(map)
}

fn eval(mut a: EvalArgs) -> Result<()> {
    let mut f: EvalArgs = phase("config", read_config(a.config.as_deref()))?;
    overlay!(a, f; scores, labels, out);
    let scores_path = phase("config", required(a.scores, "scores"))?;
    let label_paths = phase("config", required(a.labels, "labels"))?;
    let scores = phase(
        "load",
        fs::File::open(&scores_path)
            .map_err(graphood::Error::from)
            .and_then(read_scores),
    )?;
    let labels = phase("load", label_map(&label_paths))?;
    let report = phase(
        "metrics",
        (|| -> Result<BTreeMap<String, EvalEntry>> {
            let mut by_method: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
            for s in &scores {
                let l = *labels
                    .get(&s.graph_id)
                    .ok_or_else(|| anyhow!("no label for graph `{}`", s.graph_id))?;
                let e = by_method.entry(s.method.to_string()).or_default();
                e.0.push(s.score);
                e.1.push(l);
            }
            let mut out = BTreeMap::new();
            for (method, (s, l)) in by_method {
                let id: Vec<f64> = s
                    .iter()
                    .zip(&l)
                    .filter(|(_, &l)| l == 1)
                    .map(|(&s, _)| s)
                    .collect();
                let ood: Vec<f64> = s
                    .iter()
                    .zip(&l)
                    .filter(|(_, &l)| l == 0)
                    .map(|(&s, _)| s)
                    .collect();
                let entry = EvalEntry {
                    count: s.len(),
                    metrics: compute_metrics(&s, &l)?,
                    score_gap: graphood::detector::score_gap(&id, &ood)?,
                };
                out.insert(method, entry);
            }
            Ok(out)
        })(),
    )?;
    for (method, e) in &report {
        println!(
            "{method:<12} n={:<5} AUROC {:.4}  AUPR {:.4}  FPR95 {:.4}  gap {:.4}",
            e.count, e.metrics.auroc, e.metrics.aupr, e.metrics.fpr95, e.score_gap
        );
    }
    if let Some(out) = a.out {
        phase(
            "output",
            fs::write(&out, serde_json::to_string_pretty(&report)?),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- fgw

#[derive(Args)]
struct FgwArgs {
    /// Corpus file whose first graph is the first operand.
    g1: PathBuf,
    /// Corpus file whose first graph is the second operand.
    g2: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Use the entropic inner solver with this regularization.
    #[arg(long)]
    entropic: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

fn fgw(a: FgwArgs) -> Result<()> {
    let first = |p: &Path| -> Result<graphood::graph::Graph> {
        let c = load_corpus(p, CorpusRole::TestId)?;
        if c.len() > 1 {
            log::warn!("{} holds {} graphs; using the first", p.display(), c.len());
        }
        c.into_graphs()
            .into_iter()
            .next()
            .ok_or_else(|| anyhow!("{} is empty", p.display()))
    };
    let g1 = phase("data", first(&a.g1))?;
    let g2 = phase("data", first(&a.g2))?;
    let mut cfg = FgwConfig::with_alpha(a.alpha);
    if let Some(epsilon) = a.entropic {
        cfg.solver = InnerSolver::Entropic { epsilon };
    }
    cfg.max_outer_iters = a.max_iters.unwrap_or(cfg.max_outer_iters);
    cfg.tol = a.tol.unwrap_or(cfg.tol);
    phase("config", cfg.validate())?;
    let c = phase("fgw", fgw_distance(&g1, &g2, &cfg))?;
    let out = serde_json::json!({
        "g1": g1.id(),
        "g2": g2.id(),
        "alpha": a.alpha,
        "distance": c.value,
        "similarity": similarity_from_distance(c.value),
        "iterations": c.iterations,
        "converged": c.converged,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

// ---------------------------------------------------------------- run

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Also run the ablations.
    #[arg(long)]
    ablations: bool,
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.in_phase("config"))?,
        None => ExperimentConfig::default(),
    };
    if a.out_dir.is_some() {
        cfg.out_dir = a.out_dir;
    }
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    cfg.ablations |= a.ablations;
    let report = run_experiment_config(&cfg)?;
    print!("{}", report.summary_table());
    if let Some(dir) = &cfg.out_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Prototypes(a) => prototypes(a),
        Command::Detect(a) => detect_pgr(a),
        Command::DetectGr(a) => detect_gr(a),
        Command::Eval(a) => eval(a),
        Command::Fgw(a) => fgw(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
