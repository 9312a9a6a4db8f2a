use std::sync::OnceLock;

use graphood::detector::{judge_score_gr, judge_score_pgr, Method};
use graphood::diffusion::{
    reverse_steps_executed, score_net_loads, train_score_net, ScoreNetParams, ScoreTrainConfig,
    SdeConfig,
};
use graphood::encoder::{train_encoder, EncoderConfig, EncoderParams};
use graphood::eval::{compute_metrics, synth_dataset, SynthConfig, SynthSplits};
use graphood::fgw::{fgw_distance, FgwConfig};
use graphood::graph::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    splits: SynthSplits,
    sde: SdeConfig,
    params: ScoreNetParams,
    encoder: EncoderParams,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let splits = synth_dataset(&SynthConfig {
            train_count: 64,
            test_id_count: 50,
            test_ood_count: 50,
            ..SynthConfig::default()
        })
        .unwrap();
        let sde = SdeConfig::default();
        let train = ScoreTrainConfig {
            steps: 2000,
            ..ScoreTrainConfig::default()
        };
        let params = train_score_net(&splits.train_id, &sde, &train, 0).unwrap();
        let encoder = train_encoder(&splits.train_id, &EncoderConfig::default(), 0).unwrap();
        Fixture {
            splits,
            sde,
            params,
            encoder,
        }
    })
}

fn mean_gr(f: &Fixture, graphs: &[Graph]) -> f64 {
    graphs
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            judge_score_gr(g, &f.params, &f.encoder, &f.sde, 0.3, &mut rng)
                .unwrap()
                .score
        })
        .sum::<f64>()
        / graphs.len() as f64
}

#[test]
fn gr_scores_separate_id_from_ood() {
    let f = fixture();
    let id = mean_gr(f, f.splits.test_id.graphs());
    let ood = mean_gr(f, f.splits.test_ood.graphs());
    assert!(
        id > ood,
        "mean ID score {id} not above mean OOD score {ood}"
    );
}

#[test]
fn gr_score_tends_to_one_as_perturbation_vanishes() {
    let f = fixture();
    for g in &f.splits.test_id.graphs()[..5] {
        let j = judge_score_gr(
            g,
            &f.params,
            &f.encoder,
            &f.sde,
            1e-6,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!((j.score - 1.0).abs() < 1e-4, "{}: {}", g.id(), j.score);
    }
}

#[test]
fn gr_score_is_reproducible_and_counts_steps() {
    let f = fixture();
    let g = &f.splits.test_ood.graphs()[0];
    let run = || {
        judge_score_gr(
            g,
            &f.params,
            &f.encoder,
            &f.sde,
            0.3,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap()
    };
    let before = reverse_steps_executed();
    let a = run();
    assert_eq!(reverse_steps_executed() - before, f.sde.num_steps as u64);
    assert_eq!(a.reverse_steps_used, f.sde.num_steps as u64);
    assert_eq!(a.method, Method::GrBaseline);
    assert_eq!(a.score.to_bits(), run().score.to_bits());
}

#[test]
fn pgr_scoring_runs_no_diffusion() {
    let f = fixture();
    let fgw = FgwConfig::default();
    let prototypes = &f.splits.train_id.graphs()[..4];
    let (steps, loads) = (reverse_steps_executed(), score_net_loads());
    for g in f.splits.test_graphs().iter().take(20) {
        let j = judge_score_pgr(g, prototypes, &fgw).unwrap();
        assert_eq!(j.reverse_steps_used, 0);
        assert!(j.score > 0.0 && j.score <= 1.0);
    }
    assert_eq!(reverse_steps_executed(), steps);
    assert_eq!(score_net_loads(), loads);
}

#[test]
fn metrics_ignore_the_choice_of_similarity_transform() {
    let f = fixture();
    let fgw = FgwConfig::default();
    let prototypes = &f.splits.train_id.graphs()[..3];
    let tests = f.splits.test_graphs();
    let min_distance: Vec<f64> = tests
        .iter()
        .map(|g| {
            prototypes
                .iter()
                .map(|p| fgw_distance(p, g, &fgw).unwrap().value)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let labels: Vec<u8> = tests.iter().map(|g| g.label().unwrap()).collect();
    let rational: Vec<f64> = min_distance.iter().map(|d| 1.0 / (1.0 + d)).collect();
    let exponential: Vec<f64> = min_distance.iter().map(|d| (-d).exp()).collect();
    let a = compute_metrics(&rational, &labels).unwrap();
    let b = compute_metrics(&exponential, &labels).unwrap();
    assert!((a.auroc - b.auroc).abs() <= 1e-12);
    assert!((a.aupr - b.aupr).abs() <= 1e-12);
    assert!((a.fpr95 - b.fpr95).abs() <= 1e-12);
}
