use std::collections::HashSet;

use graphood::diffusion::{ScoreTrainConfig, SdeConfig};
use graphood::encoder::EncoderConfig;
use graphood::eval::{
    aupr, auroc, compute_metrics, fpr95, run_experiment_config, synth_dataset, ExperimentConfig,
    Family, GraphModel, SynthConfig, GR_BASELINE, PGR,
};
use graphood::prototype::PrototypeConfig;
use graphood::proxy::PerturbConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive pair count: wins plus half the ties over all ID/OOD pairs.
fn brute_force_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                if si > sj {
                    twice_wins += 2;
                } else if si == sj {
                    twice_wins += 1;
                }
            }
        }
    }
    twice_wins as f64 / 2.0 / pairs as f64
}

fn random_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let len = rng.random_range(2..=500);
    // coarse grids give many ties
    let levels = [3, 10, 1000, 0][rng.random_range(0..4)];
    let mut labels: Vec<u8> = (0..len).map(|_| u8::from(rng.random::<bool>())).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..len)
        .map(|_| {
            let u = rng.random::<f64>();
            if levels == 0 {
                u
            } else {
                (u * levels as f64).floor() / levels as f64
            }
        })
        .collect();
    (scores, labels)
}

#[test]
fn auroc_equals_pair_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let (scores, labels) = random_set(&mut rng);
        let fast = auroc(&scores, &labels).unwrap();
        assert_eq!(fast, brute_force_auroc(&scores, &labels), "trial {trial}");
    }
}

#[test]
fn hand_cases_are_exact() {
    let m = compute_metrics(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
    assert_eq!((m.auroc, m.aupr, m.fpr95), (1.0, 1.0, 0.0));
    assert_eq!(auroc(&[0.6; 4], &[1, 1, 0, 0]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.9, 0.4, 0.6, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
}

proptest! {
    #[test]
    fn metrics_stay_in_range(seed in 0u64..100_000) {
        let (scores, labels) = random_set(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = auroc(&scores, &labels).unwrap();
        let p = aupr(&scores, &labels).unwrap();
        let f = fpr95(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn auroc_ignores_increasing_transforms(seed in 0u64..100_000) {
        let (d, labels) = random_set(&mut ChaCha8Rng::seed_from_u64(seed));
        let a: Vec<f64> = d.iter().map(|d| 1.0 / (1.0 + d)).collect();
        let b: Vec<f64> = d.iter().map(|d| (-d).exp()).collect();
        let (ma, mb) = (compute_metrics(&a, &labels).unwrap(), compute_metrics(&b, &labels).unwrap());
        prop_assert!((ma.auroc - mb.auroc).abs() <= 1e-12);
        prop_assert!((ma.aupr - mb.aupr).abs() <= 1e-12);
        prop_assert!((ma.fpr95 - mb.fpr95).abs() <= 1e-12);
    }
}

#[test]
fn erdos_renyi_density_matches_edge_probability() {
    let family = Family {
        model: GraphModel::ErdosRenyi { p: 0.3 },
        n_min: 8,
        n_max: 8,
        feature_mean: 0.0,
        feature_std: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 500;
    let mean = (0..draws)
        .map(|k| {
            family
                .draw(&mut rng, format!("g{k}"), 2)
                .unwrap()
                .edge_density()
        })
        .sum::<f64>()
        / draws as f64;
    // each density averages 28 Bernoulli(0.3) pairs
    let se = (0.3f64 * 0.7 / 28.0 / draws as f64).sqrt();
    assert!(
        (mean - 0.3).abs() <= 3.0 * se,
        "mean density {mean}, 3 SE = {}",
        3.0 * se
    );
}

#[test]
fn splits_validate_and_use_disjoint_ids() {
    let splits = synth_dataset(&SynthConfig::default()).unwrap();
    let mut seen = HashSet::new();
    for corpus in [&splits.train_id, &splits.test_id, &splits.test_ood] {
        for g in corpus.graphs() {
            assert!(g.validate().is_ok());
            assert!(seen.insert(g.id().to_string()), "duplicate id {}", g.id());
        }
    }
    assert_eq!(seen.len(), 456);
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![3],
        synth: Some(SynthConfig {
            train_count: 16,
            test_id_count: 6,
            test_ood_count: 6,
            ..SynthConfig::default()
        }),
        sde: SdeConfig {
            num_steps: 20,
            ..SdeConfig::default()
        },
        score_training: ScoreTrainConfig {
            steps: 200,
            ..ScoreTrainConfig::default()
        },
        encoder: EncoderConfig {
            epochs: 5,
            ..EncoderConfig::default()
        },
        prototypes: PrototypeConfig {
            batch_size: 8,
            perturb: PerturbConfig {
                proxy_count: 4,
                ..PerturbConfig::default()
            },
            ..PrototypeConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiment_reports_every_metric_and_is_repeatable() {
    let cfg = tiny_config();
    let a = run_experiment_config(&cfg).unwrap();
    let b = run_experiment_config(&cfg).unwrap();
    for method in [PGR, GR_BASELINE] {
        let ma = a.seeds[0].methods[method].metrics;
        let mb = b.seeds[0].methods[method].metrics;
        assert_eq!(ma, mb, "{method}");
        assert!(ma.auroc.is_finite() && ma.aupr.is_finite() && ma.fpr95.is_finite());
    }
    assert_eq!(a.seeds[0].prototype_count, 2);
    assert_eq!(a.seeds[0].pgr_reverse_steps, 0);
    assert_eq!(a.seeds[0].gr_reverse_steps, 12 * 20);
}

#[test]
fn experiment_config_rejects_bad_values() {
    assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
    assert!(ExperimentConfig::from_toml_str("gr_t_perturb = 0.0").is_err());
    assert!(ExperimentConfig::from_toml_str("unknown_key = 1").is_err());
    let cfg =
        ExperimentConfig::from_toml_str("seeds = [1, 2]\n[prototypes]\nbatch_size = 32\n").unwrap();
    assert_eq!(cfg.seeds, vec![1, 2]);
    assert_eq!(cfg.prototypes.batch_size, 32);
}
