//! Synthetic ID/OOD corpora from random graph families with Gaussian node
//! features.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Corpus, CorpusRole, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GraphModel {
    /// Each pair joined independently with probability `p`.
    ErdosRenyi { p: f64 },
    /// Cycle where each node links to its `degree / 2` nearest neighbours on
    /// either side. `degree` must be even and below the node count.
    RingLattice { degree: usize },
}

/// A graph family: structure model, node-count range and feature cluster
/// `N(feature_mean * 1, feature_std^2 I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Family {
    pub model: GraphModel,
    pub n_min: usize,
    pub n_max: usize,
    pub feature_mean: f64,
    pub feature_std: f64,
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad(format!(
                "node range [{}, {}] is empty",
                self.n_min, self.n_max
            ));
        }
        if !(self.feature_std >= 0.0
            && self.feature_std.is_finite()
            && self.feature_mean.is_finite())
        {
            return bad("feature mean/std must be finite, std nonnegative".into());
        }
        match self.model {
            GraphModel::ErdosRenyi { p } if !(0.0..=1.0).contains(&p) => {
                bad(format!("edge probability {p} outside [0,1]"))
            }
            GraphModel::RingLattice { degree } if degree % 2 != 0 || degree >= self.n_min => {
                bad(format!(
                    "ring degree {degree} must be even and below n_min {}",
                    self.n_min
                ))
            }
            _ => Ok(()),
        }
    }

    /// Draws one graph.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, id: String, d: usize) -> Result<Graph> {
        let n = rng.random_range(self.n_min..=self.n_max);
        let mut edges = Vec::new();
        match self.model {
            GraphModel::ErdosRenyi { p } => {
                for i in 0..n {
                    for j in (i + 1)..n {
                        if rng.random::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
            }
            GraphModel::RingLattice { degree } => {
                for i in 0..n {
                    for off in 1..=degree / 2 {
                        let j = (i + off) % n;
                        edges.push((i.min(j), i.max(j)));
                    }
                }
                edges.sort_unstable();
                edges.dedup();
            }
        }
        let x = Array2::from_shape_simple_fn((n, d), || {
            self.feature_mean + self.feature_std * rng.sample::<f64, _>(StandardNormal)
        });
        Graph::from_edges(id, n, &edges, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub id_family: Family,
    pub ood_family: Family,
    pub train_count: usize,
    pub test_id_count: usize,
    pub test_ood_count: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The reference benchmark: ER(n in [6,10], p = 0.25) with features
    /// around +1 against degree-2 ring lattices with features around -1.
    fn default() -> Self {
        SynthConfig {
            id_family: Family {
                model: GraphModel::ErdosRenyi { p: 0.25 },
                n_min: 6,
                n_max: 10,
                feature_mean: 1.0,
                feature_std: 0.5,
            },
            ood_family: Family {
                model: GraphModel::RingLattice { degree: 2 },
                n_min: 6,
                n_max: 10,
                feature_mean: -1.0,
                feature_std: 0.5,
            },
            train_count: 256,
            test_id_count: 100,
            test_ood_count: 100,
            feature_dim: 4,
            seed: 0,
        }
    }
}

/// Train, ID-test and OOD-test corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub train_id: Corpus,
    pub test_id: Corpus,
    pub test_ood: Corpus,
}

impl SynthSplits {
    /// ID and OOD test graphs concatenated, ID first.
    pub fn test_graphs(&self) -> Vec<Graph> {
        self.test_id
            .graphs()
            .iter()
            .chain(self.test_ood.graphs())
            .cloned()
            .collect()
    }
}

/// Generates the three splits deterministically from `cfg.seed`. ID graphs
/// carry label 1, OOD graphs label 0; ids are unique across splits.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthSplits> {
    cfg.id_family.validate()?;
    cfg.ood_family.validate()?;
    if cfg.train_count == 0 || cfg.test_id_count == 0 || cfg.test_ood_count == 0 {
        return Err(Error::InvalidArgument(
            "every split needs at least one graph".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |family: &Family, prefix: &str, count: usize, label: u8, role| {
        let graphs = (0..count)
            .map(|k| {
                Ok(family
                    .draw(&mut rng, format!("{prefix}-{k}"), cfg.feature_dim)?
                    .with_label(Some(label)))
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(graphs, role)
    };
    let train_id = split(
        &cfg.id_family,
        "train",
        cfg.train_count,
        1,
        CorpusRole::TrainId,
    )?;
    let test_id = split(
        &cfg.id_family,
        "test_id",
        cfg.test_id_count,
        1,
        CorpusRole::TestId,
    )?;
    let test_ood = split(
        &cfg.ood_family,
        "test_ood",
        cfg.test_ood_count,
        0,
        CorpusRole::TestOod,
    )?;
    Ok(SynthSplits {
        train_id,
        test_id,
        test_ood,
    })
}
