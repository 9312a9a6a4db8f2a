use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

/// Which split a corpus represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    TrainId,
    TestId,
    TestOod,
}

impl std::str::FromStr for CorpusRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_id" => Ok(CorpusRole::TrainId),
            "test_id" => Ok(CorpusRole::TestId),
            "test_ood" => Ok(CorpusRole::TestOod),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus role `{other}`"
            ))),
        }
    }
}

/// An ordered collection of graphs sharing one feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    graphs: Vec<Graph>,
    role: CorpusRole,
    feature_dim: usize,
}

impl Corpus {
    /// Builds a corpus; all graphs must share the same feature dimension.
    /// An empty corpus has feature dimension 0.
    pub fn new(graphs: Vec<Graph>, role: CorpusRole) -> Result<Self> {
        let feature_dim = graphs.first().map_or(0, Graph::feature_dim);
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != feature_dim) {
            return Err(Error::Schema(format!(
                "graph `{}` has feature dim {}, corpus has {}",
                g.id(),
                g.feature_dim(),
                feature_dim
            )));
        }
        Ok(Corpus {
            graphs,
            role,
            feature_dim,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn into_graphs(self) -> Vec<Graph> {
        self.graphs
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Per-dimension mean and standard deviation over all nodes.
    pub fn feature_stats(&self) -> Result<FeatureStats> {
        let total: usize = self.graphs.iter().map(Graph::n).sum();
        if total == 0 {
            return Err(Error::Empty("cannot standardize an empty corpus".into()));
        }
        let d = self.feature_dim;
        let mut mean = Array1::<f64>::zeros(d);
        for g in &self.graphs {
            mean += &g.features().sum_axis(Axis(0));
        }
        mean /= total as f64;
        let mut var = Array1::<f64>::zeros(d);
        for g in &self.graphs {
            for row in g.features().rows() {
                let diff = &row - &mean;
                var += &(&diff * &diff);
            }
        }
        var /= total as f64;
        let std = var.mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Ok(FeatureStats { mean, std })
    }

    /// Applies a feature standardization to every member graph.
    pub fn standardized(&self, stats: &FeatureStats) -> Result<Self> {
        let graphs = self
            .graphs
            .iter()
            .map(|g| g.with_features(stats.apply(g.features())))
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(graphs, self.role)
    }
}

/// Feature standardization statistics, fitted on a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl FeatureStats {
    pub fn apply(&self, x: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        (x - &self.mean) / &self.std
    }
}
