//! Attributed graphs in optimal-transport form.
//!
//! A [`Graph`] is the triple (adjacency, node features, node weights). Node
//! weights are always uniform. Graphs are validated on construction and are
//! immutable afterwards, so every downstream consumer may assume the
//! invariants listed on [`Violation`] hold.

mod corpus;
mod io;

pub use corpus::{Corpus, CorpusRole, FeatureStats};
pub use io::{load_corpus, parse_corpus, serialize_corpus, write_corpus, GraphRecord};

use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default adjacency quantization threshold.
pub const DEFAULT_QUANTIZE_THRESHOLD: f64 = 0.5;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Whether adjacency entries are continuous or binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyForm {
    /// Real-valued entries, e.g. a diffusion state.
    Relaxed,
    /// Entries in {0, 1}.
    Discrete,
}

/// A single broken graph invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EmptyGraph,
    AdjacencyShape { rows: usize, cols: usize, n: usize },
    Asymmetric { i: usize, j: usize },
    NonzeroDiagonal { i: usize },
    NonFiniteAdjacency { i: usize, j: usize },
    NonBinaryEntry { i: usize, j: usize, value: f64 },
    WeightsLength { expected: usize, got: usize },
    WeightsSum { sum: f64 },
    NonPositiveWeight { i: usize },
    FeatureRows { expected: usize, got: usize },
    NonFiniteFeature { i: usize, k: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyGraph => write!(f, "graph has no nodes"),
            Violation::AdjacencyShape { rows, cols, n } => {
                write!(f, "adjacency is {rows}x{cols}, expected {n}x{n}")
            }
            Violation::Asymmetric { i, j } => write!(f, "adjacency asymmetric at ({i},{j})"),
            Violation::NonzeroDiagonal { i } => write!(f, "nonzero diagonal at node {i}"),
            Violation::NonFiniteAdjacency { i, j } => {
                write!(f, "non-finite adjacency entry at ({i},{j})")
            }
            Violation::NonBinaryEntry { i, j, value } => {
                write!(f, "discrete adjacency has entry {value} at ({i},{j})")
            }
            Violation::WeightsLength { expected, got } => {
                write!(f, "node weights have length {got}, expected {expected}")
            }
            Violation::WeightsSum { sum } => write!(f, "node weights sum to {sum}, not 1"),
            Violation::NonPositiveWeight { i } => write!(f, "node weight {i} is not positive"),
            Violation::FeatureRows { expected, got } => {
                write!(f, "features have {got} rows, expected {expected}")
            }
            Violation::NonFiniteFeature { i, k } => write!(f, "non-finite feature at ({i},{k})"),
        }
    }
}

/// Unvalidated graph parts. Use [`RawGraph::validate`] to get the full
/// violation report, or convert with [`Graph::try_from`].
#[derive(Clone, Debug)]
pub struct RawGraph {
    pub id: String,
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
    pub node_weights: Array1<f64>,
    pub form: AdjacencyForm,
    pub label: Option<u8>,
}

impl RawGraph {
    /// Checks every graph invariant and reports all violations found.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let n = self.features.nrows();
        if n == 0 {
            out.push(Violation::EmptyGraph);
        }
        let (rows, cols) = self.adjacency.dim();
        if rows != cols || rows != n {
            out.push(Violation::AdjacencyShape { rows, cols, n });
        } else {
            for i in 0..n {
                if self.adjacency[[i, i]] != 0.0 {
                    out.push(Violation::NonzeroDiagonal { i });
                }
                for j in 0..n {
                    let a = self.adjacency[[i, j]];
                    if !a.is_finite() {
                        out.push(Violation::NonFiniteAdjacency { i, j });
                        continue;
                    }
                    if j > i && a != self.adjacency[[j, i]] {
                        out.push(Violation::Asymmetric { i, j });
                    }
                    if self.form == AdjacencyForm::Discrete && i != j && a != 0.0 && a != 1.0 {
                        out.push(Violation::NonBinaryEntry { i, j, value: a });
                    }
                }
            }
        }
        if self.node_weights.len() != n {
            out.push(Violation::WeightsLength {
                expected: n,
                got: self.node_weights.len(),
            });
        }
        let sum: f64 = self.node_weights.sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            out.push(Violation::WeightsSum { sum });
        }
        for (i, &w) in self.node_weights.iter().enumerate() {
            if !(w > 0.0) {
                out.push(Violation::NonPositiveWeight { i });
            }
        }
        for ((i, k), v) in self.features.indexed_iter() {
            if !v.is_finite() {
                out.push(Violation::NonFiniteFeature { i, k });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

/// An attributed graph `(A, X, mu)` with uniform node weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    id: String,
    adjacency: Array2<f64>,
    features: Array2<f64>,
    node_weights: Array1<f64>,
    form: AdjacencyForm,
    label: Option<u8>,
}

impl TryFrom<RawGraph> for Graph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        if let Err(violations) = raw.validate() {
            return Err(Error::Validation {
                id: raw.id,
                violations,
            });
        }
        Ok(Graph {
            id: raw.id,
            adjacency: raw.adjacency,
            features: raw.features,
            node_weights: raw.node_weights,
            form: raw.form,
            label: raw.label,
        })
    }
}

/// Uniform node weights `1/n`.
pub fn uniform_weights(n: usize) -> Result<Array1<f64>> {
    if n == 0 {
        return Err(Error::InvalidSize("node count must be positive".into()));
    }
    Ok(Array1::from_elem(n, 1.0 / n as f64))
}

/// Copies the strict upper triangle onto the lower one and zeroes the diagonal.
pub fn symmetrize_upper(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        a[[i, i]] = 0.0;
        for j in (i + 1)..n {
            a[[j, i]] = a[[i, j]];
        }
    }
}

impl Graph {
    /// Builds a validated graph with uniform node weights.
    pub fn new(
        id: impl Into<String>,
        adjacency: Array2<f64>,
        features: Array2<f64>,
        form: AdjacencyForm,
    ) -> Result<Self> {
        let n = features.nrows();
        let node_weights = uniform_weights(n)?;
        Graph::try_from(RawGraph {
            id: id.into(),
            adjacency,
            features,
            node_weights,
            form,
            label: None,
        })
    }

    /// Builds a relaxed graph from a matrix whose upper triangle is
    /// authoritative; the lower triangle and diagonal are overwritten.
    pub fn relaxed_from_upper(
        id: impl Into<String>,
        mut adjacency: Array2<f64>,
        features: Array2<f64>,
    ) -> Result<Self> {
        symmetrize_upper(&mut adjacency);
        Graph::new(id, adjacency, features, AdjacencyForm::Relaxed)
    }

    /// Builds a discrete graph from an undirected edge list.
    pub fn from_edges(
        id: impl Into<String>,
        n: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let mut adjacency = Array2::zeros((n, n));
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i},{j}) out of range for {n} nodes in `{id}`"
                )));
            }
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
        Graph::new(id, adjacency, features, AdjacencyForm::Discrete)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn node_weights(&self) -> &Array1<f64> {
        &self.node_weights
    }

    pub fn form(&self) -> AdjacencyForm {
        self.form
    }

    /// Optional ground-truth label (1 = ID, 0 = OOD) carried from corpus files.
    pub fn label(&self) -> Option<u8> {
        self.label
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_label(mut self, label: Option<u8>) -> Self {
        self.label = label;
        self
    }

    /// Returns a copy with new features; errors if the shape changes.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.dim() != self.features.dim() {
            return Err(Error::DimensionMismatch(format!(
                "features {:?} vs {:?}",
                features.dim(),
                self.features.dim()
            )));
        }
        Graph::try_from(RawGraph {
            features,
            ..self.to_raw()
        })
    }

    /// Always `Ok` for a constructed graph; provided for symmetry with
    /// [`RawGraph::validate`].
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        self.to_raw().validate()
    }

    pub fn to_raw(&self) -> RawGraph {
        RawGraph {
            id: self.id.clone(),
            adjacency: self.adjacency.clone(),
            features: self.features.clone(),
            node_weights: self.node_weights.clone(),
            form: self.form,
            label: self.label,
        }
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        let adjacency = Array2::from_shape_fn((n, n), |(i, j)| self.adjacency[[perm[i], perm[j]]]);
        let features =
            Array2::from_shape_fn(self.features.dim(), |(i, k)| self.features[[perm[i], k]]);
        Graph::try_from(RawGraph {
            adjacency,
            features,
            ..self.to_raw()
        })
    }

    /// Undirected edges `(i, j)` with `i < j` and nonzero adjacency.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency[[i, j]] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Fraction of node pairs joined by an edge (sum of upper-triangle
    /// entries over `n(n-1)/2`). Zero for single-node graphs.
    pub fn edge_density(&self) -> f64 {
        let n = self.n();
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += self.adjacency[[i, j]];
            }
        }
        s / (n * (n - 1) / 2) as f64
    }

    /// Clamps relaxed adjacency entries into `[0, 1]`.
    pub fn clamp_unit(&self) -> Self {
        let mut raw = self.to_raw();
        raw.adjacency.mapv_inplace(|a| a.clamp(0.0, 1.0));
        Graph::try_from(raw).expect("clamping preserves graph invariants")
    }
}

/// Thresholds a relaxed adjacency into a discrete one: `A(i,j) = 1` iff the
/// upper-triangle entry is at least `threshold`.
pub fn quantize_adjacency(g: &Graph, threshold: f64) -> Result<Graph> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantization threshold {threshold} outside (0,1)"
        )));
    }
    let n = g.n();
    let mut adjacency = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            if g.adjacency[[i, j]] >= threshold {
                adjacency[[i, j]] = 1.0;
                adjacency[[j, i]] = 1.0;
            }
        }
    }
    Graph::try_from(RawGraph {
        adjacency,
        form: AdjacencyForm::Discrete,
        ..g.to_raw()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path3() -> Graph {
        Graph::from_edges("p3", 3, &[(0, 1), (1, 2)], Array2::zeros((3, 2))).unwrap()
    }

    #[test]
    fn uniform_weight_examples() {
        assert_eq!(uniform_weights(1).unwrap().to_vec(), vec![1.0]);
        assert_eq!(uniform_weights(4).unwrap().to_vec(), vec![0.25; 4]);
        let w = uniform_weights(3).unwrap();
        assert!(w.iter().all(|&x| x == 1.0 / 3.0));
        assert!((w.sum() - 1.0).abs() <= 1e-12);
        assert!(matches!(uniform_weights(0), Err(Error::InvalidSize(_))));
    }

    #[test]
    fn path_graph_is_valid() {
        assert!(path3().validate().is_ok());
    }

    #[test]
    fn weights_off_simplex_are_reported() {
        let mut raw = path3().to_raw();
        raw.node_weights = array![0.3, 0.3, 0.3];
        let v = raw.validate().unwrap_err();
        assert!(v.iter().any(|x| matches!(x, Violation::WeightsSum { .. })));
    }

    #[test]
    fn asymmetry_is_reported() {
        let mut raw = path3().to_raw();
        raw.adjacency[[1, 2]] = 1.0;
        raw.adjacency[[2, 1]] = 0.0;
        let v = raw.validate().unwrap_err();
        assert_eq!(v, vec![Violation::Asymmetric { i: 1, j: 2 }]);
    }

    #[test]
    fn every_violation_is_listed() {
        let raw = RawGraph {
            id: "bad".into(),
            adjacency: array![[1.0, 0.5], [0.0, 0.0]],
            features: array![[f64::NAN], [0.0]],
            node_weights: array![0.0, 0.5],
            form: AdjacencyForm::Discrete,
            label: None,
        };
        let v = raw.validate().unwrap_err();
        assert!(v.contains(&Violation::NonzeroDiagonal { i: 0 }));
        assert!(v.contains(&Violation::Asymmetric { i: 0, j: 1 }));
        assert!(v.contains(&Violation::NonBinaryEntry {
            i: 0,
            j: 1,
            value: 0.5
        }));
        assert!(v.contains(&Violation::NonPositiveWeight { i: 0 }));
        assert!(v.contains(&Violation::NonFiniteFeature { i: 0, k: 0 }));
        assert!(v.iter().any(|x| matches!(x, Violation::WeightsSum { .. })));
    }

    #[test]
    fn quantize_examples() {
        let x = Array2::zeros((2, 1));
        let hi = Graph::new(
            "h",
            array![[0.0, 0.9], [0.9, 0.0]],
            x.clone(),
            AdjacencyForm::Relaxed,
        )
        .unwrap();
        let q = quantize_adjacency(&hi, 0.5).unwrap();
        assert_eq!(q.adjacency(), &array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(q.form(), AdjacencyForm::Discrete);

        let lo = Graph::new(
            "l",
            array![[0.0, 0.1], [0.1, 0.0]],
            x,
            AdjacencyForm::Relaxed,
        )
        .unwrap();
        let q = quantize_adjacency(&lo, 0.5).unwrap();
        assert!(q.adjacency().iter().all(|&a| a == 0.0));

        let p = path3();
        assert_eq!(quantize_adjacency(&p, 0.5).unwrap(), p);
        assert!(quantize_adjacency(&p, 1.0).is_err());
        assert!(quantize_adjacency(&p, 0.0).is_err());
    }

    #[test]
    fn relaxed_from_upper_symmetrizes() {
        let a = array![[5.0, 0.2, -0.4], [9.0, 3.0, 0.7], [9.0, 9.0, 1.0]];
        let g = Graph::relaxed_from_upper("r", a, Array2::zeros((3, 1))).unwrap();
        assert_eq!(
            g.adjacency(),
            &array![[0.0, 0.2, -0.4], [0.2, 0.0, 0.7], [-0.4, 0.7, 0.0]]
        );
    }

    #[test]
    fn permutation_relabels_nodes() {
        let x = array![[0.0], [1.0], [2.0]];
        let g = Graph::from_edges("g", 3, &[(0, 1)], x).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.features(), &array![[2.0], [0.0], [1.0]]);
        assert_eq!(p.edges(), vec![(1, 2)]);
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }

    #[test]
    fn density_of_path() {
        assert!((path3().edge_density() - 2.0 / 3.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn relaxed_graph() -> impl Strategy<Value = Graph> {
            (1usize..7).prop_flat_map(|n| {
                proptest::collection::vec(-0.5f64..1.5, n * n).prop_map(move |v| {
                    let a = Array2::from_shape_vec((n, n), v).unwrap();
                    Graph::relaxed_from_upper("g", a, Array2::zeros((n, 2))).unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn quantize_is_idempotent(g in relaxed_graph(), t in 0.01f64..0.99) {
                let q = quantize_adjacency(&g, t).unwrap();
                prop_assert_eq!(quantize_adjacency(&q, t).unwrap(), q.clone());
                prop_assert_eq!(q.features(), g.features());
            }
        }
    }
}
