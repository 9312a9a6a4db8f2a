//! Line-delimited JSON corpus files: one graph per line,
//! `{"id": .., "n": .., "edges": [[i,j],..], "x": [[..],..], "label": 0|1}`.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AdjacencyForm, Corpus, CorpusRole, Graph, RawGraph, Violation};
use crate::error::{Error, Result};

/// One corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub id: String,
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl GraphRecord {
    /// Converts a parsed record into a validated discrete graph.
    pub fn into_graph(self, line: usize) -> Result<Graph> {
        let parse_err = |message: String| Error::Parse { line, message };
        let n = self.n;
        if let Some(l) = self.label {
            if l > 1 {
                return Err(parse_err(format!("label must be 0 or 1, got {l}")));
            }
        }
        let d = self.x.first().map_or(0, Vec::len);
        if self.x.iter().any(|r| r.len() != d) {
            return Err(parse_err("rows of `x` have differing lengths".into()));
        }
        let mut adjacency = Array2::<f64>::zeros((n, n));
        let mut violations = Vec::new();
        for &[i, j] in &self.edges {
            if i >= n || j >= n {
                return Err(parse_err(format!("edge [{i},{j}] out of range for n={n}")));
            }
            if i == j {
                violations.push(Violation::NonzeroDiagonal { i });
                continue;
            }
            if i > j {
                violations.push(Violation::Asymmetric { i: j, j: i });
                continue;
            }
            if adjacency[[i, j]] != 0.0 {
                return Err(parse_err(format!("duplicate edge [{i},{j}]")));
            }
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
        if self.x.len() != n {
            violations.push(Violation::FeatureRows {
                expected: n,
                got: self.x.len(),
            });
        }
        if !violations.is_empty() {
            return Err(Error::Validation {
                id: self.id,
                violations,
            });
        }
        let flat: Vec<f64> = self.x.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| parse_err(format!("feature matrix: {e}")))?;
        let node_weights = super::uniform_weights(n).map_err(|_| Error::Validation {
            id: self.id.clone(),
            violations: vec![Violation::EmptyGraph],
        })?;
        Graph::try_from(RawGraph {
            id: self.id,
            adjacency,
            features,
            node_weights,
            form: AdjacencyForm::Discrete,
            label: self.label,
        })
    }

    /// Builds a record from a discrete graph. Relaxed graphs must be
    /// quantized first.
    pub fn from_graph(g: &Graph) -> Result<Self> {
        if g.form() != AdjacencyForm::Discrete {
            return Err(Error::InvalidArgument(format!(
                "graph `{}` has relaxed adjacency; quantize before serializing",
                g.id()
            )));
        }
        Ok(GraphRecord {
            id: g.id().to_string(),
            n: g.n(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            x: g.features()
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            label: g.label(),
        })
    }
}

/// Parses corpus lines from a reader. Blank lines are skipped.
pub fn parse_corpus<R: Read>(reader: R, role: CorpusRole) -> Result<Corpus> {
    let mut graphs = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        graphs.push(record.into_graph(line_no)?);
    }
    Corpus::new(graphs, role)
}

/// Loads and validates a corpus file.
pub fn load_corpus(path: impl AsRef<Path>, role: CorpusRole) -> Result<Corpus> {
    let file = fs::File::open(path.as_ref())?;
    parse_corpus(file, role)
}

/// Serializes graphs in corpus line format, one per line.
pub fn serialize_corpus<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Result<String> {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serde_json::to_string(&GraphRecord::from_graph(g)?)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    fs::write(path, serialize_corpus(corpus.graphs())?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Corpus> {
        parse_corpus(s.as_bytes(), CorpusRole::TrainId)
    }

    #[test]
    fn single_edge_graph() {
        let c = parse(r#"{"id":"g","n":2,"edges":[[0,1]],"x":[[1.0,2.0],[3.0,4.0]]}"#).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.feature_dim(), 2);
        let a = c.graphs()[0].adjacency();
        assert_eq!((a[[0, 1]], a[[1, 0]]), (1.0, 1.0));
        assert_eq!(c.graphs()[0].node_weights().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = parse("").unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn self_loop_is_validation_error() {
        let e = parse(r#"{"id":"g","n":2,"edges":[[0,0]],"x":[[1.0],[2.0]]}"#).unwrap_err();
        match e {
            Error::Validation { violations, .. } => {
                assert_eq!(violations, vec![Violation::NonzeroDiagonal { i: 0 }])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lower_triangle_edge_is_validation_error() {
        let e = parse(r#"{"id":"g","n":2,"edges":[[1,0]],"x":[[1.0],[2.0]]}"#).unwrap_err();
        assert!(matches!(e, Error::Validation { .. }));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "{\"id\":\"a\",\"n\":1,\"edges\":[],\"x\":[[0.0]]}\n{not json}\n";
        match parse(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dims_is_schema_error() {
        let text = "{\"id\":\"a\",\"n\":1,\"edges\":[],\"x\":[[0.0]]}\n\
                    {\"id\":\"b\",\"n\":1,\"edges\":[],\"x\":[[0.0,1.0]]}\n";
        assert!(matches!(parse(text), Err(Error::Schema(_))));
    }

    #[test]
    fn wrong_row_count_is_validation_error() {
        let e = parse(r#"{"id":"g","n":3,"edges":[],"x":[[1.0],[2.0]]}"#).unwrap_err();
        assert!(matches!(e, Error::Validation { .. }));
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let text = "{\"id\":\"a\",\"n\":3,\"edges\":[[0,1],[1,2]],\"x\":[[0.5,-1.25],[2.0,3.0],[1e-7,4.0]],\"label\":1}\n\
                    {\"id\":\"b\",\"n\":1,\"edges\":[],\"x\":[[0.1,0.2]],\"label\":0}\n\
                    {\"id\":\"c\",\"n\":2,\"edges\":[],\"x\":[[0.0,0.0],[1.0,1.0]]}\n";
        let c = parse(text).unwrap();
        let out = serialize_corpus(c.graphs()).unwrap();
        let normalize = |s: &str| -> Vec<serde_json::Value> {
            s.lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect()
        };
        assert_eq!(normalize(&out), normalize(text));
        let again = serialize_corpus(parse(&out).unwrap().graphs()).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn relaxed_graph_cannot_be_serialized() {
        let g = Graph::new(
            "r",
            ndarray::array![[0.0, 0.3], [0.3, 0.0]],
            Array2::zeros((2, 1)),
            AdjacencyForm::Relaxed,
        )
        .unwrap();
        assert!(serialize_corpus([&g]).is_err());
    }
}
