//! Shared weights-file format for trained networks.
//!
//! A weights file is a JSON document with a format version, a `kind` tag,
//! an architecture descriptor, optional SDE settings and training metadata,
//! and a map from tensor names to `{shape, data}` with row-major data. Maps
//! are ordered by key, so identical parameters always serialize to identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self, name: &str) -> Result<Array2<f64>> {
        let bad = || Error::Schema(format!("tensor `{name}` has shape {:?}", self.shape));
        let &[r, c] = self.shape.as_slice() else {
            return Err(bad());
        };
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "tensor `{name}` has non-finite entries"
            )));
        }
        Array2::from_shape_vec((r, c), self.data.clone()).map_err(|_| bad())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub format_version: u32,
    pub kind: String,
    pub arch: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sde: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightsFile {
    pub fn new(kind: &str, arch: serde_json::Value) -> Self {
        WeightsFile {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            arch,
            sde: None,
            training: None,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.tensors.insert(name.into(), Tensor::from_matrix(m));
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))?
            .to_matrix(name)
    }

    /// Checks the version and kind tag after parsing.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported weights format version {}",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Schema(format!(
                "expected `{kind}` weights, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
