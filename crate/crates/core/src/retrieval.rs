//! Exhaustive top-k image retrieval over L2-normalized global descriptors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ImageId;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub owner: ImageId,
    pub values: Vec<f32>,
}

impl GlobalDescriptor {
    pub fn new(owner: ImageId, values: Vec<f32>) -> Self {
        GlobalDescriptor { owner, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn normalized(&self) -> Result<Vec<f64>> {
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(format!(
                "descriptor of image {} has non-finite value {v}",
                self.owner
            )));
        }
        let norm = self
            .values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroDescriptor(self.owner));
        }
        Ok(self.values.iter().map(|&v| v as f64 / norm).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
}

impl RetrievalConfig {
    pub const DAY_TOP_K: usize = 20;
    pub const NIGHT_TOP_K: usize = 30;
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    ids: Vec<ImageId>,
    vectors: Vec<Vec<f64>>,
}

impl RetrievalIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stored (normalized) entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &[f64])> {
        self.ids
            .iter()
            .copied()
            .zip(self.vectors.iter().map(|v| v.as_slice()))
    }
}

pub fn build_index(descriptors: &[GlobalDescriptor]) -> Result<RetrievalIndex> {
    let first = descriptors.first().ok_or(Error::EmptyInput(
        "retrieval index needs at least one descriptor",
    ))?;
    let dim = first.dim();
    let mut ids = Vec::with_capacity(descriptors.len());
    let mut vectors = Vec::with_capacity(descriptors.len());
    for d in descriptors {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "descriptor of image {} is {}-d, index is {dim}-d",
                d.owner,
                d.dim()
            )));
        }
        ids.push(d.owner);
        vectors.push(d.normalized()?);
    }
    Ok(RetrievalIndex { dim, ids, vectors })
}

/// The `min(k, |index|)` entries closest to `query` by normalized L2
/// distance, ascending, ties broken by image id.
pub fn query_top_k(
    index: &RetrievalIndex,
    query: &GlobalDescriptor,
    cfg: &RetrievalConfig,
) -> Result<Vec<(ImageId, f64)>> {
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch(format!(
            "query descriptor is {}-d, index is {}-d",
            query.dim(),
            index.dim
        )));
    }
    let q = query.normalized()?;
    let mut scored: Vec<(ImageId, f64)> = index
        .iter()
        .map(|(id, v)| {
            let d2: f64 = v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            (id, d2.sqrt())
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(cfg.top_k);
    Ok(scored)
}
