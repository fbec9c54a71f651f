//! Per-layer key/value cache with tagged rows.
//!
//! Every cached row remembers its original position, role, and provenance.
//! Pruning removes rows without re-indexing: positions are never reused, so
//! the causal mask keeps working on the original coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::tokens::{Provenance, TokenRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvTag {
    pub position: usize,
    pub role: TokenRole,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerKv<T> {
    /// rows x kv_dim.
    pub k: Matrix<T>,
    /// rows x kv_dim.
    pub v: Matrix<T>,
    pub tags: Vec<KvTag>,
}

impl<T: Scalar> LayerKv<T> {
    fn new(kv_dim: usize) -> Self {
        LayerKv {
            k: Matrix::zeros(0, kv_dim),
            v: Matrix::zeros(0, kv_dim),
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KvCache<T> {
    pub layers: Vec<LayerKv<T>>,
    pub kv_dim: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, kv_dim: usize) -> Self {
        KvCache {
            layers: (0..n_layers).map(|_| LayerKv::new(kv_dim)).collect(),
            kv_dim,
        }
    }

    /// Append a batch of rows to one layer. Positions must strictly extend
    /// the rows already present.
    pub fn append(&mut self, layer: usize, k: &Matrix<T>, v: &Matrix<T>, tags: &[KvTag]) -> Result<()> {
        if k.rows != v.rows || k.rows != tags.len() || k.cols != self.kv_dim || v.cols != self.kv_dim {
            return Err(Error::invalid(format!(
                "cache append shape mismatch: k {}x{}, v {}x{}, {} tags, kv_dim {}",
                k.rows,
                k.cols,
                v.rows,
                v.cols,
                tags.len(),
                self.kv_dim
            )));
        }
        let slot = &mut self.layers[layer];
        let mut last = slot.tags.last().map(|t| t.position);
        for t in tags {
            if let Some(p) = last {
                if t.position <= p {
                    return Err(Error::invalid(format!(
                        "cache positions must strictly increase: {} after {}",
                        t.position, p
                    )));
                }
            }
            last = Some(t.position);
        }
        slot.k.push_rows(k);
        slot.v.push_rows(v);
        slot.tags.extend_from_slice(tags);
        Ok(())
    }

    /// Remove every row (in every layer) whose tag matches the predicate.
    /// Returns the distinct original positions removed, ascending.
    pub fn evict<F: Fn(&KvTag) -> bool>(&mut self, predicate: F) -> Vec<usize> {
        let mut removed = Vec::new();
        for layer in &mut self.layers {
            let keep: Vec<usize> = (0..layer.len())
                .filter(|&i| !predicate(&layer.tags[i]))
                .collect();
            if keep.len() == layer.len() {
                continue;
            }
            for i in 0..layer.len() {
                if !keep.contains(&i) {
                    removed.push(layer.tags[i].position);
                }
            }
            layer.k = layer.k.gather_rows(&keep);
            layer.v = layer.v.gather_rows(&keep);
            layer.tags = keep.iter().map(|&i| layer.tags[i]).collect();
        }
        removed.sort_unstable();
        removed.dedup();
        removed
    }

    /// Bit-exact equality of values and tags, for prune/mask duality checks.
    pub fn bits_eq(&self, other: &KvCache<T>) -> bool {
        if self.layers.len() != other.layers.len() || self.kv_dim != other.kv_dim {
            return false;
        }
        self.layers.iter().zip(&other.layers).all(|(a, b)| {
            a.tags == b.tags
                && a.k.as_slice().len() == b.k.as_slice().len()
                && a.k
                    .as_slice()
                    .iter()
                    .zip(b.k.as_slice())
                    .all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
                && a.v
                    .as_slice()
                    .iter()
                    .zip(b.v.as_slice())
                    .all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.k.rows != layer.v.rows || layer.k.rows != layer.tags.len() {
                return Err(Error::invalid(format!(
                    "layer {li}: k rows {}, v rows {}, tags {}",
                    layer.k.rows,
                    layer.v.rows,
                    layer.tags.len()
                )));
            }
            if layer.tags.windows(2).any(|w| w[0].position >= w[1].position) {
                return Err(Error::invalid(format!("layer {li}: positions not strictly increasing")));
            }
        }
        Ok(())
    }
}
