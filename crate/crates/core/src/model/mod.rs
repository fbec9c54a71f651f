//! Decoder-only transformer with skip-FFN routing and a prunable KV-cache.

mod forward;
mod kv;

pub use forward::{argmax, ffn, CaptureOptions, LayerActivations, Model, PrefillOutput};
pub use kv::{KvCache, KvTag, LayerKv};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, gaussian_vec, orthogonal_matrix, Matrix, Scalar};
use crate::tokens::TokenRole;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Gaussian, std 0.02.
    #[default]
    Gaussian,
    /// Orthonormalized Gaussian; every weight matrix has spectral norm 1.
    Orthogonal,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of decoder layers.
    pub layers: usize,
    /// Residual width C.
    pub hidden: usize,
    /// FFN inner width M.
    pub ffn_inner: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    /// Per-head width; hidden == n_heads * head_dim.
    pub head_dim: usize,
    pub vocab: usize,
    #[serde(default)]
    pub use_bias: bool,
    /// SwiGLU gate on the FFN. Disabling it yields the plain two-matrix FFN
    /// with ReLU (exactly 1-Lipschitz), which the bound analysis assumes.
    #[serde(default = "default_true")]
    pub gated: bool,
    /// Untied output head (extra vocab x hidden parameters).
    #[serde(default)]
    pub untied_head: bool,
    #[serde(default)]
    pub init: WeightInit,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ffn_inner == 0 || self.vocab == 0 {
            return Err(Error::invalid("layers, hidden, ffn_inner, vocab must be positive"));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::invalid(format!(
                "n_heads ({}) must be a positive multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.hidden != self.n_heads * self.head_dim {
            return Err(Error::invalid(format!(
                "hidden ({}) != n_heads ({}) * head_dim ({})",
                self.hidden, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Width of the K/V projections: n_kv_heads * head_dim.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Matmuls in one FFN application (3 gated, 2 plain).
    pub fn ffn_matmuls(&self) -> u64 {
        if self.gated {
            3
        } else {
            2
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AttentionParams<T> {
    /// hidden x hidden.
    pub w_q: Matrix<T>,
    /// hidden x kv_dim.
    pub w_k: Matrix<T>,
    /// hidden x kv_dim.
    pub w_v: Matrix<T>,
    /// hidden x hidden.
    pub w_o: Matrix<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FfnParams<T> {
    /// hidden x ffn_inner.
    pub w_1: Matrix<T>,
    /// hidden x ffn_inner; present iff gated.
    pub w_gate: Option<Matrix<T>>,
    /// ffn_inner x hidden.
    pub w_2: Matrix<T>,
    pub b_1: Option<Vec<T>>,
    pub b_2: Option<Vec<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerParams<T> {
    pub attn: AttentionParams<T>,
    pub ffn: FfnParams<T>,
    pub attn_gain: Vec<T>,
    pub ffn_gain: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn init(cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let c = cfg.hidden;
        let m = cfg.ffn_inner;
        let kv = cfg.kv_dim();
        let mat = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| match cfg.init {
            WeightInit::Gaussian => gaussian_matrix(rows, cols, 0.02, rng),
            WeightInit::Orthogonal => orthogonal_matrix(rows, cols, rng),
        };
        LayerParams {
            attn: AttentionParams {
                w_q: mat(c, c, rng),
                w_k: mat(c, kv, rng),
                w_v: mat(c, kv, rng),
                w_o: mat(c, c, rng),
            },
            ffn: FfnParams {
                w_1: mat(c, m, rng),
                w_gate: cfg.gated.then(|| mat(c, m, rng)),
                w_2: mat(m, c, rng),
                b_1: cfg.use_bias.then(|| gaussian_vec(m, 0.02, rng)),
                b_2: cfg.use_bias.then(|| gaussian_vec(c, 0.02, rng)),
            },
            attn_gain: vec![T::ONE; c],
            ffn_gain: vec![T::ONE; c],
        }
    }
}

/// Which cache rows the skip KV-cache eviction removes. Only rows with role
/// `SkippedVisual` are ever eligible; summary and retained rows always stay.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PruneSpec {
    /// Every skipped-visual row.
    #[default]
    AllSkipped,
    /// Skipped-visual rows whose provenance is Local with one of these scales.
    LocalScales { scales: BTreeSet<u32> },
}

/// Ablation flags: which roles bypass the FFN and what the cache prunes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct SkipSchedule {
    /// Skip the FFN for skipped-visual tokens.
    pub sf: bool,
    /// Emit the former summary token.
    pub fs: bool,
    /// Emit the latter summary token.
    pub ls: bool,
    /// Merge skipped tokens before assembly.
    pub merge: bool,
    /// Route the last skipped-visual token through the FFN anyway.
    pub lv: bool,
    /// Prune the KV-cache after prefill.
    pub sk: bool,
    #[serde(default)]
    pub prune: PruneSpec,
}

impl SkipSchedule {
    /// Everything off: a dense baseline.
    pub fn dense() -> Self {
        SkipSchedule::default()
    }

    /// All mechanisms on, pruning every skipped row.
    pub fn full() -> Self {
        SkipSchedule {
            sf: true,
            fs: true,
            ls: true,
            merge: true,
            lv: true,
            sk: true,
            prune: PruneSpec::AllSkipped,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sk && !self.sf {
            return Err(Error::invalid("SK requires SF (cannot prune tokens that were not skipped)"));
        }
        if self.lv && !self.sf {
            return Err(Error::invalid("LV is only meaningful when SF is on"));
        }
        Ok(())
    }

    /// Per-row FFN routing for a prefill sequence: true means the row goes
    /// through the FFN sub-block. Retained, summary, and text tokens always
    /// do; skipped-visual tokens only when SF is off, except the last one
    /// when LV is on.
    pub fn ffn_routing(&self, roles: &[TokenRole]) -> Vec<bool> {
        let last_skipped = roles.iter().rposition(|r| *r == TokenRole::SkippedVisual);
        roles
            .iter()
            .enumerate()
            .map(|(i, role)| match role {
                TokenRole::SkippedVisual => !self.sf || (self.lv && Some(i) == last_skipped),
                _ => true,
            })
            .collect()
    }

    /// True when the eviction rule removes a row with this tag.
    pub fn evicts(&self, tag: &KvTag) -> bool {
        if tag.role != TokenRole::SkippedVisual {
            return false;
        }
        match &self.prune {
            PruneSpec::AllSkipped => true,
            PruneSpec::LocalScales { scales } => match tag.provenance {
                crate::tokens::Provenance::Local(s) => scales.contains(&s),
                _ => false,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::Provenance;

    pub(crate) fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            ffn_inner: 16,
            n_heads: 2,
            n_kv_heads: 2,
            head_dim: 4,
            vocab: 11,
            use_bias: false,
            gated: true,
            untied_head: false,
            init: WeightInit::Gaussian,
            seed,
        }
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = tiny_cfg(0);
        assert!(cfg.validate().is_ok());
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_kv_heads = 2;
        cfg.head_dim = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schedule_requires_sf_for_sk_and_lv() {
        let mut s = SkipSchedule::dense();
        s.sk = true;
        assert!(s.validate().is_err());
        s.sk = false;
        s.lv = true;
        assert!(s.validate().is_err());
        s.sf = true;
        s.sk = true;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn routing_matrix() {
        let roles = vec![
            TokenRole::RetainedVisual,
            TokenRole::SummaryFormer,
            TokenRole::SkippedVisual,
            TokenRole::SkippedVisual,
            TokenRole::SummaryLatter,
            TokenRole::Text,
        ];
        let dense = SkipSchedule::dense();
        assert!(dense.ffn_routing(&roles).iter().all(|&b| b));

        let mut sf = SkipSchedule::dense();
        sf.sf = true;
        assert_eq!(sf.ffn_routing(&roles), vec![true, true, false, false, true, true]);

        sf.lv = true;
        assert_eq!(sf.ffn_routing(&roles), vec![true, true, false, true, true, true]);
    }

    #[test]
    fn eviction_scope() {
        let mut s = SkipSchedule::full();
        let skipped_small = KvTag {
            position: 3,
            role: TokenRole::SkippedVisual,
            provenance: Provenance::Local(1),
        };
        let skipped_large = KvTag {
            position: 4,
            role: TokenRole::SkippedVisual,
            provenance: Provenance::Local(4),
        };
        let summary = KvTag {
            position: 5,
            role: TokenRole::SummaryLatter,
            provenance: Provenance::Global,
        };
        assert!(s.evicts(&skipped_small));
        assert!(s.evicts(&skipped_large));
        assert!(!s.evicts(&summary));

        s.prune = PruneSpec::LocalScales {
            scales: [1].into_iter().collect(),
        };
        assert!(s.evicts(&skipped_small));
        assert!(!s.evicts(&skipped_large));
    }
}
