//! Analytical MAC and parameter accounting.
//!
//! Attention per layer costs `(2 + 2/g) N C^2` projection MACs (g = query
//! heads per KV head; g = 1 gives the familiar 4NC^2) plus `2 N^2 C` for
//! scores and value mixing. The FFN costs one `N C M` per matmul (3 gated,
//! 2 plain). These are exactly the matmuls the runtime executes, so the
//! instrumented `MacCounter` totals from a real prefill must match to the
//! MAC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Token counts for a skip-adjusted cost query: `total` tokens exist, of
/// which `attention_tokens` (N1) reach the attention block and `ffn_tokens`
/// (N2) reach the FFN.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsQuery {
    pub cfg: ModelConfig,
    pub total_tokens: usize,
    pub attention_tokens: usize,
    pub ffn_tokens: usize,
}

impl FlopsQuery {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.attention_tokens > self.total_tokens {
            return Err(Error::invalid(format!(
                "N1 ({}) exceeds N ({})",
                self.attention_tokens, self.total_tokens
            )));
        }
        if self.ffn_tokens > self.attention_tokens {
            return Err(Error::invalid(format!(
                "N2 ({}) exceeds N1 ({})",
                self.ffn_tokens, self.attention_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub ffn: u64,
    pub attention: u64,
    pub embedding: u64,
    /// Norm gains plus the untied output head when configured.
    pub other: u64,
    pub total: u64,
    pub ffn_pct: f64,
    pub attention_pct: f64,
    pub embedding_pct: f64,
    pub other_pct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsReport {
    pub attention_proj_per_layer: u64,
    pub attention_score_per_layer: u64,
    pub ffn_per_layer: u64,
    /// Attention MACs summed over all layers.
    pub attention_macs: u64,
    /// FFN MACs summed over all layers.
    pub ffn_macs: u64,
    pub total_macs: u64,
    pub params: ParamBreakdown,
}

impl FlopsReport {
    pub fn per_layer_total(&self) -> u64 {
        self.attention_proj_per_layer + self.attention_score_per_layer + self.ffn_per_layer
    }
}

fn report(cfg: &ModelConfig, n_attn: u64, n_ffn: u64) -> FlopsReport {
    let c = cfg.hidden as u64;
    let kv = cfg.kv_dim() as u64;
    let m = cfg.ffn_inner as u64;
    let l = cfg.layers as u64;

    // Q and O project to C, K and V to kv_dim.
    let attention_proj_per_layer = n_attn * c * (2 * c + 2 * kv);
    let attention_score_per_layer = 2 * n_attn * n_attn * c;
    let ffn_per_layer = cfg.ffn_matmuls() * n_ffn * c * m;

    let attention_macs = l * (attention_proj_per_layer + attention_score_per_layer);
    let ffn_macs = l * ffn_per_layer;
    FlopsReport {
        attention_proj_per_layer,
        attention_score_per_layer,
        ffn_per_layer,
        attention_macs,
        ffn_macs,
        total_macs: attention_macs + ffn_macs,
        params: param_count(cfg),
    }
}

/// Cost of a dense prefill over `n` tokens.
pub fn dense_flops(cfg: &ModelConfig, n: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    Ok(report(cfg, n as u64, n as u64))
}

/// Cost of a skip-adjusted prefill: N1 tokens through attention, N2 through
/// the FFN.
pub fn skip_flops(query: &FlopsQuery) -> Result<FlopsReport> {
    query.validate()?;
    Ok(report(
        &query.cfg,
        query.attention_tokens as u64,
        query.ffn_tokens as u64,
    ))
}

/// Parameter census. FFN weights dominate; percentages are over the full
/// count including norm gains and the untied head when present.
pub fn param_count(cfg: &ModelConfig) -> ParamBreakdown {
    let c = cfg.hidden as u64;
    let kv = cfg.kv_dim() as u64;
    let m = cfg.ffn_inner as u64;
    let l = cfg.layers as u64;
    let vocab = cfg.vocab as u64;

    let ffn_weights = cfg.ffn_matmuls() * c * m;
    let ffn_bias = if cfg.use_bias { m + c } else { 0 };
    let ffn = l * (ffn_weights + ffn_bias);
    let attention = l * (2 * c * c + 2 * c * kv);
    let embedding = vocab * c;
    let norms = l * 2 * c + c;
    let head = if cfg.untied_head { vocab * c } else { 0 };
    let other = norms + head;
    let total = ffn + attention + embedding + other;

    let pct = |x: u64| 100.0 * x as f64 / total as f64;
    ParamBreakdown {
        ffn,
        attention,
        embedding,
        other,
        total,
        ffn_pct: pct(ffn),
        attention_pct: pct(attention),
        embedding_pct: pct(embedding),
        other_pct: pct(other),
    }
}

/// Training-cost convention: backward pass costs twice the forward pass, so
/// a step is estimated at 3x the forward MACs.
pub fn training_flops_estimate(query: &FlopsQuery) -> Result<f64> {
    Ok(3.0 * skip_flops(query)?.total_macs as f64)
}

/// The reference 8B-class configuration used in the documentation examples.
pub fn llama3_8b_config() -> ModelConfig {
    ModelConfig {
        layers: 32,
        hidden: 4096,
        ffn_inner: 14336,
        n_heads: 32,
        n_kv_heads: 8,
        head_dim: 128,
        vocab: 128_256,
        use_bias: false,
        gated: true,
        untied_head: true,
        init: crate::model::WeightInit::Gaussian,
        seed: 0,
    }
}
