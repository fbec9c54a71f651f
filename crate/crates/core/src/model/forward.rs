//! Prefill and decode passes.
//!
//! Prefill runs batch attention as full matmuls (masked entries get -inf
//! scores and exactly-zero weights), so the instrumented MAC counts line up
//! with the analytical formulas. Decode runs one query row at a time and
//! physically skips masked cache entries, which makes masking a cached row
//! bit-identical to evicting it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{FfnParams, KvCache, KvTag, LayerParams, ModelConfig, SkipSchedule, WeightInit};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, gaussian_matrix, gaussian_vec, matmul, orthogonal_matrix, rms_norm, seeded_rng,
    softmax_rows, MacCounter, Matrix, Scalar, Scope,
};
use crate::summary::SummaryParams;
use crate::tokens::{Provenance, TokenRole, TokenSequence};

#[derive(Clone, Copy, Debug, Default)]
pub struct CaptureOptions {
    /// Keep per-layer post-attention and post-FFN streams.
    pub activations: bool,
    /// Keep per-layer, per-head attention weight matrices.
    pub attention: bool,
}

#[derive(Clone, Debug)]
pub struct LayerActivations<T> {
    /// Residual stream after the attention sub-block.
    pub h_attn: Matrix<T>,
    /// Residual stream after the (routed) FFN sub-block.
    pub h_out: Matrix<T>,
}

/// Post-attention stream plus optional per-head weight capture.
pub type AttentionOutput<T> = (Matrix<T>, Option<Vec<Matrix<T>>>);

#[derive(Clone, Debug)]
pub struct PrefillOutput<T> {
    /// Logits at the final position.
    pub logits: Vec<T>,
    pub cache: KvCache<T>,
    /// Position the next decoded token will occupy; never reused after
    /// eviction.
    pub next_position: usize,
    /// Original positions removed by skip KV-cache eviction (empty unless SK).
    pub evicted_positions: Vec<usize>,
    /// Rows routed through the FFN per layer (the accountant's N2).
    pub ffn_rows: usize,
    pub activations: Option<Vec<LayerActivations<T>>>,
    /// [layer][head] attention weights over cached rows.
    pub attention_maps: Option<Vec<Vec<Matrix<T>>>>,
}

/// FFN delta (no residual): gated `(silu(xW1) . xWgate) W2` or plain
/// `relu(xW1) W2`, plus biases when configured. The caller sets the counter
/// scope.
pub fn ffn<T: Scalar>(x: &Matrix<T>, params: &FfnParams<T>, counter: &mut MacCounter) -> Result<Matrix<T>> {
    let mut a = matmul(x, &params.w_1, counter)?;
    if let Some(b1) = &params.b_1 {
        for i in 0..a.rows {
            for (v, b) in a.row_mut(i).iter_mut().zip(b1) {
                *v += *b;
            }
        }
    }
    match &params.w_gate {
        Some(wg) => {
            let gate = matmul(x, wg, counter)?;
            for (av, gv) in a.as_mut_slice().iter_mut().zip(gate.as_slice()) {
                // silu(a) * g
                let s = *av / (T::ONE + (-*av).exp());
                *av = s * *gv;
            }
        }
        None => {
            for v in a.as_mut_slice() {
                if *v < T::ZERO {
                    *v = T::ZERO;
                }
            }
        }
    }
    let mut out = matmul(&a, &params.w_2, counter)?;
    if let Some(b2) = &params.b_2 {
        for i in 0..out.rows {
            for (v, b) in out.row_mut(i).iter_mut().zip(b2) {
                *v += *b;
            }
        }
    }
    Ok(out)
}

/// First index of the maximum value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T> {
    pub cfg: ModelConfig,
    /// vocab x hidden.
    pub embed: Matrix<T>,
    /// hidden x vocab; the transpose of `embed` unless the head is untied.
    pub head: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Vec<T>,
    pub summary_former: SummaryParams<T>,
    pub summary_latter: SummaryParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed);
        let c = cfg.hidden;
        let embed: Matrix<T> = match cfg.init {
            WeightInit::Gaussian => gaussian_matrix(cfg.vocab, c, 0.02, &mut rng),
            WeightInit::Orthogonal => orthogonal_matrix(cfg.vocab, c, &mut rng),
        };
        let layers: Vec<LayerParams<T>> = (0..cfg.layers)
            .map(|_| LayerParams::init(cfg, &mut rng))
            .collect();
        let head = if cfg.untied_head {
            match cfg.init {
                WeightInit::Gaussian => gaussian_matrix(c, cfg.vocab, 0.02, &mut rng),
                WeightInit::Orthogonal => orthogonal_matrix(c, cfg.vocab, &mut rng),
            }
        } else {
            embed.transpose()
        };
        Ok(Model {
            cfg: cfg.clone(),
            embed,
            head,
            layers,
            final_gain: vec![T::ONE; c],
            summary_former: SummaryParams {
                w: gaussian_vec(c, 0.02, &mut rng),
            },
            summary_latter: SummaryParams {
                w: gaussian_vec(c, 0.02, &mut rng),
            },
        })
    }

    /// One attention sub-block over a batch of new rows: pre-norm, QKV
    /// projection, cache append, per-head masked scaled dot-product, output
    /// projection, residual add. Returns the post-attention stream and,
    /// optionally, the per-head attention weights.
    #[allow(clippy::too_many_arguments)]
    pub fn causal_attention(
        &self,
        x: &Matrix<T>,
        tags: &[KvTag],
        layer: usize,
        cache: &mut KvCache<T>,
        mask_extra: Option<&BTreeSet<usize>>,
        counter: &mut MacCounter,
        capture_weights: bool,
    ) -> Result<AttentionOutput<T>> {
        let cfg = &self.cfg;
        let params = &self.layers[layer].attn;
        let xn = rms_norm(x, &self.layers[layer].attn_gain)?;

        counter.enter(Scope::AttentionProj);
        let q = matmul(&xn, &params.w_q, counter)?;
        let k_new = matmul(&xn, &params.w_k, counter)?;
        let v_new = matmul(&xn, &params.w_v, counter)?;
        cache.append(layer, &k_new, &v_new, tags)?;

        let lk = &cache.layers[layer];
        let n = x.rows;
        let d_k = cfg.head_dim;
        let scale = T::from_f64(1.0 / (d_k as f64).sqrt());

        counter.enter(Scope::AttentionScore);
        let mut ctx: Matrix<T> = Matrix::zeros(n, cfg.hidden);
        let mut maps = if capture_weights { Some(Vec::new()) } else { None };
        for head in 0..cfg.n_heads {
            let kv_head = head / cfg.group_size();
            let q_h = col_block(&q, head * d_k, d_k);
            let k_h = col_block(&lk.k, kv_head * d_k, d_k);
            let v_h = col_block(&lk.v, kv_head * d_k, d_k);

            let mut scores = matmul(&q_h, &k_h.transpose(), counter)?;
            for i in 0..n {
                let qi_pos = tags[i].position;
                let row = scores.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    let t = &lk.tags[j];
                    let masked = t.position > qi_pos
                        || mask_extra.is_some_and(|mx| mx.contains(&t.position));
                    *s = if masked { T::neg_infinity() } else { *s * scale };
                }
            }
            let weights = softmax_rows(&scores)?;
            let ctx_h = matmul(&weights, &v_h, counter)?;
            for i in 0..n {
                let dst = &mut ctx.row_mut(i)[head * d_k..(head + 1) * d_k];
                dst.copy_from_slice(ctx_h.row(i));
            }
            if let Some(maps) = maps.as_mut() {
                maps.push(weights);
            }
        }

        counter.enter(Scope::AttentionProj);
        let o = matmul(&ctx, &params.w_o, counter)?;
        let mut h_attn = x.clone();
        for (a, b) in h_attn.as_mut_slice().iter_mut().zip(o.as_slice()) {
            *a += *b;
        }
        Ok((h_attn, maps))
    }

    /// Full forward pass over an assembled sequence. Returns final-position
    /// logits and the populated (and, under SK, pruned) cache.
    pub fn prefill(
        &self,
        seq: &TokenSequence<T>,
        schedule: &SkipSchedule,
        counter: &mut MacCounter,
        capture: &CaptureOptions,
    ) -> Result<PrefillOutput<T>> {
        seq.validate()?;
        schedule.validate()?;
        if seq.is_empty() {
            return Err(Error::EmptyInput("prefill"));
        }
        if seq.width() != self.cfg.hidden {
            return Err(Error::invalid(format!(
                "sequence width {} != model hidden {}",
                seq.width(),
                self.cfg.hidden
            )));
        }

        let tags: Vec<KvTag> = (0..seq.len())
            .map(|i| KvTag {
                position: seq.positions[i],
                role: seq.roles[i],
                provenance: seq.provenance[i],
            })
            .collect();
        let routing = schedule.ffn_routing(&seq.roles);
        let routed_idx: Vec<usize> = (0..seq.len()).filter(|&i| routing[i]).collect();

        let mut cache = KvCache::new(self.cfg.layers, self.cfg.kv_dim());
        let mut activations = capture.activations.then(Vec::new);
        let mut attention_maps = capture.attention.then(Vec::new);

        let mut h = seq.embeddings.clone();
        for layer in 0..self.cfg.layers {
            let (h_attn, maps) =
                self.causal_attention(&h, &tags, layer, &mut cache, None, counter, capture.attention)?;
            if let Some(all) = attention_maps.as_mut() {
                all.push(maps.unwrap_or_default());
            }

            let xn = rms_norm(&h_attn, &self.layers[layer].ffn_gain)?;
            counter.enter(Scope::Ffn);
            let sub = xn.gather_rows(&routed_idx);
            let delta = ffn(&sub, &self.layers[layer].ffn, counter)?;
            let mut h_out = h_attn.clone();
            for (ri, &i) in routed_idx.iter().enumerate() {
                for (a, b) in h_out.row_mut(i).iter_mut().zip(delta.row(ri)) {
                    *a += *b;
                }
            }
            if let Some(acts) = activations.as_mut() {
                acts.push(LayerActivations {
                    h_attn,
                    h_out: h_out.clone(),
                });
            }
            h = h_out;
        }

        let logits = self.project_logits(h.row(h.rows - 1), counter)?;
        let next_position = seq.positions[seq.len() - 1] + 1;
        let evicted_positions = if schedule.sk {
            cache.evict(|tag| schedule.evicts(tag))
        } else {
            Vec::new()
        };

        Ok(PrefillOutput {
            logits,
            cache,
            next_position,
            evicted_positions,
            ffn_rows: routed_idx.len(),
            activations,
            attention_maps,
        })
    }

    /// Final RMS norm plus output head for one residual row.
    fn project_logits(&self, row: &[T], counter: &mut MacCounter) -> Result<Vec<T>> {
        let last = Matrix::from_vec(1, self.cfg.hidden, row.to_vec());
        let xf = rms_norm(&last, &self.final_gain)?;
        counter.enter(Scope::Other);
        let logits = matmul(&xf, &self.head, counter)?;
        Ok(logits.row(0).to_vec())
    }

    /// One decoded token through every layer. Masked or evicted cache rows
    /// are skipped outright, so the arithmetic stream is identical whether a
    /// row was pruned from the cache or fed through `mask_extra`.
    pub fn decode_step(
        &self,
        embedding: &[T],
        position: usize,
        cache: &mut KvCache<T>,
        mask_extra: &BTreeSet<usize>,
        counter: &mut MacCounter,
    ) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let d_k = cfg.head_dim;
        let scale = T::from_f64(1.0 / (d_k as f64).sqrt());
        let tag = KvTag {
            position,
            role: TokenRole::Text,
            provenance: Provenance::Text,
        };

        let mut h = Matrix::from_vec(1, cfg.hidden, embedding.to_vec());
        for layer in 0..cfg.layers {
            let params = &self.layers[layer];
            let xn = rms_norm(&h, &params.attn_gain)?;
            counter.enter(Scope::AttentionProj);
            let q = matmul(&xn, &params.attn.w_q, counter)?;
            let k_new = matmul(&xn, &params.attn.w_k, counter)?;
            let v_new = matmul(&xn, &params.attn.w_v, counter)?;
            cache.append(layer, &k_new, &v_new, std::slice::from_ref(&tag))?;

            let lk = &cache.layers[layer];
            counter.enter(Scope::AttentionScore);
            let mut ctx = vec![T::ZERO; cfg.hidden];
            let mut attended_total = 0u64;
            for head in 0..cfg.n_heads {
                let kv_head = head / cfg.group_size();
                let q_h = &q.row(0)[head * d_k..(head + 1) * d_k];
                let mut scores: Vec<T> = Vec::new();
                let mut visible: Vec<usize> = Vec::new();
                for (j, t) in lk.tags.iter().enumerate() {
                    if t.position > position || mask_extra.contains(&t.position) {
                        continue;
                    }
                    let k_row = &lk.k.row(j)[kv_head * d_k..(kv_head + 1) * d_k];
                    scores.push(dot(q_h, k_row) * scale);
                    visible.push(j);
                }
                crate::numerics::softmax_row_in_place(&mut scores)?;
                let ctx_h = &mut ctx[head * d_k..(head + 1) * d_k];
                for (w, &j) in scores.iter().zip(&visible) {
                    let v_row = &lk.v.row(j)[kv_head * d_k..(kv_head + 1) * d_k];
                    for (c, &v) in ctx_h.iter_mut().zip(v_row) {
                        *c += *w * v;
                    }
                }
                attended_total += visible.len() as u64;
            }
            // Score dots plus value accumulation, d_k MACs each.
            counter.add(2 * attended_total * d_k as u64);

            counter.enter(Scope::AttentionProj);
            let ctx_m = Matrix::from_vec(1, cfg.hidden, ctx);
            let o = matmul(&ctx_m, &params.attn.w_o, counter)?;
            let mut h_attn = h.clone();
            for (a, b) in h_attn.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *a += *b;
            }

            let xn2 = rms_norm(&h_attn, &params.ffn_gain)?;
            counter.enter(Scope::Ffn);
            let delta = ffn(&xn2, &params.ffn, counter)?;
            let mut h_out = h_attn;
            for (a, b) in h_out.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *a += *b;
            }
            h = h_out;
        }
        self.project_logits(h.row(0), counter)
    }

    /// Greedy argmax decoding for `steps` tokens, starting from the prefill
    /// logits. Ties go to the lowest token id. `mask_extra` positions are
    /// invisible to every decoded query.
    pub fn greedy_decode(
        &self,
        state: &mut PrefillOutput<T>,
        steps: usize,
        mask_extra: &BTreeSet<usize>,
        counter: &mut MacCounter,
    ) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(steps);
        for _ in 0..steps {
            let id = argmax(&state.logits);
            ids.push(id);
            let embedding = self.embed.row(id).to_vec();
            state.logits =
                self.decode_step(&embedding, state.next_position, &mut state.cache, mask_extra, counter)?;
            state.next_position += 1;
        }
        Ok(ids)
    }
}

fn col_block<T: Scalar>(m: &Matrix<T>, start: usize, width: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows, width);
    for i in 0..m.rows {
        out.row_mut(i).copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}
