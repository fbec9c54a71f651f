//! Independent oracles shared by the integration and acceptance suites.
//! Everything here recomputes expected values from first principles in f64,
//! without touching the code paths under test.

#![allow(dead_code)]

use tokenskip_core::model::{ffn, KvCache, KvTag, Model, SkipSchedule};
use tokenskip_core::numerics::{matmul, rms_norm, softmax_rows, MacCounter, Matrix, Scalar};
use tokenskip_core::tokens::TokenSequence;

/// Singular values via one-sided Jacobi rotations on the columns, descending.
pub fn jacobi_singular_values(a: &Matrix<f64>) -> Vec<f64> {
    let m = a.rows;
    let n = a.cols;
    // Work on columns of a (as vectors of length m).
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let eps = 1e-14;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= eps * (alpha * beta).sqrt().max(1e-300) {
                    continue;
                }
                off += gamma.abs();
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let vp = cols[p][i];
                    let vq = cols[q][i];
                    cols[p][i] = c * vp - s * vq;
                    cols[q][i] = s * vp + c * vq;
                }
            }
        }
        if off < 1e-30 {
            break;
        }
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Literal three-step merge in f64: mean pairwise cosine (self excluded),
/// keep the k lowest (ties by position), fold the rest into the most-similar
/// kept token (ties by lower kept position), group arithmetic mean.
pub struct MergeOracleResult {
    pub kept: Vec<usize>,
    pub merged: Vec<Vec<f64>>,
}

pub fn merge_oracle(rows: &[Vec<f64>], positions: &[usize], k: usize) -> MergeOracleResult {
    let n = rows.len();
    assert!(k >= 1 && k <= n);
    if k == n {
        return MergeOracleResult {
            kept: (0..n).collect(),
            merged: rows.to_vec(),
        };
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (norm(a) * norm(b))
    };
    let mut mean_sim = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if i != j {
                acc += cos(&rows[i], &rows[j]);
            }
        }
        mean_sim[i] = acc / (n - 1) as f64;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        mean_sim[a]
            .partial_cmp(&mean_sim[b])
            .unwrap()
            .then(positions[a].cmp(&positions[b]))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();

    let mut groups: Vec<Vec<usize>> = kept.iter().map(|&i| vec![i]).collect();
    for i in 0..n {
        if kept.contains(&i) {
            continue;
        }
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (gi, &kj) in kept.iter().enumerate() {
            let s = cos(&rows[i], &rows[kj]);
            if s > best_sim {
                best_sim = s;
                best = gi;
            }
        }
        groups[best].push(i);
    }
    let width = rows[0].len();
    let merged: Vec<Vec<f64>> = groups
        .iter()
        .map(|group| {
            let mut acc = vec![0.0f64; width];
            for &i in group {
                for (a, &v) in acc.iter_mut().zip(&rows[i]) {
                    *a += v;
                }
            }
            acc.iter().map(|v| v / group.len() as f64).collect()
        })
        .collect();
    MergeOracleResult { kept, merged }
}

/// Straight-line dense decoder forward: no routing, no schedule machinery.
/// Built from the same weights and elementary ops so the dense-degeneration
/// check can demand bitwise equality.
pub fn dense_forward_oracle<T: Scalar>(model: &Model<T>, seq: &TokenSequence<T>) -> Vec<T> {
    let cfg = &model.cfg;
    let n = seq.len();
    let d_k = cfg.head_dim;
    let scale = T::from_f64(1.0 / (d_k as f64).sqrt());
    let mut scratch = MacCounter::new();

    let mut h = seq.embeddings.clone();
    for layer in &model.layers {
        let xn = rms_norm(&h, &layer.attn_gain).unwrap();
        let q = matmul(&xn, &layer.attn.w_q, &mut scratch).unwrap();
        let k = matmul(&xn, &layer.attn.w_k, &mut scratch).unwrap();
        let v = matmul(&xn, &layer.attn.w_v, &mut scratch).unwrap();

        let mut ctx: Matrix<T> = Matrix::zeros(n, cfg.hidden);
        for head in 0..cfg.n_heads {
            let kv_head = head / (cfg.n_heads / cfg.n_kv_heads);
            let take = |m: &Matrix<T>, start: usize| {
                let mut out = Matrix::zeros(m.rows, d_k);
                for i in 0..m.rows {
                    out.row_mut(i).copy_from_slice(&m.row(i)[start..start + d_k]);
                }
                out
            };
            let q_h = take(&q, head * d_k);
            let k_h = take(&k, kv_head * d_k);
            let v_h = take(&v, kv_head * d_k);
            let mut scores = matmul(&q_h, &k_h.transpose(), &mut scratch).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let s = scores.get(i, j);
                    scores.set(
                        i,
                        j,
                        if seq.positions[j] > seq.positions[i] {
                            T::neg_infinity()
                        } else {
                            s * scale
                        },
                    );
                }
            }
            let weights = softmax_rows(&scores).unwrap();
            let ctx_h = matmul(&weights, &v_h, &mut scratch).unwrap();
            for i in 0..n {
                ctx.row_mut(i)[head * d_k..(head + 1) * d_k].copy_from_slice(ctx_h.row(i));
            }
        }
        let o = matmul(&ctx, &layer.attn.w_o, &mut scratch).unwrap();
        let mut h_attn = h.clone();
        for (a, b) in h_attn.as_mut_slice().iter_mut().zip(o.as_slice()) {
            *a += *b;
        }

        let xn2 = rms_norm(&h_attn, &layer.ffn_gain).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let sub = xn2.gather_rows(&all);
        let delta = ffn(&sub, &layer.ffn, &mut scratch).unwrap();
        let mut h_out = h_attn.clone();
        for i in 0..n {
            for (a, b) in h_out.row_mut(i).iter_mut().zip(delta.row(i)) {
                *a += *b;
            }
        }
        h = h_out;
    }
    let last = Matrix::from_vec(1, cfg.hidden, h.row(n - 1).to_vec());
    let xf = rms_norm(&last, &model.final_gain).unwrap();
    let logits = matmul(&xf, &model.head, &mut scratch).unwrap();
    logits.row(0).to_vec()
}

/// Full recomputation of the next-token logits without any cache: prefill
/// over the original sequence extended with the decoded ids as text tokens.
pub fn recompute_logits_no_cache<T: Scalar>(
    model: &Model<T>,
    seq: &TokenSequence<T>,
    decoded: &[usize],
    schedule: &SkipSchedule,
) -> Vec<T> {
    use tokenskip_core::model::CaptureOptions;
    use tokenskip_core::tokens::{Provenance, TokenRole};

    let mut extended = seq.clone();
    let base = seq.positions.last().copied().map_or(0, |p| p + 1);
    for (offset, &id) in decoded.iter().enumerate() {
        extended.embeddings.push_row(model.embed.row(id));
        extended.roles.push(TokenRole::Text);
        extended.provenance.push(Provenance::Text);
        extended.positions.push(base + offset);
    }
    let mut counter = MacCounter::new();
    let out = model
        .prefill(&extended, schedule, &mut counter, &CaptureOptions::default())
        .unwrap();
    out.logits
}

/// Structural filter: what the cache should look like after eviction.
pub fn filtered_cache<T: Scalar>(cache: &KvCache<T>, evicts: impl Fn(&KvTag) -> bool) -> KvCache<T> {
    let mut out = cache.clone();
    out.evict(|t| evicts(t));
    out
}

/// Random sequence with retained, skipped (two local scales), and text rows.
pub fn random_mixed_seq<T: Scalar>(n_retained: usize, n_skipped: usize, n_text: usize, width: usize, seed: u64) -> TokenSequence<T> {
    use tokenskip_core::numerics::{gaussian_matrix, seeded_rng};
    use tokenskip_core::tokens::{Provenance, TokenRole};

    let n = n_retained + n_skipped + n_text;
    let mut rng = seeded_rng(seed);
    let embeddings: Matrix<T> = gaussian_matrix(n, width, 1.0, &mut rng);
    let mut roles = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        if i < n_retained {
            roles.push(TokenRole::RetainedVisual);
            provenance.push(Provenance::Global);
        } else if i < n_retained + n_skipped {
            roles.push(TokenRole::SkippedVisual);
            provenance.push(Provenance::Local(if i % 2 == 0 { 1 } else { 4 }));
        } else {
            roles.push(TokenRole::Text);
            provenance.push(Provenance::Text);
        }
    }
    TokenSequence {
        embeddings,
        roles,
        provenance,
        positions: (0..n).collect(),
    }
}
