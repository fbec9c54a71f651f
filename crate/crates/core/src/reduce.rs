//! Retained/skipped token selection, redundancy-driven token merging, and
//! similarity-density statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, vec_norm, Matrix, Scalar};
use crate::tokens::{Provenance, TokenRole, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum SelectionConfig {
    /// Global provenance tokens are retained, local ones skipped.
    Provenance,
    /// Retain the n tokens most cosine-similar to the Cls token.
    ClsTopN { n_retain: usize },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Number of distinctive tokens kept.
    pub k: usize,
}

/// Statistics from a merge application, consumed by the error analysis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeStats {
    /// Mean cosine similarity between each merged-away token and the kept
    /// token it was folded into. 1.0 when nothing was merged.
    pub theta: f64,
    /// Indices (into the merge input) of the kept tokens, in original order.
    pub kept_indices: Vec<usize>,
    /// For each non-kept input index, the input index of its kept target.
    pub assignments: Vec<(usize, usize)>,
}

/// Partition the visual tokens of `seq` into retained and skipped
/// subsequences. The Cls token, when present, is only a reference for
/// `ClsTopN` scoring and appears in neither output; text tokens pass through
/// neither. Relative order is preserved on both sides.
pub fn select_tokens<T: Scalar>(
    seq: &TokenSequence<T>,
    cfg: &SelectionConfig,
) -> Result<(TokenSequence<T>, TokenSequence<T>)> {
    let visual: Vec<usize> = (0..seq.len())
        .filter(|&i| matches!(seq.provenance[i], Provenance::Global | Provenance::Local(_)))
        .collect();

    let retained_idx: Vec<usize>;
    let skipped_idx: Vec<usize>;
    match cfg {
        SelectionConfig::Provenance => {
            retained_idx = visual
                .iter()
                .copied()
                .filter(|&i| seq.provenance[i] == Provenance::Global)
                .collect();
            skipped_idx = visual
                .iter()
                .copied()
                .filter(|&i| matches!(seq.provenance[i], Provenance::Local(_)))
                .collect();
        }
        SelectionConfig::ClsTopN { n_retain } => {
            let cls_row = seq.index_of_cls().ok_or(Error::MissingCls)?;
            if *n_retain > visual.len() {
                return Err(Error::invalid(format!(
                    "n_retain {} exceeds visual token count {}",
                    n_retain,
                    visual.len()
                )));
            }
            let cls = seq.embeddings.row(cls_row);
            let mut scored: Vec<(usize, f64)> = visual
                .iter()
                .map(|&i| Ok((i, cosine(seq.embeddings.row(i), cls, i)?)))
                .collect::<Result<_>>()?;
            // Descending similarity, ties to the lower position index.
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then(seq.positions[a.0].cmp(&seq.positions[b.0]))
            });
            let mut keep: Vec<usize> = scored[..*n_retain].iter().map(|s| s.0).collect();
            keep.sort_unstable();
            retained_idx = keep.clone();
            skipped_idx = visual.iter().copied().filter(|i| !keep.contains(i)).collect();
        }
    }

    let mut retained = seq.subsequence(&retained_idx);
    retained.roles.iter_mut().for_each(|r| *r = TokenRole::RetainedVisual);
    let mut skipped = seq.subsequence(&skipped_idx);
    skipped.roles.iter_mut().for_each(|r| *r = TokenRole::SkippedVisual);
    Ok((retained, skipped))
}

/// Reduce `tokens` to `cfg.k` rows in three steps: score each token by its
/// mean cosine similarity to the others (self excluded), keep the k least
/// similar (ties to the lower position index), then fold every remaining
/// token into its most-similar kept token by arithmetic mean over the group.
/// Assignment is against the original kept embeddings, so the result does
/// not depend on fold order.
pub fn merge_tokens<T: Scalar>(
    tokens: &TokenSequence<T>,
    cfg: &MergeConfig,
) -> Result<TokenSequence<T>> {
    merge_tokens_with_stats(tokens, cfg).map(|(seq, _)| seq)
}

pub fn merge_tokens_with_stats<T: Scalar>(
    tokens: &TokenSequence<T>,
    cfg: &MergeConfig,
) -> Result<(TokenSequence<T>, MergeStats)> {
    let n = tokens.len();
    let k = cfg.k;
    if k < 1 || k > n {
        return Err(Error::invalid(format!("merge k {k} out of range 1..={n}")));
    }
    if k == n {
        let kept: Vec<usize> = (0..n).collect();
        return Ok((
            tokens.clone(),
            MergeStats {
                theta: 1.0,
                kept_indices: kept,
                assignments: Vec::new(),
            },
        ));
    }

    let sims = pairwise_cosines(&tokens.embeddings)?;

    // Mean similarity to the other n-1 tokens.
    let mut order: Vec<usize> = (0..n).collect();
    let mean_sim: Vec<f64> = (0..n)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    s += sims[i][j];
                }
            }
            s / (n - 1) as f64
        })
        .collect();
    order.sort_by(|&a, &b| {
        mean_sim[a]
            .partial_cmp(&mean_sim[b])
            .unwrap()
            .then(tokens.positions[a].cmp(&tokens.positions[b]))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable(); // original relative order

    // Fold the rest into their most-similar kept token.
    let mut groups: Vec<Vec<usize>> = kept.iter().map(|&i| vec![i]).collect();
    let mut assignments = Vec::new();
    let mut theta_sum = 0.0;
    for i in 0..n {
        if kept.contains(&i) {
            continue;
        }
        let mut best = 0usize;
        for (gi, &kj) in kept.iter().enumerate() {
            if sims[i][kj] > sims[i][kept[best]] {
                best = gi;
            }
        }
        groups[best].push(i);
        assignments.push((i, kept[best]));
        theta_sum += sims[i][kept[best]];
    }
    let theta = if assignments.is_empty() {
        1.0
    } else {
        theta_sum / assignments.len() as f64
    };

    let width = tokens.width();
    let mut embeddings: Matrix<T> = Matrix::zeros(0, width);
    for group in &groups {
        let mut mean = vec![T::ZERO; width];
        for &m in group {
            for (acc, &v) in mean.iter_mut().zip(tokens.embeddings.row(m)) {
                *acc += v;
            }
        }
        let inv = T::from_f64(1.0 / group.len() as f64);
        mean.iter_mut().for_each(|v| *v *= inv);
        embeddings.push_row(&mean);
    }

    let seq = TokenSequence {
        embeddings,
        roles: kept.iter().map(|&i| tokens.roles[i]).collect(),
        provenance: kept.iter().map(|&i| tokens.provenance[i]).collect(),
        positions: kept.iter().map(|&i| tokens.positions[i]).collect(),
    };
    Ok((
        seq,
        MergeStats {
            theta,
            kept_indices: kept,
            assignments,
        },
    ))
}

/// Per-provenance-group similarity statistics: every pairwise cosine (i < j)
/// histogrammed over [-1, 1] with 50 bins, plus the group mean. Groups with
/// fewer than two tokens are skipped and listed in `skipped_groups`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityDensity {
    pub groups: Vec<GroupDensity>,
    pub skipped_groups: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupDensity {
    pub group: String,
    pub count: usize,
    pub mean: f64,
    /// 50 bins spanning [-1, 1].
    pub histogram: Vec<u64>,
}

pub const DENSITY_BINS: usize = 50;

pub fn similarity_density<T: Scalar>(tokens: &TokenSequence<T>) -> Result<SimilarityDensity> {
    let mut by_group: BTreeMap<Provenance, Vec<usize>> = BTreeMap::new();
    for i in 0..tokens.len() {
        by_group.entry(tokens.provenance[i]).or_default().push(i);
    }

    let mut groups = Vec::new();
    let mut skipped_groups = Vec::new();
    for (prov, indices) in by_group {
        if indices.len() < 2 {
            skipped_groups.push(prov.to_string());
            continue;
        }
        let sub = tokens.embeddings.gather_rows(&indices);
        let sims = pairwise_cosines(&sub)?;
        let mut histogram = vec![0u64; DENSITY_BINS];
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..indices.len() {
            for j in (i + 1)..indices.len() {
                let s = sims[i][j];
                sum += s;
                count += 1;
                let bin = (((s + 1.0) / 2.0 * DENSITY_BINS as f64) as usize).min(DENSITY_BINS - 1);
                histogram[bin] += 1;
            }
        }
        groups.push(GroupDensity {
            group: prov.to_string(),
            count: indices.len(),
            mean: sum / count as f64,
            histogram,
        });
    }
    Ok(SimilarityDensity {
        groups,
        skipped_groups,
    })
}

impl SimilarityDensity {
    /// CSV rows: group,bin_lo,bin_hi,count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,bin_lo,bin_hi,count\n");
        for g in &self.groups {
            for (b, &c) in g.histogram.iter().enumerate() {
                let lo = -1.0 + 2.0 * b as f64 / DENSITY_BINS as f64;
                let hi = -1.0 + 2.0 * (b + 1) as f64 / DENSITY_BINS as f64;
                out.push_str(&format!("{},{:.4},{:.4},{}\n", g.group, lo, hi, c));
            }
        }
        out
    }
}

/// Mean pairwise cosine similarity over all i < j rows.
pub fn mean_pairwise_cosine<T: Scalar>(m: &Matrix<T>) -> Result<f64> {
    if m.rows < 2 {
        return Err(Error::EmptyInput("mean_pairwise_cosine needs >= 2 rows"));
    }
    let sims = pairwise_cosines(m)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m.rows {
        for j in (i + 1)..m.rows {
            sum += sims[i][j];
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Full pairwise cosine matrix in f64. Errors on any zero-norm row.
pub fn pairwise_cosines<T: Scalar>(m: &Matrix<T>) -> Result<Vec<Vec<f64>>> {
    let n = m.rows;
    let rows64: Vec<Vec<f64>> = (0..n)
        .map(|i| m.row(i).iter().map(|v| v.to_f64()).collect())
        .collect();
    let norms: Vec<f64> = rows64.iter().map(|r| vec_norm(r)).collect();
    if let Some(idx) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormRow { index: idx });
    }
    let indices: Vec<usize> = (0..n).collect();
    let sims: Vec<Vec<f64>> = crate::par::map_collect(&indices, |&i| {
        (0..n)
            .map(|j| {
                if i == j {
                    1.0
                } else {
                    dot(&rows64[i], &rows64[j]) / (norms[i] * norms[j])
                }
            })
            .collect()
    });
    Ok(sims)
}

fn cosine<T: Scalar>(a: &[T], b: &[T], index: usize) -> Result<f64> {
    let a64: Vec<f64> = a.iter().map(|v| v.to_f64()).collect();
    let b64: Vec<f64> = b.iter().map(|v| v.to_f64()).collect();
    let na = vec_norm(&a64);
    let nb = vec_norm(&b64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormRow { index });
    }
    Ok(dot(&a64, &b64) / (na * nb))
}
