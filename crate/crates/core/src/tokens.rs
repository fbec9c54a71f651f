//! Token sequences with roles and provenance, a deterministic mock vision
//! encoder, and sequence assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, seeded_rng, Matrix, Scalar};

/// What a token is in the skip schedule's eyes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    RetainedVisual,
    SkippedVisual,
    SummaryFormer,
    SummaryLatter,
    Text,
}

/// Where a token came from. Local tokens carry their window scale; smaller
/// scales are finer-grained (and, in the mock encoder, more redundant).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Global,
    Local(u32),
    Cls,
    Text,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Global => write!(f, "global"),
            Provenance::Local(s) => write!(f, "local_{s}"),
            Provenance::Cls => write!(f, "cls"),
            Provenance::Text => write!(f, "text"),
        }
    }
}

/// A run of tokens: embedding rows plus per-token role, provenance, and the
/// original position index. Positions are strictly increasing and survive
/// selection, merging, and cache pruning unchanged.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TokenSequence<T> {
    pub embeddings: Matrix<T>,
    pub roles: Vec<TokenRole>,
    pub provenance: Vec<Provenance>,
    pub positions: Vec<usize>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn empty(width: usize) -> Self {
        TokenSequence {
            embeddings: Matrix::zeros(0, width),
            roles: Vec::new(),
            provenance: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols
    }

    /// Checks the structural invariants: aligned lengths, strictly increasing
    /// positions, at most one Cls token, finite embeddings.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.embeddings.rows != n || self.provenance.len() != n || self.positions.len() != n {
            return Err(Error::invalid(format!(
                "token sequence field lengths disagree: {} embeddings, {} roles, {} provenance, {} positions",
                self.embeddings.rows,
                n,
                self.provenance.len(),
                self.positions.len()
            )));
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("token positions not strictly increasing"));
        }
        let cls = self.provenance.iter().filter(|p| **p == Provenance::Cls).count();
        if cls > 1 {
            return Err(Error::invalid(format!("{cls} Cls tokens; at most one allowed")));
        }
        if !self.embeddings.all_finite() {
            return Err(Error::invalid("non-finite embedding entries"));
        }
        Ok(())
    }

    /// Rows whose role matches, in order.
    pub fn indices_with_role(&self, role: TokenRole) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Subsequence of the rows at `indices`, preserving their order.
    pub fn subsequence(&self, indices: &[usize]) -> TokenSequence<T> {
        TokenSequence {
            embeddings: self.embeddings.gather_rows(indices),
            roles: indices.iter().map(|&i| self.roles[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
        }
    }

    pub fn index_of_cls(&self) -> Option<usize> {
        self.provenance.iter().position(|p| *p == Provenance::Cls)
    }

    /// Elementwise conversion of the embeddings to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TokenSequence<U> {
        TokenSequence {
            embeddings: self.embeddings.cast(),
            roles: self.roles.clone(),
            provenance: self.provenance.clone(),
            positions: self.positions.clone(),
        }
    }
}

/// Configuration for the mock vision encoder. Local tokens are drawn near a
/// bank of cluster centroids with per-scale noise proportional to the window
/// scale, so finer scales come out more mutually similar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MockEncoderConfig {
    pub n_global: usize,
    pub n_local: usize,
    /// Window scales for local tokens, e.g. [1, 4]; n_local splits across
    /// them as evenly as possible.
    pub window_scales: Vec<u32>,
    /// Embedding width.
    pub dim: usize,
    pub cluster_count: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl MockEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_global + self.n_local < 1 {
            return Err(Error::invalid("encoder must emit at least one token"));
        }
        if self.cluster_count < 1 {
            return Err(Error::invalid("cluster_count must be >= 1"));
        }
        if self.n_local > 0 && self.window_scales.is_empty() {
            return Err(Error::invalid("local tokens requested but no window scales given"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        Ok(())
    }
}

/// Deterministically generate a visual token stream: one Cls token (the
/// centroid mean), `n_global` free-standing global tokens, then local tokens
/// grouped by window scale. Local noise grows with the scale value, so the
/// smallest scale has the highest mean pairwise similarity.
pub fn mock_encode<T: Scalar>(cfg: &MockEncoderConfig) -> Result<TokenSequence<T>> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let dim = cfg.dim;

    let centroids: Vec<Vec<f64>> = (0..cfg.cluster_count)
        .map(|_| (0..dim).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let cls: Vec<f64> = (0..dim)
        .map(|j| centroids.iter().map(|c| c[j]).sum::<f64>() / cfg.cluster_count as f64)
        .collect();

    let mut embeddings: Matrix<T> = Matrix::zeros(0, dim);
    let mut roles = Vec::new();
    let mut provenance = Vec::new();

    let cls_row: Vec<T> = cls.iter().map(|&v| T::from_f64(v)).collect();
    embeddings.push_row(&cls_row);
    roles.push(TokenRole::RetainedVisual);
    provenance.push(Provenance::Cls);

    for _ in 0..cfg.n_global {
        let row: Vec<T> = (0..dim).map(|_| T::from_f64(gaussian(&mut rng))).collect();
        embeddings.push_row(&row);
        roles.push(TokenRole::RetainedVisual);
        provenance.push(Provenance::Global);
    }

    // Split local tokens across scales; earlier scales absorb the remainder.
    let n_scales = cfg.window_scales.len().max(1);
    let base = if cfg.n_local > 0 { cfg.n_local / n_scales } else { 0 };
    let rem = if cfg.n_local > 0 { cfg.n_local % n_scales } else { 0 };
    for (si, &scale) in cfg.window_scales.iter().enumerate() {
        let count = base + usize::from(si < rem);
        for t in 0..count {
            let centroid = &centroids[t % cfg.cluster_count];
            let sigma = cfg.noise_scale * scale as f64 / (dim as f64).sqrt();
            let row: Vec<T> = centroid
                .iter()
                .map(|&c| T::from_f64(c + sigma * gaussian(&mut rng)))
                .collect();
            embeddings.push_row(&row);
            roles.push(TokenRole::RetainedVisual);
            provenance.push(Provenance::Local(scale));
        }
    }

    let n = roles.len();
    let seq = TokenSequence {
        embeddings,
        roles,
        provenance,
        positions: (0..n).collect(),
    };
    seq.validate()?;
    Ok(seq)
}

/// Synthetic text tokens: ids drawn uniformly from the vocabulary and
/// embeddings looked up from the given table, so decode oracles can replay
/// them exactly.
pub fn synthetic_text<T: Scalar>(
    n: usize,
    embed_table: &Matrix<T>,
    seed: u64,
) -> (TokenSequence<T>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let vocab = embed_table.rows;
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let mut embeddings = Matrix::zeros(0, embed_table.cols);
    for &id in &ids {
        embeddings.push_row(embed_table.row(id));
    }
    let seq = TokenSequence {
        embeddings,
        roles: vec![TokenRole::Text; n],
        provenance: vec![Provenance::Text; n],
        positions: (0..n).collect(),
    };
    (seq, ids)
}

/// Place the pieces in their final order: retained tokens, the former
/// summary, the (possibly merged) skipped tokens, the latter summary, then
/// text. Positions are reassigned 0..n-1 in that order.
pub fn assemble_sequence<T: Scalar>(
    retained: &TokenSequence<T>,
    skipped: &TokenSequence<T>,
    s_former: Option<&[T]>,
    s_latter: Option<&[T]>,
    text: &TokenSequence<T>,
) -> Result<TokenSequence<T>> {
    let width = retained.width();
    for (name, w) in [
        ("skipped", skipped.width()),
        ("former summary", s_former.map_or(width, |s| s.len())),
        ("latter summary", s_latter.map_or(width, |s| s.len())),
        ("text", text.width()),
    ] {
        if w != width {
            return Err(Error::invalid(format!(
                "assemble_sequence: {name} width {w} != retained width {width}"
            )));
        }
    }

    let mut embeddings: Matrix<T> = Matrix::zeros(0, width);
    let mut roles = Vec::new();
    let mut provenance = Vec::new();

    embeddings.push_rows(&retained.embeddings);
    roles.extend(retained.roles.iter().map(|_| TokenRole::RetainedVisual));
    provenance.extend_from_slice(&retained.provenance);

    if let Some(s) = s_former {
        embeddings.push_row(s);
        roles.push(TokenRole::SummaryFormer);
        provenance.push(Provenance::Global);
    }

    embeddings.push_rows(&skipped.embeddings);
    roles.extend(skipped.roles.iter().map(|_| TokenRole::SkippedVisual));
    provenance.extend_from_slice(&skipped.provenance);

    if let Some(s) = s_latter {
        embeddings.push_row(s);
        roles.push(TokenRole::SummaryLatter);
        provenance.push(Provenance::Global);
    }

    embeddings.push_rows(&text.embeddings);
    roles.extend(text.roles.iter().map(|_| TokenRole::Text));
    provenance.extend_from_slice(&text.provenance);

    let n = roles.len();
    let seq = TokenSequence {
        embeddings,
        roles,
        provenance,
        positions: (0..n).collect(),
    };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduce::mean_pairwise_cosine;

    fn cfg(seed: u64) -> MockEncoderConfig {
        MockEncoderConfig {
            n_global: 4,
            n_local: 12,
            window_scales: vec![1, 4],
            dim: 8,
            cluster_count: 3,
            noise_scale: 0.1,
            seed,
        }
    }

    #[test]
    fn zero_noise_single_cluster_collapses_locals() {
        let c = MockEncoderConfig {
            n_global: 1,
            n_local: 6,
            window_scales: vec![1],
            dim: 8,
            cluster_count: 1,
            noise_scale: 0.0,
            seed: 3,
        };
        let seq: TokenSequence<f64> = mock_encode(&c).unwrap();
        let locals: Vec<usize> = (0..seq.len())
            .filter(|&i| matches!(seq.provenance[i], Provenance::Local(_)))
            .collect();
        let first = seq.embeddings.row(locals[0]).to_vec();
        for &i in &locals[1..] {
            assert_eq!(seq.embeddings.row(i), &first[..]);
        }
        let sub = seq.subsequence(&locals);
        let mean = mean_pairwise_cosine(&sub.embeddings).unwrap();
        assert!((mean - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn encode_is_deterministic() {
        let a: TokenSequence<f32> = mock_encode(&cfg(77)).unwrap();
        let b: TokenSequence<f32> = mock_encode(&cfg(77)).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.roles, b.roles);
        assert_eq!(a.positions, b.positions);
    }

    #[test]
    fn smaller_scale_is_more_similar() {
        for noise in [0.1, 0.5] {
            let mut c = cfg(11);
            c.n_local = 20;
            c.noise_scale = noise;
            let seq: TokenSequence<f64> = mock_encode(&c).unwrap();
            let small: Vec<usize> = (0..seq.len())
                .filter(|&i| seq.provenance[i] == Provenance::Local(1))
                .collect();
            let large: Vec<usize> = (0..seq.len())
                .filter(|&i| seq.provenance[i] == Provenance::Local(4))
                .collect();
            let m_small = mean_pairwise_cosine(&seq.subsequence(&small).embeddings).unwrap();
            let m_large = mean_pairwise_cosine(&seq.subsequence(&large).embeddings).unwrap();
            assert!(
                m_small > m_large,
                "noise {noise}: small-scale mean {m_small} <= large-scale mean {m_large}"
            );
        }
    }

    #[test]
    fn assemble_layout_and_roles() {
        let retained = TokenSequence {
            embeddings: Matrix::from_rows(&[vec![1.0f64, 0.0], vec![2.0, 0.0]]),
            roles: vec![TokenRole::RetainedVisual; 2],
            provenance: vec![Provenance::Global; 2],
            positions: vec![0, 1],
        };
        let skipped = TokenSequence {
            embeddings: Matrix::from_rows(&[vec![3.0f64, 0.0], vec![4.0, 0.0], vec![5.0, 0.0]]),
            roles: vec![TokenRole::SkippedVisual; 3],
            provenance: vec![Provenance::Local(1); 3],
            positions: vec![2, 3, 4],
        };
        let text = TokenSequence {
            embeddings: Matrix::from_rows(&[vec![9.0f64, 0.0]]),
            roles: vec![TokenRole::Text],
            provenance: vec![Provenance::Text],
            positions: vec![0],
        };
        let sf = vec![6.0f64, 0.0];
        let sl = vec![7.0f64, 0.0];
        let out = assemble_sequence(&retained, &skipped, Some(&sf), Some(&sl), &text).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(
            out.roles,
            vec![
                TokenRole::RetainedVisual,
                TokenRole::RetainedVisual,
                TokenRole::SummaryFormer,
                TokenRole::SkippedVisual,
                TokenRole::SkippedVisual,
                TokenRole::SkippedVisual,
                TokenRole::SummaryLatter,
                TokenRole::Text,
            ]
        );
        assert_eq!(out.positions, (0..8).collect::<Vec<_>>());
        // Slicing by role recovers the inputs exactly.
        let r = out.subsequence(&out.indices_with_role(TokenRole::RetainedVisual));
        assert_eq!(r.embeddings, retained.embeddings);
        let s = out.subsequence(&out.indices_with_role(TokenRole::SkippedVisual));
        assert_eq!(s.embeddings, skipped.embeddings);
        let t = out.subsequence(&out.indices_with_role(TokenRole::Text));
        assert_eq!(t.embeddings, text.embeddings);
    }

    #[test]
    fn assemble_without_summaries_or_skipped() {
        let retained = TokenSequence {
            embeddings: Matrix::from_rows(&[vec![1.0f64, 1.0]]),
            roles: vec![TokenRole::RetainedVisual],
            provenance: vec![Provenance::Global],
            positions: vec![0],
        };
        let text = TokenSequence {
            embeddings: Matrix::from_rows(&[vec![2.0f64, 2.0]]),
            roles: vec![TokenRole::Text],
            provenance: vec![Provenance::Text],
            positions: vec![0],
        };
        let empty = TokenSequence::empty(2);
        let out = assemble_sequence(&retained, &empty, None, None, &text).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.roles, vec![TokenRole::RetainedVisual, TokenRole::Text]);
    }

    #[test]
    fn assemble_rejects_width_mismatch() {
        let retained = TokenSequence::<f64>::empty(4);
        let skipped = TokenSequence::<f64>::empty(3);
        let text = TokenSequence::<f64>::empty(4);
        assert!(assemble_sequence(&retained, &skipped, None, None, &text).is_err());
    }

    #[test]
    fn sequence_json_round_trip() {
        let seq: TokenSequence<f32> = mock_encode(&cfg(5)).unwrap();
        let json = serde_json::to_string(&seq).unwrap();
        let back: TokenSequence<f32> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.embeddings, seq.embeddings);
        assert_eq!(back.roles, seq.roles);
        assert_eq!(back.provenance, seq.provenance);
        assert_eq!(back.positions, seq.positions);
    }
}
