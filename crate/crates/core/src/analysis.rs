//! Skip-error measurement and bound verification.
//!
//! Per-layer skip errors are the norms of the FFN deltas that skipped rows
//! never received. They amplify through later layers at most by the product
//! of per-layer Lipschitz estimates (spectral-norm products), telescoping
//! into a cumulative bound; with uniform constants the bound has a geometric
//! closed form. Output-distribution drift is bounded via the Gaussian KL
//! closed form on the logit gap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ffn, CaptureOptions, Model, SkipSchedule};
use crate::numerics::{
    rms_norm, spectral_norm, MacCounter, Matrix, Scalar, SPECTRAL_MAX_ITER, SPECTRAL_TOL,
};
use crate::tokens::TokenSequence;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LayerLipschitz {
    /// sigma_Q sigma_K sigma_V / sqrt(d_k).
    pub attention: f64,
    /// sigma_1 sigma_2; for the gated FFN, sigma_1 is the spectral norm of
    /// the stacked [W_1 | W_gate] input map.
    pub ffn: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub per_layer: Vec<LayerLipschitz>,
    /// max over layers of (attention + ffn).
    pub gamma: f64,
}

/// Spectral-norm-product Lipschitz estimates for every layer.
pub fn lipschitz_estimates<T: Scalar>(model: &Model<T>) -> Result<LipschitzEstimate> {
    let d_k = model.cfg.head_dim as f64;
    let base_seed = model.cfg.seed;
    let mut per_layer = Vec::with_capacity(model.cfg.layers);
    for (li, layer) in model.layers.iter().enumerate() {
        let seed = |slot: u64| base_seed.wrapping_mul(31).wrapping_add(li as u64 * 8 + slot);
        let sn = |w: &Matrix<T>, slot: u64| spectral_norm(w, SPECTRAL_TOL, SPECTRAL_MAX_ITER, seed(slot));
        let sigma_q = sn(&layer.attn.w_q, 0)?;
        let sigma_k = sn(&layer.attn.w_k, 1)?;
        let sigma_v = sn(&layer.attn.w_v, 2)?;
        let sigma_1 = match &layer.ffn.w_gate {
            Some(gate) => {
                let stacked = hstack(&layer.ffn.w_1, gate);
                spectral_norm(&stacked, SPECTRAL_TOL, SPECTRAL_MAX_ITER, seed(3))?
            }
            None => sn(&layer.ffn.w_1, 3)?,
        };
        let sigma_2 = sn(&layer.ffn.w_2, 4)?;
        per_layer.push(LayerLipschitz {
            attention: sigma_q * sigma_k * sigma_v / d_k.sqrt(),
            ffn: sigma_1 * sigma_2,
        });
    }
    let gamma = per_layer
        .iter()
        .map(|l| l.attention + l.ffn)
        .fold(0.0f64, f64::max);
    Ok(LipschitzEstimate { per_layer, gamma })
}

/// Cumulative skip-error bound: sum over layers l (1-based) of
/// eps_skip[l] * prod_{i=1}^{L-l} (attention + ffn constants of layer i+1),
/// with the product indexing exactly as stated.
pub fn cumulative_bound(eps_skip: &[f64], estimate: &LipschitzEstimate) -> Result<f64> {
    let layers = estimate.per_layer.len();
    if eps_skip.len() != layers {
        return Err(Error::invalid(format!(
            "eps_skip length {} != layer count {layers}",
            eps_skip.len()
        )));
    }
    let mut total = 0.0;
    for (l0, eps) in eps_skip.iter().enumerate() {
        let l = l0 + 1; // 1-based layer of the injection
        let mut product = 1.0;
        for i in 1..=(layers - l) {
            let constants = &estimate.per_layer[i]; // 1-based layer i+1
            product *= constants.attention + constants.ffn;
        }
        total += eps * product;
    }
    Ok(total)
}

/// Geometric closed form: eps * (gamma^L - 1) / (gamma - 1), with the
/// gamma = 1 limit eps * L. Evaluated as expm1(L ln gamma) / expm1(ln gamma)
/// so gammas arbitrarily close to 1 lose no precision.
pub fn closed_form_bound(eps: f64, gamma: f64, layers: usize) -> f64 {
    if layers == 0 {
        return 0.0;
    }
    if gamma == 1.0 {
        return eps * layers as f64;
    }
    if gamma == 0.0 {
        return eps;
    }
    let mu = gamma.ln();
    eps * (layers as f64 * mu).exp_m1() / mu.exp_m1()
}

/// KL divergence between two isotropic Gaussians with equal covariance
/// sigma2 * I: ||mu_p - mu_q||^2 / (2 sigma2).
pub fn kl_gaussian(mu_p: &[f64], mu_q: &[f64], sigma2: f64) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    if mu_p.len() != mu_q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_gaussian",
            left: (1, mu_p.len()),
            right: (1, mu_q.len()),
        });
    }
    let sq: f64 = mu_p.iter().zip(mu_q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * sigma2))
}

/// Distribution-level bounds from a total feature error: the plain quadratic
/// bound and the variant with the similarity term eps_sim = scale *
/// sqrt(1 - theta) added. Theta above 1 is clamped with a warning.
pub fn kl_bounds(
    eps_total: f64,
    theta: f64,
    sim_scale: f64,
    sigma2: f64,
) -> Result<(f64, f64, f64, Option<String>)> {
    if sigma2 <= 0.0 {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    let (theta, warning) = if theta > 1.0 {
        (1.0, Some(format!("theta {theta} > 1 clamped to 1")))
    } else {
        (theta, None)
    };
    let eps_sim = sim_scale * (1.0 - theta).sqrt();
    let bound13 = eps_total * eps_total / (2.0 * sigma2);
    let with_sim = eps_total + eps_sim;
    let bound14 = with_sim * with_sim / (2.0 * sigma2);
    Ok((bound13, bound14, eps_sim, warning))
}

/// Everything measured and bounded for one (model, sequence, schedule) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Per-layer distance between dense and skip residual streams.
    pub eps_layer: Vec<f64>,
    /// Per-layer injected skip error (norm of the withheld FFN deltas).
    pub eps_skip: Vec<f64>,
    /// Final-position logit distance between dense and skip runs.
    pub eps_total_measured: f64,
    /// Cumulative telescoped bound.
    pub eps_total_bound: f64,
    /// Geometric closed form with uniform constants (max eps, gamma).
    pub eps_total_closed: f64,
    pub kl_measured: f64,
    pub kl_bound_eq13: f64,
    pub kl_bound_eq14: f64,
    /// Variance of the dense final-position logits.
    pub sigma2: f64,
    /// Mean merge similarity (1 when no merge happened).
    pub theta: f64,
    pub eps_sim: f64,
    pub gamma: f64,
    pub lipschitz: LipschitzEstimate,
    /// Secant ratio of the first layer's attention map on a 64-token
    /// normalized sample; diagnostic for the attention Lipschitz estimate.
    pub attention_ratio: f64,
    pub warnings: Vec<String>,
}

/// Run the same assembled sequence densely and with skip routing, measure
/// the divergence, and evaluate every bound. `theta` comes from the merge
/// stage (1.0 when merging is off); `sim_scale` scales the similarity error
/// term.
pub fn measure_skip_divergence<T: Scalar>(
    model: &Model<T>,
    seq: &TokenSequence<T>,
    schedule: &SkipSchedule,
    theta: f64,
    sim_scale: f64,
) -> Result<ErrorReport> {
    let mut dense_schedule = schedule.clone();
    dense_schedule.sf = false;
    dense_schedule.lv = false;
    dense_schedule.sk = false;
    let mut skip_schedule = schedule.clone();
    skip_schedule.sk = false; // eviction happens after prefill; logits identical

    let capture = CaptureOptions {
        activations: true,
        attention: false,
    };
    let mut scratch = MacCounter::new();
    let dense = model.prefill(seq, &dense_schedule, &mut scratch, &capture)?;
    let skip = model.prefill(seq, &skip_schedule, &mut scratch, &capture)?;

    let dense_logits: Vec<f64> = dense.logits.iter().map(|v| v.to_f64()).collect();
    let skip_logits: Vec<f64> = skip.logits.iter().map(|v| v.to_f64()).collect();
    let eps_total_measured = l2_distance(&dense_logits, &skip_logits);
    let sigma2 = variance(&dense_logits);
    let kl_measured = kl_softmax(&skip_logits, &dense_logits);

    let dense_acts = dense.activations.as_ref().expect("captured");
    let skip_acts = skip.activations.as_ref().expect("captured");
    let eps_layer: Vec<f64> = dense_acts
        .iter()
        .zip(skip_acts)
        .map(|(d, s)| frob_distance(&d.h_out, &s.h_out))
        .collect();

    let mut warnings = Vec::new();
    let eps_skip = withheld_ffn_norms(model, seq, &skip_schedule, skip_acts, &mut warnings)?;

    let lipschitz = lipschitz_estimates(model)?;
    let eps_total_bound = cumulative_bound(&eps_skip, &lipschitz)?;
    let eps_max = eps_skip.iter().cloned().fold(0.0f64, f64::max);
    let eps_total_closed = closed_form_bound(eps_max, lipschitz.gamma, model.cfg.layers);

    let (kl_bound_eq13, kl_bound_eq14, eps_sim, warn) =
        kl_bounds(eps_total_bound, theta, sim_scale, sigma2)?;
    if let Some(w) = warn {
        warnings.push(w);
    }
    let attention_ratio = attention_secant_ratio(model, 0, RATIO_SAMPLE_TOKENS, model.cfg.seed)?;

    Ok(ErrorReport {
        eps_layer,
        eps_skip,
        eps_total_measured,
        eps_total_bound,
        eps_total_closed,
        kl_measured,
        kl_bound_eq13,
        kl_bound_eq14,
        sigma2,
        theta,
        eps_sim,
        gamma: lipschitz.gamma,
        lipschitz,
        attention_ratio,
        warnings,
    })
}

/// Norm of the FFN delta the skipped rows of one layer never received.
/// Returns 0 when the schedule routes everything (or there are no skipped
/// rows).
pub fn per_layer_skip_error<T: Scalar>(
    model: &Model<T>,
    seq: &TokenSequence<T>,
    schedule: &SkipSchedule,
    layer: usize,
) -> Result<f64> {
    if layer >= model.cfg.layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range 0..{}",
            model.cfg.layers
        )));
    }
    let mut skip_schedule = schedule.clone();
    skip_schedule.sk = false;
    let capture = CaptureOptions {
        activations: true,
        attention: false,
    };
    let mut scratch = MacCounter::new();
    let out = model.prefill(seq, &skip_schedule, &mut scratch, &capture)?;
    let acts = out.activations.as_ref().expect("captured");
    let mut warnings = Vec::new();
    let all = withheld_ffn_norms(model, seq, &skip_schedule, acts, &mut warnings)?;
    Ok(all[layer])
}

fn withheld_ffn_norms<T: Scalar>(
    model: &Model<T>,
    seq: &TokenSequence<T>,
    schedule: &SkipSchedule,
    skip_acts: &[crate::model::LayerActivations<T>],
    warnings: &mut Vec<String>,
) -> Result<Vec<f64>> {
    let routing = schedule.ffn_routing(&seq.roles);
    let withheld: Vec<usize> = (0..seq.len()).filter(|&i| !routing[i]).collect();
    if withheld.is_empty() {
        warnings.push("no rows bypass the FFN under this schedule; skip errors are zero".to_string());
        return Ok(vec![0.0; model.cfg.layers]);
    }
    let mut scratch = MacCounter::new();
    let mut out = Vec::with_capacity(model.cfg.layers);
    for (layer, acts) in skip_acts.iter().enumerate() {
        let xn = rms_norm(&acts.h_attn, &model.layers[layer].ffn_gain)?;
        let sub = xn.gather_rows(&withheld);
        let delta = ffn(&sub, &model.layers[layer].ffn, &mut scratch)?;
        let delta64: Matrix<f64> = delta.cast();
        out.push(delta64.frob_norm());
    }
    Ok(out)
}

/// Per-token, per-layer ratio of the FFN update norm to the incoming stream
/// norm, measured on a dense pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FfnUpdateRow {
    pub layer: usize,
    pub token: usize,
    pub position: usize,
    pub role: String,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FfnUpdateReport {
    pub rows: Vec<FfnUpdateRow>,
    pub mean_by_role: BTreeMap<String, f64>,
}

impl FfnUpdateReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,token,position,role,ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.9}\n",
                r.layer, r.token, r.position, r.role, r.ratio
            ));
        }
        out
    }
}

pub fn ffn_update_ratio<T: Scalar>(model: &Model<T>, seq: &TokenSequence<T>) -> Result<FfnUpdateReport> {
    let capture = CaptureOptions {
        activations: true,
        attention: false,
    };
    let mut scratch = MacCounter::new();
    let out = model.prefill(seq, &SkipSchedule::dense(), &mut scratch, &capture)?;
    let acts = out.activations.as_ref().expect("captured");

    let mut rows = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (layer, act) in acts.iter().enumerate() {
        let xn = rms_norm(&act.h_attn, &model.layers[layer].ffn_gain)?;
        let delta = ffn(&xn, &model.layers[layer].ffn, &mut scratch)?;
        for token in 0..seq.len() {
            let num = row_norm(&delta, token);
            let den = row_norm(&act.h_attn, token);
            let ratio = if den == 0.0 { 0.0 } else { num / den };
            let role = format!("{:?}", seq.roles[token]);
            let entry = sums.entry(role.clone()).or_insert((0.0, 0));
            entry.0 += ratio;
            entry.1 += 1;
            rows.push(FfnUpdateRow {
                layer,
                token,
                position: seq.positions[token],
                role,
                ratio,
            });
        }
    }
    let mean_by_role = sums
        .into_iter()
        .map(|(role, (sum, count))| (role, sum / count as f64))
        .collect();
    Ok(FfnUpdateReport { rows, mean_by_role })
}

/// Sample length for the recorded attention secant ratio; long enough for
/// softmax averaging to keep the ratio under the spectral estimate.
pub const RATIO_SAMPLE_TOKENS: usize = 64;

/// Secant ratio of the attention map (per-head scaled dot-product over
/// row-normalized inputs, without the output projection) between two
/// independently sampled inputs. Used to sanity-check the attention
/// Lipschitz estimate on sequences long enough for softmax averaging.
pub fn attention_secant_ratio<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<f64> {
    use crate::numerics::{gaussian_matrix, matmul, seeded_rng, softmax_rows};

    let cfg = &model.cfg;
    let mut rng = seeded_rng(seed);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> Matrix<f64> {
        let mut m: Matrix<f64> = gaussian_matrix(n_tokens, cfg.hidden, 1.0, rng);
        for i in 0..n_tokens {
            let norm = crate::numerics::vec_norm(m.row(i));
            for v in m.row_mut(i) {
                *v /= norm;
            }
        }
        m
    };
    let x = sample(&mut rng);
    let y = sample(&mut rng);

    let params = &model.layers[layer].attn;
    let apply = |input: &Matrix<f64>| -> Result<Matrix<f64>> {
        let mut scratch = MacCounter::new();
        let w_q: Matrix<f64> = params.w_q.cast();
        let w_k: Matrix<f64> = params.w_k.cast();
        let w_v: Matrix<f64> = params.w_v.cast();
        let q = matmul(input, &w_q, &mut scratch)?;
        let k = matmul(input, &w_k, &mut scratch)?;
        let v = matmul(input, &w_v, &mut scratch)?;
        let d_k = cfg.head_dim;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut ctx = Matrix::zeros(n_tokens, cfg.hidden);
        for head in 0..cfg.n_heads {
            let kv_head = head / cfg.group_size();
            let mut scores = Matrix::zeros(n_tokens, n_tokens);
            for i in 0..n_tokens {
                for j in 0..n_tokens {
                    if j > i {
                        scores.set(i, j, f64::NEG_INFINITY);
                        continue;
                    }
                    let qh = &q.row(i)[head * d_k..(head + 1) * d_k];
                    let kh = &k.row(j)[kv_head * d_k..(kv_head + 1) * d_k];
                    scores.set(i, j, crate::numerics::dot(qh, kh) * scale);
                }
            }
            let weights = softmax_rows(&scores)?;
            for i in 0..n_tokens {
                for j in 0..n_tokens {
                    let w = weights.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let vh = &v.row(j)[kv_head * d_k..(kv_head + 1) * d_k];
                    for (d, &vv) in vh.iter().enumerate() {
                        let cur = ctx.get(i, head * d_k + d);
                        ctx.set(i, head * d_k + d, cur + w * vv);
                    }
                }
            }
        }
        Ok(ctx)
    };

    let ax = apply(&x)?;
    let ay = apply(&y)?;
    let num = frob_distance_f64(&ax, &ay);
    let den = frob_distance_f64(&x, &y);
    Ok(num / den)
}

fn hstack<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.rows, a.cols + b.cols);
    for i in 0..a.rows {
        out.row_mut(i)[..a.cols].copy_from_slice(a.row(i));
        out.row_mut(i)[a.cols..].copy_from_slice(b.row(i));
    }
    out
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

fn frob_distance<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn frob_distance_f64(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    frob_distance(a, b)
}

fn row_norm<T: Scalar>(m: &Matrix<T>, i: usize) -> f64 {
    m.row(i)
        .iter()
        .map(|v| {
            let x = v.to_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - max - lse).collect()
}

/// KL(softmax(p_logits) || softmax(q_logits)).
pub fn kl_softmax(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum()
}
