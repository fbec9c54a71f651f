//! Adaptive summary layer: a learned 1xC scoring vector turns a block of
//! tokens into one softmax-weighted convex combination of its rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_vec, seeded_rng, Matrix, Scalar};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryParams<T> {
    /// Scoring weights, width C.
    pub w: Vec<T>,
}

impl<T: Scalar> SummaryParams<T> {
    /// Gaussian init, std 0.02.
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        SummaryParams {
            w: gaussian_vec(width, 0.02, &mut rng),
        }
    }
}

/// Summary token: softmax(X w^T)^T X. The output is a convex combination of
/// the rows of X, so each coordinate stays inside that column's range.
pub fn summarize<T: Scalar>(x: &Matrix<T>, params: &SummaryParams<T>) -> Result<Vec<T>> {
    if x.rows == 0 {
        return Err(Error::EmptyInput("summarize"));
    }
    if params.w.len() != x.cols {
        return Err(Error::ShapeMismatch {
            op: "summarize",
            left: (x.rows, x.cols),
            right: (1, params.w.len()),
        });
    }
    let weights = scores_softmax(x, params);
    let mut out = vec![T::ZERO; x.cols];
    for (i, &wi) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += wi * v;
        }
    }
    Ok(out)
}

/// Gradient of `upstream . summarize(X, w)` with respect to w, via the
/// softmax Jacobian: sum_i a_i (u.x_i - ubar) x_i where a is the softmax and
/// ubar its a-weighted mean of the u.x_i.
pub fn summarize_grad_w<T: Scalar>(
    x: &Matrix<T>,
    params: &SummaryParams<T>,
    upstream: &[T],
) -> Result<Vec<T>> {
    if x.rows == 0 {
        return Err(Error::EmptyInput("summarize_grad_w"));
    }
    if params.w.len() != x.cols || upstream.len() != x.cols {
        return Err(Error::ShapeMismatch {
            op: "summarize_grad_w",
            left: (x.rows, x.cols),
            right: (1, upstream.len()),
        });
    }
    let weights = scores_softmax(x, params);
    let projected: Vec<T> = (0..x.rows).map(|i| dot(upstream, x.row(i))).collect();
    let mut mean = T::ZERO;
    for (a, p) in weights.iter().zip(&projected) {
        mean += *a * *p;
    }
    let mut grad = vec![T::ZERO; x.cols];
    for i in 0..x.rows {
        let coef = weights[i] * (projected[i] - mean);
        for (g, &v) in grad.iter_mut().zip(x.row(i)) {
            *g += coef * v;
        }
    }
    Ok(grad)
}

fn scores_softmax<T: Scalar>(x: &Matrix<T>, params: &SummaryParams<T>) -> Vec<T> {
    let mut scores: Vec<T> = (0..x.rows).map(|i| dot(x.row(i), &params.w)).collect();
    crate::numerics::softmax_row_in_place(&mut scores).expect("finite scores");
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_matrix;

    #[test]
    fn single_row_passes_through() {
        let x = Matrix::from_rows(&[vec![3.0f64, -1.0, 2.0]]);
        let p = SummaryParams { w: vec![0.4, 0.2, -0.7] };
        let out = summarize(&x, &p).unwrap();
        assert_eq!(out, vec![3.0, -1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_column_mean() {
        let x = Matrix::from_rows(&[vec![1.0f64, 4.0], vec![3.0, 0.0]]);
        let p = SummaryParams { w: vec![0.0, 0.0] };
        let out = summarize(&x, &p).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!((out[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_two_row_case() {
        // X = [[1,0],[0,1]], w = [ln 3, 0]: scores (ln 3, 0), softmax (0.75, 0.25).
        let x = Matrix::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]);
        let p = SummaryParams { w: vec![3.0f64.ln(), 0.0] };
        let out = summarize(&x, &p).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-12);
        assert!((out[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_input_errors() {
        let x: Matrix<f64> = Matrix::zeros(0, 3);
        let p = SummaryParams { w: vec![0.0; 3] };
        assert!(summarize(&x, &p).is_err());
    }

    #[test]
    fn gradient_zero_for_identical_rows() {
        let x = Matrix::from_rows(&vec![vec![1.0f64, 2.0]; 4]);
        let p = SummaryParams { w: vec![0.3, -0.2] };
        let g = summarize_grad_w(&x, &p, &[1.0, 1.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_zero_for_single_row() {
        let x = Matrix::from_rows(&[vec![5.0f64, -3.0]]);
        let p = SummaryParams { w: vec![0.1, 0.9] };
        let g = summarize_grad_w(&x, &p, &[2.0, 1.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(99);
        let x: Matrix<f64> = gaussian_matrix(3, 4, 1.0, &mut rng);
        let p = SummaryParams {
            w: gaussian_vec(4, 1.0, &mut rng),
        };
        let upstream: Vec<f64> = gaussian_vec(4, 1.0, &mut rng);
        let analytic = summarize_grad_w(&x, &p, &upstream).unwrap();

        let h = 1e-5;
        for j in 0..4 {
            let mut wp = p.clone();
            wp.w[j] += h;
            let mut wm = p.clone();
            wm.w[j] -= h;
            let fp = dot(&upstream, &summarize(&x, &wp).unwrap());
            let fm = dot(&upstream, &summarize(&x, &wm).unwrap());
            let numeric = (fp - fm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[j].abs()).max(1e-8);
            assert!(
                (numeric - analytic[j]).abs() / denom <= 1e-4,
                "coord {j}: analytic {} vs numeric {numeric}",
                analytic[j]
            );
        }
    }

    #[test]
    fn output_in_per_column_range() {
        let mut rng = seeded_rng(123);
        for _ in 0..20 {
            let x: Matrix<f64> = gaussian_matrix(5, 3, 2.0, &mut rng);
            let p = SummaryParams {
                w: gaussian_vec(3, 1.0, &mut rng),
            };
            let out = summarize(&x, &p).unwrap();
            for j in 0..3 {
                let col: Vec<f64> = (0..5).map(|i| x.get(i, j)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_w_shift_leaves_output_unchanged() {
        // Rows span a subspace; shifting w orthogonally to all rows cannot
        // change any score.
        let x = Matrix::from_rows(&[vec![1.0f64, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let p = SummaryParams { w: vec![0.5, -0.3, 0.8] };
        let shifted = SummaryParams { w: vec![0.5, -0.3, -2.2] };
        let a = summarize(&x, &p).unwrap();
        let b = summarize(&x, &shifted).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6);
        }
    }
}
