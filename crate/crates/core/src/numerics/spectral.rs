//! Largest singular value via power iteration on w^T w.

use super::matrix::{dot, vec_norm, Matrix};
use super::rng::{gaussian, seeded_rng};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const SPECTRAL_TOL: f64 = 1e-8;
pub const SPECTRAL_MAX_ITER: usize = 1000;

/// Estimate the spectral norm of `w`. Converged when successive estimates
/// differ by at most `tol`; errors after `max_iter` carrying the last
/// estimate. The start vector is drawn from `seed` so results are a pure
/// function of (matrix, seed).
///
/// Note on precision: the default `tol` of 1e-8 targets f64 matrices; f32
/// callers should pass a tolerance above f32 round-off for their norms.
pub fn spectral_norm<T: Scalar>(w: &Matrix<T>, tol: f64, max_iter: usize, seed: u64) -> Result<f64> {
    if w.rows == 0 || w.cols == 0 {
        return Err(Error::EmptyInput("spectral_norm"));
    }
    let mut rng = seeded_rng(seed);
    let mut v: Vec<f64> = (0..w.cols).map(|_| gaussian(&mut rng)).collect();
    let n = vec_norm(&v);
    for x in v.iter_mut() {
        *x /= n;
    }

    let wf: Matrix<f64> = w.cast();
    let mut last = 0.0f64;
    for iter in 0..max_iter {
        // u = w v ; v' = w^T u
        let mut u = vec![0.0f64; wf.rows];
        for i in 0..wf.rows {
            u[i] = dot(wf.row(i), &v);
        }
        let sigma = vec_norm(&u);
        if sigma == 0.0 {
            return Ok(0.0); // zero matrix
        }
        let mut v_next = vec![0.0f64; wf.cols];
        for i in 0..wf.rows {
            let ui = u[i];
            for (j, &x) in wf.row(i).iter().enumerate() {
                v_next[j] += ui * x;
            }
        }
        let vn = vec_norm(&v_next);
        for x in v_next.iter_mut() {
            *x /= vn;
        }
        v = v_next;
        if iter > 0 && (sigma - last).abs() <= tol {
            return Ok(sigma);
        }
        last = sigma;
    }
    Err(Error::PowerIterationDiverged {
        last,
        iters: max_iter,
    })
}
