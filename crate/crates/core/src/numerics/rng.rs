//! Seeded randomness. All stochastic choices in the crate flow through a
//! ChaCha8 stream so runs are reproducible across platforms and thread
//! counts. Values are always drawn in f64 and converted, so f32 and f64
//! instantiations of the same seed see the same underlying samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{dot, vec_norm};
use super::scalar::Scalar;
use super::Matrix;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal sample via Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

pub fn gaussian_vec<T: Scalar>(len: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..len).map(|_| T::from_f64(gaussian(rng) * std)).collect()
}

pub fn gaussian_matrix<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::from_vec(rows, cols, gaussian_vec(rows * cols, std, rng))
}

/// Random matrix with spectral norm 1: modified Gram-Schmidt on the long
/// orientation of a Gaussian draw, so the smaller dimension is orthonormal.
pub fn orthogonal_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    // Orthonormalize rows of the (small x large) orientation in f64, then
    // transpose back if needed.
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    while basis.len() < r {
        let mut v: Vec<f64> = (0..c).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let proj = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b.iter()) {
                *x -= proj * y;
            }
        }
        let n = vec_norm(&v);
        if n > 1e-8 {
            for x in v.iter_mut() {
                *x /= n;
            }
            basis.push(v);
        }
    }
    let m = Matrix::from_rows(&basis);
    let m = if transpose { m.transpose() } else { m };
    m.cast()
}
