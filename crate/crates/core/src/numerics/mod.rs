//! Dense linear-algebra and neural primitives with exact MAC instrumentation.

mod mac;
mod matrix;
mod rng;
mod scalar;
mod spectral;

pub use mac::{MacCounter, Scope};
pub use matrix::{dot, vec_norm, Matrix};
pub use rng::{gaussian, gaussian_matrix, gaussian_vec, orthogonal_matrix, seeded_rng};
pub use scalar::Scalar;
pub use spectral::{spectral_norm, SPECTRAL_MAX_ITER, SPECTRAL_TOL};

use crate::error::{Error, Result};

/// Matrix product `a * b`, charging `a.rows * a.cols * b.cols` MACs to the
/// counter's active scope.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, counter: &mut MacCounter) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    counter.add((a.rows * a.cols * b.cols) as u64);

    let mut out = vec![T::ZERO; a.rows * b.cols];
    let (k, n) = (a.cols, b.cols);
    let a_data = a.as_slice();
    let b_data = b.as_slice();
    crate::par::for_each_chunk(&mut out, n, |i, row| {
        let a_row = &a_data[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b_data[kk * n..(kk + 1) * n];
            for (j, &bv) in b_row.iter().enumerate() {
                row[j] += av * bv;
            }
        }
    });
    let m = Matrix::from_vec(a.rows, b.cols, out);
    debug_assert!(m.all_finite(), "matmul produced non-finite entries");
    Ok(m)
}

/// Row-wise softmax with max-subtraction. Entries equal to `-inf` receive
/// weight exactly zero and are excluded from the max and the sum.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows {
        softmax_row_in_place(out.row_mut(i))?;
    }
    Ok(out)
}

/// In-place softmax over one slice; `-inf` entries map to exact zeros.
pub fn softmax_row_in_place<T: Scalar>(row: &mut [T]) -> Result<()> {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(Error::EmptyInput("softmax: row has no finite entries"));
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        if v.is_finite() {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::ZERO;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// RMS normalization: each row is scaled to unit root-mean-square (with
/// epsilon 1e-5 inside the square root) and multiplied elementwise by `gain`.
pub fn rms_norm<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> Result<Matrix<T>> {
    if gain.len() != x.cols {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            left: (x.rows, x.cols),
            right: (1, gain.len()),
        });
    }
    let eps = T::from_f64(1e-5);
    let mut out = x.clone();
    let cols = x.cols;
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let mut ss = T::ZERO;
        for &v in row.iter() {
            ss += v * v;
        }
        let rms = (ss / T::from_f64(cols as f64) + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.iter()) {
            *v = *v / rms * g;
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch() -> MacCounter {
        MacCounter::new()
    }

    #[test]
    fn matmul_identity() {
        let mut c = scratch();
        let a = Matrix::from_rows(&[vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]);
        let eye = Matrix::identity(3);
        let out = matmul(&eye, &a, &mut c).unwrap();
        assert_eq!(out.as_slice(), a.as_slice());
        assert_eq!(c.total(), 27);
    }

    #[test]
    fn matmul_one_by_one() {
        let mut c = scratch();
        let a = Matrix::from_rows(&[vec![2.0f64]]);
        let b = Matrix::from_rows(&[vec![3.0f64]]);
        let out = matmul(&a, &b, &mut c).unwrap();
        assert_eq!(out.get(0, 0), 6.0);
        assert_eq!(c.total(), 1);
    }

    #[test]
    fn matmul_against_schoolbook() {
        let mut rng = seeded_rng(7);
        let a: Matrix<f32> = gaussian_matrix(4, 5, 1.0, &mut rng);
        let b: Matrix<f32> = gaussian_matrix(5, 2, 1.0, &mut rng);
        let mut c = scratch();
        let out = matmul(&a, &b, &mut c).unwrap();
        // Schoolbook triple loop in f64.
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0f64;
                for k in 0..5 {
                    acc += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                assert!((out.get(i, j) as f64 - acc).abs() <= 1e-6);
            }
        }
        assert_eq!(c.total(), 4 * 5 * 2);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a: Matrix<f64> = Matrix::zeros(2, 3);
        let b: Matrix<f64> = Matrix::zeros(2, 3);
        let err = matmul(&a, &b, &mut scratch()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::from_rows(&[vec![0.0f64, 0.0]]);
        let s = softmax_rows(&m).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_singleton_row() {
        for x in [-40.0f64, 0.0, 3.5, 1e6] {
            let s = softmax_rows(&Matrix::from_rows(&[vec![x]])).unwrap();
            assert_eq!(s.get(0, 0), 1.0);
        }
    }

    #[test]
    fn softmax_vs_high_precision_reference() {
        let m = Matrix::from_rows(&[vec![1.0f64, 2.0, 3.0]]);
        let s = softmax_rows(&m).unwrap();
        // Independent evaluation without max-subtraction.
        let exps = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let z: f64 = exps.iter().sum();
        for j in 0..3 {
            assert!((s.get(0, j) - exps[j] / z).abs() <= 1e-7);
        }
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let m = Matrix::from_rows(&[vec![f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn rms_norm_constant_row() {
        let m = Matrix::from_rows(&[vec![3.0f64; 8]]);
        let gain = vec![1.0f64; 8];
        let out = rms_norm(&m, &gain).unwrap();
        for j in 0..8 {
            assert!((out.get(0, j) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rms_norm_zero_row() {
        let m: Matrix<f64> = Matrix::zeros(1, 4);
        let out = rms_norm(&m, &[1.0; 4]).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_vs_direct_formula() {
        let mut rng = seeded_rng(11);
        let m: Matrix<f64> = gaussian_matrix(1, 6, 1.0, &mut rng);
        let gain: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
        let out = rms_norm(&m, &gain).unwrap();
        let ss: f64 = m.as_slice().iter().map(|v| v * v).sum();
        let rms = (ss / 6.0 + 1e-5).sqrt();
        for j in 0..6 {
            assert!((out.get(0, j) - m.get(0, j) / rms * gain[j]).abs() <= 1e-6);
        }
    }
}
