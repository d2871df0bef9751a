//! Orthonormal matrix construction: Gaussian sample, Householder QR, sign
//! fix by a positive R diagonal. Always computed in f64 so the result is
//! independent of the working precision it is later cast to.

use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major `rows x cols` matrix (`rows >= cols`) with orthonormal columns,
/// deterministic in the RNG state.
pub fn orthonormal_columns<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    assert!(rows >= cols, "need rows >= cols, got {rows} x {cols}");
    let a: Vec<f64> = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let (q, r_diag) = thin_qr(&a, rows, cols);
    let mut q = q;
    // Sign fix: flipping columns where R's diagonal is negative makes the
    // factorization unique for a given sample.
    for j in 0..cols {
        if r_diag[j] < 0.0 {
            for i in 0..rows {
                q[i * cols + j] = -q[i * cols + j];
            }
        }
    }
    q
}

/// Thin Householder QR. Returns (Q with orthonormal columns, diag of R).
fn thin_qr(a: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = a.to_vec();
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (j..rows).map(|i| r[i * cols + j]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let alpha = -v[0].signum() * norm;
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for col in j..cols {
                let mut s = 0.0;
                for i in j..rows {
                    s += v[i - j] * r[i * cols + col];
                }
                let factor = 2.0 * s / vnorm2;
                for i in j..rows {
                    r[i * cols + col] -= factor * v[i - j];
                }
            }
        }
        reflectors.push((v, vnorm2));
    }
    let r_diag: Vec<f64> = (0..cols).map(|j| r[j * cols + j]).collect();

    // Q = H_0 H_1 ... H_{cols-1} applied to the first `cols` identity columns.
    let mut q = vec![0.0; rows * cols];
    for j in 0..cols {
        q[j * cols + j] = 1.0;
    }
    for j in (0..cols).rev() {
        let (v, vnorm2) = &reflectors[j];
        if *vnorm2 == 0.0 {
            continue;
        }
        for col in 0..cols {
            let mut s = 0.0;
            for i in j..rows {
                s += v[i - j] * q[i * cols + col];
            }
            let factor = 2.0 * s / vnorm2;
            for i in j..rows {
                q[i * cols + col] -= factor * v[i - j];
            }
        }
    }
    (q, r_diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::test_rng;

    fn gram_max_dev(q: &[f64], rows: usize, cols: usize) -> f64 {
        let mut worst = 0.0f64;
        for j1 in 0..cols {
            for j2 in 0..cols {
                let mut dot = 0.0;
                for i in 0..rows {
                    dot += q[i * cols + j1] * q[i * cols + j2];
                }
                let want = if j1 == j2 { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    #[test]
    fn columns_are_orthonormal() {
        for &(rows, cols) in &[(4usize, 2usize), (64, 32), (100, 100), (16, 1)] {
            let mut rng = test_rng(rows as u64 * 1000 + cols as u64);
            let q = orthonormal_columns(rows, cols, &mut rng);
            assert!(gram_max_dev(&q, rows, cols) < 1e-12, "{rows}x{cols}");
        }
    }

    #[test]
    fn deterministic_in_rng_state() {
        let q1 = orthonormal_columns(8, 3, &mut test_rng(5));
        let q2 = orthonormal_columns(8, 3, &mut test_rng(5));
        assert_eq!(q1, q2);
    }

    #[test]
    fn square_case_is_a_rotation_like_basis() {
        let mut rng = test_rng(9);
        let q = orthonormal_columns(6, 6, &mut rng);
        assert!(gram_max_dev(&q, 6, 6) < 1e-12);
    }
}
