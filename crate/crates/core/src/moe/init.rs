//! Orthogonal weight initialisation.

use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `rows × cols` matrix with orthonormal rows or columns (whichever is the
/// shorter side), scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Gram-Schmidt on `short` vectors of length `long`
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            // basis vectors become columns when rows >= cols, rows otherwise
            let idx = if rows >= cols { i * cols + j } else { j * cols + i };
            data[idx] = gain * x;
        }
    }
    Tensor::new(vec![rows, cols], data).expect("finite orthogonal init")
}

/// Stable 64-bit hash of a parameter name, used to give every parameter its
/// own init stream.
pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(t: &Tensor, by_cols: bool) -> Vec<f64> {
        let (r, c) = t.dims2().unwrap();
        let (n, len) = if by_cols { (c, r) } else { (r, c) };
        let get = |v: usize, i: usize| if by_cols { t.at(i, v) } else { t.at(v, i) };
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = (0..len).map(|i| get(a, i) * get(b, i)).sum();
            }
        }
        g
    }

    #[test]
    fn tall_and_wide_are_orthonormal() {
        for (r, c, by_cols) in [(12, 4, true), (4, 12, false), (6, 6, true)] {
            let t = orthogonal(r, c, 1.0, 7);
            let g = gram(&t, by_cols);
            let n = r.min(c);
            for a in 0..n {
                for b in 0..n {
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((g[a * n + b] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gain_scales_and_seed_determines() {
        let a = orthogonal(5, 3, 2.0_f64.sqrt(), 1);
        let g = gram(&a, true);
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert_eq!(a, orthogonal(5, 3, 2.0_f64.sqrt(), 1));
        assert_ne!(a, orthogonal(5, 3, 2.0_f64.sqrt(), 2));
    }
}
