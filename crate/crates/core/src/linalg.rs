//! Least-squares affine fits between representation spaces.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::tensor::Tensor;

/// Diagonal ridge added to the normal equations.
pub const RIDGE: f64 = 1e-8;

/// A fitted affine map `x ↦ x·W + b` and its quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// `d × d`
    pub weight: Tensor,
    pub bias: Tensor,
    /// `‖source·W + b − target‖_F / ‖target‖_F`
    pub relative_residual: f64,
    /// The source Gram matrix was (numerically) singular; the ridge picks
    /// the near-minimum-norm solution.
    pub rank_deficient: bool,
}

/// In-place Cholesky of a symmetric positive definite `n×n` matrix. Returns
/// the smallest pivot (squared diagonal of the factor).
fn cholesky(a: &mut [f64], n: usize) -> Option<f64> {
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if !(s > 0.0) {
            return None;
        }
        min_pivot = min_pivot.min(s);
        let l = libm::sqrt(s);
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
    }
    Some(min_pivot)
}

/// Solves `L·Lᵀ·x = b` for each column of `b` (`n × m`, row-major).
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for c in 0..m {
        for i in 0..n {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
    }
}

/// Least-squares affine map from `source` (`n×d`) to `target` (`n×d`).
///
/// Solves the ridge-regularized normal equations in f64. Requires an
/// overdetermined system (`n ≥ d + 1`).
pub fn fit_linear_bridge(source: &Tensor, target: &Tensor) -> Result<LinearFit> {
    if source.shape().len() != 2 || source.shape() != target.shape() {
        return Err(input("source and target must both be n×d"));
    }
    let (n, d) = (source.rows(), source.cols());
    if n < d + 1 {
        return Err(input(format!("need at least d + 1 = {} samples, got {n}", d + 1)));
    }
    if !source.is_finite() || !target.is_finite() {
        return Err(input("non-finite representations"));
    }
    let p = d + 1;
    let aug = |r: usize, c: usize| -> f64 {
        if c < d {
            source.data()[r * d + c] as f64
        } else {
            1.0
        }
    };
    let mut gram = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p * d];
    for r in 0..n {
        let t = &target.data()[r * d..(r + 1) * d];
        for i in 0..p {
            let xi = aug(r, i);
            for j in 0..=i {
                gram[i * p + j] += xi * aug(r, j);
            }
            for (c, &tv) in t.iter().enumerate() {
                rhs[i * d + c] += xi * tv as f64;
            }
        }
    }
    let mut max_diag = 0.0f64;
    for i in 0..p {
        for j in 0..i {
            gram[j * p + i] = gram[i * p + j];
        }
        max_diag = max_diag.max(gram[i * p + i]);
        gram[i * p + i] += RIDGE;
    }
    let min_pivot = cholesky(&mut gram, p).ok_or_else(|| input("normal equations are not positive definite"))?;
    let rank_deficient = min_pivot <= 1e-7 * max_diag.max(1.0);
    cholesky_solve(&gram, p, &mut rhs, d);

    let mut err_sq = 0.0f64;
    let mut tgt_sq = 0.0f64;
    for r in 0..n {
        for c in 0..d {
            let mut y = rhs[d * d + c];
            for i in 0..d {
                y += aug(r, i) * rhs[i * d + c];
            }
            let t = target.data()[r * d + c] as f64;
            err_sq += (y - t) * (y - t);
            tgt_sq += t * t;
        }
    }
    let relative_residual = if tgt_sq > 0.0 {
        libm::sqrt(err_sq / tgt_sq)
    } else {
        libm::sqrt(err_sq)
    };
    let weight: Vec<f32> = rhs[..d * d].iter().map(|&v| v as f32).collect();
    let bias: Vec<f32> = rhs[d * d..].iter().map(|&v| v as f32).collect();
    Ok(LinearFit {
        weight: Tensor::from_vec(&[d, d], weight).unwrap(),
        bias: Tensor::from_vec(&[d], bias).unwrap(),
        relative_residual,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize, d: usize, seed: u64) -> Tensor {
        crate::model::Init::new(seed).normal(&[n, d], 1.0)
    }

    #[test]
    fn identity_fit() {
        let x = data(40, 6, 1);
        let fit = fit_linear_bridge(&x, &x).unwrap();
        assert!(fit.relative_residual < 1e-6);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((fit.weight.data()[i * 6 + j] - want).abs() < 1e-5);
            }
            assert!(fit.bias.data()[i].abs() < 1e-5);
        }
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn underdetermined_rejected() {
        let x = data(5, 6, 1);
        assert!(fit_linear_bridge(&x, &x).is_err());
    }

    #[test]
    fn duplicated_column_is_flagged() {
        let mut x = data(30, 4, 2);
        for r in 0..30 {
            let v = x.data()[r * 4];
            x.data_mut()[r * 4 + 1] = v;
        }
        let fit = fit_linear_bridge(&x, &x).unwrap();
        assert!(fit.rank_deficient);
        assert!(fit.relative_residual < 1e-6);
    }
}
