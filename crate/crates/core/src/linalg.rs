//! Small dense linear-algebra helpers.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const OPNORM_TOL: f64 = 1e-10;
pub const OPNORM_MAX_ITERS: usize = 1000;

/// Spectral norm by power iteration on `AᵀA`.
///
/// Stops when the Rayleigh-quotient estimate changes by less than
/// [`OPNORM_TOL`] relative, or after [`OPNORM_MAX_ITERS`] iterations. The
/// starting vector is fixed so the result is deterministic.
pub fn operator_norm(a: &Array2<f64>) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // deterministic, generic start: not orthogonal to any coordinate axis
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + 0.1 * (i as f64 + 1.0).sqrt());
    let mut norm_v = v.dot(&v).sqrt();
    v /= norm_v;
    let mut estimate = 0.0;
    for _ in 0..OPNORM_MAX_ITERS {
        let w = a.t().dot(&a.dot(&v));
        let lambda = v.dot(&w).max(0.0);
        estimate = lambda.sqrt();
        // eigen-residual of AᵀA at the current direction
        let residual = (&w - &(&v * lambda)).mapv(|x| x * x).sum().sqrt();
        norm_v = w.dot(&w).sqrt();
        if norm_v == 0.0 {
            return 0.0;
        }
        v = w / norm_v;
        if residual <= OPNORM_TOL * lambda {
            break;
        }
    }
    // final Rayleigh quotient with the converged direction
    let av = a.dot(&v);
    av.dot(&av).sqrt().max(estimate)
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().copied())
}

fn from_na(m: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solves `A X = B` for square `A`.
pub fn solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let lu = to_na(a).lu();
    lu.solve(&to_na(b))
        .map(|x| from_na(&x))
        .ok_or_else(|| Error::DimensionMismatch("singular system".into()))
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(a: &Array2<f64>) -> Result<Array2<f64>> {
    to_na(a)
        .pseudo_inverse(1e-12)
        .map(|x| from_na(&x))
        .map_err(|e| Error::DimensionMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn opnorm_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(3, 3), (8, 5), (4, 9), (16, 16)] {
            let a = gaussian_matrix(&mut rng, r, c, 1.0);
            let svd = to_na(&a).singular_values();
            let top = svd.iter().cloned().fold(0.0, f64::max);
            let est = operator_norm(&a);
            assert!((est - top).abs() <= 1e-9 * top, "{est} vs {top}");
        }
    }

    #[test]
    fn opnorm_of_diagonal() {
        let a = Array2::from_diag(&ndarray::array![0.5, -3.0, 2.0]);
        assert!((operator_norm(&a) - 3.0).abs() < 1e-12);
        assert_eq!(operator_norm(&Array2::zeros((3, 2))), 0.0);
    }
}
