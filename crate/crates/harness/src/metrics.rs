//! Sample statistics compared against exact conditionals.

use nalgebra::{DMatrix, DVector};

/// Empirical mean and (unbiased) covariance of `n` rows of length `d`.
pub fn mean_cov(rows: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    assert!(d > 0 && rows.len() % d == 0);
    let n = rows.len() / d;
    let mut mean = DVector::zeros(d);
    for r in rows.chunks(d) {
        mean += DVector::from_column_slice(r);
    }
    if n > 0 {
        mean /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows.chunks(d) {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Largest absolute coordinate difference.
pub fn mean_error(got: &DVector<f64>, want: &DVector<f64>) -> f64 {
    (got - want).amax()
}

/// Relative Frobenius error `||got - want||_F / ||want||_F`.
pub fn cov_error(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm()
}

/// Mean per-coordinate variance.
pub fn sample_variance(rows: &[f64], d: usize) -> f64 {
    let (_, cov) = mean_cov(rows, d);
    cov.trace() / d as f64
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pairwise(a: &[f64], b: &[f64], d: usize) -> f64 {
    let (na, nb) = (a.len() / d, b.len() / d);
    let mut s = 0.0;
    for x in a.chunks(d) {
        for y in b.chunks(d) {
            s += dist(x, y);
        }
    }
    s / (na * nb) as f64
}

/// Energy distance (V-statistic) between two samples of `d`-vectors:
/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|`. Non-negative; zero iff the
/// empirical measures coincide.
pub fn energy_distance(x: &[f64], y: &[f64], d: usize) -> f64 {
    assert!(d > 0 && x.len() % d == 0 && y.len() % d == 0 && !x.is_empty() && !y.is_empty());
    let v = 2.0 * mean_pairwise(x, y, d) - mean_pairwise(x, x, d) - mean_pairwise(y, y, d);
    v.max(0.0)
}

/// Root-mean-square of a slice.
pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}
