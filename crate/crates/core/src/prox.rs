//! Proximal operators and spectral utilities shared by every solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A nonnegative shrinkage threshold.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(theta: f64) -> Result<Self> {
        if theta >= 0.0 {
            Ok(Threshold(theta))
        } else {
            Err(Error::NegativeThreshold(theta))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Iteration cap for [`spectral_norm_sq`].
pub const POWER_ITERATION_CAP: usize = 10_000;

#[inline]
pub(crate) fn shrink(u: f64, theta: f64) -> f64 {
    if u > theta {
        u - theta
    } else if u < -theta {
        u + theta
    } else {
        0.0
    }
}

/// Soft-thresholds a slice in place. `theta` must already be validated.
#[inline]
pub(crate) fn shrink_in_place(u: &mut [f64], theta: f64) {
    for v in u.iter_mut() {
        *v = shrink(*v, theta);
    }
}

/// `sign(u_i) * max(|u_i| - theta, 0)` componentwise.
pub fn soft_threshold(u: &DVector<f64>, theta: f64) -> Result<DVector<f64>> {
    let theta = Threshold::new(theta)?.get();
    Ok(u.map(|v| shrink(v, theta)))
}

/// Derivatives of the soft-threshold with respect to its input (a 0/1 mask)
/// and to the threshold. At the kink `|u_i| == theta` both are taken as 0.
pub fn soft_threshold_jvp(u: &DVector<f64>, theta: f64) -> (DVector<f64>, DVector<f64>) {
    let d_du = u.map(|v| if v.abs() > theta { 1.0 } else { 0.0 });
    let d_dtheta = u.map(|v| if v.abs() > theta { -v.signum() } else { 0.0 });
    (d_du, d_dtheta)
}

/// Largest eigenvalue of `AᵀA` (i.e. `σ_max(A)²`) by power iteration from the
/// normalized all-ones vector. Stops when the Rayleigh quotient changes by less
/// than `tol` relative.
pub fn spectral_norm_sq(a: &DMatrix<f64>, tol: f64) -> Result<f64> {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return Err(Error::InvalidDimension("empty matrix".into()));
    }
    if a.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidParameter(
            "spectral norm of the zero matrix".into(),
        ));
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0_f64;
    let mut change = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let av = a * &v;
        let w = a.tr_mul(&av);
        // Rayleigh quotient vᵀAᵀAv with ‖v‖ = 1
        let next = av.norm_squared();
        let norm = w.norm();
        if norm == 0.0 {
            // start vector in the null space; fall back to a basis sweep
            return spectral_norm_sq_fallback(a, tol);
        }
        change = (next - estimate).abs() / next;
        estimate = next;
        v = w / norm;
        if change <= tol {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence {
        iters: POWER_ITERATION_CAP,
        change,
    })
}

fn spectral_norm_sq_fallback(a: &DMatrix<f64>, tol: f64) -> Result<f64> {
    // Restart from the column of largest norm, which cannot be orthogonal to
    // every dominant right singular vector.
    let n = a.ncols();
    let best = (0..n)
        .max_by(|&i, &j| a.column(i).norm().total_cmp(&a.column(j).norm()))
        .unwrap_or(0);
    let mut v = DVector::zeros(n);
    v[best] = 1.0;
    let mut estimate = 0.0_f64;
    let mut change = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let av = a * &v;
        let w = a.tr_mul(&av);
        let next = av.norm_squared();
        change = (next - estimate).abs() / next;
        estimate = next;
        v = &w / w.norm();
        if change <= tol {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence {
        iters: POWER_ITERATION_CAP,
        change,
    })
}

/// Largest absolute cosine between two distinct columns.
pub fn mutual_coherence(a: &DMatrix<f64>) -> Result<f64> {
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroColumn(j));
    }
    let gram = a.tr_mul(a);
    let n = a.ncols();
    let mut mu = 0.0_f64;
    for j in 0..n {
        for i in 0..j {
            mu = mu.max(gram[(i, j)].abs() / (norms[i] * norms[j]));
        }
    }
    Ok(mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        let u = DVector::from_vec(vec![1.5, -0.3, 2.0]);
        assert_eq!(
            soft_threshold(&u, 1.0).unwrap(),
            DVector::from_vec(vec![0.5, 0.0, 1.0])
        );
        assert_eq!(soft_threshold(&u, 0.0).unwrap(), u);
        assert_eq!(
            soft_threshold(&DVector::from_vec(vec![-2.0]), 0.5).unwrap()[0],
            -1.5
        );
        assert!(matches!(
            soft_threshold(&u, -0.1),
            Err(Error::NegativeThreshold(_))
        ));
    }

    #[test]
    fn jvp_examples() {
        let one = |v: f64| DVector::from_vec(vec![v]);
        assert_eq!(soft_threshold_jvp(&one(2.0), 1.0), (one(1.0), one(-1.0)));
        assert_eq!(soft_threshold_jvp(&one(-0.5), 1.0), (one(0.0), one(0.0)));
        // kink
        assert_eq!(soft_threshold_jvp(&one(1.0), 1.0), (one(0.0), one(0.0)));
        assert_eq!(soft_threshold_jvp(&one(-3.0), 1.0), (one(1.0), one(1.0)));
    }

    #[test]
    fn spectral_norm_simple() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(spectral_norm_sq(&eye, 1e-10).unwrap(), 1.0, max_relative = 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        assert_relative_eq!(spectral_norm_sq(&d, 1e-10).unwrap(), 9.0, max_relative = 1e-9);
        assert!(spectral_norm_sq(&DMatrix::zeros(2, 2), 1e-10).is_err());
    }

    #[test]
    fn spectral_norm_start_in_null_space() {
        // all-ones start is annihilated by this matrix
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
        assert_relative_eq!(spectral_norm_sq(&a, 1e-12).unwrap(), 2.0, max_relative = 1e-9);
    }

    #[test]
    fn coherence_examples() {
        assert_eq!(mutual_coherence(&DMatrix::<f64>::identity(4, 4)).unwrap(), 0.0);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0]);
        assert_relative_eq!(mutual_coherence(&a).unwrap(), 1.0, max_relative = 1e-12);
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(mutual_coherence(&z), Err(Error::ZeroColumn(1))));
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0..5.0f64, n),
                prop::collection::vec(-5.0..5.0f64, n),
                0.0..3.0f64,
                0.0..3.0f64,
            )
        })
    }

    proptest! {
        #[test]
        fn nonexpansive_and_shrinking((u, v, t1, t2) in triple()) {
            let u = DVector::from_vec(u);
            let v = DVector::from_vec(v);
            let su = soft_threshold(&u, t1).unwrap();
            let sv = soft_threshold(&v, t1).unwrap();
            prop_assert!((&su - &sv).norm() <= (&u - &v).norm() * (1.0 + 1e-12));
            let cap = (u.amax() - t1).max(0.0);
            prop_assert!(su.amax() <= cap);
            for i in 0..u.len() {
                prop_assert!(su[i] == 0.0 || su[i].signum() == u[i].signum());
            }
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = soft_threshold(&u, lo).unwrap();
            let b = soft_threshold(&u, hi).unwrap();
            for i in 0..u.len() {
                prop_assert!(a[i].abs() >= b[i].abs());
            }
        }

        #[test]
        fn jvp_matches_finite_differences(u in prop::collection::vec(-4.0..4.0f64, 1..10), theta in 0.0..2.0f64) {
            let u = DVector::from_vec(u);
            let (du, dt) = soft_threshold_jvp(&u, theta);
            let h = 1e-6;
            for i in 0..u.len() {
                prop_assume!((u[i].abs() - theta).abs() > 1e-4);
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (shrink(up[i], theta) - shrink(dn[i], theta)) / (2.0 * h);
                prop_assert!((fd - du[i]).abs() <= 1e-6 * du[i].abs().max(1.0));
                let fdt = (shrink(u[i], theta + h) - shrink(u[i], theta - h)) / (2.0 * h);
                prop_assert!((fdt - dt[i]).abs() <= 1e-6 * dt[i].abs().max(1.0));
            }
        }
    }
}
