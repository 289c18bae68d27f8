//! Synthetic sparse-coding problems: conditioned dictionaries, bounded sparse
//! signals and noisy observations `y = A x* + ε`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prox::spectral_norm_sq;
use crate::rng::{rng_for, TAG_DICT, TAG_NOISE, TAG_SIGNAL};

/// Relative stopping tolerance used when caching the Lipschitz constant.
const LIPSCHITZ_TOL: f64 = 1e-13;

/// Which quantity is used as `L` in step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzConvention {
    /// `L = σ_max(A)²`, the Lipschitz constant of `∇ ½‖y − Ax‖²`.
    #[default]
    SpectralNormSquared,
    /// `L = σ_max(A)`.
    SpectralNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    matrix: DMatrix<f64>,
    sigma_max_sq: f64,
    kappa: f64,
    seed: Option<u64>,
}

impl Dictionary {
    /// Wraps an arbitrary `m × n` matrix (`m < n`), computing `L` by power
    /// iteration and `κ` from its singular values.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let (m, n) = matrix.shape();
        check_dims(m, n)?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "dictionary has non-finite entries".into(),
            ));
        }
        let sigma_max_sq = spectral_norm_sq(&matrix, LIPSCHITZ_TOL)?;
        let sv = matrix.singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let kappa = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        Ok(Dictionary {
            matrix,
            sigma_max_sq,
            kappa,
            seed: None,
        })
    }

    /// Rebuilds a dictionary from stored fields without recomputation.
    pub(crate) fn from_parts(
        matrix: DMatrix<f64>,
        sigma_max_sq: f64,
        kappa: f64,
        seed: Option<u64>,
    ) -> Self {
        Dictionary {
            matrix,
            sigma_max_sq,
            kappa,
            seed,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `σ_max(A)²`.
    pub fn lipschitz(&self) -> f64 {
        self.sigma_max_sq
    }

    pub fn lipschitz_with(&self, convention: LipschitzConvention) -> f64 {
        match convention {
            LipschitzConvention::SpectralNormSquared => self.sigma_max_sq,
            LipschitzConvention::SpectralNorm => self.sigma_max_sq.sqrt(),
        }
    }
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidDimension("m must be positive".into()));
    }
    if m >= n {
        return Err(Error::InvalidDimension(format!(
            "need m < n, got m = {m}, n = {n}"
        )));
    }
    Ok(())
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    // column-major fill keeps the draw order fixed
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `m × n` dictionary `U Σ Vᵀ` with Haar-like orthonormal factors and `m`
/// singular values log-spaced from 1 down to `1/κ`.
pub fn gen_dictionary(m: usize, n: usize, kappa: f64, seed: u64) -> Result<Dictionary> {
    check_dims(m, n)?;
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::InvalidKappa(kappa));
    }
    let mut rng = rng_for(seed, &[TAG_DICT]);
    let u = gaussian_matrix(m, m, &mut rng).qr().q();
    let v = gaussian_matrix(n, m, &mut rng).qr().q();
    let sigmas = DVector::from_fn(m, |i, _| {
        if m == 1 {
            1.0
        } else {
            kappa.powf(-(i as f64) / (m - 1) as f64)
        }
    });
    let mut us = u;
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col *= sigmas[j];
    }
    let matrix = us * v.transpose();
    let sigma_max_sq = spectral_norm_sq(&matrix, LIPSCHITZ_TOL)?;
    Ok(Dictionary {
        matrix,
        sigma_max_sq,
        kappa,
        seed: Some(seed),
    })
}

/// The bounded sparse signal set: `|x_i| ≤ B`, `‖x‖₀ ≤ s`, with Bernoulli
/// supports of rate `support_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalClass {
    pub bound: f64,
    pub sparsity: usize,
    pub support_prob: f64,
}

impl SignalClass {
    pub fn new(bound: f64, sparsity: usize, support_prob: f64) -> Result<Self> {
        let cls = SignalClass {
            bound,
            sparsity,
            support_prob,
        };
        cls.validate()?;
        Ok(cls)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "magnitude bound B must be positive, got {}",
                self.bound
            )));
        }
        if self.sparsity < 2 {
            return Err(Error::InvalidParameter(format!(
                "sparsity s must be >= 2, got {}",
                self.sparsity
            )));
        }
        if !(self.support_prob > 0.0 && self.support_prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "support_prob must lie in (0, 1), got {}",
                self.support_prob
            )));
        }
        Ok(())
    }

    /// Draws one signal of length `n` from a stream positioned by the caller.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> DVector<f64> {
        let support: Vec<usize> = (0..n)
            .filter(|_| rng.random::<f64>() < self.support_prob)
            .collect();
        let kept: Vec<usize> = if support.len() > self.sparsity {
            let mut picks = index::sample(rng, support.len(), self.sparsity).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|k| support[k]).collect()
        } else {
            support
        };
        let mut x = DVector::zeros(n);
        for i in kept {
            x[i] = loop {
                let v: f64 = StandardNormal.sample(rng);
                if v.abs() <= self.bound {
                    break v;
                }
            };
        }
        x
    }
}

pub fn sample_signal(cls: &SignalClass, n: usize, seed: u64) -> Result<DVector<f64>> {
    cls.validate()?;
    if n < cls.sparsity {
        return Err(Error::InvalidDimension(format!(
            "signal length n = {n} is below the sparsity bound s = {}",
            cls.sparsity
        )));
    }
    Ok(cls.draw(n, &mut rng_for(seed, &[TAG_SIGNAL])))
}

/// Signal-to-noise ratio in dB; `None` is the noiseless case.
pub type Snr = Option<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSample {
    pub x_star: DVector<f64>,
    pub y: DVector<f64>,
    pub noise: DVector<f64>,
    pub snr_db: Snr,
}

/// Adds Gaussian noise scaled so the realized SNR equals `snr_db` exactly.
pub fn observe(
    dict: &Dictionary,
    x_star: &DVector<f64>,
    snr_db: Snr,
    seed: u64,
) -> Result<SparseSample> {
    let mut rng = rng_for(seed, &[TAG_NOISE]);
    observe_with(dict.matrix(), x_star, snr_db, &mut rng)
}

pub(crate) fn observe_with(
    a: &DMatrix<f64>,
    x_star: &DVector<f64>,
    snr_db: Snr,
    rng: &mut impl Rng,
) -> Result<SparseSample> {
    if x_star.len() != a.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "signal has length {}, dictionary has {} columns",
            x_star.len(),
            a.ncols()
        )));
    }
    let clean = a * x_star;
    let Some(snr) = snr_db else {
        return Ok(SparseSample {
            noise: DVector::zeros(clean.len()),
            y: clean,
            x_star: x_star.clone(),
            snr_db: None,
        });
    };
    if !(snr > 0.0) || !snr.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "snr_db must be positive, got {snr}"
        )));
    }
    let signal_energy = clean.norm_squared();
    if signal_energy == 0.0 {
        return Err(Error::DegenerateSignal);
    }
    let raw: DVector<f64> = DVector::from_fn(clean.len(), |_, _| StandardNormal.sample(rng));
    let target = (signal_energy / 10f64.powf(snr / 10.0)).sqrt();
    let raw = &raw * (target / raw.norm());
    let y = &clean + &raw;
    // stored noise is exactly y - A x*
    let noise = &y - &clean;
    Ok(SparseSample {
        x_star: x_star.clone(),
        y,
        noise,
        snr_db: Some(snr),
    })
}

/// `count` independent samples; sample `k` uses seeds derived from `(seed, k)`.
pub fn sample_batch(
    dict: &Dictionary,
    cls: &SignalClass,
    snr_db: Snr,
    count: usize,
    seed: u64,
) -> Result<Vec<SparseSample>> {
    cls.validate()?;
    (0..count)
        .map(|k| {
            let mut rng = rng_for(seed, &[TAG_SIGNAL, k as u64]);
            loop {
                let x = cls.draw(dict.n(), &mut rng);
                match observe_with(dict.matrix(), &x, snr_db, &mut rng) {
                    // an all-zero draw has no defined SNR; redraw
                    Err(Error::DegenerateSignal) => continue,
                    other => break other,
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn snr_of(s: &SparseSample, a: &DMatrix<f64>) -> f64 {
        let clean = a * &s.x_star;
        10.0 * (clean.norm_squared() / s.noise.norm_squared()).log10()
    }

    #[test]
    fn dimension_and_kappa_errors() {
        assert!(matches!(gen_dictionary(4, 4, 2.0, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(gen_dictionary(0, 4, 2.0, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(gen_dictionary(2, 4, 0.5, 0), Err(Error::InvalidKappa(_))));
    }

    #[test]
    fn kappa_one_gives_equal_singular_values() {
        let d = gen_dictionary(2, 4, 1.0, 0).unwrap();
        let sv = d.matrix().singular_values();
        assert_relative_eq!(sv[0], sv[1], max_relative = 1e-12);
        assert_relative_eq!(d.lipschitz(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn kappa_fifty_matches_svd() {
        let d = gen_dictionary(8, 16, 50.0, 7).unwrap();
        let sv = d.matrix().singular_values();
        let ratio = sv.max() / sv.min();
        assert!((ratio - 50.0).abs() <= 1e-6 * 50.0, "ratio {ratio}");
        assert_relative_eq!(d.lipschitz(), sv.max().powi(2), max_relative = 1e-8);
    }

    #[test]
    fn full_scale_dictionary() {
        let d = gen_dictionary(250, 500, 5.0, 0).unwrap();
        assert_eq!((d.m(), d.n()), (250, 500));
        assert!(d.lipschitz() > 0.0);
        let sv = d.matrix().singular_values();
        assert!((sv.max() / sv.min() - 5.0).abs() <= 5e-6);
        assert_relative_eq!(d.lipschitz(), sv.max().powi(2), max_relative = 1e-8);
    }

    #[test]
    fn literal_convention() {
        let d = gen_dictionary(8, 16, 5.0, 1).unwrap();
        let lit = d.lipschitz_with(LipschitzConvention::SpectralNorm);
        assert_relative_eq!(lit * lit, d.lipschitz(), max_relative = 1e-14);
    }

    #[test]
    fn sparse_signals_respect_bounds() {
        let cls = SignalClass::new(0.5, 5, 0.5).unwrap();
        for seed in 0..200 {
            let x = sample_signal(&cls, 10, seed).unwrap();
            assert!(x.iter().filter(|v| **v != 0.0).count() <= 5);
            assert!(x.amax() <= 0.5);
        }
        let tiny = SignalClass::new(1.0, 2, 1e-12).unwrap();
        assert_eq!(sample_signal(&tiny, 10, 0).unwrap(), DVector::zeros(10));
    }

    #[test]
    fn support_rate_is_bernoulli() {
        let cls = SignalClass::new(1.0, 500, 0.1).unwrap();
        let counts: Vec<f64> = (0..1000)
            .map(|seed| {
                let x = sample_signal(&cls, 500, seed).unwrap();
                assert!(x.amax() <= 1.0);
                x.iter().filter(|v| **v != 0.0).count() as f64
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        // sd of the mean of 1000 Binomial(500, 0.1) counts
        let sd = (500.0 * 0.1 * 0.9 / 1000.0_f64).sqrt();
        assert!((mean - 50.0).abs() <= 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn invalid_signal_class() {
        assert!(SignalClass::new(0.0, 3, 0.1).is_err());
        assert!(SignalClass::new(1.0, 1, 0.1).is_err());
        assert!(SignalClass::new(1.0, 3, 1.0).is_err());
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let d = gen_dictionary(6, 12, 5.0, 3).unwrap();
        let x = sample_signal(&SignalClass::new(1.0, 12, 0.5).unwrap(), 12, 1).unwrap();
        let s = observe(&d, &x, None, 4).unwrap();
        assert_eq!(s.y, d.matrix() * &x);
        assert_eq!(s.noise, DVector::zeros(6));
    }

    #[test]
    fn snr_is_exact_per_realization() {
        let d = gen_dictionary(6, 12, 5.0, 3).unwrap();
        let x = sample_signal(&SignalClass::new(1.0, 12, 0.5).unwrap(), 12, 1).unwrap();
        let s = observe(&d, &x, Some(30.0), 5).unwrap();
        assert!((snr_of(&s, d.matrix()) - 30.0).abs() <= 1e-9);
        let residual = &s.y - d.matrix() * &s.x_star - &s.noise;
        assert!(residual.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_signal_with_noise_is_degenerate() {
        let d = gen_dictionary(6, 12, 5.0, 3).unwrap();
        assert!(matches!(
            observe(&d, &DVector::zeros(12), Some(30.0), 0),
            Err(Error::DegenerateSignal)
        ));
        assert!(observe(&d, &DVector::zeros(12), None, 0).is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dictionary(10, 20, 50.0, 11).unwrap();
        let b = gen_dictionary(10, 20, 50.0, 11).unwrap();
        assert_eq!(a, b);
        let cls = SignalClass::new(1.0, 6, 0.2).unwrap();
        let s1 = sample_batch(&a, &cls, Some(30.0), 5, 2).unwrap();
        let s2 = sample_batch(&b, &cls, Some(30.0), 5, 2).unwrap();
        assert_eq!(s1, s2);
    }
}
