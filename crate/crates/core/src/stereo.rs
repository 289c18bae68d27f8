//! Robust photometric stereo: observations `o = ρ L w + e` with sparse `e`.
//!
//! Projecting onto the orthogonal complement of `range(L)` removes the
//! Lambertian term, leaving the sparse problem `P o = P e` with dictionary
//! `A = P`. The normal is then `normalize(L† (o − ê))`.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classical::{eeg_solve, ista_solve, SolverConfig};
use crate::error::{Error, Result};
use crate::problem::Dictionary;
use crate::rng::{rng_for, TAG_RIG, TAG_SCENE};
use crate::training::SampleSource;
use crate::unrolled::{forward_batch, NetParams};

/// Relative singular-value cutoff for the rank test on `L`.
const RANK_TOL: f64 = 1e-10;
const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LightingRig {
    l: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl LightingRig {
    /// Unit-norm rows, `q ≥ 4`, rank 3.
    pub fn new(l: DMatrix<f64>) -> Result<Self> {
        if l.ncols() != 3 {
            return Err(Error::InvalidDimension(format!(
                "lighting matrix must have 3 columns, got {}",
                l.ncols()
            )));
        }
        if l.nrows() < 4 {
            return Err(Error::RankDeficientLighting(format!(
                "q = {} leaves no complement (need q >= 4)",
                l.nrows()
            )));
        }
        for (i, row) in l.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidParameter(format!(
                    "lighting direction {i} has norm {norm}"
                )));
            }
        }
        check_rank(&l)?;
        let pinv = pseudo_inverse(&l)?;
        Ok(LightingRig { l, pinv })
    }

    /// `q` directions uniform on the spherical cap within `max_angle` radians
    /// of the viewing axis `+z`.
    pub fn random(q: usize, max_angle: f64, seed: u64) -> Result<Self> {
        if !(max_angle > 0.0 && max_angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidParameter(format!(
                "max light angle must lie in (0, π/2), got {max_angle}"
            )));
        }
        let mut rng = rng_for(seed, &[TAG_RIG, q as u64]);
        let cos_min = max_angle.cos();
        let mut l = DMatrix::zeros(q, 3);
        for i in 0..q {
            let z: f64 = rng.random_range(cos_min..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let dir = Vector3::new(r * phi.cos(), r * phi.sin(), z).normalize();
            l.set_row(i, &dir.transpose());
        }
        LightingRig::new(l)
    }

    pub fn q(&self) -> usize {
        self.l.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `L† = (LᵀL)⁻¹ Lᵀ`, `3 × q`.
    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    /// `L w` for a single normal.
    pub fn shade(&self, w: &Vector3<f64>) -> DVector<f64> {
        DVector::from_fn(self.q(), |i, _| {
            self.l[(i, 0)] * w[0] + self.l[(i, 1)] * w[1] + self.l[(i, 2)] * w[2]
        })
    }
}

fn check_rank(l: &DMatrix<f64>) -> Result<()> {
    let sv = l.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
    if smax == 0.0 || rank < 3 {
        return Err(Error::RankDeficientLighting(format!(
            "rank(L) = {rank}, need 3"
        )));
    }
    Ok(())
}

fn pseudo_inverse(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = l.tr_mul(l);
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::RankDeficientLighting("LᵀL is singular".into()))?;
    Ok(inv * l.transpose())
}

/// Orthonormal rows spanning the orthogonal complement of `range(L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullProjector {
    p: DMatrix<f64>,
}

impl NullProjector {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn apply(&self, o: &DVector<f64>) -> DVector<f64> {
        &self.p * o
    }

    /// The sparse-coding dictionary `A = P`.
    pub fn dictionary(&self) -> Result<Dictionary> {
        Dictionary::from_matrix(self.p.clone())
    }
}

pub fn build_projector(rig: &LightingRig) -> Result<NullProjector> {
    null_projector(rig.matrix())
}

/// Projector for an arbitrary `q × 3` matrix of rank 3 (rows need not be
/// unit). Rows are the eigenvectors of `I − QQᵀ` with eigenvalue 1, where `Q`
/// is an orthonormal basis of `range(L)`; each row is signed so that its
/// largest-magnitude entry is positive.
pub fn null_projector(l: &DMatrix<f64>) -> Result<NullProjector> {
    let q = l.nrows();
    if l.ncols() != 3 || q < 4 {
        return Err(Error::RankDeficientLighting(format!(
            "need a q × 3 matrix with q >= 4, got {} × {}",
            q,
            l.ncols()
        )));
    }
    check_rank(l)?;
    let basis = l.clone().qr().q();
    let comp = DMatrix::identity(q, q) - &basis * basis.transpose();
    // symmetrize against rounding so the eigensolver sees an exact projector
    let comp = (&comp + comp.transpose()) * 0.5;
    let eig = comp.symmetric_eigen();
    let mut cols: Vec<usize> = (0..q).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    if cols.len() != q - 3 {
        return Err(Error::RankDeficientLighting(format!(
            "complement has dimension {}, expected {}",
            cols.len(),
            q - 3
        )));
    }
    cols.sort_unstable();
    let mut p = DMatrix::zeros(q - 3, q);
    for (r, &c) in cols.iter().enumerate() {
        let mut v = eig.eigenvectors.column(c).into_owned();
        // re-orthogonalize against range(L) to push ‖PL‖ to rounding level
        v -= &basis * basis.tr_mul(&v);
        for prev in 0..r {
            let pr = p.row(prev).transpose();
            v -= &pr * pr.dot(&v);
        }
        v /= v.norm();
        let lead = v.iamax();
        if v[lead] < 0.0 {
            v = -v;
        }
        p.set_row(r, &v.transpose());
    }
    Ok(NullProjector { p })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelObservation {
    pub o: DVector<f64>,
    pub rho: f64,
    pub w_true: Option<Vector3<f64>>,
    pub e_true: Option<DVector<f64>>,
    /// Indices of the artificially corrupted entries (shadows excluded).
    pub corrupted: Vec<usize>,
}

/// Observes one Lambertian pixel: attached shadows (the clamping deficit)
/// and `round(frac · q)` corruptions of magnitude `U[−2, 2] ·` mean clean
/// intensity form `e`, and `o = ρ L w + e` is evaluated last.
fn observe_pixel(
    rig: &LightingRig,
    w: &Vector3<f64>,
    rho: f64,
    corruption_frac: f64,
    rng: &mut ChaCha8Rng,
) -> PixelObservation {
    let q = rig.q();
    let lw = rig.shade(w);
    let lambertian = lw.map(|v| rho * v);
    let clean = lambertian.map(|v| v.max(0.0));
    let mut e = &clean - &lambertian;
    let scale = clean.mean();
    let k = (corruption_frac * q as f64).round() as usize;
    let mut corrupted = sample(rng, q, k).into_vec();
    corrupted.sort_unstable();
    for &i in &corrupted {
        e[i] += rng.random_range(-2.0..=2.0) * scale;
    }
    let o = DVector::from_fn(q, |i, _| rho * lw[i] + e[i]);
    PixelObservation {
        o,
        rho,
        w_true: Some(*w),
        e_true: Some(e),
        corrupted,
    }
}

fn check_frac(corruption_frac: f64) -> Result<()> {
    if !(0.0..1.0).contains(&corruption_frac) {
        return Err(Error::InvalidParameter(format!(
            "corruption fraction must lie in [0, 1), got {corruption_frac}"
        )));
    }
    Ok(())
}

/// A synthetic unit sphere seen from `+z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub resolution: usize,
    /// Grid position `(row, col)` of each pixel.
    pub coords: Vec<(usize, usize)>,
    pub pixels: Vec<PixelObservation>,
}

/// Samples a `resolution × resolution` grid over `[−1, 1]²`; pixel centres
/// strictly inside the unit disk become observations with albedo 1.
pub fn synth_scene(
    resolution: usize,
    rig: &LightingRig,
    corruption_frac: f64,
    seed: u64,
) -> Result<Scene> {
    check_frac(corruption_frac)?;
    if resolution == 0 {
        return Err(Error::InvalidParameter("resolution must be positive".into()));
    }
    let mut coords = Vec::new();
    let mut pixels = Vec::new();
    for r in 0..resolution {
        for c in 0..resolution {
            let x = (2 * c + 1) as f64 / resolution as f64 - 1.0;
            let y = 1.0 - (2 * r + 1) as f64 / resolution as f64;
            let rr = x * x + y * y;
            if rr >= 1.0 {
                continue;
            }
            let w = Vector3::new(x, y, (1.0 - rr).sqrt());
            let mut rng = rng_for(seed, &[TAG_SCENE, r as u64, c as u64]);
            pixels.push(observe_pixel(rig, &w, 1.0, corruption_frac, &mut rng));
            coords.push((r, c));
        }
    }
    if pixels.is_empty() {
        return Err(Error::InvalidParameter(
            "resolution too small: no pixel inside the sphere".into(),
        ));
    }
    Ok(Scene {
        resolution,
        coords,
        pixels,
    })
}

/// Pixels drawn like [`synth_scene`] (uniform over the disk), for training
/// networks on the projected problem: `x* = e`, `y = P o`.
#[derive(Debug, Clone)]
pub struct StereoSource<'a> {
    pub rig: &'a LightingRig,
    pub projector: &'a NullProjector,
    pub corruption_frac: f64,
}

impl SampleSource for StereoSource<'_> {
    fn m(&self) -> usize {
        self.rig.q() - 3
    }

    fn n(&self) -> usize {
        self.rig.q()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        let (x, y) = loop {
            let x: f64 = rng.random_range(-1.0..1.0);
            let y: f64 = rng.random_range(-1.0..1.0);
            if x * x + y * y < 1.0 {
                break (x, y);
            }
        };
        let w = Vector3::new(x, y, (1.0 - x * x - y * y).sqrt());
        let px = observe_pixel(self.rig, &w, 1.0, self.corruption_frac, rng);
        let y = self.projector.apply(&px.o);
        (px.e_true.expect("synthetic pixel"), y)
    }
}

/// How the sparse error is estimated.
#[derive(Debug, Clone, Copy)]
pub enum PixelSolver<'a> {
    Ista(SolverConfig),
    Eeg(SolverConfig),
    Net { params: &'a NetParams, depth: usize },
}

impl PixelSolver<'_> {
    /// Solves `P e ≈ y` for every column of `ys`.
    fn solve(&self, dict: &Dictionary, ys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match *self {
            PixelSolver::Ista(cfg) | PixelSolver::Eeg(cfg) => {
                let cfg = SolverConfig {
                    record_trajectory: false,
                    ..cfg
                };
                let is_ista = matches!(self, PixelSolver::Ista(_));
                let x0 = DVector::zeros(dict.n());
                let cols: Vec<DVector<f64>> = (0..ys.ncols())
                    .into_par_iter()
                    .map(|k| {
                        let y = ys.column(k).into_owned();
                        let traj = if is_ista {
                            ista_solve(dict, &y, &cfg, &x0)?
                        } else {
                            eeg_solve(dict, &y, &cfg, &x0)?
                        };
                        Ok(traj.final_iterate().clone())
                    })
                    .collect::<Result<_>>()?;
                Ok(DMatrix::from_columns(&cols))
            }
            PixelSolver::Net { params, depth } => {
                Ok(forward_batch(params, dict.matrix(), ys, depth, false)?.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelRecovery {
    pub normal: Vector3<f64>,
    pub albedo: f64,
    pub e_hat: DVector<f64>,
}

fn finish(rig: &LightingRig, o: &DVector<f64>, e_hat: DVector<f64>) -> Result<PixelRecovery> {
    let g = rig.pinv() * (o - &e_hat);
    let albedo = g.norm();
    if albedo == 0.0 || !albedo.is_finite() {
        return Err(Error::ZeroNormal);
    }
    Ok(PixelRecovery {
        normal: Vector3::new(g[0], g[1], g[2]) / albedo,
        albedo,
        e_hat,
    })
}

pub fn recover_pixel(
    rig: &LightingRig,
    projector: &NullProjector,
    o: &DVector<f64>,
    solver: &PixelSolver<'_>,
) -> Result<PixelRecovery> {
    let mut out = recover_batch(rig, projector, std::slice::from_ref(o), solver)?;
    Ok(out.pop().expect("one pixel"))
}

/// [`recover_pixel`] over many observations at once.
pub fn recover_batch(
    rig: &LightingRig,
    projector: &NullProjector,
    observations: &[DVector<f64>],
    solver: &PixelSolver<'_>,
) -> Result<Vec<PixelRecovery>> {
    let q = rig.q();
    if projector.matrix().ncols() != q {
        return Err(Error::ShapeMismatch(format!(
            "projector has {} columns, rig has q = {q}",
            projector.matrix().ncols()
        )));
    }
    if let Some(bad) = observations.iter().find(|o| o.len() != q) {
        return Err(Error::ShapeMismatch(format!(
            "observation has length {}, rig has q = {q}",
            bad.len()
        )));
    }
    if observations.is_empty() {
        return Ok(Vec::new());
    }
    let dict = projector.dictionary()?;
    let o_mat = DMatrix::from_columns(observations);
    let ys = projector.matrix() * &o_mat;
    let e_hat = solver.solve(&dict, &ys)?;
    observations
        .iter()
        .enumerate()
        .map(|(k, o)| finish(rig, o, e_hat.column(k).into_owned()))
        .collect()
}

/// Mean of `arccos(clamp(⟨ŵ, w⟩, −1, 1))` in radians.
pub fn mean_angular_error(w_hats: &[Vector3<f64>], w_trues: &[Vector3<f64>]) -> Result<f64> {
    Ok(angular_errors(w_hats, w_trues)?.iter().sum::<f64>() / w_hats.len() as f64)
}

/// Per-pixel angular errors in radians.
pub fn angular_errors(w_hats: &[Vector3<f64>], w_trues: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if w_hats.len() != w_trues.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimates for {} ground-truth normals",
            w_hats.len(),
            w_trues.len()
        )));
    }
    if w_hats.is_empty() {
        return Err(Error::InvalidDimension("empty normal batch".into()));
    }
    for (index, w) in w_hats.iter().chain(w_trues).enumerate() {
        let norm = w.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::NonUnitVector {
                index: index % w_hats.len(),
                norm,
            });
        }
    }
    Ok(w_hats
        .iter()
        .zip(w_trues)
        .map(|(a, b)| a.dot(b).clamp(-1.0, 1.0).acos())
        .collect())
}
