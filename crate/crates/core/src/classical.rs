//! ISTA and the extended extragradient method (EEG) for the Lasso
//! `P(x) = ½‖y − Ax‖² + λ‖x‖₁`.
//!
//! ISTA is evaluated in the affine form `ST(B y + S x, θ)` with
//! `B = (c/L) Aᵀ`, `S = I − (c/L) AᵀA`; EEG in the residual form
//! `ST(x − M (A z − y), θ)` with `M = (c/L) Aᵀ`. These are exactly the layer
//! computations of LISTA and ELISTA, so an unrolled network at its classical
//! initialization reproduces the solver bit for bit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Dictionary, LipschitzConvention};
use crate::prox::shrink_in_place;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// ℓ1 weight; `None` selects `0.1 ‖Aᵀy‖∞` per instance.
    pub lambda: Option<f64>,
    pub max_iters: usize,
    /// Step size as a multiple of `1/L`, in (0, 2).
    pub step_scale: f64,
    pub record_trajectory: bool,
    pub convention: LipschitzConvention,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: None,
            max_iters: 16,
            step_scale: 1.0,
            record_trajectory: true,
            convention: LipschitzConvention::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "lambda must be nonnegative, got {l}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "step_scale must lie in (0, 2), got {}",
                self.step_scale
            )));
        }
        Ok(())
    }
}

/// Scale-free default regularization `0.1 ‖Aᵀy‖∞`.
pub fn default_lambda(a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    0.1 * a.tr_mul(y).amax()
}

pub fn objective(a: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * (y - a * x).norm_squared() + lambda * x.lp_norm(1)
}

/// `step · Aᵀ`.
pub(crate) fn scaled_transpose(a: &DMatrix<f64>, step: f64) -> DMatrix<f64> {
    a.transpose().map(|v| v * step)
}

/// The fixed matrices of one ISTA step: `x⁺ = ST(w_y y + w_x x, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IstaOperators {
    pub w_y: DMatrix<f64>,
    pub w_x: DMatrix<f64>,
    pub theta: f64,
}

pub fn ista_operators(
    a: &DMatrix<f64>,
    lipschitz: f64,
    lambda: f64,
    step_scale: f64,
) -> IstaOperators {
    let step = step_scale / lipschitz;
    let n = a.ncols();
    let gram = a.tr_mul(a);
    let w_x = DMatrix::from_fn(n, n, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - step * gram[(i, j)]
    });
    IstaOperators {
        w_y: scaled_transpose(a, step),
        w_x,
        theta: lambda * step,
    }
}

/// One affine-form layer on a batch: returns `(pre-activation, output)`.
pub(crate) fn affine_layer(
    w_y_times_y: &DMatrix<f64>,
    w_x: &DMatrix<f64>,
    x: &DMatrix<f64>,
    theta: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let u = w_y_times_y + w_x * x;
    let mut out = u.clone();
    shrink_in_place(out.as_mut_slice(), theta);
    (u, out)
}

/// One residual-form stage on a batch: `z ↦ ST(base − M (A z − y), theta)`.
/// Returns `(residual A z − y, pre-activation, output)`.
pub(crate) fn residual_stage(
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    base: &DMatrix<f64>,
    z: &DMatrix<f64>,
    step_matrix: &DMatrix<f64>,
    theta: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let r = a * z - y;
    let u = base - step_matrix * &r;
    let mut out = u.clone();
    shrink_in_place(out.as_mut_slice(), theta);
    (r, u, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x^0 .. x^T` when recorded, otherwise only `x^T`.
    pub iterates: Vec<DVector<f64>>,
    /// `x^{t+1/2}` for `t = 0 .. T-1` (EEG only).
    pub half_iterates: Option<Vec<DVector<f64>>>,
    /// `P(x)` for every stored iterate.
    pub objective_values: Vec<f64>,
    pub lambda: f64,
}

impl Trajectory {
    pub fn final_iterate(&self) -> &DVector<f64> {
        self.iterates.last().expect("trajectory is never empty")
    }

    /// `‖x^t − reference‖₂` for every stored iterate.
    pub fn errors_to(&self, reference: &DVector<f64>) -> Vec<f64> {
        self.iterates.iter().map(|x| (x - reference).norm()).collect()
    }
}

struct Prepared {
    lambda: f64,
    step: f64,
}

fn prepare(
    dict: &Dictionary,
    y: &DVector<f64>,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
) -> Result<Prepared> {
    cfg.validate()?;
    if y.len() != dict.m() {
        return Err(Error::ShapeMismatch(format!(
            "y has length {}, dictionary has {} rows",
            y.len(),
            dict.m()
        )));
    }
    if x0.len() != dict.n() {
        return Err(Error::ShapeMismatch(format!(
            "x0 has length {}, dictionary has {} columns",
            x0.len(),
            dict.n()
        )));
    }
    let lambda = cfg
        .lambda
        .unwrap_or_else(|| default_lambda(dict.matrix(), y));
    Ok(Prepared {
        lambda,
        step: cfg.step_scale / dict.lipschitz_with(cfg.convention),
    })
}

fn column(x: &DMatrix<f64>) -> DVector<f64> {
    x.column(0).into_owned()
}

pub fn ista_solve(
    dict: &Dictionary,
    y: &DVector<f64>,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
) -> Result<Trajectory> {
    let prep = prepare(dict, y, cfg, x0)?;
    let a = dict.matrix();
    let ops = ista_operators(
        a,
        dict.lipschitz_with(cfg.convention),
        prep.lambda,
        cfg.step_scale,
    );
    let y_mat = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let by = &ops.w_y * &y_mat;
    let mut x = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());

    let mut iterates = Vec::new();
    let mut objective_values = Vec::new();
    if cfg.record_trajectory {
        iterates.push(x0.clone());
        objective_values.push(objective(a, y, x0, prep.lambda));
    }
    for _ in 0..cfg.max_iters {
        x = affine_layer(&by, &ops.w_x, &x, ops.theta).1;
        if cfg.record_trajectory {
            let xv = column(&x);
            objective_values.push(objective(a, y, &xv, prep.lambda));
            iterates.push(xv);
        }
    }
    if !cfg.record_trajectory {
        let xv = column(&x);
        objective_values.push(objective(a, y, &xv, prep.lambda));
        iterates.push(xv);
    }
    Ok(Trajectory {
        iterates,
        half_iterates: None,
        objective_values,
        lambda: prep.lambda,
    })
}

/// Where the full EEG step evaluates its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GradientPoint {
    /// The extragradient rule: gradient at `x^{t+1/2}`.
    Half,
    /// Degenerate rule reusing the gradient at `x^t`; reduces EEG to ISTA.
    #[cfg_attr(not(test), allow(dead_code))]
    Base,
}

pub(crate) fn eeg_iterate(
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    step_matrix: &DMatrix<f64>,
    x: &DMatrix<f64>,
    theta: f64,
    point: GradientPoint,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (_, _, half) = residual_stage(a, y, x, x, step_matrix, theta);
    let z = match point {
        GradientPoint::Half => &half,
        GradientPoint::Base => x,
    };
    let (_, _, next) = residual_stage(a, y, x, z, step_matrix, theta);
    (half, next)
}

pub fn eeg_solve(
    dict: &Dictionary,
    y: &DVector<f64>,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
) -> Result<Trajectory> {
    eeg_solve_with(dict, y, cfg, x0, GradientPoint::Half)
}

pub(crate) fn eeg_solve_with(
    dict: &Dictionary,
    y: &DVector<f64>,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
    point: GradientPoint,
) -> Result<Trajectory> {
    let prep = prepare(dict, y, cfg, x0)?;
    let a = dict.matrix();
    let step_matrix = scaled_transpose(a, prep.step);
    let theta = prep.lambda * prep.step;
    let y_mat = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let mut x = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());

    let mut iterates = Vec::new();
    let mut halves = Vec::new();
    let mut objective_values = Vec::new();
    if cfg.record_trajectory {
        iterates.push(x0.clone());
        objective_values.push(objective(a, y, x0, prep.lambda));
    }
    let mut last_half = None;
    for _ in 0..cfg.max_iters {
        let (half, next) = eeg_iterate(a, &y_mat, &step_matrix, &x, theta, point);
        x = next;
        if cfg.record_trajectory {
            halves.push(column(&half));
            let xv = column(&x);
            objective_values.push(objective(a, y, &xv, prep.lambda));
            iterates.push(xv);
        } else {
            last_half = Some(column(&half));
        }
    }
    if !cfg.record_trajectory {
        halves.extend(last_half);
        let xv = column(&x);
        objective_values.push(objective(a, y, &xv, prep.lambda));
        iterates.push(xv);
    }
    Ok(Trajectory {
        iterates,
        half_iterates: Some(halves),
        objective_values,
        lambda: prep.lambda,
    })
}

/// ISTA in residual form; differs from [`ista_solve`] only by rounding.
#[cfg(test)]
pub(crate) fn ista_residual_form(
    dict: &Dictionary,
    y: &DVector<f64>,
    lambda: f64,
    iters: usize,
) -> DVector<f64> {
    let step = 1.0 / dict.lipschitz();
    let m = scaled_transpose(dict.matrix(), step);
    let y_mat = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let mut x = DMatrix::zeros(dict.n(), 1);
    for _ in 0..iters {
        x = residual_stage(dict.matrix(), &y_mat, &x, &x, &m, lambda * step).2;
    }
    column(&x)
}
