//! Recovery metrics and the benchmark runner.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{eeg_solve, ista_solve, SolverConfig};
use crate::error::{Error, Result};
use crate::problem::{Dictionary, SignalClass, Snr};
use crate::rng::{rng_for, TAG_TEST};
use crate::training::{SampleSource, SyntheticSource};
use crate::unrolled::{forward_batch, param_count, NetKind, NetParams};

/// Reported in place of `-∞` for exact recovery.
pub const NMSE_FLOOR_DB: f64 = -320.0;

/// Errors are floored at this value before taking logs.
const ERROR_FLOOR: f64 = 1e-16;

fn nmse_from_sums(err: f64, energy: f64) -> Result<f64> {
    if energy == 0.0 {
        return Err(Error::ZeroTruth);
    }
    if err == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (err / energy).log10()).max(NMSE_FLOOR_DB))
}

/// `10 log10(Σ‖x̂ − x*‖² / Σ‖x*‖²)` over a batch.
pub fn nmse_db(estimates: &[DVector<f64>], truths: &[DVector<f64>]) -> Result<f64> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimates for {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (x, t) in estimates.iter().zip(truths) {
        if x.len() != t.len() {
            return Err(Error::ShapeMismatch("estimate and truth lengths differ".into()));
        }
        err += (x - t).norm_squared();
        energy += t.norm_squared();
    }
    nmse_from_sums(err, energy)
}

/// Column-batch version of [`nmse_db`].
pub fn nmse_db_matrix(x_hat: &DMatrix<f64>, x_star: &DMatrix<f64>) -> Result<f64> {
    if x_hat.shape() != x_star.shape() || x_hat.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "estimates {:?} vs truths {:?}",
            x_hat.shape(),
            x_star.shape()
        )));
    }
    nmse_from_sums((x_hat - x_star).norm_squared(), x_star.norm_squared())
}

/// NMSE after each layer, index 0 being the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseCurve {
    pub nmse_db: Vec<f64>,
    pub n_samples: usize,
}

impl NmseCurve {
    pub fn last(&self) -> f64 {
        *self.nmse_db.last().expect("curve has layer 0")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    /// Slope of `log ‖xᵗ − x*‖` against `t`.
    pub c_hat: f64,
    pub r_squared: f64,
    /// Batch-mean `|supp(xᵗ) \ supp(x*)|` for `t = 1..T`.
    pub false_positives: Vec<f64>,
    /// Batch-mean `‖xᵗ − x*‖₂` for `t = 1..T`.
    pub errors: Vec<f64>,
}

/// Least-squares fit of `log(error_t) ≈ a + c t`, `t = 1..T`. Returns
/// `(c, r²)`; `r²` is 0 when the errors are constant.
pub fn fit_log_linear(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.len() < 3 {
        return Err(Error::DegenerateFit(errors.len()));
    }
    let logs: Vec<f64> = errors.iter().map(|e| e.max(ERROR_FLOOR).ln()).collect();
    let k = logs.len() as f64;
    let t_mean = (k + 1.0) / 2.0;
    let l_mean = logs.iter().sum::<f64>() / k;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let dt = (i + 1) as f64 - t_mean;
        sxy += dt * (l - l_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    let intercept = l_mean - slope * t_mean;
    let ss_tot: f64 = logs.iter().map(|l| (l - l_mean).powi(2)).sum();
    let ss_res: f64 = logs
        .iter()
        .enumerate()
        .map(|(i, l)| (l - intercept - slope * (i + 1) as f64).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        0.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok((slope, r2))
}

pub fn estimate_rate(errors: &[f64]) -> Result<RateEstimate> {
    let (c_hat, r_squared) = fit_log_linear(errors)?;
    Ok(RateEstimate {
        c_hat,
        r_squared,
        false_positives: Vec::new(),
        errors: errors.to_vec(),
    })
}

/// `|supp(x) \ supp(x*)|` with an exact-zero support test.
pub fn false_positives(x: &DVector<f64>, x_star: &DVector<f64>) -> usize {
    x.iter()
        .zip(x_star.iter())
        .filter(|(v, t)| **v != 0.0 && **t == 0.0)
        .count()
}

/// Curve and rate from per-layer batch estimates `x⁰ … x^T`. With fewer
/// than three layers the rate is not identifiable: `c_hat` and `r_squared`
/// are NaN and the error trace is still reported.
pub fn layer_diagnostics(layers: &[DMatrix<f64>], x_star: &DMatrix<f64>) -> Result<(NmseCurve, RateEstimate)> {
    let curve = NmseCurve {
        nmse_db: layers
            .iter()
            .map(|x| nmse_db_matrix(x, x_star))
            .collect::<Result<_>>()?,
        n_samples: x_star.ncols(),
    };
    let batch = x_star.ncols() as f64;
    let mut errors = Vec::new();
    let mut fps = Vec::new();
    for x in &layers[1..] {
        let mut e = 0.0;
        let mut fp = 0usize;
        for (col, truth) in x.column_iter().zip(x_star.column_iter()) {
            e += (col - truth).norm();
            fp += col
                .iter()
                .zip(truth.iter())
                .filter(|(v, t)| **v != 0.0 && **t == 0.0)
                .count();
        }
        errors.push(e / batch);
        fps.push(fp as f64 / batch);
    }
    let mut rate = match estimate_rate(&errors) {
        Err(Error::DegenerateFit(_)) => RateEstimate {
            c_hat: f64::NAN,
            r_squared: f64::NAN,
            false_positives: Vec::new(),
            errors,
        },
        other => other?,
    };
    rate.false_positives = fps;
    Ok((curve, rate))
}

/// A method in a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Ista,
    Eeg,
    Net(NetKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ista => "ista",
            Method::Eeg => "eeg",
            Method::Net(k) => k.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ista" => Ok(Method::Ista),
            "eeg" => Ok(Method::Eeg),
            other => other.parse().map(Method::Net),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Method::parse(&s)
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().into()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-layer estimates `x⁰ … x^depth` of one method on a test batch.
pub fn method_layers(
    method: Method,
    dict: &Dictionary,
    y: &DMatrix<f64>,
    depth: usize,
    params: Option<&NetParams>,
    solver_lambda: Option<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let n = dict.n();
    match method {
        Method::Ista | Method::Eeg => {
            let cfg = SolverConfig {
                lambda: solver_lambda,
                max_iters: depth,
                record_trajectory: true,
                ..SolverConfig::default()
            };
            let x0 = DVector::zeros(n);
            let per_sample: Vec<Vec<DVector<f64>>> = (0..y.ncols())
                .into_par_iter()
                .map(|k| {
                    let yk = y.column(k).into_owned();
                    let traj = if method == Method::Ista {
                        ista_solve(dict, &yk, &cfg, &x0)?
                    } else {
                        eeg_solve(dict, &yk, &cfg, &x0)?
                    };
                    Ok(traj.iterates)
                })
                .collect::<Result<_>>()?;
            Ok((0..=depth)
                .map(|t| DMatrix::from_fn(n, y.ncols(), |i, k| per_sample[k][t][i]))
                .collect())
        }
        Method::Net(kind) => {
            let params = params.ok_or_else(|| Error::MissingCheckpoint(kind.name().into()))?;
            if params.kind() != kind {
                return Err(Error::MissingCheckpoint(format!(
                    "{} (found a {} checkpoint)",
                    kind,
                    params.kind()
                )));
            }
            let depth = depth.min(params.depth());
            let (_, trace) = forward_batch(params, dict.matrix(), y, depth, true)?;
            let trace = trace.expect("recorded");
            let mut out = vec![trace.layers[0].input.clone()];
            out.extend(trace.layers.iter().map(|l| l.output().clone()));
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub curves: Vec<NmseCurve>,
    pub rates: Vec<RateEstimate>,
    pub params: u64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = mean(v);
    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

impl MethodResult {
    pub fn final_nmse(&self) -> Vec<f64> {
        self.curves.iter().map(NmseCurve::last).collect()
    }

    pub fn median_final(&self) -> f64 {
        median(&self.final_nmse())
    }

    /// `(mean, std)` across seeds for each layer.
    pub fn layer_stats(&self) -> Vec<(f64, f64)> {
        let layers = self.curves[0].nmse_db.len();
        (0..layers)
            .map(|t| {
                let v: Vec<f64> = self.curves.iter().map(|c| c.nmse_db[t]).collect();
                (mean(&v), std_dev(&v))
            })
            .collect()
    }

    pub fn mean_c_hat(&self) -> f64 {
        mean(&self.rates.iter().map(|r| r.c_hat).collect::<Vec<_>>())
    }

    pub fn mean_r_squared(&self) -> f64 {
        mean(&self.rates.iter().map(|r| r.r_squared).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub kappa: f64,
    pub snr_db: Snr,
    pub depth: usize,
    pub results: Vec<MethodResult>,
}

impl BenchReport {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

/// Trained parameters keyed by `(kind, seed)`.
pub type TrainedNets = HashMap<(NetKind, u64), NetParams>;

/// A held-out batch `(X*, Y)` for one seed.
pub struct TestSet {
    pub seed: u64,
    pub x_star: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

pub fn test_set(dict: &Dictionary, class: &SignalClass, snr_db: Snr, n_test: usize, seed: u64) -> TestSet {
    let source = SyntheticSource {
        dict,
        class: *class,
        snr_db,
    };
    let (x_star, y) = source.draw_batch(n_test, &mut rng_for(seed, &[TAG_TEST]));
    TestSet { seed, x_star, y }
}

#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    methods: &[Method],
    dict: &Dictionary,
    class: &SignalClass,
    snr_db: Snr,
    n_test: usize,
    seeds: &[u64],
    depth: usize,
    trained: &TrainedNets,
) -> Result<BenchReport> {
    if n_test == 0 || seeds.is_empty() {
        return Err(Error::InvalidParameter("benchmark needs n_test >= 1 and at least one seed".into()));
    }
    let sets: Vec<TestSet> = seeds
        .iter()
        .map(|&s| test_set(dict, class, snr_db, n_test, s))
        .collect();
    benchmark_on(methods, dict, snr_db, &sets, depth, trained)
}

/// Benchmarks on explicit test sets.
pub fn benchmark_on(
    methods: &[Method],
    dict: &Dictionary,
    snr_db: Snr,
    sets: &[TestSet],
    depth: usize,
    trained: &TrainedNets,
) -> Result<BenchReport> {
    let mut results = Vec::new();
    for &method in methods {
        let mut curves = Vec::new();
        let mut rates = Vec::new();
        for set in sets {
            let params = match method {
                Method::Net(kind) => Some(
                    trained
                        .get(&(kind, set.seed))
                        .ok_or_else(|| Error::MissingCheckpoint(format!("{kind} (seed {})", set.seed)))?,
                ),
                _ => None,
            };
            let layers = method_layers(method, dict, &set.y, depth, params, None)?;
            let (curve, rate) = layer_diagnostics(&layers, &set.x_star)?;
            curves.push(curve);
            rates.push(rate);
        }
        let params = match method {
            Method::Net(kind) => param_count(kind, dict.m(), dict.n(), depth)?,
            _ => 0,
        };
        results.push(MethodResult {
            method,
            seeds: sets.iter().map(|s| s.seed).collect(),
            curves,
            rates,
            params,
        });
    }
    Ok(BenchReport {
        kappa: dict.kappa(),
        snr_db,
        depth,
        results,
    })
}

pub fn snr_label(snr: Snr) -> String {
    match snr {
        None => "inf".into(),
        Some(v) => format!("{v}"),
    }
}

pub const BENCH_CSV_HEADER: [&str; 9] = [
    "method", "kappa", "snr_db", "layer", "nmse_db_mean", "nmse_db_std", "c_hat", "r2", "params",
];

/// One CSV record per method and layer.
pub fn bench_csv_rows(report: &BenchReport) -> Vec<[String; 9]> {
    let mut rows = Vec::new();
    for r in &report.results {
        let (c, r2) = (r.mean_c_hat(), r.mean_r_squared());
        for (layer, (mu, sd)) in r.layer_stats().into_iter().enumerate() {
            rows.push([
                r.method.to_string(),
                format!("{}", report.kappa),
                snr_label(report.snr_db),
                layer.to_string(),
                format!("{mu:.6}"),
                format!("{sd:.6}"),
                format!("{c:.6}"),
                format!("{r2:.6}"),
                r.params.to_string(),
            ]);
        }
    }
    rows
}

/// Final-layer NMSE table: one row per (κ, SNR) cell, one column per method.
pub fn format_table(reports: &[BenchReport]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    for rep in reports {
        for r in &rep.results {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<24}", "cell");
    for m in &methods {
        let _ = write!(out, " | {:>20}", m.name());
    }
    out.push('\n');
    out.push_str(&"-".repeat(24 + methods.len() * 23));
    out.push('\n');
    for rep in reports {
        let snr = match rep.snr_db {
            None => "inf".to_string(),
            Some(v) => format!("{v}"),
        };
        let _ = write!(out, "{:<24}", format!("kappa={}, SNR={}", rep.kappa, snr));
        for m in &methods {
            match rep.result(*m) {
                Some(r) => {
                    let f = r.final_nmse();
                    let _ = write!(out, " | {:>11.3} ± {:>6.3}", mean(&f), std_dev(&f));
                }
                None => {
                    let _ = write!(out, " | {:>20}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
