//! Orchestration of the benchmark grid and the stereo study.
//!
//! Jobs are independent and individually seeded, so running them on a
//! thread pool of any size gives the same numbers.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::classical::SolverConfig;
use crate::config::{RunConfig, StereoConfig};
use crate::error::Result;
use crate::eval::{median, run_benchmark, BenchReport, Method, TrainedNets};
use crate::problem::{gen_dictionary, Dictionary, Snr};
use crate::stereo::{
    angular_errors, build_projector, recover_batch, synth_scene, LightingRig, PixelSolver,
    StereoSource,
};
use crate::training::{train_on, train_stagewise, TrainOutcome};
use crate::unrolled::{NetKind, NetParams};

/// One `(κ, SNR)` cell of the benchmark grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub kappa: f64,
    pub snr_db: Snr,
}

impl Cell {
    /// File-name fragment, e.g. `k5_snrinf`.
    pub fn tag(&self) -> String {
        format!("k{}_snr{}", self.kappa, crate::eval::snr_label(self.snr_db))
    }
}

pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &kappa in &cfg.problem.kappa {
        for snr_db in cfg.problem.snrs() {
            out.push(Cell { kappa, snr_db });
        }
    }
    out
}

pub fn cell_dictionary(cfg: &RunConfig, kappa: f64) -> Result<Dictionary> {
    gen_dictionary(cfg.problem.m, cfg.problem.n, kappa, cfg.problem.dict_seed)
}

#[derive(Debug, Clone)]
pub struct TrainedNet {
    pub kind: NetKind,
    pub seed: u64,
    pub outcome: TrainOutcome,
}

/// Trains every configured network kind for every seed on one cell.
pub fn train_cell(cfg: &RunConfig, dict: &Dictionary, snr_db: Snr) -> Result<Vec<TrainedNet>> {
    let class = cfg.problem.class()?;
    let jobs: Vec<(NetKind, u64)> = cfg
        .network
        .kinds
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(kind, seed)| {
            let outcome = train_stagewise(
                kind,
                dict,
                &class,
                snr_db,
                &cfg.train_for(seed),
                cfg.network.depth,
            )?;
            Ok(TrainedNet { kind, seed, outcome })
        })
        .collect()
}

pub fn trained_map(nets: &[TrainedNet]) -> TrainedNets {
    nets.iter()
        .map(|t| ((t.kind, t.seed), t.outcome.params.clone()))
        .collect()
}

pub fn bench_cell(
    cfg: &RunConfig,
    dict: &Dictionary,
    snr_db: Snr,
    trained: &TrainedNets,
) -> Result<BenchReport> {
    run_benchmark(
        &cfg.bench.methods,
        dict,
        &cfg.problem.class()?,
        snr_db,
        cfg.problem.n_test,
        &cfg.seeds,
        cfg.network.depth,
        trained,
    )
}

/// Trains and benchmarks one cell in one go.
pub fn run_cell(cfg: &RunConfig, cell: Cell) -> Result<(BenchReport, Vec<TrainedNet>)> {
    let dict = cell_dictionary(cfg, cell.kappa)?;
    let nets = train_cell(cfg, &dict, cell.snr_db)?;
    let report = bench_cell(cfg, &dict, cell.snr_db, &trained_map(&nets))?;
    Ok((report, nets))
}

/// Result of one method on one synthetic scene.
#[derive(Debug, Clone)]
pub struct StereoTrial {
    pub method: Method,
    pub q: usize,
    pub seed: u64,
    pub resolution: usize,
    pub coords: Vec<(usize, usize)>,
    pub w_true: Vec<Vector3<f64>>,
    pub w_hat: Vec<Vector3<f64>>,
    pub errors: Vec<f64>,
    pub mean_error: f64,
    pub params: Option<NetParams>,
}

/// Runs every stereo method on the scene for `(q, seed)`. Networks are
/// trained on pixels drawn from the same rig and corruption level.
pub fn stereo_trials(cfg: &StereoConfig, q: usize, seed: u64) -> Result<Vec<StereoTrial>> {
    let rig = LightingRig::random(q, cfg.max_light_angle, seed)?;
    let projector = build_projector(&rig)?;
    let dict = projector.dictionary()?;
    let scene = synth_scene(cfg.resolution, &rig, cfg.corruption_frac, seed)?;
    let obs: Vec<_> = scene.pixels.iter().map(|p| p.o.clone()).collect();
    let w_true: Vec<Vector3<f64>> = scene
        .pixels
        .iter()
        .map(|p| p.w_true.expect("synthetic"))
        .collect();
    let source = StereoSource {
        rig: &rig,
        projector: &projector,
        corruption_frac: cfg.corruption_frac,
    };
    let solver_cfg = SolverConfig {
        max_iters: cfg.depth,
        record_trajectory: false,
        ..SolverConfig::default()
    };
    cfg.methods
        .par_iter()
        .map(|&method| {
            let params = match method {
                Method::Net(kind) => {
                    let train = crate::training::TrainConfig {
                        seed,
                        ..cfg.train.clone()
                    };
                    Some(train_on(kind, dict.matrix(), dict.lipschitz(), &source, &train, cfg.depth)?.params)
                }
                _ => None,
            };
            let solver = match (method, &params) {
                (Method::Ista, _) => PixelSolver::Ista(solver_cfg),
                (Method::Eeg, _) => PixelSolver::Eeg(solver_cfg),
                (Method::Net(_), Some(p)) => PixelSolver::Net {
                    params: p,
                    depth: cfg.depth,
                },
                (Method::Net(_), None) => unreachable!("trained above"),
            };
            let rec = recover_batch(&rig, &projector, &obs, &solver)?;
            let w_hat: Vec<Vector3<f64>> = rec.iter().map(|r| r.normal).collect();
            let errors = angular_errors(&w_hat, &w_true)?;
            let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
            Ok(StereoTrial {
                method,
                q,
                seed,
                resolution: scene.resolution,
                coords: scene.coords.clone(),
                w_true: w_true.clone(),
                w_hat,
                errors,
                mean_error,
                params,
            })
        })
        .collect()
}

/// All `(q, seed)` trials of a stereo study.
pub fn run_stereo(cfg: &StereoConfig, seeds: &[u64]) -> Result<Vec<StereoTrial>> {
    let jobs: Vec<(usize, u64)> = cfg
        .q
        .iter()
        .flat_map(|&q| seeds.iter().map(move |&s| (q, s)))
        .collect();
    let nested: Vec<Vec<StereoTrial>> = jobs
        .into_par_iter()
        .map(|(q, seed)| stereo_trials(cfg, q, seed))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Median over seeds of the mean angular error.
pub fn stereo_median(trials: &[StereoTrial], method: Method, q: usize) -> Option<f64> {
    let v: Vec<f64> = trials
        .iter()
        .filter(|t| t.method == method && t.q == q)
        .map(|t| t.mean_error)
        .collect();
    (!v.is_empty()).then(|| median(&v))
}

/// Median mean angular error (radians): one row per method, one column per q.
pub fn format_stereo_table(trials: &[StereoTrial], methods: &[Method], qs: &[usize]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "method");
    for q in qs {
        let _ = write!(out, "{:>12}", format!("q={q}"));
    }
    out.push('\n');
    for &m in methods {
        let _ = write!(out, "{:<14}", m.name());
        for &q in qs {
            match stereo_median(trials, m, q) {
                Some(v) => {
                    let _ = write!(out, "{v:>12.5}");
                }
                None => {
                    let _ = write!(out, "{:>12}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
