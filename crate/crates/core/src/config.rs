//! Run configuration: one TOML document per experiment.
//!
//! Every section rejects unknown keys. [`KEYS`] lists every accepted key with
//! its default and is kept complete by a test against [`RunConfig::default`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Method;
use crate::problem::{SignalClass, Snr};
use crate::training::TrainConfig;
use crate::unrolled::NetKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub m: usize,
    pub n: usize,
    /// One dictionary per entry.
    pub kappa: Vec<f64>,
    /// `inf` for noiseless observations.
    pub snr_db: Vec<f64>,
    pub bound: f64,
    pub sparsity: usize,
    pub support_prob: f64,
    pub dict_seed: u64,
    /// Test samples per seed.
    pub n_test: usize,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            m: 40,
            n: 80,
            kappa: vec![5.0, 500.0],
            snr_db: vec![f64::INFINITY, 30.0],
            bound: 1.0,
            sparsity: 20,
            support_prob: 0.1,
            dict_seed: 0,
            n_test: 1000,
        }
    }
}

impl ProblemConfig {
    pub fn class(&self) -> Result<SignalClass> {
        SignalClass::new(self.bound, self.sparsity, self.support_prob)
    }

    pub fn snrs(&self) -> Vec<Snr> {
        self.snr_db
            .iter()
            .map(|&s| if s == f64::INFINITY { None } else { Some(s) })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub kinds: Vec<NetKind>,
    pub depth: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            kinds: vec![NetKind::Lista, NetKind::ElistaTied],
            depth: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec![
                Method::Ista,
                Method::Eeg,
                Method::Net(NetKind::Lista),
                Method::Net(NetKind::ElistaTied),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StereoConfig {
    /// Number of lights per rig.
    pub q: Vec<usize>,
    /// Image side length in pixels.
    pub resolution: usize,
    pub corruption_frac: f64,
    /// Largest angle between a light and the viewing axis, radians.
    pub max_light_angle: f64,
    /// Iterations for classical solvers and layers for networks.
    pub depth: usize,
    pub methods: Vec<Method>,
    pub normal_maps: bool,
    pub train: TrainConfig,
}

impl Default for StereoConfig {
    fn default() -> Self {
        StereoConfig {
            q: vec![15, 25, 35],
            resolution: 24,
            corruption_frac: 0.4,
            max_light_angle: 1.0,
            depth: 8,
            methods: BenchConfig::default().methods,
            normal_maps: false,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Worker threads; 1 gives bit-reproducible runs regardless of machine.
    pub threads: usize,
    pub out_dir: PathBuf,
    /// Where `gen` writes and `train`/`bench` read data; defaults to
    /// `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub problem: ProblemConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub stereo: StereoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: (0..10).collect(),
            threads: 1,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            problem: ProblemConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            stereo: StereoConfig::default(),
        }
    }
}

/// `(key, default, meaning)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seeds", "[0, 1, ..., 9]", "training and test seeds; one trained network per seed"),
    ("threads", "1", "worker threads (1 = deterministic single-threaded)"),
    ("out_dir", "\"runs/default\"", "output directory"),
    ("data_dir", "<out_dir>/data", "dataset directory written by gen, read by train and bench"),
    ("problem.m", "40", "measurements (rows of A), m < n"),
    ("problem.n", "80", "signal length (columns of A)"),
    ("problem.kappa", "[5.0, 500.0]", "dictionary condition numbers"),
    ("problem.snr_db", "[inf, 30.0]", "observation SNRs in dB; inf = noiseless"),
    ("problem.bound", "1.0", "magnitude bound B on signal entries"),
    ("problem.sparsity", "20", "sparsity bound s"),
    ("problem.support_prob", "0.1", "per-coordinate support probability"),
    ("problem.dict_seed", "0", "dictionary seed"),
    ("problem.n_test", "1000", "test samples per seed"),
    ("network.kinds", "[\"lista\", \"elista_tied\"]", "networks to train: lista, elista_untied, elista_tied"),
    ("network.depth", "8", "layers T"),
    ("train.batch_size", "64", "samples per training step"),
    ("train.samples_per_stage", "256000", "sample budget per training phase"),
    ("train.lr_init", "0.0005", "learning rate for a new layer"),
    ("train.lr_decay_factors", "[1.0, 0.2, 0.02]", "fine-tuning rates as multiples of lr_init"),
    ("train.validation_size", "1000", "fixed validation samples"),
    ("train.seed", "0", "overridden by each entry of seeds"),
    ("train.val_interval", "10", "steps between validation checks"),
    ("train.patience", "50", "checks without improvement before a phase ends"),
    ("train.min_rel_improvement", "0.0001", "relative validation improvement that resets patience"),
    ("train.init_lambda", "0.1 * mean ||A^T y||_inf", "lambda for the classical initialization"),
    ("bench.methods", "[\"ista\", \"eeg\", \"lista\", \"elista_tied\"]", "methods to benchmark"),
    ("stereo.q", "[15, 25, 35]", "lights per rig"),
    ("stereo.resolution", "24", "image side length in pixels"),
    ("stereo.corruption_frac", "0.4", "fraction of corrupted intensities per pixel"),
    ("stereo.max_light_angle", "1.0", "largest light angle from the viewing axis, radians"),
    ("stereo.depth", "8", "solver iterations and network layers"),
    ("stereo.methods", "[\"ista\", \"eeg\", \"lista\", \"elista_tied\"]", "methods to evaluate"),
    ("stereo.normal_maps", "false", "also write PPM normal maps"),
    ("stereo.train.*", "as train.*", "training schedule for stereo networks (same keys as train)"),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let p = &self.problem;
        if p.m == 0 || p.m >= p.n {
            return bad(format!("problem.m must satisfy 0 < m < n, got m = {}, n = {}", p.m, p.n));
        }
        if p.kappa.is_empty() || p.kappa.iter().any(|k| !(*k >= 1.0) || !k.is_finite()) {
            return bad("problem.kappa must be a nonempty list of finite values >= 1".into());
        }
        if p.snr_db.is_empty() || p.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return bad("problem.snr_db must be a nonempty list of reals or inf".into());
        }
        p.class().map_err(|e| Error::Config(format!("problem: {e}")))?;
        if p.sparsity > p.n {
            return bad(format!("problem.sparsity ({}) exceeds n ({})", p.sparsity, p.n));
        }
        if p.n_test == 0 {
            return bad("problem.n_test must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.network.depth == 0 || self.stereo.depth == 0 {
            return bad("network.depth and stereo.depth must be >= 1".into());
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        self.stereo
            .train
            .validate()
            .map_err(|e| Error::Config(format!("stereo.train: {e}")))?;
        let s = &self.stereo;
        if s.q.iter().any(|&q| q < 4) || s.q.is_empty() {
            return bad("stereo.q entries must be >= 4".into());
        }
        if !(0.0..1.0).contains(&s.corruption_frac) {
            return bad(format!("stereo.corruption_frac must lie in [0, 1), got {}", s.corruption_frac));
        }
        if !(s.max_light_angle > 0.0 && s.max_light_angle < std::f64::consts::FRAC_PI_2) {
            return bad("stereo.max_light_angle must lie in (0, pi/2)".into());
        }
        if s.resolution == 0 {
            return bad("stereo.resolution must be positive".into());
        }
        Ok(())
    }

    /// Training config for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Human-readable key reference for `--help`.
    pub fn key_help() -> String {
        let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (key, default, doc) in KEYS {
            out.push_str(&format!("  {key:<width$}  {doc} [default: {default}]\n"));
        }
        out
    }
}
