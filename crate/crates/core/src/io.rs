//! On-disk formats.
//!
//! Binary archives hold exact `f64` data (dictionaries, sample sets,
//! checkpoints, resumable training state). Layout, little-endian:
//!
//! ```text
//! b"UNFD" u32:version str:kind
//! u32:n_meta   { str:key str:value }*
//! u32:n_tensor { str:name u64:rows u64:cols f64*(rows·cols, column-major) }*
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Scalars in metadata
//! use Rust's shortest round-trip formatting, so they reload bit for bit.
//! CSV files are for external tools and are never read back.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::eval::{bench_csv_rows, BenchReport, BENCH_CSV_HEADER};
use crate::problem::{Dictionary, SparseSample};
use crate::training::{Adam, LogRow, TrainState};
use crate::unrolled::{NetKind, NetParams};

const MAGIC: &[u8; 4] = b"UNFD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, DMatrix<f64>)>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Archive {
            kind: kind.into(),
            ..Archive::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn push(&mut self, name: &str, tensor: DMatrix<f64>) -> &mut Self {
        self.tensors.push((name.into(), tensor));
        self
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| self.malformed(format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| self.malformed(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| self.malformed(format!("missing tensor `{name}`")))
    }

    fn malformed(&self, reason: String) -> Error {
        Error::Archive {
            path: format!("<{} archive>", self.kind).into(),
            reason,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(self.malformed(format!("expected a {kind} archive")))
        }
    }

    pub fn to_writer(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(w, &self.kind)?;
        w.write_u32::<LittleEndian>(self.meta.len() as u32)?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_u64::<LittleEndian>(t.nrows() as u64)?;
            w.write_u64::<LittleEndian>(t.ncols() as u64)?;
            for &v in t.as_slice() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Parses an archive; `Err(reason)` on malformed input.
    pub fn from_reader(r: &mut impl Read) -> std::result::Result<Self, String> {
        let io = |e: std::io::Error| format!("truncated or unreadable: {e}");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err("not an archive (bad magic)".into());
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = read_str(r)?;
        let n_meta = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }
        let n_tensors = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let name = read_str(r)?;
            let rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let cols = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&l| l <= 1 << 32)
                .ok_or_else(|| format!("tensor `{name}` has implausible shape {rows} × {cols}"))?;
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            tensors.push((name, DMatrix::from_vec(rows, cols, data)));
        }
        Ok(Archive {
            kind,
            meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.to_writer(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Archive::from_reader(&mut BufReader::new(file)).map_err(|reason| Error::Archive {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::result::Result<String, String> {
    let len = r
        .read_u32::<LittleEndian>()
        .map_err(|e| format!("truncated string: {e}"))? as usize;
    if len > 1 << 20 {
        return Err(format!("string length {len} is implausible"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| format!("truncated string: {e}"))?;
    String::from_utf8(buf).map_err(|_| "string is not UTF-8".into())
}

pub fn dictionary_archive(dict: &Dictionary) -> Archive {
    let mut ar = Archive::new("dictionary");
    ar.set("m", dict.m())
        .set("n", dict.n())
        .set("kappa", dict.kappa())
        .set("sigma_max_sq", dict.lipschitz())
        .push("matrix", dict.matrix().clone());
    if let Some(seed) = dict.seed() {
        ar.set("seed", seed);
    }
    ar
}

pub fn dictionary_from_archive(ar: &Archive) -> Result<Dictionary> {
    ar.expect_kind("dictionary")?;
    let matrix = ar.tensor("matrix")?.clone();
    let (m, n): (usize, usize) = (ar.get("m")?, ar.get("n")?);
    if matrix.shape() != (m, n) {
        return Err(ar.malformed(format!("matrix is {:?}, header says {m} × {n}", matrix.shape())));
    }
    let seed = if ar.meta.contains_key("seed") { Some(ar.get("seed")?) } else { None };
    Ok(Dictionary::from_parts(matrix, ar.get("sigma_max_sq")?, ar.get("kappa")?, seed))
}

pub fn save_dictionary(dict: &Dictionary, path: &Path) -> Result<()> {
    dictionary_archive(dict).write(path)
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    dictionary_from_archive(&Archive::read(path)?).map_err(|e| relabel(e, path))
}

/// Replaces the placeholder path in archive errors with the real one.
fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Archive { reason, .. } => Error::Archive {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

/// A batch of samples stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub x_star: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub snr_db: Option<f64>,
}

impl SampleSet {
    pub fn from_samples(samples: &[SparseSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidDimension("empty sample batch".into()))?;
        let cols = |f: &dyn Fn(&SparseSample) -> &nalgebra::DVector<f64>| {
            DMatrix::from_columns(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
        };
        Ok(SampleSet {
            x_star: cols(&|s| &s.x_star),
            y: cols(&|s| &s.y),
            noise: cols(&|s| &s.noise),
            snr_db: first.snr_db,
        })
    }

    pub fn len(&self) -> usize {
        self.x_star.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn save_samples(set: &SampleSet, path: &Path) -> Result<()> {
    let mut ar = Archive::new("samples");
    ar.set("snr_db", set.snr_db.unwrap_or(f64::INFINITY))
        .push("x_star", set.x_star.clone())
        .push("y", set.y.clone())
        .push("noise", set.noise.clone());
    ar.write(path)
}

pub fn load_samples(path: &Path) -> Result<SampleSet> {
    let ar = Archive::read(path)?;
    let inner = || -> Result<SampleSet> {
        ar.expect_kind("samples")?;
        let snr: f64 = ar.get("snr_db")?;
        let set = SampleSet {
            x_star: ar.tensor("x_star")?.clone(),
            y: ar.tensor("y")?.clone(),
            noise: ar.tensor("noise")?.clone(),
            snr_db: snr.is_finite().then_some(snr),
        };
        if set.y.ncols() != set.x_star.ncols() || set.noise.shape() != set.y.shape() {
            return Err(ar.malformed("sample tensors disagree in shape".into()));
        }
        Ok(set)
    };
    inner().map_err(|e| relabel(e, path))
}

fn push_params(ar: &mut Archive, prefix: &str, params: &NetParams) {
    for (k, t) in params.tensors().iter().enumerate() {
        ar.push(&format!("{prefix}{k}"), DMatrix::from_column_slice(t.len(), 1, t));
    }
}

/// Rebuilds parameters of a known kind and shape from flat tensors.
fn read_params(
    ar: &Archive,
    prefix: &str,
    kind: NetKind,
    m: usize,
    n: usize,
    depth: usize,
) -> Result<NetParams> {
    let mut p = NetParams::init(kind, &DMatrix::zeros(m, n), 1.0, 0.0, depth);
    for (k, slot) in p.tensors_mut().into_iter().enumerate() {
        let t = ar.tensor(&format!("{prefix}{k}"))?;
        if t.len() != slot.len() {
            return Err(ar.malformed(format!("tensor {prefix}{k} has {} entries, expected {}", t.len(), slot.len())));
        }
        slot.copy_from_slice(t.as_slice());
    }
    if ar.tensors.iter().any(|(name, _)| {
        name.strip_prefix(prefix)
            .and_then(|i| i.parse::<usize>().ok())
            .is_some_and(|i| i >= p.tensors().len())
    }) {
        return Err(ar.malformed("more parameter tensors than the header implies".into()));
    }
    Ok(p)
}

fn set_shape(ar: &mut Archive, params: &NetParams) {
    let (m, n) = params.dims();
    ar.set("net", params.kind())
        .set("m", m)
        .set("n", n)
        .set("depth", params.depth());
}

fn read_shape(ar: &Archive) -> Result<(NetKind, usize, usize, usize)> {
    let kind: String = ar.get("net")?;
    let kind: NetKind = kind
        .parse()
        .map_err(|_| ar.malformed(format!("unknown network kind `{kind}`")))?;
    Ok((kind, ar.get("m")?, ar.get("n")?, ar.get("depth")?))
}

pub fn save_params(params: &NetParams, path: &Path) -> Result<()> {
    let mut ar = Archive::new("checkpoint");
    set_shape(&mut ar, params);
    push_params(&mut ar, "p", params);
    ar.write(path)
}

pub fn load_params(path: &Path) -> Result<NetParams> {
    let ar = Archive::read(path)?;
    let inner = || -> Result<NetParams> {
        ar.expect_kind("checkpoint")?;
        let (kind, m, n, depth) = read_shape(&ar)?;
        let p = read_params(&ar, "p", kind, m, n, depth)?;
        p.validate()?;
        Ok(p)
    };
    inner().map_err(|e| relabel(e, path))
}

const LOG_COLUMNS: usize = 6;

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let mut ar = Archive::new("train_state");
    set_shape(&mut ar, &state.params);
    ar.set("stage", state.stage)
        .set("phase", state.phase)
        .set("phase_step", state.phase_step)
        .set("global_step", state.global_step)
        .set("best_val", state.best_val)
        .set("stale_checks", state.stale_checks)
        .set("init_lambda", state.init_lambda)
        .set("finished", state.finished)
        .set("adam_steps", state.optimizer.steps);
    push_params(&mut ar, "p", &state.params);
    push_params(&mut ar, "best", &state.best_params);
    for (k, (m1, m2)) in state.optimizer.first.iter().zip(&state.optimizer.second).enumerate() {
        ar.push(&format!("adam_m{k}"), DMatrix::from_column_slice(m1.len(), 1, m1));
        ar.push(&format!("adam_v{k}"), DMatrix::from_column_slice(m2.len(), 1, m2));
    }
    let log = DMatrix::from_fn(state.log.len(), LOG_COLUMNS, |i, j| {
        let r = &state.log[i];
        match j {
            0 => r.stage as f64,
            1 => r.step as f64,
            2 => r.train_loss,
            3 => r.val_nmse_db,
            4 => r.lr,
            _ => r.kink_fraction,
        }
    });
    ar.push("log", log);
    ar.write(path)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let ar = Archive::read(path)?;
    let inner = || -> Result<TrainState> {
        ar.expect_kind("train_state")?;
        let (kind, m, n, depth) = read_shape(&ar)?;
        let params = read_params(&ar, "p", kind, m, n, depth)?;
        let best_params = read_params(&ar, "best", kind, m, n, depth)?;
        let mut optimizer = Adam::new(&params);
        optimizer.steps = ar.get("adam_steps")?;
        for k in 0..optimizer.first.len() {
            let m1 = ar.tensor(&format!("adam_m{k}"))?;
            let m2 = ar.tensor(&format!("adam_v{k}"))?;
            if m1.len() != optimizer.first[k].len() || m2.len() != optimizer.second[k].len() {
                return Err(ar.malformed(format!("optimizer tensor {k} has the wrong size")));
            }
            optimizer.first[k].copy_from_slice(m1.as_slice());
            optimizer.second[k].copy_from_slice(m2.as_slice());
        }
        let log_t = ar.tensor("log")?;
        if log_t.ncols() != LOG_COLUMNS && log_t.nrows() != 0 {
            return Err(ar.malformed("training log has the wrong width".into()));
        }
        let log = (0..log_t.nrows())
            .map(|i| LogRow {
                stage: log_t[(i, 0)] as usize,
                step: log_t[(i, 1)] as u64,
                train_loss: log_t[(i, 2)],
                val_nmse_db: log_t[(i, 3)],
                lr: log_t[(i, 4)],
                kink_fraction: log_t[(i, 5)],
            })
            .collect();
        Ok(TrainState {
            params,
            best_params,
            optimizer,
            stage: ar.get("stage")?,
            phase: ar.get("phase")?,
            phase_step: ar.get("phase_step")?,
            global_step: ar.get("global_step")?,
            best_val: ar.get("best_val")?,
            stale_checks: ar.get("stale_checks")?,
            init_lambda: ar.get("init_lambda")?,
            log,
            finished: ar.get("finished")?,
        })
    };
    inner().map_err(|e| relabel(e, path))
}

/// One CSV file per tensor, `t000.csv`, `t001.csv`, … in
/// [`NetParams::tensors`] order; weight matrices keep their `rows × cols`
/// shape, scalars are `1 × 1`.
pub fn write_params_csv(params: &NetParams, dir: &Path) -> Result<()> {
    let (m, n) = params.dims();
    for (k, t) in params.tensors().iter().enumerate() {
        let rows = match t.len() {
            1 => 1,
            l if l == n * m || l == n * n => n,
            l => l,
        };
        let mat = DMatrix::from_column_slice(rows, t.len() / rows, t);
        write_matrix_csv(&mat, &dir.join(format!("t{k:03}.csv")))?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish_csv(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a matrix as plain CSV rows.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    finish_csv(w, path)
}

pub fn write_log_csv(log: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    if log.is_empty() {
        w.write_record(["stage", "step", "train_loss", "val_nmse_db", "lr", "kink_fraction"])?;
    }
    for row in log {
        w.serialize(row)?;
    }
    finish_csv(w, path)
}

pub fn write_bench_csv(reports: &[BenchReport], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(BENCH_CSV_HEADER)?;
    for report in reports {
        for row in bench_csv_rows(report) {
            w.write_record(&row)?;
        }
    }
    finish_csv(w, path)
}

/// One pixel of a stereo result.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoRow {
    pub method: String,
    pub q: usize,
    pub seed: u64,
    pub pixel: usize,
    pub w_true: Vector3<f64>,
    pub w_hat: Vector3<f64>,
    pub angular_error: f64,
}

pub const STEREO_CSV_HEADER: [&str; 11] = [
    "method", "q", "seed", "pixel", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z",
    "angular_error",
];

pub fn write_stereo_csv(rows: &[StereoRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(STEREO_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.q.to_string(),
            r.seed.to_string(),
            r.pixel.to_string(),
            r.w_true[0].to_string(),
            r.w_true[1].to_string(),
            r.w_true[2].to_string(),
            r.w_hat[0].to_string(),
            r.w_hat[1].to_string(),
            r.w_hat[2].to_string(),
            r.angular_error.to_string(),
        ])?;
    }
    finish_csv(w, path)
}

/// Binary PPM of a normal map; `(x, y, z) ∈ [−1, 1]³` maps to RGB, background
/// pixels are black.
pub fn write_normal_map_ppm(
    resolution: usize,
    coords: &[(usize, usize)],
    normals: &[Vector3<f64>],
    path: &Path,
) -> Result<()> {
    let mut img = vec![0u8; 3 * resolution * resolution];
    for (&(r, c), w) in coords.iter().zip(normals) {
        if r >= resolution || c >= resolution {
            return Err(Error::InvalidParameter(format!("pixel ({r}, {c}) outside the image")));
        }
        for ch in 0..3 {
            let v = ((w[ch].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            img[3 * (r * resolution + c) + ch] = v;
        }
    }
    let mut out = format!("P6\n{resolution} {resolution}\n255\n").into_bytes();
    out.extend(img);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
