//! Unrolled networks: LISTA, untied ELISTA and tied ELISTA.
//!
//! Every forward pass works on a batch `Y` of shape `m × B` (one column per
//! sample), starts from `x⁰ = 0`, and can stop after fewer layers than the
//! network holds, which is what stage-wise training needs.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classical::{affine_layer, ista_operators, residual_stage, scaled_transpose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Lista,
    ElistaUntied,
    ElistaTied,
}

impl NetKind {
    pub const ALL: [NetKind; 3] = [NetKind::Lista, NetKind::ElistaUntied, NetKind::ElistaTied];

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Lista => "lista",
            NetKind::ElistaUntied => "elista_untied",
            NetKind::ElistaTied => "elista_tied",
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown network kind `{s}`")))
    }
}

/// Number of learnable scalars of each network.
pub fn param_count(kind: NetKind, m: usize, n: usize, depth: usize) -> Result<u64> {
    if m == 0 || n == 0 || depth == 0 {
        return Err(Error::InvalidDimension(format!(
            "param_count needs m, n, T >= 1 (got m = {m}, n = {n}, T = {depth})"
        )));
    }
    let (m, n, t) = (m as u64, n as u64, depth as u64);
    Ok(match kind {
        NetKind::Lista => t * (n * m + n * n + 1),
        NetKind::ElistaUntied => t * (2 * n * m + 2),
        NetKind::ElistaTied => n * m + 4 * t,
    })
}

/// `x^{t+1} = ST(W₁ᵗ y + W₂ᵗ xᵗ, θᵗ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ListaParams {
    pub w1: Vec<DMatrix<f64>>,
    pub w2: Vec<DMatrix<f64>>,
    pub theta: Vec<f64>,
}

/// Two residual stages per layer with free matrices `W₁ᵗ`, `W₂ᵗ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElistaUntiedParams {
    pub w1: Vec<DMatrix<f64>>,
    pub w2: Vec<DMatrix<f64>>,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

/// Two residual stages per layer sharing one matrix `W` scaled by `α₁ᵗ`, `α₂ᵗ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElistaTiedParams {
    pub w: DMatrix<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

impl ListaParams {
    /// `W₁ = Aᵀ/L`, `W₂ = I − AᵀA/L`, `θ = λ/L` in every layer.
    pub fn from_ista(a: &DMatrix<f64>, lipschitz: f64, lambda: f64, depth: usize) -> Self {
        let ops = ista_operators(a, lipschitz, lambda, 1.0);
        ListaParams {
            w1: vec![ops.w_y; depth],
            w2: vec![ops.w_x; depth],
            theta: vec![ops.theta; depth],
        }
    }
}

impl ElistaUntiedParams {
    /// `W₁ = W₂ = Aᵀ/L`, `θ₁ = θ₂ = λ/L` in every layer.
    pub fn from_eeg(a: &DMatrix<f64>, lipschitz: f64, lambda: f64, depth: usize) -> Self {
        let step = 1.0 / lipschitz;
        let w = scaled_transpose(a, step);
        ElistaUntiedParams {
            w1: vec![w.clone(); depth],
            w2: vec![w; depth],
            theta1: vec![lambda * step; depth],
            theta2: vec![lambda * step; depth],
        }
    }
}

impl ElistaTiedParams {
    /// `W = Aᵀ/L`, `α₁ = α₂ = 1`, `θ₁ = θ₂ = λ/L`.
    pub fn from_eeg(a: &DMatrix<f64>, lipschitz: f64, lambda: f64, depth: usize) -> Self {
        let step = 1.0 / lipschitz;
        ElistaTiedParams {
            w: scaled_transpose(a, step),
            alpha1: vec![1.0; depth],
            alpha2: vec![1.0; depth],
            theta1: vec![lambda * step; depth],
            theta2: vec![lambda * step; depth],
        }
    }

    /// `α W` as used by one stage.
    pub fn scaled(&self, alpha: f64) -> DMatrix<f64> {
        self.w.map(|v| v * alpha)
    }

    /// The untied network with `W₁ᵗ = α₁ᵗ W`, `W₂ᵗ = α₂ᵗ W`.
    pub fn to_untied(&self) -> ElistaUntiedParams {
        ElistaUntiedParams {
            w1: self.alpha1.iter().map(|&a| self.scaled(a)).collect(),
            w2: self.alpha2.iter().map(|&a| self.scaled(a)).collect(),
            theta1: self.theta1.clone(),
            theta2: self.theta2.clone(),
        }
    }
}

/// Parameters of any unrolled network.
#[derive(Debug, Clone, PartialEq)]
pub enum NetParams {
    Lista(ListaParams),
    ElistaUntied(ElistaUntiedParams),
    ElistaTied(ElistaTiedParams),
}

/// Which layer a tensor belongs to (`None` = shared) and whether it is a
/// threshold (clamped at zero after updates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub layer: Option<usize>,
    pub threshold: bool,
}

impl NetParams {
    /// Classical initialization: LISTA from ISTA, ELISTA from EEG.
    pub fn init(kind: NetKind, a: &DMatrix<f64>, lipschitz: f64, lambda: f64, depth: usize) -> Self {
        match kind {
            NetKind::Lista => NetParams::Lista(ListaParams::from_ista(a, lipschitz, lambda, depth)),
            NetKind::ElistaUntied => {
                NetParams::ElistaUntied(ElistaUntiedParams::from_eeg(a, lipschitz, lambda, depth))
            }
            NetKind::ElistaTied => {
                NetParams::ElistaTied(ElistaTiedParams::from_eeg(a, lipschitz, lambda, depth))
            }
        }
    }

    pub fn kind(&self) -> NetKind {
        match self {
            NetParams::Lista(_) => NetKind::Lista,
            NetParams::ElistaUntied(_) => NetKind::ElistaUntied,
            NetParams::ElistaTied(_) => NetKind::ElistaTied,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            NetParams::Lista(p) => p.theta.len(),
            NetParams::ElistaUntied(p) => p.theta1.len(),
            NetParams::ElistaTied(p) => p.theta1.len(),
        }
    }

    /// `(m, n)` implied by the weight shapes.
    pub fn dims(&self) -> (usize, usize) {
        let w = match self {
            NetParams::Lista(p) => &p.w1[0],
            NetParams::ElistaUntied(p) => &p.w1[0],
            NetParams::ElistaTied(p) => &p.w,
        };
        (w.ncols(), w.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth == 0 {
            return Err(Error::InvalidParameter("network depth must be >= 1".into()));
        }
        let (m, n) = self.dims();
        let shape_err = |what: &str| Err(Error::ShapeMismatch(format!("{what} (m = {m}, n = {n}, T = {depth})")));
        match self {
            NetParams::Lista(p) => {
                if p.w1.len() != depth || p.w2.len() != depth {
                    return shape_err("LISTA layer count");
                }
                if p.w1.iter().any(|w| w.shape() != (n, m)) || p.w2.iter().any(|w| w.shape() != (n, n)) {
                    return shape_err("LISTA weight shape");
                }
            }
            NetParams::ElistaUntied(p) => {
                if p.w1.len() != depth || p.w2.len() != depth || p.theta2.len() != depth {
                    return shape_err("ELISTA layer count");
                }
                if p.w1.iter().chain(&p.w2).any(|w| w.shape() != (n, m)) {
                    return shape_err("ELISTA weight shape");
                }
            }
            NetParams::ElistaTied(p) => {
                if p.alpha1.len() != depth || p.alpha2.len() != depth || p.theta2.len() != depth {
                    return shape_err("tied ELISTA layer count");
                }
            }
        }
        let mut thresholds_ok = true;
        for (slot, data) in self.slots().iter().zip(self.tensors()) {
            if slot.threshold {
                thresholds_ok &= data.iter().all(|&t| t >= 0.0);
            }
        }
        if !thresholds_ok {
            return Err(Error::InvalidParameter("thresholds must be nonnegative".into()));
        }
        Ok(())
    }

    /// Tensor slots in a fixed order matching [`NetParams::tensors`].
    pub fn slots(&self) -> Vec<Slot> {
        let depth = self.depth();
        let mat = |t| Slot { layer: Some(t), threshold: false };
        let thr = |t| Slot { layer: Some(t), threshold: true };
        match self {
            NetParams::Lista(_) => (0..depth).flat_map(|t| [mat(t), mat(t), thr(t)]).collect(),
            NetParams::ElistaUntied(_) => {
                (0..depth).flat_map(|t| [mat(t), mat(t), thr(t), thr(t)]).collect()
            }
            NetParams::ElistaTied(_) => std::iter::once(Slot { layer: None, threshold: false })
                .chain((0..depth).flat_map(|t| [mat(t), mat(t), thr(t), thr(t)]))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            NetParams::Lista(p) => (0..p.theta.len())
                .flat_map(|t| {
                    [p.w1[t].as_slice(), p.w2[t].as_slice(), std::slice::from_ref(&p.theta[t])]
                })
                .collect(),
            NetParams::ElistaUntied(p) => (0..p.theta1.len())
                .flat_map(|t| {
                    [
                        p.w1[t].as_slice(),
                        p.w2[t].as_slice(),
                        std::slice::from_ref(&p.theta1[t]),
                        std::slice::from_ref(&p.theta2[t]),
                    ]
                })
                .collect(),
            NetParams::ElistaTied(p) => std::iter::once(p.w.as_slice())
                .chain((0..p.theta1.len()).flat_map(|t| {
                    [
                        std::slice::from_ref(&p.alpha1[t]),
                        std::slice::from_ref(&p.alpha2[t]),
                        std::slice::from_ref(&p.theta1[t]),
                        std::slice::from_ref(&p.theta2[t]),
                    ]
                }))
                .collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            NetParams::Lista(p) => p
                .w1
                .iter_mut()
                .zip(p.w2.iter_mut())
                .zip(p.theta.chunks_mut(1))
                .flat_map(|((a, b), c)| [a.as_mut_slice(), b.as_mut_slice(), c])
                .collect(),
            NetParams::ElistaUntied(p) => p
                .w1
                .iter_mut()
                .zip(p.w2.iter_mut())
                .zip(p.theta1.chunks_mut(1).zip(p.theta2.chunks_mut(1)))
                .flat_map(|((a, b), (c, d))| [a.as_mut_slice(), b.as_mut_slice(), c, d])
                .collect(),
            NetParams::ElistaTied(p) => {
                let mut out: Vec<&mut [f64]> = vec![p.w.as_mut_slice()];
                for (((a1, a2), t1), t2) in p
                    .alpha1
                    .chunks_mut(1)
                    .zip(p.alpha2.chunks_mut(1))
                    .zip(p.theta1.chunks_mut(1))
                    .zip(p.theta2.chunks_mut(1))
                {
                    out.extend([a1, a2, t1, t2]);
                }
                out
            }
        }
    }

    /// Number of scalars actually stored.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same kind and shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }
}

/// Intermediate values of one shrinkage stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// `A z − y` for residual-form stages.
    pub residual: Option<DMatrix<f64>>,
    /// Argument of the soft-threshold.
    pub pre: DMatrix<f64>,
    pub out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// `xᵗ`.
    pub input: DMatrix<f64>,
    /// One stage for LISTA, two (`x^{t+1/2}`, `x^{t+1}`) for ELISTA.
    pub stages: Vec<StageRecord>,
}

impl LayerRecord {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.stages.last().expect("layer has a stage").out
    }

    pub fn half(&self) -> Option<&DMatrix<f64>> {
        (self.stages.len() == 2).then(|| &self.stages[0].out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub kind: NetKind,
    pub layers: Vec<LayerRecord>,
}

impl LayerTrace {
    /// `x⁰, x¹, …, x^T` for one column of the batch.
    pub fn iterates(&self, col: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            out.push(first.input.column(col).into_owned());
        }
        out.extend(self.layers.iter().map(|l| l.output().column(col).into_owned()));
        out
    }

    /// `x^{t+1/2}` for one column (empty for LISTA).
    pub fn half_iterates(&self, col: usize) -> Vec<DVector<f64>> {
        self.layers
            .iter()
            .filter_map(|l| l.half().map(|h| h.column(col).into_owned()))
            .collect()
    }
}

fn check_batch(params: &NetParams, a: Option<&DMatrix<f64>>, y: &DMatrix<f64>, depth: usize) -> Result<()> {
    params.validate()?;
    let (m, n) = params.dims();
    if y.nrows() != m {
        return Err(Error::ShapeMismatch(format!(
            "observations have {} rows, network expects m = {m}",
            y.nrows()
        )));
    }
    if let Some(a) = a {
        if a.shape() != (m, n) {
            return Err(Error::ShapeMismatch(format!(
                "dictionary is {}x{}, network expects {m}x{n}",
                a.nrows(),
                a.ncols()
            )));
        }
    }
    if depth == 0 || depth > params.depth() {
        return Err(Error::InvalidParameter(format!(
            "cannot run {depth} layers of a {}-layer network",
            params.depth()
        )));
    }
    Ok(())
}

/// Runs the first `depth` layers on a batch. Returns `x^depth` and, when
/// `record` is set, every intermediate needed for backpropagation.
pub fn forward_batch(
    params: &NetParams,
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    depth: usize,
    record: bool,
) -> Result<(DMatrix<f64>, Option<LayerTrace>)> {
    let lista = matches!(params, NetParams::Lista(_));
    check_batch(params, (!lista).then_some(a), y, depth)?;
    let n = params.dims().1;
    let mut x = DMatrix::zeros(n, y.ncols());
    let mut layers = Vec::new();
    for t in 0..depth {
        let stages = match params {
            NetParams::Lista(p) => {
                let wy = &p.w1[t] * y;
                let (pre, out) = affine_layer(&wy, &p.w2[t], &x, p.theta[t]);
                vec![StageRecord { residual: None, pre, out }]
            }
            NetParams::ElistaUntied(p) => {
                elista_layer(a, y, &x, &p.w1[t], &p.w2[t], p.theta1[t], p.theta2[t])
            }
            NetParams::ElistaTied(p) => {
                let m1 = p.scaled(p.alpha1[t]);
                let m2 = p.scaled(p.alpha2[t]);
                elista_layer(a, y, &x, &m1, &m2, p.theta1[t], p.theta2[t])
            }
        };
        let next = stages.last().expect("stage").out.clone();
        if record {
            layers.push(LayerRecord { input: x, stages });
        }
        x = next;
    }
    let trace = record.then(|| LayerTrace { kind: params.kind(), layers });
    Ok((x, trace))
}

fn elista_layer(
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    m1: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    theta1: f64,
    theta2: f64,
) -> Vec<StageRecord> {
    let (r1, u1, half) = residual_stage(a, y, x, x, m1, theta1);
    let (r2, u2, next) = residual_stage(a, y, x, &half, m2, theta2);
    vec![
        StageRecord { residual: Some(r1), pre: u1, out: half },
        StageRecord { residual: Some(r2), pre: u2, out: next },
    ]
}

fn single(
    params: &NetParams,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    record: bool,
) -> Result<(DVector<f64>, Option<LayerTrace>)> {
    let y = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let (x, trace) = forward_batch(params, a, &y, params.depth(), record)?;
    Ok((x.column(0).into_owned(), trace))
}

pub fn lista_forward(
    params: &ListaParams,
    y: &DVector<f64>,
    record: bool,
) -> Result<(DVector<f64>, Option<LayerTrace>)> {
    let p = NetParams::Lista(params.clone());
    // LISTA never touches A; pass an empty placeholder
    single(&p, &DMatrix::zeros(0, 0), y, record)
}

pub fn elista_forward_untied(
    params: &ElistaUntiedParams,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    record: bool,
) -> Result<(DVector<f64>, Option<LayerTrace>)> {
    single(&NetParams::ElistaUntied(params.clone()), a, y, record)
}

pub fn elista_forward_tied(
    params: &ElistaTiedParams,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    record: bool,
) -> Result<(DVector<f64>, Option<LayerTrace>)> {
    single(&NetParams::ElistaTied(params.clone()), a, y, record)
}

/// Fraction of soft-threshold arguments within `margin` of a kink.
pub fn kink_fraction(params: &NetParams, trace: &LayerTrace, margin: f64) -> f64 {
    let mut near = 0usize;
    let mut total = 0usize;
    for (t, layer) in trace.layers.iter().enumerate() {
        for (k, stage) in layer.stages.iter().enumerate() {
            let theta = stage_threshold(params, t, k);
            near += stage
                .pre
                .iter()
                .filter(|u| (u.abs() - theta).abs() < margin)
                .count();
            total += stage.pre.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        near as f64 / total as f64
    }
}

pub(crate) fn stage_threshold(params: &NetParams, layer: usize, stage: usize) -> f64 {
    match (params, stage) {
        (NetParams::Lista(p), _) => p.theta[layer],
        (NetParams::ElistaUntied(p), 0) => p.theta1[layer],
        (NetParams::ElistaUntied(p), _) => p.theta2[layer],
        (NetParams::ElistaTied(p), 0) => p.theta1[layer],
        (NetParams::ElistaTied(p), _) => p.theta2[layer],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::{eeg_solve, ista_solve, SolverConfig};
    use crate::problem::{gen_dictionary, sample_batch, SignalClass};
    use rand::Rng;

    #[test]
    fn counts() {
        assert_eq!(param_count(NetKind::ElistaTied, 250, 500, 16).unwrap(), 125_064);
        assert_eq!(param_count(NetKind::Lista, 250, 500, 16).unwrap(), 6_000_016);
        assert_eq!(param_count(NetKind::ElistaUntied, 250, 500, 16).unwrap(), 16 * 250_002);
        for k in NetKind::ALL {
            assert!(param_count(k, 3, 5, 0).is_err());
        }
    }

    #[test]
    fn stored_scalars_match_counts() {
        let d = gen_dictionary(5, 9, 3.0, 0).unwrap();
        for k in NetKind::ALL {
            let p = NetParams::init(k, d.matrix(), d.lipschitz(), 0.1, 3);
            assert_eq!(p.len() as u64, param_count(k, 5, 9, 3).unwrap());
            assert_eq!(p.slots().len(), p.tensors().len());
            assert_eq!(p.dims(), (5, 9));
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in NetKind::ALL {
            assert_eq!(k.name().parse::<NetKind>().unwrap(), k);
        }
        assert!("glista".parse::<NetKind>().is_err());
    }

    #[test]
    fn single_identity_layer() {
        let p = ListaParams {
            w1: vec![DMatrix::identity(3, 2)],
            w2: vec![DMatrix::zeros(3, 3)],
            theta: vec![0.0],
        };
        let y = DVector::from_vec(vec![0.7, -1.2]);
        let (x, _) = lista_forward(&p, &y, false).unwrap();
        assert_eq!(x, DVector::from_vec(vec![0.7, -1.2, 0.0]));
    }

    #[test]
    fn initialization_matches_classical_solvers() {
        let d = gen_dictionary(20, 40, 5.0, 3).unwrap();
        let cls = SignalClass::new(1.0, 10, 0.1).unwrap();
        let lam = 0.08;
        for s in sample_batch(&d, &cls, Some(30.0), 5, 1).unwrap() {
            let cfg = SolverConfig {
                lambda: Some(lam),
                max_iters: 8,
                ..SolverConfig::default()
            };
            let ista = ista_solve(&d, &s.y, &cfg, &DVector::zeros(40)).unwrap();
            let eeg = eeg_solve(&d, &s.y, &cfg, &DVector::zeros(40)).unwrap();
            let lista = ListaParams::from_ista(d.matrix(), d.lipschitz(), lam, 8);
            let untied = ElistaUntiedParams::from_eeg(d.matrix(), d.lipschitz(), lam, 8);
            let tied = ElistaTiedParams::from_eeg(d.matrix(), d.lipschitz(), lam, 8);
            let (x_l, tr) = lista_forward(&lista, &s.y, true).unwrap();
            assert_eq!(&x_l, ista.final_iterate());
            assert_eq!(tr.unwrap().iterates(0), ista.iterates);
            let (x_u, _) = elista_forward_untied(&untied, d.matrix(), &s.y, false).unwrap();
            let (x_t, tr) = elista_forward_tied(&tied, d.matrix(), &s.y, true).unwrap();
            assert_eq!(&x_u, eeg.final_iterate());
            assert_eq!(&x_t, eeg.final_iterate());
            assert_eq!(&tr.unwrap().half_iterates(0), eeg.half_iterates.as_ref().unwrap());
        }
    }

    #[test]
    fn saturated_and_zero_networks() {
        let d = gen_dictionary(6, 12, 5.0, 0).unwrap();
        let y = d.matrix() * DVector::from_fn(12, |i, _| if i % 4 == 0 { 0.8 } else { 0.0 });
        let mut u = ElistaUntiedParams::from_eeg(d.matrix(), d.lipschitz(), 0.1, 4);
        u.theta1.fill(1e9);
        u.theta2.fill(1e9);
        assert_eq!(elista_forward_untied(&u, d.matrix(), &y, false).unwrap().0, DVector::zeros(12));
        let mut t = ElistaTiedParams::from_eeg(d.matrix(), d.lipschitz(), 0.1, 4);
        t.alpha1.fill(0.0);
        t.alpha2.fill(0.0);
        t.theta1.fill(0.0);
        t.theta2.fill(0.0);
        assert_eq!(elista_forward_tied(&t, d.matrix(), &y, false).unwrap().0, DVector::zeros(12));
    }

    #[test]
    fn tied_equals_untied_substitution() {
        let d = gen_dictionary(6, 12, 5.0, 0).unwrap();
        let mut rng = crate::rng::rng_for(4, &[]);
        for _ in 0..10 {
            let mut t = ElistaTiedParams::from_eeg(d.matrix(), d.lipschitz(), 0.1, 5);
            t.w.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            t.alpha1.iter_mut().for_each(|v| *v = rng.random_range(0.1..2.0));
            t.alpha2.iter_mut().for_each(|v| *v = rng.random_range(0.1..2.0));
            t.theta1.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.1));
            t.theta2.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.1));
            let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let a = elista_forward_tied(&t, d.matrix(), &y, false).unwrap().0;
            let b = elista_forward_untied(&t.to_untied(), d.matrix(), &y, false).unwrap().0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shape_errors() {
        let d = gen_dictionary(6, 12, 5.0, 0).unwrap();
        let t = ElistaTiedParams::from_eeg(d.matrix(), d.lipschitz(), 0.1, 2);
        assert!(matches!(
            elista_forward_tied(&t, d.matrix(), &DVector::zeros(5), false),
            Err(Error::ShapeMismatch(_))
        ));
        let other = gen_dictionary(5, 12, 5.0, 0).unwrap();
        assert!(elista_forward_tied(&t, other.matrix(), &DVector::zeros(6), false).is_err());
        let mut bad = ListaParams::from_ista(d.matrix(), d.lipschitz(), 0.1, 2);
        bad.w2.pop();
        assert!(lista_forward(&bad, &DVector::zeros(6), false).is_err());
        let mut neg = t.clone();
        neg.theta1[0] = -0.1;
        assert!(elista_forward_tied(&neg, d.matrix(), &DVector::zeros(6), false).is_err());
        let p = NetParams::ElistaTied(t);
        assert!(forward_batch(&p, d.matrix(), &DMatrix::zeros(6, 1), 3, false).is_err());
    }

    #[test]
    fn thresholded_outputs_are_exact_zeros() {
        let d = gen_dictionary(10, 20, 5.0, 2).unwrap();
        let p = NetParams::init(NetKind::ElistaTied, d.matrix(), d.lipschitz(), 0.2, 6);
        let cls = SignalClass::new(1.0, 5, 0.1).unwrap();
        let ys: Vec<_> = sample_batch(&d, &cls, None, 8, 0).unwrap().into_iter().map(|s| s.y).collect();
        let y = DMatrix::from_columns(&ys);
        let (x, _) = forward_batch(&p, d.matrix(), &y, 6, false).unwrap();
        assert!(x.iter().all(|v| *v == 0.0 || v.abs() >= f64::MIN_POSITIVE));
    }
}
