//! Helpers shared by integration tests and the acceptance harness.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use unfold_core::problem::{Dictionary, SignalClass};
use unfold_core::rng::rng_for;
use unfold_core::training::{backward, batch_loss, SampleSource, SyntheticSource};
use unfold_core::unrolled::{forward_batch, kink_fraction, NetKind, NetParams};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Pre-activations must stay this far from every kink so that a step of
/// `FD_STEP` cannot cross one.
pub const KINK_MARGIN: f64 = 1e-3;

/// Classical initialization with every entry moved off its structured value:
/// weights by up to ±10 %, thresholds and step multipliers by up to ±30 %.
pub fn perturbed_params(kind: NetKind, dict: &Dictionary, lambda: f64, depth: usize, rng: &mut ChaCha8Rng) -> NetParams {
    let mut p = NetParams::init(kind, dict.matrix(), dict.lipschitz(), lambda, depth);
    let slots = p.slots();
    for (slot, t) in slots.iter().zip(p.tensors_mut()) {
        let spread = if slot.threshold || t.len() == 1 { 0.3 } else { 0.1 };
        for v in t.iter_mut() {
            *v *= 1.0 + rng.random_range(-spread..spread);
        }
    }
    p
}

pub fn loss_at(p: &NetParams, a: &DMatrix<f64>, y: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let depth = p.depth();
    batch_loss(&forward_batch(p, a, y, depth, false).unwrap().0, x)
}

/// A batch whose forward pass keeps every soft-threshold argument at least
/// `KINK_MARGIN` from a kink and leaves at least one active unit in every
/// stage, so that no layer is trivially dead. Returns the draw index with the
/// batch.
pub fn kink_free_batch(
    p: &NetParams,
    source: &SyntheticSource,
    batch: usize,
    seed: u64,
) -> (u64, DMatrix<f64>, DMatrix<f64>) {
    for k in 0..100_000u64 {
        let (x, y) = source.draw_batch(batch, &mut rng_for(seed, &[k]));
        let (_, tr) = forward_batch(p, source.dict.matrix(), &y, p.depth(), true).unwrap();
        let tr = tr.unwrap();
        let alive = tr
            .layers
            .iter()
            .all(|l| l.stages.iter().all(|s| s.out.iter().any(|v| *v != 0.0)));
        if alive && kink_fraction(p, &tr, KINK_MARGIN) == 0.0 {
            return (k, x, y);
        }
    }
    panic!("no kink-free batch in 100000 draws");
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
}

/// Compares every gradient coordinate with a central difference. The relative
/// error uses `max(|g_i|, floor · max_j |g_j|)` as denominator so that
/// coordinates whose true derivative is zero (inactive units) are judged on an
/// absolute scale tied to the gradient magnitude instead of on rounding noise.
pub fn fd_check(p: &NetParams, a: &DMatrix<f64>, y: &DMatrix<f64>, x: &DMatrix<f64>, floor: f64) -> FdReport {
    let (_, tr) = forward_batch(p, a, y, p.depth(), true).unwrap();
    let g = backward(p, a, y, x, &tr.unwrap()).unwrap();
    let g_tensors: Vec<Vec<f64>> = g.params().tensors().iter().map(|t| t.to_vec()).collect();
    let g_max = g_tensors.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if g_max == 0.0 {
        return FdReport { checked: 0, worst_rel: f64::INFINITY };
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, gt) in g_tensors.iter().enumerate() {
        for (i, &gi) in gt.iter().enumerate() {
            let mut plus = p.clone();
            plus.tensors_mut()[k][i] += FD_STEP;
            let mut minus = p.clone();
            minus.tensors_mut()[k][i] -= FD_STEP;
            let fd = (loss_at(&plus, a, y, x) - loss_at(&minus, a, y, x)) / (2.0 * FD_STEP);
            let denom = gi.abs().max(floor * g_max);
            worst = worst.max((fd - gi).abs() / denom);
            checked += 1;
        }
    }
    FdReport { checked, worst_rel: worst }
}

pub fn small_source(dict: &Dictionary) -> SyntheticSource<'_> {
    SyntheticSource {
        dict,
        class: SignalClass::new(1.0, 5, 0.2).unwrap(),
        snr_db: Some(30.0),
    }
}
