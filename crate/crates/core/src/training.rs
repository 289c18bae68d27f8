//! Supervised stage-wise training of unrolled networks.
//!
//! Gradients are computed by hand-written reverse-mode differentiation through
//! the layer recursions, using derivative 0 at soft-threshold kinks. The
//! schedule grows the network one layer at a time: each stage first fits the
//! newly enabled layer alone, then fine-tunes every enabled parameter at each
//! decayed learning rate. Every phase ends when validation stops improving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::nmse_db_matrix;
use crate::problem::{observe_with, Dictionary, SignalClass, Snr};
use crate::rng::{rng_for, TAG_TRAIN, TAG_VALID};
use crate::unrolled::{forward_batch, kink_fraction, LayerTrace, NetKind, NetParams, Slot};

/// `½‖x̂ − x*‖²`.
pub fn loss(x_hat: &DVector<f64>, x_star: &DVector<f64>) -> Result<f64> {
    if x_hat.len() != x_star.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs have lengths {} and {}",
            x_hat.len(),
            x_star.len()
        )));
    }
    Ok(0.5 * (x_hat - x_star).norm_squared())
}

/// Mean over columns of `½‖x̂_b − x*_b‖²`.
pub fn batch_loss(x_hat: &DMatrix<f64>, x_star: &DMatrix<f64>) -> f64 {
    0.5 * (x_hat - x_star).norm_squared() / x_hat.ncols().max(1) as f64
}

/// Gradients with the same layout as the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub NetParams);

impl GradientSet {
    pub fn params(&self) -> &NetParams {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Masks `g` by the active set of a soft-threshold with argument `pre` and
/// returns the threshold derivative.
fn through_shrink(g: &DMatrix<f64>, pre: &DMatrix<f64>, theta: f64) -> (DMatrix<f64>, f64) {
    let mut gu = g.clone();
    let mut d_theta = 0.0;
    for (gv, &u) in gu.iter_mut().zip(pre.iter()) {
        if u.abs() > theta {
            d_theta -= *gv * u.signum();
        } else {
            *gv = 0.0;
        }
    }
    (gu, d_theta)
}

fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

struct ElistaLayerGrad {
    d_m1: DMatrix<f64>,
    d_m2: DMatrix<f64>,
    d_theta1: f64,
    d_theta2: f64,
    d_input: DMatrix<f64>,
}

fn elista_layer_backward(
    a: &DMatrix<f64>,
    m1: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    theta1: f64,
    theta2: f64,
    layer: &crate::unrolled::LayerRecord,
    g_out: &DMatrix<f64>,
) -> ElistaLayerGrad {
    let (s1, s2) = (&layer.stages[0], &layer.stages[1]);
    let r1 = s1.residual.as_ref().expect("residual stage");
    let r2 = s2.residual.as_ref().expect("residual stage");

    // x⁺ = ST(x − M₂ r₂, θ₂),  r₂ = A h − y
    let (gu2, d_theta2) = through_shrink(g_out, &s2.pre, theta2);
    let m2t_gu2 = m2.tr_mul(&gu2);
    let d_m2 = -(&gu2 * r2.transpose());
    let g_half = -a.tr_mul(&m2t_gu2);

    // h = ST(x − M₁ r₁, θ₁),  r₁ = A x − y
    let (gu1, d_theta1) = through_shrink(&g_half, &s1.pre, theta1);
    let m1t_gu1 = m1.tr_mul(&gu1);
    let d_m1 = -(&gu1 * r1.transpose());
    let d_input = &gu2 + &gu1 - a.tr_mul(&m1t_gu1);

    ElistaLayerGrad {
        d_m1,
        d_m2,
        d_theta1,
        d_theta2,
        d_input,
    }
}

/// Exact gradients of the mean batch loss with respect to every parameter.
/// Layers beyond the traced depth receive zero gradient.
pub fn backward(
    params: &NetParams,
    a: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x_star: &DMatrix<f64>,
    trace: &LayerTrace,
) -> Result<GradientSet> {
    if trace.kind != params.kind() {
        return Err(Error::StaleTrace(format!(
            "trace is for {}, parameters are {}",
            trace.kind,
            params.kind()
        )));
    }
    let depth = trace.layers.len();
    let (m, n) = params.dims();
    let batch = y.ncols();
    let stages = if params.kind() == NetKind::Lista { 1 } else { 2 };
    let stale = depth == 0
        || depth > params.depth()
        || trace.layers.iter().any(|l| {
            l.input.shape() != (n, batch)
                || l.stages.len() != stages
                || l.stages.iter().any(|s| s.pre.shape() != (n, batch))
        });
    if stale {
        return Err(Error::StaleTrace(format!(
            "expected up to {} layers of {stages} stage(s) on an {n}x{batch} batch",
            params.depth()
        )));
    }
    if y.nrows() != m || x_star.shape() != (n, batch) {
        return Err(Error::ShapeMismatch(format!(
            "batch shapes y {:?}, x* {:?} do not fit m = {m}, n = {n}",
            y.shape(),
            x_star.shape()
        )));
    }

    let x_hat = trace.layers[depth - 1].output();
    let mut g = (x_hat - x_star) / batch as f64;
    let mut grads = params.zeros_like();

    for t in (0..depth).rev() {
        let layer = &trace.layers[t];
        match (params, &mut grads) {
            (NetParams::Lista(p), NetParams::Lista(d)) => {
                let (gu, d_theta) = through_shrink(&g, &layer.stages[0].pre, p.theta[t]);
                d.w1[t] = &gu * y.transpose();
                d.w2[t] = &gu * layer.input.transpose();
                d.theta[t] = d_theta;
                g = p.w2[t].tr_mul(&gu);
            }
            (NetParams::ElistaUntied(p), NetParams::ElistaUntied(d)) => {
                let lg = elista_layer_backward(
                    a, &p.w1[t], &p.w2[t], p.theta1[t], p.theta2[t], layer, &g,
                );
                d.w1[t] = lg.d_m1;
                d.w2[t] = lg.d_m2;
                d.theta1[t] = lg.d_theta1;
                d.theta2[t] = lg.d_theta2;
                g = lg.d_input;
            }
            (NetParams::ElistaTied(p), NetParams::ElistaTied(d)) => {
                let m1 = p.scaled(p.alpha1[t]);
                let m2 = p.scaled(p.alpha2[t]);
                let lg = elista_layer_backward(
                    a, &m1, &m2, p.theta1[t], p.theta2[t], layer, &g,
                );
                d.alpha1[t] = frobenius_dot(&lg.d_m1, &p.w);
                d.alpha2[t] = frobenius_dot(&lg.d_m2, &p.w);
                d.w += lg.d_m1 * p.alpha1[t] + lg.d_m2 * p.alpha2[t];
                d.theta1[t] = lg.d_theta1;
                d.theta2[t] = lg.d_theta2;
                g = lg.d_input;
            }
            _ => unreachable!("gradient container mirrors parameters"),
        }
    }
    Ok(GradientSet(grads))
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub steps: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &NetParams) -> Self {
        let shapes: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            first: shapes.clone(),
            second: shapes,
            steps: 0,
        }
    }

    /// Updates the tensors whose slot passes `enabled`; thresholds are clamped
    /// at zero afterwards.
    pub fn step(
        &mut self,
        params: &mut NetParams,
        grads: &GradientSet,
        lr: f64,
        enabled: impl Fn(&Slot) -> bool,
    ) {
        self.steps += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.steps as i32);
        let slots = params.slots();
        let grad_tensors = grads.0.tensors();
        for (k, tensor) in params.tensors_mut().into_iter().enumerate() {
            let slot = slots[k];
            if !enabled(&slot) {
                continue;
            }
            let g = grad_tensors[k];
            let (m1, m2) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..tensor.len() {
                m1[i] = Self::BETA1 * m1[i] + (1.0 - Self::BETA1) * g[i];
                m2[i] = Self::BETA2 * m2[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let update = lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + Self::EPS);
                tensor[i] -= update;
                if slot.threshold && tensor[i] < 0.0 {
                    tensor[i] = 0.0;
                }
            }
        }
    }
}

/// Source of supervised `(x*, y)` pairs.
pub trait SampleSource {
    fn m(&self) -> usize;
    fn n(&self) -> usize;
    fn draw(&self, rng: &mut rand_chacha::ChaCha8Rng) -> (DVector<f64>, DVector<f64>);

    /// `(X*, Y)` with one column per sample.
    fn draw_batch(&self, count: usize, rng: &mut rand_chacha::ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut xs = DMatrix::zeros(self.n(), count);
        let mut ys = DMatrix::zeros(self.m(), count);
        for k in 0..count {
            let (x, y) = self.draw(rng);
            xs.set_column(k, &x);
            ys.set_column(k, &y);
        }
        (xs, ys)
    }
}

/// Sparse signals from a [`SignalClass`] observed through a dictionary.
#[derive(Debug, Clone)]
pub struct SyntheticSource<'a> {
    pub dict: &'a Dictionary,
    pub class: SignalClass,
    pub snr_db: Snr,
}

impl SampleSource for SyntheticSource<'_> {
    fn m(&self) -> usize {
        self.dict.m()
    }

    fn n(&self) -> usize {
        self.dict.n()
    }

    fn draw(&self, rng: &mut rand_chacha::ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        loop {
            let x = self.class.draw(self.dict.n(), rng);
            if let Ok(s) = observe_with(self.dict.matrix(), &x, self.snr_db, rng) {
                return (s.x_star, s.y);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Upper bound on training samples drawn in one phase.
    pub samples_per_stage: usize,
    pub lr_init: f64,
    /// Fine-tuning learning rates as multiples of `lr_init`.
    pub lr_decay_factors: Vec<f64>,
    pub validation_size: usize,
    pub seed: u64,
    /// Training steps between validation checks.
    pub val_interval: usize,
    /// Checks without relative improvement before a phase ends.
    pub patience: usize,
    pub min_rel_improvement: f64,
    /// `λ` for the classical initialization; `None` uses `0.1 ‖Aᵀy‖∞`
    /// averaged over the validation set.
    pub init_lambda: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            samples_per_stage: 64 * 4000,
            lr_init: 5e-4,
            lr_decay_factors: vec![1.0, 0.2, 0.02],
            validation_size: 1000,
            seed: 0,
            val_interval: 10,
            patience: 50,
            min_rel_improvement: 1e-4,
            init_lambda: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.batch_size == 0 || self.validation_size == 0 || self.samples_per_stage == 0 {
            return bad("batch_size, samples_per_stage and validation_size must be positive".into());
        }
        if self.val_interval == 0 || self.patience == 0 {
            return bad("val_interval and patience must be positive".into());
        }
        if !(self.lr_init >= 0.0) || !self.lr_init.is_finite() {
            return bad(format!("lr_init must be nonnegative, got {}", self.lr_init));
        }
        if self.lr_decay_factors.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("lr_decay_factors must lie in (0, 1]".into());
        }
        if self.lr_decay_factors.windows(2).any(|w| w[1] > w[0]) {
            return bad("lr_decay_factors must be nonincreasing".into());
        }
        if let Some(l) = self.init_lambda {
            if !(l >= 0.0) {
                return bad(format!("init_lambda must be nonnegative, got {l}"));
            }
        }
        Ok(())
    }

    fn max_steps_per_phase(&self) -> u64 {
        (self.samples_per_stage / self.batch_size).max(1) as u64
    }

    fn phases(&self) -> usize {
        1 + self.lr_decay_factors.len()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Zero-based index of the newest enabled layer.
    pub stage: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_nmse_db: f64,
    pub lr: f64,
    /// Fraction of soft-threshold arguments within 1e-3 of a kink.
    pub kink_fraction: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetParams,
    pub best_params: NetParams,
    pub optimizer: Adam,
    pub stage: usize,
    pub phase: usize,
    pub phase_step: u64,
    pub global_step: u64,
    pub best_val: f64,
    pub stale_checks: usize,
    pub init_lambda: f64,
    pub log: Vec<LogRow>,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub log: Vec<LogRow>,
    /// Validation NMSE (dB) of the returned parameters at full depth.
    pub val_nmse_db: f64,
    pub init_lambda: f64,
}

/// Margin used for the kink diagnostic in the log.
const KINK_MARGIN: f64 = 1e-3;

pub struct Trainer<'a, S: SampleSource> {
    source: &'a S,
    a: &'a DMatrix<f64>,
    cfg: TrainConfig,
    val_x: DMatrix<f64>,
    val_y: DMatrix<f64>,
    state: TrainState,
}

impl<'a, S: SampleSource> Trainer<'a, S> {
    pub fn new(
        kind: NetKind,
        a: &'a DMatrix<f64>,
        lipschitz: f64,
        source: &'a S,
        cfg: TrainConfig,
        depth: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if depth == 0 {
            return Err(Error::InvalidParameter("network depth must be >= 1".into()));
        }
        if a.shape() != (source.m(), source.n()) {
            return Err(Error::ShapeMismatch("dictionary does not match the sample source".into()));
        }
        let (val_x, val_y) = validation_set(source, &cfg);
        let init_lambda = cfg.init_lambda.unwrap_or_else(|| {
            let aty = a.tr_mul(&val_y);
            let mean_max: f64 = aty.column_iter().map(|c| c.amax()).sum::<f64>() / aty.ncols() as f64;
            0.1 * mean_max
        });
        let params = NetParams::init(kind, a, lipschitz, init_lambda, depth);
        let state = TrainState {
            optimizer: Adam::new(&params),
            best_params: params.clone(),
            params,
            stage: 0,
            phase: 0,
            phase_step: 0,
            global_step: 0,
            best_val: f64::INFINITY,
            stale_checks: 0,
            init_lambda,
            log: Vec::new(),
            finished: false,
        };
        Ok(Trainer { source, a, cfg, val_x, val_y, state })
    }

    /// Continues from a saved state. The validation set is regenerated from
    /// the config seed.
    pub fn resume(a: &'a DMatrix<f64>, source: &'a S, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        state.params.validate()?;
        if state.params.dims() != (source.m(), source.n()) || a.shape() != (source.m(), source.n()) {
            return Err(Error::ShapeMismatch("checkpoint does not match the problem dimensions".into()));
        }
        if state.optimizer.first.len() != state.params.tensors().len() {
            return Err(Error::InvalidParameter("optimizer state does not match parameters".into()));
        }
        let (val_x, val_y) = validation_set(source, &cfg);
        Ok(Trainer { source, a, cfg, val_x, val_y, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn depth(&self) -> usize {
        self.state.params.depth()
    }

    fn lr(&self) -> f64 {
        match self.state.phase {
            0 => self.cfg.lr_init,
            k => self.cfg.lr_init * self.cfg.lr_decay_factors[k - 1],
        }
    }

    fn phase_name(&self) -> String {
        match self.state.phase {
            0 => "new layer".into(),
            k => format!("fine-tune x{}", self.cfg.lr_decay_factors[k - 1]),
        }
    }

    /// Validation NMSE in dB at the current stage depth.
    pub fn validation_nmse(&self, params: &NetParams, depth: usize) -> Result<f64> {
        let (x_hat, _) = forward_batch(params, self.a, &self.val_y, depth, false)?;
        nmse_db_matrix(&x_hat, &self.val_x)
    }

    /// Runs until the schedule completes or `max_steps` more steps have been
    /// taken. Returns whether training is finished.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<bool> {
        let budget_end = max_steps.map(|s| self.state.global_step + s);
        while !self.state.finished {
            if budget_end.is_some_and(|end| self.state.global_step >= end) {
                return Ok(false);
            }
            self.step()?;
        }
        Ok(true)
    }

    fn step(&mut self) -> Result<()> {
        let depth = self.state.stage + 1;
        let lr = self.lr();
        let mut rng = rng_for(self.cfg.seed, &[TAG_TRAIN, self.state.global_step]);
        let (xs, ys) = self.source.draw_batch(self.cfg.batch_size, &mut rng);
        let (x_hat, trace) = forward_batch(&self.state.params, self.a, &ys, depth, true)?;
        let trace = trace.expect("recorded");
        let train_loss = batch_loss(&x_hat, &xs);
        let grads = backward(&self.state.params, self.a, &ys, &xs, &trace)?;

        let stage = self.state.stage;
        let new_layer_only = self.state.phase == 0;
        let enabled = |slot: &Slot| match slot.layer {
            Some(t) if new_layer_only => t == stage,
            Some(t) => t <= stage,
            None => !new_layer_only,
        };
        if grads.is_finite() {
            self.state.optimizer.step(&mut self.state.params, &grads, lr, enabled);
        }
        self.state.global_step += 1;
        self.state.phase_step += 1;

        if self.state.phase_step % self.cfg.val_interval as u64 == 0 {
            let val = self.validation_nmse(&self.state.params, depth)?;
            if !val.is_finite() || !train_loss.is_finite() {
                return Err(Error::Diverged {
                    stage,
                    phase: self.phase_name(),
                });
            }
            self.state.log.push(LogRow {
                stage,
                step: self.state.global_step,
                train_loss,
                val_nmse_db: val,
                lr,
                kink_fraction: kink_fraction(&self.state.params, &trace, KINK_MARGIN),
            });
            // compare in linear scale so the tolerance is a relative loss change
            let val_lin = 10f64.powf(val / 10.0);
            if val_lin < self.state.best_val * (1.0 - self.cfg.min_rel_improvement) {
                self.state.best_val = val_lin;
                self.state.best_params = self.state.params.clone();
                self.state.stale_checks = 0;
            } else {
                self.state.stale_checks += 1;
            }
        }
        let exhausted = self.state.phase_step >= self.cfg.max_steps_per_phase();
        if self.state.stale_checks >= self.cfg.patience || exhausted {
            self.end_phase()?;
        }
        Ok(())
    }

    fn end_phase(&mut self) -> Result<()> {
        let depth = self.state.stage + 1;
        // the last check may have improved slightly without clearing the
        // tolerance; keep whichever parameters validate better
        let current = 10f64.powf(self.validation_nmse(&self.state.params, depth)? / 10.0);
        if current.is_finite() && current < self.state.best_val {
            self.state.best_val = current;
            self.state.best_params = self.state.params.clone();
        }
        if !self.state.best_val.is_finite() {
            return Err(Error::Diverged {
                stage: self.state.stage,
                phase: self.phase_name(),
            });
        }
        self.state.params = self.state.best_params.clone();
        self.state.optimizer = Adam::new(&self.state.params);
        self.state.phase_step = 0;
        self.state.stale_checks = 0;
        self.state.best_val = f64::INFINITY;
        self.state.phase += 1;
        if self.state.phase == self.cfg.phases() {
            self.state.phase = 0;
            self.state.stage += 1;
            if self.state.stage == self.depth() {
                self.state.finished = true;
            }
        }
        Ok(())
    }

    pub fn into_outcome(self) -> Result<TrainOutcome> {
        let val = self.validation_nmse(&self.state.params, self.depth())?;
        Ok(TrainOutcome {
            params: self.state.params,
            log: self.state.log,
            val_nmse_db: val,
            init_lambda: self.state.init_lambda,
        })
    }
}

fn validation_set<S: SampleSource>(source: &S, cfg: &TrainConfig) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = rng_for(cfg.seed, &[TAG_VALID]);
    source.draw_batch(cfg.validation_size, &mut rng)
}

/// Trains a `depth`-layer network of the given kind on fresh synthetic
/// batches and returns the best-validation parameters with the log.
pub fn train_stagewise(
    kind: NetKind,
    dict: &Dictionary,
    class: &SignalClass,
    snr_db: Snr,
    cfg: &TrainConfig,
    depth: usize,
) -> Result<TrainOutcome> {
    class.validate()?;
    let source = SyntheticSource {
        dict,
        class: *class,
        snr_db,
    };
    train_on(kind, dict.matrix(), dict.lipschitz(), &source, cfg, depth)
}

pub fn train_on<S: SampleSource>(
    kind: NetKind,
    a: &DMatrix<f64>,
    lipschitz: f64,
    source: &S,
    cfg: &TrainConfig,
    depth: usize,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(kind, a, lipschitz, source, cfg.clone(), depth)?;
    trainer.run(None)?;
    trainer.into_outcome()
}
