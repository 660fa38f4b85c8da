//! Bidirectional training: fusion and latent losses on the forward pass,
//! decomposition loss on the inverse pass from a freshly drawn latent.

use std::fmt;

use rand::seq::SliceRandom;

use crate::autodiff::{
    finite_diff_check, FaultSite, GradCheckError, GradCheckOptions, GradCheckReport, Tape, Var,
};
use crate::data::{batch, ImagePair};
use crate::flow::{FlowError, FlowModel, ModelVars};
use crate::latent::{sample_latent, stream_rng, LatentKind, LatentSpec};
use crate::losses::{
    loss_dec_on, loss_fusion_on, loss_total, loss_total_on, mmd_latent_on, q_ssim, LossWeights,
    MixedLoss, SsimConfig,
};
use crate::optim::{Adam, AdamConfig, Plateau};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Keys batch shuffling and every latent draw.
    pub seed: u64,
    pub weights: LossWeights,
    pub latent: LatentKind,
    pub ssim: SsimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr: 3e-4,
            adam: AdamConfig::default(),
            plateau_factor: 0.95,
            plateau_patience: 8,
            seed: 0,
            weights: LossWeights::default(),
            latent: LatentKind::StandardNormal,
            ssim: SsimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.plateau_patience < 1 {
            return bad("plateau_patience must be at least 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2 for the latent loss, got {}",
                self.batch_size
            ));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Whether the objective depends on the inverse pass at all.
    pub fn uses_inverse_pass(&self) -> bool {
        self.weights.alpha < 1.0
    }

    pub fn latent_spec(&self) -> LatentSpec {
        LatentSpec::new(self.latent, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value at step {step} during {stage}{}", fmt_breakdown(.breakdown))]
    NonFinite {
        step: u64,
        stage: &'static str,
        breakdown: Option<LossBreakdown>,
    },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Flow(FlowError),
    #[error(transparent)]
    Tensor(TensorError),
}

fn fmt_breakdown(b: &Option<LossBreakdown>) -> String {
    match b {
        Some(b) => format!(" (losses: {b})"),
        None => String::new(),
    }
}

fn is_non_finite(e: &FlowError) -> bool {
    matches!(
        e,
        FlowError::NonFinite { .. } | FlowError::Tensor(TensorError::NonFinite { .. })
    )
}

impl TrainError {
    pub fn is_non_finite(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } | TrainError::Tensor(TensorError::NonFinite { .. }) => true,
            TrainError::Flow(e) => is_non_finite(e),
            _ => false,
        }
    }
}

impl From<FlowError> for TrainError {
    fn from(e: FlowError) -> Self {
        TrainError::Flow(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Scalar values of every loss term of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub fusion: f64,
    pub ssim: f64,
    pub l2: f64,
    pub latent: f64,
    pub dec: f64,
    pub dec_ssim: f64,
    pub dec_l2: f64,
}

impl LossBreakdown {
    /// The total rebuilt from the logged sub-losses.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        loss_total(self.fusion, self.latent, self.dec, w)
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6e} fusion={:.6e} ssim={:.6e} l2={:.6e} latent={:.6e} dec={:.6e} dec_ssim={:.6e} dec_l2={:.6e}",
            self.total, self.fusion, self.ssim, self.l2, self.latent, self.dec, self.dec_ssim, self.dec_l2
        )
    }
}

/// Purposes of latent draws; each gets its own part of the stream space.
#[derive(Clone, Copy)]
enum Draw {
    Prior = 1,
    Resample = 2,
    ValPrior = 3,
    ValResample = 4,
    Shuffle = 5,
}

fn draw_key(purpose: Draw, index: u64) -> u64 {
    ((purpose as u64) << 56) | (index & ((1 << 56) - 1))
}

/// Stable 64-bit FNV-1a hash, used to key validation draws by image id.
pub fn id_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// The latent [`validate`] decodes image `id` from, for callers that need to
/// reproduce its decomposition outside the trainer.
pub fn validation_latent<T: Scalar>(spec: &LatentSpec, id: &str, shape: &[usize]) -> Tensor<T> {
    sample_latent(spec, shape, draw_key(Draw::ValResample, id_key(id)))
}

struct StepVars {
    total: Var,
    fusion: MixedLoss,
    latent: Var,
    dec: Option<MixedLoss>,
}

/// Records the full objective for one batch.
#[allow(clippy::too_many_arguments)]
fn record_objective<T: Scalar>(
    model: &FlowModel<T>,
    tape: &mut Tape<T>,
    vars: &ModelVars,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    prior: &Tensor<T>,
    z_new: &Tensor<T>,
    cfg: &TrainConfig,
    inverse_pass: bool,
) -> Result<StepVars, FlowError> {
    let w = &cfg.weights;
    let a = tape.constant(x1.clone());
    let b = tape.constant(x2.clone());
    let (y, z) = model.forward_on(tape, vars, a, b)?;
    let fusion = loss_fusion_on(tape, a, b, y, w, &cfg.ssim)?;
    let p = tape.constant(prior.clone());
    let latent = mmd_latent_on(tape, z, p)?;
    let (dec, dec_total) = if inverse_pass {
        let zn = tape.constant(z_new.clone());
        let (h1, h2) = model.inverse_on(tape, vars, y, zn)?;
        let d = loss_dec_on(tape, a, b, h1, h2, w, &cfg.ssim)?;
        (Some(d), d.total)
    } else {
        (None, tape.constant(Tensor::scalar(T::zero())))
    };
    let total = loss_total_on(tape, fusion.total, latent, dec_total, w)?;
    Ok(StepVars {
        total,
        fusion,
        latent,
        dec,
    })
}

fn read_breakdown<T: Scalar>(tape: &Tape<T>, v: &StepVars) -> LossBreakdown {
    let g = |x: Var| tape.value(x).item().as_f64();
    let (dec, dec_ssim, dec_l2) = match &v.dec {
        Some(d) => (g(d.total), g(d.ssim), g(d.l2)),
        None => (0.0, 0.0, 0.0),
    };
    LossBreakdown {
        total: g(v.total),
        fusion: g(v.fusion.total),
        ssim: g(v.fusion.ssim),
        l2: g(v.fusion.l2),
        latent: g(v.latent),
        dec,
        dec_ssim,
        dec_l2,
    }
}

/// One line of the per-epoch log: training means and the validation total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ssim: f64,
    pub dec_ssim: f64,
    pub l2: f64,
    pub dec_l2: f64,
    pub latent: f64,
    pub val_total: f64,
}

impl EpochLog {
    pub const HEADER: &'static str =
        "epoch\tlr\tL_total\tL_SSIM\tL_dec_SSIM\tL_l2\tL_dec_l2\tL_latent\tval_L_total";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}",
            self.epoch,
            self.lr,
            self.total,
            self.ssim,
            self.dec_ssim,
            self.l2,
            self.dec_l2,
            self.latent,
            self.val_total
        )
    }
}

/// Which latent the validation inverse pass decodes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeLatent {
    /// A fresh draw keyed by the image id.
    Resampled,
    /// The latent the forward pass produced (a pure round trip).
    Forward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValRow {
    pub id: String,
    pub fusion_ssim: [f64; 2],
    /// Scored 0 when the inverse pass overflowed (see [`validate`]).
    pub dec_ssim: [f64; 2],
    pub decoded: bool,
}

/// Validation summary: mean total loss and the four per-modality SSIM means.
#[derive(Debug, Clone, PartialEq)]
pub struct ValReport {
    pub loss: LossBreakdown,
    pub fusion_ssim: [f64; 2],
    pub dec_ssim: [f64; 2],
    pub rows: Vec<ValRow>,
    /// Images whose inverse pass produced non-finite values.
    pub decode_failures: usize,
}

impl ValReport {
    pub fn mean_dec_ssim(&self) -> f64 {
        (self.dec_ssim[0] + self.dec_ssim[1]) / 2.0
    }
}

/// Decodes `(y, z)` and scores the result against the sources: the
/// decomposition loss terms and the two Q_SSIM values.
fn score_decode<T: Scalar>(
    model: &FlowModel<T>,
    y: &Tensor<T>,
    z: &Tensor<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, [f64; 2]), TrainError> {
    let (h1, h2) = model.inverse(y, z)?;
    let mut tape = Tape::new();
    let v: Vec<Var> = [x1, x2, &h1, &h2].iter().map(|t| tape.constant((*t).clone())).collect();
    let d = loss_dec_on(&mut tape, v[0], v[1], v[2], v[3], &cfg.weights, &cfg.ssim)?;
    let g = |x: Var| tape.value(x).item().as_f64();
    let b = LossBreakdown {
        dec: g(d.total),
        dec_ssim: g(d.ssim),
        dec_l2: g(d.l2),
        ..LossBreakdown::default()
    };
    let s1 = q_ssim(x1, &h1, &cfg.ssim)?.as_f64();
    let s2 = q_ssim(x2, &h2, &cfg.ssim)?.as_f64();
    if !(b.dec.is_finite() && s1.is_finite() && s2.is_finite()) {
        return Err(TrainError::Tensor(TensorError::NonFinite { op: "decomposition score" }));
    }
    Ok((b, [s1, s2]))
}

/// Scores `model` on `val` without touching its parameters.
///
/// Each image is processed on its own with latent draws keyed by its id, so
/// the result does not depend on the order of `val`. The latent loss is the
/// MMD between all validation latents and as many prior draws (0 when fewer
/// than two images are given).
///
/// With `alpha = 1` nothing trains the inverse pass, and decoding a fresh
/// latent may overflow. Such images score a decomposition SSIM of 0 and are
/// counted in `decode_failures`. For `alpha < 1` an overflow is an error.
pub fn validate<T: Scalar>(
    model: &FlowModel<T>,
    val: &[ImagePair<T>],
    cfg: &TrainConfig,
    decode: DecodeLatent,
) -> Result<ValReport, TrainError> {
    if val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let spec = cfg.latent_spec();
    let w = &cfg.weights;
    let mut rows = Vec::with_capacity(val.len());
    let mut latents = Vec::with_capacity(val.len());
    let mut priors = Vec::with_capacity(val.len());
    let (mut fusion, mut dec) = (LossBreakdown::default(), LossBreakdown::default());
    let mut decoded = 0usize;
    for pair in val {
        let (x1, x2) = batch(&[pair])?;
        let (y, z) = model.forward(&x1, &x2)?;
        let key = id_key(&pair.id);
        let z_dec = match decode {
            DecodeLatent::Resampled => sample_latent(&spec, z.shape(), draw_key(Draw::ValResample, key)),
            DecodeLatent::Forward => z.clone(),
        };
        let mut tape = Tape::new();
        let v: Vec<Var> = [&x1, &x2, &y].iter().map(|t| tape.constant((*t).clone())).collect();
        let f = loss_fusion_on(&mut tape, v[0], v[1], v[2], w, &cfg.ssim)?;
        fusion.fusion += tape.value(f.total).item().as_f64();
        fusion.ssim += tape.value(f.ssim).item().as_f64();
        fusion.l2 += tape.value(f.l2).item().as_f64();
        let s = |a: &Tensor<T>, b: &Tensor<T>| q_ssim(a, b, &cfg.ssim).map(|v| v.as_f64());
        let scored = score_decode(model, &y, &z_dec, &x1, &x2, cfg);
        let (dec_ssim, ok) = match scored {
            Ok((d, ssims)) => {
                dec.dec += d.dec;
                dec.dec_ssim += d.dec_ssim;
                dec.dec_l2 += d.dec_l2;
                decoded += 1;
                (ssims, true)
            }
            Err(e) if e.is_non_finite() && !cfg.uses_inverse_pass() => ([0.0, 0.0], false),
            Err(e) => return Err(e),
        };
        rows.push(ValRow {
            id: pair.id.clone(),
            fusion_ssim: [s(&x1, &y)?, s(&x2, &y)?],
            dec_ssim,
            decoded: ok,
        });
        priors.push(sample_latent::<T>(&spec, z.shape(), draw_key(Draw::ValPrior, key)));
        latents.push(z);
    }
    let n = val.len() as f64;
    let nd = decoded.max(1) as f64;
    let latent = if val.len() >= 2 {
        let zs: Vec<&Tensor<T>> = latents.iter().collect();
        let ps: Vec<&Tensor<T>> = priors.iter().collect();
        crate::losses::mmd_latent(&Tensor::stack(&zs)?, &Tensor::stack(&ps)?)?.as_f64()
    } else {
        0.0
    };
    let mut loss = LossBreakdown {
        fusion: fusion.fusion / n,
        ssim: fusion.ssim / n,
        l2: fusion.l2 / n,
        latent,
        dec: dec.dec / nd,
        dec_ssim: dec.dec_ssim / nd,
        dec_l2: dec.dec_l2 / nd,
        total: 0.0,
    };
    loss.total = loss.recombined(w);
    let mean = |f: &dyn Fn(&ValRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(ValReport {
        loss,
        fusion_ssim: [mean(&|r| r.fusion_ssim[0]), mean(&|r| r.fusion_ssim[1])],
        dec_ssim: [mean(&|r| r.dec_ssim[0]), mean(&|r| r.dec_ssim[1])],
        rows,
        decode_failures: val.len() - decoded,
    })
}

/// Model, optimizer and schedule state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub model: FlowModel<T>,
    pub adam: Adam<T>,
    pub plateau: Plateau,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: FlowModel<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let shapes: Vec<&[usize]> = model.params().iter().map(|p| p.shape()).collect();
        let adam = Adam::new(config.adam, &shapes);
        let plateau = Plateau::new(config.lr, config.plateau_factor, config.plateau_patience);
        Ok(Trainer {
            model,
            adam,
            plateau,
            config,
            epoch: 0,
            step: 0,
        })
    }

    fn step_draws(&self, shape: &[usize], step: u64) -> (Tensor<T>, Tensor<T>) {
        let spec = self.config.latent_spec();
        (
            sample_latent(&spec, shape, draw_key(Draw::Prior, step)),
            sample_latent(&spec, shape, draw_key(Draw::Resample, step)),
        )
    }

    fn latent_shape(x1: &Tensor<T>) -> Vec<usize> {
        x1.shape().to_vec()
    }

    /// Loss breakdown on a batch with the latent draws of step `step`,
    /// without updating anything.
    pub fn evaluate_batch(&self, x1: &Tensor<T>, x2: &Tensor<T>, step: u64) -> Result<LossBreakdown, TrainError> {
        let (prior, z_new) = self.step_draws(&Self::latent_shape(x1), step);
        let mut tape = Tape::new();
        let vars = self.model.register(&mut tape, false);
        let inverse = self.config.uses_inverse_pass();
        let sv = record_objective(&self.model, &mut tape, &vars, x1, x2, &prior, &z_new, &self.config, inverse)
            .map_err(|e| self.non_finite(e, "evaluation", None))?;
        Ok(read_breakdown(&tape, &sv))
    }

    fn non_finite(&self, e: FlowError, stage: &'static str, b: Option<LossBreakdown>) -> TrainError {
        if is_non_finite(&e) {
            TrainError::NonFinite {
                step: self.step,
                stage,
                breakdown: b,
            }
        } else {
            TrainError::Flow(e)
        }
    }

    /// One optimizer step on a `[B, 1, H, W]` batch. With `alpha = 1` the
    /// decomposition term has zero weight, so the inverse pass is skipped and
    /// its breakdown entries read 0.
    pub fn train_step(&mut self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<LossBreakdown, TrainError> {
        self.train_step_with(x1, x2, self.config.uses_inverse_pass())
    }

    /// As [`Trainer::train_step`]; with `inverse_pass = false` the
    /// decomposition branch is not recorded at all.
    pub fn train_step_with(
        &mut self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
        inverse_pass: bool,
    ) -> Result<LossBreakdown, TrainError> {
        let (prior, z_new) = self.step_draws(&Self::latent_shape(x1), self.step);
        let mut tape = Tape::new();
        let vars = self.model.register(&mut tape, true);
        let sv = record_objective(
            &self.model,
            &mut tape,
            &vars,
            x1,
            x2,
            &prior,
            &z_new,
            &self.config,
            inverse_pass,
        )
        .map_err(|e| self.non_finite(e, "forward", None))?;
        let breakdown = read_breakdown(&tape, &sv);
        let grads = tape.backward(sv.total).map_err(|e| match e {
            TensorError::NonFinite { .. } => TrainError::NonFinite {
                step: self.step,
                stage: "backward",
                breakdown: Some(breakdown),
            },
            other => TrainError::Tensor(other),
        })?;
        let grads: Vec<Tensor<T>> = vars.0.iter().map(|&v| grads.wrt(v)).collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step: self.step,
                stage: "backward",
                breakdown: Some(breakdown),
            });
        }
        let lr = self.plateau.lr;
        let mut params = self.model.params_mut();
        self.adam.update(&mut params, &grads, lr)?;
        if self.model.params().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite {
                step: self.step,
                stage: "update",
                breakdown: Some(breakdown),
            });
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Batches of epoch `epoch`: a seeded shuffle split into chunks of
    /// `batch_size`; a trailing chunk with a single pair is dropped.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.config.seed, draw_key(Draw::Shuffle, epoch as u64));
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Trains one epoch, validates, steps the schedule, and reports the
    /// epoch's log line. `on_step` sees every step's breakdown.
    pub fn run_epoch(
        &mut self,
        train: &[ImagePair<T>],
        val: &[ImagePair<T>],
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<EpochLog, TrainError> {
        let lr = self.plateau.lr;
        let batches = self.epoch_batches(train.len(), self.epoch);
        if batches.is_empty() {
            return Err(TrainError::Config(format!(
                "{} training pairs do not form a batch of at least 2",
                train.len()
            )));
        }
        let mut sum = LossBreakdown::default();
        for idx in &batches {
            let pairs: Vec<&ImagePair<T>> = idx.iter().map(|&i| &train[i]).collect();
            let (x1, x2) = batch(&pairs)?;
            let step = self.step;
            let b = self.train_step(&x1, &x2)?;
            on_step(step, &b);
            sum.total += b.total;
            sum.ssim += b.ssim;
            sum.dec_ssim += b.dec_ssim;
            sum.l2 += b.l2;
            sum.dec_l2 += b.dec_l2;
            sum.latent += b.latent;
        }
        let report = validate(&self.model, val, &self.config, DecodeLatent::Resampled)?;
        self.plateau.observe(report.loss.total);
        self.epoch += 1;
        let n = batches.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            total: sum.total / n,
            ssim: sum.ssim / n,
            dec_ssim: sum.dec_ssim / n,
            l2: sum.l2 / n,
            dec_l2: sum.dec_l2 / n,
            latent: sum.latent / n,
            val_total: report.loss.total,
        })
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn fit(
        &mut self,
        train: &[ImagePair<T>],
        val: &[ImagePair<T>],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(train, val, |_, _| {})?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Compares the tape gradient of the full objective with respect to every
/// model parameter against central differences, with the latent draws of
/// step 0. `fault` corrupts one backward rule as a negative control.
pub fn gradient_check_model<T: Scalar>(
    model: &FlowModel<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    cfg: &TrainConfig,
    opts: GradCheckOptions,
    fault: Option<(FaultSite, T)>,
) -> Result<GradCheckReport, GradCheckError> {
    let spec = cfg.latent_spec();
    let prior: Tensor<T> = sample_latent(&spec, x1.shape(), draw_key(Draw::Prior, 0));
    let z_new: Tensor<T> = sample_latent(&spec, x1.shape(), draw_key(Draw::Resample, 0));
    let params: Vec<Tensor<T>> = model.params().into_iter().cloned().collect();
    finite_diff_check(
        |tape: &mut Tape<T>, vars: &[Var]| -> Result<Var, FlowError> {
            if let Some((site, scale)) = fault {
                tape.inject_fault(site, scale);
            }
            let mv = ModelVars(vars.to_vec());
            Ok(record_objective(model, tape, &mv, x1, x2, &prior, &z_new, cfg, cfg.uses_inverse_pass())?.total)
        },
        &params,
        opts,
    )
}
