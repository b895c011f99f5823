//! The private training loop: batching, clipped gradients, Gaussian noise
//! and an SGD or Adam update.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clipping::{clipped_batch_gradient, count_correct, ClipConfig, ClipMode, Strategy};
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::layers::ParamId;
use crate::model::Model;
use crate::privacy::{add_noise, calibrate_sigma, NoiseSpec, PrivacyReport, RdpLedger, DEFAULT_ALPHAS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// How `sigma` maps to the standard deviation of the noise added to the
/// mean clipped gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// `sigma` is the standard deviation itself.
    #[default]
    Absolute,
    /// The standard deviation is `sigma · c / τ`.
    ClipMultiplier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyTarget {
    pub eps: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub sigma: f64,
    /// When set, `sigma` is calibrated to reach this target instead.
    pub target: Option<PrivacyTarget>,
    pub noise_scale: NoiseScale,
    pub method: Strategy,
    pub clip_mode: ClipMode,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    /// δ used when converting the ledger for reports.
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            clip: 1.0,
            sigma: 0.05,
            target: None,
            noise_scale: NoiseScale::Absolute,
            method: Strategy::Reweight,
            clip_mode: ClipMode::Global,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            delta: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad(format!("clipping threshold must be positive, got {}", self.clip));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam decay rates must lie in [0, 1), got {b}"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("δ must lie in (0, 1), got {}", self.delta));
        }
        Ok(())
    }

    pub fn clip_config(&self) -> Result<ClipConfig> {
        let mut c = ClipConfig::new(self.clip, self.method)?;
        c.mode = self.clip_mode;
        Ok(c)
    }

    /// Standard deviation of the noise added to the mean clipped gradient.
    pub fn noise_std(&self) -> f64 {
        match self.noise_scale {
            NoiseScale::Absolute => self.sigma,
            NoiseScale::ClipMultiplier => self.sigma * self.clip / self.batch_size as f64,
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec { sigma: self.noise_std(), c: self.clip, tau: self.batch_size }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let zeros = || model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    /// Applies one update with `grads` aligned to `model.params`.
    pub fn apply(&mut self, model: &mut Model, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for (i, g) in grads.iter().enumerate() {
            let p = &model.params[i].value;
            let next = match cfg.optimizer {
                Optimizer::Sgd => {
                    let mut w = (**p).clone();
                    w.axpy(-cfg.lr, g)?;
                    w
                }
                Optimizer::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let (b1, b2) = (cfg.beta1, cfg.beta2);
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    let mut w = (**p).clone();
                    for (((w, m), v), g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps_hat);
                    }
                    w
                }
            };
            model.set_param(ParamId(i), next)?;
        }
        Ok(())
    }
}

/// Independent stream of randomness for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
}

/// One update: clipped mean gradient, noise (private methods only), then
/// the optimizer. The ledger advances by one Gaussian step for private
/// methods.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    x: &Tensor,
    targets: &[usize],
    cfg: &TrainConfig,
    ledger: &mut RdpLedger,
) -> Result<StepOutput> {
    let bg = clipped_batch_gradient(model, x, targets, &cfg.clip_config()?)?;
    let mut grads = bg.grads;
    if cfg.method.is_private() {
        let spec = NoiseSpec { sigma: cfg.noise_std(), c: cfg.clip, tau: targets.len() };
        add_noise(&mut grads, spec.sigma, derive_seed(cfg.seed, NOISE_STREAM, opt.step))?;
        ledger.compose_gaussian(&spec)?;
    }
    opt.apply(model, &grads, cfg)?;
    Ok(StepOutput { loss: bg.loss, correct: bg.correct })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub wall_seconds: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Fraction of the epoch's training records classified correctly
    /// before each update.
    pub accuracy: f64,
    pub eps_prime: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub ledger: RdpLedger,
    pub metrics: Vec<EpochMetrics>,
    /// The configuration actually used, with any calibrated `sigma`.
    pub config: TrainConfig,
}

impl TrainOutcome {
    pub fn privacy_report(&self) -> Result<PrivacyReport> {
        self.ledger.report(&self.config.noise_spec(), self.config.delta)
    }
}

/// Resolves a privacy target into `sigma` for `steps` updates.
pub fn calibrated(cfg: &TrainConfig, steps: usize) -> Result<TrainConfig> {
    let mut out = cfg.clone();
    if let Some(t) = cfg.target {
        let sens = cfg.clip / cfg.batch_size as f64;
        let std = calibrate_sigma(t.eps, t.delta, steps.max(1), sens, &DEFAULT_ALPHAS)?;
        out.sigma = match cfg.noise_scale {
            NoiseScale::Absolute => std,
            NoiseScale::ClipMultiplier => std / sens,
        };
        out.delta = t.delta;
    }
    Ok(out)
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train_with(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if cfg.batch_size > ds.len() {
        return Err(Error::Contract(format!(
            "batch size {} exceeds the {} training records",
            cfg.batch_size,
            ds.len()
        )));
    }
    let cfg = calibrated(cfg, cfg.epochs * (ds.len() / cfg.batch_size))?;
    let mut ledger = RdpLedger::default();
    let mut opt = OptimizerState::new(model);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        let (mut loss, mut correct, mut seen) = (0.0, 0, 0);
        let batches = epoch_batches(ds.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let (x, y) = ds.batch(idx)?;
            let out = train_step(model, &mut opt, &x, &y, &cfg, &mut ledger)?;
            loss += out.loss;
            correct += out.correct;
            seen += y.len();
        }
        let eps_prime = if ledger.steps() == 0 { 0.0 } else { ledger.to_dp(cfg.delta)?.0 };
        let m = EpochMetrics {
            epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
            loss: loss / batches.len() as f64,
            accuracy: correct as f64 / seen as f64,
            eps_prime,
        };
        on_epoch(&m, model);
        metrics.push(m);
    }
    Ok(TrainOutcome { ledger, metrics, config: cfg })
}

pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, ds, cfg, |_, _| {})
}

/// Accuracy and mean cross-entropy loss of a forward-only pass.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<(f64, f64)> {
    const CHUNK: usize = 256;
    if ds.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let (mut correct, mut loss) = (0, 0.0);
    for start in (0..ds.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(ds.len())).collect();
        let (x, y) = ds.batch(&idx)?;
        let (mut f, logits) = model.forward(&x, false)?;
        correct += count_correct(f.tape.value(logits), &y);
        let l = f.tape.cross_entropy(logits, &y)?;
        loss += f.tape.value(l).sum();
    }
    Ok((correct as f64 / ds.len() as f64, loss / ds.len() as f64))
}

/// Writes metrics as CSV with a header row.
pub fn write_metrics_csv(w: impl Write, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in metrics {
        out.serialize(m).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    out.flush()?;
    Ok(())
}
