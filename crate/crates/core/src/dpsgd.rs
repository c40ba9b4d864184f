//! Differentially private SGD.
//!
//! Each step samples a lot by independent inclusion with probability
//! `q = L/N`, clips every per-example gradient, adds Gaussian noise to the
//! sum, divides by the nominal lot size `L` and descends. The privacy cost of
//! the step is charged to the ledger *before* the gradient is computed, so a
//! step that would overrun the budget is never taken.

use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::accountant::{AccountantError, LogMomentLedger, MomentsAccountant, PrivacySpend, SampledGaussianStep};
use crate::data::Dataset;
use crate::mechanisms::{self, ClipConfig, MechanismError, NoiseSource};
use crate::nn::{self, LabeledExample, MlpParams, NnError};

/// Noise stream ids derived from the run seed.
const LOT_STREAM: u64 = 10;
const GRADIENT_NOISE_STREAM: u64 = 11;

#[derive(Debug, Error)]
pub enum DpSgdError {
    #[error("config error: {0}")]
    Config(String),
    #[error("empty sample")]
    EmptySample,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
}

pub type Result<T> = std::result::Result<T, DpSgdError>;

/// Linear decay from `initial` to `final_rate` over `decay_epochs`, then flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_rate: f64,
    pub decay_epochs: f64,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            final_rate: rate,
            decay_epochs: 0.0,
        }
    }

    /// Rate used by step `step` (0-based).
    pub fn rate(&self, step: u64, steps_per_epoch: u64) -> f64 {
        if self.decay_epochs <= 0.0 {
            return self.final_rate;
        }
        let progress = (step as f64 / steps_per_epoch as f64 / self.decay_epochs).min(1.0);
        self.initial + (self.final_rate - self.initial) * progress
    }
}

/// Per-example clipping: one threshold per layer (a single value is
/// broadcast), or one bound on the whole gradient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSpec {
    pub thresholds: Vec<f64>,
    pub whole_vector: bool,
}

impl ClipSpec {
    pub fn per_layer(c: f64) -> Self {
        Self {
            thresholds: vec![c],
            whole_vector: false,
        }
    }

    pub fn unbounded() -> Self {
        Self::per_layer(f64::INFINITY)
    }

    pub fn resolve(&self, params: &MlpParams) -> Result<ClipConfig> {
        let counts = params.layer_param_counts();
        let cfg = match (self.whole_vector, self.thresholds.as_slice()) {
            (_, []) => return Err(DpSgdError::Config("at least one clipping threshold is required".into())),
            (true, [c]) => ClipConfig::Global(*c),
            (true, _) => return Err(DpSgdError::Config("whole-vector clipping takes one threshold".into())),
            (false, [c]) => ClipConfig::PerSegment {
                thresholds: vec![*c; counts.len()],
                lengths: counts,
            },
            (false, cs) if cs.len() == counts.len() => ClipConfig::PerSegment {
                thresholds: cs.to_vec(),
                lengths: counts,
            },
            (false, cs) => {
                return Err(DpSgdError::Config(format!(
                    "{} clipping thresholds for {} layers",
                    cs.len(),
                    counts.len()
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lot_size: usize,
    /// Noise multiplier; `0` trains without privacy.
    pub noise_sigma: f64,
    pub clip: ClipSpec,
    pub lr: LrSchedule,
    pub max_epochs: f64,
    /// Stop before the accountant would exceed this spend.
    pub target: Option<PrivacySpend>,
    /// `δ` at which `ε` is reported when no target is set.
    pub report_delta: f64,
    pub seed: u64,
    /// Hidden layer widths; input and output sizes come from the dataset.
    pub hidden: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lot_size: 600,
            noise_sigma: 4.0,
            clip: ClipSpec::per_layer(4.0),
            lr: LrSchedule {
                initial: 0.1,
                final_rate: 0.052,
                decay_epochs: 10.0,
            },
            max_epochs: 100.0,
            target: None,
            report_delta: 1e-5,
            seed: 0,
            hidden: vec![1000],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        let bad = |m: String| Err(DpSgdError::Config(m));
        if dataset_size == 0 {
            return bad("training set is empty".into());
        }
        if self.lot_size == 0 || self.lot_size > dataset_size {
            return bad(format!("lot size {} must be in 1..={dataset_size}", self.lot_size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let LrSchedule { initial, final_rate, decay_epochs } = self.lr;
        if !(final_rate > 0.0 && initial >= final_rate && decay_epochs >= 0.0) {
            return bad(format!(
                "learning rates need initial >= final > 0 and decay epochs >= 0, got ({initial}, {final_rate}, {decay_epochs})"
            ));
        }
        if !(self.max_epochs >= 0.0 && self.max_epochs.is_finite()) {
            return bad(format!("max epochs must be finite and >= 0, got {}", self.max_epochs));
        }
        if !(self.report_delta > 0.0 && self.report_delta < 1.0) {
            return bad(format!("report delta must be in (0, 1), got {}", self.report_delta));
        }
        if let Some(t) = self.target {
            if self.noise_sigma == 0.0 {
                return bad("a privacy target needs noise sigma > 0".into());
            }
            if !(t.delta > 0.0 && t.delta < 1.0 && t.epsilon > 0.0) {
                return bad(format!("target {t} needs epsilon > 0 and delta in (0, 1)"));
            }
        }
        if self.noise_sigma > 0.0 && self.clip.thresholds.iter().any(|c| c.is_infinite()) {
            return bad("noise needs finite clipping thresholds".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must have at least one unit".into());
        }
        Ok(())
    }

    pub fn sampling_rate(&self, dataset_size: usize) -> f64 {
        self.lot_size as f64 / dataset_size as f64
    }

    /// Lots per epoch, `N/L` rounded to the nearest integer (at least 1).
    pub fn steps_per_epoch(&self, dataset_size: usize) -> u64 {
        ((dataset_size as f64 / self.lot_size as f64).round() as u64).max(1)
    }

    pub fn delta(&self) -> f64 {
        self.target.map_or(self.report_delta, |t| t.delta)
    }

    pub fn is_private(&self) -> bool {
        self.noise_sigma > 0.0
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }
}

/// Independent inclusion of each index with probability `q`.
pub fn sample_lot(n: usize, q: f64, rng: &mut NoiseSource) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    if q <= 0.0 {
        return Vec::new();
    }
    (0..n).filter(|_| rng.uniform() < q).collect()
}

/// Knobs of a single DP-SGD update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    pub clip: ClipConfig,
    pub sigma: f64,
    pub lot_size: usize,
    pub learning_rate: f64,
}

/// `θ − η · sanitize(per-example gradients of the lot)`.
pub fn dp_sgd_update(
    params: &MlpParams,
    examples: &[LabeledExample],
    lot: &[usize],
    settings: &StepSettings,
    noise: &mut NoiseSource,
) -> Result<MlpParams> {
    let dim = params.num_params();
    let grad_fn = |i: usize| match nn::example_gradient(params, &examples[lot[i]]) {
        Ok(g) => g,
        Err(_) => vec![f64::NAN; dim],
    };
    // Surface shape/label problems as model errors rather than NaNs.
    if let Some(&first) = lot.first() {
        nn::example_gradient(params, &examples[first])?;
    }
    let direction = mechanisms::sanitize_with(
        lot.len(),
        dim,
        &settings.clip,
        settings.sigma,
        settings.lot_size,
        noise,
        grad_fn,
    )?;
    let mut next = params.clone();
    next.descend(&direction, settings.learning_rate)?;
    Ok(next)
}

/// One full step: charge the ledger for `(q, σ)`, then update. With `σ = 0`
/// the ledger is returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn dp_sgd_step(
    params: &MlpParams,
    examples: &[LabeledExample],
    lot: &[usize],
    settings: &StepSettings,
    sampling_rate: f64,
    noise: &mut NoiseSource,
    accountant: &mut MomentsAccountant,
    ledger: &LogMomentLedger,
) -> Result<(MlpParams, LogMomentLedger)> {
    let ledger = if settings.sigma > 0.0 {
        accountant.accumulate(ledger, SampledGaussianStep::new(sampling_rate, settings.sigma)?)?
    } else {
        ledger.clone()
    };
    let params = dp_sgd_update(params, examples, lot, settings, noise)?;
    Ok((params, ledger))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Epochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Budget => "budget",
            StopReason::Epochs => "epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Completed epochs, fractional for a final partial epoch.
    pub epoch: f64,
    pub step: u64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// `+inf` for non-private runs.
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub steps: u64,
    pub ledger: LogMomentLedger,
}

impl TrainingReport {
    pub const CSV_HEADER: &'static str = "epoch,step,train_acc,test_acc,epsilon,delta";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            let test = r.test_accuracy.map_or_else(String::new, |a| a.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.step, r.train_accuracy, test, r.epsilon, r.delta
            )?;
        }
        Ok(())
    }
}

pub struct TrainingOutcome {
    pub params: MlpParams,
    pub report: TrainingReport,
}

/// Trains a fresh Glorot-initialized network.
pub fn train(train_set: &Dataset, test_set: Option<&Dataset>, config: &TrainingConfig) -> Result<TrainingOutcome> {
    config.validate(train_set.len())?;
    let dims = config.layer_dims(train_set.feature_dim(), train_set.num_classes());
    let params = MlpParams::glorot(&dims, config.seed)?;
    let mut accountant = MomentsAccountant::default();
    let ledger = accountant.empty_ledger();
    train_from(params, ledger, &mut accountant, train_set, test_set, config)
}

/// Trains starting from `params`, charging steps on top of `ledger` (which
/// may already hold e.g. a PCA release).
pub fn train_from(
    params: MlpParams,
    ledger: LogMomentLedger,
    accountant: &mut MomentsAccountant,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainingConfig,
) -> Result<TrainingOutcome> {
    let n = train_set.len();
    config.validate(n)?;
    let q = config.sampling_rate(n);
    let steps_per_epoch = config.steps_per_epoch(n);
    let total_steps = (config.max_epochs * steps_per_epoch as f64).ceil() as u64;
    let delta = config.delta();
    let mut settings = StepSettings {
        clip: config.clip.resolve(&params)?,
        sigma: config.noise_sigma,
        lot_size: config.lot_size,
        learning_rate: config.lr.initial,
    };
    let step_moments = if config.is_private() {
        Some(accountant.step_moments(SampledGaussianStep::new(q, config.noise_sigma)?)?.clone())
    } else {
        None
    };

    let mut lot_rng = NoiseSource::with_stream(config.seed, LOT_STREAM);
    let mut noise = NoiseSource::with_stream(config.seed, GRADIENT_NOISE_STREAM);
    let examples = train_set.examples();
    let mut params = params;
    let mut ledger = ledger;
    let mut records = Vec::new();
    let mut stop_reason = StopReason::Epochs;
    let mut steps = 0;

    let epsilon_of = |ledger: &LogMomentLedger| -> Result<f64> {
        if config.is_private() {
            Ok(ledger.get_epsilon(delta)?.spend.epsilon)
        } else {
            Ok(f64::INFINITY)
        }
    };
    let record = |params: &MlpParams, ledger: &LogMomentLedger, steps: u64| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch: steps as f64 / steps_per_epoch as f64,
            step: steps,
            train_accuracy: nn::evaluate(params, examples)?,
            test_accuracy: test_set.map(|t| nn::evaluate(params, t.examples())).transpose()?,
            epsilon: epsilon_of(ledger)?,
            delta,
        })
    };

    while steps < total_steps {
        let charged = match &step_moments {
            Some(m) => ledger.accumulate_moments(m)?,
            None => ledger.clone(),
        };
        if let Some(target) = config.target {
            if charged.get_epsilon(target.delta)?.spend.epsilon > target.epsilon {
                stop_reason = StopReason::Budget;
                break;
            }
        }
        let lot = sample_lot(n, q, &mut lot_rng);
        settings.learning_rate = config.lr.rate(steps, steps_per_epoch);
        params = dp_sgd_update(&params, examples, &lot, &settings, &mut noise)?;
        ledger = charged;
        steps += 1;
        if steps % steps_per_epoch == 0 {
            records.push(record(&params, &ledger, steps)?);
        }
    }
    if steps > 0 && records.last().map(|r| r.step) != Some(steps) {
        records.push(record(&params, &ledger, steps)?);
    }

    Ok(TrainingOutcome {
        params,
        report: TrainingReport {
            records,
            stop_reason,
            steps,
            ledger,
        },
    })
}

/// Median per-example gradient norms on a random subsample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipNormDiagnostic {
    pub median_norm: f64,
    pub per_layer_median: Vec<f64>,
    pub sample_size: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median of unclipped per-example gradient norms, a guide for choosing `C`.
pub fn clip_norm_diagnostic(
    params: &MlpParams,
    examples: &[LabeledExample],
    sample_size: usize,
    rng: &mut NoiseSource,
) -> Result<ClipNormDiagnostic> {
    if sample_size == 0 || examples.is_empty() {
        return Err(DpSgdError::EmptySample);
    }
    let take = sample_size.min(examples.len());
    // partial Fisher–Yates
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    for i in 0..take {
        let j = i + (rng.next_u64() % (idx.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    let batch: Vec<LabeledExample> = idx[..take].iter().map(|&i| examples[i].clone()).collect();
    let grads = nn::per_example_gradients(params, &batch)?;
    let counts = params.layer_param_counts();
    let norms = grads.iter().map(|g| crate::numeric::l2_norm(g)).collect();
    let per_layer_median = (0..counts.len())
        .map(|l| {
            let start: usize = counts[..l].iter().sum();
            median(
                grads
                    .iter()
                    .map(|g| crate::numeric::l2_norm(&g[start..start + counts[l]]))
                    .collect(),
            )
        })
        .collect();
    Ok(ClipNormDiagnostic {
        median_norm: median(norms),
        per_layer_median,
        sample_size: take,
    })
}
