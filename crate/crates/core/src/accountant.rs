//! Moments accountant for the sampled Gaussian mechanism.
//!
//! The accountant tracks `α(λ)`, the log of the moment generating function of
//! the privacy loss, for a fixed grid of integer orders `λ`. Log-moments of
//! adaptively composed mechanisms add up, and an `(ε, δ)` guarantee is read
//! off the accumulated values with a Markov tail bound:
//! `δ = min_λ exp(α(λ) − λε)`.
//!
//! For one sampled Gaussian step with sampling probability `q` and noise
//! multiplier `σ`, let `μ0 = N(0, σ²)`, `μ1 = N(1, σ²)` and
//! `μ = (1 − q)μ0 + qμ1`. Then
//!
//! ```text
//! α(λ) = ln max(E1, E2)
//! E1   = E_{z~μ0}[(μ0(z)/μ(z))^λ]
//! E2   = E_{z~μ }[(μ(z)/μ0(z))^λ]
//! ```
//!
//! Both expectations are evaluated by composite Simpson quadrature in
//! log-space.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::numeric::{log_add_exp, log_sum_exp};

/// Largest order the accountant tracks by default.
pub const DEFAULT_MAX_ORDER: u32 = 32;

/// Quadrature results in `[-NEGATIVE_CLAMP, 0)` are floating-point noise.
const NEGATIVE_CLAMP: f64 = 1e-12;

/// Bracket searched by [`noise_for_target`].
pub const NOISE_SEARCH_RANGE: (f64, f64) = (0.5, 64.0);
/// Width at which the noise bisection stops.
pub const NOISE_SEARCH_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid sampled Gaussian step: q={q}, sigma={sigma} (need 0 <= q <= 1, sigma > 0)")]
    InvalidStep { q: f64, sigma: f64 },
    #[error("invalid moment order {0} (orders must be >= 1)")]
    InvalidOrder(u32),
    #[error("moment orders must be strictly increasing and non-empty")]
    InvalidOrderGrid,
    #[error("integrand is not finite at order {lambda} (sigma={sigma} too small for the grid)")]
    NonFiniteIntegrand { lambda: u32, sigma: f64 },
    #[error("quadrature returned {value} at order {lambda}, below the clamp tolerance")]
    NegativeLogMoment { lambda: u32, value: f64 },
    #[error("invalid integration config: {0}")]
    InvalidConfig(String),
    #[error("ledger has no moment orders")]
    EmptyLedger,
    #[error("step moments were computed on a different order grid")]
    OrderMismatch,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("target epsilon {epsilon} at delta {delta} is unachievable even with sigma={sigma_max}")]
    Unachievable {
        epsilon: f64,
        delta: f64,
        sigma_max: f64,
    },
    #[error("epsilon is not monotone in sigma near sigma={sigma}")]
    MonotonicityViolation { sigma: f64 },
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// One invocation of the sampled Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledGaussianStep {
    q: f64,
    sigma: f64,
}

impl SampledGaussianStep {
    /// `q = 0` is accepted and contributes nothing to the ledger.
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(AccountantError::InvalidStep { q, sigma });
        }
        Ok(Self { q, sigma })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn key(&self) -> (u64, u64) {
        (self.q.to_bits(), self.sigma.to_bits())
    }
}

/// An `(ε, δ)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacySpend {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 || !(0.0..=1.0).contains(&delta) {
            return Err(AccountantError::Domain(format!(
                "privacy spend needs epsilon >= 0 and delta in [0, 1], got ({epsilon}, {delta})"
            )));
        }
        Ok(Self { epsilon, delta })
    }
}

impl fmt::Display for PrivacySpend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.epsilon, self.delta)
    }
}

/// Fixed-grid Simpson quadrature settings.
///
/// For order `λ` the integration interval is
/// `[−h·σ − λ, 1 + h·σ + λ]` with `h = half_width_sigmas`. The `λ` padding
/// keeps the integrand's mode (near `z = λ + 1` or `z = −λ`) inside the grid
/// when `σ` is small.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationConfig {
    pub half_width_sigmas: f64,
    pub grid_points: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            half_width_sigmas: 40.0,
            grid_points: 200_001,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 3 || self.grid_points.is_multiple_of(2) {
            return Err(AccountantError::InvalidConfig(format!(
                "grid_points must be odd and >= 3, got {}",
                self.grid_points
            )));
        }
        if !(self.half_width_sigmas >= 10.0 && self.half_width_sigmas.is_finite()) {
            return Err(AccountantError::InvalidConfig(format!(
                "half_width_sigmas must be >= 10, got {}",
                self.half_width_sigmas
            )));
        }
        Ok(())
    }
}

/// `ln(μ(z)/μ0(z))` for the mixture `μ = (1 − q)μ0 + qμ1`.
fn log_ratio(z: f64, q: f64, ln_q: f64, ln_1mq: f64, two_var: f64) -> f64 {
    let shift = (2.0 * z - 1.0) / two_var;
    if q == 1.0 {
        shift
    } else {
        log_add_exp(ln_1mq, ln_q + shift)
    }
}

/// `α(λ)` for one sampled Gaussian step, in nats.
pub fn compute_log_moment(
    step: SampledGaussianStep,
    lambda: u32,
    cfg: &IntegrationConfig,
) -> Result<f64> {
    if lambda < 1 {
        return Err(AccountantError::InvalidOrder(lambda));
    }
    cfg.validate()?;
    let SampledGaussianStep { q, sigma } = step;
    if q == 0.0 {
        return Ok(0.0);
    }

    let lam = f64::from(lambda);
    let var = sigma * sigma;
    let two_var = 2.0 * var;
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let ln_q = q.ln();
    let ln_1mq = (1.0 - q).ln();

    let lo = -(cfg.half_width_sigmas * sigma + lam);
    let hi = 1.0 + cfg.half_width_sigmas * sigma + lam;
    let n = cfg.grid_points;
    let h = (hi - lo) / (n - 1) as f64;
    let ln_h3 = (h / 3.0).ln();
    let (ln_w2, ln_w4) = (2f64.ln(), 4f64.ln());

    let mut e1_terms = Vec::with_capacity(n);
    let mut e2_terms = Vec::with_capacity(n);
    for i in 0..n {
        let z = lo + h * i as f64;
        let ln_w = ln_h3
            + if i == 0 || i == n - 1 {
                0.0
            } else if i % 2 == 1 {
                ln_w4
            } else {
                ln_w2
            };
        let ln_mu0 = ln_norm - z * z / two_var;
        let lr = log_ratio(z, q, ln_q, ln_1mq, two_var);
        // E1 = ∫ μ0 r^{−λ},  E2 = ∫ μ r^{λ} = ∫ μ0 r^{λ+1}
        let t1 = ln_w + ln_mu0 - lam * lr;
        let t2 = ln_w + ln_mu0 + (lam + 1.0) * lr;
        if t1.is_nan() || t2.is_nan() || t1 == f64::INFINITY || t2 == f64::INFINITY {
            return Err(AccountantError::NonFiniteIntegrand { lambda, sigma });
        }
        e1_terms.push(t1);
        e2_terms.push(t2);
    }

    let ln_e1 = log_sum_exp(&e1_terms);
    let ln_e2 = log_sum_exp(&e2_terms);
    if !ln_e1.is_finite() || !ln_e2.is_finite() {
        return Err(AccountantError::NonFiniteIntegrand { lambda, sigma });
    }
    let alpha = ln_e1.max(ln_e2);
    if alpha < 0.0 {
        if alpha >= -NEGATIVE_CLAMP {
            return Ok(0.0);
        }
        return Err(AccountantError::NegativeLogMoment {
            lambda,
            value: alpha,
        });
    }
    Ok(alpha)
}

/// Closed-form `λ(λ+1)/(2σ²)`: the log-moment between `N(0,σ²)` and `N(1,σ²)`.
pub fn unsampled_gaussian_log_moment(sigma: f64, lambda: u32) -> f64 {
    let lam = f64::from(lambda);
    lam * (lam + 1.0) / (2.0 * sigma * sigma)
}

/// Leading term of the small-`q` log-moment bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticBound {
    pub value: f64,
    /// Whether `σ ≥ 1`, `0 < q < 1/(16σ)` and `λ ≤ σ² ln(1/(qσ))` all hold.
    pub preconditions_hold: bool,
}

/// `q²λ(λ+1)/((1 − q)σ²)`; the higher-order remainder is not included.
pub fn asymptotic_log_moment_bound(q: f64, sigma: f64, lambda: u32) -> Result<AsymptoticBound> {
    if !(0.0..1.0).contains(&q) {
        return Err(AccountantError::Domain(format!("q must be in [0, 1), got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(AccountantError::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    let lam = f64::from(lambda);
    let value = q * q * lam * (lam + 1.0) / ((1.0 - q) * sigma * sigma);
    let preconditions_hold = sigma >= 1.0
        && q > 0.0
        && q < 1.0 / (16.0 * sigma)
        && lambda >= 1
        && lam <= sigma * sigma * (1.0 / (q * sigma)).ln();
    Ok(AsymptoticBound {
        value,
        preconditions_hold,
    })
}

/// Upper bound on `α(λ)` for an `ε`-differentially private mechanism.
pub fn pure_dp_log_moment(epsilon: f64, lambda: u32) -> f64 {
    let lam = f64::from(lambda);
    lam * epsilon * epsilon.exp_m1() + lam * lam * epsilon * epsilon * (2.0 * epsilon).exp() / 2.0
}

/// Log-moments of one step over an order grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMoments {
    step: SampledGaussianStep,
    orders: Vec<u32>,
    values: Vec<f64>,
}

impl StepMoments {
    /// Orders are evaluated in parallel; each value is independent of scheduling.
    pub fn compute(step: SampledGaussianStep, orders: &[u32], cfg: &IntegrationConfig) -> Result<Self> {
        validate_orders(orders)?;
        let values = orders
            .par_iter()
            .map(|&lambda| compute_log_moment(step, lambda, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            step,
            orders: orders.to_vec(),
            values,
        })
    }

    pub fn step(&self) -> SampledGaussianStep {
        self.step
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn validate_orders(orders: &[u32]) -> Result<()> {
    if orders.is_empty() {
        return Err(AccountantError::InvalidOrderGrid);
    }
    if let Some(&bad) = orders.iter().find(|&&o| o < 1) {
        return Err(AccountantError::InvalidOrder(bad));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AccountantError::InvalidOrderGrid);
    }
    Ok(())
}

/// `ε` at a fixed `δ`, with the order that attained the minimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonQuery {
    pub spend: PrivacySpend,
    pub order: u32,
}

/// `δ` at a fixed `ε`, with the order that attained the minimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaQuery {
    pub spend: PrivacySpend,
    pub order: u32,
}

/// Accumulated log-moments: the whole state of the accountant.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMomentLedger {
    orders: Vec<u32>,
    log_moments: Vec<f64>,
    steps_recorded: u64,
}

impl Default for LogMomentLedger {
    fn default() -> Self {
        Self::with_max_order(DEFAULT_MAX_ORDER)
    }
}

impl LogMomentLedger {
    pub fn new(orders: Vec<u32>) -> Result<Self> {
        validate_orders(&orders)?;
        let log_moments = vec![0.0; orders.len()];
        Ok(Self {
            orders,
            log_moments,
            steps_recorded: 0,
        })
    }

    /// Orders `1..=max_order`. A zero `max_order` is treated as 1.
    pub fn with_max_order(max_order: u32) -> Self {
        let orders: Vec<u32> = (1..=max_order.max(1)).collect();
        Self {
            log_moments: vec![0.0; orders.len()],
            orders,
            steps_recorded: 0,
        }
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn log_moments(&self) -> &[f64] {
        &self.log_moments
    }

    pub fn steps_recorded(&self) -> u64 {
        self.steps_recorded
    }

    /// Adds one step's log-moments, computed afresh.
    pub fn accumulate(&self, step: SampledGaussianStep, cfg: &IntegrationConfig) -> Result<Self> {
        let moments = StepMoments::compute(step, &self.orders, cfg)?;
        self.accumulate_moments(&moments)
    }

    /// Adds precomputed step moments.
    pub fn accumulate_moments(&self, moments: &StepMoments) -> Result<Self> {
        self.accumulate_repeated(moments, 1)
    }

    /// Adds the same step `count` times. The additions are performed one at
    /// a time, so the result is bitwise equal to `count` calls of
    /// [`accumulate_moments`](Self::accumulate_moments).
    pub fn accumulate_repeated(&self, moments: &StepMoments, count: u64) -> Result<Self> {
        if moments.orders != self.orders {
            return Err(AccountantError::OrderMismatch);
        }
        let mut next = self.clone();
        for _ in 0..count {
            for (acc, v) in next.log_moments.iter_mut().zip(&moments.values) {
                *acc += v;
            }
        }
        next.steps_recorded += count;
        Ok(next)
    }

    /// Adds arbitrary per-order log-moments, e.g. from [`pure_dp_log_moment`].
    pub fn accumulate_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.orders.len() {
            return Err(AccountantError::OrderMismatch);
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(AccountantError::Domain(
                "log-moments must be finite and non-negative".into(),
            ));
        }
        let mut next = self.clone();
        for (acc, v) in next.log_moments.iter_mut().zip(values) {
            *acc += v;
        }
        next.steps_recorded += 1;
        Ok(next)
    }

    /// `ε = min_λ (α(λ) + ln(1/δ)) / λ`.
    pub fn get_epsilon(&self, delta: f64) -> Result<EpsilonQuery> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(AccountantError::Domain(format!("delta must be in (0, 1), got {delta}")));
        }
        if self.orders.is_empty() {
            return Err(AccountantError::EmptyLedger);
        }
        let ln_inv_delta = -delta.ln();
        let (order, epsilon) = self
            .orders
            .iter()
            .zip(&self.log_moments)
            .map(|(&lam, &alpha)| (lam, (alpha + ln_inv_delta) / f64::from(lam)))
            .fold((0, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best });
        Ok(EpsilonQuery {
            spend: PrivacySpend { epsilon, delta },
            order,
        })
    }

    /// `δ = min_λ exp(α(λ) − λε)`, capped at 1.
    pub fn get_delta(&self, epsilon: f64) -> Result<DeltaQuery> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(AccountantError::Domain(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        if self.orders.is_empty() {
            return Err(AccountantError::EmptyLedger);
        }
        let (order, ln_delta) = self
            .orders
            .iter()
            .zip(&self.log_moments)
            .map(|(&lam, &alpha)| (lam, alpha - f64::from(lam) * epsilon))
            .fold((0, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best });
        Ok(DeltaQuery {
            spend: PrivacySpend {
                epsilon,
                delta: ln_delta.exp().min(1.0),
            },
            order,
        })
    }
}

/// Caches [`StepMoments`] per distinct step so repeated accumulation of the
/// same `(q, σ)` does not redo the quadrature.
#[derive(Debug, Clone)]
pub struct MomentsAccountant {
    cfg: IntegrationConfig,
    orders: Vec<u32>,
    cache: HashMap<(u64, u64), StepMoments>,
}

impl Default for MomentsAccountant {
    fn default() -> Self {
        Self::new(IntegrationConfig::default(), DEFAULT_MAX_ORDER).expect("default config is valid")
    }
}

impl MomentsAccountant {
    pub fn new(cfg: IntegrationConfig, max_order: u32) -> Result<Self> {
        cfg.validate()?;
        if max_order < 1 {
            return Err(AccountantError::InvalidOrder(max_order));
        }
        Ok(Self {
            cfg,
            orders: (1..=max_order).collect(),
            cache: HashMap::new(),
        })
    }

    pub fn config(&self) -> &IntegrationConfig {
        &self.cfg
    }

    pub fn empty_ledger(&self) -> LogMomentLedger {
        LogMomentLedger::new(self.orders.clone()).expect("orders validated on construction")
    }

    pub fn step_moments(&mut self, step: SampledGaussianStep) -> Result<&StepMoments> {
        use std::collections::hash_map::Entry;
        match self.cache.entry(step.key()) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => {
                let m = StepMoments::compute(step, &self.orders, &self.cfg)?;
                Ok(e.insert(m))
            }
        }
    }

    pub fn accumulate(&mut self, ledger: &LogMomentLedger, step: SampledGaussianStep) -> Result<LogMomentLedger> {
        let moments = self.step_moments(step)?;
        ledger.accumulate_moments(moments)
    }

    /// `ε` after `steps` identical steps on a fresh ledger.
    pub fn epsilon_after(&mut self, step: SampledGaussianStep, steps: u64, delta: f64) -> Result<EpsilonQuery> {
        let ledger = self.empty_ledger();
        let moments = self.step_moments(step)?;
        ledger.accumulate_repeated(moments, steps)?.get_epsilon(delta)
    }

    /// Largest number of additional identical steps, starting from `start`,
    /// that keeps `ε ≤ target` at `delta`. Stops counting at `cap`.
    pub fn max_steps_within_budget(
        &mut self,
        start: &LogMomentLedger,
        step: SampledGaussianStep,
        target: PrivacySpend,
        cap: u64,
    ) -> Result<u64> {
        let moments = self.step_moments(step)?.clone();
        let mut ledger = start.clone();
        let mut taken = 0;
        while taken < cap {
            let next = ledger.accumulate_moments(&moments)?;
            if next.get_epsilon(target.delta)?.spend.epsilon > target.epsilon {
                break;
            }
            ledger = next;
            taken += 1;
        }
        Ok(taken)
    }
}

/// The generic composition baseline and its intermediate quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongCompositionBound {
    /// Total `ε` over all steps.
    pub epsilon: f64,
    /// Gaussian-mechanism `ε0` of an unsampled step at `base_delta`.
    pub base_epsilon: f64,
    pub base_delta: f64,
    /// Per-step `ε1 = q·ε0` after amplification by sampling.
    pub step_epsilon: f64,
    /// `δ′` reserved for the composition tail.
    pub slack_delta: f64,
    /// `ε0 < 1`, the regime where the Gaussian calibration is valid.
    pub base_calibration_valid: bool,
}

/// Strong composition of `T` sampled Gaussian steps.
///
/// Each unsampled step is `(ε0, δ0)`-DP with `ε0 = √(2 ln(1.25/δ0))/σ`.
/// Sampling with probability `q` makes it `(qε0, qδ0)`-DP. Composing `T` such
/// steps gives `ε1√(2T ln(1/δ′)) + Tε1(e^{ε1} − 1)` with total failure
/// probability `Tqδ0 + δ′`. The budget is split as `δ′ = δ/2` and
/// `δ0 = δ/(2Tq)`. The result is never worse than basic composition `Tε1`.
pub fn strong_composition_epsilon(q: f64, sigma: f64, delta: f64, steps: u64) -> Result<StrongCompositionBound> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountantError::Domain(format!("q must be in (0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AccountantError::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Domain(format!("delta must be in (0, 1), got {delta}")));
    }
    if steps == 0 {
        return Err(AccountantError::Domain("step count must be positive".into()));
    }
    let t = steps as f64;
    let slack_delta = delta / 2.0;
    let base_delta = delta / (2.0 * t * q);
    let base_epsilon = (2.0 * (1.25 / base_delta).ln()).sqrt() / sigma;
    let step_epsilon = q * base_epsilon;
    let advanced = step_epsilon * (2.0 * t * (1.0 / slack_delta).ln()).sqrt() + t * step_epsilon * step_epsilon.exp_m1();
    let basic = t * step_epsilon;
    Ok(StrongCompositionBound {
        epsilon: advanced.min(basic),
        base_epsilon,
        base_delta,
        step_epsilon,
        slack_delta,
        base_calibration_valid: base_epsilon < 1.0,
    })
}

/// Smallest `σ ∈ [0.5, 64]` (to within `1e−3`) such that `T` steps at
/// sampling rate `q` stay within `(epsilon, delta)`.
pub fn noise_for_target(q: f64, steps: u64, epsilon: f64, delta: f64, cfg: &IntegrationConfig) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) || steps == 0 || !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Domain(format!(
            "noise search needs q in (0,1], T > 0, epsilon > 0, delta in (0,1); got q={q}, T={steps}, epsilon={epsilon}, delta={delta}"
        )));
    }
    let orders: Vec<u32> = (1..=DEFAULT_MAX_ORDER).collect();
    let eval = |sigma: f64| -> Result<f64> {
        let step = SampledGaussianStep::new(q, sigma)?;
        let moments = StepMoments::compute(step, &orders, cfg)?;
        let ledger = LogMomentLedger::new(orders.clone())?;
        Ok(ledger.accumulate_repeated(&moments, steps)?.get_epsilon(delta)?.spend.epsilon)
    };

    let (mut lo, mut hi) = NOISE_SEARCH_RANGE;
    let mut eps_hi = eval(hi)?;
    if eps_hi > epsilon {
        return Err(AccountantError::Unachievable {
            epsilon,
            delta,
            sigma_max: hi,
        });
    }
    let mut eps_lo = eval(lo)?;
    if eps_lo < eps_hi {
        return Err(AccountantError::MonotonicityViolation { sigma: lo });
    }
    if eps_lo <= epsilon {
        return Ok(lo);
    }
    while hi - lo > NOISE_SEARCH_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        let eps_mid = eval(mid)?;
        if eps_mid > eps_lo || eps_mid < eps_hi {
            return Err(AccountantError::MonotonicityViolation { sigma: mid });
        }
        if eps_mid <= epsilon {
            hi = mid;
            eps_hi = eps_mid;
        } else {
            lo = mid;
            eps_lo = eps_mid;
        }
    }
    Ok(hi)
}

/// Privacy and utility cost of a private hyperparameter search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperparamBudget {
    /// `ε + 8ε′`.
    pub total_epsilon: f64,
    /// `max(ε, 8ε′)`, the tighter guarantee available for random-choice search.
    pub refined_epsilon: f64,
    /// `⌈(1/(ε′δp))² ln(1/(ε′δp))⌉`, saturating at `u64::MAX`.
    pub max_calls: u64,
    /// `(4/ε′) ln(1/(ε′δp))`, the loss in the quality score.
    pub accuracy_slack: f64,
}

pub fn hyperparam_search_budget(epsilon: f64, epsilon_prime: f64, delta: f64, p: f64) -> Result<HyperparamBudget> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(AccountantError::Domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if !(epsilon_prime > 0.0 && epsilon_prime <= 0.5) {
        return Err(AccountantError::Domain(format!(
            "epsilon' must be in (0, 1/2], got {epsilon_prime}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Domain(format!("delta must be in (0, 1), got {delta}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(AccountantError::Domain(format!("p must be in (0, 1), got {p}")));
    }
    let inv = 1.0 / (epsilon_prime * delta * p);
    let ln_inv = inv.ln();
    let calls = (inv * inv * ln_inv).ceil();
    let max_calls = if calls >= u64::MAX as f64 { u64::MAX } else { calls as u64 };
    Ok(HyperparamBudget {
        total_epsilon: epsilon + 8.0 * epsilon_prime,
        refined_epsilon: epsilon.max(8.0 * epsilon_prime),
        max_calls,
        accuracy_slack: 4.0 / epsilon_prime * ln_inv,
    })
}
