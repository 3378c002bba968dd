//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! One step with sampling rate `q` and noise multiplier `z` has, at order
//! `λ`, RDP `ln(A_λ) / (λ - 1)` where `A_λ = E_{x~μ0}[(μ(x)/μ0(x))^λ]`,
//! `μ0 = N(0, z²)` and `μ = (1-q) N(0, z²) + q N(1, z²)`. Integer orders use
//! the binomial expansion
//!
//! ```text
//! A_λ = Σ_{k=0..λ} C(λ,k) (1-q)^(λ-k) q^k exp(k(k-1) / (2z²))
//! ```
//!
//! summed in log space; fractional orders integrate the same moment
//! numerically. Steps compose by adding RDP, and a profile converts to
//! `(ε, δ)` by `ε = min_λ RDP(λ) + ln(1/δ)/(λ-1)`.
//!
//! An order whose moment overflows is stored as `+∞` and skipped when
//! minimizing, never clamped.

use crate::error::{invalid, DpError, Result};
use crate::ledger::{formal_ledger, AccountingOptions, FormalLedger, Ledger};
use crate::sampling::AccountingSupport;

/// Ascending RDP orders, all greater than one.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderGrid {
    orders: Vec<f64>,
}

impl OrderGrid {
    pub fn new(orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(invalid("order grid is empty"));
        }
        if orders.iter().any(|o| !(o.is_finite() && *o > 1.0)) {
            return Err(invalid("every order must be finite and greater than 1"));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("orders must be strictly ascending"));
        }
        Ok(Self { orders })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

impl Default for OrderGrid {
    /// Integers 2 through 64, then 80, 96, 128, 256 and 512.
    fn default() -> Self {
        let mut orders: Vec<f64> = (2..=64).map(f64::from).collect();
        orders.extend([80.0, 96.0, 128.0, 256.0, 512.0]);
        Self { orders }
    }
}

/// RDP values aligned with a grid. `+∞` marks an order that overflowed.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpProfile {
    grid: OrderGrid,
    values: Vec<f64>,
}

impl RdpProfile {
    pub fn zeros(grid: &OrderGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &OrderGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid("profile length does not match grid"));
        }
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(invalid("RDP values must be nonnegative"));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &OrderGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Profile of `steps` repetitions, by multiplication.
    pub fn scaled(&self, steps: u64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * steps as f64).collect(),
        }
    }

    fn infinite(grid: &OrderGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![f64::INFINITY; grid.len()],
        }
    }
}

/// An `(ε, δ)` guarantee with the order that achieved it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyGuarantee {
    /// `+∞` when no order gives a finite bound.
    pub epsilon: f64,
    pub delta: f64,
    pub achieving_order: Option<f64>,
    pub caveats: Vec<String>,
}

impl PrivacyGuarantee {
    pub fn is_finite(&self) -> bool {
        self.epsilon.is_finite()
    }
}

pub const GRID_TOO_NARROW: &str = "minimum at the edge of the order grid; widen the grid";
pub const NON_PRIVATE: &str = "ledger contains non-private rounds; guarantee is void";

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

/// `ln(k!)` for `k = 0..=max`.
fn log_factorials(max: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=max {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// `ln A_λ` for integer `λ` by the binomial expansion.
fn log_moment_binomial(q: f64, z: f64, order: u64, log_fact: &[f64]) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * z * z);
    let n = order;
    let mut terms = Vec::with_capacity(n as usize + 1);
    for k in 0..=n {
        let rest = n - k;
        // 0 * ln(0) terms are absent, not NaN.
        let mut t = log_fact[n as usize] - log_fact[k as usize] - log_fact[rest as usize];
        if rest > 0 {
            t += rest as f64 * log_1mq;
        }
        if k > 0 {
            t += k as f64 * log_q;
        }
        t += (k * k.saturating_sub(1)) as f64 * inv_two_var;
        terms.push(t);
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if !max.is_finite() {
        return f64::INFINITY;
    }
    // The k = 0 term (or whichever dominates) is pulled out so that a sum
    // close to 1 keeps its small excess.
    let excess: f64 = terms.iter().map(|t| (t - max).exp()).sum::<f64>() - 1.0;
    max + excess.ln_1p()
}

mod quadrature {
    //! Adaptive Gauss–Kronrod (7, 15) integration of the Rényi moment in
    //! log-shifted form, used for fractional orders.

    const XGK: [f64; 8] = [
        0.991_455_371_120_812_6,
        0.949_107_912_342_758_5,
        0.864_864_423_359_769_1,
        0.741_531_185_599_394_4,
        0.586_087_235_467_691_1,
        0.405_845_151_377_397_2,
        0.207_784_955_007_898_5,
        0.0,
    ];
    const WGK: [f64; 8] = [
        0.022_935_322_010_529_22,
        0.063_092_092_629_978_55,
        0.104_790_010_322_250_2,
        0.140_653_259_715_525_9,
        0.169_004_726_639_267_9,
        0.190_350_578_064_785_4,
        0.204_432_940_075_298_9,
        0.209_482_141_084_727_8,
    ];
    const WG: [f64; 4] = [
        0.129_484_966_168_869_7,
        0.279_705_391_489_276_7,
        0.381_830_050_505_118_9,
        0.417_959_183_673_469_4,
    ];

    fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let fc = f(c);
        let mut k = WGK[7] * fc;
        let mut g = WG[3] * fc;
        for i in 0..7 {
            let dx = h * XGK[i];
            let s = f(c - dx) + f(c + dx);
            k += WGK[i] * s;
            if i % 2 == 1 {
                g += WG[i / 2] * s;
            }
        }
        (k * h, (k - g).abs() * h)
    }

    fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, noise: f64, depth: u32) -> f64 {
        let (est, err) = kronrod(f, a, b);
        if err <= tol || err <= noise * est.abs() || depth == 0 {
            return est;
        }
        let m = 0.5 * (a + b);
        adapt(f, a, m, tol / 2.0, noise, depth - 1) + adapt(f, m, b, tol / 2.0, noise, depth - 1)
    }

    /// `ln ∫ exp(log_f(x)) dx` over `[lo, hi]`, split into panels of width
    /// `panel`. The absolute target is 1e-13 of a first-pass estimate,
    /// shared out by width. `exp` of a log-integrand of size `L` carries
    /// about `L` ulps of relative noise, so refinement also stops there.
    pub(super) fn log_integral<F: Fn(f64) -> f64>(log_f: F, lo: f64, hi: f64, panel: f64) -> f64 {
        let panels = ((hi - lo) / panel).ceil().max(1.0) as usize;
        let scan = panels * 8;
        let (mut shift, mut magnitude) = (f64::NEG_INFINITY, 1.0f64);
        for i in 0..=scan {
            let l = log_f(lo + (hi - lo) * i as f64 / scan as f64);
            shift = shift.max(l);
            if l.is_finite() {
                magnitude = magnitude.max(l.abs());
            }
        }
        if !shift.is_finite() {
            return shift;
        }
        let f = |x: f64| (log_f(x) - shift).exp();
        let width = (hi - lo) / panels as f64;
        let coarse: f64 = (0..panels)
            .map(|p| kronrod(&f, lo + p as f64 * width, lo + (p + 1) as f64 * width).0)
            .sum();
        let tol = 1e-13 * coarse / panels as f64;
        let noise = 64.0 * f64::EPSILON * magnitude;
        let total: f64 = (0..panels)
            .map(|p| {
                let a = lo + p as f64 * width;
                adapt(&f, a, a + width, tol, noise, 40)
            })
            .sum();
        shift + total.ln()
    }
}

/// `ln A_λ` for any real `λ > 1` by numerical integration.
fn log_moment_quadrature(q: f64, z: f64, order: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let log_1mq = (-q).ln_1p();
    let log_q = q.ln();
    let norm = -(z * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_f = |x: f64| {
        let t = (2.0 * x - 1.0) / (2.0 * z * z);
        norm - x * x / (2.0 * z * z) + order * log_add_exp(log_1mq, log_q + t)
    };
    quadrature::log_integral(log_f, -40.0 * z - 1.0, order + 40.0 * z + 1.0, z / 2.0)
}

fn to_rdp(log_moment: f64, order: f64) -> f64 {
    if !log_moment.is_finite() && log_moment > 0.0 {
        return f64::INFINITY;
    }
    // The moment is at least 1; tiny negative values are rounding.
    (log_moment / (order - 1.0)).max(0.0)
}

/// RDP of one sampled Gaussian step at every order of `grid`.
pub fn rdp_step(q: f64, z: f64, grid: &OrderGrid) -> Result<RdpProfile> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!(
            "sampling probability must be in [0, 1], got {q}"
        )));
    }
    if !(z > 0.0) || z.is_nan() {
        return Err(invalid(format!(
            "noise multiplier must be positive, got {z}"
        )));
    }
    if z.is_infinite() {
        return Ok(RdpProfile::zeros(grid));
    }
    let max_int = grid
        .orders()
        .iter()
        .filter(|o| o.fract() == 0.0)
        .fold(0.0f64, |m, o| m.max(*o)) as u64;
    let log_fact = log_factorials(max_int);
    let values = grid
        .orders()
        .iter()
        .map(|&o| {
            let lm = if o.fract() == 0.0 {
                log_moment_binomial(q, z, o as u64, &log_fact)
            } else {
                log_moment_quadrature(q, z, o)
            };
            to_rdp(lm, o)
        })
        .collect();
    Ok(RdpProfile {
        grid: grid.clone(),
        values,
    })
}

/// Element-wise sum of step profiles, in order.
pub fn compose_rdp(grid: &OrderGrid, steps: &[RdpProfile]) -> Result<RdpProfile> {
    let mut acc = RdpProfile::zeros(grid);
    for s in steps {
        if &s.grid != grid {
            return Err(invalid("profiles were computed on different order grids"));
        }
        acc.values
            .iter_mut()
            .zip(&s.values)
            .for_each(|(a, v)| *a += v);
    }
    Ok(acc)
}

/// Best `ε` over the grid for the given `δ`.
pub fn epsilon_at_delta(profile: &RdpProfile, delta: f64) -> Result<PrivacyGuarantee> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    if profile.values.is_empty() {
        return Err(invalid("empty profile"));
    }
    let log_inv_delta = -delta.ln();
    let orders = profile.grid.orders();
    let mut best: Option<(usize, f64)> = None;
    for (i, (&o, &r)) in orders.iter().zip(&profile.values).enumerate() {
        if !r.is_finite() {
            continue;
        }
        let eps = r + log_inv_delta / (o - 1.0);
        if best.is_none_or(|(_, b)| eps < b) {
            best = Some((i, eps));
        }
    }
    let mut caveats = Vec::new();
    let (epsilon, achieving_order) = match best {
        Some((i, eps)) => {
            if orders.len() > 1 && (i == 0 || i == orders.len() - 1) {
                caveats.push(GRID_TOO_NARROW.to_string());
            }
            (eps, Some(orders[i]))
        }
        None => (f64::INFINITY, None),
    };
    Ok(PrivacyGuarantee {
        epsilon,
        delta,
        achieving_order,
        caveats,
    })
}

/// `ε` after `steps` identical steps, composed by multiplication.
pub fn epsilon_for_steps(
    q: f64,
    z: f64,
    steps: u64,
    delta: f64,
    grid: &OrderGrid,
) -> Result<PrivacyGuarantee> {
    epsilon_at_delta(&rdp_step(q, z, grid)?.scaled(steps), delta)
}

/// Accounts an already-normalized ledger.
pub fn account_formal(
    formal: &FormalLedger,
    delta: f64,
    grid: &OrderGrid,
) -> Result<PrivacyGuarantee> {
    let mut caveats: Vec<String> = formal.warnings.clone();
    let mut steps = Vec::with_capacity(formal.rounds.len());
    // Consecutive rounds usually share (q, z); reuse the last profile.
    let mut last: Option<(u64, u64, RdpProfile)> = None;
    for round in &formal.rounds {
        let q = match &round.support {
            AccountingSupport::Supported { q, caveat } => {
                if let Some(c) = caveat {
                    if !caveats.contains(c) {
                        caveats.push(c.clone());
                    }
                }
                *q
            }
            AccountingSupport::Unsupported(reason) => {
                return Err(DpError::Refusal(format!(
                    "round {} uses {} sampling: {reason}",
                    round.round_id, round.policy
                )));
            }
        };
        let profile = match &round.query {
            None => RdpProfile::infinite(grid),
            Some(query) => {
                let key = (q.to_bits(), query.z_effective.to_bits());
                match &last {
                    Some((kq, kz, p)) if (*kq, *kz) == key => p.clone(),
                    _ => {
                        let p = rdp_step(q, query.z_effective, grid)?;
                        last = Some((key.0, key.1, p.clone()));
                        p
                    }
                }
            }
        };
        steps.push(profile);
    }
    let total = compose_rdp(grid, &steps)?;
    let mut g = epsilon_at_delta(&total, delta)?;
    if formal.non_private {
        caveats.push(NON_PRIVATE.to_string());
    }
    caveats.append(&mut g.caveats);
    g.caveats = caveats;
    Ok(g)
}

/// Post-hoc guarantee for a whole ledger.
pub fn account_ledger(
    ledger: &Ledger,
    delta: f64,
    grid: &OrderGrid,
    opts: AccountingOptions,
) -> Result<PrivacyGuarantee> {
    account_formal(&formal_ledger(ledger, opts)?, delta, grid)
}

/// Noise multiplier of the classical single-shot Gaussian mechanism:
/// `sqrt(2 ln(1.25/δ)) / ε`.
pub fn baseline_noise_multiplier(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// The `(qε, qδ)` guarantee of one sampled step of the baseline mechanism.
pub fn baseline_guarantee(q: f64, epsilon: f64, delta: f64) -> Result<(f64, f64)> {
    baseline_noise_multiplier(epsilon, delta)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid(format!(
            "sampling probability must be in (0, 1], got {q}"
        )));
    }
    Ok((q * epsilon, q * delta))
}

/// Which parameter a calibration searches over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knob {
    SamplingRate,
    NoiseMultiplier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRequest {
    pub target_epsilon: f64,
    pub delta: f64,
    pub steps: u64,
    pub knob: Knob,
    /// Held fixed when searching over the noise multiplier.
    pub q: f64,
    /// Held fixed when searching over the sampling rate.
    pub z: f64,
    pub lower: f64,
    pub upper: f64,
    pub tolerance: f64,
    pub grid: OrderGrid,
    /// Set when the fixed parameters were tuned on private data.
    pub tuned_on_private_data: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub value: f64,
    pub epsilon: f64,
    pub probes: u32,
    pub warnings: Vec<String>,
}

pub const MAX_BISECTIONS: u32 = 60;
pub const TUNING_WARNING: &str =
    "parameters were tuned on private data; that tuning has its own privacy cost, not included here";

impl CalibrationRequest {
    /// `ε` if the knob is set to `value`.
    pub fn epsilon_at(&self, value: f64) -> Result<f64> {
        let (q, z) = match self.knob {
            Knob::SamplingRate => (value, self.z),
            Knob::NoiseMultiplier => (self.q, value),
        };
        Ok(epsilon_for_steps(q, z, self.steps, self.delta, &self.grid)?.epsilon)
    }
}

/// Bisection on the knob until the accountant's `ε` is within `tolerance`
/// of the target. `ε` increases with `q` and decreases with `z`.
pub fn calibrate(req: &CalibrationRequest) -> Result<CalibrationOutcome> {
    if !(req.target_epsilon > 0.0 && req.target_epsilon.is_finite()) {
        return Err(invalid("target epsilon must be positive"));
    }
    if !(req.tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if !(req.lower < req.upper) {
        return Err(invalid("lower bound must be below upper bound"));
    }
    match req.knob {
        Knob::SamplingRate if !(req.lower > 0.0 && req.upper <= 1.0) => {
            return Err(invalid("sampling-rate bounds must lie in (0, 1]"));
        }
        Knob::NoiseMultiplier if !(req.lower > 0.0) => {
            return Err(invalid("noise-multiplier bounds must be positive"));
        }
        _ => {}
    }
    let warnings = if req.tuned_on_private_data {
        vec![TUNING_WARNING.to_string()]
    } else {
        Vec::new()
    };
    let target = req.target_epsilon;
    let eps_lo = req.epsilon_at(req.lower)?;
    let eps_hi = req.epsilon_at(req.upper)?;
    let increasing = req.knob == Knob::SamplingRate;
    if (increasing && eps_lo > eps_hi) || (!increasing && eps_lo < eps_hi) {
        return Err(DpError::Configuration(format!(
            "epsilon is not monotone over the bounds ({eps_lo} at lower, {eps_hi} at upper)"
        )));
    }
    let outcome = |value, epsilon, probes| CalibrationOutcome {
        value,
        epsilon,
        probes,
        warnings: warnings.clone(),
    };
    if (eps_lo - target).abs() <= req.tolerance {
        return Ok(outcome(req.lower, eps_lo, 2));
    }
    if (eps_hi - target).abs() <= req.tolerance {
        return Ok(outcome(req.upper, eps_hi, 2));
    }
    let (small, large) = (eps_lo.min(eps_hi), eps_lo.max(eps_hi));
    if !(small < target && target < large) {
        return Err(DpError::CalibrationInfeasible {
            target,
            lower_epsilon: eps_lo,
            upper_epsilon: eps_hi,
        });
    }
    let (mut lo, mut hi) = (req.lower, req.upper);
    let mut probes = 2;
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let eps = req.epsilon_at(mid)?;
        probes += 1;
        if (eps - target).abs() <= req.tolerance {
            return Ok(outcome(mid, eps, probes));
        }
        // Move the end whose epsilon is on the same side of the target.
        if (eps < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(DpError::Configuration(format!(
        "bisection did not reach tolerance {} in {MAX_BISECTIONS} steps",
        req.tolerance
    )))
}
