//! Desk-scale DP-SGD on synthetic two-cluster data.
//!
//! The model is binary logistic regression with two parameter groups,
//! `weights` and `bias`, plus a privately estimated `accuracy` metric group.
//! Every round samples records, computes per-example gradients, averages
//! them into microbatches, runs each group through its mechanism, records
//! the round in a ledger, and takes a plain SGD step on the noisy averages.
//! The guarantee in the report is computed from that ledger alone.

use rand::RngCore;
use serde::Serialize;

use crate::accountant::{account_ledger, OrderGrid, PrivacyGuarantee};
use crate::allocation::{allocate, split_clip_budget, AllocationRequest, ClipSplit, NoiseStrategy};
use crate::error::{invalid, DpError, Result};
use crate::ledger::{AccountingOptions, Ledger};
use crate::mechanisms::{evaluate_groups, microbatch_reduce, RemainderPolicy, RoundContext};
use crate::rng::{keyed_stream, GaussianStream, NoiseSource, Seed};
use crate::sampling::{SamplerConfig, SamplingPolicy};
use crate::vector::{validate_partition, GroupPartition, GroupSpec, RecordVectors};

pub const WEIGHTS: &str = "weights";
pub const BIAS: &str = "bias";
pub const ACCURACY: &str = "accuracy";

const PURPOSE_DATA: &str = "data";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub features: Vec<Vec<f64>>,
    /// 0 or 1.
    pub labels: Vec<u8>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Two unit-variance Gaussian clusters whose means are `separation` apart
/// along the all-ones direction. Labels are exactly balanced (up to one for
/// odd `n`) and shuffled.
pub fn generate_synthetic(
    n: usize,
    dim: usize,
    separation: f64,
    seed: &Seed,
    split: u64,
) -> Result<SyntheticDataset> {
    if n < 2 {
        return Err(invalid("need at least two examples"));
    }
    if dim == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(invalid("separation must be nonnegative"));
    }
    let mut rng = keyed_stream(seed, PURPOSE_DATA, split, 0);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        labels.swap(i, j);
    }
    let mut noise = GaussianStream::new(keyed_stream(seed, PURPOSE_DATA, split, 1));
    let offset = 0.5 * separation / (dim as f64).sqrt();
    let features = labels
        .iter()
        .map(|&y| {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            (0..dim)
                .map(|_| sign * offset + noise.standard_normal())
                .collect()
        })
        .collect();
    Ok(SyntheticDataset { features, labels })
}

/// Logistic regression parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Model {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Model {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    fn margin(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        (self.margin(x) >= 0.0) as u8
    }

    /// Cross-entropy loss on one example.
    pub fn loss(&self, x: &[f64], y: u8) -> f64 {
        let m = self.margin(x);
        // log(1 + e^m) - y m, stable on both sides.
        let softplus = if m > 0.0 {
            m + (-m).exp().ln_1p()
        } else {
            m.exp().ln_1p()
        };
        softplus - y as f64 * m
    }

    /// Gradient of [`Model::loss`] with respect to (weights, bias).
    pub fn gradient(&self, x: &[f64], y: u8) -> (Vec<f64>, f64) {
        let r = sigmoid(self.margin(x)) - y as f64;
        (x.iter().map(|xi| r * xi).collect(), r)
    }

    pub fn accuracy(&self, data: &SyntheticDataset) -> f64 {
        let correct = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / data.len() as f64
    }
}

/// How the two gradient groups are clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipLayout {
    /// Weights and bias clipped together as one vector.
    Flat,
    /// Weights and bias clipped separately at `S/√2` each.
    PerLayer,
    /// Weights and bias share one joint clip, each scaled by `S/√2`.
    Joint,
}

/// Builds the standard partition: gradient groups per `layout` plus the
/// accuracy group clipped at 1, with a target noise multiplier `z` spread
/// across all groups by `strategy`. `z = 0` yields a noiseless partition.
pub fn standard_partition(
    dim: usize,
    layout: ClipLayout,
    clip_norm: f64,
    z: f64,
    strategy: NoiseStrategy,
    expected_sample: f64,
) -> Result<GroupPartition> {
    if dim == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    if !(z >= 0.0 && z.is_finite()) {
        return Err(invalid(format!(
            "noise multiplier must be nonnegative, got {z}"
        )));
    }
    let mut groups = match layout {
        ClipLayout::Flat => {
            let s = split_clip_budget(clip_norm, &[dim, 1], ClipSplit::Flat)?;
            vec![GroupSpec::separate(
                "gradients",
                &[WEIGHTS, BIAS],
                s[0],
                0.0,
            )]
        }
        ClipLayout::PerLayer => {
            let s = split_clip_budget(clip_norm, &[dim, 1], ClipSplit::PerLayer)?;
            vec![
                GroupSpec::separate(WEIGHTS, &[WEIGHTS], s[0], 0.0),
                GroupSpec::separate(BIAS, &[BIAS], s[1], 0.0),
            ]
        }
        ClipLayout::Joint => {
            let s = split_clip_budget(clip_norm, &[dim, 1], ClipSplit::PerLayer)?;
            vec![GroupSpec::joint("gradients", &[WEIGHTS, BIAS], s, 1.0, 0.0)]
        }
    };
    groups.push(GroupSpec::separate(ACCURACY, &[ACCURACY], 1.0, 0.0));
    if z > 0.0 {
        let dims_of = |g: &GroupSpec| -> usize {
            g.member_names
                .iter()
                .map(|m| if m == WEIGHTS { dim } else { 1 })
                .sum()
        };
        let req = AllocationRequest {
            target_z: z,
            group_bounds: groups.iter().map(|g| (g.clip, dims_of(g))).collect(),
            strategy,
        };
        for (g, sigma_sum) in groups.iter_mut().zip(allocate(&req)?) {
            g.noise_sigma = sigma_sum / expected_sample;
        }
    }
    Ok(GroupPartition {
        groups,
        total_dim: dim + 2,
    })
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n: usize,
    pub dim: usize,
    pub separation: f64,
    pub test_n: usize,
    pub rounds: u64,
    pub policy: SamplingPolicy,
    pub microbatch_size: usize,
    pub layout: ClipLayout,
    pub clip_norm: f64,
    /// Target noise multiplier; 0 runs in insecure test mode.
    pub noise_multiplier: f64,
    pub allocation: NoiseStrategy,
    pub learning_rate: f64,
    pub seed: Seed,
    pub delta: f64,
    pub grid: OrderGrid,
    pub accounting: AccountingOptions,
}

impl TrainConfig {
    /// n = 10⁴, dim = 2, Poisson q = 0.01, z = 1.1, T = 1000, δ = 1e-5.
    pub fn default_with_seed(seed: Seed) -> Self {
        Self {
            n: 10_000,
            dim: 2,
            separation: 4.0,
            test_n: 2_000,
            rounds: 1_000,
            policy: SamplingPolicy::PoissonIid { q: 0.01 },
            microbatch_size: 1,
            layout: ClipLayout::PerLayer,
            clip_norm: 1.0,
            noise_multiplier: 1.1,
            allocation: NoiseStrategy::Proportional,
            learning_rate: 0.5,
            seed,
            delta: 1e-5,
            grid: OrderGrid::default(),
            accounting: AccountingOptions::default(),
        }
    }

    pub fn is_test_mode(&self) -> bool {
        self.noise_multiplier == 0.0
    }

    /// Number of privacy records (microbatches) in the database.
    pub fn records(&self) -> u64 {
        (self.n / self.microbatch_size.max(1)) as u64
    }

    fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::new(self.policy, self.n as u64, self.seed)
    }

    /// The group partition this config trains with.
    pub fn partition(&self) -> Result<GroupPartition> {
        let sampler = self.sampler()?;
        standard_partition(
            self.dim,
            self.layout,
            self.clip_norm,
            self.noise_multiplier,
            self.allocation,
            sampler.rate() * self.records() as f64,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.microbatch_size == 0 || self.microbatch_size > self.n {
            return Err(invalid("microbatch size must be in [1, n]"));
        }
        if self.test_n == 0 {
            return Err(invalid("held-out set must be nonempty"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Result of the post-hoc accounting step.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AccountingOutcome {
    Guarantee(GuaranteeReport),
    Refused { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuaranteeReport {
    /// `null` when infinite.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub achieving_order: Option<f64>,
    pub caveats: Vec<String>,
}

impl From<&PrivacyGuarantee> for GuaranteeReport {
    fn from(g: &PrivacyGuarantee) -> Self {
        Self {
            epsilon: g.epsilon.is_finite().then_some(g.epsilon),
            delta: g.delta,
            achieving_order: g.achieving_order,
            caveats: g.caveats.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Accuracy on a separate synthetic split. A harness measurement, not a
    /// private release.
    pub heldout_accuracy_non_private: f64,
    /// Noisy accuracy estimate from each round's metrics group.
    pub private_accuracy_per_round: Vec<f64>,
    pub accounting: AccountingOutcome,
    pub ledger_path: Option<String>,
    pub model: Model,
    pub test_mode: bool,
}

impl TrainReport {
    pub fn epsilon(&self) -> Option<f64> {
        match &self.accounting {
            AccountingOutcome::Guarantee(g) => g.epsilon,
            AccountingOutcome::Refused { .. } => None,
        }
    }
}

pub struct TrainOutput {
    pub report: TrainReport,
    pub ledger: Ledger,
}

fn dims_for(spec: &GroupSpec, dim: usize) -> Vec<usize> {
    spec.member_names
        .iter()
        .map(|m| if m == WEIGHTS { dim } else { 1 })
        .collect()
}

fn example_record(model: &Model, x: &[f64], y: u8) -> Result<RecordVectors> {
    let (gw, gb) = model.gradient(x, y);
    let correct = (model.predict(x) == y) as u8 as f64;
    RecordVectors::new(vec![
        (WEIGHTS.to_string(), gw),
        (BIAS.to_string(), vec![gb]),
        (ACCURACY.to_string(), vec![correct]),
    ])
}

/// Runs DP-SGD and accounts the resulting ledger.
pub fn dp_sgd_train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let sampler = cfg.sampler()?;
    let partition = cfg.partition()?;
    let train = generate_synthetic(cfg.n, cfg.dim, cfg.separation, &cfg.seed, 0)?;
    let heldout = generate_synthetic(cfg.test_n.max(2), cfg.dim, cfg.separation, &cfg.seed, 1)?;

    let template = example_record(&Model::zeros(cfg.dim), &train.features[0], train.labels[0])?;
    if let Some(v) = validate_partition(&partition, &template).first() {
        return Err(DpError::Configuration(v.to_string()));
    }
    let groups: Vec<(GroupSpec, Vec<usize>)> = partition
        .groups
        .iter()
        .map(|g| (g.clone(), dims_for(g, cfg.dim)))
        .collect();

    let q = sampler.rate();
    let n_records = cfg.records();
    let mut model = Model::zeros(cfg.dim);
    let mut ledger = Ledger::new();
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let sample = sampler.sample(round)?;
        let examples = sample
            .indices()
            .iter()
            .map(|&i| {
                example_record(
                    &model,
                    &train.features[i as usize],
                    train.labels[i as usize],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let records = microbatch_reduce(&examples, cfg.microbatch_size, RemainderPolicy::Drop)?;

        let mut ctx = RoundContext::new(q, n_records, round)?;
        if cfg.is_test_mode() {
            ctx = ctx.insecure_test();
        }
        let handle = ledger.record_sample(q, n_records, sampler.policy.tag())?;
        let estimates = evaluate_groups(&records, &groups, &ctx, &cfg.seed)?;
        for e in &estimates {
            ledger.record_sum_query(
                &handle,
                e.emitted_tuple.clip,
                e.emitted_tuple.sigma_sum,
                &e.group_name,
            )?;
        }
        ledger.close_round(handle)?;

        for (e, (spec, _)) in estimates.iter().zip(&groups) {
            for (name, est) in spec.member_names.iter().zip(&e.estimates) {
                match name.as_str() {
                    WEIGHTS => model
                        .weights
                        .iter_mut()
                        .zip(est)
                        .for_each(|(w, g)| *w -= cfg.learning_rate * g),
                    BIAS => model.bias -= cfg.learning_rate * est[0],
                    ACCURACY => metrics.push(est[0]),
                    _ => {}
                }
            }
        }
    }

    let mut opts = cfg.accounting;
    if cfg.is_test_mode() {
        opts.allow_insecure = true;
    }
    let accounting = match account_ledger(&ledger, cfg.delta, &cfg.grid, opts) {
        Ok(g) => AccountingOutcome::Guarantee(GuaranteeReport::from(&g)),
        Err(DpError::Refusal(reason)) => AccountingOutcome::Refused { reason },
        Err(e) => return Err(e),
    };
    Ok(TrainOutput {
        report: TrainReport {
            heldout_accuracy_non_private: model.accuracy(&heldout),
            private_accuracy_per_round: metrics,
            accounting,
            ledger_path: None,
            model,
            test_mode: cfg.is_test_mode(),
        },
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn synthetic_examples() {
        let s = Seed::from_u128(3);
        let d = generate_synthetic(2, 1, 100.0, &s, 0).unwrap();
        assert_eq!(d.labels.iter().map(|&y| y as usize).sum::<usize>(), 1);
        // One per class, far apart: the midpoint separates them.
        let (a, b) = (d.features[0][0], d.features[1][0]);
        assert!((a > 0.0) == (d.labels[0] == 1) && (b > 0.0) == (d.labels[1] == 1));

        assert_eq!(
            generate_synthetic(500, 3, 1.0, &s, 0).unwrap(),
            generate_synthetic(500, 3, 1.0, &s, 0).unwrap()
        );
        assert_ne!(
            generate_synthetic(500, 3, 1.0, &s, 0).unwrap(),
            generate_synthetic(500, 3, 1.0, &s, 1).unwrap()
        );

        let big = generate_synthetic(1001, 2, 1.0, &s, 0).unwrap();
        let ones = big.labels.iter().filter(|&&y| y == 1).count() as f64;
        assert!((ones / 1001.0 - 0.5).abs() <= 0.01);

        assert!(generate_synthetic(1, 1, 1.0, &s, 0).is_err());
        assert!(generate_synthetic(10, 0, 1.0, &s, 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut g = GaussianStream::new(ChaCha20Rng::seed_from_u64(10));
        for _ in 0..100 {
            let dim = 1 + (rng.next_u32() % 5) as usize;
            let model = Model {
                weights: (0..dim).map(|_| g.standard_normal()).collect(),
                bias: g.standard_normal(),
            };
            let x: Vec<f64> = (0..dim).map(|_| 2.0 * g.standard_normal()).collect();
            let y = (rng.next_u32() % 2) as u8;
            let (gw, gb) = model.gradient(&x, y);
            let h = 1e-5;
            let check = |analytic: f64, plus: Model, minus: Model| {
                let fd = (plus.loss(&x, y) - minus.loss(&x, y)) / (2.0 * h);
                let scale = analytic.abs().max(1e-3);
                assert!((fd - analytic).abs() / scale <= 1e-6, "{fd} vs {analytic}");
            };
            for (j, &g) in gw.iter().enumerate() {
                let mut p = model.clone();
                p.weights[j] += h;
                let mut m = model.clone();
                m.weights[j] -= h;
                check(g, p, m);
            }
            let mut p = model.clone();
            p.bias += h;
            let mut m = model.clone();
            m.bias -= h;
            check(gb, p, m);
        }
    }

    #[test]
    fn partition_covers_record() {
        for layout in [ClipLayout::Flat, ClipLayout::PerLayer, ClipLayout::Joint] {
            let p =
                standard_partition(3, layout, 1.0, 1.1, NoiseStrategy::Proportional, 50.0).unwrap();
            let r = example_record(&Model::zeros(3), &[1.0, 2.0, 3.0], 1).unwrap();
            assert!(validate_partition(&p, &r).is_empty(), "{layout:?}");
        }
    }

    #[test]
    fn partition_hits_target_z() {
        for strategy in [
            NoiseStrategy::Proportional,
            NoiseStrategy::DimensionalityAdjusted,
        ] {
            for layout in [ClipLayout::Flat, ClipLayout::PerLayer, ClipLayout::Joint] {
                let p = standard_partition(4, layout, 2.0, 1.3, strategy, 25.0).unwrap();
                let tuples: Vec<_> = p
                    .groups
                    .iter()
                    .map(|g| {
                        crate::vector::PrivacyTuple::new(g.clip, 25.0 * g.noise_sigma).unwrap()
                    })
                    .collect();
                let z = crate::allocation::effective_z(&tuples).unwrap();
                assert!((z - 1.3).abs() < 1e-12, "{strategy:?} {layout:?}: {z}");
            }
        }
    }

    #[test]
    fn noisy_metric_differs_from_truth() {
        // At round 0 the zero model predicts class 1 everywhere, so with
        // q = 1 the true accuracy is exactly one half.
        let mut cfg = TrainConfig::default_with_seed(Seed::from_u128(5));
        cfg.n = 1000;
        cfg.rounds = 1;
        cfg.policy = SamplingPolicy::PoissonIid { q: 1.0 };
        let out = dp_sgd_train(&cfg).unwrap();
        assert_ne!(out.report.private_accuracy_per_round[0], 0.5);

        cfg.noise_multiplier = 0.0;
        let out = dp_sgd_train(&cfg).unwrap();
        assert_eq!(out.report.private_accuracy_per_round[0], 0.5);
        assert!(out.report.test_mode);
        assert_eq!(out.report.epsilon(), None);
    }
}
