//! Minibatch sampling policies.
//!
//! All randomness comes from [`keyed_stream`] under the sampling purpose
//! label, so the same seed and round always give the same sample on every
//! platform. Only 64-bit integer ranges are drawn.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, DpError, Result};
use crate::rng::{keyed_stream, unit_interval, Seed, PURPOSE_SAMPLING};

const PURPOSE_PARTITION: &str = "partition";

/// How records are drawn each round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingPolicy {
    /// Each record independently with probability `q`.
    PoissonIid { q: f64 },
    /// A uniformly random subset of exactly `batch` records.
    FixedSizeWor { batch: u64 },
    /// A random permutation per epoch, cut into disjoint batches.
    DisjointPartition { batch: u64 },
}

/// Policy identifier stored in the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyTag {
    Poisson,
    FixedSize,
    Disjoint,
}

impl PolicyTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyTag::Poisson => "poisson",
            PolicyTag::FixedSize => "fixed-size",
            PolicyTag::Disjoint => "disjoint",
        }
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyTag {
    type Err = DpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(PolicyTag::Poisson),
            "fixed-size" => Ok(PolicyTag::FixedSize),
            "disjoint" => Ok(PolicyTag::Disjoint),
            other => Err(invalid(format!("unknown sampling policy `{other}`"))),
        }
    }
}

impl SamplingPolicy {
    pub fn tag(&self) -> PolicyTag {
        match self {
            SamplingPolicy::PoissonIid { .. } => PolicyTag::Poisson,
            SamplingPolicy::FixedSizeWor { .. } => PolicyTag::FixedSize,
            SamplingPolicy::DisjointPartition { .. } => PolicyTag::Disjoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub policy: SamplingPolicy,
    pub n: u64,
    pub seed: Seed,
}

impl SamplerConfig {
    pub fn new(policy: SamplingPolicy, n: u64, seed: Seed) -> Result<Self> {
        let cfg = Self { policy, n, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(DpError::Configuration(
                "database size must be at least 1".into(),
            ));
        }
        match self.policy {
            SamplingPolicy::PoissonIid { q } if !(q > 0.0 && q <= 1.0) => Err(
                DpError::Configuration(format!("sampling probability must be in (0, 1], got {q}")),
            ),
            SamplingPolicy::FixedSizeWor { batch }
            | SamplingPolicy::DisjointPartition { batch }
                if batch == 0 || batch > self.n =>
            {
                Err(DpError::Configuration(format!(
                    "batch size must be in [1, {}], got {batch}",
                    self.n
                )))
            }
            _ => Ok(()),
        }
    }

    /// Sampling probability seen by the accountant: `q` for Poisson, `b/n`
    /// otherwise.
    pub fn rate(&self) -> f64 {
        match self.policy {
            SamplingPolicy::PoissonIid { q } => q,
            SamplingPolicy::FixedSizeWor { batch }
            | SamplingPolicy::DisjointPartition { batch } => batch as f64 / self.n as f64,
        }
    }

    /// Number of full batches per epoch under the disjoint policy.
    pub fn batches_per_epoch(&self) -> u64 {
        match self.policy {
            SamplingPolicy::DisjointPartition { batch } => self.n / batch,
            _ => 1,
        }
    }

    /// Draws the sample for `round_id` under whichever policy is configured.
    /// Disjoint rounds walk through successive epochs.
    pub fn sample(&self, round_id: u64) -> Result<ConfidentialSample> {
        match self.policy {
            SamplingPolicy::PoissonIid { .. } => poisson_sample(self, round_id),
            SamplingPolicy::FixedSizeWor { .. } => fixed_size_sample(self, round_id),
            SamplingPolicy::DisjointPartition { .. } => {
                let per = self.batches_per_epoch();
                let mut batches = partition_epoch(self, round_id / per)?;
                let idx = (round_id % per) as usize;
                Ok(ConfidentialSample {
                    indices: std::mem::take(&mut batches[idx]),
                })
            }
        }
    }
}

/// A sampled index set, sorted ascending.
///
/// Under Poisson sampling the size of the sample is itself sensitive, so the
/// `Debug` output never shows it.
#[derive(Clone, PartialEq, Eq)]
pub struct ConfidentialSample {
    indices: Vec<u64>,
}

impl ConfidentialSample {
    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn into_indices(self) -> Vec<u64> {
        self.indices
    }

    /// Realized sample size. Do not release this for Poisson samples.
    pub fn confidential_len(&self) -> usize {
        self.indices.len()
    }
}

impl fmt::Debug for ConfidentialSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ConfidentialSample(<redacted>)")
    }
}

/// Includes each index in `[0, n)` independently with probability `q`.
pub fn poisson_sample(cfg: &SamplerConfig, round_id: u64) -> Result<ConfidentialSample> {
    cfg.validate()?;
    let SamplingPolicy::PoissonIid { q } = cfg.policy else {
        return Err(DpError::Configuration("not a Poisson sampler".into()));
    };
    let mut rng = keyed_stream(&cfg.seed, PURPOSE_SAMPLING, round_id, 0);
    let indices = (0..cfg.n).filter(|_| unit_interval(&mut rng) < q).collect();
    Ok(ConfidentialSample { indices })
}

/// Uniform `batch`-subset of `[0, n)` by Floyd's algorithm.
pub fn fixed_size_sample(cfg: &SamplerConfig, round_id: u64) -> Result<ConfidentialSample> {
    cfg.validate()?;
    let SamplingPolicy::FixedSizeWor { batch } = cfg.policy else {
        return Err(DpError::Configuration("not a fixed-size sampler".into()));
    };
    let mut rng = keyed_stream(&cfg.seed, PURPOSE_SAMPLING, round_id, 0);
    let mut chosen = BTreeSet::new();
    for j in (cfg.n - batch)..cfg.n {
        let t = rng.gen_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    Ok(ConfidentialSample {
        indices: chosen.into_iter().collect(),
    })
}

/// Shuffles `[0, n)` for `epoch_id` and cuts it into `n / batch` disjoint
/// batches. Leftover indices are dropped for this epoch.
pub fn partition_epoch(cfg: &SamplerConfig, epoch_id: u64) -> Result<Vec<Vec<u64>>> {
    cfg.validate()?;
    let SamplingPolicy::DisjointPartition { batch } = cfg.policy else {
        return Err(DpError::Configuration("not a partition sampler".into()));
    };
    let mut rng = keyed_stream(&cfg.seed, PURPOSE_PARTITION, epoch_id, 0);
    let mut perm: Vec<u64> = (0..cfg.n).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        perm.swap(i, j);
    }
    let full = (cfg.n / batch) as usize;
    Ok(perm
        .chunks(batch as usize)
        .take(full)
        .map(|c| {
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect())
}

/// Whether the accountant can produce a guarantee for a policy.
#[derive(Debug, Clone, PartialEq)]
pub enum AccountingSupport {
    Supported { q: f64, caveat: Option<String> },
    Unsupported(String),
}

pub const FIXED_SIZE_CAVEAT: &str =
    "fixed-size sampling accounted as Poisson sampling with q = b/n";
pub const DISJOINT_REASON: &str = "tight analysis not known for disjoint-partition sampling";

/// Accounting rule for `tag` at rate `q`. Fixed-size sampling maps to the
/// Poisson analysis with a caveat unless `allow_fixed_size` is off.
pub fn accounting_support(tag: PolicyTag, q: f64, allow_fixed_size: bool) -> AccountingSupport {
    match tag {
        PolicyTag::Poisson => AccountingSupport::Supported { q, caveat: None },
        PolicyTag::FixedSize if allow_fixed_size => AccountingSupport::Supported {
            q,
            caveat: Some(FIXED_SIZE_CAVEAT.into()),
        },
        PolicyTag::FixedSize => {
            AccountingSupport::Unsupported("fixed-size sampling accounting disabled".into())
        }
        PolicyTag::Disjoint => AccountingSupport::Unsupported(DISJOINT_REASON.into()),
    }
}
