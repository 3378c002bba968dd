//! Group privacy mechanisms, the Gaussian sum primitive, microbatching, and
//! reduction of a round's sum queries to one effective query.
//!
//! Both group mechanisms have the same shape: each record contributes a
//! clipped flat vector, the contributions are summed, spherical noise with
//! standard deviation `q * n * noise_sigma` is added, and the result is
//! divided by the fixed expected sample size `q * n` and post-processed back
//! into member shapes. The realized sample size is never used as a divisor.

use crate::error::{invalid, DpError, Result};
use crate::rng::{GaussianStream, NoiseSource, Seed, PURPOSE_NOISE};
use crate::vector::{check_finite, clip_concat, GroupSpec, Mechanism, PrivacyTuple, RecordVectors};

/// Whether zero noise is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Private,
    /// Permits `sigma = 0` for algebraic tests. Anything recorded under this
    /// mode is non-private.
    InsecureTest,
}

/// Parameters fixed for the duration of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundContext {
    pub q: f64,
    pub n: u64,
    pub round_id: u64,
    pub mode: NoiseMode,
}

impl RoundContext {
    pub fn new(q: f64, n: u64, round_id: u64) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(invalid(format!(
                "sampling probability must be in (0, 1], got {q}"
            )));
        }
        if n == 0 {
            return Err(invalid("database size must be at least 1"));
        }
        Ok(Self {
            q,
            n,
            round_id,
            mode: NoiseMode::Private,
        })
    }

    pub fn insecure_test(mut self) -> Self {
        self.mode = NoiseMode::InsecureTest;
        self
    }

    /// Expected sample size, the fixed denominator of every average.
    pub fn expected_size(&self) -> f64 {
        self.q * self.n as f64
    }
}

/// Output of one group mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEstimate {
    pub group_name: String,
    /// One estimate per member, in member order.
    pub estimates: Vec<Vec<f64>>,
    pub emitted_tuple: PrivacyTuple,
}

/// A round's sum queries rewritten as one query with unit noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveQuery {
    pub s_star: f64,
    pub sigma: f64,
    pub z_effective: f64,
}

/// Sums equal-length vectors and adds i.i.d. Gaussian noise with standard
/// deviation `sigma_sum` to each coordinate.
///
/// Exactly `dim` normals are drawn from `noise` regardless of `sigma_sum`,
/// so replaying a stream lines up across calls.
pub fn gaussian_sum<V: AsRef<[f64]>>(
    vs: &[V],
    dim: usize,
    sigma_sum: f64,
    mode: NoiseMode,
    noise: &mut impl NoiseSource,
) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(invalid("zero-dimensional sum"));
    }
    if !(sigma_sum >= 0.0 && sigma_sum.is_finite()) {
        return Err(invalid(format!("noise standard deviation {sigma_sum}")));
    }
    if sigma_sum == 0.0 && mode != NoiseMode::InsecureTest {
        return Err(DpError::Configuration(
            "zero noise requires insecure test mode".into(),
        ));
    }
    let mut acc = vec![0.0; dim];
    for v in vs {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(invalid(format!(
                "shape mismatch: expected dimension {dim}, got {}",
                v.len()
            )));
        }
        check_finite(v)?;
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    for a in acc.iter_mut() {
        *a += sigma_sum * noise.standard_normal();
    }
    Ok(acc)
}

fn member_vectors<'a>(
    spec: &GroupSpec,
    dims: &[usize],
    record: &'a RecordVectors,
) -> Result<Vec<&'a [f64]>> {
    spec.member_names
        .iter()
        .zip(dims)
        .map(|(name, &d)| {
            let v = record
                .get(name)
                .ok_or_else(|| invalid(format!("record has no vector `{name}`")))?;
            if v.len() != d {
                return Err(invalid(format!(
                    "vector `{name}` has dimension {}, expected {d}",
                    v.len()
                )));
            }
            Ok(v)
        })
        .collect()
}

/// The flat, clipped vector one record adds to the group's sum.
///
/// For a joint group each member is first divided by its scale. The result
/// always has norm at most `spec.clip`.
pub fn clipped_contribution(
    spec: &GroupSpec,
    dims: &[usize],
    record: &RecordVectors,
) -> Result<Vec<f64>> {
    let members = member_vectors(spec, dims, record)?;
    match &spec.mechanism {
        Mechanism::Separate => Ok(clip_concat(&members, spec.clip)),
        Mechanism::Joint { scales } => {
            let scaled: Vec<Vec<f64>> = members
                .iter()
                .zip(scales)
                .map(|(v, a)| v.iter().map(|x| x / a).collect())
                .collect();
            let refs: Vec<&[f64]> = scaled.iter().map(|v| v.as_slice()).collect();
            Ok(clip_concat(&refs, spec.clip))
        }
    }
}

/// Turns a noisy flat sum into per-member average estimates.
pub fn postprocess(
    spec: &GroupSpec,
    dims: &[usize],
    noisy_sum: &[f64],
    ctx: &RoundContext,
) -> Vec<Vec<f64>> {
    let denom = ctx.expected_size();
    let mut out = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for (j, &d) in dims.iter().enumerate() {
        let part = &noisy_sum[offset..offset + d];
        offset += d;
        out.push(match &spec.mechanism {
            Mechanism::Separate => part.iter().map(|x| x / denom).collect(),
            Mechanism::Joint { scales } => part.iter().map(|x| scales[j] * x / denom).collect(),
        });
    }
    out
}

/// Evaluates one group over the sampled records with whichever mechanism the
/// spec names.
///
/// `dims` gives each member's dimensionality; it is needed because the
/// sample may be empty.
pub fn group_query(
    records: &[RecordVectors],
    spec: &GroupSpec,
    dims: &[usize],
    ctx: &RoundContext,
    noise: &mut impl NoiseSource,
) -> Result<GroupEstimate> {
    spec.validate()?;
    if dims.len() != spec.k() {
        return Err(invalid(format!(
            "group `{}` has {} members but {} dimensions were given",
            spec.name,
            spec.k(),
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(invalid("zero-dimensional member"));
    }
    let total: usize = dims.iter().sum();
    let contributions = records
        .iter()
        .map(|r| clipped_contribution(spec, dims, r))
        .collect::<Result<Vec<_>>>()?;
    let sigma_sum = ctx.expected_size() * spec.noise_sigma;
    let noisy = gaussian_sum(&contributions, total, sigma_sum, ctx.mode, noise)?;
    Ok(GroupEstimate {
        group_name: spec.name.clone(),
        estimates: postprocess(spec, dims, &noisy, ctx),
        emitted_tuple: PrivacyTuple::new(spec.clip, sigma_sum)?,
    })
}

/// Clips each record's concatenated group vector to the group norm.
pub fn separate_group_query(
    records: &[RecordVectors],
    spec: &GroupSpec,
    dims: &[usize],
    ctx: &RoundContext,
    noise: &mut impl NoiseSource,
) -> Result<GroupEstimate> {
    if spec.mechanism != Mechanism::Separate {
        return Err(invalid(format!(
            "group `{}` is not a separate-clipping group",
            spec.name
        )));
    }
    group_query(records, spec, dims, ctx, noise)
}

/// Scales members by their `1/alpha_j`, clips jointly, and scales the noisy
/// average back, so component `j` carries noise `alpha_j * noise_sigma`.
pub fn joint_group_query(
    records: &[RecordVectors],
    spec: &GroupSpec,
    dims: &[usize],
    ctx: &RoundContext,
    noise: &mut impl NoiseSource,
) -> Result<GroupEstimate> {
    if !matches!(spec.mechanism, Mechanism::Joint { .. }) {
        return Err(invalid(format!(
            "group `{}` is not a joint-clipping group",
            spec.name
        )));
    }
    group_query(records, spec, dims, ctx, noise)
}

/// Runs every group of a partition over the sample, each group on its own
/// noise substream keyed by (seed, round, group index).
pub fn evaluate_groups(
    records: &[RecordVectors],
    groups: &[(GroupSpec, Vec<usize>)],
    ctx: &RoundContext,
    seed: &Seed,
) -> Result<Vec<GroupEstimate>> {
    groups
        .iter()
        .enumerate()
        .map(|(g, (spec, dims))| {
            let mut noise = GaussianStream::keyed(seed, PURPOSE_NOISE, ctx.round_id, g as u64);
            group_query(records, spec, dims, ctx, &mut noise)
        })
        .collect()
}

/// Collapses a round's privacy tuples into one query with unit noise and
/// sensitivity `sqrt(sum_g (S_g / sigma_g)^2)`.
pub fn round_compose(tuples: &[PrivacyTuple]) -> Result<EffectiveQuery> {
    if tuples.is_empty() {
        return Err(invalid("no sum queries to compose"));
    }
    let mut acc = 0.0;
    for (i, t) in tuples.iter().enumerate() {
        if !(t.clip > 0.0 && t.clip.is_finite()) {
            return Err(invalid(format!("tuple {i} has clip {}", t.clip)));
        }
        if t.sigma_sum == 0.0 {
            return Err(DpError::InfiniteSensitivity(format!("#{i}")));
        }
        if !(t.sigma_sum > 0.0 && t.sigma_sum.is_finite()) {
            return Err(invalid(format!("tuple {i} has noise {}", t.sigma_sum)));
        }
        let r = t.clip / t.sigma_sum;
        acc += r * r;
    }
    let s_star = acc.sqrt();
    Ok(EffectiveQuery {
        s_star,
        sigma: 1.0,
        z_effective: 1.0 / s_star,
    })
}

/// What to do with examples left over after the last full microbatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RemainderPolicy {
    #[default]
    Drop,
    /// Average the partial microbatch over its own members, which is the
    /// same as padding it with its mean.
    PadWithMean,
    Error,
}

/// Averages consecutive runs of `size` examples into microbatch records.
pub fn microbatch_reduce(
    examples: &[RecordVectors],
    size: usize,
    policy: RemainderPolicy,
) -> Result<Vec<RecordVectors>> {
    if size == 0 {
        return Err(invalid("microbatch size must be at least 1"));
    }
    if size == 1 {
        return Ok(examples.to_vec());
    }
    let remainder = examples.len() % size;
    if remainder != 0 && policy == RemainderPolicy::Error {
        return Err(invalid(format!(
            "{} examples do not divide into microbatches of {size}",
            examples.len()
        )));
    }
    let chunks = examples
        .chunks(size)
        .filter(|c| c.len() == size || policy == RemainderPolicy::PadWithMean);
    chunks.map(mean_record).collect()
}

fn mean_record(chunk: &[RecordVectors]) -> Result<RecordVectors> {
    let first = &chunk[0];
    let mut sums: Vec<(String, Vec<f64>)> = first.entries().to_vec();
    for r in &chunk[1..] {
        if r.len() != first.len() {
            return Err(invalid(
                "examples in a microbatch have different vector sets",
            ));
        }
        for (name, acc) in sums.iter_mut() {
            let v = r
                .get(name)
                .filter(|v| v.len() == acc.len())
                .ok_or_else(|| invalid(format!("examples disagree on vector `{name}`")))?;
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
    }
    let m = chunk.len() as f64;
    for (_, acc) in sums.iter_mut() {
        acc.iter_mut().for_each(|a| *a /= m);
    }
    RecordVectors::new(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Zeros;
    impl NoiseSource for Zeros {
        fn standard_normal(&mut self) -> f64 {
            0.0
        }
    }

    fn stream(seed: u64) -> GaussianStream<ChaCha20Rng> {
        GaussianStream::new(ChaCha20Rng::seed_from_u64(seed))
    }

    fn rec(pairs: &[(&str, &[f64])]) -> RecordVectors {
        RecordVectors::new(
            pairs
                .iter()
                .map(|(n, v)| (n.to_string(), v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    fn test_ctx(q: f64, n: u64) -> RoundContext {
        RoundContext::new(q, n, 0).unwrap().insecure_test()
    }

    #[test]
    fn noiseless_sums() {
        let s = gaussian_sum(
            &[vec![1.0, 2.0], vec![3.0, 4.0]],
            2,
            0.0,
            NoiseMode::InsecureTest,
            &mut Zeros,
        )
        .unwrap();
        assert_eq!(s, vec![4.0, 6.0]);
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(
            gaussian_sum(&empty, 3, 0.0, NoiseMode::InsecureTest, &mut Zeros).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn zero_noise_needs_test_mode() {
        let err = gaussian_sum(&[vec![1.0]], 1, 0.0, NoiseMode::Private, &mut Zeros).unwrap_err();
        assert!(matches!(err, DpError::Configuration(_)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = gaussian_sum(
            &[vec![1.0], vec![1.0, 2.0]],
            1,
            1.0,
            NoiseMode::Private,
            &mut Zeros,
        );
        assert!(matches!(err, Err(DpError::InvalidInput(_))));
    }

    #[test]
    fn gaussian_sum_noise_statistics() {
        let mut g = stream(11);
        let reps = 100_000;
        let draws: Vec<f64> = (0..reps)
            .map(|_| gaussian_sum(&[vec![0.0]], 1, 1.0, NoiseMode::Private, &mut g).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(mean.abs() < 4.0 / (reps as f64).sqrt(), "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn separate_examples() {
        let spec = GroupSpec::separate("g", &["v"], 5.0, 0.0);
        let est = separate_group_query(
            &[rec(&[("v", &[3.0, 4.0])])],
            &spec,
            &[2],
            &test_ctx(1.0, 1),
            &mut Zeros,
        )
        .unwrap();
        assert_eq!(est.estimates, vec![vec![3.0, 4.0]]);
        assert_eq!(
            est.emitted_tuple,
            PrivacyTuple {
                clip: 5.0,
                sigma_sum: 0.0
            }
        );

        let spec = GroupSpec::separate("g", &["v"], 1.0, 0.0);
        let recs = [rec(&[("v", &[1.0, 0.0])]), rec(&[("v", &[0.0, 1.0])])];
        let est = separate_group_query(&recs, &spec, &[2], &test_ctx(0.5, 4), &mut Zeros).unwrap();
        assert_eq!(est.estimates, vec![vec![0.5, 0.5]]);
        assert_eq!(
            est.emitted_tuple,
            PrivacyTuple {
                clip: 1.0,
                sigma_sum: 0.0
            }
        );
    }

    #[test]
    fn separate_rejects_joint_spec_and_bad_input() {
        let spec = GroupSpec::joint("j", &["v"], vec![1.0], 1.0, 1.0);
        let ctx = RoundContext::new(1.0, 1, 0).unwrap();
        assert!(separate_group_query(&[], &spec, &[1], &ctx, &mut Zeros).is_err());
        let empty = GroupSpec::separate("e", &[], 1.0, 1.0);
        assert!(separate_group_query(&[], &empty, &[], &ctx, &mut Zeros).is_err());
        let spec = GroupSpec::separate("g", &["v"], 1.0, 1.0);
        assert!(
            separate_group_query(&[rec(&[("w", &[1.0])])], &spec, &[1], &ctx, &mut Zeros).is_err()
        );
    }

    #[test]
    fn joint_passthrough_without_clipping() {
        let spec = GroupSpec::joint("j", &["a", "b"], vec![2.0, 50.0], 1.0, 0.0);
        let r = rec(&[("a", &[0.5, -0.25]), ("b", &[10.0])]);
        let est = joint_group_query(&[r], &spec, &[2, 1], &test_ctx(1.0, 1), &mut Zeros).unwrap();
        assert_eq!(est.estimates, vec![vec![0.5, -0.25], vec![10.0]]);
    }

    #[test]
    fn joint_zero_component_is_preserved() {
        let spec = GroupSpec::joint("j", &["a", "b"], vec![1.0, 100.0], 1.0, 0.0);
        let r = rec(&[("a", &[1.0]), ("b", &[0.0])]);
        let est = joint_group_query(&[r], &spec, &[1, 1], &test_ctx(1.0, 1), &mut Zeros).unwrap();
        assert_eq!(est.estimates, vec![vec![1.0], vec![0.0]]);
    }

    #[test]
    fn joint_arity_and_clip_bound() {
        let ctx = RoundContext::new(1.0, 1, 0).unwrap();
        let bad = GroupSpec::joint("j", &["a", "b"], vec![1.0], 1.0, 1.0);
        assert!(joint_group_query(&[], &bad, &[1, 1], &ctx, &mut Zeros).is_err());
        let too_big = GroupSpec::joint("j", &["a", "b"], vec![1.0, 1.0], 1.5, 1.0);
        assert!(joint_group_query(&[], &too_big, &[1, 1], &ctx, &mut Zeros).is_err());
        let at_bound = GroupSpec::joint("j", &["a", "b"], vec![1.0, 1.0], 2f64.sqrt(), 1.0);
        assert!(joint_group_query(&[], &at_bound, &[1, 1], &ctx, &mut Zeros).is_ok());
    }

    #[test]
    fn single_member_mechanisms_coincide() {
        let ctx = RoundContext::new(0.3, 20, 0).unwrap();
        let recs: Vec<RecordVectors> = (0..6)
            .map(|i| rec(&[("v", &[i as f64 * 0.7, -1.0, 2.5 - i as f64])]))
            .collect();
        let sep = GroupSpec::separate("g", &["v"], 0.9, 0.4);
        let joint = GroupSpec::joint("g", &["v"], vec![1.0], 0.9, 0.4);
        let a = separate_group_query(&recs, &sep, &[3], &ctx, &mut stream(5)).unwrap();
        let b = joint_group_query(&recs, &joint, &[3], &ctx, &mut stream(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn emitted_noise_matches_configuration() {
        for &(q, n, sigma) in &[(0.01, 10_000u64, 0.0123), (0.37, 77, 2.5), (1.0, 1, 1e-3)] {
            let ctx = RoundContext::new(q, n, 0).unwrap();
            let spec = GroupSpec::separate("g", &["v"], 1.0, sigma);
            let est = group_query(&[], &spec, &[2], &ctx, &mut stream(1)).unwrap();
            assert_eq!(est.emitted_tuple.sigma_sum, q * n as f64 * sigma);
        }
    }

    #[test]
    fn joint_output_linear_in_scale() {
        // Doubling alpha_j with inputs doubled leaves the clip unchanged and
        // doubles component j.
        let ctx = RoundContext::new(0.5, 10, 0).unwrap();
        let r1 = rec(&[("a", &[3.0, 1.0]), ("b", &[40.0])]);
        let r2 = rec(&[("a", &[6.0, 2.0]), ("b", &[40.0])]);
        let s1 = GroupSpec::joint("j", &["a", "b"], vec![2.0, 100.0], 1.0, 0.2);
        let s2 = GroupSpec::joint("j", &["a", "b"], vec![4.0, 100.0], 1.0, 0.2);
        let e1 = joint_group_query(&[r1], &s1, &[2, 1], &ctx, &mut stream(3)).unwrap();
        let e2 = joint_group_query(&[r2], &s2, &[2, 1], &ctx, &mut stream(3)).unwrap();
        for (x, y) in e1.estimates[0].iter().zip(&e2.estimates[0]) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs());
        }
        assert_eq!(e1.estimates[1], e2.estimates[1]);
        assert_eq!(e1.estimates[0].len(), 2);
    }

    #[test]
    fn compose_examples() {
        let e = round_compose(&[PrivacyTuple::new(1.0, 1.0).unwrap()]).unwrap();
        assert_eq!((e.s_star, e.sigma, e.z_effective), (1.0, 1.0, 1.0));
        let e = round_compose(&[
            PrivacyTuple::new(3.0, 6.0).unwrap(),
            PrivacyTuple::new(4.0, 8.0).unwrap(),
        ])
        .unwrap();
        assert!((e.s_star - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((e.z_effective - 2f64.sqrt()).abs() < 1e-15);
        assert!(round_compose(&[]).is_err());
        assert!(matches!(
            round_compose(&[PrivacyTuple::new(1.0, 0.0).unwrap()]),
            Err(DpError::InfiniteSensitivity(_))
        ));
    }

    #[test]
    fn microbatch_examples() {
        let ex: Vec<RecordVectors> = (0..4).map(|i| rec(&[("g", &[i as f64])])).collect();
        assert_eq!(
            microbatch_reduce(&ex, 1, RemainderPolicy::Drop).unwrap(),
            ex
        );

        let two = [rec(&[("g", &[2.0])]), rec(&[("g", &[4.0])])];
        assert_eq!(
            microbatch_reduce(&two, 2, RemainderPolicy::Drop).unwrap(),
            vec![rec(&[("g", &[3.0])])]
        );

        let five: Vec<RecordVectors> = (0..5).map(|i| rec(&[("g", &[i as f64])])).collect();
        assert_eq!(
            microbatch_reduce(&five, 2, RemainderPolicy::Drop)
                .unwrap()
                .len(),
            2
        );
        let padded = microbatch_reduce(&five, 2, RemainderPolicy::PadWithMean).unwrap();
        assert_eq!(padded.len(), 3);
        assert_eq!(padded[2], rec(&[("g", &[4.0])]));
        assert!(microbatch_reduce(&five, 2, RemainderPolicy::Error).is_err());
        assert!(microbatch_reduce(&five, 0, RemainderPolicy::Drop).is_err());
    }
}
