//! Records, vector groups, and the clipping and scaling primitives shared by
//! every mechanism.

use std::collections::{BTreeSet, HashMap};

use crate::error::{invalid, Result};

/// Euclidean norm. Rejects empty and non-finite vectors.
pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(invalid("zero-dimensional vector"));
    }
    check_finite(v)?;
    Ok(norm_unchecked(v))
}

pub(crate) fn norm_unchecked(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid("non-finite vector component"))
    }
}

fn check_clip(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!(
            "clip norm must be positive and finite, got {s}"
        )))
    }
}

/// Projects `v` onto the L2 ball of radius `s`.
///
/// Vectors already inside the ball are returned unchanged; the zero vector
/// maps to itself.
pub fn clip_to_norm(v: &[f64], s: f64) -> Result<Vec<f64>> {
    check_clip(s)?;
    let norm = l2_norm(v)?;
    Ok(clip_with_norm(v, norm, s))
}

fn clip_with_norm(v: &[f64], norm: f64, s: f64) -> Vec<f64> {
    if norm <= s {
        return v.to_vec();
    }
    // Rounding in the factor can leave the result an ulp above s.
    let mut factor = s / norm;
    loop {
        let out: Vec<f64> = v.iter().map(|x| x * factor).collect();
        if norm_unchecked(&out) <= s {
            return out;
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

/// Divides each vector by its scale: `(v_1/a_1, ..., v_k/a_k)`.
pub fn scale_group(vs: &[Vec<f64>], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_scales(vs, alphas)?;
    Ok(vs
        .iter()
        .zip(alphas)
        .map(|(v, a)| v.iter().map(|x| x / a).collect())
        .collect())
}

/// Inverse of [`scale_group`].
pub fn unscale_group(vs: &[Vec<f64>], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_scales(vs, alphas)?;
    Ok(vs
        .iter()
        .zip(alphas)
        .map(|(v, a)| v.iter().map(|x| x * a).collect())
        .collect())
}

fn check_scales(vs: &[Vec<f64>], alphas: &[f64]) -> Result<()> {
    if vs.len() != alphas.len() {
        return Err(invalid(format!(
            "{} vectors but {} scales",
            vs.len(),
            alphas.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(invalid(format!(
            "scale must be positive and finite, got {a}"
        )));
    }
    vs.iter().try_for_each(|v| check_finite(v))
}

/// Norm of the concatenation of `vs`.
pub fn concat_norm(vs: &[Vec<f64>]) -> Result<f64> {
    if vs.is_empty() {
        return Err(invalid("empty vector list"));
    }
    vs.iter().try_for_each(|v| check_finite(v))?;
    Ok(vs
        .iter()
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt())
}

/// Concatenates `vs` and clips the result to norm `s`, returning the flat
/// vector.
pub(crate) fn clip_concat(vs: &[&[f64]], s: f64) -> Vec<f64> {
    let flat: Vec<f64> = vs.iter().flat_map(|v| v.iter().copied()).collect();
    let norm = norm_unchecked(&flat);
    clip_with_norm(&flat, norm, s)
}

/// One record's named vectors, the unit of privacy.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordVectors {
    entries: Vec<(String, Vec<f64>)>,
}

impl RecordVectors {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, v) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(invalid(format!("duplicate vector name `{name}`")));
            }
            if v.is_empty() {
                return Err(invalid(format!("vector `{name}` has dimension 0")));
            }
            check_finite(v).map_err(|_| invalid(format!("vector `{name}` is not finite")))?;
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How a group of vectors is clipped and noised.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    /// The group is clipped as one concatenated vector.
    Separate,
    /// Each member is divided by its scale before a shared clip, and the
    /// output is multiplied back.
    Joint { scales: Vec<f64> },
}

/// Configuration for one group of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub member_names: Vec<String>,
    pub mechanism: Mechanism,
    /// Clip norm applied to the (scaled) concatenation.
    pub clip: f64,
    /// Noise standard deviation on the average; the sum gets `q * n` times this.
    pub noise_sigma: f64,
}

impl GroupSpec {
    pub fn separate(name: &str, members: &[&str], clip: f64, noise_sigma: f64) -> Self {
        Self {
            name: name.to_string(),
            member_names: members.iter().map(|s| s.to_string()).collect(),
            mechanism: Mechanism::Separate,
            clip,
            noise_sigma,
        }
    }

    pub fn joint(
        name: &str,
        members: &[&str],
        scales: Vec<f64>,
        clip: f64,
        noise_sigma: f64,
    ) -> Self {
        Self {
            name: name.to_string(),
            member_names: members.iter().map(|s| s.to_string()).collect(),
            mechanism: Mechanism::Joint { scales },
            clip,
            noise_sigma,
        }
    }

    pub fn k(&self) -> usize {
        self.member_names.len()
    }

    /// Checks the spec on its own, without a record.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        self.collect_violations(&mut violations);
        match violations.first() {
            None => Ok(()),
            Some(v) => Err(invalid(v.to_string())),
        }
    }

    fn collect_violations(&self, out: &mut Vec<Violation>) {
        let group = self.name.clone();
        if self.member_names.is_empty() {
            out.push(Violation::EmptyGroup {
                group: group.clone(),
            });
        }
        let mut seen = BTreeSet::new();
        for m in &self.member_names {
            if !seen.insert(m) {
                out.push(Violation::DuplicateMember {
                    group: group.clone(),
                    name: m.clone(),
                });
            }
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            out.push(Violation::BadClip {
                group: group.clone(),
                clip: self.clip,
            });
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            out.push(Violation::BadNoise {
                group: group.clone(),
                sigma: self.noise_sigma,
            });
        }
        if let Mechanism::Joint { scales } = &self.mechanism {
            let k = self.member_names.len();
            if scales.len() != k {
                out.push(Violation::JointArity {
                    group: group.clone(),
                    members: k,
                    scales: scales.len(),
                });
            }
            if scales.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                out.push(Violation::BadScale {
                    group: group.clone(),
                });
            }
            if self.clip > (k as f64).sqrt() {
                out.push(Violation::JointClipTooLarge {
                    group,
                    clip: self.clip,
                    k,
                });
            }
        }
    }
}

/// Assignment of every vector in a record to exactly one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    pub groups: Vec<GroupSpec>,
    /// Total dimensionality, the sum over all member vectors.
    pub total_dim: usize,
}

/// One problem found by [`validate_partition`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnassignedVector {
        name: String,
    },
    UnknownMember {
        group: String,
        name: String,
    },
    MultiplyAssigned {
        name: String,
    },
    DuplicateMember {
        group: String,
        name: String,
    },
    EmptyGroup {
        group: String,
    },
    JointArity {
        group: String,
        members: usize,
        scales: usize,
    },
    BadScale {
        group: String,
    },
    JointClipTooLarge {
        group: String,
        clip: f64,
        k: usize,
    },
    BadClip {
        group: String,
        clip: f64,
    },
    BadNoise {
        group: String,
        sigma: f64,
    },
    DimensionMismatch {
        declared: usize,
        actual: usize,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::UnassignedVector { name } => write!(f, "unassigned vector `{name}`"),
            Violation::UnknownMember { group, name } => {
                write!(f, "group `{group}` names unknown vector `{name}`")
            }
            Violation::MultiplyAssigned { name } => {
                write!(f, "vector `{name}` assigned to more than one group")
            }
            Violation::DuplicateMember { group, name } => {
                write!(f, "group `{group}` lists `{name}` twice")
            }
            Violation::EmptyGroup { group } => write!(f, "group `{group}` has no members"),
            Violation::JointArity {
                group,
                members,
                scales,
            } => write!(
                f,
                "arity: joint group `{group}` has {members} members but {scales} scales"
            ),
            Violation::BadScale { group } => {
                write!(f, "joint group `{group}` has a nonpositive scale")
            }
            Violation::JointClipTooLarge { group, clip, k } => {
                write!(f, "joint group `{group}` clip {clip} exceeds sqrt({k})")
            }
            Violation::BadClip { group, clip } => {
                write!(f, "group `{group}` clip {clip} is not positive")
            }
            Violation::BadNoise { group, sigma } => {
                write!(f, "group `{group}` noise {sigma} is negative or non-finite")
            }
            Violation::DimensionMismatch { declared, actual } => write!(
                f,
                "declared total dimension {declared} but record has {actual}"
            ),
        }
    }
}

/// Checks that `p` covers the names of `r` exactly once, that the declared
/// total dimension matches, and that every group spec is well formed.
/// Returns every violation found.
pub fn validate_partition(p: &GroupPartition, r: &RecordVectors) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for g in &p.groups {
        g.collect_violations(&mut out);
        for m in &g.member_names {
            if r.get(m).is_none() {
                out.push(Violation::UnknownMember {
                    group: g.name.clone(),
                    name: m.clone(),
                });
            }
            *owner.entry(m.as_str()).or_default() += 1;
        }
    }
    for (name, count) in &owner {
        if *count > 1 && r.get(name).is_some() {
            out.push(Violation::MultiplyAssigned {
                name: name.to_string(),
            });
        }
    }
    for name in r.names() {
        if !owner.contains_key(name) {
            out.push(Violation::UnassignedVector {
                name: name.to_string(),
            });
        }
    }
    let actual: usize = r.entries().iter().map(|(_, v)| v.len()).sum();
    if actual != p.total_dim {
        out.push(Violation::DimensionMismatch {
            declared: p.total_dim,
            actual,
        });
    }
    out
}

/// Sensitivity bound and sum-level noise standard deviation of one Gaussian
/// sum query.
///
/// A zero `sigma_sum` is representable so noiseless test runs can be
/// recorded, but it never yields a finite guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyTuple {
    pub clip: f64,
    pub sigma_sum: f64,
}

impl PrivacyTuple {
    pub fn new(clip: f64, sigma_sum: f64) -> Result<Self> {
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(invalid(format!("clip must be positive, got {clip}")));
        }
        if !(sigma_sum >= 0.0 && sigma_sum.is_finite()) {
            return Err(invalid(format!(
                "noise standard deviation must be nonnegative, got {sigma_sum}"
            )));
        }
        Ok(Self { clip, sigma_sum })
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_sum == 0.0
    }
}
