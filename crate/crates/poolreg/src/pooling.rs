//! Outcome-stratified pool plans and pooled-row aggregation.
//!
//! A plan partitions cases and controls separately into outcome-pure pools.
//! Every pool size used must appear among both case pools and control pools
//! so that each size's offset ln(k_n(g) / k_m(g)) is defined. Aggregation
//! sums per-subject term values over pool members; the sums are quantized on
//! the canonical 1e-9 grid (see [`crate::securesum`]) so the centralized and
//! distributed paths produce identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{evaluate_term, MicroRecord, ModelError, ModelSpec, StudyMeta};
use crate::rng::{
    stream, STREAM_CASE_LEFTOVER, STREAM_CASE_PERMUTATION, STREAM_CONTROL_LEFTOVER,
    STREAM_CONTROL_PERMUTATION,
};
use crate::securesum::{quantized_sum, SecureSumError};

/// Never recommend pool sizes above this; aggregation bias grows with g.
pub const MAX_RECOMMENDED_POOLSIZE: usize = 40;

/// Outcome stratum of a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    Case,
    Control,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Case => "case",
            Stratum::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Option<Stratum> {
        match s {
            "case" => Some(Stratum::Case),
            "control" => Some(Stratum::Control),
            _ => None,
        }
    }
}

/// One outcome-pure pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub pool_id: String,
    pub stratum: Stratum,
    pub member_ids: Vec<String>,
}

impl Pool {
    pub fn size_g(&self) -> usize {
        self.member_ids.len()
    }
}

/// The outcome-stratified partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPlan {
    pub pools: Vec<Pool>,
    /// Subjects excluded by a discard policy, chosen uniformly at random
    /// within their stratum.
    pub leftovers: Vec<String>,
    pub seed: u64,
}

impl PoolPlan {
    pub fn smallest_size(&self) -> Option<usize> {
        self.pools.iter().map(Pool::size_g).min()
    }

    pub fn largest_size(&self) -> Option<usize> {
        self.pools.iter().map(Pool::size_g).max()
    }

    pub fn sizes_present(&self) -> BTreeSet<usize> {
        self.pools.iter().map(Pool::size_g).collect()
    }

    /// Count of (case pools, control pools) of one size.
    pub fn stratum_counts(&self, size: usize) -> (usize, usize) {
        let mut case = 0;
        let mut control = 0;
        for pool in &self.pools {
            if pool.size_g() == size {
                match pool.stratum {
                    Stratum::Case => case += 1,
                    Stratum::Control => control += 1,
                }
            }
        }
        (case, control)
    }

    /// Check every plan invariant against the subject universe.
    pub fn validate(&self, case_ids: &[String], control_ids: &[String]) -> Result<(), PoolingError> {
        let cases: BTreeSet<&String> = case_ids.iter().collect();
        let controls: BTreeSet<&String> = control_ids.iter().collect();
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        for pool in &self.pools {
            if pool.member_ids.is_empty() {
                return Err(PoolingError::InvalidPlan(format!(
                    "pool {} is empty",
                    pool.pool_id
                )));
            }
            for id in &pool.member_ids {
                let in_right_stratum = match pool.stratum {
                    Stratum::Case => cases.contains(id),
                    Stratum::Control => controls.contains(id),
                };
                if !in_right_stratum {
                    return Err(PoolingError::InvalidPlan(format!(
                        "pool {} is not outcome-pure: {id}",
                        pool.pool_id
                    )));
                }
                if !seen.insert(id) {
                    return Err(PoolingError::InvalidPlan(format!(
                        "subject {id} appears twice"
                    )));
                }
            }
        }
        for id in &self.leftovers {
            if !cases.contains(id) && !controls.contains(id) {
                return Err(PoolingError::InvalidPlan(format!(
                    "leftover {id} is not a study subject"
                )));
            }
            if !seen.insert(id) {
                return Err(PoolingError::InvalidPlan(format!(
                    "subject {id} appears twice"
                )));
            }
        }
        if seen.len() != case_ids.len() + control_ids.len() {
            return Err(PoolingError::InvalidPlan(
                "some subjects are neither pooled nor leftover".into(),
            ));
        }
        for size in self.sizes_present() {
            let (kn, km) = self.stratum_counts(size);
            if kn == 0 || km == 0 {
                return Err(PoolingError::InvalidPlan(format!(
                    "size {size} is not represented in both strata"
                )));
            }
        }
        Ok(())
    }
}

/// One pool's analysis row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub pool_id: String,
    /// 1 for a case pool, 0 for a control pool.
    pub y: u8,
    pub size_g: usize,
    /// Summed term values aligned with the model spec's term order.
    pub term_values: Vec<f64>,
    /// ln(k_n(g) / k_m(g)) for this pool's size.
    pub offset: f64,
}

/// Requested pool-size policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SizePolicy {
    /// One size; per-stratum remainders become leftovers.
    Single { size: usize },
    /// Two sizes covering each stratum exactly, preferring the larger size,
    /// with each used size represented in both strata. Falls back to
    /// single-size discard when no exact cover exists.
    Pair { small: usize, large: usize },
    /// Exact size multisets per stratum, validated.
    Explicit {
        case_sizes: Vec<usize>,
        control_sizes: Vec<usize>,
    },
}

impl SizePolicy {
    /// The adjacent-size planner: sizes {g, g+1}.
    pub fn auto(g: usize) -> SizePolicy {
        SizePolicy::Pair {
            small: g,
            large: g + 1,
        }
    }

    pub fn single(g: usize) -> SizePolicy {
        SizePolicy::Single { size: g }
    }

    fn requested_sizes(&self) -> Vec<usize> {
        match self {
            SizePolicy::Single { size } => vec![*size],
            SizePolicy::Pair { small, large } => vec![*small, *large],
            SizePolicy::Explicit {
                case_sizes,
                control_sizes,
            } => {
                let mut v: Vec<usize> = case_sizes.iter().chain(control_sizes).copied().collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PoolingError {
    #[error("no valid size assignment: {0}")]
    InfeasibleSizes(String),
    #[error("privacy mode requires pool sizes of at least 2 (requested {0})")]
    PrivacyViolation(usize),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("too few subjects: {0}")]
    TooFewSubjects(String),
    #[error("record for subject {0} is missing")]
    MissingRecord(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Aggregation(#[from] SecureSumError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Per-stratum size resolution: pool sizes in creation order plus how many
/// subjects to discard.
#[derive(Debug, Clone, PartialEq)]
struct StratumSizes {
    sizes: Vec<usize>,
    leftover: usize,
}

fn single_cover(count: usize, size: usize) -> Result<StratumSizes, PoolingError> {
    let k = count / size;
    if k == 0 {
        return Err(PoolingError::InfeasibleSizes(format!(
            "cannot form any pool of size {size} from {count} subjects"
        )));
    }
    Ok(StratumSizes {
        sizes: vec![size; k],
        leftover: count % size,
    })
}

/// Smallest `a >= min_small` with `a*s + b*t == count` and `b >= min_large`,
/// preferring as few small pools as possible.
fn two_size_cover(
    count: usize,
    small: usize,
    large: usize,
    min_small: usize,
    min_large: usize,
) -> Option<(usize, usize)> {
    let mut a = min_small;
    while a * small <= count {
        let rest = count - a * small;
        if rest % large == 0 {
            let b = rest / large;
            if b >= min_large {
                return Some((a, b));
            }
        }
        a += 1;
    }
    None
}

fn pair_sizes(
    n: usize,
    m: usize,
    small: usize,
    large: usize,
) -> Result<(StratumSizes, StratumSizes), PoolingError> {
    // Preference order: larger size only, both sizes, smaller size only,
    // then single-size discard. Each candidate keeps every used size
    // represented in both strata.
    if n % large == 0 && m % large == 0 && n >= large && m >= large {
        return Ok((single_cover(n, large)?, single_cover(m, large)?));
    }
    if let (Some((an, bn)), Some((am, bm))) = (
        two_size_cover(n, small, large, 1, 1),
        two_size_cover(m, small, large, 1, 1),
    ) {
        let build = |a: usize, b: usize| StratumSizes {
            sizes: std::iter::repeat(large)
                .take(b)
                .chain(std::iter::repeat(small).take(a))
                .collect(),
            leftover: 0,
        };
        return Ok((build(an, bn), build(am, bm)));
    }
    if n % small == 0 && m % small == 0 && n >= small && m >= small {
        return Ok((single_cover(n, small)?, single_cover(m, small)?));
    }
    for size in [large, small] {
        if n / size >= 1 && m / size >= 1 {
            return Ok((single_cover(n, size)?, single_cover(m, size)?));
        }
    }
    Err(PoolingError::InfeasibleSizes(format!(
        "sizes {{{small},{large}}} cannot cover strata of {n} and {m} subjects"
    )))
}

fn explicit_sizes(
    n: usize,
    m: usize,
    case_sizes: &[usize],
    control_sizes: &[usize],
) -> Result<(StratumSizes, StratumSizes), PoolingError> {
    let sum_n: usize = case_sizes.iter().sum();
    let sum_m: usize = control_sizes.iter().sum();
    if sum_n != n || sum_m != m {
        return Err(PoolingError::InfeasibleSizes(format!(
            "explicit sizes sum to {sum_n}/{sum_m}, strata have {n}/{m} subjects"
        )));
    }
    if case_sizes.is_empty() || control_sizes.is_empty() {
        return Err(PoolingError::InfeasibleSizes(
            "explicit policy needs at least one pool per stratum".into(),
        ));
    }
    let case_set: BTreeSet<usize> = case_sizes.iter().copied().collect();
    let control_set: BTreeSet<usize> = control_sizes.iter().copied().collect();
    if case_set != control_set {
        return Err(PoolingError::InfeasibleSizes(format!(
            "sizes used must match across strata (cases {case_set:?}, controls {control_set:?})"
        )));
    }
    let ordered = |sizes: &[usize]| {
        let mut v = sizes.to_vec();
        v.sort_unstable_by(|a, b| b.cmp(a));
        StratumSizes {
            sizes: v,
            leftover: 0,
        }
    };
    Ok((ordered(case_sizes), ordered(control_sizes)))
}

fn partition_stratum(
    ids: &[String],
    sizes: &StratumSizes,
    stratum: Stratum,
    seed: u64,
) -> (Vec<Pool>, Vec<String>) {
    use rand::seq::index::sample;
    use rand::seq::SliceRandom;

    let (leftover_stream, shuffle_stream) = match stratum {
        Stratum::Case => (STREAM_CASE_LEFTOVER, STREAM_CASE_PERMUTATION),
        Stratum::Control => (STREAM_CONTROL_LEFTOVER, STREAM_CONTROL_PERMUTATION),
    };

    let mut leftovers: Vec<String> = Vec::new();
    let mut remaining: Vec<String>;
    if sizes.leftover > 0 {
        let mut rng = stream(seed, leftover_stream);
        let mut excluded: Vec<usize> = sample(&mut rng, ids.len(), sizes.leftover).into_vec();
        excluded.sort_unstable();
        let excluded_set: BTreeSet<usize> = excluded.iter().copied().collect();
        leftovers = excluded.iter().map(|&i| ids[i].clone()).collect();
        remaining = ids
            .iter()
            .enumerate()
            .filter(|(i, _)| !excluded_set.contains(i))
            .map(|(_, id)| id.clone())
            .collect();
    } else {
        remaining = ids.to_vec();
    }

    let mut rng = stream(seed, shuffle_stream);
    remaining.shuffle(&mut rng);

    let mut pools = Vec::with_capacity(sizes.sizes.len());
    let mut cursor = 0;
    for (i, &size) in sizes.sizes.iter().enumerate() {
        let members = remaining[cursor..cursor + size].to_vec();
        cursor += size;
        pools.push(Pool {
            pool_id: format!("{}-{}", stratum.as_str(), i + 1),
            stratum,
            member_ids: members,
        });
    }
    debug_assert_eq!(cursor, remaining.len());
    (pools, leftovers)
}

/// Build the outcome-stratified random partition.
///
/// The partition is a uniform random permutation split within each stratum,
/// deterministic given the seed; leftovers (when a discard policy applies)
/// are drawn uniformly from their stratum on a separate stream.
pub fn build_plan(
    meta: &StudyMeta,
    case_ids: &[String],
    control_ids: &[String],
    policy: &SizePolicy,
    privacy_mode: bool,
    seed: u64,
) -> Result<PoolPlan, PoolingError> {
    meta.validate().map_err(PoolingError::Model)?;
    if case_ids.len() != meta.n_cases || control_ids.len() != meta.m_controls {
        return Err(PoolingError::InvalidInput(format!(
            "id lists ({}, {}) do not match study meta ({}, {})",
            case_ids.len(),
            control_ids.len(),
            meta.n_cases,
            meta.m_controls
        )));
    }
    let mut all: BTreeSet<&String> = BTreeSet::new();
    for id in case_ids.iter().chain(control_ids) {
        if !all.insert(id) {
            return Err(PoolingError::InvalidInput(format!(
                "duplicate subject id {id}"
            )));
        }
    }
    let min_allowed = if privacy_mode { 2 } else { 1 };
    for size in policy.requested_sizes() {
        if size < min_allowed {
            return if privacy_mode {
                Err(PoolingError::PrivacyViolation(size))
            } else {
                Err(PoolingError::InvalidInput(
                    "pool sizes must be at least 1".into(),
                ))
            };
        }
    }

    let n = case_ids.len();
    let m = control_ids.len();
    let (case_sizes, control_sizes) = match policy {
        SizePolicy::Single { size } => (single_cover(n, *size)?, single_cover(m, *size)?),
        SizePolicy::Pair { small, large } => {
            if small >= large {
                return Err(PoolingError::InvalidInput(format!(
                    "pair sizes must satisfy small < large, got {small} and {large}"
                )));
            }
            pair_sizes(n, m, *small, *large)?
        }
        SizePolicy::Explicit {
            case_sizes,
            control_sizes,
        } => explicit_sizes(n, m, case_sizes, control_sizes)?,
    };

    let (mut pools, mut leftovers) = partition_stratum(case_ids, &case_sizes, Stratum::Case, seed);
    let (control_pools, control_leftovers) =
        partition_stratum(control_ids, &control_sizes, Stratum::Control, seed);
    pools.extend(control_pools);
    leftovers.extend(control_leftovers);

    let plan = PoolPlan {
        pools,
        leftovers,
        seed,
    };
    plan.validate(case_ids, control_ids)?;
    Ok(plan)
}

/// Per-size offsets ln(k_n(g) / k_m(g)).
pub fn offsets_for_plan(plan: &PoolPlan) -> Result<BTreeMap<usize, f64>, PoolingError> {
    let mut offsets = BTreeMap::new();
    for size in plan.sizes_present() {
        let (kn, km) = plan.stratum_counts(size);
        if kn == 0 || km == 0 {
            return Err(PoolingError::InvalidPlan(format!(
                "size {size} is not represented in both strata"
            )));
        }
        offsets.insert(size, (kn as f64 / km as f64).ln());
    }
    Ok(offsets)
}

/// Aggregate term values into pooled rows from full microdata.
///
/// One row per pool, in plan order; each term value is the quantized sum of
/// the members' individual term values. Pools aggregate independently and
/// in parallel.
pub fn aggregate_centralized(
    plan: &PoolPlan,
    records: &[MicroRecord],
    spec: &ModelSpec,
) -> Result<Vec<PooledRow>, PoolingError> {
    spec.validate()?;
    let offsets = offsets_for_plan(plan)?;
    let by_id: HashMap<&str, &MicroRecord> = records
        .iter()
        .map(|r| (r.subject_id.as_str(), r))
        .collect();

    plan.pools
        .par_iter()
        .map(|pool| {
            let mut members = Vec::with_capacity(pool.size_g());
            for id in &pool.member_ids {
                members.push(
                    *by_id
                        .get(id.as_str())
                        .ok_or_else(|| PoolingError::MissingRecord(id.clone()))?,
                );
            }
            let mut term_values = Vec::with_capacity(spec.terms.len());
            for term in &spec.terms {
                let values: Result<Vec<f64>, ModelError> = members
                    .iter()
                    .map(|record| evaluate_term(term, record))
                    .collect();
                term_values.push(quantized_sum(values?)?.decode());
            }
            Ok(PooledRow {
                pool_id: pool.pool_id.clone(),
                y: u8::from(pool.stratum == Stratum::Case),
                size_g: pool.size_g(),
                term_values,
                offset: offsets[&pool.size_g()],
            })
        })
        .collect()
}

/// Build individual-level design rows for the standard (unpooled) fit:
/// leading column 1 when the baseline is included, offset 0.
pub fn design_rows_individual(
    records: &[MicroRecord],
    spec: &ModelSpec,
) -> Result<Vec<crate::glm::DesignRow>, PoolingError> {
    spec.validate()?;
    records
        .iter()
        .map(|record| {
            let mut x = Vec::with_capacity(spec.terms.len() + 1);
            if spec.include_baseline {
                x.push(1.0);
            }
            for term in &spec.terms {
                x.push(evaluate_term(term, record)?);
            }
            Ok(crate::glm::DesignRow::new(record.outcome, x, 0.0))
        })
        .collect()
}

/// Turn pooled rows into design rows: leading column g when the baseline is
/// included, then the term sums, with the pool offset.
pub fn design_rows_from_pooled(
    rows: &[PooledRow],
    include_baseline: bool,
) -> Vec<crate::glm::DesignRow> {
    rows.iter()
        .map(|row| {
            let mut x = Vec::with_capacity(row.term_values.len() + 1);
            if include_baseline {
                x.push(row.size_g as f64);
            }
            x.extend_from_slice(&row.term_values);
            crate::glm::DesignRow::new(row.y, x, row.offset)
        })
        .collect()
}

/// Coefficient names matching [`design_rows_from_pooled`] /
/// [`design_rows_individual`] column order.
pub fn coefficient_names(spec: &ModelSpec, pooled: bool) -> Vec<String> {
    let mut names = Vec::with_capacity(spec.terms.len() + 1);
    if spec.include_baseline {
        names.push(if pooled { "baseline*g" } else { "intercept" }.to_string());
    }
    names.extend(spec.term_labels());
    names
}

/// Recommended pool size with the reasoning attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolsizeAdvice {
    pub size: usize,
    /// (case pools, control pools) the size yields, ignoring remainders.
    pub pools_per_stratum: (usize, usize),
    pub warnings: Vec<String>,
    pub rationale: String,
}

/// Suggest a pool size balancing privacy against estimator stability.
///
/// Privacy mode searches g in [5, 20], research mode in [2, 20], taking the
/// largest size that keeps at least 30 pools per stratum; when no size does,
/// it errs toward the small end of the range so the pool count stays as
/// large as possible.
pub fn recommend_poolsize(
    meta: &StudyMeta,
    privacy_mode: bool,
) -> Result<PoolsizeAdvice, PoolingError> {
    meta.validate().map_err(PoolingError::Model)?;
    let smallest_stratum = meta.n_cases.min(meta.m_controls);
    if smallest_stratum / 2 < 2 {
        return Err(PoolingError::TooFewSubjects(format!(
            "even size 2 leaves fewer than 2 pools in a stratum of {smallest_stratum}"
        )));
    }
    let floor = if privacy_mode { 5 } else { 2 };
    let advice = |size: usize, warnings: Vec<String>, rationale: String| PoolsizeAdvice {
        size,
        pools_per_stratum: (meta.n_cases / size, meta.m_controls / size),
        warnings,
        rationale,
    };

    let best = (floor..=20)
        .rev()
        .find(|&g| smallest_stratum / g >= 30);
    if let Some(size) = best {
        return Ok(advice(
            size,
            Vec::new(),
            format!(
                "largest size in [{floor}, 20] keeping at least 30 pools per stratum \
                 ({} in the smaller stratum)",
                smallest_stratum / size
            ),
        ));
    }
    if smallest_stratum / floor >= 2 {
        return Ok(advice(
            floor,
            vec![format!(
                "only {} pools in the smaller stratum; pool-level asymptotics are weak \
                 below 30 pools",
                smallest_stratum / floor
            )],
            format!("no size in [{floor}, 20] keeps 30 pools per stratum; erring small"),
        ));
    }
    // Below the range floor: take the largest size that still leaves two
    // pools per stratum.
    let size = (2..floor)
        .rev()
        .find(|&g| smallest_stratum / g >= 2)
        .expect("guarded by the size-2 check above");
    let mut warnings = vec![format!(
        "only {} pools in the smaller stratum; pool-level asymptotics are weak below 30 pools",
        smallest_stratum / size
    )];
    if privacy_mode {
        warnings.push(format!(
            "size {size} is below the privacy floor of 5; the strata are too small for it"
        ));
    }
    Ok(advice(
        size,
        warnings,
        "strata too small for the recommended range; largest size keeping 2 pools per stratum"
            .into(),
    ))
}

/// Warning for a user-chosen pool size outside the supported envelope.
pub fn oversize_warning(size: usize) -> Option<String> {
    (size > MAX_RECOMMENDED_POOLSIZE).then(|| {
        format!(
            "pool size {size} exceeds {MAX_RECOMMENDED_POOLSIZE}: aggregation bias away from \
             the null grows with pool size; sizes above {MAX_RECOMMENDED_POOLSIZE} are not \
             recommended even for very large studies"
        )
    })
}
