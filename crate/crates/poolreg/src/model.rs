//! Domain types for subject records and linear-predictor terms.
//!
//! A [`Term`] describes one column of the linear predictor: a transform of a
//! covariate, optionally multiplied by a transform of a second covariate.
//! Terms are evaluated per subject; pooled analysis sums those per-subject
//! values over pool members. The sum of transformed values `sum h(x_j)` is
//! what travels, never `h(sum x_j)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::num::Real;

/// One subject's row: identifier, binary outcome, named covariate values.
///
/// Records never leave the node that holds them; every other structure in
/// the toolkit is derived from aggregates of these.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroRecord {
    pub subject_id: String,
    /// 0 = control, 1 = case.
    pub outcome: u8,
    pub covariates: BTreeMap<String, f64>,
}

impl MicroRecord {
    pub fn new(
        subject_id: impl Into<String>,
        outcome: u8,
        covariates: impl IntoIterator<Item = (impl Into<String>, f64)>,
    ) -> Self {
        Self {
            subject_id: subject_id.into(),
            outcome,
            covariates: covariates
                .into_iter()
                .map(|(k, v)| (k.into(), v))
                .collect(),
        }
    }

    pub fn is_case(&self) -> bool {
        self.outcome == 1
    }
}

/// Study-level counts and (for prospective designs) the outcome prevalence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    /// Number of cases (outcome 1).
    pub n_cases: usize,
    /// Number of controls (outcome 0).
    pub m_controls: usize,
    /// Pr(Y=1) in the source population; present only for prospective or
    /// cross-sectional designs, where the baseline log odds is estimable.
    pub prevalence: Option<f64>,
}

impl StudyMeta {
    pub fn new(n_cases: usize, m_controls: usize) -> Self {
        Self {
            n_cases,
            m_controls,
            prevalence: None,
        }
    }

    pub fn with_prevalence(mut self, prevalence: f64) -> Self {
        self.prevalence = Some(prevalence);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_cases == 0 || self.m_controls == 0 {
            return Err(ModelError::InvalidSpec(
                "study needs at least one case and one control".into(),
            ));
        }
        if let Some(p) = self.prevalence {
            if !(p > 0.0 && p < 1.0) {
                return Err(ModelError::InvalidSpec(format!(
                    "prevalence must lie in (0,1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// A named unary function registered for use as a `custom:` transform.
///
/// Only the label crosses the wire; each side resolves it against its own
/// [`TransformRegistry`].
#[derive(Clone)]
pub struct CustomTransform {
    label: String,
    func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl CustomTransform {
    pub fn new(label: impl Into<String>, func: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            label: label.into(),
            func: Arc::new(func),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for CustomTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomTransform({})", self.label)
    }
}

impl PartialEq for CustomTransform {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
    }
}
impl Eq for CustomTransform {}

/// Lookup table mapping `custom:` labels to functions.
#[derive(Default, Clone)]
pub struct TransformRegistry {
    entries: BTreeMap<String, CustomTransform>,
}

impl fmt::Debug for TransformRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl TransformRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, transform: CustomTransform) {
        self.entries.insert(transform.label.clone(), transform);
    }

    pub fn get(&self, label: &str) -> Option<&CustomTransform> {
        self.entries.get(label)
    }
}

/// Unary transform applied to a covariate before pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Natural log; requires strictly positive input at evaluation time.
    Log,
    /// Integer power, k >= 1. k = 0 is rejected at spec validation since it
    /// aliases the baseline column.
    Power(u32),
    Custom(CustomTransform),
}

impl Transform {
    /// Symbolic tag used on the wire, in config files and column names.
    pub fn tag(&self) -> String {
        match self {
            Transform::Identity => "identity".into(),
            Transform::Log => "log".into(),
            Transform::Power(k) => format!("pow{k}"),
            Transform::Custom(c) => format!("custom:{}", c.label),
        }
    }

    /// Resolve a tag back into a transform. Custom tags need the registry.
    pub fn from_tag(tag: &str, registry: &TransformRegistry) -> Result<Self, ModelError> {
        match tag {
            "identity" => Ok(Transform::Identity),
            "log" => Ok(Transform::Log),
            _ => {
                if let Some(k) = tag.strip_prefix("pow") {
                    let k: u32 = k
                        .parse()
                        .map_err(|_| ModelError::UnknownTransform { tag: tag.into() })?;
                    return Ok(Transform::Power(k));
                }
                if let Some(label) = tag.strip_prefix("custom:") {
                    return registry
                        .get(label)
                        .map(|c| Transform::Custom(c.clone()))
                        .ok_or_else(|| ModelError::UnknownTransform { tag: tag.into() });
                }
                Err(ModelError::UnknownTransform { tag: tag.into() })
            }
        }
    }

    /// Apply the transform to a single value.
    pub fn apply<R: Real>(&self, x: R) -> Result<R, TransformFailure> {
        match self {
            Transform::Identity => Ok(x),
            Transform::Log => {
                if x <= R::zero() {
                    Err(TransformFailure::LogNonPositive)
                } else {
                    Ok(x.ln())
                }
            }
            Transform::Power(k) => {
                if *k == 0 {
                    // Guarded against at spec validation; 0^0 never evaluates.
                    Err(TransformFailure::ZeroPower)
                } else {
                    Ok(x.powi(*k as i32))
                }
            }
            Transform::Custom(c) => {
                let out = (c.func)(x.to_f64().ok_or(TransformFailure::NonFinite)?);
                if out.is_finite() {
                    Ok(crate::num::real(out))
                } else {
                    Err(TransformFailure::NonFinite)
                }
            }
        }
    }

    /// Whether the privacy guard treats this transform as invertible.
    /// Powers and log are; unknown custom functions are assumed invertible
    /// (the conservative choice).
    pub fn counts_as_invertible(&self) -> bool {
        true
    }
}

/// Why a transform could not be applied to a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformFailure {
    LogNonPositive,
    ZeroPower,
    NonFinite,
}

impl fmt::Display for TransformFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformFailure::LogNonPositive => write!(f, "log of a non-positive value"),
            TransformFailure::ZeroPower => write!(f, "power 0 is not a valid transform"),
            TransformFailure::NonFinite => write!(f, "transform produced a non-finite value"),
        }
    }
}

/// One linear-predictor column: `h(x)` or `h(x) * h'(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub covariate: String,
    pub transform: Transform,
    /// Optional interaction partner: a second covariate with its own transform.
    pub interaction: Option<(String, Transform)>,
}

impl Term {
    pub fn identity(covariate: impl Into<String>) -> Self {
        Self {
            covariate: covariate.into(),
            transform: Transform::Identity,
            interaction: None,
        }
    }

    pub fn log(covariate: impl Into<String>) -> Self {
        Self {
            covariate: covariate.into(),
            transform: Transform::Log,
            interaction: None,
        }
    }

    pub fn power(covariate: impl Into<String>, k: u32) -> Self {
        Self {
            covariate: covariate.into(),
            transform: Transform::Power(k),
            interaction: None,
        }
    }

    pub fn interacting(mut self, covariate: impl Into<String>, transform: Transform) -> Self {
        self.interaction = Some((covariate.into(), transform));
        self
    }

    fn factor_label(covariate: &str, transform: &Transform) -> String {
        match transform {
            Transform::Identity => covariate.to_string(),
            Transform::Log => format!("log({covariate})"),
            Transform::Power(k) => format!("{covariate}^{k}"),
            Transform::Custom(c) => format!("custom:{}({covariate})", c.label),
        }
    }

    /// Canonical label, e.g. `x`, `log(z1)`, `x^2`, `x*z2`. Used as the CSV
    /// column name and the coefficient name.
    pub fn label(&self) -> String {
        let head = Self::factor_label(&self.covariate, &self.transform);
        match &self.interaction {
            None => head,
            Some((cov, tr)) => format!("{head}*{}", Self::factor_label(cov, tr)),
        }
    }
}

/// Ordered list of terms plus the baseline-column flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub terms: Vec<Term>,
    /// When set, the design matrix gets a leading column equal to the pool
    /// size g (1 for individual-level rows), absorbing the transformed
    /// intercept.
    pub include_baseline: bool,
}

impl ModelSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self {
            terms,
            include_baseline: true,
        }
    }

    pub fn term_labels(&self) -> Vec<String> {
        self.terms.iter().map(Term::label).collect()
    }

    /// Structural checks: at least one term, unique labels, no zero powers.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.terms.is_empty() {
            return Err(ModelError::InvalidSpec("model has no terms".into()));
        }
        let mut seen = BTreeSet::new();
        for term in &self.terms {
            for (_, tr) in std::iter::once((&term.covariate, &term.transform))
                .chain(term.interaction.iter().map(|(c, t)| (c, t)))
            {
                if matches!(tr, Transform::Power(0)) {
                    return Err(ModelError::InvalidSpec(format!(
                        "term {}: power 0 aliases the baseline column",
                        term.label()
                    )));
                }
            }
            if !seen.insert(term.label()) {
                return Err(ModelError::InvalidSpec(format!(
                    "duplicate term {}",
                    term.label()
                )));
            }
        }
        Ok(())
    }
}

/// Privacy finding from [`validate_model_spec`]: enough invertible views of
/// one covariate to solve for the member values of the smallest pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyWarning {
    pub covariate: String,
    /// Number of distinct invertible transforms of this covariate.
    pub transform_count: usize,
    /// Smallest pool size in the plan the spec was checked against.
    pub g_min: usize,
    pub message: String,
}

/// Errors from term evaluation and spec validation.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("subject {subject}: covariate {covariate} is missing")]
    MissingCovariate { subject: String, covariate: String },
    #[error("subject {subject}, covariate {covariate}: {failure}")]
    Domain {
        subject: String,
        covariate: String,
        failure: TransformFailure,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("unknown transform tag {tag}")]
    UnknownTransform { tag: String },
    #[error("strict privacy mode: {}", summarize_warnings(.warnings))]
    StrictPrivacyViolation { warnings: Vec<PrivacyWarning> },
}

fn summarize_warnings(warnings: &[PrivacyWarning]) -> String {
    warnings
        .iter()
        .map(|w| w.message.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

fn fetch(record: &MicroRecord, covariate: &str) -> Result<f64, ModelError> {
    record
        .covariates
        .get(covariate)
        .copied()
        .ok_or_else(|| ModelError::MissingCovariate {
            subject: record.subject_id.clone(),
            covariate: covariate.to_string(),
        })
}

fn apply_or_domain(
    transform: &Transform,
    value: f64,
    record: &MicroRecord,
    covariate: &str,
) -> Result<f64, ModelError> {
    transform.apply(value).map_err(|failure| ModelError::Domain {
        subject: record.subject_id.clone(),
        covariate: covariate.to_string(),
        failure,
    })
}

/// Evaluate one term for one subject: `h(x)` or `h(x) * h'(z)`.
///
/// Pure: no state, same inputs give the same output.
pub fn evaluate_term(term: &Term, record: &MicroRecord) -> Result<f64, ModelError> {
    let x = fetch(record, &term.covariate)?;
    let mut value = apply_or_domain(&term.transform, x, record, &term.covariate)?;
    if let Some((cov, tr)) = &term.interaction {
        let z = fetch(record, cov)?;
        value *= apply_or_domain(tr, z, record, cov)?;
    }
    Ok(value)
}

/// Key identifying one invertible view of a covariate for the privacy guard.
/// Same-covariate interactions in the power family collapse to their
/// combined power so `x * x` and `x^2` count once.
fn invertible_view(term: &Term) -> Option<(String, String)> {
    let power_of = |t: &Transform| match t {
        Transform::Identity => Some(1u32),
        Transform::Power(k) => Some(*k),
        _ => None,
    };
    match &term.interaction {
        None => Some((term.covariate.clone(), term.transform.tag())),
        Some((cov, tr)) if *cov == term.covariate => {
            match (power_of(&term.transform), power_of(tr)) {
                (Some(a), Some(b)) => Some((term.covariate.clone(), format!("pow{}", a + b))),
                // Mixed same-covariate products are still one function of
                // that covariate; count them conservatively.
                _ => Some((
                    term.covariate.clone(),
                    format!("{}*{}", term.transform.tag(), tr.tag()),
                )),
            }
        }
        // Interactions with a distinct covariate do not expose either
        // covariate's own value through its power sums.
        Some(_) => None,
    }
}

/// Check a spec against the smallest pool size of a plan.
///
/// A covariate seen under `d` distinct invertible transforms with
/// `d >= g_min` yields a warning: d independent symmetric sums of g_min
/// values can determine the individual values. In strict mode any warning
/// becomes an error.
pub fn validate_model_spec(
    spec: &ModelSpec,
    g_min: usize,
    strict: bool,
) -> Result<Vec<PrivacyWarning>, ModelError> {
    spec.validate()?;
    let mut views: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for term in &spec.terms {
        if let Some((covariate, view)) = invertible_view(term) {
            views.entry(covariate).or_default().insert(view);
        }
    }
    let warnings: Vec<PrivacyWarning> = views
        .into_iter()
        .filter(|(_, v)| v.len() >= g_min)
        .map(|(covariate, v)| PrivacyWarning {
            message: format!(
                "covariate {covariate} appears under {} invertible transforms; \
                 with pools as small as {g_min} the member values are recoverable",
                v.len()
            ),
            covariate,
            transform_count: v.len(),
            g_min,
        })
        .collect();
    if strict && !warnings.is_empty() {
        return Err(ModelError::StrictPrivacyViolation { warnings });
    }
    Ok(warnings)
}
