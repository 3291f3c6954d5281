//! Cohort generator and replication harness.
//!
//! Generates prospective cohorts under a known logistic model with a
//! log-transformed confounder and a continuous effect modifier, then runs
//! the standard individual-level analysis next to pooled analyses over a
//! range of pool sizes, reporting mean estimate, mean model SE, coverage of
//! the nominal-95% interval and power per parameter. Replicates run in
//! parallel on per-replicate RNG streams and reduce in replicate order, so
//! results do not depend on scheduling.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::glm::{fit_named, FitOptions, GlmError};
use crate::model::{MicroRecord, ModelSpec, StudyMeta, Term, Transform};
use crate::num::sigmoid;
use crate::pooling::{
    aggregate_centralized, build_plan, coefficient_names, design_rows_from_pooled,
    design_rows_individual, PoolingError, SizePolicy,
};
use crate::rng::{stream, STREAM_COHORT_BASE};

/// True coefficients of the generating model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub b0: f64,
    pub bx: f64,
    pub bz1: f64,
    pub bz2: f64,
    pub bxz2: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Self {
            b0: -3.0,
            bx: 0.25,
            bz1: -0.3,
            bz2: 0.15,
            bxz2: 0.5,
        }
    }
}

impl Betas {
    pub fn slopes(&self) -> [(&'static str, f64); 4] {
        [
            ("x", self.bx),
            ("log(z1)", self.bz1),
            ("z2", self.bz2),
            ("x*z2", self.bxz2),
        ]
    }
}

/// Replication configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_reps: usize,
    pub beta: Betas,
    /// Correlation between the exposure and the pre-absolute-value normal
    /// behind the confounder.
    pub corr_x_w: f64,
    pub pool_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_subjects: 30_000,
            n_reps: 500,
            beta: Betas::default(),
            corr_x_w: 0.3,
            pool_sizes: vec![2, 3, 4, 6],
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.corr_x_w > -1.0 && self.corr_x_w < 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "corr_x_w must be in (-1,1), got {}",
                self.corr_x_w
            )));
        }
        if self.n_subjects < 100 {
            return Err(SimError::InvalidConfig(
                "n_subjects must be at least 100".into(),
            ));
        }
        if self.n_reps == 0 {
            return Err(SimError::InvalidConfig("n_reps must be positive".into()));
        }
        if self.pool_sizes.iter().any(|&g| g < 2) {
            return Err(SimError::InvalidConfig(
                "pool sizes below 2 are not part of the replication design".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("arms do not cover the same replicates")]
    ArmMismatch,
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Glm(#[from] GlmError),
}

/// The model the harness fits: x, log(z1), z2, x*z2 with a baseline column.
pub fn paper_model_spec() -> ModelSpec {
    ModelSpec::new(vec![
        Term::identity("x"),
        Term::log("z1"),
        Term::identity("z2"),
        Term::identity("x").interacting("z2", Transform::Identity),
    ])
}

/// Draw one cohort for replicate `rep`.
///
/// (X, W) are standard bivariate normal with the configured correlation,
/// Z1 = |W|, Z2 standard normal independent of both; Y is Bernoulli with
/// logit b0 + bx*x + bz1*log(z1) + bz2*z2 + bxz2*x*z2.
pub fn generate_cohort(config: &SimConfig, rep: usize) -> Vec<MicroRecord> {
    let mut rng = stream(config.seed, STREAM_COHORT_BASE + rep as u64);
    let rho = config.corr_x_w;
    let tail = (1.0 - rho * rho).sqrt();
    let b = &config.beta;
    (0..config.n_subjects)
        .map(|i| {
            let x: f64 = rng.sample(StandardNormal);
            let w_aux: f64 = rng.sample(StandardNormal);
            let w = rho * x + tail * w_aux;
            let z1 = w.abs();
            let z2: f64 = rng.sample(StandardNormal);
            let eta = b.b0 + b.bx * x + b.bz1 * z1.ln() + b.bz2 * z2 + b.bxz2 * x * z2;
            let y = u8::from(rng.random::<f64>() < sigmoid(eta));
            MicroRecord::new(
                format!("s{i:06}"),
                y,
                [("x", x), ("z1", z1), ("z2", z2)],
            )
        })
        .collect()
}

/// Estimates from one analysis arm of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepEstimates {
    pub rep: usize,
    /// "unpooled" or "g=<size>".
    pub arm: String,
    /// Slope estimates ordered as [`Betas::slopes`].
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub converged: bool,
}

/// Aggregated performance of one arm over the replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub parameters: Vec<ParamSummary>,
    /// Replicates excluded from the means (non-convergence or separation).
    pub failed_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_model_se: f64,
    /// Share of replicates whose nominal-95% interval covers the truth.
    pub coverage: f64,
    /// Share of replicates whose nominal-95% interval excludes zero.
    pub power: f64,
}

/// Full replication output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepSummary {
    pub config: SimConfig,
    pub arms: Vec<ArmSummary>,
    pub mean_prevalence: f64,
    /// Per-replicate estimates for scatter comparisons and external plotting.
    pub per_rep: Vec<RepEstimates>,
}

struct RepOutcome {
    prevalence: f64,
    arms: Vec<Result<RepEstimates, String>>,
}

fn fit_arm(
    rows: Vec<crate::glm::DesignRow>,
    names: Vec<String>,
    rep: usize,
    arm: &str,
) -> Result<RepEstimates, String> {
    let fit = fit_named(&rows, names, &FitOptions::default()).map_err(|e| e.to_string())?;
    if !fit.converged {
        return Err(format!("arm {arm}: did not converge"));
    }
    // Slopes sit after the baseline column.
    Ok(RepEstimates {
        rep,
        arm: arm.to_string(),
        estimates: fit.coefficients[1..].to_vec(),
        std_errors: fit.std_errors[1..].to_vec(),
        converged: fit.converged,
    })
}

fn run_rep(config: &SimConfig, spec: &ModelSpec, rep: usize) -> RepOutcome {
    let records = generate_cohort(config, rep);
    let cases: Vec<String> = records
        .iter()
        .filter(|r| r.is_case())
        .map(|r| r.subject_id.clone())
        .collect();
    let controls: Vec<String> = records
        .iter()
        .filter(|r| !r.is_case())
        .map(|r| r.subject_id.clone())
        .collect();
    let prevalence = cases.len() as f64 / records.len() as f64;
    let meta = StudyMeta::new(cases.len(), controls.len());

    let mut arms = Vec::with_capacity(config.pool_sizes.len() + 1);
    arms.push(
        design_rows_individual(&records, spec)
            .map_err(|e| e.to_string())
            .and_then(|rows| fit_arm(rows, coefficient_names(spec, false), rep, "unpooled")),
    );
    for &g in &config.pool_sizes {
        let arm = format!("g={g}");
        let result = (|| {
            let plan = build_plan(
                &meta,
                &cases,
                &controls,
                &SizePolicy::single(g),
                true,
                config.seed ^ (rep as u64).rotate_left(17) ^ (g as u64) << 48,
            )
            .map_err(|e| e.to_string())?;
            let pooled = aggregate_centralized(&plan, &records, spec).map_err(|e| e.to_string())?;
            let rows = design_rows_from_pooled(&pooled, spec.include_baseline);
            fit_arm(rows, coefficient_names(spec, true), rep, &arm)
        })();
        arms.push(result);
    }
    RepOutcome { prevalence, arms }
}

/// Run the replication study. Deterministic given `config.seed`.
pub fn run_replication(config: &SimConfig) -> Result<RepSummary, SimError> {
    config.validate()?;
    let spec = paper_model_spec();
    let truths = config.beta.slopes();
    let z = crate::glm::normal_quantile(0.975);

    let outcomes: Vec<RepOutcome> = (0..config.n_reps)
        .into_par_iter()
        .map(|rep| run_rep(config, &spec, rep))
        .collect();

    let arm_names: Vec<String> = std::iter::once("unpooled".to_string())
        .chain(config.pool_sizes.iter().map(|g| format!("g={g}")))
        .collect();

    let mut per_rep = Vec::new();
    let mut arms = Vec::with_capacity(arm_names.len());
    for (arm_index, arm_name) in arm_names.iter().enumerate() {
        let mut count = 0usize;
        let mut failed = 0usize;
        let mut sums = vec![0.0f64; truths.len()];
        let mut se_sums = vec![0.0f64; truths.len()];
        let mut covered = vec![0usize; truths.len()];
        let mut rejected = vec![0usize; truths.len()];
        for outcome in &outcomes {
            match &outcome.arms[arm_index] {
                Ok(est) => {
                    count += 1;
                    for (j, (_, truth)) in truths.iter().enumerate() {
                        let e = est.estimates[j];
                        let se = est.std_errors[j];
                        sums[j] += e;
                        se_sums[j] += se;
                        if (e - truth).abs() <= z * se {
                            covered[j] += 1;
                        }
                        if e.abs() > z * se {
                            rejected[j] += 1;
                        }
                    }
                    per_rep.push(est.clone());
                }
                Err(_) => failed += 1,
            }
        }
        let denom = count.max(1) as f64;
        arms.push(ArmSummary {
            arm: arm_name.clone(),
            parameters: truths
                .iter()
                .enumerate()
                .map(|(j, (name, truth))| ParamSummary {
                    name: (*name).to_string(),
                    truth: *truth,
                    mean_estimate: sums[j] / denom,
                    mean_model_se: se_sums[j] / denom,
                    coverage: covered[j] as f64 / denom,
                    power: rejected[j] as f64 / denom,
                })
                .collect(),
            failed_reps: failed,
        });
    }
    let mean_prevalence =
        outcomes.iter().map(|o| o.prevalence).sum::<f64>() / outcomes.len() as f64;
    Ok(RepSummary {
        config: config.clone(),
        arms,
        mean_prevalence,
        per_rep,
    })
}

/// Agreement between two arms' per-replicate estimates for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterParam {
    pub name: String,
    /// (reference estimate, comparison estimate) per replicate.
    pub pairs: Vec<(f64, f64)>,
    /// Least-squares line of comparison on reference; absent when the
    /// reference estimates are constant.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterReport {
    pub reference_arm: String,
    pub comparison_arm: String,
    pub parameters: Vec<ScatterParam>,
}

/// Pair per-replicate estimates of two arms and fit the agreement line.
pub fn scatter_report(
    summary: &RepSummary,
    reference_arm: &str,
    comparison_arm: &str,
) -> Result<ScatterReport, SimError> {
    let collect = |arm: &str| -> Vec<&RepEstimates> {
        let mut v: Vec<&RepEstimates> =
            summary.per_rep.iter().filter(|r| r.arm == arm).collect();
        v.sort_by_key(|r| r.rep);
        v
    };
    let reference = collect(reference_arm);
    let comparison = collect(comparison_arm);
    if reference.is_empty()
        || reference.len() != comparison.len()
        || reference
            .iter()
            .zip(&comparison)
            .any(|(a, b)| a.rep != b.rep)
    {
        return Err(SimError::ArmMismatch);
    }
    let n_params = reference[0].estimates.len();
    let mut parameters = Vec::with_capacity(n_params);
    for j in 0..n_params {
        let pairs: Vec<(f64, f64)> = reference
            .iter()
            .zip(&comparison)
            .map(|(a, b)| (a.estimates[j], b.estimates[j]))
            .collect();
        let n = pairs.len() as f64;
        let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let var_x = pairs.iter().map(|p| (p.0 - mean_x).powi(2)).sum::<f64>() / n;
        let cov = pairs
            .iter()
            .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
            .sum::<f64>()
            / n;
        let degenerate = var_x == 0.0;
        let slope = (!degenerate).then(|| cov / var_x);
        let intercept = slope.map(|s| mean_y - s * mean_x);
        parameters.push(ScatterParam {
            name: summary.config.beta.slopes()[j].0.to_string(),
            pairs,
            slope,
            intercept,
            degenerate,
        });
    }
    Ok(ScatterReport {
        reference_arm: reference_arm.to_string(),
        comparison_arm: comparison_arm.to_string(),
        parameters,
    })
}

/// Results table in the replication layout: one parameter block per row
/// group (Estimate / ModelSE / Coverage), one column per arm.
pub fn render_results_table(summary: &RepSummary) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "");
    for arm in &summary.arms {
        let _ = write!(out, "{:>12}", arm.arm);
    }
    out.push('\n');
    let n_params = summary.arms[0].parameters.len();
    for j in 0..n_params {
        let p0 = &summary.arms[0].parameters[j];
        let _ = writeln!(out, "{} = {}", p0.name, p0.truth);
        for (label, pick) in [
            ("Estimate", 0usize),
            ("ModelSE", 1),
            ("Coverage", 2),
            ("Power", 3),
        ] {
            let _ = write!(out, "{label:<12}");
            for arm in &summary.arms {
                let p = &arm.parameters[j];
                let v = match pick {
                    0 => p.mean_estimate,
                    1 => p.mean_model_se,
                    2 => p.coverage,
                    _ => p.power,
                };
                let _ = write!(out, "{v:>12.4}");
            }
            out.push('\n');
        }
    }
    let _ = writeln!(out, "prevalence  {:>12.4}", summary.mean_prevalence);
    out
}

/// Same table as CSV: parameter,statistic,<arm...>.
pub fn render_results_csv(summary: &RepSummary, header: &crate::files::FileHeader) -> String {
    use std::fmt::Write as _;
    let mut out = header.render();
    out.push_str("parameter,truth,statistic");
    for arm in &summary.arms {
        let _ = write!(out, ",{}", arm.arm);
    }
    out.push('\n');
    let n_params = summary.arms[0].parameters.len();
    for j in 0..n_params {
        let p0 = &summary.arms[0].parameters[j];
        for (label, pick) in [
            ("estimate", 0usize),
            ("model_se", 1),
            ("coverage", 2),
            ("power", 3),
        ] {
            let _ = write!(out, "{},{},{label}", p0.name, p0.truth);
            for arm in &summary.arms {
                let p = &arm.parameters[j];
                let v = match pick {
                    0 => p.mean_estimate,
                    1 => p.mean_model_se,
                    2 => p.coverage,
                    _ => p.power,
                };
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Per-replicate estimates as CSV for external plotting.
pub fn render_per_rep_csv(summary: &RepSummary, header: &crate::files::FileHeader) -> String {
    use std::fmt::Write as _;
    let mut out = header.render();
    out.push_str("rep,arm");
    for (name, _) in summary.config.beta.slopes() {
        let _ = write!(out, ",{name},se({name})");
    }
    out.push('\n');
    for rec in &summary.per_rep {
        let _ = write!(out, "{},{}", rec.rep, rec.arm);
        for (e, se) in rec.estimates.iter().zip(&rec.std_errors) {
            let _ = write!(out, ",{e},{se}");
        }
        out.push('\n');
    }
    out
}
