//! Logistic regression by iteratively reweighted least squares with a fixed
//! per-row offset.
//!
//! This is the estimation engine for both the standard individual-level fit
//! and the pooled fit: the pooled model is ordinary logistic regression on
//! pool-level rows whose offset carries the pool-count ratio. Newton steps
//! on the canonical link with step-halving keep the deviance non-increasing;
//! the weighted normal equations are solved by a pivot-checked Cholesky
//! factorization so rank deficiency fails loudly and reproducibly.

use serde::Serialize;

use crate::model::StudyMeta;
use crate::num::{real, sigmoid, softplus, Real};

/// Relative pivot tolerance for the Cholesky factorization.
const PIVOT_TOL: f64 = 1e-10;
/// Coefficient magnitude at which we declare separation.
const SEPARATION_BETA: f64 = 30.0;
/// Fitted-probability margin for the perfectly-fitted-class check.
const SEPARATION_PROB: f64 = 1e-12;

/// One analysis row: outcome indicator, covariate vector, fixed offset.
///
/// For pooled rows `x[0]` is the pool size g when the baseline column is
/// included; individual-level rows built as g = 1 have `x[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignRow<R: Real = f64> {
    pub y: u8,
    pub x: Vec<R>,
    pub offset: R,
}

impl<R: Real> DesignRow<R> {
    pub fn new(y: u8, x: Vec<R>, offset: R) -> Self {
        Self { y, x, offset }
    }
}

/// Solver options.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions<R: Real = f64> {
    pub max_iter: usize,
    /// Convergence tolerance on both the score sup-norm and the relative
    /// deviance change.
    pub tol: R,
    /// Optional ridge penalty for near-rank-deficient designs; 0 disables.
    pub ridge: R,
}

impl<R: Real> Default for FitOptions<R> {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: real(1e-9),
            ridge: R::zero(),
        }
    }
}

/// Estimates and inference output of one fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult<R: Real = f64> {
    /// Coefficient names, aligned with `coefficients`.
    pub names: Vec<String>,
    pub coefficients: Vec<R>,
    pub std_errors: Vec<R>,
    /// Inverse observed Fisher information at the optimum.
    pub covariance: Vec<Vec<R>>,
    pub log_likelihood: R,
    pub aic: R,
    pub n_rows: usize,
    pub converged: bool,
    pub iterations: usize,
}

/// Likelihood-ratio test between two nested fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrtResult<R: Real = f64> {
    pub statistic: R,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GlmError {
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("separation detected: {0}")]
    Separation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("models are not nested: {0}")]
    NotNested(String),
    #[error("fits ran on different rows ({full} vs {reduced})")]
    RowMismatch { full: usize, reduced: usize },
    #[error("study meta has no prevalence; baseline log odds needs a prospective design")]
    NoPrevalence,
}

fn validate_rows<R: Real>(rows: &[DesignRow<R>]) -> Result<usize, GlmError> {
    let first = rows
        .first()
        .ok_or_else(|| GlmError::InvalidInput("no rows".into()))?;
    let p = first.x.len();
    if p == 0 {
        return Err(GlmError::InvalidInput("rows have no columns".into()));
    }
    let mut class = [false, false];
    for (i, row) in rows.iter().enumerate() {
        if row.x.len() != p {
            return Err(GlmError::DimensionMismatch(format!(
                "row {i} has {} columns, expected {p}",
                row.x.len()
            )));
        }
        if row.y > 1 {
            return Err(GlmError::InvalidInput(format!(
                "row {i}: outcome must be 0 or 1"
            )));
        }
        if !row.offset.is_finite() || row.x.iter().any(|v| !v.is_finite()) {
            return Err(GlmError::InvalidInput(format!("row {i}: non-finite entry")));
        }
        class[row.y as usize] = true;
    }
    if !class[0] || !class[1] {
        return Err(GlmError::InvalidInput(
            "need at least one row of each outcome class".into(),
        ));
    }
    Ok(p)
}

/// Bernoulli log-likelihood at `beta`: sum of `y*eta - ln(1 + e^eta)` with
/// `eta = x . beta + offset`, computed stably for large `|eta|`.
pub fn log_likelihood_at<R: Real>(rows: &[DesignRow<R>], beta: &[R]) -> Result<R, GlmError> {
    let mut ll = R::zero();
    for (i, row) in rows.iter().enumerate() {
        if row.x.len() != beta.len() {
            return Err(GlmError::DimensionMismatch(format!(
                "row {i} has {} columns but beta has {}",
                row.x.len(),
                beta.len()
            )));
        }
        let eta = linear_predictor(row, beta);
        let y: R = real(f64::from(row.y));
        ll = ll + y * eta - softplus(eta);
    }
    Ok(ll)
}

#[inline]
fn linear_predictor<R: Real>(row: &DesignRow<R>, beta: &[R]) -> R {
    let mut eta = row.offset;
    for (xj, bj) in row.x.iter().zip(beta) {
        eta = eta + *xj * *bj;
    }
    eta
}

/// Penalized objective used for step control: log-likelihood minus the ridge
/// term. Equal to the plain log-likelihood when ridge is 0.
fn objective<R: Real>(rows: &[DesignRow<R>], beta: &[R], ridge: R) -> R {
    let ll = log_likelihood_at(rows, beta).expect("dimensions checked by caller");
    let half = real::<R>(0.5);
    ll - half * ridge * beta.iter().map(|b| *b * *b).sum::<R>()
}

/// Score and observed information of the (penalized) objective at `beta`.
fn score_and_info<R: Real>(
    rows: &[DesignRow<R>],
    beta: &[R],
    ridge: R,
) -> (Vec<R>, Vec<Vec<R>>, Vec<R>) {
    let p = beta.len();
    let mut score = vec![R::zero(); p];
    let mut info = vec![vec![R::zero(); p]; p];
    let mut probs = Vec::with_capacity(rows.len());
    for row in rows {
        let mu = sigmoid(linear_predictor(row, beta));
        probs.push(mu);
        let w = mu * (R::one() - mu);
        let resid = real::<R>(f64::from(row.y)) - mu;
        for j in 0..p {
            score[j] = score[j] + row.x[j] * resid;
            let wxj = w * row.x[j];
            for k in j..p {
                info[j][k] = info[j][k] + wxj * row.x[k];
            }
        }
    }
    for j in 0..p {
        score[j] = score[j] - ridge * beta[j];
        info[j][j] = info[j][j] + ridge;
        for k in 0..j {
            info[j][k] = info[k][j];
        }
    }
    (score, info, probs)
}

/// Cholesky factorization with a relative pivot check; factors in place.
/// Returns the lower factor or the offending column.
fn cholesky<R: Real>(mut a: Vec<Vec<R>>) -> Result<Vec<Vec<R>>, GlmError> {
    let p = a.len();
    let max_diag = (0..p)
        .map(|j| a[j][j])
        .fold(R::zero(), |acc, v| acc.max(v.abs()));
    let floor = max_diag.max(R::one()) * real(PIVOT_TOL);
    for j in 0..p {
        for k in 0..j {
            let l = a[j][k];
            a[j][j] = a[j][j] - l * l;
        }
        if a[j][j] <= floor {
            return Err(GlmError::RankDeficient { column: j });
        }
        a[j][j] = a[j][j].sqrt();
        for i in (j + 1)..p {
            let mut s = a[i][j];
            for k in 0..j {
                s = s - a[i][k] * a[j][k];
            }
            a[i][j] = s / a[j][j];
        }
    }
    Ok(a)
}

fn chol_solve<R: Real>(l: &[Vec<R>], b: &[R]) -> Vec<R> {
    let p = b.len();
    let mut y = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            let t = l[i][k] * y[k];
            y[i] = y[i] - t;
        }
        y[i] = y[i] / l[i][i];
    }
    for i in (0..p).rev() {
        for k in (i + 1)..p {
            let t = l[k][i] * y[k];
            y[i] = y[i] - t;
        }
        y[i] = y[i] / l[i][i];
    }
    y
}

fn chol_inverse<R: Real>(l: &[Vec<R>]) -> Vec<Vec<R>> {
    let p = l.len();
    let mut inv = vec![vec![R::zero(); p]; p];
    for j in 0..p {
        let mut e = vec![R::zero(); p];
        e[j] = R::one();
        let col = chol_solve(l, &e);
        for i in 0..p {
            inv[i][j] = col[i];
        }
    }
    // Symmetrize against round-off.
    for i in 0..p {
        for j in (i + 1)..p {
            let half = real::<R>(0.5);
            let m = half * (inv[i][j] + inv[j][i]);
            inv[i][j] = m;
            inv[j][i] = m;
        }
    }
    inv
}

fn check_separation<R: Real>(
    rows: &[DesignRow<R>],
    beta: &[R],
    probs: &[R],
) -> Result<(), GlmError> {
    if let Some(b) = beta.iter().find(|b| b.abs() > real(SEPARATION_BETA)) {
        return Err(GlmError::Separation(format!(
            "coefficient diverged to {b}"
        )));
    }
    let margin = real::<R>(SEPARATION_PROB);
    let mut case_pinned = true;
    let mut control_pinned = true;
    let mut cases = 0usize;
    let mut controls = 0usize;
    for (row, mu) in rows.iter().zip(probs) {
        if row.y == 1 {
            cases += 1;
            case_pinned &= R::one() - *mu <= margin;
        } else {
            controls += 1;
            control_pinned &= *mu <= margin;
        }
    }
    if (cases > 0 && case_pinned) || (controls > 0 && control_pinned) {
        return Err(GlmError::Separation(
            "one outcome class is fitted exactly at the boundary".into(),
        ));
    }
    Ok(())
}

/// Fit with auto-generated coefficient names (`b0`, `b1`, ...).
pub fn fit<R: Real>(rows: &[DesignRow<R>], options: &FitOptions<R>) -> Result<FitResult<R>, GlmError> {
    let p = rows.first().map(|r| r.x.len()).unwrap_or(0);
    let names = (0..p).map(|j| format!("b{j}")).collect();
    fit_named(rows, names, options)
}

/// Fit logistic regression with offsets by IRLS.
///
/// Convergence requires both the score sup-norm and the relative deviance
/// change to drop below `options.tol` within `options.max_iter` iterations;
/// otherwise the best iterate is returned with `converged = false`.
pub fn fit_named<R: Real>(
    rows: &[DesignRow<R>],
    names: Vec<String>,
    options: &FitOptions<R>,
) -> Result<FitResult<R>, GlmError> {
    fit_traced(rows, names, options).map(|(fit, _)| fit)
}

/// As [`fit_named`], also returning the deviance after each iteration
/// (diagnostic: step-halving keeps it non-increasing up to rounding noise).
pub fn fit_traced<R: Real>(
    rows: &[DesignRow<R>],
    names: Vec<String>,
    options: &FitOptions<R>,
) -> Result<(FitResult<R>, Vec<R>), GlmError> {
    let p = validate_rows(rows)?;
    if names.len() != p {
        return Err(GlmError::DimensionMismatch(format!(
            "{} names for {p} columns",
            names.len()
        )));
    }

    let mut beta = vec![R::zero(); p];
    let mut obj = objective(rows, &beta, options.ridge);
    let mut converged = false;
    let mut iterations = 0;
    let two = real::<R>(2.0);
    let mut deviances = vec![-two * obj];

    for iter in 1..=options.max_iter {
        iterations = iter;
        let (score, info, _probs) = score_and_info(rows, &beta, options.ridge);
        let l = cholesky(info)?;
        let delta = chol_solve(&l, &score);

        // Step-halving: deviance (-2 * objective) must not increase beyond
        // rounding noise. Requiring a bitwise non-decrease would reject the
        // final Newton steps, whose objective gain is below float
        // resolution even though they still shrink the score.
        let noise = R::epsilon() * obj.abs().max(R::one()) * real(16.0);
        let mut step = R::one();
        let mut improved = None;
        for _ in 0..=30 {
            let candidate: Vec<R> = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| *b + step * *d)
                .collect();
            let cand_obj = objective(rows, &candidate, options.ridge);
            if cand_obj >= obj - noise {
                improved = Some((candidate, cand_obj));
                break;
            }
            step = step * real(0.5);
        }

        let Some((candidate, cand_obj)) = improved else {
            // No step improves the objective: we are at the numerical
            // optimum. Stay put; convergence is decided by the score alone
            // since the deviance change is zero.
            let score_norm = score.iter().fold(R::zero(), |acc, s| acc.max(s.abs()));
            converged = score_norm < options.tol;
            break;
        };

        let dev_old = -two * obj;
        let dev_new = -two * cand_obj;
        let rel_change = (dev_old - dev_new).abs() / dev_old.abs().max(R::one());

        beta = candidate;
        obj = cand_obj;
        deviances.push(dev_new);

        let (new_score, _info, probs) = score_and_info(rows, &beta, options.ridge);
        check_separation(rows, &beta, &probs)?;
        let score_norm = new_score
            .iter()
            .fold(R::zero(), |acc, s| acc.max(s.abs()));
        if score_norm < options.tol && rel_change < options.tol {
            converged = true;
            break;
        }
    }

    let (_score, info, _probs) = score_and_info(rows, &beta, options.ridge);
    let l = cholesky(info)?;
    let covariance = chol_inverse(&l);
    let std_errors = (0..p).map(|j| covariance[j][j].sqrt()).collect();
    let log_likelihood = log_likelihood_at(rows, &beta)?;
    let aic = -two * log_likelihood + two * real(p as f64);

    Ok((
        FitResult {
            names,
            coefficients: beta,
            std_errors,
            covariance,
            log_likelihood,
            aic,
            n_rows: rows.len(),
            converged,
            iterations,
        },
        deviances,
    ))
}

/// Likelihood-ratio test of a reduced model against the full model.
///
/// Requires the reduced coefficients to be a named subset of the full ones
/// and both fits to have run on the same rows.
pub fn likelihood_ratio_test<R: Real>(
    full: &FitResult<R>,
    reduced: &FitResult<R>,
) -> Result<LrtResult<R>, GlmError> {
    if full.n_rows != reduced.n_rows {
        return Err(GlmError::RowMismatch {
            full: full.n_rows,
            reduced: reduced.n_rows,
        });
    }
    for name in &reduced.names {
        if !full.names.contains(name) {
            return Err(GlmError::NotNested(format!(
                "reduced term {name} is not in the full model"
            )));
        }
    }
    if reduced.names.len() > full.names.len() {
        return Err(GlmError::NotNested(
            "reduced model has more coefficients than the full model".into(),
        ));
    }
    let df = full.names.len() - reduced.names.len();
    let statistic = (real::<R>(2.0) * (full.log_likelihood - reduced.log_likelihood))
        .max(R::zero());
    let p_value = if df == 0 {
        1.0
    } else {
        chi_square_sf(statistic.to_f64().unwrap_or(f64::NAN), df)
    };
    Ok(LrtResult {
        statistic,
        df,
        p_value,
    })
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    dist.sf(x)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

/// Recover the baseline log odds from the transformed intercept:
/// `b0 = b0* - ln((1 - pi) / pi)`. Needs a prevalence, which only a
/// prospective or cross-sectional design provides.
pub fn recover_baseline<R: Real>(fit: &FitResult<R>, meta: &StudyMeta) -> Result<R, GlmError> {
    let pi = meta.prevalence.ok_or(GlmError::NoPrevalence)?;
    if !(pi > 0.0 && pi < 1.0) {
        return Err(GlmError::InvalidInput(format!(
            "prevalence must be in (0,1), got {pi}"
        )));
    }
    let b0_star = *fit
        .coefficients
        .first()
        .ok_or_else(|| GlmError::InvalidInput("fit has no coefficients".into()))?;
    Ok(b0_star - real(((1.0 - pi) / pi).ln()))
}

/// Wald confidence intervals `estimate +/- z * SE` at the given level.
pub fn wald_ci<R: Real>(fit: &FitResult<R>, level: f64) -> Vec<(R, R)> {
    let z: R = if level <= 0.0 {
        R::zero()
    } else {
        real(normal_quantile((1.0 + level) / 2.0))
    };
    fit.coefficients
        .iter()
        .zip(&fit.std_errors)
        .map(|(b, se)| (*b - z * *se, *b + z * *se))
        .collect()
}

/// 12-row fixture with one covariate; also lives in tests/fixtures.
#[cfg(test)]
pub(crate) fn tests_fixture12() -> Vec<DesignRow> {
    let data = [
        (0u8, 0.2),
        (0, 0.5),
        (0, 1.1),
        (0, 1.8),
        (0, 2.0),
        (0, 2.4),
        (0, 3.1),
        (1, 1.5),
        (1, 2.2),
        (1, 2.9),
        (1, 3.6),
        (1, 4.0),
    ];
    data.iter()
        .map(|&(y, x)| DesignRow::new(y, vec![1.0, x], 0.0))
        .collect()
}
