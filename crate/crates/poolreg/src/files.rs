//! File formats: microdata CSV, model config, plan CSV, pooled CSV, and the
//! fit report.
//!
//! Every file this toolkit writes starts with `#`-prefixed header comments
//! carrying the tool version, the seed and a digest of the run
//! configuration, so outputs are attributable and reproducible. Readers
//! skip those lines.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::glm::{normal_quantile, FitResult};
use crate::model::{MicroRecord, ModelSpec, Term, Transform, TransformRegistry};
use crate::pooling::{Pool, PoolPlan, PooledRow, Stratum};

#[derive(Debug, thiserror::Error)]
pub enum FilesError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> FilesError {
    FilesError::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Provenance header written as `#` comments at the top of every output.
#[derive(Debug, Clone, Default)]
pub struct FileHeader {
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
}

impl FileHeader {
    pub fn new(seed: Option<u64>, config_digest: Option<String>) -> Self {
        Self {
            tool_version: crate::VERSION.to_string(),
            seed,
            config_digest,
        }
    }

    pub fn render(&self) -> String {
        let mut line = format!("# poolreg {}", self.tool_version);
        if let Some(seed) = self.seed {
            let _ = write!(line, " seed={seed}");
        }
        if let Some(digest) = &self.config_digest {
            let _ = write!(line, " config={digest}");
        }
        line.push('\n');
        line
    }
}

// ---------------------------------------------------------------------------
// Microdata CSV: header row `subject_id,outcome,<covariate...>`.
// UTF-8, '.' decimal, no thousands separators.
// ---------------------------------------------------------------------------

pub fn read_microdata_str(text: &str, path: &str) -> Result<Vec<MicroRecord>, FilesError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let columns: Vec<String> = headers.iter().map(str::to_string).collect();
    if columns.len() < 2 || columns[0] != "subject_id" || columns[1] != "outcome" {
        return Err(parse_err(
            path,
            1,
            "header must start with subject_id,outcome",
        ));
    }
    let covariates = &columns[2..];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(path, line, e.to_string()))?;
        if row.len() != columns.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", columns.len(), row.len()),
            ));
        }
        let subject_id = row[0].to_string();
        if subject_id.is_empty() {
            return Err(parse_err(path, line, "empty subject_id"));
        }
        if !seen.insert(subject_id.clone()) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate subject_id {subject_id}"),
            ));
        }
        let outcome: u8 = match &row[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    path,
                    line,
                    format!("outcome must be 0 or 1, found {other}"),
                ))
            }
        };
        let mut values = std::collections::BTreeMap::new();
        for (name, field) in covariates.iter().zip(row.iter().skip(2)) {
            let value: f64 = field.parse().map_err(|_| {
                parse_err(path, line, format!("covariate {name}: bad number {field}"))
            })?;
            if !value.is_finite() {
                return Err(parse_err(
                    path,
                    line,
                    format!("covariate {name}: non-finite value"),
                ));
            }
            values.insert(name.clone(), value);
        }
        records.push(MicroRecord {
            subject_id,
            outcome,
            covariates: values,
        });
    }
    if records.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(records)
}

pub fn read_microdata(path: &Path) -> Result<Vec<MicroRecord>, FilesError> {
    let text = std::fs::read_to_string(path)?;
    read_microdata_str(&text, &path.display().to_string())
}

/// Write microdata with the covariate columns in sorted order.
pub fn render_microdata(records: &[MicroRecord], header: &FileHeader) -> String {
    let mut covariates: BTreeSet<&str> = BTreeSet::new();
    for record in records {
        covariates.extend(record.covariates.keys().map(String::as_str));
    }
    let mut out = header.render();
    out.push_str("subject_id,outcome");
    for name in &covariates {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for record in records {
        let _ = write!(out, "{},{}", record.subject_id, record.outcome);
        for name in &covariates {
            match record.covariates.get(*name) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Model config: a small declarative term list.
//
//   # comment
//   baseline on
//   term x
//   term log(z1)
//   term x^2
//   term x * z2
//   term custom:sqrt(x)
// ---------------------------------------------------------------------------

fn parse_factor(
    text: &str,
    registry: &TransformRegistry,
    path: &str,
    line: usize,
) -> Result<(String, Transform), FilesError> {
    let text = text.trim();
    if let Some(rest) = text.strip_prefix("log(") {
        let name = rest
            .strip_suffix(')')
            .ok_or_else(|| parse_err(path, line, "log( missing closing parenthesis"))?;
        return Ok((name.trim().to_string(), Transform::Log));
    }
    if let Some(rest) = text.strip_prefix("custom:") {
        let open = rest
            .find('(')
            .ok_or_else(|| parse_err(path, line, "custom transform needs (covariate)"))?;
        let label = &rest[..open];
        let name = rest[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| parse_err(path, line, "custom transform missing closing parenthesis"))?;
        let transform = Transform::from_tag(&format!("custom:{label}"), registry)
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        return Ok((name.trim().to_string(), transform));
    }
    if let Some((name, power)) = text.split_once('^') {
        let k: u32 = power
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad power {power}")))?;
        return Ok((name.trim().to_string(), Transform::Power(k)));
    }
    if text.is_empty() || text.contains(|c: char| c.is_whitespace() || "(),".contains(c)) {
        return Err(parse_err(path, line, format!("bad covariate name {text:?}")));
    }
    Ok((text.to_string(), Transform::Identity))
}

pub fn parse_model_config(
    text: &str,
    registry: &TransformRegistry,
    path: &str,
) -> Result<ModelSpec, FilesError> {
    let mut terms = Vec::new();
    let mut include_baseline = true;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(value) = line.strip_prefix("baseline") {
            include_baseline = match value.trim() {
                "on" => true,
                "off" => false,
                other => {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("baseline must be on or off, found {other}"),
                    ))
                }
            };
            continue;
        }
        let Some(expr) = line.strip_prefix("term ") else {
            return Err(parse_err(
                path,
                line_no,
                format!("expected `term ...` or `baseline on|off`, found {line:?}"),
            ));
        };
        let mut factors = expr.split('*');
        let head = factors
            .next()
            .ok_or_else(|| parse_err(path, line_no, "empty term"))?;
        let (covariate, transform) = parse_factor(head, registry, path, line_no)?;
        let interaction = match factors.next() {
            None => None,
            Some(second) => Some(parse_factor(second, registry, path, line_no)?),
        };
        if factors.next().is_some() {
            return Err(parse_err(
                path,
                line_no,
                "terms support at most one interaction partner",
            ));
        }
        terms.push(Term {
            covariate,
            transform,
            interaction,
        });
    }
    let spec = ModelSpec {
        terms,
        include_baseline,
    };
    spec.validate()
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(spec)
}

pub fn read_model_config(
    path: &Path,
    registry: &TransformRegistry,
) -> Result<ModelSpec, FilesError> {
    let text = std::fs::read_to_string(path)?;
    parse_model_config(&text, registry, &path.display().to_string())
}

pub fn render_model_config(spec: &ModelSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "baseline {}",
        if spec.include_baseline { "on" } else { "off" }
    );
    for term in &spec.terms {
        let _ = writeln!(out, "term {}", term.label());
    }
    out
}

// ---------------------------------------------------------------------------
// Plan CSV: `pool_id,stratum,member_1..member_g` with ragged rows for mixed
// sizes, then one `leftover,-,<id>` row per excluded subject.
// ---------------------------------------------------------------------------

pub fn render_plan_csv(plan: &PoolPlan, header: &FileHeader) -> String {
    let mut out = header.render();
    out.push_str(&format!("# plan seed={}\n", plan.seed));
    out.push_str("pool_id,stratum,member_ids\n");
    for pool in &plan.pools {
        let _ = write!(out, "{},{}", pool.pool_id, pool.stratum.as_str());
        for id in &pool.member_ids {
            let _ = write!(out, ",{id}");
        }
        out.push('\n');
    }
    for id in &plan.leftovers {
        let _ = writeln!(out, "leftover,-,{id}");
    }
    out
}

pub fn parse_plan_csv(text: &str, path: &str) -> Result<PoolPlan, FilesError> {
    let mut seed = 0u64;
    let mut pools = Vec::new();
    let mut leftovers = Vec::new();
    let mut header_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(s) = comment.trim().strip_prefix("plan seed=") {
                seed = s
                    .parse()
                    .map_err(|_| parse_err(path, line_no, "bad plan seed"))?;
            }
            continue;
        }
        if !header_seen {
            if line != "pool_id,stratum,member_ids" {
                return Err(parse_err(path, line_no, "unexpected plan header"));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(parse_err(path, line_no, "plan row needs at least 3 fields"));
        }
        if fields[0] == "leftover" {
            leftovers.push(fields[2].to_string());
            continue;
        }
        let stratum = Stratum::parse(fields[1])
            .ok_or_else(|| parse_err(path, line_no, format!("bad stratum {}", fields[1])))?;
        pools.push(Pool {
            pool_id: fields[0].to_string(),
            stratum,
            member_ids: fields[2..].iter().map(|s| s.to_string()).collect(),
        });
    }
    if !header_seen {
        return Err(parse_err(path, 1, "missing plan header"));
    }
    Ok(PoolPlan {
        pools,
        leftovers,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Pooled CSV: `case_pool,pool_id,size_g,offset,<one column per term>`.
// Values print in shortest round-trip form, so equal datasets are equal
// bytes.
// ---------------------------------------------------------------------------

pub fn render_pooled_csv(rows: &[PooledRow], term_labels: &[String], header: &FileHeader) -> String {
    let mut out = header.render();
    out.push_str("case_pool,pool_id,size_g,offset");
    for label in term_labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for row in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            if row.y == 1 { "yes" } else { "no" },
            row.pool_id,
            row.size_g,
            row.offset
        );
        for value in &row.term_values {
            let _ = write!(out, ",{value}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_pooled_csv(text: &str, path: &str) -> Result<(Vec<PooledRow>, Vec<String>), FilesError> {
    let mut labels: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if labels.is_none() {
            if fields.len() < 4 || fields[..4] != ["case_pool", "pool_id", "size_g", "offset"] {
                return Err(parse_err(path, line_no, "unexpected pooled-data header"));
            }
            labels = Some(fields[4..].iter().map(|s| s.to_string()).collect());
            continue;
        }
        let labels_ref = labels.as_ref().unwrap();
        if fields.len() != 4 + labels_ref.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} fields, found {}", 4 + labels_ref.len(), fields.len()),
            ));
        }
        let y = match fields[0] {
            "yes" => 1,
            "no" => 0,
            other => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("case_pool must be yes or no, found {other}"),
                ))
            }
        };
        let size_g: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(path, line_no, "bad size_g"))?;
        let offset: f64 = fields[3]
            .parse()
            .map_err(|_| parse_err(path, line_no, "bad offset"))?;
        let term_values: Result<Vec<f64>, _> = fields[4..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(path, line_no, format!("bad term value {s}")))
            })
            .collect();
        rows.push(PooledRow {
            pool_id: fields[1].to_string(),
            y,
            size_g,
            term_values: term_values?,
            offset,
        });
    }
    let labels = labels.ok_or_else(|| parse_err(path, 1, "missing pooled-data header"))?;
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no pooled rows"));
    }
    Ok((rows, labels))
}

// ---------------------------------------------------------------------------
// Fit report.
// ---------------------------------------------------------------------------

/// Plain-text coefficient table plus fit diagnostics.
pub fn render_fit_report(fit: &FitResult, level: f64, header: &FileHeader) -> String {
    let z = normal_quantile((1.0 + level) / 2.0);
    let mut out = header.render();
    let width = fit
        .names
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(4)
        .max(4);
    let _ = writeln!(
        out,
        "{:<width$}  {:>12}  {:>12}  {:>9}  {:>11}  {:>12}  {:>12}",
        "term", "estimate", "std_error", "z", "p", "ci_low", "ci_high"
    );
    for i in 0..fit.names.len() {
        let est = fit.coefficients[i];
        let se = fit.std_errors[i];
        let zval = if se > 0.0 { est / se } else { f64::INFINITY };
        let p = if se > 0.0 {
            crate::glm::chi_square_sf(zval * zval, 1)
        } else {
            0.0
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.6}  {:>12.6}  {:>9.3}  {:>11.4e}  {:>12.6}  {:>12.6}",
            fit.names[i],
            est,
            se,
            zval,
            p,
            est - z * se,
            est + z * se
        );
    }
    let _ = writeln!(out, "rows            {}", fit.n_rows);
    let _ = writeln!(out, "log_likelihood  {:.10}", fit.log_likelihood);
    let _ = writeln!(out, "aic             {:.10}", fit.aic);
    let _ = writeln!(out, "iterations      {}", fit.iterations);
    let _ = writeln!(out, "converged       {}", fit.converged);
    out
}

/// Machine-readable fit record.
pub fn render_fit_json(fit: &FitResult, header: &FileHeader) -> String {
    let value = serde_json::json!({
        "tool_version": header.tool_version,
        "seed": header.seed,
        "config": header.config_digest,
        "fit": fit,
    });
    serde_json::to_string_pretty(&value).expect("fit serializes")
}
