//! Command implementations and the error-to-exit-code mapping.

use std::path::Path;
use std::time::Duration;

use sha2::{Digest, Sha256};

use poolreg::files::{
    read_microdata, read_model_config, render_fit_json, render_fit_report, render_microdata,
    render_plan_csv, render_pooled_csv, FileHeader, FilesError,
};
use poolreg::glm::{fit_named, FitOptions, FitResult, GlmError};
use poolreg::model::{MicroRecord, ModelError, StudyMeta, TransformRegistry};
use poolreg::pooling::{
    aggregate_centralized, build_plan, coefficient_names, design_rows_from_pooled,
    design_rows_individual, oversize_warning, PoolingError, SizePolicy,
};
use poolreg::protocol::socket::{run_coordinator_socket, run_node_socket};
use poolreg::protocol::{
    transcript_to_jsonl, Coordinator, CoordinatorConfig, NodeConfig, ProtocolError,
    TranscriptEntry,
};
use poolreg::simulate::{
    generate_cohort, render_per_rep_csv, render_results_csv, render_results_table,
    run_replication, scatter_report, SimConfig, SimError,
};

use crate::config::{
    parse_mask_mode, parse_size_list, parse_size_text, relative_to, CoordinatorFile, NodeFile,
};
use crate::SizeArgs;

/// Command failure with its exit code class.
#[derive(Debug)]
pub enum AppError {
    /// Bad inputs or configuration (exit 2).
    Validation(String),
    /// Numerical failure in estimation (exit 3).
    Numeric(String),
    /// Distributed-session failure (exit 4).
    Protocol(String),
}

impl AppError {
    pub fn message(&self) -> &str {
        match self {
            AppError::Validation(m) | AppError::Numeric(m) | AppError::Protocol(m) => m,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Validation(_) => 2,
            AppError::Numeric(_) => 3,
            AppError::Protocol(_) => 4,
        }
    }
}

impl From<FilesError> for AppError {
    fn from(e: FilesError) -> Self {
        AppError::Validation(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        AppError::Validation(e.to_string())
    }
}

impl From<PoolingError> for AppError {
    fn from(e: PoolingError) -> Self {
        match e {
            PoolingError::Model(inner @ ModelError::Domain { .. }) => {
                AppError::Numeric(inner.to_string())
            }
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<GlmError> for AppError {
    fn from(e: GlmError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<SimError> for AppError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Glm(inner) => AppError::Numeric(inner.to_string()),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<ProtocolError> for AppError {
    fn from(e: ProtocolError) -> Self {
        AppError::Protocol(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Validation(e.to_string())
    }
}

fn digest_of(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<(), AppError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), content)?;
    Ok(())
}

fn split_ids(records: &[MicroRecord]) -> (Vec<String>, Vec<String>) {
    let cases = records
        .iter()
        .filter(|r| r.is_case())
        .map(|r| r.subject_id.clone())
        .collect();
    let controls = records
        .iter()
        .filter(|r| !r.is_case())
        .map(|r| r.subject_id.clone())
        .collect();
    (cases, controls)
}

fn size_policy_from_args(args: &SizeArgs) -> Result<SizePolicy, AppError> {
    if let Some(g) = args.size {
        return Ok(SizePolicy::single(g));
    }
    if let Some(text) = &args.sizes {
        return parse_size_text(text).map_err(AppError::Validation);
    }
    if let Some(g) = args.auto {
        return Ok(SizePolicy::auto(g));
    }
    if let (Some(cases), Some(controls)) = (&args.case_sizes, &args.control_sizes) {
        return Ok(SizePolicy::Explicit {
            case_sizes: parse_size_list(cases).map_err(AppError::Validation)?,
            control_sizes: parse_size_list(controls).map_err(AppError::Validation)?,
        });
    }
    Err(AppError::Validation(
        "choose a pool size: --size, --sizes, --auto, or --case-sizes/--control-sizes".into(),
    ))
}

fn warn_oversize(policy: &SizePolicy) {
    let sizes: Vec<usize> = match policy {
        SizePolicy::Single { size } => vec![*size],
        SizePolicy::Pair { small, large } => vec![*small, *large],
        SizePolicy::Explicit {
            case_sizes,
            control_sizes,
        } => case_sizes.iter().chain(control_sizes).copied().collect(),
    };
    for size in sizes {
        if let Some(warning) = oversize_warning(size) {
            eprintln!("warning: {warning}");
        }
    }
}

pub fn cmd_fit(data: &Path, model: &Path, out_dir: &Path) -> Result<(), AppError> {
    let records = read_microdata(data)?;
    let registry = TransformRegistry::new();
    let spec = read_model_config(model, &registry)?;
    let rows = design_rows_individual(&records, &spec)?;
    let fit = fit_named(&rows, coefficient_names(&spec, false), &FitOptions::default())?;
    let header = FileHeader::new(
        None,
        Some(digest_of(&[
            &data.display().to_string(),
            &poolreg::files::render_model_config(&spec),
        ])),
    );
    report_fit(&fit, &header, out_dir)
}

fn report_fit(fit: &FitResult, header: &FileHeader, out_dir: &Path) -> Result<(), AppError> {
    let report = render_fit_report(fit, 0.95, header);
    print!("{report}");
    write_out(out_dir, "fit.txt", &report)?;
    write_out(out_dir, "fit.json", &render_fit_json(fit, header))?;
    if !fit.converged {
        return Err(AppError::Numeric(format!(
            "fit did not converge within {} iterations",
            fit.iterations
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_pool_fit(
    data: &Path,
    model: &Path,
    size: &SizeArgs,
    seed: u64,
    research: bool,
    strict: bool,
    out_dir: &Path,
) -> Result<(), AppError> {
    let records = read_microdata(data)?;
    let registry = TransformRegistry::new();
    let spec = read_model_config(model, &registry)?;
    let policy = size_policy_from_args(size)?;
    warn_oversize(&policy);

    let (case_ids, control_ids) = split_ids(&records);
    let meta = StudyMeta::new(case_ids.len(), control_ids.len());
    let privacy = !research;
    let plan = build_plan(&meta, &case_ids, &control_ids, &policy, privacy, seed)?;

    let g_min = plan.smallest_size().unwrap_or(0);
    let warnings = poolreg::model::validate_model_spec(&spec, g_min, strict)?;
    for warning in &warnings {
        eprintln!("privacy warning: {}", warning.message);
    }

    let pooled = aggregate_centralized(&plan, &records, &spec)?;
    let design = design_rows_from_pooled(&pooled, spec.include_baseline);
    let fit = fit_named(&design, coefficient_names(&spec, true), &FitOptions::default())?;

    let header = FileHeader::new(
        Some(seed),
        Some(digest_of(&[
            &data.display().to_string(),
            &poolreg::files::render_model_config(&spec),
            &format!("{policy:?} research={research} strict={strict}"),
        ])),
    );
    write_out(out_dir, "plan.csv", &render_plan_csv(&plan, &header))?;
    write_out(
        out_dir,
        "pooled.csv",
        &render_pooled_csv(&pooled, &spec.term_labels(), &header),
    )?;
    report_fit(&fit, &header, out_dir)
}

pub fn cmd_coordinator(config_path: &Path) -> Result<(), AppError> {
    let text = std::fs::read_to_string(config_path)?;
    let file: CoordinatorFile =
        toml::from_str(&text).map_err(|e| AppError::Validation(e.to_string()))?;
    let registry = TransformRegistry::new();
    let spec = read_model_config(&relative_to(config_path, &file.model), &registry)?;
    let policy = parse_size_text(&file.pool_size).map_err(AppError::Validation)?;
    warn_oversize(&policy);
    let mask_mode = parse_mask_mode(file.mask_mode.as_deref()).map_err(AppError::Validation)?;

    let cfg = CoordinatorConfig {
        session_id: file.session_id.clone(),
        roster: file.roster.clone(),
        spec: spec.clone(),
        policy,
        privacy_mode: file.privacy,
        strict_guard: file.strict,
        mask_mode,
        seed: file.seed,
        fit_options: FitOptions::default(),
    };
    let coordinator = Coordinator::new(cfg)?;
    let header = FileHeader::new(Some(file.seed), Some(digest_of(&[&text])));
    let out_dir = relative_to(config_path, &file.out_dir);

    eprintln!(
        "coordinator: session {} listening on {}, waiting for {:?}",
        file.session_id, file.listen_addr, file.roster
    );
    let timeout = Duration::from_secs(file.timeout_secs);
    match run_coordinator_socket(coordinator, &file.listen_addr, timeout) {
        Ok((outcome, transcript)) => {
            write_transcript(&out_dir, &transcript)?;
            write_out(
                &out_dir,
                "plan.csv",
                &render_plan_csv(&outcome.plan, &header),
            )?;
            write_out(
                &out_dir,
                "pooled.csv",
                &render_pooled_csv(&outcome.pooled, &spec.term_labels(), &header),
            )?;
            for warning in &outcome.warnings {
                eprintln!("privacy warning: {}", warning.message);
            }
            report_fit(&outcome.fit, &header, &out_dir)
        }
        Err((error, transcript)) => {
            write_transcript(&out_dir, &transcript)?;
            Err(error.into())
        }
    }
}

fn write_transcript(out_dir: &Path, transcript: &[TranscriptEntry]) -> Result<(), AppError> {
    write_out(out_dir, "transcript.jsonl", &transcript_to_jsonl(transcript))
}

pub fn cmd_node(config_path: &Path) -> Result<(), AppError> {
    let text = std::fs::read_to_string(config_path)?;
    let file: NodeFile = toml::from_str(&text).map_err(|e| AppError::Validation(e.to_string()))?;
    let records = read_microdata(&relative_to(config_path, &file.data))?;
    let out_dir = relative_to(config_path, &file.out_dir);

    let cfg = NodeConfig {
        session_id: file.session_id.clone(),
        node_id: file.node_id.clone(),
        records,
        registry: TransformRegistry::new(),
        mask_seed: file.mask_seed,
        listen_addr: Some(file.listen_addr.clone()),
    };
    eprintln!(
        "node {}: session {}, listening on {}, coordinator {}",
        file.node_id, file.session_id, file.listen_addr, file.coordinator_addr
    );
    let timeout = Duration::from_secs(file.timeout_secs);
    match run_node_socket(cfg, &file.coordinator_addr, timeout) {
        Ok((phase, transcript)) => {
            write_transcript(&out_dir, &transcript)?;
            eprintln!("node {}: finished as {phase:?}", file.node_id);
            if phase == poolreg::protocol::NodePhase::Done {
                Ok(())
            } else {
                Err(AppError::Protocol(format!(
                    "node finished as {phase:?}; see the session error from the coordinator"
                )))
            }
        }
        Err((error, transcript)) => {
            write_transcript(&out_dir, &transcript)?;
            Err(error.into())
        }
    }
}

pub fn cmd_simulate(
    reps: usize,
    subjects: usize,
    sizes: &str,
    seed: u64,
    scatter_g: Option<usize>,
    out_dir: &Path,
) -> Result<(), AppError> {
    let pool_sizes = parse_size_list(sizes).map_err(AppError::Validation)?;
    let config = SimConfig {
        n_subjects: subjects,
        n_reps: reps,
        pool_sizes: pool_sizes.clone(),
        seed,
        ..SimConfig::default()
    };
    let summary = run_replication(&config)?;
    let header = FileHeader::new(Some(seed), Some(digest_of(&[&format!("{config:?}")])));
    let table = render_results_table(&summary);
    print!("{table}");
    write_out(out_dir, "results.txt", &table)?;
    write_out(out_dir, "results.csv", &render_results_csv(&summary, &header))?;
    write_out(out_dir, "per_rep.csv", &render_per_rep_csv(&summary, &header))?;

    let scatter_against = scatter_g.or_else(|| pool_sizes.iter().max().copied());
    if let Some(g) = scatter_against {
        let report = scatter_report(&summary, "unpooled", &format!("g={g}"))?;
        let mut csv = header.render();
        csv.push_str("parameter,unpooled,pooled,slope,intercept\n");
        for param in &report.parameters {
            for (a, b) in &param.pairs {
                csv.push_str(&format!(
                    "{},{a},{b},{},{}\n",
                    param.name,
                    param.slope.map(|s| s.to_string()).unwrap_or_default(),
                    param.intercept.map(|s| s.to_string()).unwrap_or_default(),
                ));
            }
        }
        write_out(out_dir, &format!("scatter_g{g}.csv"), &csv)?;
    }
    for arm in &summary.arms {
        if arm.failed_reps > 0 {
            eprintln!(
                "warning: arm {} had {} failed replicates (excluded from means)",
                arm.arm, arm.failed_reps
            );
        }
    }
    Ok(())
}

pub fn cmd_gen_data(subjects: usize, seed: u64, out: &Path) -> Result<(), AppError> {
    let config = SimConfig {
        n_subjects: subjects,
        seed,
        ..SimConfig::default()
    };
    config.validate().map_err(AppError::from)?;
    let records = generate_cohort(&config, 0);
    let header = FileHeader::new(Some(seed), Some(digest_of(&[&format!("{config:?}")])));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, render_microdata(&records, &header))?;
    let cases = records.iter().filter(|r| r.is_case()).count();
    eprintln!(
        "wrote {} subjects ({cases} cases) to {}",
        records.len(),
        out.display()
    );
    Ok(())
}
