//! TOML configuration for coordinator and node processes.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use poolreg::pooling::SizePolicy;
use poolreg::securesum::MaskMode;

fn default_timeout() -> u64 {
    30
}

fn default_privacy() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Pool-size policy as written in config files and flags:
/// `"4"`, `"3,4"` or `"auto:5"`.
pub fn parse_size_text(text: &str) -> Result<SizePolicy, String> {
    let text = text.trim();
    if let Some(g) = text.strip_prefix("auto:") {
        let g: usize = g.trim().parse().map_err(|_| format!("bad auto size {g}"))?;
        return Ok(SizePolicy::auto(g));
    }
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [one] => Ok(SizePolicy::single(
            one.parse().map_err(|_| format!("bad pool size {one}"))?,
        )),
        [small, large] => Ok(SizePolicy::Pair {
            small: small.parse().map_err(|_| format!("bad pool size {small}"))?,
            large: large.parse().map_err(|_| format!("bad pool size {large}"))?,
        }),
        _ => Err(format!(
            "pool size must be \"g\", \"small,large\" or \"auto:g\", got {text:?}"
        )),
    }
}

pub fn parse_size_list(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad size {s:?}"))
        })
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorFile {
    pub session_id: String,
    pub listen_addr: String,
    pub roster: Vec<String>,
    /// Path to the model config, relative to this file.
    pub model: PathBuf,
    /// `"4"`, `"3,4"` or `"auto:5"`.
    pub pool_size: String,
    pub seed: u64,
    #[serde(default = "default_privacy")]
    pub privacy: bool,
    #[serde(default)]
    pub strict: bool,
    /// `"exact"` (default) or `"real"`.
    #[serde(default)]
    pub mask_mode: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeFile {
    pub session_id: String,
    pub node_id: String,
    pub listen_addr: String,
    pub coordinator_addr: String,
    /// Microdata CSV path, relative to this file.
    pub data: PathBuf,
    pub mask_seed: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

pub fn parse_mask_mode(text: Option<&str>) -> Result<MaskMode, String> {
    match text.unwrap_or("exact") {
        "exact" => Ok(MaskMode::Exact),
        "real" => Ok(MaskMode::real_default()),
        other => Err(format!("mask_mode must be \"exact\" or \"real\", got {other:?}")),
    }
}

/// Resolve a config-relative path.
pub fn relative_to(config_path: &Path, target: &Path) -> PathBuf {
    if target.is_absolute() {
        target.to_path_buf()
    } else {
        config_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(target)
    }
}
