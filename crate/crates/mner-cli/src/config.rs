//! Run-configuration file: a flat key-value format with sections.
//!
//! Grammar (also documented in the README):
//! - UTF-8, line oriented; `#` starts a comment (full line or trailing).
//! - A section header is `[name]`; keys before any header are an error.
//! - Entries are `key = value`; values are trimmed, lists are comma-separated.
//! - Unknown sections or keys are errors, naming the offending line.
//!
//! Sections and keys:
//! - `[data]`: `input` (CSV path), `area` (area-id column), `responses`
//!   (list of k response columns).
//! - `[covariates]`: one key per response name, value its covariate column
//!   list; an intercept is always added per response.
//! - `[target]`: `source` = `sample_mean` (default) or `file`; `file` = path
//!   to a per-area target CSV when source is `file`.
//! - `[output]`: `dir` = output directory. The environment variable
//!   `MNER_OUT_DIR` overrides it; the `--out` flag overrides both.
//! - `[model]`: `alpha`, `seed`.
//! - `[simulate]`: `preset` (same grammar as `--preset`), plus optional
//!   overrides `seed`, `workers`, `replications_a`, `replications_b`, `alpha`.

use std::path::{Path, PathBuf};

use mner::sim::{EffectDist, Preset, SimConfig};

use crate::error::CliError;

/// Where the prediction target c_a comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSource {
    /// c_a = within-area mean regressor block.
    SampleMean,
    /// Per-area k x s matrices from a CSV (columns `area, c_11 .. c_ks`).
    File(PathBuf),
}

/// The `[data]` + `[covariates]` sections: what to read and how to build
/// the block design.
#[derive(Debug, Clone)]
pub struct DataSpec {
    pub input: Option<PathBuf>,
    pub area_column: String,
    pub responses: Vec<String>,
    /// Covariate columns per response, aligned with `responses`.
    pub covariates: Vec<Vec<String>>,
}

/// The `[simulate]` section.
#[derive(Debug, Clone, Default)]
pub struct SimSection {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub replications_a: Option<usize>,
    pub replications_b: Option<usize>,
    pub alpha: Option<f64>,
}

/// Parsed run configuration; field presence is validated per subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub data: Option<DataSpec>,
    pub target: Option<TargetSource>,
    pub out_dir: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub simulate: SimSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |line: usize, msg: &str| CliError::Input(format!("config line {line}: {msg}"));

        let mut section = String::new();
        let mut data_input: Option<PathBuf> = None;
        let mut area: Option<String> = None;
        let mut responses: Option<Vec<String>> = None;
        let mut covariates: Vec<(String, Vec<String>)> = Vec::new();
        let mut target_source: Option<String> = None;
        let mut target_file: Option<PathBuf> = None;
        let mut cfg = RunConfig::default();
        let mut saw_data = false;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| bad(line, "unterminated section header"))?
                    .trim();
                match name {
                    "data" | "covariates" | "target" | "output" | "model" | "simulate" => {
                        section = name.to_string();
                        if name == "data" {
                            saw_data = true;
                        }
                    }
                    other => return Err(bad(line, &format!("unknown section [{other}]"))),
                }
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(line, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(bad(line, "empty key or value"));
            }
            let list = || -> Vec<String> {
                value
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect()
            };
            match (section.as_str(), key) {
                ("", _) => return Err(bad(line, "entry before any [section]")),
                ("data", "input") => data_input = Some(PathBuf::from(value)),
                ("data", "area") => area = Some(value.to_string()),
                ("data", "responses") => responses = Some(list()),
                ("covariates", resp) => covariates.push((resp.to_string(), list())),
                ("target", "source") => target_source = Some(value.to_string()),
                ("target", "file") => target_file = Some(PathBuf::from(value)),
                ("output", "dir") => cfg.out_dir = Some(PathBuf::from(value)),
                ("model", "alpha") => cfg.alpha = Some(parse_num(value, line, "alpha")?),
                ("model", "seed") => cfg.seed = Some(parse_num(value, line, "seed")?),
                ("simulate", "preset") => cfg.simulate.preset = Some(value.to_string()),
                ("simulate", "seed") => cfg.simulate.seed = Some(parse_num(value, line, "seed")?),
                ("simulate", "workers") => {
                    cfg.simulate.workers = Some(parse_num(value, line, "workers")?)
                }
                ("simulate", "replications_a") => {
                    cfg.simulate.replications_a = Some(parse_num(value, line, "replications_a")?)
                }
                ("simulate", "replications_b") => {
                    cfg.simulate.replications_b = Some(parse_num(value, line, "replications_b")?)
                }
                ("simulate", "alpha") => {
                    cfg.simulate.alpha = Some(parse_num(value, line, "alpha")?)
                }
                (sec, key) => {
                    return Err(bad(
                        line,
                        &format!("unknown key `{key}` in section [{sec}]"),
                    ))
                }
            }
        }

        cfg.target = match target_source.as_deref() {
            None | Some("sample_mean") => {
                if let Some(f) = target_file {
                    if target_source.is_none() {
                        Some(TargetSource::File(f))
                    } else {
                        return Err(CliError::Input(
                            "config: [target] file given but source = sample_mean".into(),
                        ));
                    }
                } else {
                    Some(TargetSource::SampleMean)
                }
            }
            Some("file") => Some(TargetSource::File(target_file.ok_or_else(|| {
                CliError::Input("config: [target] source = file needs a `file` path".into())
            })?)),
            Some(other) => {
                return Err(CliError::Input(format!(
                    "config: unknown target source `{other}` (expected sample_mean or file)"
                )))
            }
        };

        if saw_data {
            let area_column =
                area.ok_or_else(|| CliError::Input("config: [data] is missing `area`".into()))?;
            let responses = responses
                .ok_or_else(|| CliError::Input("config: [data] is missing `responses`".into()))?;
            if responses.is_empty() {
                return Err(CliError::Input("config: `responses` list is empty".into()));
            }
            let mut per_response = Vec::with_capacity(responses.len());
            for resp in &responses {
                let cols = covariates
                    .iter()
                    .find(|(name, _)| name == resp)
                    .map(|(_, cols)| cols.clone())
                    .ok_or_else(|| {
                        CliError::Input(format!("config: [covariates] has no entry for `{resp}`"))
                    })?;
                if cols.is_empty() {
                    return Err(CliError::Input(format!(
                        "config: covariate list for `{resp}` is empty"
                    )));
                }
                per_response.push(cols);
            }
            for (name, _) in &covariates {
                if !responses.contains(name) {
                    return Err(CliError::Input(format!(
                        "config: [covariates] names `{name}`, which is not a declared response"
                    )));
                }
            }
            cfg.data = Some(DataSpec {
                input: data_input,
                area_column,
                responses,
                covariates: per_response,
            });
        } else if !covariates.is_empty() {
            return Err(CliError::Input(
                "config: [covariates] given without a [data] section".into(),
            ));
        }

        Ok(cfg)
    }

    /// The `[data]` section, required by fit/predict/interval.
    pub fn data_required(&self) -> Result<&DataSpec, CliError> {
        self.data
            .as_ref()
            .ok_or_else(|| CliError::Input("config has no [data] section".into()))
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Input(format!("config line {line}: bad value for {key}: {value}")))
}

/// Parses a simulate preset name `paper-k<k>-rho<digits>-<dist>[-<scale>]`.
///
/// `rho` digits read as a decimal with the point after the first digit
/// (rho05 = 0.5, rho025 = 0.25); `dist` is normal | t | chisq; the optional
/// scale is full | acceptance | smoke (default acceptance).
pub fn parse_preset(name: &str) -> Result<(Preset, usize, f64, EffectDist), CliError> {
    let bad = |msg: &str| CliError::Input(format!("preset `{name}`: {msg}"));
    let parts: Vec<&str> = name.split('-').collect();
    if parts.len() < 4 || parts.len() > 5 {
        return Err(bad("expected paper-k<k>-rho<digits>-<dist>[-<scale>]"));
    }
    if parts[0] != "paper" {
        return Err(bad("only the `paper` design family exists"));
    }
    let k: usize = parts[1]
        .strip_prefix('k')
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| bad("bad k segment"))?;
    let digits = parts[2]
        .strip_prefix("rho")
        .filter(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
        .ok_or_else(|| bad("bad rho segment"))?;
    let rho: f64 = format!("{}.{}", &digits[..1], &digits[1..])
        .parse()
        .map_err(|_| bad("bad rho segment"))?;
    let dist = match parts[3] {
        "normal" => EffectDist::Normal,
        "t" => EffectDist::StudentT,
        "chisq" => EffectDist::ChiSquare,
        _ => return Err(bad("dist must be normal, t, or chisq")),
    };
    let scale = match parts.get(4) {
        None | Some(&"acceptance") => Preset::Acceptance,
        Some(&"full") => Preset::Full,
        Some(&"smoke") => Preset::Smoke,
        Some(other) => return Err(bad(&format!("unknown scale `{other}`"))),
    };
    Ok((scale, k, rho, dist))
}

/// Builds the SimConfig for `simulate` from preset name, config overrides,
/// and flag overrides (flags win).
pub struct SimOverrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub alpha: Option<f64>,
}

pub fn resolve_sim_config(
    preset_flag: Option<&str>,
    cfg: &RunConfig,
    over: &SimOverrides,
) -> Result<SimConfig, CliError> {
    let name = preset_flag
        .or(cfg.simulate.preset.as_deref())
        .ok_or_else(|| {
            CliError::Input("simulate needs --preset or a [simulate] preset entry".into())
        })?;
    let (scale, k, rho, dist) = parse_preset(name)?;
    let seed = over.seed.or(cfg.simulate.seed).or(cfg.seed).unwrap_or(0);
    let mut sim = SimConfig::preset(scale, k, rho, dist, seed)?;
    if let Some(r) = cfg.simulate.replications_a {
        sim.replications_a = r;
    }
    if let Some(r) = cfg.simulate.replications_b {
        sim.replications_b = r;
    }
    if let Some(a) = over.alpha.or(cfg.simulate.alpha).or(cfg.alpha) {
        sim.alpha = a;
    }
    sim.workers = over.workers.or(cfg.simulate.workers);
    sim.validate()?;
    Ok(sim)
}
