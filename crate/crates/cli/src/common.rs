//! Error classification, configuration loading and shared output helpers.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use metastyle::experiment::{mean_scores, DomainEval};
use metastyle::{Error, TrainConfig};

use crate::table;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Domain(_) => EXIT_USAGE,
                Error::Numeric(_) => EXIT_NUMERIC,
                Error::Dimension(_) | Error::Shape(_) | Error::Data(_) | Error::Parse(_) | Error::Load { .. } | Error::Io(_) => EXIT_DATA,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Defaults, then the config file, then `--set` overrides, then `--seeds`.
pub fn load_config(file: Option<&Path>, sets: &[String], seeds: Option<&[u64]>) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    for s in sets {
        cfg.apply_override(s)?;
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds.to_vec();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub const EVAL_CSV_HEADER: &str = "domain,dice,hausdorff";

/// Writes `eval.csv` and `eval.txt` (one row per domain plus an average row)
/// and returns the text table.
pub fn write_eval(dir: &Path, evals: &[DomainEval]) -> CliResult<String> {
    let (dice, hd) = mean_scores(evals);
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    let mut rows = Vec::with_capacity(evals.len() + 1);
    for e in evals {
        csv.push_str(&format!("{},{},{}\n", e.name, e.dice, e.hausdorff));
        rows.push(vec![e.name.clone(), table::f4(e.dice), table::f2(e.hausdorff)]);
    }
    csv.push_str(&format!("average,{dice},{hd}\n"));
    rows.push(vec!["average".into(), table::f4(dice), table::f2(hd)]);
    let text = table::render(&["domain", "dice", "hd_px"], &rows);
    fs::write(dir.join("eval.csv"), csv)?;
    fs::write(dir.join("eval.txt"), &text)?;
    Ok(text)
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}
