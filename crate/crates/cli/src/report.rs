//! Plots from the CSV logs written by `train`.
//!
//! Consumed columns:
//! - `epochs.csv`: `epoch, domain, L_total, L_dice, L_align, L_cons, w, delta_style`
//! - `eval.csv`: `domain, dice`
//! - `fdrt.csv`: `round, domain, dice`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use metastyle::Error;

use crate::common::CliResult;
use crate::plot::{bar_chart, line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogKind {
    Epochs,
    Eval,
    Fdrt,
}

impl LogKind {
    fn file_name(self) -> &'static str {
        match self {
            LogKind::Epochs => "epochs.csv",
            LogKind::Eval => "eval.csv",
            LogKind::Fdrt => "fdrt.csv",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            LogKind::Epochs => &["epoch", "domain", "L_total", "L_dice", "L_align", "L_cons", "w", "delta_style"],
            LogKind::Eval => &["domain", "dice"],
            LogKind::Fdrt => &["round", "domain", "dice"],
        }
    }

    fn detect(header: &[String]) -> Option<Self> {
        [LogKind::Epochs, LogKind::Fdrt, LogKind::Eval]
            .into_iter()
            .find(|k| k.required().iter().all(|c| header.iter().any(|h| h == c)))
    }
}

/// Parsed CSV with the line number of every data row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Csv {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> CliResult<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, head)) = lines.next() else {
            return Err(Error::Data(format!("{}: empty log", path.display())).into());
        };
        let header: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if fields.len() != header.len() {
                return Err(Error::Parse(format!(
                    "{}:{}: expected {} fields, found {}",
                    path.display(),
                    i + 1,
                    header.len(),
                    fields.len()
                ))
                .into());
            }
            rows.push((i + 1, fields));
        }
        if rows.is_empty() {
            return Err(Error::Data(format!("{}: log has no data rows", path.display())).into());
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn col(&self, name: &str) -> CliResult<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("{}: missing column {name:?}", self.path.display())).into())
    }

    /// Column values as numbers; a malformed entry names its line.
    pub fn numbers(&self, name: &str) -> CliResult<Vec<f64>> {
        let j = self.col(name)?;
        self.rows
            .iter()
            .map(|(line, f)| {
                f[j].parse::<f64>().map_err(|_| {
                    Error::Parse(format!("{}:{line}: column {name}: {:?} is not a number", self.path.display(), f[j])).into()
                })
            })
            .collect()
    }

    pub fn strings(&self, name: &str) -> CliResult<Vec<String>> {
        let j = self.col(name)?;
        Ok(self.rows.iter().map(|(_, f)| f[j].clone()).collect())
    }
}

/// A log file to plot and the prefix of its output files.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSource {
    pub stem: String,
    pub kind: LogKind,
    pub csv: Csv,
}

fn sanitize(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() { "run".into() } else { out }
}

fn stem_of(path: &Path) -> String {
    let dir = path.parent().and_then(Path::file_name).and_then(|s| s.to_str());
    sanitize(dir.unwrap_or("run"))
}

/// Appends `(path, explicit)`; logs found by directory search are not explicit.
fn logs_in_dir(dir: &Path, out: &mut Vec<(PathBuf, bool)>) -> CliResult<()> {
    for kind in [LogKind::Epochs, LogKind::Eval, LogKind::Fdrt] {
        let p = dir.join(kind.file_name());
        if p.is_file() {
            out.push((p, false));
        }
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .collect();
    subdirs.sort();
    for d in subdirs {
        logs_in_dir(&d, out)?;
    }
    Ok(())
}

/// Expands run directories (and their `seed-*` subdirectories) into log files.
/// Header-only logs inside a directory (e.g. `fdrt.csv` of a run without
/// retraining) are skipped; named files must contain data.
pub fn collect(paths: &[PathBuf]) -> CliResult<Vec<LogSource>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            logs_in_dir(p, &mut files)?;
        } else if p.is_file() {
            files.push((p.clone(), true));
        } else {
            return Err(Error::Load {
                path: p.clone(),
                reason: "no such file or directory".into(),
            }
            .into());
        }
    }
    let mut used: BTreeMap<(String, LogKind), usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(files.len());
    for (f, explicit) in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::Load {
            path: f.clone(),
            reason: e.to_string(),
        })?;
        if !explicit && text.lines().filter(|l| !l.trim().is_empty()).count() == 1 {
            continue;
        }
        let csv = Csv::parse(&f, &text)?;
        let kind = LogKind::detect(&csv.header)
            .ok_or_else(|| Error::Parse(format!("{}:1: unrecognized log header", f.display())))?;
        let base = stem_of(&f);
        let n = used.entry((base.clone(), kind)).or_insert(0);
        *n += 1;
        let stem = if *n == 1 { base } else { format!("{base}_{n}") };
        out.push(LogSource { stem, kind, csv });
    }
    if out.is_empty() {
        return Err(Error::Data("no epochs.csv, eval.csv or fdrt.csv logs with data found".into()).into());
    }
    Ok(out)
}

/// Per-epoch means over domains of one column.
fn epoch_means(epochs: &[f64], values: &[f64]) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for (&e, &v) in epochs.iter().zip(values) {
        let slot = acc.entry(e as i64).or_insert((0.0, 0));
        slot.0 += v;
        slot.1 += 1;
    }
    acc.into_iter().map(|(e, (s, n))| (e as f64, s / n as f64)).collect()
}

/// One series per domain.
fn per_domain(epochs: &[f64], domains: &[String], values: &[f64]) -> Vec<Series> {
    let mut by: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for ((&e, d), &v) in epochs.iter().zip(domains).zip(values) {
        by.entry(d.as_str()).or_default().push((e, v));
    }
    by.into_iter()
        .map(|(d, points)| Series {
            label: format!("domain {d}"),
            points,
        })
        .collect()
}

fn plot_epochs(src: &LogSource, out: &Path) -> CliResult<Vec<PathBuf>> {
    let csv = &src.csv;
    let epochs = csv.numbers("epoch")?;
    let domains = csv.strings("domain")?;
    let losses: Vec<Series> = ["L_total", "L_dice", "L_align", "L_cons"]
        .iter()
        .map(|name| {
            Ok(Series {
                label: name.to_string(),
                points: epoch_means(&epochs, &csv.numbers(name)?),
            })
        })
        .collect::<CliResult<_>>()?;
    let mut written = Vec::new();
    let p = out.join(format!("{}_losses.png", src.stem));
    line_chart(&p, "LOSSES PER EPOCH", &losses)?;
    written.push(p);
    for (col, title) in [("w", "DYNAMIC WEIGHT W"), ("delta_style", "STYLE GAP DELTA")] {
        let p = out.join(format!("{}_{col}.png", src.stem));
        line_chart(&p, title, &per_domain(&epochs, &domains, &csv.numbers(col)?))?;
        written.push(p);
    }
    Ok(written)
}

fn plot_eval(src: &LogSource, out: &Path) -> CliResult<Vec<PathBuf>> {
    let names = src.csv.strings("domain")?;
    let dice = src.csv.numbers("dice")?;
    let bars: Vec<(String, f64)> = names.into_iter().zip(dice).filter(|(n, _)| n != "average").collect();
    let p = out.join(format!("{}_dice.png", src.stem));
    bar_chart(&p, "HELD-OUT DICE PER DOMAIN", &bars)?;
    Ok(vec![p])
}

fn plot_fdrt(src: &LogSource, out: &Path) -> CliResult<Vec<PathBuf>> {
    let rounds = src.csv.numbers("round")?;
    let domains = src.csv.strings("domain")?;
    let dice = src.csv.numbers("dice")?;
    let bars: Vec<(String, f64)> = rounds
        .iter()
        .zip(&domains)
        .zip(dice)
        .map(|((r, d), v)| (format!("r{r} d{d}"), v))
        .collect();
    let p = out.join(format!("{}_fdrt.png", src.stem));
    bar_chart(&p, "VALIDATION DICE BEFORE RETRAINING", &bars)?;
    Ok(vec![p])
}

/// Writes every plot for `paths` into `out` and returns the files written.
pub fn run(paths: &[PathBuf], out: &Path) -> CliResult<Vec<PathBuf>> {
    let sources = collect(paths)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for s in &sources {
        written.extend(match s.kind {
            LogKind::Epochs => plot_epochs(s, out)?,
            LogKind::Eval => plot_eval(s, out)?,
            LogKind::Fdrt => plot_fdrt(s, out)?,
        });
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}
