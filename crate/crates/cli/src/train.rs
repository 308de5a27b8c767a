use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use metastyle::backbone::{read_checkpoint, write_checkpoint};
use metastyle::config::Precision;
use metastyle::experiment::{evaluate_heldout, finish_run, prepare_data, train_meta_from};
use metastyle::fdrt::FdrtRound;
use metastyle::meta_loop::EpochRecord;
use metastyle::{Error, Scalar, SegModel, StyleBank, TrainConfig};

use crate::common::{prepare_out_dir, run_dir, write_eval, CliError, CliResult};
use crate::scenario_io::{load_scenario, read_info};
use crate::table;

pub const CHECKPOINT_FILE: &str = "checkpoint.msck";
pub const BANK_FILE: &str = "style_bank.msbk";
pub const SUMMARY_CSV_HEADER: &str = "seed,pre_fdrt_val,final_val,heldout_dice,heldout_hd";

pub struct TrainArgs<'a> {
    pub data_dir: &'a Path,
    pub out_dir: &'a Path,
    pub style_bank: Option<&'a Path>,
    pub force: bool,
}

/// Per-seed headline numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub pre_fdrt_val: f64,
    pub final_val: f64,
    pub heldout_dice: f64,
    pub heldout_hd: f64,
    pub domain_dice: Vec<f64>,
}

/// Pins the scenario keys of `cfg` to what is actually on disk.
pub fn sync_scenario(cfg: &mut TrainConfig, data_dir: &Path) -> CliResult<()> {
    let info = read_info(data_dir)?;
    cfg.scenario = info.kind;
    cfg.image_size = info.image_size;
    cfg.data_seed = info.seed;
    cfg.validate()?;
    Ok(())
}

pub fn run(mut cfg: TrainConfig, args: &TrainArgs) -> CliResult<Vec<SeedSummary>> {
    sync_scenario(&mut cfg, args.data_dir)?;
    prepare_out_dir(args.out_dir, args.force)?;
    fs::write(args.out_dir.join("config.resolved"), cfg.to_text())?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(&cfg, args),
        Precision::F64 => run_typed::<f64>(&cfg, args),
    }
}

fn run_typed<T: Scalar>(cfg: &TrainConfig, args: &TrainArgs) -> CliResult<Vec<SeedSummary>> {
    let (info, splits) = load_scenario::<T>(args.data_dir)?;
    let initial_bank = match args.style_bank {
        Some(p) => StyleBank::<T>::read_file(p)?,
        None => StyleBank::new(),
    };
    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = run_dir(args.out_dir, seed);
        fs::create_dir_all(&dir)?;
        let mut log = BufWriter::new(File::create(dir.join("epochs.csv"))?);
        writeln!(log, "{}", EpochRecord::CSV_HEADER)?;
        let mut io_err: Option<std::io::Error> = None;
        let mut on_epoch = |recs: &[EpochRecord]| {
            for r in recs {
                if let Err(e) = writeln!(log, "{}", r.to_csv_row()) {
                    io_err.get_or_insert(e);
                }
            }
            if let Err(e) = log.flush() {
                io_err.get_or_insert(e);
            }
            if let Some(first) = recs.first() {
                let n = recs.len() as f64;
                let total = recs.iter().map(|r| r.l_total).sum::<f64>() / n;
                let dice = recs.iter().map(|r| r.l_dice).sum::<f64>() / n;
                eprintln!("seed {seed} epoch {}: L_total {total:.4} L_dice {dice:.4}", first.epoch);
            }
        };
        let data = prepare_data(&splits, cfg, seed)?;
        let stage = train_meta_from(cfg, &data, seed, initial_bank.clone(), &mut on_epoch)?;
        let out = finish_run(cfg, &data, seed, stage, &mut on_epoch)?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        drop(log);

        let mut fdrt = format!("{}\n", FdrtRound::CSV_HEADER);
        for r in &out.fdrt_rounds {
            for row in r.csv_rows() {
                fdrt.push_str(&row);
                fdrt.push('\n');
            }
        }
        fs::write(dir.join("fdrt.csv"), fdrt)?;
        let mut seed_cfg = cfg.clone();
        seed_cfg.seeds = vec![seed];
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &out.model, &seed_cfg.to_text())?;
        out.bank.write_file(&dir.join(BANK_FILE))?;
        write_eval(&dir, &out.heldout)?;
        let (heldout_dice, heldout_hd) = out.heldout_mean();
        eprintln!("seed {seed}: held-out Dice {heldout_dice:.4}, HD {heldout_hd:.2}");
        summaries.push(SeedSummary {
            seed,
            pre_fdrt_val: out.pre_fdrt_val,
            final_val: out.final_val,
            heldout_dice,
            heldout_hd,
            domain_dice: out.heldout.iter().map(|e| e.dice).collect(),
        });
    }
    let targets = &info.domains[1..];
    let text = write_summary(args.out_dir, targets, &summaries)?;
    print!("{text}");
    Ok(summaries)
}

/// `summary.csv` and `summary.txt`: one row per seed, then mean and sample
/// standard deviation rows.
fn write_summary(out: &Path, targets: &[String], rows: &[SeedSummary]) -> CliResult<String> {
    let mut header: Vec<String> = SUMMARY_CSV_HEADER.split(',').map(str::to_string).collect();
    header.extend(targets.iter().map(|t| format!("{t}_dice")));
    let values: Vec<Vec<f64>> = rows
        .iter()
        .map(|s| {
            let mut v = vec![s.pre_fdrt_val, s.final_val, s.heldout_dice, s.heldout_hd];
            v.extend(&s.domain_dice);
            v
        })
        .collect();
    let cols = header.len() - 1;
    let column = |j: usize| values.iter().map(|v| v[j]).collect::<Vec<f64>>();
    let means: Vec<f64> = (0..cols).map(|j| table::mean(&column(j))).collect();
    let stds: Vec<f64> = (0..cols).map(|j| table::std_dev(&column(j))).collect();

    let mut csv = header.join(",") + "\n";
    let mut text_rows = Vec::new();
    let mut push = |label: String, v: &[f64]| {
        csv.push_str(&label);
        for x in v {
            csv.push_str(&format!(",{x}"));
        }
        csv.push('\n');
        let mut row = vec![label];
        row.extend(v.iter().map(|&x| table::f4(x)));
        text_rows.push(row);
    };
    for (s, v) in rows.iter().zip(&values) {
        push(s.seed.to_string(), v);
    }
    push("mean".into(), &means);
    push("std".into(), &stds);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let text = table::render(&header_refs, &text_rows);
    fs::write(out.join("summary.csv"), csv)?;
    fs::write(out.join("summary.txt"), &text)?;
    Ok(text)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data_dir: &'a Path,
    pub out_dir: Option<&'a Path>,
    pub style_bank: Option<&'a Path>,
}

/// Evaluates a checkpoint on the held-out test splits. `expected` is the
/// configuration the caller asked for, if any; its architecture must match.
pub fn eval(expected: Option<&TrainConfig>, args: &EvalArgs) -> CliResult<String> {
    let probe = read_checkpoint::<f64>(args.checkpoint)?;
    if let Some(cfg) = expected {
        let a = probe.model.arch();
        if (cfg.depth, cfg.base_channels) != (a.depth, a.base_channels) {
            return Err(CliError::Core(Error::Config(format!(
                "checkpoint/config mismatch: checkpoint has depth {} and {} base channels, config asks for {} and {}",
                a.depth, a.base_channels, cfg.depth, cfg.base_channels
            ))));
        }
    }
    match probe.scalar.as_str() {
        "f32" => eval_typed(read_checkpoint::<f32>(args.checkpoint)?.model, args),
        _ => eval_typed(probe.model, args),
    }
}

fn eval_typed<T: Scalar>(model: SegModel<T>, args: &EvalArgs) -> CliResult<String> {
    let (info, splits) = load_scenario::<T>(args.data_dir)?;
    let arch = model.arch();
    if arch.num_classes != info.classes {
        return Err(CliError::Core(Error::Config(format!(
            "checkpoint/config mismatch: checkpoint predicts {} classes, data has {}",
            arch.num_classes, info.classes
        ))));
    }
    arch.check_spatial(info.image_size, info.image_size)
        .map_err(|e| CliError::Core(Error::Config(format!("checkpoint/config mismatch: {e}"))))?;
    if let Some(p) = args.style_bank {
        let bank = StyleBank::<T>::read_file(p)?;
        if let Some(c) = bank.channels() {
            if c != arch.hook_channels() {
                return Err(CliError::Core(Error::Config(format!(
                    "style bank holds {c}-channel statistics, checkpoint's style layer has {}",
                    arch.hook_channels()
                ))));
            }
        }
        eprintln!("style bank: {} domains", bank.len());
    }
    let targets: Vec<_> = splits[1..].iter().map(|d| d.test.clone()).collect();
    let evals = evaluate_heldout(&model, &targets)?;
    let out = match args.out_dir {
        Some(d) => d.to_path_buf(),
        None => args
            .checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| ".".into()),
    };
    fs::create_dir_all(&out)?;
    let text = write_eval(&out, &evals)?;
    print!("{text}");
    Ok(text)
}
