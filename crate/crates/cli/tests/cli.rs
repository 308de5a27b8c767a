use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_metastyle");

/// Settings small enough for a test run in a few seconds.
const TINY: &[&str] = &[
    "image_size=16",
    "depth=2",
    "base_channels=2",
    "epochs_meta=1",
    "episodes_per_domain=1",
    "batch_size=2",
    "epochs_fdrt=1",
    "fdrt_max_rounds=1",
    "num_aug_domains=1",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(BIN).args(args).env(key, value).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn with_sets(base: &[&str], sets: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    for s in sets {
        v.push("--set".into());
        v.push(s.to_string());
    }
    v
}

fn run_owned(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn generate(dir: &Path) {
    let d = dir.to_str().unwrap();
    let o = run_owned(&with_sets(&["generate-data", "--out-dir", d], &["image_size=16"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(data: &Path, out: &Path, extra: &[&str], seeds: &str) -> Output {
    let mut sets: Vec<&str> = TINY.to_vec();
    sets.extend_from_slice(extra);
    run_owned(&with_sets(
        &["train", "--data-dir", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--seeds", seeds],
        &sets,
    ))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    generate(a.path());
    generate(b.path());
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    assert_eq!(fa.len(), fb.len());
    assert!(fa.len() > 100);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a.path()).unwrap(), y.strip_prefix(b.path()).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn generate_refuses_non_empty_dir_without_force() {
    let dir = TempDir::new().unwrap();
    generate(dir.path());
    let d = dir.path().to_str().unwrap();
    let o = run_owned(&with_sets(&["generate-data", "--out-dir", d], &["image_size=16"]));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    let o = run_owned(&with_sets(&["generate-data", "--out-dir", d, "--force", "--num-aug-domains", "0"], &["image_size=16"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!dir.path().join("augmented").exists());
}

#[test]
fn generate_without_output_path_is_usage_error() {
    assert_eq!(code(&run(&["generate-data"])), 1);
}

#[test]
fn abdominal_scenario_has_five_classes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run_owned(&with_sets(&["generate-data", "--out-dir", d, "--scenario", "abdominal-like"], &["image_size=16"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("scenario")).unwrap();
    assert!(text.contains("classes=5"));
    assert!(text.contains("kind=abdominal-like"));
}

#[test]
fn bad_arguments_and_config_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&run(&["generate-data", "--out-dir", d, "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&run(&["generate-data", "--out-dir", d, "--set", "alpha=2"])), 1);
    assert_eq!(code(&run(&["generate-data", "--out-dir", d, "--strength", "1.5"])), 1);
    assert_eq!(code(&run(&["generate-data", "--out-dir", d, "--config", "/nonexistent/cfg"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run_env(&["generate-data", "--out-dir", d], "METASTYLE_NUM_WORKERS", "zero")), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn config_file_is_overridden_by_set() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# tiny\nepochs_meta = 1\nlambda = 0.25\nalpha = 0.7\n").unwrap();
    let out = dir.path().join("out");
    let mut sets: Vec<&str> = TINY.to_vec();
    sets.push("alpha=0.3");
    let args = with_sets(
        &["train", "--data-dir", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--seeds", "0", "--config", cfg.to_str().unwrap()],
        &sets,
    );
    let o = run_owned(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("lambda = 0.25"));
    assert!(resolved.contains("alpha = 0.3"));
    assert!(resolved.contains("seeds = 0\n"));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = dir.path().join("run");
    let o = train(&data, &out, &[], "0,1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // per-seed rows, then mean and standard deviation
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<Vec<String>> = summary.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2][0], "mean");
    assert_eq!(rows[3][0], "std");
    for col in 1..rows[0].len() {
        let a: f64 = rows[0][col].parse().unwrap();
        let b: f64 = rows[1][col].parse().unwrap();
        let m: f64 = rows[2][col].parse().unwrap();
        let s: f64 = rows[3][col].parse().unwrap();
        assert!((m - (a + b) / 2.0).abs() < 1e-12);
        assert!((s - (a - b).abs() / 2f64.sqrt()).abs() < 1e-12);
    }

    // evaluation table: one row per held-out domain plus the average
    let seed_dir = out.join("seed-0");
    let ck = seed_dir.join("checkpoint.msck");
    let eval_dir = dir.path().join("eval");
    let o = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
        "--style-bank",
        seed_dir.join("style_bank.msbk").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(eval_dir.join("eval.txt")).unwrap();
    assert_eq!(table.lines().count(), 2 + 3 + 1);
    assert!(table.lines().last().unwrap().starts_with("average"));
    assert_eq!(
        fs::read_to_string(eval_dir.join("eval.csv")).unwrap(),
        fs::read_to_string(seed_dir.join("eval.csv")).unwrap()
    );
    assert!(stdout(&o).contains("average"));

    // config asking for another architecture
    let o = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
        "--set",
        "base_channels=4",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("mismatch"));

    // plots from one run directory
    let plots = dir.path().join("plots");
    let o = run(&["report", seed_dir.to_str().unwrap(), "--out-dir", plots.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pngs = fs::read_dir(&plots).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert!(pngs >= 3, "{pngs} plots");
}

#[test]
fn fixed_seed_reproduces_bitwise() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&data, &a, &[], "3")), 0);
    assert_eq!(code(&train(&data, &b, &[], "3")), 0);
    for f in ["summary.csv", "seed-3/epochs.csv", "seed-3/eval.csv", "seed-3/checkpoint.msck", "seed-3/style_bank.msbk"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn all_modules_off_runs_meta_base() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = dir.path().join("base");
    let o = train(&data, &out, &["mka=false", "metastyle=false", "fdrt=false"], "0");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let epochs = fs::read_to_string(out.join("seed-0/epochs.csv")).unwrap();
    for line in epochs.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[4], "0", "L_align off: {line}");
        assert_eq!(f[5], "0", "L_cons off: {line}");
    }
    assert_eq!(fs::read_to_string(out.join("seed-0/fdrt.csv")).unwrap().lines().count(), 1);
}

#[test]
fn divergence_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = dir.path().join("nan");
    let o = train(&data, &out, &["gamma=1e30", "beta=1e30"], "0");
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric"));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    fs::remove_dir_all(data.join("target-bright")).unwrap();
    let o = train(&data, &dir.path().join("out"), &[], "0");
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = train(&dir.path().join("nowhere"), &dir.path().join("out2"), &[], "0");
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn report_rejects_empty_and_malformed_logs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("plots");
    let empty = dir.path().join("epochs.csv");
    fs::write(&empty, "").unwrap();
    let o = run(&["report", empty.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "epoch,domain,L_total,L_dice,L_align,L_cons,w,delta_style,lr\n0,0,1,1,0,0,0,0,0.1\n1,0,oops,1,0,0,0,0,0.1\n").unwrap();
    let o = run(&["report", bad.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.csv:3"), "{}", stderr(&o));
}

#[test]
fn report_handles_constant_columns() {
    let dir = TempDir::new().unwrap();
    let run_dir = dir.path().join("flat");
    fs::create_dir_all(&run_dir).unwrap();
    let mut log = String::from("epoch,domain,L_total,L_dice,L_align,L_cons,w,delta_style,lr\n");
    for e in 0..4 {
        log.push_str(&format!("{e},0,0.5,0.5,0,0,0,0,0.01\n"));
    }
    fs::write(run_dir.join("epochs.csv"), log).unwrap();
    let out = dir.path().join("plots");
    let o = run(&["report", run_dir.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("flat_losses.png").is_file());
    assert!(out.join("flat_w.png").is_file());
    assert!(out.join("flat_delta_style.png").is_file());
}

#[test]
fn ablate_reports_both_tables() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = dir.path().join("abl");
    let args = with_sets(
        &["ablate", "--data-dir", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--seeds", "0"],
        TINY,
    );
    let o = run_owned(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 + 4);
    let text = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("Meta-Base ")));
    assert!(text.lines().any(|l| l.starts_with("FGML-DG ")));
    assert!(text.contains("w/o L_align, L_cons"));
}
