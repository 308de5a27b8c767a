use std::fs;
use std::path::Path;

use metastyle::config::Precision;
use metastyle::experiment::{component_variants, loss_variants, run_ablation, AblationTable, Variant};
use metastyle::{Scalar, TrainConfig};

use crate::common::{prepare_out_dir, CliResult};
use crate::scenario_io::load_scenario;
use crate::table;
use crate::train::sync_scenario;

pub const RUNS_CSV_HEADER: &str = "seed,table,label,mka,metastyle,fdrt,l_align,l_cons,dice,hd";
pub const ABLATION_CSV_HEADER: &str = "table,label,mka,metastyle,fdrt,l_align,l_cons,dice,dice_std,hd,hd_std";

pub struct AblateArgs<'a> {
    pub data_dir: &'a Path,
    pub out_dir: &'a Path,
    pub force: bool,
}

/// One row of the report, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub dice: Vec<f64>,
    pub hd: Vec<f64>,
}

/// Component table rows followed by loss table rows.
pub fn report_variants() -> Vec<Variant> {
    component_variants().into_iter().chain(loss_variants()).collect()
}

fn flags(v: &Variant) -> (bool, bool, bool, bool, bool) {
    (v.mka, v.metastyle, v.fdrt, v.l_align, v.l_cons)
}

fn table_name(t: AblationTable) -> &'static str {
    match t {
        AblationTable::Components => "components",
        AblationTable::Losses => "losses",
    }
}

pub fn run(mut cfg: TrainConfig, args: &AblateArgs) -> CliResult<Vec<ReportRow>> {
    sync_scenario(&mut cfg, args.data_dir)?;
    prepare_out_dir(args.out_dir, args.force)?;
    fs::write(args.out_dir.join("config.resolved"), cfg.to_text())?;
    let rows = match cfg.precision {
        Precision::F32 => run_typed::<f32>(&cfg, args)?,
        Precision::F64 => run_typed::<f64>(&cfg, args)?,
    };
    let text = write_report(args.out_dir, &rows)?;
    print!("{text}");
    Ok(rows)
}

fn run_typed<T: Scalar>(cfg: &TrainConfig, args: &AblateArgs) -> CliResult<Vec<ReportRow>> {
    let (_, splits) = load_scenario::<T>(args.data_dir)?;
    let wanted = report_variants();
    // variants with identical switches are trained once
    let mut unique: Vec<Variant> = Vec::new();
    for v in &wanted {
        if !unique.iter().any(|u| flags(u) == flags(v)) {
            unique.push(v.clone());
        }
    }
    let mut rows: Vec<ReportRow> = wanted
        .iter()
        .map(|v| ReportRow {
            variant: v.clone(),
            dice: Vec::new(),
            hd: Vec::new(),
        })
        .collect();
    let mut runs = format!("{RUNS_CSV_HEADER}\n");
    for &seed in &cfg.seeds {
        let results = run_ablation(cfg, &splits, seed, &unique, &mut |r| {
            eprintln!("seed {seed} {:<32} held-out Dice {:.4} HD {:.2}", r.variant.label, r.mean_dice, r.mean_hd);
        })?;
        for row in rows.iter_mut() {
            let r = results
                .iter()
                .find(|r| flags(&r.variant) == flags(&row.variant))
                .expect("every wanted variant has a unique representative");
            row.dice.push(r.mean_dice);
            row.hd.push(r.mean_hd);
            let v = &row.variant;
            runs.push_str(&format!(
                "{seed},{},{},{},{},{},{},{},{},{}\n",
                table_name(v.table),
                table::csv_field(&v.label),
                v.mka,
                v.metastyle,
                v.fdrt,
                v.l_align,
                v.l_cons,
                r.mean_dice,
                r.mean_hd
            ));
        }
    }
    fs::write(args.out_dir.join("ablation_runs.csv"), runs)?;
    Ok(rows)
}

fn mark(b: bool) -> String {
    if b { "+" } else { "-" }.to_string()
}

/// `ablation.csv` plus `ablation.txt` with one table per ablation.
pub fn write_report(out: &Path, rows: &[ReportRow]) -> CliResult<String> {
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    let mut comp = Vec::new();
    let mut loss = Vec::new();
    for r in rows {
        let v = &r.variant;
        let (d, ds, h, hs) = (table::mean(&r.dice), table::std_dev(&r.dice), table::mean(&r.hd), table::std_dev(&r.hd));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{d},{ds},{h},{hs}\n",
            table_name(v.table),
            table::csv_field(&v.label),
            v.mka,
            v.metastyle,
            v.fdrt,
            v.l_align,
            v.l_cons
        ));
        match v.table {
            AblationTable::Components => comp.push(vec![v.label.clone(), mark(v.mka), mark(v.metastyle), mark(v.fdrt), table::f4(d), table::f2(h)]),
            AblationTable::Losses => loss.push(vec![v.label.clone(), mark(v.l_align), mark(v.l_cons), table::f4(d), table::f2(h)]),
        }
    }
    let mut text = String::from("Key components\n");
    text.push_str(&table::render(&["variant", "MKA", "MetaStyle", "FDRT", "avg_dice", "avg_hd"], &comp));
    text.push_str("\nAlignment losses\n");
    text.push_str(&table::render(&["variant", "L_align", "L_cons", "avg_dice", "avg_hd"], &loss));
    fs::write(out.join("ablation.csv"), csv)?;
    fs::write(out.join("ablation.txt"), &text)?;
    Ok(text)
}
