//! Runs the component and loss ablations on the synthetic scenario.
//!
//! `cargo run --release --example ablation -- [key=value ...]`

use std::time::Instant;

use metastyle::data::{make_scenario, ScenarioKind, ScenarioSizes};
use metastyle::experiment::{benchmark_config, component_variants, loss_variants, run_ablation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = benchmark_config();
    let mut only: Option<Vec<String>> = None;
    for arg in std::env::args().skip(1) {
        if let Some(list) = arg.strip_prefix("only=") {
            only = Some(list.split(',').map(str::to_string).collect());
        } else {
            cfg.apply_override(&arg)?;
        }
    }
    cfg.validate()?;
    let splits = make_scenario::<f32>(ScenarioKind::parse(&cfg.scenario)?, ScenarioSizes::default(), cfg.image_size, cfg.data_seed)?;
    let mut variants: Vec<_> = component_variants().into_iter().chain(loss_variants().into_iter().skip(1)).collect();
    if let Some(keep) = &only {
        variants.retain(|v| keep.iter().any(|k| v.label == *k));
    }
    let t = Instant::now();
    run_ablation(&cfg, &splits, cfg.seeds[0], &variants, &mut |row| {
        let per: Vec<String> = row.heldout.iter().map(|d| format!("{}={:.3}", d.name, d.dice)).collect();
        println!(
            "{:<32} dice {:.4} hd {:6.2} val {:.3}->{:.3} [{}] ({:.0}s)",
            row.variant.label,
            row.mean_dice,
            row.mean_hd,
            row.pre_fdrt_val,
            row.final_val,
            per.join(" "),
            t.elapsed().as_secs_f64()
        );
    })?;
    Ok(())
}
