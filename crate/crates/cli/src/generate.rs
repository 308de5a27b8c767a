use std::fs;
use std::path::Path;

use metastyle::data::ScenarioKind;
use metastyle::TrainConfig;

use crate::common::{prepare_out_dir, CliError, CliResult};
use crate::scenario_io::{read_info, write_scenario, GenerateSpec, ScenarioInfo, AUGMENTED_DIR, SCENARIO_FILE};

pub struct GenerateArgs<'a> {
    pub out_dir: &'a Path,
    pub scenario: Option<&'a str>,
    pub seed: Option<u64>,
    pub num_aug_domains: Option<usize>,
    pub strength: Option<f64>,
    pub force: bool,
}

/// Removes what a previous `generate-data` wrote into `dir`.
fn clear_previous(dir: &Path) -> CliResult<()> {
    if let Ok(info) = read_info(dir) {
        for name in &info.domains {
            let p = dir.join(name);
            if p.is_dir() {
                fs::remove_dir_all(p)?;
            }
        }
        fs::remove_file(dir.join(SCENARIO_FILE))?;
    }
    let aug = dir.join(AUGMENTED_DIR);
    if aug.is_dir() {
        fs::remove_dir_all(aug)?;
    }
    Ok(())
}

pub fn run(cfg: &TrainConfig, args: &GenerateArgs) -> CliResult<ScenarioInfo> {
    let kind = ScenarioKind::parse(args.scenario.unwrap_or(&cfg.scenario))?;
    let strength = args.strength.unwrap_or(cfg.aug_strength);
    if !(0.0..=1.0).contains(&strength) {
        return Err(CliError::Usage(format!("--strength {strength} outside [0, 1]")));
    }
    let spec = GenerateSpec {
        kind,
        seed: args.seed.unwrap_or(cfg.data_seed),
        image_size: cfg.image_size,
        num_aug_domains: args.num_aug_domains.unwrap_or(cfg.num_aug_domains),
        strength,
    };
    prepare_out_dir(args.out_dir, args.force)?;
    if args.force {
        clear_previous(args.out_dir)?;
    }
    let info = write_scenario(args.out_dir, &spec)?;
    println!(
        "wrote {} scenario ({} domains, {}x{}, {} classes, seed {}) to {}",
        info.kind,
        info.domains.len(),
        info.image_size,
        info.image_size,
        info.classes,
        info.seed,
        args.out_dir.display()
    );
    Ok(info)
}
