//! On-disk layout of a generated scenario:
//!
//! ```text
//! <dir>/scenario                      kind, seed, image_size, classes, domains
//! <dir>/<domain>/{train,val,test}/    dataset directories
//! <dir>/augmented/<source>-augN/      optional previews of augmented source copies
//! ```

use std::fs;
use std::path::Path;

use metastyle::augmentation::build_augmented_domains;
use metastyle::data::{format_meta, make_scenario, parse_meta, read_dataset_dir, write_dataset_dir, DatasetMeta, DomainSplits, ScenarioKind, ScenarioSizes, SyntheticStyle};
use metastyle::{DomainDataset, Error, Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SCENARIO_FILE: &str = "scenario";
pub const AUGMENTED_DIR: &str = "augmented";
const SPLITS: [&str; 3] = ["train", "val", "test"];

/// What `generate-data` materializes.
#[derive(Debug, Clone)]
pub struct GenerateSpec {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub image_size: usize,
    pub num_aug_domains: usize,
    pub strength: f64,
}

/// Contents of the `scenario` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioInfo {
    pub kind: String,
    pub seed: u64,
    pub image_size: usize,
    pub classes: usize,
    pub domains: Vec<String>,
}

fn style_meta(style: &SyntheticStyle) -> DatasetMeta {
    let mut m = DatasetMeta::new();
    m.insert("base_intensity".into(), style.base_intensity.to_string());
    m.insert("contrast".into(), style.contrast.to_string());
    m.insert("noise_sigma".into(), style.noise_sigma.to_string());
    m.insert("texture_freq".into(), style.texture_freq.to_string());
    m
}

fn style_from_meta(meta: &DatasetMeta) -> SyntheticStyle {
    let get = |k: &str| meta.get(k).and_then(|v| v.parse().ok()).unwrap_or(0.0);
    SyntheticStyle {
        base_intensity: get("base_intensity"),
        contrast: get("contrast"),
        noise_sigma: get("noise_sigma"),
        texture_freq: get("texture_freq"),
    }
}

/// Writes the scenario into `dir` (which must exist and be writable).
pub fn write_scenario(dir: &Path, spec: &GenerateSpec) -> Result<ScenarioInfo> {
    let splits = make_scenario::<f64>(spec.kind, ScenarioSizes::default(), spec.image_size, spec.seed)?;
    for d in &splits {
        for (split, ds) in SPLITS.iter().zip([&d.train, &d.val, &d.test]) {
            let mut meta = style_meta(&d.style);
            meta.insert("split".into(), split.to_string());
            meta.insert("seed".into(), spec.seed.to_string());
            write_dataset_dir(ds, &dir.join(&d.name).join(split), &meta)?;
        }
    }
    if spec.num_aug_domains > 0 {
        let source = &splits[0];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (aug, curves) = build_augmented_domains(&source.train, spec.num_aug_domains, spec.strength, &mut rng)?;
        for (ds, curve) in aug.iter().zip(&curves) {
            let mut meta = DatasetMeta::new();
            meta.insert("curve".into(), format!("{:?}", curve.values));
            meta.insert("inverted".into(), curve.inverted.to_string());
            meta.insert("strength".into(), spec.strength.to_string());
            write_dataset_dir(ds, &dir.join(AUGMENTED_DIR).join(&ds.name), &meta)?;
        }
    }
    let info = ScenarioInfo {
        kind: spec.kind.name().to_string(),
        seed: spec.seed,
        image_size: spec.image_size,
        classes: spec.kind.classes(),
        domains: splits.iter().map(|d| d.name.clone()).collect(),
    };
    let mut meta = DatasetMeta::new();
    meta.insert("kind".into(), info.kind.clone());
    meta.insert("seed".into(), info.seed.to_string());
    meta.insert("image_size".into(), info.image_size.to_string());
    meta.insert("classes".into(), info.classes.to_string());
    meta.insert("domains".into(), info.domains.join(","));
    fs::write(dir.join(SCENARIO_FILE), format_meta(&meta))?;
    Ok(info)
}

pub fn read_info(dir: &Path) -> Result<ScenarioInfo> {
    let path = dir.join(SCENARIO_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let meta = parse_meta(&text)?;
    let field = |k: &str| {
        meta.get(k).cloned().ok_or_else(|| Error::Load {
            path: path.clone(),
            reason: format!("missing key {k:?}"),
        })
    };
    let num = |k: &str| -> Result<u64> {
        let v = field(k)?;
        v.parse().map_err(|_| Error::Load {
            path: path.clone(),
            reason: format!("{k} = {v:?} is not an integer"),
        })
    };
    let domains: Vec<String> = field("domains")?.split(',').map(str::to_string).filter(|s| !s.is_empty()).collect();
    if domains.is_empty() {
        return Err(Error::Load {
            path,
            reason: "no domains listed".into(),
        });
    }
    Ok(ScenarioInfo {
        kind: field("kind")?,
        seed: num("seed")?,
        image_size: num("image_size")? as usize,
        classes: num("classes")? as usize,
        domains,
    })
}

fn read_split<T: Scalar>(dir: &Path) -> Result<(DomainDataset<T>, DatasetMeta)> {
    if !dir.is_dir() {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            reason: "missing domain split directory".into(),
        });
    }
    read_dataset_dir(dir)
}

/// Loads every domain listed in the `scenario` file, source first.
pub fn load_scenario<T: Scalar>(dir: &Path) -> Result<(ScenarioInfo, Vec<DomainSplits<T>>)> {
    let info = read_info(dir)?;
    let mut out = Vec::with_capacity(info.domains.len());
    for name in &info.domains {
        let base = dir.join(name);
        let (train, meta) = read_split::<T>(&base.join("train"))?;
        let (val, _) = read_split::<T>(&base.join("val"))?;
        let (test, _) = read_split::<T>(&base.join("test"))?;
        if train.classes() != info.classes {
            return Err(Error::Load {
                path: base,
                reason: format!("{} classes, scenario declares {}", train.classes(), info.classes),
            });
        }
        out.push(DomainSplits {
            name: name.clone(),
            style: style_from_meta(&meta),
            train,
            val,
            test,
        });
    }
    Ok((info, out))
}
