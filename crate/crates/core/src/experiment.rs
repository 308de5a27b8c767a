//! End-to-end runs: augmentation, episodic meta-learning, feedback-driven
//! retraining, held-out evaluation, and the component/loss ablations.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{apply_curve_to_domain, build_augmented_domains, BezierCurve};
use crate::backbone::{Arch, OptimizerKind, SegModel};
use crate::config::TrainConfig;
use crate::data::DomainSplits;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::fdrt::{evaluate_dataset, evaluate_domains, run_fdrt, FdrtConfig, FdrtRound};
use crate::meta_loop::{run_metastyle_epoch, EpochRecord, MetaConfig, MetaOptimizers};
use crate::scalar::Scalar;
use crate::style_bank::StyleBank;

/// Training domains (source first, then its augmented copies) with matching
/// validation splits, plus the held-out target test splits.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub train: Vec<DomainDataset<T>>,
    pub val: Vec<DomainDataset<T>>,
    pub curves: Vec<BezierCurve>,
    pub heldout: Vec<DomainDataset<T>>,
}

/// Augments the first domain of `splits`; the remaining domains are held out.
pub fn prepare_data<T: Scalar>(splits: &[DomainSplits<T>], cfg: &TrainConfig, seed: u64) -> Result<PreparedData<T>> {
    let Some((source, targets)) = splits.split_first() else {
        return Err(Error::config("scenario has no domains"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (aug, curves) = build_augmented_domains(&source.train, cfg.num_aug_domains, cfg.aug_strength, &mut rng)?;
    let mut train = vec![source.train.clone()];
    train.extend(aug);
    let mut val = vec![source.val.clone()];
    for (a, curve) in curves.iter().enumerate() {
        let id = train[a + 1].domain_id;
        let name = format!("{}-aug{}", source.val.name, a + 1);
        val.push(apply_curve_to_domain(&source.val, curve, id, &name)?);
    }
    Ok(PreparedData {
        train,
        val,
        curves,
        heldout: targets.iter().map(|d| d.test.clone()).collect(),
    })
}

/// Test-split scores of one held-out domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEval {
    pub name: String,
    pub dice: f64,
    pub hausdorff: f64,
}

pub fn evaluate_heldout<T: Scalar>(model: &SegModel<T>, domains: &[DomainDataset<T>]) -> Result<Vec<DomainEval>> {
    domains
        .iter()
        .map(|d| {
            let s = evaluate_dataset(model, d)?;
            Ok(DomainEval {
                name: d.name.clone(),
                dice: s.dice,
                hausdorff: s.hausdorff,
            })
        })
        .collect()
}

pub fn mean_scores(evals: &[DomainEval]) -> (f64, f64) {
    let n = evals.len().max(1) as f64;
    (
        evals.iter().map(|e| e.dice).sum::<f64>() / n,
        evals.iter().map(|e| e.hausdorff).sum::<f64>() / n,
    )
}

pub fn arch_of(cfg: &TrainConfig, classes: usize) -> Arch {
    Arch {
        depth: cfg.depth,
        base_channels: cfg.base_channels,
        num_classes: classes,
    }
}

/// State after the meta-learning stage.
#[derive(Debug, Clone)]
pub struct MetaStage<T> {
    pub model: SegModel<T>,
    pub bank: StyleBank<T>,
    pub records: Vec<EpochRecord>,
    pub optimizers: MetaOptimizers<T>,
}

/// Runs `cfg.epochs_meta` meta-learning epochs from a seeded initialization.
pub fn train_meta<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData<T>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<MetaStage<T>> {
    train_meta_from(cfg, data, seed, StyleBank::new(), on_epoch)
}

/// [`train_meta`] starting from an existing style bank.
pub fn train_meta_from<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData<T>,
    seed: u64,
    mut bank: StyleBank<T>,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<MetaStage<T>> {
    cfg.validate()?;
    let classes = data.train[0].classes();
    let mut model = SegModel::new(arch_of(cfg, classes), seed)?;
    if let Some(c) = bank.channels() {
        if c != model.arch().hook_channels() {
            return Err(Error::config(format!(
                "style bank holds {c}-channel statistics, the model's style layer has {}",
                model.arch().hook_channels()
            )));
        }
    }
    let meta = MetaConfig::<T>::from_train_config(cfg, seed);
    let mut opts = MetaOptimizers::new(meta.optimizer);
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs_meta {
        let (m, b, rec) = run_metastyle_epoch(model, &data.train, bank, &meta, epoch, &mut opts)?;
        model = m;
        bank = b;
        on_epoch(&rec);
        records.extend(rec);
    }
    Ok(MetaStage {
        model,
        bank,
        records,
        optimizers: opts,
    })
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub model: SegModel<T>,
    pub bank: StyleBank<T>,
    pub epoch_records: Vec<EpochRecord>,
    pub fdrt_rounds: Vec<FdrtRound>,
    /// Mean validation Dice over the training domains before retraining.
    pub pre_fdrt_val: f64,
    pub final_val: f64,
    pub heldout: Vec<DomainEval>,
}

impl<T: Scalar> RunOutput<T> {
    pub fn heldout_mean(&self) -> (f64, f64) {
        mean_scores(&self.heldout)
    }
}

/// Retraining stage on top of a finished meta stage; extra meta epochs
/// between rounds continue the same bank and optimizer state.
pub fn finish_run<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData<T>,
    seed: u64,
    stage: MetaStage<T>,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<RunOutput<T>> {
    let MetaStage {
        model,
        mut bank,
        mut records,
        optimizers: mut opts,
    } = stage;
    let val_scores = evaluate_domains(&model, &data.val)?;
    let pre_fdrt_val = val_scores.iter().sum::<f64>() / val_scores.len() as f64;
    let (model, fdrt_rounds, final_val) = if cfg.fdrt {
        let fcfg = FdrtConfig::<T>::from_train_config(cfg, seed);
        let meta = MetaConfig::<T>::from_train_config(cfg, seed);
        let mut epoch = cfg.epochs_meta;
        let extra = cfg.fdrt_meta_epochs;
        let mut between = |m: SegModel<T>, _round: usize| -> Result<SegModel<T>> {
            let mut m = m;
            for _ in 0..extra {
                let b = std::mem::take(&mut bank);
                let (m2, b2, rec) = run_metastyle_epoch(m, &data.train, b, &meta, epoch, &mut opts)?;
                m = m2;
                bank = b2;
                on_epoch(&rec);
                records.extend(rec);
                epoch += 1;
            }
            Ok(m)
        };
        let out = run_fdrt(&model, &data.train, &data.val, &fcfg, &mut between)?;
        (out.model, out.rounds, out.best_score)
    } else {
        (model, Vec::new(), pre_fdrt_val)
    };
    let heldout = evaluate_heldout(&model, &data.heldout)?;
    Ok(RunOutput {
        model,
        bank,
        epoch_records: records,
        fdrt_rounds,
        pre_fdrt_val,
        final_val,
        heldout,
    })
}

/// Augmentation, meta-learning and (if enabled) retraining for one seed.
pub fn run_experiment<T: Scalar>(
    cfg: &TrainConfig,
    splits: &[DomainSplits<T>],
    seed: u64,
    on_epoch: &mut dyn FnMut(&[EpochRecord]),
) -> Result<RunOutput<T>> {
    let data = prepare_data(splits, cfg, seed)?;
    let stage = train_meta(cfg, &data, seed, on_epoch)?;
    finish_run(cfg, &data, seed, stage, on_epoch)
}

/// Which result table an ablation variant belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationTable {
    Components,
    Losses,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub label: String,
    pub table: AblationTable,
    pub mka: bool,
    pub metastyle: bool,
    pub fdrt: bool,
    pub l_align: bool,
    pub l_cons: bool,
}

impl Variant {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.mka = self.mka;
        c.metastyle = self.metastyle;
        c.fdrt = self.fdrt;
        c.l_align = self.l_align;
        c.l_cons = self.l_cons;
        c
    }
}

/// The eight on/off combinations of the three components.
pub fn component_variants() -> Vec<Variant> {
    let mut out = Vec::with_capacity(8);
    for bits in 0..8u8 {
        let (mka, metastyle, fdrt) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
        let label = match bits {
            0 => "Meta-Base".to_string(),
            7 => "FGML-DG".to_string(),
            _ => {
                let mut parts = vec!["Meta-Base"];
                if mka {
                    parts.push("MKA");
                }
                if metastyle {
                    parts.push("MetaStyle");
                }
                if fdrt {
                    parts.push("FDRT");
                }
                parts.join(" + ")
            }
        };
        out.push(Variant {
            label,
            table: AblationTable::Components,
            mka,
            metastyle,
            fdrt,
            l_align: true,
            l_cons: true,
        });
    }
    out
}

/// The full model with each alignment-component loss removed in turn.
pub fn loss_variants() -> Vec<Variant> {
    [
        ("FGML-DG", true, true),
        ("w/o L_cons", true, false),
        ("w/o L_align", false, true),
        ("w/o L_align, L_cons", false, false),
    ]
    .into_iter()
    .map(|(label, l_align, l_cons)| Variant {
        label: label.to_string(),
        table: AblationTable::Losses,
        mka: true,
        metastyle: true,
        fdrt: true,
        l_align,
        l_cons,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub heldout: Vec<DomainEval>,
    pub mean_dice: f64,
    pub mean_hd: f64,
    pub pre_fdrt_val: f64,
    pub final_val: f64,
}

/// Meta-stage settings that change the trajectory; variants sharing a key
/// share one meta-learning run.
fn meta_key(c: &TrainConfig) -> (bool, bool, bool, bool) {
    let aux = c.mka && (c.l_align || c.l_cons);
    (aux, aux && c.l_align, aux && c.l_cons, c.metastyle)
}

/// Runs every variant for one seed. Variants whose meta stage coincides reuse it.
pub fn run_ablation<T: Scalar>(
    base: &TrainConfig,
    splits: &[DomainSplits<T>],
    seed: u64,
    variants: &[Variant],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let data = prepare_data(splits, base, seed)?;
    let mut stages: BTreeMap<(bool, bool, bool, bool), MetaStage<T>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        let key = meta_key(&cfg);
        let stage = match stages.get(&key) {
            Some(s) => s.clone(),
            None => {
                let s = train_meta(&cfg, &data, seed, &mut |_| {})?;
                stages.insert(key, s.clone());
                s
            }
        };
        let out = finish_run(&cfg, &data, seed, stage, &mut |_| {})?;
        let (mean_dice, mean_hd) = out.heldout_mean();
        let row = AblationRow {
            variant: v.clone(),
            heldout: out.heldout,
            mean_dice,
            mean_hd,
            pre_fdrt_val: out.pre_fdrt_val,
            final_val: out.final_val,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Reduced settings for the single-core synthetic benchmark: short partial
/// epochs with Adam at 1e-3 in every stage, six augmented domains, and a small
/// lambda because the pixel-summed consistency term is O(100) on 64x64 maps.
pub fn benchmark_config() -> TrainConfig {
    TrainConfig {
        gamma: 0.001,
        beta: 0.001,
        eta: 0.001,
        lambda: 0.001,
        epochs_meta: 20,
        epochs_fdrt: 10,
        episodes_per_domain: 5,
        num_aug_domains: 6,
        meta_optimizer: OptimizerKind::Adam,
        base_channels: 8,
        fdrt_max_rounds: 1,
        seeds: vec![0],
        ..TrainConfig::default()
    }
}
