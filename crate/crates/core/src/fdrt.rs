//! Feedback-driven retraining: score each training domain on its validation
//! split, turn the scores into per-domain sampling proportions, and retrain
//! on the resulting weighted sample until validation Dice stops improving.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Optimizer, OptimizerKind, SegModel};
use crate::config::{GapLogBase, TrainConfig};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::meta_loop::{segmentation_gradients, Batch};
use crate::metrics::score_labels;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Lower clamp applied to Dice before the gap formula.
pub const MIN_SCORE: f64 = 1e-3;

const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainScore {
    pub domain_id: u32,
    pub dice: f64,
    pub proportion: f64,
}

#[derive(Debug, Clone)]
pub struct FdrtConfig<T> {
    pub eta: T,
    pub epochs: usize,
    pub max_rounds: usize,
    pub plateau_tol: f64,
    pub batch_size: usize,
    pub gap_log_base: GapLogBase,
    pub optimizer: OptimizerKind,
    pub lr_decay_factor: T,
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl<T: Scalar> FdrtConfig<T> {
    pub fn from_train_config(c: &TrainConfig, seed: u64) -> Self {
        Self {
            eta: T::lit(c.eta),
            epochs: c.epochs_fdrt,
            max_rounds: c.fdrt_max_rounds,
            plateau_tol: c.fdrt_plateau_tol,
            batch_size: c.batch_size,
            gap_log_base: c.gap_log_base,
            optimizer: c.fdrt_optimizer,
            lr_decay_factor: T::lit(c.lr_decay_factor),
            lr_decay_every: c.lr_decay_every,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > T::zero()) {
            return Err(Error::config("eta must be positive"));
        }
        if self.max_rounds == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::config("max_rounds, batch_size and lr_decay_every must be at least 1"));
        }
        if !(self.plateau_tol >= 0.0) {
            return Err(Error::config("plateau_tol must be non-negative"));
        }
        Ok(())
    }

    fn rate(&self, epoch: usize) -> T {
        self.eta * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Arg-max label maps for a stack of images, evaluated in chunks.
pub fn predict_labels<T: Scalar>(model: &SegModel<T>, ds: &DomainDataset<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ds.masks().len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = ds.batch_images(chunk)?;
        out.extend(model.forward(&x, None)?.probs.argmax());
    }
    Ok(out)
}

/// Mean per-image scores of a dataset (foreground classes averaged per image).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScores {
    pub dice: f64,
    pub hausdorff: f64,
    pub per_image_dice: Vec<f64>,
}

pub fn evaluate_dataset<T: Scalar>(model: &SegModel<T>, ds: &DomainDataset<T>) -> Result<DatasetScores> {
    if ds.is_empty() {
        return Err(Error::config(format!("evaluation split of {} is empty", ds.name)));
    }
    let pred = predict_labels(model, ds)?;
    let plane = ds.height() * ds.width();
    let mut per_image_dice = Vec::with_capacity(ds.len());
    let mut hd = 0.0;
    for i in 0..ds.len() {
        let s = score_labels(&pred[i * plane..(i + 1) * plane], ds.mask(i), ds.height(), ds.width(), ds.classes())?;
        per_image_dice.push(s.mean_dice());
        hd += s.mean_hausdorff();
    }
    Ok(DatasetScores {
        dice: per_image_dice.iter().sum::<f64>() / ds.len() as f64,
        hausdorff: hd / ds.len() as f64,
        per_image_dice,
    })
}

/// Mean validation Dice per domain.
pub fn evaluate_domains<T: Scalar>(model: &SegModel<T>, val_sets: &[DomainDataset<T>]) -> Result<Vec<f64>> {
    if val_sets.is_empty() {
        return Err(Error::config("no validation sets"));
    }
    val_sets.iter().map(|ds| Ok(evaluate_dataset(model, ds)?.dice)).collect()
}

/// Sampling proportion `1 - exp(log_b(m))` of one clamped score.
pub fn gap(score: f64, base: GapLogBase) -> f64 {
    let m = score.clamp(MIN_SCORE, 1.0);
    let lg = match base {
        GapLogBase::Ten => m.log10(),
        GapLogBase::E => m.ln(),
    };
    -lg.exp_m1()
}

pub fn calculate_gap(scores: &[f64], base: GapLogBase) -> Vec<f64> {
    scores.iter().map(|&m| gap(m, base)).collect()
}

/// Retraining samples drawn from a domain of `len` items per epoch.
pub fn retrain_quota(proportion: f64, len: usize) -> usize {
    (proportion * len as f64).ceil() as usize
}

/// `quota` indices without replacement; further passes reshuffle.
fn draw(len: usize, quota: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(quota);
    while out.len() < quota {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(quota - out.len()));
    }
    out
}

fn mixed_batch<T: Scalar>(datasets: &[DomainDataset<T>], items: &[(usize, usize)]) -> Result<Batch<T>> {
    let d0 = &datasets[items[0].0];
    let images: Vec<&[T]> = items.iter().map(|&(t, i)| datasets[t].image(i)).collect();
    let masks: Vec<u8> = items.iter().flat_map(|&(t, i)| datasets[t].mask(i).iter().copied()).collect();
    Ok(Batch {
        images: FeatureMap::stack(&images, [1, d0.height(), d0.width()])?,
        masks,
        domain_id: d0.domain_id,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainSummary {
    /// Samples drawn per domain in every epoch.
    pub samples: Vec<usize>,
    pub steps: usize,
    pub last_loss: Option<f64>,
}

/// Supervised retraining on `ceil(G[t] * |D[t]|)` samples of every domain per epoch.
pub fn fdrt_retrain<T: Scalar>(
    model: &SegModel<T>,
    datasets: &[DomainDataset<T>],
    proportions: &[f64],
    cfg: &FdrtConfig<T>,
    round: usize,
) -> Result<(SegModel<T>, RetrainSummary)> {
    cfg.validate()?;
    if datasets.len() != proportions.len() {
        return Err(Error::config(format!(
            "{} datasets but {} proportions",
            datasets.len(),
            proportions.len()
        )));
    }
    if let Some(p) = proportions.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(Error::config(format!("proportion {p} outside [0, 1]")));
    }
    let samples: Vec<usize> = datasets.iter().zip(proportions).map(|(d, &g)| retrain_quota(g, d.len())).collect();
    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut steps = 0;
    let mut last_loss = None;
    if samples.iter().all(|&s| s == 0) {
        return Ok((model, RetrainSummary { samples, steps, last_loss }));
    }
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((round as u64) << 32) | epoch as u64);
        let mut pool: Vec<(usize, usize)> = Vec::new();
        for (t, (d, &q)) in datasets.iter().zip(&samples).enumerate() {
            if q > 0 && d.is_empty() {
                return Err(Error::config(format!("domain {} is empty", d.name)));
            }
            pool.extend(draw(d.len(), q, &mut rng).into_iter().map(|i| (t, i)));
        }
        pool.shuffle(&mut rng);
        let lr = cfg.rate(epoch);
        for chunk in pool.chunks(cfg.batch_size) {
            let batch = mixed_batch(datasets, chunk)?;
            let (loss, grads) = segmentation_gradients(&model, &batch)?;
            model = model.with_params(opt.step(model.params(), &grads, lr)?)?;
            if !model.params().all_finite() {
                return Err(Error::Numeric("non-finite parameters during retraining".into()));
            }
            steps += 1;
            last_loss = Some(loss.to_f64_lossy());
        }
    }
    Ok((model, RetrainSummary { samples, steps, last_loss }))
}

/// One evaluate/retrain cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct FdrtRound {
    pub round: usize,
    pub scores: Vec<DomainScore>,
    pub samples: Vec<usize>,
    pub mean_before: f64,
    pub mean_after: f64,
    /// Whether this round produced the best checkpoint so far.
    pub improved: bool,
}

impl FdrtRound {
    pub const CSV_HEADER: &'static str = "round,domain,dice,gap,samples,mean_before,mean_after";

    pub fn csv_rows(&self) -> Vec<String> {
        self.scores
            .iter()
            .zip(&self.samples)
            .map(|(s, n)| {
                format!(
                    "{},{},{},{},{},{},{}",
                    self.round, s.domain_id, s.dice, s.proportion, n, self.mean_before, self.mean_after
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FdrtOutcome<T> {
    pub model: SegModel<T>,
    pub rounds: Vec<FdrtRound>,
    pub input_score: f64,
    pub best_score: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Alternates optional meta-learning (`between_rounds`) with evaluate/retrain
/// rounds and returns the checkpoint with the best mean validation Dice,
/// which is never worse than the input.
pub fn run_fdrt<T: Scalar>(
    model: &SegModel<T>,
    train_sets: &[DomainDataset<T>],
    val_sets: &[DomainDataset<T>],
    cfg: &FdrtConfig<T>,
    between_rounds: &mut dyn FnMut(SegModel<T>, usize) -> Result<SegModel<T>>,
) -> Result<FdrtOutcome<T>> {
    cfg.validate()?;
    if train_sets.len() != val_sets.len() {
        return Err(Error::config("training and validation domain lists differ in length"));
    }
    let input_score = mean(&evaluate_domains(model, val_sets)?);
    let mut best = model.clone();
    let mut best_score = input_score;
    let mut current = model.clone();
    let mut previous = input_score;
    let mut rounds = Vec::new();
    for round in 0..cfg.max_rounds {
        current = between_rounds(current, round)?;
        let dice = evaluate_domains(&current, val_sets)?;
        let mean_before = mean(&dice);
        if mean_before > best_score {
            best = current.clone();
            best_score = mean_before;
        }
        let gaps = calculate_gap(&dice, cfg.gap_log_base);
        let scores: Vec<DomainScore> = val_sets
            .iter()
            .zip(dice.iter().zip(&gaps))
            .map(|(d, (&m, &g))| DomainScore { domain_id: d.domain_id, dice: m, proportion: g })
            .collect();
        if gaps.iter().all(|&g| g == 0.0) {
            rounds.push(FdrtRound {
                round,
                samples: vec![0; scores.len()],
                scores,
                mean_before,
                mean_after: mean_before,
                improved: false,
            });
            break;
        }
        let (next, summary) = fdrt_retrain(&current, train_sets, &gaps, cfg, round)?;
        current = next;
        let mean_after = mean(&evaluate_domains(&current, val_sets)?);
        let improved = mean_after > best_score;
        if improved {
            best = current.clone();
            best_score = mean_after;
        }
        rounds.push(FdrtRound {
            round,
            scores,
            samples: summary.samples,
            mean_before,
            mean_after,
            improved,
        });
        if mean_after - previous < cfg.plateau_tol {
            break;
        }
        previous = mean_after;
    }
    Ok(FdrtOutcome {
        model: best,
        rounds,
        input_score,
        best_score,
    })
}
