//! Episodic meta-learning over a source domain and its augmented copies,
//! with style memory/recall at the hook layer and the alignment/consistency
//! objectives between each batch and its counterpart in another domain.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{sum_grads, Optimizer, OptimizerKind, Params, SampleCache, SegModel, StyleOverride};
use crate::config::{MetaUpdateMode, StyleGrad, StyleSource, TrainConfig};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::{
    aux_loss, consistency_loss_grad, dice_loss_grad, feature_embed, feature_embed_backward, pooled, total_loss,
    align_loss_grad, PairBatch,
};
use crate::scalar::Scalar;
use crate::style_bank::StyleBank;
use crate::style_stats::{
    compute_style_stats, dynamic_weight, mix_styles, plane_stats, recall_normalize, style_delta, StyleRecallConfig, StyleStats,
};
use crate::tensor::{FeatureMap, PredictionMap};

#[derive(Debug, Clone)]
pub struct MetaConfig<T> {
    /// Meta-train (support) rate.
    pub gamma: T,
    /// Meta-test (query) rate.
    pub beta: T,
    pub epochs: usize,
    pub batch_size: usize,
    /// Episodes per domain and epoch; 0 means one pass over the domain.
    pub episodes_per_domain: usize,
    pub lr_decay_factor: T,
    pub lr_decay_every: usize,
    pub recall: StyleRecallConfig<T>,
    pub lambda: T,
    pub margin: T,
    pub mka: bool,
    pub metastyle: bool,
    pub l_align: bool,
    pub l_cons: bool,
    pub mode: MetaUpdateMode,
    pub style_source: StyleSource,
    pub style_grad: StyleGrad,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl<T: Scalar> MetaConfig<T> {
    pub fn from_train_config(c: &TrainConfig, seed: u64) -> Self {
        Self {
            gamma: T::lit(c.gamma),
            beta: T::lit(c.beta),
            epochs: c.epochs_meta,
            batch_size: c.batch_size,
            episodes_per_domain: c.episodes_per_domain,
            lr_decay_factor: T::lit(c.lr_decay_factor),
            lr_decay_every: c.lr_decay_every,
            recall: StyleRecallConfig {
                alpha: T::lit(c.alpha),
                epsilon: T::lit(c.epsilon),
                sensitivity: T::lit(c.sensitivity),
            },
            lambda: T::lit(c.lambda),
            margin: T::lit(c.margin),
            mka: c.mka,
            metastyle: c.metastyle,
            l_align: c.l_align,
            l_cons: c.l_cons,
            mode: c.meta_update_mode,
            style_source: c.style_source,
            style_grad: c.style_grad,
            optimizer: c.meta_optimizer,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= T::zero() && self.beta >= T::zero()) {
            return Err(Error::config("meta rates must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::config("epochs, batch_size and lr_decay_every must be at least 1"));
        }
        if !(self.lambda >= T::zero() && self.lambda <= T::one()) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.margin > T::zero()) {
            return Err(Error::config("margin must be positive"));
        }
        self.recall.validate()
    }

    /// Whether any alignment/consistency term enters the objective.
    pub fn aux_active(&self) -> bool {
        self.mka && (self.l_align || self.l_cons)
    }

    /// `(gamma, beta)` after step decay at `epoch`.
    pub fn rates(&self, epoch: usize) -> (T, T) {
        let f = self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32);
        (self.gamma * f, self.beta * f)
    }
}

/// Images and labels drawn from one domain.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: FeatureMap<T>,
    pub masks: Vec<u8>,
    pub domain_id: u32,
}

impl<T: Scalar> Batch<T> {
    pub fn from_dataset(ds: &DomainDataset<T>, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: ds.batch_images(idx)?,
            masks: ds.batch_masks(idx),
            domain_id: ds.domain_id,
        })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One support/query pairing. `partner` holds the same instances rendered in
/// another domain and feeds the alignment and consistency terms.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub support: Batch<T>,
    pub query: Batch<T>,
    pub partner: Option<Batch<T>>,
    pub t: usize,
    pub recalled: Option<StyleStats<T>>,
}

/// Loss components of one support step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    pub l_total: T,
    pub l_dice: T,
    pub l_align: T,
    pub l_cons: T,
    pub w: T,
    pub delta_style: T,
}

#[derive(Debug, Clone)]
pub struct TrainStepOutput<T> {
    pub model_prime: SegModel<T>,
    pub record: StepRecord<T>,
    /// Pre-injection statistics of the support batch, for the style bank.
    pub support_stats: StyleStats<T>,
}

/// Optimizer state carried across episodes.
#[derive(Debug, Clone)]
pub struct MetaOptimizers<T> {
    pub train: Optimizer<T>,
    pub test: Optimizer<T>,
}

impl<T: Scalar> MetaOptimizers<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            train: Optimizer::new(kind),
            test: Optimizer::new(kind),
        }
    }
}

/// Per-domain averages over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub domain: u32,
    pub l_total: f64,
    pub l_dice: f64,
    pub l_align: f64,
    pub l_cons: f64,
    pub w: f64,
    pub delta_style: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,domain,L_total,L_dice,L_align,L_cons,w,delta_style,lr";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.domain, self.l_total, self.l_dice, self.l_align, self.l_cons, self.w, self.delta_style, self.lr
        )
    }
}

fn stack_shallow<T: Scalar>(caches: &[SampleCache<T>], c: usize) -> Result<FeatureMap<T>> {
    let (h, w) = caches[0].spatial();
    FeatureMap::stack(&caches.iter().map(|x| x.shallow()).collect::<Vec<_>>(), [c, h, w])
}

fn stack_raw_shallow<T: Scalar>(caches: &[SampleCache<T>], c: usize) -> Result<FeatureMap<T>> {
    let (h, w) = caches[0].spatial();
    FeatureMap::stack(&caches.iter().map(|x| x.shallow_raw()).collect::<Vec<_>>(), [c, h, w])
}

fn stack_probs<T: Scalar>(caches: &[SampleCache<T>], k: usize) -> Result<PredictionMap<T>> {
    let (h, w) = caches[0].spatial();
    let map = FeatureMap::stack(&caches.iter().map(|x| x.probs()).collect::<Vec<_>>(), [k, h, w])?;
    Ok(PredictionMap::new_trusted(map))
}

fn check_finite<T: Scalar>(what: &str, v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}

/// Terms that the detached convention holds constant: the dynamic weight
/// and the mixed statistics injected into the support batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachedTerms<T> {
    pub w: Option<T>,
    pub mixed: Option<StyleStats<T>>,
}

/// Result of evaluating the support objective.
#[derive(Debug, Clone)]
pub struct SupportOutput<T> {
    pub grads: Params<T>,
    pub record: StepRecord<T>,
    /// Pre-injection statistics of the support batch.
    pub support_stats: StyleStats<T>,
    pub detached: DetachedTerms<T>,
}

/// Adds the gradient of per-instance channel statistics of `x` (`C x HW`)
/// given `d_mean[c]` and `d_std[c]` into `out`.
fn stats_backward<T: Scalar>(x: &[T], hw: usize, d_mean: &[T], d_std: &[T], out: &mut [T]) {
    let n = T::from_usize(hw).expect("plane fits scalar");
    for (c, (&dm, &ds)) in d_mean.iter().zip(d_std).enumerate() {
        let r = c * hw..(c + 1) * hw;
        let (m, s) = plane_stats(&x[r.clone()]);
        let coupling = if s > T::zero() { ds / (n * s) } else { T::zero() };
        for (o, &v) in out[r].iter_mut().zip(&x[c * hw..(c + 1) * hw]) {
            *o += dm / n + coupling * (v - m);
        }
    }
}

/// `d delta / d(mean, std)` of the first argument of [`style_delta`]; the
/// second argument receives the negation.
fn delta_grad<T: Scalar>(a: &StyleStats<T>, b: &StyleStats<T>, s: T) -> (Vec<T>, Vec<T>) {
    let c = T::from_usize(a.channels()).expect("channels fit scalar");
    let side = |x: &[T], y: &[T]| {
        let mean_abs = x.iter().zip(y).map(|(&p, &q)| (p - q).abs()).sum::<T>() / c;
        let k = s / ((T::one() + s * mean_abs) * c);
        x.iter()
            .zip(y)
            .map(|(&p, &q)| {
                if p > q {
                    k
                } else if p < q {
                    -k
                } else {
                    T::zero()
                }
            })
            .collect::<Vec<T>>()
    };
    (side(a.mean(), b.mean()), side(a.std(), b.std()))
}

/// Forward passes of the support (and partner) batch and the gradient of the
/// episode objective. The support batch is injected with the mix of its own
/// style and the recalled one.
pub fn support_gradients<T: Scalar>(
    model: &SegModel<T>,
    episode: &Episode<T>,
    cfg: &MetaConfig<T>,
) -> Result<SupportOutput<T>> {
    evaluate_support(model, episode, cfg, None, true)
}

/// Support objective with the detached terms pinned to `frozen`; the
/// function whose exact gradient the detached convention computes.
pub fn support_loss_frozen<T: Scalar>(
    model: &SegModel<T>,
    episode: &Episode<T>,
    cfg: &MetaConfig<T>,
    frozen: &DetachedTerms<T>,
) -> Result<T> {
    Ok(evaluate_support(model, episode, cfg, Some(frozen), false)?.record.l_total)
}

fn evaluate_support<T: Scalar>(
    model: &SegModel<T>,
    episode: &Episode<T>,
    cfg: &MetaConfig<T>,
    frozen: Option<&DetachedTerms<T>>,
    want_grad: bool,
) -> Result<SupportOutput<T>> {
    let arch = *model.arch();
    let (hc, k) = (arch.hook_channels(), arch.num_classes);
    let support = &episode.support;
    if support.is_empty() {
        return Err(Error::config("empty support batch"));
    }
    let n = support.len();
    let old = if cfg.metastyle { episode.recalled.as_ref() } else { None };
    let full_grad = cfg.style_grad == StyleGrad::Full;

    // support forward, with pre-injection stats for the bank
    let mut mixed = None;
    let (caches_s, support_stats, support_inputs) = match cfg.style_source {
        StyleSource::Feature => match old {
            Some(old) => {
                let cur = compute_style_stats(&model.shallow_features(&support.images)?)?;
                let mix = match frozen.and_then(|f| f.mixed.clone()) {
                    Some(m) => m,
                    None => mix_styles(&cur, old, cfg.recall.alpha)?,
                };
                let ov = StyleOverride { stats: &mix, cfg: cfg.recall };
                let caches = model.forward_batch(&support.images, Some(ov))?;
                mixed = Some(mix);
                (caches, cur, None)
            }
            None => {
                let caches = model.forward_batch(&support.images, None)?;
                let cur = compute_style_stats(&stack_raw_shallow(&caches, hc)?)?;
                (caches, cur, None)
            }
        },
        StyleSource::Input => {
            let cur = compute_style_stats(&support.images)?;
            match old {
                Some(old) => {
                    let mix = mix_styles(&cur, old, cfg.recall.alpha)?;
                    let x = recall_normalize(&support.images, &mix, &cfg.recall)?;
                    mixed = Some(mix);
                    (model.forward_batch(&x, None)?, cur, Some(x))
                }
                None => (model.forward_batch(&support.images, None)?, cur, None),
            }
        }
    };
    let probs_s = stack_probs(&caches_s, k)?;
    let (dice_s, g_dice_s) = dice_loss_grad(&probs_s, &support.masks)?;
    let p_len = g_dice_s.len() / n;

    let partner = match (&episode.partner, cfg.aux_active()) {
        (Some(p), true) => Some(p),
        _ => None,
    };
    let Some(partner) = partner else {
        let l_dice = check_finite("dice loss", dice_s)?;
        let grads = if want_grad {
            let parts: Vec<Params<T>> = (0..n)
                .into_par_iter()
                .map(|i| model.backward_sample(&caches_s[i], &g_dice_s[i * p_len..(i + 1) * p_len], None))
                .collect();
            sum_grads(parts).expect("non-empty batch")
        } else {
            Params::zeros_like(model.params())
        };
        let zero = T::zero();
        return Ok(SupportOutput {
            grads,
            record: StepRecord { l_total: l_dice, l_dice, l_align: zero, l_cons: zero, w: zero, delta_style: zero },
            support_stats,
            detached: DetachedTerms { w: None, mixed },
        });
    };
    if partner.len() != n {
        return Err(Error::dim(format!("partner batch has {} instances, support has {n}", partner.len())));
    }

    let caches_a = model.forward_batch(&partner.images, None)?;
    let probs_a = stack_probs(&caches_a, k)?;
    let (dice_a, g_dice_a) = dice_loss_grad(&probs_a, &partner.masks)?;
    let half = T::lit(0.5);
    let l_dice = (dice_s + dice_a) * half;

    let shallow_s = stack_shallow(&caches_s, hc)?;
    let shallow_a = stack_shallow(&caches_a, hc)?;
    let (style_s, style_a) = match cfg.style_source {
        StyleSource::Feature => (compute_style_stats(&shallow_s)?, compute_style_stats(&shallow_a)?),
        StyleSource::Input => (
            compute_style_stats(support_inputs.as_ref().unwrap_or(&support.images))?,
            compute_style_stats(&partner.images)?,
        ),
    };
    let delta = style_delta(&style_s, &style_a, cfg.recall.sensitivity)?;
    let w = match frozen.and_then(|f| f.w) {
        Some(w) => w,
        None => dynamic_weight(delta)?,
    };

    let (l_cons, g_cons) = if cfg.l_cons {
        consistency_loss_grad(&probs_s, &probs_a)?
    } else {
        (T::zero(), vec![T::zero(); n * p_len])
    };

    let plane = shallow_s.plane();
    let feat_len = hc * plane;
    let mut d_feat_s = vec![T::zero(); n * feat_len];
    let mut d_feat_a = vec![T::zero(); n * feat_len];
    let l_align = if cfg.l_align {
        let (es, ea) = (feature_embed(&shallow_s), feature_embed(&shallow_a));
        let pairs = PairBatch::all_pairs(&es, &ea, cfg.margin)?;
        let (loss, d_src, d_aug) = align_loss_grad(&pairs)?;
        if want_grad {
            for i in 0..n {
                let mut ds = vec![T::zero(); hc];
                let mut da = vec![T::zero(); hc];
                for j in 0..n {
                    // pair (i, j) holds source i and partner j
                    ds.iter_mut().zip(&d_src[i * n + j]).for_each(|(a, &b)| *a += b);
                    da.iter_mut().zip(&d_aug[j * n + i]).for_each(|(a, &b)| *a += b);
                }
                let fi = i * feat_len..(i + 1) * feat_len;
                feature_embed_backward(&pooled(&shallow_s, i), &ds, plane, &mut d_feat_s[fi.clone()]);
                feature_embed_backward(&pooled(&shallow_a, i), &da, plane, &mut d_feat_a[fi]);
            }
        }
        loss
    } else {
        T::zero()
    };

    let l_aux = aux_loss(l_cons, l_align, w)?;
    let l_total = check_finite("total loss", total_loss(l_aux, l_dice, cfg.lambda)?)?;
    let record = StepRecord { l_total, l_dice, l_align, l_cons, w, delta_style: delta };
    let detached = DetachedTerms { w: Some(w), mixed: mixed.clone() };
    if !want_grad {
        return Ok(SupportOutput { grads: Params::zeros_like(model.params()), record, support_stats, detached });
    }

    let lam = cfg.lambda;
    let c_dice = (T::one() - lam) * half;
    let c_cons = lam * (T::one() - w);
    let c_align = lam * w;
    d_feat_s.iter_mut().chain(d_feat_a.iter_mut()).for_each(|g| *g *= c_align);

    // dependence of the weight on the hook statistics
    let weight_path = full_grad && cfg.style_source == StyleSource::Feature && frozen.is_none();
    if weight_path {
        let d_delta = lam * (l_align - l_cons) * (T::one() - w);
        let (gm, gs) = delta_grad(&style_s, &style_a, cfg.recall.sensitivity);
        let nn = T::from_usize(n).expect("batch fits scalar");
        let dm: Vec<T> = gm.iter().map(|&g| d_delta * g / nn).collect();
        let ds: Vec<T> = gs.iter().map(|&g| d_delta * g / nn).collect();
        let neg = |v: &[T]| v.iter().map(|&g| -g).collect::<Vec<T>>();
        let (dm_a, ds_a) = (neg(&dm), neg(&ds));
        for i in 0..n {
            let fi = i * feat_len..(i + 1) * feat_len;
            stats_backward(shallow_s.instance(i), plane, &dm, &ds, &mut d_feat_s[fi.clone()]);
            stats_backward(shallow_a.instance(i), plane, &dm_a, &ds_a, &mut d_feat_a[fi]);
        }
    }

    let jobs: Vec<(bool, usize)> = (0..n).map(|i| (true, i)).chain((0..n).map(|i| (false, i))).collect();
    let upper: Vec<(Params<T>, Vec<T>)> = jobs
        .par_iter()
        .map(|&(is_support, i)| {
            let r = i * p_len..(i + 1) * p_len;
            let f = i * feat_len..(i + 1) * feat_len;
            let (cache, g_dice, d_feat, sign) = if is_support {
                (&caches_s[i], &g_dice_s[r.clone()], &d_feat_s[f], T::one())
            } else {
                (&caches_a[i], &g_dice_a[r.clone()], &d_feat_a[f], -T::one())
            };
            let d_probs: Vec<T> = g_dice
                .iter()
                .zip(&g_cons[r])
                .map(|(&gd, &gc)| c_dice * gd + sign * c_cons * gc)
                .collect();
            let (g, mut d_hook) = model.backward_to_hook(cache, &d_probs);
            d_hook.iter_mut().zip(d_feat).for_each(|(a, &b)| *a += b);
            (g, d_hook)
        })
        .collect();

    // dependence of the injected statistics on the support batch's own style
    let mut raw_extra: Vec<Option<Vec<T>>> = vec![None; n];
    let mix_path = full_grad && frozen.is_none() && mixed.is_some() && cfg.style_source == StyleSource::Feature;
    if mix_path {
        let eps = cfg.recall.epsilon;
        let mut d_mu = vec![T::zero(); hc];
        let mut d_sigma = vec![T::zero(); hc];
        for i in 0..n {
            let d_hook = &upper[i].1;
            let raw = caches_s[i].shallow_raw();
            for c in 0..hc {
                let r = c * plane..(c + 1) * plane;
                let (m, s) = plane_stats(&raw[r.clone()]);
                d_mu[c] += d_hook[r.clone()].iter().copied().sum::<T>();
                d_sigma[c] += raw[r.clone()]
                    .iter()
                    .zip(&d_hook[r])
                    .map(|(&v, &g)| g * (v - m) / (s + eps))
                    .sum::<T>();
            }
        }
        let scale = cfg.recall.alpha / T::from_usize(n).expect("batch fits scalar");
        d_mu.iter_mut().chain(d_sigma.iter_mut()).for_each(|g| *g *= scale);
        for (i, slot) in raw_extra.iter_mut().enumerate() {
            let mut extra = vec![T::zero(); feat_len];
            stats_backward(caches_s[i].shallow_raw(), plane, &d_mu, &d_sigma, &mut extra);
            *slot = Some(extra);
        }
    }

    let parts: Vec<Params<T>> = upper
        .into_par_iter()
        .zip(jobs.into_par_iter())
        .map(|((mut g, d_hook), (is_support, i))| {
            let (cache, extra) = if is_support {
                (&caches_s[i], raw_extra[i].as_deref())
            } else {
                (&caches_a[i], None)
            };
            model.backward_from_hook(cache, d_hook, extra, &mut g);
            g
        })
        .collect();
    Ok(SupportOutput {
        grads: sum_grads(parts).expect("non-empty batch"),
        record,
        support_stats,
        detached,
    })
}

/// Support step: `theta' = theta - gamma * grad L_total(theta)` (or the
/// configured optimizer's equivalent).
pub fn meta_train_step<T: Scalar>(
    model: &SegModel<T>,
    episode: &Episode<T>,
    cfg: &MetaConfig<T>,
    gamma: T,
    opt: &mut Optimizer<T>,
) -> Result<TrainStepOutput<T>> {
    let SupportOutput { grads, record, support_stats, .. } = support_gradients(model, episode, cfg)?;
    let model_prime = model.with_params(opt.step(model.params(), &grads, gamma)?)?;
    if !model_prime.params().all_finite() {
        return Err(Error::Numeric("non-finite parameters after support step".into()));
    }
    Ok(TrainStepOutput {
        model_prime,
        record,
        support_stats,
    })
}

/// Segmentation loss of a batch and its parameter gradient.
pub fn segmentation_gradients<T: Scalar>(model: &SegModel<T>, batch: &Batch<T>) -> Result<(T, Params<T>)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let k = model.arch().num_classes;
    let caches = model.forward_batch(&batch.images, None)?;
    let probs = stack_probs(&caches, k)?;
    let (loss, g) = dice_loss_grad(&probs, &batch.masks)?;
    let loss = check_finite("segmentation loss", loss)?;
    let plane = g.len() / batch.len();
    let parts: Vec<Params<T>> = (0..batch.len())
        .into_par_iter()
        .map(|i| model.backward_sample(&caches[i], &g[i * plane..(i + 1) * plane], None))
        .collect();
    Ok((loss, sum_grads(parts).expect("non-empty batch")))
}

/// Query step at `theta'`: returns the updated parameters and the query loss.
pub fn meta_test_step<T: Scalar>(
    model_prime: &SegModel<T>,
    episode: &Episode<T>,
    beta: T,
    opt: &mut Optimizer<T>,
) -> Result<(SegModel<T>, T)> {
    let (loss, grads) = segmentation_gradients(model_prime, &episode.query)?;
    let updated = model_prime.with_params(opt.step(model_prime.params(), &grads, beta)?)?;
    if !updated.params().all_finite() {
        return Err(Error::Numeric("non-finite parameters after query step".into()));
    }
    Ok((updated, loss))
}

fn shuffled(n: usize, seed: u64, epoch: usize, t: usize, which: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 24) | ((t as u64) << 2) | which);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn take_cyclic(order: &[usize], start: usize, len: usize) -> Vec<usize> {
    (0..len.min(order.len())).map(|i| order[(start + i) % order.len()]).collect()
}

/// Builds episode `e` of domain `t` for one epoch.
fn build_episode<T: Scalar>(
    domains: &[DomainDataset<T>],
    t: usize,
    e: usize,
    order_s: &[usize],
    order_q: &[usize],
    recalled: Option<&StyleStats<T>>,
    cfg: &MetaConfig<T>,
) -> Result<Episode<T>> {
    let bs = cfg.batch_size;
    let d = &domains[t];
    let q = &domains[(t + 1) % domains.len()];
    let sidx = take_cyclic(order_s, e * bs, bs);
    let qidx = take_cyclic(order_q, e * bs, bs);
    let partner = if cfg.aux_active() && domains.len() > 1 {
        // the source pairs with the augmented copies in turn; every copy pairs with the source
        let pd = if t == 0 { &domains[1 + e % (domains.len() - 1)] } else { &domains[0] };
        Some(Batch::from_dataset(pd, &sidx)?)
    } else {
        None
    };
    Ok(Episode {
        support: Batch::from_dataset(d, &sidx)?,
        query: Batch::from_dataset(q, &qidx)?,
        partner,
        t,
        recalled: recalled.cloned(),
    })
}

fn check_domains<T: Scalar>(domains: &[DomainDataset<T>], cfg: &MetaConfig<T>) -> Result<()> {
    let Some(first) = domains.first() else {
        return Err(Error::config("meta-learning needs at least one domain"));
    };
    for d in domains {
        if d.is_empty() {
            return Err(Error::config(format!("domain {} is empty", d.name)));
        }
        if (d.height(), d.width(), d.classes()) != (first.height(), first.width(), first.classes()) {
            return Err(Error::dim(format!("domain {} differs in image size or classes", d.name)));
        }
        if cfg.aux_active() && d.len() != first.len() {
            return Err(Error::dim(format!(
                "paired domains must have equal sizes ({} has {}, {} has {})",
                d.name,
                d.len(),
                first.name,
                first.len()
            )));
        }
    }
    Ok(())
}

#[derive(Default)]
struct Accum {
    n: f64,
    sums: [f64; 6],
}

impl Accum {
    fn add<T: Scalar>(&mut self, r: &StepRecord<T>) {
        self.n += 1.0;
        for (s, v) in self.sums.iter_mut().zip([r.l_total, r.l_dice, r.l_align, r.l_cons, r.w, r.delta_style]) {
            *s += v.to_f64_lossy();
        }
    }

    fn finish(&self, epoch: usize, domain: u32, lr: f64) -> EpochRecord {
        let m = |i: usize| self.sums[i] / self.n.max(1.0);
        EpochRecord {
            epoch,
            domain,
            l_total: m(0),
            l_dice: m(1),
            l_align: m(2),
            l_cons: m(3),
            w: m(4),
            delta_style: m(5),
            lr,
        }
    }
}

/// One pass over domains `D[0..=T]`: recall the previous domain's style,
/// meta-train on `D[t]`, meta-test on `D[(t + 1) mod (T + 1)]`, and store the
/// support statistics under the support domain's id.
pub fn run_metastyle_epoch<T: Scalar>(
    mut model: SegModel<T>,
    domains: &[DomainDataset<T>],
    mut bank: StyleBank<T>,
    cfg: &MetaConfig<T>,
    epoch: usize,
    opts: &mut MetaOptimizers<T>,
) -> Result<(SegModel<T>, StyleBank<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_domains(domains, cfg)?;
    let (gamma, beta) = cfg.rates(epoch);
    let mut records = Vec::with_capacity(domains.len());
    for t in 0..domains.len() {
        let d = &domains[t];
        let q = &domains[(t + 1) % domains.len()];
        let order_s = shuffled(d.len(), cfg.seed, epoch, t, 0);
        let order_q = shuffled(q.len(), cfg.seed, epoch, t, 1);
        let full = d.len().div_ceil(cfg.batch_size);
        let n_ep = if cfg.episodes_per_domain == 0 { full } else { cfg.episodes_per_domain.min(full) };
        let recalled = if t > 0 && cfg.metastyle {
            bank.load(domains[t - 1].domain_id).cloned()
        } else {
            None
        };
        let mut acc = Accum::default();
        match cfg.mode {
            MetaUpdateMode::CarryForward => {
                for e in 0..n_ep {
                    let ep = build_episode(domains, t, e, &order_s, &order_q, recalled.as_ref(), cfg)?;
                    let out = meta_train_step(&model, &ep, cfg, gamma, &mut opts.train)?;
                    bank.save(d.domain_id, &out.support_stats)?;
                    acc.add(&out.record);
                    model = meta_test_step(&out.model_prime, &ep, beta, &mut opts.test)?.0;
                }
            }
            MetaUpdateMode::Literal => {
                let episodes = (0..n_ep)
                    .map(|e| build_episode(domains, t, e, &order_s, &order_q, recalled.as_ref(), cfg))
                    .collect::<Result<Vec<_>>>()?;
                let mut prime = model.clone();
                for ep in &episodes {
                    let out = meta_train_step(&model, ep, cfg, gamma, &mut opts.train)?;
                    bank.save(d.domain_id, &out.support_stats)?;
                    acc.add(&out.record);
                    prime = out.model_prime;
                }
                for ep in &episodes {
                    prime = meta_test_step(&prime, ep, beta, &mut opts.test)?.0;
                }
                model = prime;
            }
        }
        records.push(acc.finish(epoch, d.domain_id, gamma.to_f64_lossy()));
    }
    Ok((model, bank, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Arch;
    use crate::data::{make_synthetic_domain, SyntheticLayout, SyntheticStyle};

    fn tiny_cfg() -> MetaConfig<f64> {
        let mut c = MetaConfig::from_train_config(&TrainConfig::default(), 3);
        c.batch_size = 2;
        c.episodes_per_domain = 1;
        c
    }

    fn domain(id: u32, base: f64) -> DomainDataset<f64> {
        let style = SyntheticStyle {
            base_intensity: base,
            contrast: 0.3,
            noise_sigma: 0.02,
            texture_freq: 0.0,
        };
        let layout = SyntheticLayout { height: 16, width: 16, classes: 2 };
        make_synthetic_domain(&style, &layout, 4, 11, id, &format!("d{id}")).unwrap()
    }

    fn model() -> SegModel<f64> {
        SegModel::new(Arch { depth: 2, base_channels: 2, num_classes: 2 }, 1).unwrap()
    }

    fn episode(cfg: &MetaConfig<f64>, partner: bool) -> Episode<f64> {
        let (d0, d1) = (domain(0, 0.1), domain(1, 0.4));
        Episode {
            support: Batch::from_dataset(&d0, &[0, 1]).unwrap(),
            query: Batch::from_dataset(&d1, &[2, 3]).unwrap(),
            partner: partner.then(|| Batch::from_dataset(&d1, &[0, 1]).unwrap()),
            t: 0,
            recalled: cfg.metastyle.then(|| StyleStats::new(vec![0.2, 0.1], vec![0.3, 0.05], 4).unwrap()),
        }
    }

    #[test]
    fn zero_rates_leave_parameters_unchanged() {
        let cfg = tiny_cfg();
        let m = model();
        let ep = episode(&cfg, true);
        let out = meta_train_step(&m, &ep, &cfg, 0.0, &mut Optimizer::Sgd).unwrap();
        assert_eq!(out.model_prime.params(), m.params());
        let (after, _) = meta_test_step(&out.model_prime, &ep, 0.0, &mut Optimizer::Sgd).unwrap();
        assert_eq!(after.params(), m.params());
    }

    #[test]
    fn support_step_descends() {
        let cfg = tiny_cfg();
        let m = model();
        let ep = episode(&cfg, true);
        let out = meta_train_step(&m, &ep, &cfg, 1e-3, &mut Optimizer::Sgd).unwrap();
        let after = support_gradients(&out.model_prime, &ep, &cfg).unwrap().record;
        assert!(after.l_total < out.record.l_total, "{} !< {}", after.l_total, out.record.l_total);
    }

    #[test]
    fn identical_partner_gives_zero_weight_and_consistency_only() {
        let mut cfg = tiny_cfg();
        cfg.metastyle = false;
        let mut ep = episode(&cfg, true);
        ep.partner = Some(ep.support.clone());
        let r = support_gradients(&model(), &ep, &cfg).unwrap().record;
        assert_eq!(r.w, 0.0);
        assert_eq!(r.l_cons, 0.0);
        let expected = cfg.lambda * r.l_cons + (1.0 - cfg.lambda) * r.l_dice;
        assert!((r.l_total - expected).abs() < 1e-15);
    }

    fn check_fd(m: &SegModel<f64>, g: &Params<f64>, f: impl Fn(&SegModel<f64>) -> f64) {
        for flat in (0..m.num_params()).step_by(13) {
            let h = 1e-6;
            let mut p = m.params().clone();
            p.set_flat(flat, p.get_flat(flat) + h);
            let up = f(&m.with_params(p.clone()).unwrap());
            p.set_flat(flat, p.get_flat(flat) - 2.0 * h);
            let down = f(&m.with_params(p).unwrap());
            let fd = (up - down) / (2.0 * h);
            let an = g.get_flat(flat);
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-2), "param {flat}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut cfg = tiny_cfg();
        cfg.style_grad = StyleGrad::Full;
        let m = model();
        let ep = episode(&cfg, true);
        let g = support_gradients(&m, &ep, &cfg).unwrap().grads;
        check_fd(&m, &g, |x| support_gradients(x, &ep, &cfg).unwrap().record.l_total);
    }

    #[test]
    fn detached_gradient_matches_frozen_objective() {
        let cfg = tiny_cfg();
        let m = model();
        let ep = episode(&cfg, true);
        let out = support_gradients(&m, &ep, &cfg).unwrap();
        assert!(out.detached.w.is_some() && out.detached.mixed.is_some());
        check_fd(&m, &out.grads, |x| support_loss_frozen(x, &ep, &cfg, &out.detached).unwrap());
    }

    #[test]
    fn epoch_fills_bank_and_rejects_empty_list() {
        let cfg = tiny_cfg();
        let domains = vec![domain(0, 0.1), domain(1, 0.4), domain(2, 0.6)];
        let mut opts = MetaOptimizers::new(cfg.optimizer);
        let (_, bank, rec) = run_metastyle_epoch(model(), &domains, StyleBank::new(), &cfg, 0, &mut opts).unwrap();
        assert_eq!(bank.domains().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(rec.len(), 3);
        assert!(run_metastyle_epoch(model(), &[], StyleBank::new(), &cfg, 0, &mut opts).is_err());
    }

    #[test]
    fn single_domain_epoch_runs() {
        let cfg = tiny_cfg();
        let mut opts = MetaOptimizers::new(cfg.optimizer);
        let (_, bank, rec) = run_metastyle_epoch(model(), &[domain(0, 0.2)], StyleBank::new(), &cfg, 0, &mut opts).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(rec[0].w, 0.0);
    }

    #[test]
    fn literal_mode_runs() {
        let mut cfg = tiny_cfg();
        cfg.mode = MetaUpdateMode::Literal;
        cfg.episodes_per_domain = 2;
        let domains = vec![domain(0, 0.1), domain(1, 0.4)];
        let mut opts = MetaOptimizers::new(cfg.optimizer);
        let (m, _, _) = run_metastyle_epoch(model(), &domains, StyleBank::new(), &cfg, 0, &mut opts).unwrap();
        assert_ne!(m.params(), model().params());
    }

    #[test]
    fn rates_decay_in_steps() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.rates(0), (0.01, 0.005));
        assert_eq!(cfg.rates(39), (0.005, 0.0025));
        assert_eq!(cfg.rates(40), (0.0025, 0.00125));
    }
}
