//! Small U-Net style encoder-decoder with an injectable shallow-feature hook.
//!
//! Encoder level `l` has `base_channels << l` channels; `depth` levels give
//! `depth - 1` poolings. The hook sits after the first encoder block: when a
//! style override is supplied, those activations are renormalized to the
//! override statistics before feeding both the pooling path and the skip
//! connection.

mod checkpoint;
mod layers;
mod optim;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{param_update, Params};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::style_stats::{renormalize_plane, renormalize_plane_backward, StyleRecallConfig, StyleStats};
use crate::tensor::{FeatureMap, PredictionMap};

use layers::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            num_classes: 2,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth > 6 {
            return Err(Error::config(format!("depth {} outside [2, 6]", self.depth)));
        }
        if self.base_channels == 0 || self.base_channels > 256 {
            return Err(Error::config(format!("base_channels {} outside [1, 256]", self.base_channels)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel count of the shallow hook layer.
    pub fn hook_channels(&self) -> usize {
        self.base_channels
    }

    fn enc(&self, l: usize) -> usize {
        4 * l
    }

    fn dec(&self, l: usize) -> usize {
        4 * self.depth + 6 * l
    }

    fn head(&self) -> usize {
        4 * self.depth + 6 * (self.depth - 1)
    }

    /// `(length, fan_in)` of every parameter tensor; `fan_in = 0` marks a bias.
    fn tensor_layout(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.depth {
            let ci = if l == 0 { 1 } else { self.channels(l - 1) };
            let co = self.channels(l);
            out.extend([(co * ci * 9, ci * 9), (co, 0), (co * co * 9, co * 9), (co, 0)]);
        }
        for l in 0..self.depth - 1 {
            let (cu, c) = (self.channels(l + 1), self.channels(l));
            out.extend([
                (c * 4 * cu, cu),
                (c, 0),
                (c * 2 * c * 9, 2 * c * 9),
                (c, 0),
                (c * c * 9, c * 9),
                (c, 0),
            ]);
        }
        out.extend([(self.num_classes * self.base_channels, self.base_channels), (self.num_classes, 0)]);
        out
    }

    /// Images must tile into `2^depth` blocks.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} not divisible by {m} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Mixed statistics injected at the hook layer.
#[derive(Debug, Clone, Copy)]
pub struct StyleOverride<'a, T> {
    pub stats: &'a StyleStats<T>,
    pub cfg: StyleRecallConfig<T>,
}

#[derive(Debug, Clone)]
struct HookCache<T> {
    out: Vec<T>,
    own: Vec<(T, T)>,
    target_std: Vec<T>,
    eps: T,
}

/// Activations of one instance retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleCache<T> {
    h: usize,
    w: usize,
    input: Vec<T>,
    enc_in: Vec<Vec<T>>,
    enc_a: Vec<Vec<T>>,
    enc_b: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u8>>,
    hook: Option<HookCache<T>>,
    dec_cat: Vec<Vec<T>>,
    dec_a: Vec<Vec<T>>,
    dec_b: Vec<Vec<T>>,
    probs: Vec<T>,
}

impl<T: Scalar> SampleCache<T> {
    /// Hook-layer activations as seen downstream (after any injection), `C x H x W`.
    pub fn shallow(&self) -> &[T] {
        match &self.hook {
            Some(hk) => &hk.out,
            None => &self.enc_b[0],
        }
    }

    /// Hook-layer activations before injection.
    pub fn shallow_raw(&self) -> &[T] {
        &self.enc_b[0]
    }

    /// Per-channel `(mean, std)` of the pre-injection activations, when an
    /// override was applied.
    pub fn injection_stats(&self) -> Option<&[(T, T)]> {
        self.hook.as_ref().map(|hk| hk.own.as_slice())
    }

    /// Class probabilities, `K x H x W`.
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

/// Output of a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub shallow: FeatureMap<T>,
    pub probs: PredictionMap<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    arch: Arch,
    params: Params<T>,
}

impl<T: Scalar> SegModel<T> {
    /// He-normal weights, zero biases, drawn from `seed`.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .tensor_layout()
            .into_iter()
            .map(|(len, fan_in)| {
                if fan_in == 0 {
                    return vec![T::zero(); len];
                }
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect()
            })
            .collect();
        Ok(Self {
            arch,
            params: Params::new(tensors),
        })
    }

    pub fn from_params(arch: Arch, params: Params<T>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.tensor_layout();
        let ok = layout.len() == params.tensors().len()
            && layout.iter().zip(params.tensors()).all(|((n, _), t)| *n == t.len());
        if !ok {
            return Err(Error::Shape("parameter arrays do not match the architecture".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn with_params(&self, params: Params<T>) -> Result<Self> {
        self.params.check_aligned(&params)?;
        Ok(Self { arch: self.arch, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Returns a copy with `theta - lr * grads`.
    pub fn param_update(&self, grads: &Params<T>, lr: T) -> Result<Self> {
        self.with_params(param_update(&self.params, grads, lr)?)
    }

    /// Forward pass over a `B x 1 x H x W` batch.
    pub fn forward(&self, images: &FeatureMap<T>, style_override: Option<StyleOverride<'_, T>>) -> Result<ForwardOutput<T>> {
        let caches = self.forward_batch(images, style_override)?;
        let [b, _, h, w] = images.shape();
        let shallow = FeatureMap::stack(
            &caches.iter().map(|c| c.shallow()).collect::<Vec<_>>(),
            [self.arch.hook_channels(), h, w],
        )?;
        let probs = FeatureMap::stack(
            &caches.iter().map(|c| c.probs()).collect::<Vec<_>>(),
            [self.arch.num_classes, h, w],
        )?;
        debug_assert_eq!(shallow.batch(), b);
        Ok(ForwardOutput {
            shallow,
            probs: PredictionMap::new_trusted(probs),
        })
    }

    /// Hook-layer activations without injection; runs only the first encoder block.
    pub fn shallow_features(&self, images: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let [b, c, h, w] = images.shape();
        if c != 1 {
            return Err(Error::Shape(format!("expected single-channel images, got {c} channels")));
        }
        self.arch.check_spatial(h, w)?;
        let co = self.arch.base_channels;
        let p = &self.params;
        let parts: Vec<Vec<T>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut scratch = Vec::new();
                let mut xa = conv3_forward(images.instance(i), 1, h, w, p.tensor(0), p.tensor(1), co, &mut scratch);
                relu_inplace(&mut xa);
                let mut xb = conv3_forward(&xa, co, h, w, p.tensor(2), p.tensor(3), co, &mut scratch);
                relu_inplace(&mut xb);
                xb
            })
            .collect();
        FeatureMap::stack(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>(), [co, h, w])
    }

    /// Per-instance forward passes (parallel over the batch), caches kept.
    pub fn forward_batch(&self, images: &FeatureMap<T>, style_override: Option<StyleOverride<'_, T>>) -> Result<Vec<SampleCache<T>>> {
        let [b, c, h, w] = images.shape();
        if c != 1 {
            return Err(Error::Shape(format!("expected single-channel images, got {c} channels")));
        }
        self.arch.check_spatial(h, w)?;
        if let Some(ov) = &style_override {
            if ov.stats.channels() != self.arch.hook_channels() {
                return Err(Error::dim(format!(
                    "override has {} channels, hook layer has {}",
                    ov.stats.channels(),
                    self.arch.hook_channels()
                )));
            }
            ov.cfg.validate()?;
        }
        Ok((0..b)
            .into_par_iter()
            .map(|i| self.forward_sample(images.instance(i), h, w, style_override.as_ref()))
            .collect())
    }

    fn forward_sample(&self, image: &[T], h: usize, w: usize, ov: Option<&StyleOverride<'_, T>>) -> SampleCache<T> {
        let a = &self.arch;
        let p = &self.params;
        let d = a.depth;
        let mut scratch = Vec::new();
        let mut enc_in = Vec::with_capacity(d);
        let mut enc_a = Vec::with_capacity(d);
        let mut enc_b = Vec::with_capacity(d);
        let mut pool_idx = Vec::with_capacity(d - 1);
        let mut hook = None;
        let mut cur = image.to_vec();
        let (mut lh, mut lw) = (h, w);
        let mut skips: Vec<Vec<T>> = Vec::with_capacity(d);
        for l in 0..d {
            let ci = if l == 0 { 1 } else { a.channels(l - 1) };
            let co = a.channels(l);
            let e = a.enc(l);
            let mut xa = conv3_forward(&cur, ci, lh, lw, p.tensor(e), p.tensor(e + 1), co, &mut scratch);
            relu_inplace(&mut xa);
            let mut xb = conv3_forward(&xa, co, lh, lw, p.tensor(e + 2), p.tensor(e + 3), co, &mut scratch);
            relu_inplace(&mut xb);
            let mut skip = xb.clone();
            if l == 0 {
                if let Some(ov) = ov {
                    let hw = lh * lw;
                    let mut own = Vec::with_capacity(co);
                    for c in 0..co {
                        let st = renormalize_plane(
                            &xb[c * hw..(c + 1) * hw],
                            &mut skip[c * hw..(c + 1) * hw],
                            ov.stats.mean()[c],
                            ov.stats.std()[c],
                            ov.cfg.epsilon,
                        );
                        own.push(st);
                    }
                    hook = Some(HookCache {
                        out: skip.clone(),
                        own,
                        target_std: ov.stats.std().to_vec(),
                        eps: ov.cfg.epsilon,
                    });
                }
            }
            enc_in.push(if l == 0 { Vec::new() } else { std::mem::take(&mut cur) });
            enc_a.push(xa);
            enc_b.push(xb);
            if l + 1 < d {
                let (pooled, idx) = maxpool2_forward(&skip, co, lh, lw);
                pool_idx.push(idx);
                cur = pooled;
                lh /= 2;
                lw /= 2;
            }
            skips.push(skip);
        }
        // decoder, deepest first; results stored by level
        let mut dec_cat = vec![Vec::new(); d - 1];
        let mut dec_a = vec![Vec::new(); d - 1];
        let mut dec_b = vec![Vec::new(); d - 1];
        let mut up_src = skips[d - 1].clone();
        for l in (0..d - 1).rev() {
            let (cu, c) = (a.channels(l + 1), a.channels(l));
            let (sh, sw) = (h >> (l + 1), w >> (l + 1));
            let k = a.dec(l);
            let up = tconv2_forward(&up_src, cu, sh, sw, p.tensor(k), p.tensor(k + 1), c);
            let (oh, ow) = (2 * sh, 2 * sw);
            let mut cat = up;
            cat.extend_from_slice(&skips[l]);
            let mut xa = conv3_forward(&cat, 2 * c, oh, ow, p.tensor(k + 2), p.tensor(k + 3), c, &mut scratch);
            relu_inplace(&mut xa);
            let mut xb = conv3_forward(&xa, c, oh, ow, p.tensor(k + 4), p.tensor(k + 5), c, &mut scratch);
            relu_inplace(&mut xb);
            up_src = xb.clone();
            dec_cat[l] = cat;
            dec_a[l] = xa;
            dec_b[l] = xb;
        }
        let hd = a.head();
        let logits = conv1_forward(&dec_b[0], a.base_channels, h * w, p.tensor(hd), p.tensor(hd + 1), a.num_classes);
        let probs = softmax_classes(&logits, a.num_classes, h * w);
        SampleCache {
            h,
            w,
            input: image.to_vec(),
            enc_in,
            enc_a,
            enc_b,
            pool_idx,
            hook,
            dec_cat,
            dec_a,
            dec_b,
            probs,
        }
    }

    /// Parameter gradients for one instance given upstream gradients on its
    /// probabilities and (optionally) on its post-injection hook activations.
    pub fn backward_sample(&self, cache: &SampleCache<T>, d_probs: &[T], d_shallow: Option<&[T]>) -> Params<T> {
        let (mut g, mut d_hook) = self.backward_to_hook(cache, d_probs);
        if let Some(ds) = d_shallow {
            d_hook.iter_mut().zip(ds).for_each(|(a, &b)| *a += b);
        }
        self.backward_from_hook(cache, d_hook, None, &mut g);
        g
    }

    /// Back-propagates from the probabilities down to the hook output.
    /// Returns the gradients of every layer above the hook and the gradient
    /// w.r.t. the post-injection hook activations.
    pub fn backward_to_hook(&self, cache: &SampleCache<T>, d_probs: &[T]) -> (Params<T>, Vec<T>) {
        let a = &self.arch;
        let p = &self.params;
        let d = a.depth;
        let (h, w) = (cache.h, cache.w);
        let mut g = Params::zeros_like(p);
        let mut scratch = Vec::new();

        let dz = softmax_backward(&cache.probs, d_probs, a.num_classes, h * w);
        let hd = a.head();
        let (gw, gb) = split2(&mut g, hd);
        let mut d_up_src = conv1_backward(&cache.dec_b[0], a.base_channels, h * w, p.tensor(hd), a.num_classes, &dz, gw, gb);

        let mut d_skip: Vec<Vec<T>> = vec![Vec::new(); d];
        for l in 0..d - 1 {
            let (cu, c) = (a.channels(l + 1), a.channels(l));
            let (sh, sw) = (h >> (l + 1), w >> (l + 1));
            let (oh, ow) = (2 * sh, 2 * sw);
            let k = a.dec(l);
            let mut dxb = d_up_src;
            relu_backward_inplace(&cache.dec_b[l], &mut dxb);
            let (gw, gb) = split2(&mut g, k + 4);
            let mut dxa = conv3_backward(&cache.dec_a[l], c, oh, ow, p.tensor(k + 4), c, &dxb, gw, gb, true, &mut scratch)
                .expect("input grad requested");
            relu_backward_inplace(&cache.dec_a[l], &mut dxa);
            let (gw, gb) = split2(&mut g, k + 2);
            let dcat = conv3_backward(&cache.dec_cat[l], 2 * c, oh, ow, p.tensor(k + 2), c, &dxa, gw, gb, true, &mut scratch)
                .expect("input grad requested");
            let half = c * oh * ow;
            d_skip[l] = dcat[half..].to_vec();
            // source of the upsampling: decoder output one level deeper, or the bottleneck
            let src = if l + 1 == d - 1 { &cache.enc_b[d - 1] } else { &cache.dec_b[l + 1] };
            let (gw, gb) = split2(&mut g, k);
            d_up_src = tconv2_backward(src, cu, sh, sw, p.tensor(k), c, &dcat[..half], gw, gb);
        }
        d_skip[d - 1] = d_up_src;

        let mut d_from_above: Option<Vec<T>> = None;
        for l in (1..d).rev() {
            let ci = a.channels(l - 1);
            let co = a.channels(l);
            let (lh, lw) = (h >> l, w >> l);
            let mut d_out = std::mem::take(&mut d_skip[l]);
            if let Some(dp) = d_from_above.take() {
                maxpool2_backward(&dp, &cache.pool_idx[l], co, lh, lw, &mut d_out);
            }
            d_from_above = Some(self.encoder_block_backward(cache, l, ci, co, lh, lw, d_out, true, &mut g, &mut scratch));
        }
        let mut d_hook = std::mem::take(&mut d_skip[0]);
        let dp = d_from_above.expect("depth >= 2");
        maxpool2_backward(&dp, &cache.pool_idx[0], a.base_channels, h, w, &mut d_hook);
        (g, d_hook)
    }

    /// Continues from the hook output through the injection and the first
    /// encoder block. `d_raw_extra` is added to the pre-injection gradient.
    pub fn backward_from_hook(&self, cache: &SampleCache<T>, d_hook: Vec<T>, d_raw_extra: Option<&[T]>, g: &mut Params<T>) {
        let co = self.arch.base_channels;
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let mut d_out = match &cache.hook {
            Some(hk) => {
                let mut d_raw = vec![T::zero(); d_hook.len()];
                for c in 0..co {
                    let r = c * hw..(c + 1) * hw;
                    let (mu, sigma) = hk.own[c];
                    renormalize_plane_backward(&cache.enc_b[0][r.clone()], mu, sigma, hk.target_std[c], hk.eps, &d_hook[r.clone()], &mut d_raw[r]);
                }
                d_raw
            }
            None => d_hook,
        };
        if let Some(extra) = d_raw_extra {
            d_out.iter_mut().zip(extra).for_each(|(a, &b)| *a += b);
        }
        let mut scratch = Vec::new();
        self.encoder_block_backward(cache, 0, 1, co, h, w, d_out, false, g, &mut scratch);
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder_block_backward(
        &self,
        cache: &SampleCache<T>,
        l: usize,
        ci: usize,
        co: usize,
        lh: usize,
        lw: usize,
        mut d_out: Vec<T>,
        need_dx: bool,
        g: &mut Params<T>,
        scratch: &mut Vec<T>,
    ) -> Vec<T> {
        let p = &self.params;
        relu_backward_inplace(&cache.enc_b[l], &mut d_out);
        let e = self.arch.enc(l);
        let (gw, gb) = split2(g, e + 2);
        let mut dxa = conv3_backward(&cache.enc_a[l], co, lh, lw, p.tensor(e + 2), co, &d_out, gw, gb, true, scratch)
            .expect("input grad requested");
        relu_backward_inplace(&cache.enc_a[l], &mut dxa);
        let input: &[T] = if l == 0 { &cache.input } else { &cache.enc_in[l] };
        let (gw, gb) = split2(g, e);
        conv3_backward(input, ci, lh, lw, p.tensor(e), co, &dxa, gw, gb, need_dx, scratch).unwrap_or_default()
    }
}

/// Mutable views of the weight tensor `i` and its bias `i + 1`.
fn split2<T: Scalar>(g: &mut Params<T>, i: usize) -> (&mut [T], &mut [T]) {
    let (lo, hi) = g.tensors_mut().split_at_mut(i + 1);
    (&mut lo[i], &mut hi[0])
}

/// Sums per-instance gradients in index order (bitwise reproducible).
pub fn sum_grads<T: Scalar>(parts: Vec<Params<T>>) -> Option<Params<T>> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for g in it {
        acc.add_scaled(&g, T::one()).expect("aligned gradients");
    }
    Some(acc)
}
