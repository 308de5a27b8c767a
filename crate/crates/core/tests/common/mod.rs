//! Shared oracles and checks for the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metastyle::backbone::{Arch, Optimizer, SegModel, StyleOverride};
use metastyle::config::{StyleGrad, TrainConfig};
use metastyle::data::{make_synthetic_domain, DomainDataset, SyntheticLayout, SyntheticStyle};
use metastyle::losses::{
    align_loss, align_loss_grad, consistency_loss, consistency_loss_grad, dice_loss, dice_loss_grad, EmbeddingVector,
    PairBatch,
};
use metastyle::meta_loop::{meta_test_step, meta_train_step, support_gradients, Batch, Episode, MetaConfig};
use metastyle::metrics::{dice_coefficient, hausdorff_distance, BinaryMask};
use metastyle::style_stats::{compute_style_stats, plane_stats, recall_normalize, StyleRecallConfig, StyleStats};
use metastyle::tensor::{FeatureMap, PredictionMap};
use metastyle::StyleBank;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Feature map whose channels have distinct random offsets and scales.
pub fn random_map(r: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let offsets: Vec<f64> = (0..c).map(|_| r.gen_range(-2.0..2.0)).collect();
    let scales: Vec<f64> = (0..c).map(|_| r.gen_range(0.2..3.0)).collect();
    FeatureMap::from_fn([b, c, h, w], |[_, ci, _, _]| offsets[ci] + scales[ci] * r.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_stats(r: &mut ChaCha8Rng, c: usize) -> StyleStats<f64> {
    let mean = (0..c).map(|_| r.gen_range(-1.5..1.5)).collect();
    let std = (0..c).map(|_| r.gen_range(0.05..2.0)).collect();
    StyleStats::new(mean, std, 1).unwrap()
}

/// Largest absolute deviation of per-instance channel stats from `target`
/// after one recall, over `n` random maps with `B <= 4`, `C <= 8`, `16 x 16`.
pub fn recall_stat_error(n: usize, eps: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (b, c) = (r.gen_range(1..=4), r.gen_range(1..=8));
        let f = random_map(&mut r, b, c, 16, 16);
        let target = random_stats(&mut r, c);
        let cfg = StyleRecallConfig { alpha: 0.5, epsilon: eps, sensitivity: 10.0 };
        let out = recall_normalize(&f, &target, &cfg).unwrap();
        for bi in 0..b {
            for ci in 0..c {
                let (m, s) = plane_stats(out.channel(bi, ci));
                worst = worst.max((m - target.mean()[ci]).abs()).max((s - target.std()[ci]).abs());
            }
        }
    }
    worst
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// Relative change of a map renormalized to its own statistics, worst over
/// `n` random single-instance maps.
pub fn identity_drift(n: usize, eps: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = r.gen_range(1..=8);
        let f = random_map(&mut r, 1, c, 16, 16);
        let own = compute_style_stats(&f).unwrap();
        let cfg = StyleRecallConfig { alpha: 1.0, epsilon: eps, sensitivity: 10.0 };
        let out = recall_normalize(&f, &own, &cfg).unwrap();
        worst = worst.max(rel_diff(out.data(), f.data()));
    }
    worst
}

/// Relative change of a second recall with the same statistics.
pub fn recall_idempotence(n: usize, eps: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (b, c) = (r.gen_range(1..=4), r.gen_range(1..=8));
        let f = random_map(&mut r, b, c, 16, 16);
        let target = random_stats(&mut r, c);
        let cfg = StyleRecallConfig { alpha: 0.5, epsilon: eps, sensitivity: 10.0 };
        let once = recall_normalize(&f, &target, &cfg).unwrap();
        let twice = recall_normalize(&once, &target, &cfg).unwrap();
        worst = worst.max(rel_diff(twice.data(), once.data()));
    }
    worst
}

/// Relative probability drift of a full forward pass when each instance is
/// injected with its own hook statistics.
pub fn model_identity_drift(seed: u64) -> f64 {
    let mut r = rng(seed);
    let model = SegModel::<f64>::new(Arch { depth: 2, base_channels: 4, num_classes: 2 }, seed).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let img = FeatureMap::from_fn([1, 1, 16, 16], |_| r.gen_range(0.0..1.0)).unwrap();
        let own = compute_style_stats(&model.shallow_features(&img).unwrap()).unwrap();
        let cfg = StyleRecallConfig { alpha: 1.0, epsilon: 1e-5, sensitivity: 10.0 };
        let plain = model.forward(&img, None).unwrap();
        let inj = model.forward(&img, Some(StyleOverride { stats: &own, cfg })).unwrap();
        worst = worst.max(rel_diff(inj.probs.map().data(), plain.probs.map().data()));
    }
    worst
}

// ---------------------------------------------------------------------------
// gradients

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_probs(r: &mut ChaCha8Rng, b: usize, k: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let mut data = vec![0.0; b * k * h * w];
    let plane = h * w;
    for bi in 0..b {
        for p in 0..plane {
            let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (ki, v) in raw.iter().enumerate() {
                data[(bi * k + ki) * plane + p] = v / s;
            }
        }
    }
    FeatureMap::new([b, k, h, w], data).unwrap()
}

fn perturbed(map: &FeatureMap<f64>, i: usize, h: f64) -> PredictionMap<f64> {
    let mut m = map.clone();
    m.data_mut()[i] += h;
    PredictionMap::new(m).unwrap()
}

/// Worst relative error of the Dice and consistency gradients over `coords`
/// random entries each.
pub fn prediction_loss_grad_errors(coords: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (b, k, hh, ww) = (2, 3, 8, 8);
    let a = random_probs(&mut r, b, k, hh, ww);
    let c = random_probs(&mut r, b, k, hh, ww);
    let labels: Vec<u8> = (0..b * hh * ww).map(|_| r.gen_range(0..k as u8)).collect();
    let pa = PredictionMap::new(a.clone()).unwrap();
    let pc = PredictionMap::new(c).unwrap();
    let (_, gd) = dice_loss_grad(&pa, &labels).unwrap();
    let (_, gc) = consistency_loss_grad(&pa, &pc).unwrap();
    let h = 1e-6;
    let (mut worst_d, mut worst_c) = (0.0f64, 0.0f64);
    for _ in 0..coords {
        let i = r.gen_range(0..a.data().len());
        let (up, down) = (perturbed(&a, i, h), perturbed(&a, i, -h));
        let fd = (dice_loss(&up, &labels).unwrap() - dice_loss(&down, &labels).unwrap()) / (2.0 * h);
        worst_d = worst_d.max(rel_err(gd[i], fd, 1e-6));
        let fc = (consistency_loss(&up, &pc).unwrap() - consistency_loss(&down, &pc).unwrap()) / (2.0 * h);
        worst_c = worst_c.max(rel_err(gc[i], fc, 1e-6));
    }
    (worst_d, worst_c)
}

fn unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Worst relative error of the alignment gradient w.r.t. embedding entries.
/// Perturbations of `1e-8` keep every vector within the unit-norm tolerance.
pub fn align_grad_error(coords: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, margin) = (4, 6, 1.0);
    let src: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
    let aug: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
    let batch = |s: &[Vec<f64>], a: &[Vec<f64>]| {
        let e = |v: &[Vec<f64>]| v.iter().map(|x| EmbeddingVector::new(x.clone()).unwrap()).collect::<Vec<_>>();
        PairBatch::all_pairs(&e(s), &e(a), margin).unwrap()
    };
    let (_, gs, ga) = align_loss_grad(&batch(&src, &aug)).unwrap();
    // all_pairs repeats source i against every augmented j: sum the pair gradients
    let mut d_src = vec![vec![0.0; d]; n];
    let mut d_aug = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..d {
                d_src[i][k] += gs[i * n + j][k];
                d_aug[j][k] += ga[i * n + j][k];
            }
        }
    }
    let h = 1e-8;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let (side, i, k) = (r.gen_bool(0.5), r.gen_range(0..n), r.gen_range(0..d));
        let eval = |delta: f64| {
            let (mut s, mut a) = (src.clone(), aug.clone());
            if side {
                s[i][k] += delta;
            } else {
                a[i][k] += delta;
            }
            align_loss(&batch(&s, &a)).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an = if side { d_src[i][k] } else { d_aug[i][k] };
        worst = worst.max(rel_err(an, fd, 1e-6));
    }
    worst
}

pub fn tiny_domain(id: u32, base: f64, contrast: f64, n: usize, size: usize) -> DomainDataset<f64> {
    let style = SyntheticStyle { base_intensity: base, contrast, noise_sigma: 0.03, texture_freq: 0.0 };
    let layout = SyntheticLayout { height: size, width: size, classes: 2 };
    make_synthetic_domain(&style, &layout, n, 17, id, &format!("d{id}")).unwrap()
}

/// Meta configuration with every module on and the fully differentiated
/// dynamic weight and recall statistics.
pub fn full_meta_config(seed: u64) -> MetaConfig<f64> {
    let mut c = MetaConfig::from_train_config(&TrainConfig::default(), seed);
    c.batch_size = 2;
    c.episodes_per_domain = 1;
    c.lambda = 0.3;
    c.style_grad = StyleGrad::Full;
    c
}

/// Worst relative error of the end-to-end support-loss gradient over
/// `coords` random parameters of a tiny backbone on `16 x 16` inputs.
pub fn end_to_end_grad_error(coords: usize, seed: u64) -> f64 {
    let cfg = full_meta_config(seed);
    let model = SegModel::<f64>::new(Arch { depth: 2, base_channels: 3, num_classes: 2 }, seed).unwrap();
    let (d0, d1) = (tiny_domain(0, 0.1, 0.5, 4, 16), tiny_domain(1, 0.7, -0.4, 4, 16));
    let recalled = compute_style_stats(&model.shallow_features(&d1.batch_images(&[2, 3]).unwrap()).unwrap()).unwrap();
    let ep = Episode {
        support: Batch::from_dataset(&d0, &[0, 1]).unwrap(),
        query: Batch::from_dataset(&d1, &[2, 3]).unwrap(),
        partner: Some(Batch::from_dataset(&d1, &[0, 1]).unwrap()),
        t: 1,
        recalled: Some(recalled),
    };
    let out = support_gradients(&model, &ep, &cfg).unwrap();
    assert!(out.record.l_align > 0.0 && out.record.l_cons > 0.0 && out.record.w > 0.0);
    let loss = |m: &SegModel<f64>| support_gradients(m, &ep, &cfg).unwrap().record.l_total;
    let mut r = rng(seed ^ 0x5eed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = r.gen_range(0..model.num_params());
        let mut p = model.params().clone();
        p.set_flat(i, p.get_flat(i) + h);
        let up = loss(&model.with_params(p.clone()).unwrap());
        p.set_flat(i, p.get_flat(i) - 2.0 * h);
        let down = loss(&model.with_params(p).unwrap());
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(out.grads.get_flat(i), fd, 1e-5));
    }
    worst
}

// ---------------------------------------------------------------------------
// metrics

/// Blobby random mask: a few filled rectangles and scattered pixels; empty with small probability.
pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut data = vec![false; h * w];
    if r.gen_bool(0.05) {
        return BinaryMask::new(h, w, data).unwrap();
    }
    for _ in 0..r.gen_range(1..4) {
        let (y0, x0) = (r.gen_range(0..h), r.gen_range(0..w));
        let (y1, x1) = ((y0 + r.gen_range(1..h / 2)).min(h), (x0 + r.gen_range(1..w / 2)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = true;
            }
        }
    }
    for _ in 0..r.gen_range(0..20) {
        data[r.gen_range(0..h * w)] = true;
    }
    BinaryMask::new(h, w, data).unwrap()
}

pub fn brute_dice(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let inter = p.data().iter().zip(g.data()).filter(|(a, b)| **a && **b).count();
    let total = p.count() + g.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn brute_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs symmetric Hausdorff distance between boundary sets.
pub fn brute_hd(p: &BinaryMask, g: &BinaryMask) -> f64 {
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((p.height().pow(2) + p.width().pow(2)) as f64).sqrt(),
        _ => {}
    }
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    let directed = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        a.iter()
            .map(|&(y, x)| b.iter().map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    (directed(&bp, &bg).max(directed(&bg, &bp)) as f64).sqrt()
}

/// Number of mask pairs on which Dice or HD differ from the oracles.
pub fn metric_mismatches(pairs: usize, size: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..pairs)
        .filter(|_| {
            let (p, g) = (random_mask(&mut r, size, size), random_mask(&mut r, size, size));
            dice_coefficient(&p, &g).unwrap() != brute_dice(&p, &g) || hausdorff_distance(&p, &g).unwrap() != brute_hd(&p, &g)
        })
        .count()
}

// ---------------------------------------------------------------------------
// bank and determinism

pub fn random_bank(r: &mut ChaCha8Rng) -> StyleBank<f64> {
    let c = r.gen_range(1..=8);
    let mut bank = StyleBank::new();
    for _ in 0..r.gen_range(0..6) {
        let id = r.gen_range(0..20u32);
        let mean = (0..c).map(|_| r.gen_range(-1e3..1e3)).collect();
        let std = (0..c).map(|_| r.gen_range(0.0..1e3)).collect();
        bank.save(id, &StyleStats::new(mean, std, r.gen_range(1..100)).unwrap()).unwrap();
    }
    bank
}

/// Whether `n` random banks survive a bytes round trip bit for bit.
pub fn bank_round_trips(n: usize, seed: u64) -> bool {
    let mut r = rng(seed);
    (0..n).all(|_| {
        let bank = random_bank(&mut r);
        let bytes = bank.to_bytes();
        let back = StyleBank::<f64>::from_bytes(&bytes).unwrap();
        back.to_bytes() == bytes
            && bank.domains().eq(back.domains())
            && bank.domains().all(|d| {
                let (a, b) = (bank.load(d).unwrap(), back.load(d).unwrap());
                a.count() == b.count()
                    && a.mean().iter().zip(b.mean()).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.std().iter().zip(b.std()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    })
}

/// Per-step support losses of `steps` meta-train/meta-test steps cycling
/// over three small domains.
pub fn loss_trajectory(steps: usize, seed: u64) -> Vec<f64> {
    let mut cfg = MetaConfig::<f64>::from_train_config(&TrainConfig::default(), seed);
    cfg.batch_size = 2;
    let domains = [tiny_domain(0, 0.1, 0.5, 8, 16), tiny_domain(1, 0.6, -0.3, 8, 16), tiny_domain(2, 0.3, 0.2, 8, 16)];
    let mut model = SegModel::<f64>::new(Arch { depth: 2, base_channels: 3, num_classes: 2 }, seed).unwrap();
    let mut bank = StyleBank::new();
    let (mut ot, mut oq) = (Optimizer::new(cfg.optimizer), Optimizer::new(cfg.optimizer));
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let t = s % domains.len();
        let idx: Vec<usize> = (0..2).map(|_| r.gen_range(0..8)).collect();
        let q = (t + 1) % domains.len();
        let p = if t == 0 { 1 } else { 0 };
        let ep = Episode {
            support: Batch::from_dataset(&domains[t], &idx).unwrap(),
            query: Batch::from_dataset(&domains[q], &idx).unwrap(),
            partner: Some(Batch::from_dataset(&domains[p], &idx).unwrap()),
            t,
            recalled: if t > 0 { bank.load(domains[t - 1].domain_id).cloned() } else { None },
        };
        let step = meta_train_step(&model, &ep, &cfg, cfg.gamma, &mut ot).unwrap();
        bank.save(domains[t].domain_id, &step.support_stats).unwrap();
        out.push(step.record.l_total);
        model = meta_test_step(&step.model_prime, &ep, cfg.beta, &mut oq).unwrap().0;
    }
    out
}

pub fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
