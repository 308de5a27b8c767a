//! Per-channel feature statistics ("style"): extraction, mixing and re-injection.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Per-channel mean and standard deviation summarizing one domain's style.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats<T> {
    mean: Vec<T>,
    std: Vec<T>,
    count: u64,
}

impl<T: Scalar> StyleStats<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>, count: u64) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dim(format!(
                "mean has {} channels, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::dim("style stats need at least one channel"));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::data("style stats must be finite"));
        }
        if std.iter().any(|&s| s < T::zero()) {
            return Err(Error::data("standard deviations must be non-negative"));
        }
        Ok(Self { mean, std, count })
    }

    /// The `count = 0` sentinel with zero statistics.
    pub fn empty(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            std: vec![T::zero(); channels],
            count: 0,
        }
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn cast<U: Scalar>(&self) -> StyleStats<U> {
        StyleStats {
            mean: self.mean.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            std: self.std.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            count: self.count,
        }
    }

    fn check_channels(&self, other: &Self) -> Result<()> {
        if self.channels() != other.channels() {
            return Err(Error::dim(format!(
                "style stats channel counts differ: {} vs {}",
                self.channels(),
                other.channels()
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of style recall and the style-offset weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleRecallConfig<T> {
    /// Weight of the current statistics when mixing with recalled ones.
    pub alpha: T,
    /// Added to the instance deviation in the renormalization denominator.
    pub epsilon: T,
    /// Gain applied to mean/std gaps before logarithmic compression.
    pub sensitivity: T,
}

impl<T: Scalar> Default for StyleRecallConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(0.5),
            epsilon: T::lit(1e-5),
            sensitivity: T::lit(10.0),
        }
    }
}

impl<T: Scalar> StyleRecallConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(Error::domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::domain(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.sensitivity > T::zero()) {
            return Err(Error::domain(format!(
                "sensitivity {} must be positive",
                self.sensitivity
            )));
        }
        Ok(())
    }
}

/// Spatial mean and population standard deviation of one plane.
pub fn plane_stats<T: Scalar>(plane: &[T]) -> (T, T) {
    let n = T::from_usize(plane.len()).expect("plane size fits scalar");
    let rough = plane.iter().copied().sum::<T>() / n;
    // one refinement pass removes the summation rounding (exact for constant planes)
    let mean = rough + plane.iter().map(|&v| v - rough).sum::<T>() / n;
    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Instance-level statistics, one `(mean, std)` per `[instance][channel]`.
pub fn instance_stats<T: Scalar>(f: &FeatureMap<T>) -> Vec<Vec<(T, T)>> {
    (0..f.batch())
        .map(|b| (0..f.channels()).map(|c| plane_stats(f.channel(b, c))).collect())
        .collect()
}

/// Domain summary: instance statistics averaged over the batch, `count = B`.
pub fn compute_style_stats<T: Scalar>(f: &FeatureMap<T>) -> Result<StyleStats<T>> {
    if !f.is_finite() {
        return Err(Error::data("feature map contains non-finite values"));
    }
    let per_instance = instance_stats(f);
    stats_from_instances(&per_instance)
}

pub(crate) fn stats_from_instances<T: Scalar>(per_instance: &[Vec<(T, T)>]) -> Result<StyleStats<T>> {
    let b = per_instance.len();
    if b == 0 {
        return Err(Error::dim("no instances"));
    }
    let c = per_instance[0].len();
    let bt = T::from_usize(b).expect("batch fits scalar");
    let mut mean = vec![T::zero(); c];
    let mut std = vec![T::zero(); c];
    for inst in per_instance {
        for (ci, &(m, s)) in inst.iter().enumerate() {
            mean[ci] += m;
            std[ci] += s;
        }
    }
    mean.iter_mut().for_each(|m| *m /= bt);
    std.iter_mut().for_each(|s| *s /= bt);
    StyleStats::new(mean, std, b as u64)
}

/// Convex combination `alpha * current + (1 - alpha) * old`, keeping `current.count`.
pub fn mix_styles<T: Scalar>(
    current: &StyleStats<T>,
    old: &StyleStats<T>,
    alpha: T,
) -> Result<StyleStats<T>> {
    current.check_channels(old)?;
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let lerp = |a: &[T], b: &[T]| -> Vec<T> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                // exact endpoints, independent of rounding in (1 - alpha)
                if alpha == T::one() {
                    x
                } else if alpha == T::zero() {
                    y
                } else {
                    alpha * x + (T::one() - alpha) * y
                }
            })
            .collect()
    };
    Ok(StyleStats {
        mean: lerp(&current.mean, &old.mean),
        std: lerp(&current.std, &old.std),
        count: current.count,
    })
}

/// Renormalizes each instance-channel plane to the target statistics.
///
/// `out = (x - mu_x) / (sigma_x + eps) * sigma_mix + mu_mix`, with `mu_x`,
/// `sigma_x` taken from that plane alone.
pub fn recall_normalize<T: Scalar>(
    f: &FeatureMap<T>,
    mixed: &StyleStats<T>,
    cfg: &StyleRecallConfig<T>,
) -> Result<FeatureMap<T>> {
    if mixed.channels() != f.channels() {
        return Err(Error::dim(format!(
            "mixed stats have {} channels, feature map has {}",
            mixed.channels(),
            f.channels()
        )));
    }
    if !(cfg.epsilon > T::zero()) {
        return Err(Error::domain("epsilon must be positive"));
    }
    let mut out = f.clone();
    for b in 0..f.batch() {
        for c in 0..f.channels() {
            renormalize_plane(
                f.channel(b, c),
                out.channel_mut(b, c),
                mixed.mean[c],
                mixed.std[c],
                cfg.epsilon,
            );
        }
    }
    Ok(out)
}

/// Writes the renormalized plane into `out`; returns the plane's `(mean, std)`.
pub(crate) fn renormalize_plane<T: Scalar>(
    x: &[T],
    out: &mut [T],
    target_mean: T,
    target_std: T,
    eps: T,
) -> (T, T) {
    let (mu, sigma) = plane_stats(x);
    let scale = target_std / (sigma + eps);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mu) * scale + target_mean;
    }
    (mu, sigma)
}

/// Gradient of [`renormalize_plane`] w.r.t. its input, target stats held fixed.
pub(crate) fn renormalize_plane_backward<T: Scalar>(
    x: &[T],
    mu: T,
    sigma: T,
    target_std: T,
    eps: T,
    d_out: &[T],
    d_x: &mut [T],
) {
    let n = T::from_usize(x.len()).expect("plane size fits scalar");
    let s = sigma + eps;
    // g = dL/dxhat
    let g_mean = d_out.iter().copied().sum::<T>() * target_std / n;
    let g_dot = x
        .iter()
        .zip(d_out)
        .map(|(&v, &g)| g * (v - mu))
        .sum::<T>()
        * target_std;
    let coupling = if sigma > T::zero() {
        g_dot / (n * sigma * s * s)
    } else {
        T::zero()
    };
    for ((dx, &v), &g) in d_x.iter_mut().zip(x).zip(d_out) {
        *dx += (g * target_std - g_mean) / s - (v - mu) * coupling;
    }
}

/// Inter-domain style offset with logarithmic compression.
///
/// `ln(1 + s * mean|mu - mu_a|) + ln(1 + s * mean|sigma - sigma_a|)`.
pub fn style_delta<T: Scalar>(src: &StyleStats<T>, aug: &StyleStats<T>, sensitivity: T) -> Result<T> {
    src.check_channels(aug)?;
    if !(sensitivity > T::zero()) {
        return Err(Error::domain(format!("sensitivity {sensitivity} must be positive")));
    }
    let n = T::from_usize(src.channels()).expect("channel count fits scalar");
    let gap = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
    let mean_gap = gap(&src.mean, &aug.mean);
    let std_gap = gap(&src.std, &aug.std);
    Ok((mean_gap * sensitivity).ln_1p() + (std_gap * sensitivity).ln_1p())
}

/// Dynamic loss weight `1 - exp(-delta)`, in `[0, 1)`.
pub fn dynamic_weight<T: Scalar>(delta: T) -> Result<T> {
    if !(delta >= T::zero()) {
        return Err(Error::domain(format!("style offset {delta} must be >= 0")));
    }
    // -expm1(-d) keeps precision near zero
    Ok(-(-delta).exp_m1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(shape: [usize; 4], data: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::new(shape, data).unwrap()
    }

    fn stats(mean: Vec<f64>, std: Vec<f64>) -> StyleStats<f64> {
        StyleStats::new(mean, std, 1).unwrap()
    }

    #[test]
    fn two_by_two_plane() {
        let s = compute_style_stats(&fm([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((s.mean()[0] - 2.5).abs() < 1e-15);
        // independent scalar oracle: sqrt(((1.5^2 + 0.5^2) * 2) / 4)
        let oracle = ((1.5f64 * 1.5 + 0.5 * 0.5) * 2.0 / 4.0).sqrt();
        assert!((s.std()[0] - oracle).abs() < 1e-15);
        assert!((s.std()[0] - 1.118034).abs() < 1e-6);
        assert_eq!(s.count(), 1);
    }

    #[test]
    fn constant_channel_has_zero_std() {
        let s = compute_style_stats(&fm([1, 1, 3, 3], vec![0.7; 9])).unwrap();
        assert_eq!(s.mean()[0], 0.7);
        assert_eq!(s.std()[0], 0.0);
    }

    #[test]
    fn duplicated_instances_keep_stats() {
        let one = compute_style_stats(&fm([1, 1, 2, 2], vec![1.0, 5.0, 2.0, 0.0])).unwrap();
        let two = compute_style_stats(&fm([2, 1, 2, 2], vec![1.0, 5.0, 2.0, 0.0, 1.0, 5.0, 2.0, 0.0]))
            .unwrap();
        assert_eq!(one.mean(), two.mean());
        assert_eq!(one.std(), two.std());
        assert_eq!(two.count(), 2);
    }

    #[test]
    fn non_finite_input_rejected() {
        let f = FeatureMap::<f64>::new_unchecked_finite([1, 1, 1, 2], vec![0.0, f64::INFINITY]).unwrap();
        assert!(matches!(compute_style_stats(&f), Err(Error::Data(_))));
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let cur = stats(vec![2.0, 0.3], vec![1.0, 0.1]);
        let old = stats(vec![4.0, -0.7], vec![3.0, 0.9]);
        assert_eq!(mix_styles(&cur, &old, 1.0).unwrap().mean(), cur.mean());
        assert_eq!(mix_styles(&cur, &old, 0.0).unwrap().std(), old.std());
        let mid = mix_styles(&cur, &old, 0.5).unwrap();
        assert_eq!(mid.mean()[0], 3.0);
        assert_eq!(mid.std()[0], 2.0);
    }

    #[test]
    fn mixing_rejects_mismatch_and_bad_alpha() {
        let a = stats(vec![1.0], vec![1.0]);
        let b = stats(vec![1.0, 2.0], vec![1.0, 1.0]);
        assert!(matches!(mix_styles(&a, &b, 0.5), Err(Error::Dimension(_))));
        assert!(mix_styles(&a, &a, 1.5).is_err());
    }

    #[test]
    fn recall_of_constant_plane_gives_target_mean() {
        let f = fm([1, 1, 2, 2], vec![3.0; 4]);
        let out = recall_normalize(&f, &stats(vec![-1.25], vec![2.0]), &StyleRecallConfig::default())
            .unwrap();
        assert!(out.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn recall_with_own_stats_is_identity() {
        let f = fm([1, 2, 2, 2], vec![0.1, 0.9, 0.4, 0.3, 5.0, -2.0, 1.0, 0.0]);
        let own = instance_stats(&f);
        let mixed = stats(
            own[0].iter().map(|s| s.0).collect(),
            own[0].iter().map(|s| s.1).collect(),
        );
        let cfg = StyleRecallConfig { epsilon: 1e-12, ..Default::default() };
        let out = recall_normalize(&f, &mixed, &cfg).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn recall_rejects_channel_mismatch() {
        let f = fm([1, 2, 1, 1], vec![0.0, 1.0]);
        let r = recall_normalize(&f, &stats(vec![0.0], vec![1.0]), &StyleRecallConfig::default());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn delta_and_weight_reference_case() {
        // mean gap 0.1, std gap 0.2 averaged over two channels
        let src = stats(vec![0.0, 1.0], vec![0.5, 0.5]);
        let aug = stats(vec![0.05, 1.15], vec![0.3, 0.7]);
        let d = style_delta(&src, &aug, 10.0).unwrap();
        assert!((d - 6f64.ln()).abs() < 1e-12);
        assert!((d - 1.791759).abs() < 1e-6);
        let w = dynamic_weight(d).unwrap();
        assert!((w - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn delta_zero_for_identical_stats() {
        let s = stats(vec![0.4, 0.2], vec![0.1, 0.3]);
        assert_eq!(style_delta(&s, &s, 10.0).unwrap(), 0.0);
        assert_eq!(dynamic_weight(0.0f64).unwrap(), 0.0);
    }

    #[test]
    fn weight_rejects_negative_and_saturates_below_one() {
        assert!(matches!(dynamic_weight(-0.1f64), Err(Error::Domain(_))));
        let w = dynamic_weight(30.0f64).unwrap();
        assert!(w < 1.0 && w > 1.0 - 1e-12);
    }

    #[test]
    fn renormalize_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 2.5, 0.7, 0.0, 1.1];
        let d_out = [0.5, -0.25, 1.0, 0.3, -0.8, 0.2];
        let (tm, ts, eps) = (0.4, 1.7, 1e-5);
        let loss = |x: &[f64]| {
            let mut out = vec![0.0; x.len()];
            renormalize_plane(x, &mut out, tm, ts, eps);
            out.iter().zip(&d_out).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mu, sigma) = plane_stats(&x);
        let mut grad = vec![0.0; x.len()];
        renormalize_plane_backward(&x, mu, sigma, ts, eps, &d_out, &mut grad);
        for i in 0..x.len() {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", grad[i]);
        }
    }

    fn arb_stats(c: usize) -> impl Strategy<Value = StyleStats<f64>> {
        (
            proptest::collection::vec(-3.0..3.0f64, c),
            proptest::collection::vec(0.0..2.0f64, c),
        )
            .prop_map(|(m, s)| StyleStats::new(m, s, 1).unwrap())
    }

    proptest! {
        #[test]
        fn stats_are_finite_and_nonnegative(data in proptest::collection::vec(-100.0..100.0f64, 2 * 3 * 4 * 5)) {
            let s = compute_style_stats(&fm([2, 3, 4, 5], data)).unwrap();
            prop_assert!(s.mean().iter().all(|v| v.is_finite()));
            prop_assert!(s.std().iter().all(|&v| v.is_finite() && v >= 0.0));
        }

        #[test]
        fn mixing_is_affine(a in arb_stats(3), b in arb_stats(3), alpha in 0.0..=1.0f64) {
            let m = mix_styles(&a, &b, alpha).unwrap();
            prop_assert_eq!(mix_styles(&m, &b, 1.0).unwrap(), m.clone());
            let selfmix = mix_styles(&a, &a, alpha).unwrap();
            for (x, y) in selfmix.mean().iter().zip(a.mean()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn weighted_offset_is_zero_iff_identical(a in arb_stats(4), b in arb_stats(4)) {
            let w = dynamic_weight(style_delta(&a, &b, 10.0).unwrap()).unwrap();
            prop_assert_eq!(w == 0.0, a.mean() == b.mean() && a.std() == b.std());
        }

        #[test]
        fn widening_gaps_never_lowers_offset(a in arb_stats(4), b in arb_stats(4), k in 1.0..4.0f64) {
            // push b away from a elementwise by factor k
            let wide = StyleStats::new(
                a.mean().iter().zip(b.mean()).map(|(x, y)| x + k * (y - x)).collect(),
                a.std().iter().zip(b.std()).map(|(x, y)| (x + k * (y - x)).abs()).collect(),
                1,
            ).unwrap();
            let narrow = StyleStats::new(b.mean().to_vec(), b.std().to_vec(), 1).unwrap();
            // |a_std - |a + k(b - a)|| >= |b - a| holds only when the widened std stays >= 0
            prop_assume!(a.std().iter().zip(b.std()).all(|(x, y)| x + k * (y - x) >= 0.0));
            let d0 = style_delta(&a, &narrow, 10.0).unwrap();
            let d1 = style_delta(&a, &wide, 10.0).unwrap();
            prop_assert!(d1 >= d0 - 1e-12);
        }
    }
}
