//! Training objectives: contrastive style alignment, prediction consistency,
//! Dice, and their weighted composition.
//!
//! Every loss with a training role also has a `*_grad` twin returning the
//! gradient with respect to its inputs; the backbone chains these into the
//! network backward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, PredictionMap};

/// Smoothing term in the Dice ratio; keeps empty masks away from `0/0`.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Unit-L2-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T>(Vec<T>);

impl<T: Scalar> EmbeddingVector<T> {
    /// Accepts `values` if its norm is `1 +- 1e-6`.
    pub fn new(values: Vec<T>) -> Result<Self> {
        let norm = values.iter().map(|&v| v * v).sum::<T>().sqrt();
        if values.is_empty() || (norm - T::one()).abs() > T::lit(1e-6) {
            return Err(Error::data(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    /// L2-normalizes `values`; the zero vector maps to the first basis vector.
    pub fn normalize(values: &[T]) -> Self {
        let norm = values.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            Self(values.iter().map(|&v| v / norm).collect())
        } else {
            let mut e = vec![T::zero(); values.len().max(1)];
            e[0] = T::one();
            Self(e)
        }
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Source/augmented embedding pairs with binary similarity labels.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    src: Vec<EmbeddingVector<T>>,
    aug: Vec<EmbeddingVector<T>>,
    labels: Vec<u8>,
    margin: T,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(
        src: Vec<EmbeddingVector<T>>,
        aug: Vec<EmbeddingVector<T>>,
        labels: Vec<u8>,
        margin: T,
    ) -> Result<Self> {
        if src.len() != aug.len() || src.len() != labels.len() {
            return Err(Error::dim(format!(
                "pair batch lengths differ: {} src, {} aug, {} labels",
                src.len(),
                aug.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::data("pair labels must be 0 or 1"));
        }
        if !(margin > T::zero()) {
            return Err(Error::domain(format!("margin {margin} must be positive")));
        }
        if let Some(d) = src.first().map(|e| e.dim()) {
            if src.iter().chain(&aug).any(|e| e.dim() != d) {
                return Err(Error::dim("embedding dimensions differ within pair batch"));
            }
        }
        Ok(Self { src, aug, labels, margin })
    }

    /// All `n^2` pairings of two aligned batches: instance `i` with its own
    /// augmented view is positive, with any other instance's view negative.
    pub fn all_pairs(
        src: &[EmbeddingVector<T>],
        aug: &[EmbeddingVector<T>],
        margin: T,
    ) -> Result<Self> {
        if src.len() != aug.len() {
            return Err(Error::dim("source and augmented batches differ in size"));
        }
        let n = src.len();
        let mut s = Vec::with_capacity(n * n);
        let mut a = Vec::with_capacity(n * n);
        let mut labels = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                s.push(src[i].clone());
                a.push(aug[j].clone());
                labels.push(u8::from(i == j));
            }
        }
        Self::new(s, a, labels, margin)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn margin(&self) -> T {
        self.margin
    }
}

/// Global-average-pools each channel, then L2-normalizes per instance.
pub fn feature_embed<T: Scalar>(f: &FeatureMap<T>) -> Vec<EmbeddingVector<T>> {
    (0..f.batch())
        .map(|b| EmbeddingVector::normalize(&pooled(f, b)))
        .collect()
}

pub(crate) fn pooled<T: Scalar>(f: &FeatureMap<T>, b: usize) -> Vec<T> {
    let n = T::from_usize(f.plane()).expect("plane fits scalar");
    (0..f.channels())
        .map(|c| f.channel(b, c).iter().copied().sum::<T>() / n)
        .collect()
}

/// Back-propagates an embedding gradient to one instance's `C x H x W` features.
pub(crate) fn feature_embed_backward<T: Scalar>(pooled: &[T], d_embed: &[T], plane: usize, d_feat: &mut [T]) {
    let norm = pooled.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::zero() {
        return;
    }
    // d v = (d_e - e (e . d_e)) / |v|
    let proj = pooled.iter().zip(d_embed).map(|(&v, &g)| v * g).sum::<T>() / norm;
    let n = T::from_usize(plane).expect("plane fits scalar");
    for (c, (&v, &g)) in pooled.iter().zip(d_embed).enumerate() {
        let dv = (g - v / norm * proj) / norm;
        let share = dv / n;
        d_feat[c * plane..(c + 1) * plane].iter_mut().for_each(|d| *d += share);
    }
}

fn euclid<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Contrastive margin loss averaged over the pairs.
pub fn align_loss<T: Scalar>(batch: &PairBatch<T>) -> Result<T> {
    Ok(align_loss_grad(batch)?.0)
}

/// Loss plus gradients w.r.t. each source and augmented embedding.
///
/// At `D = 0` for a negative pair the gradient direction is undefined and
/// zero is returned.
pub fn align_loss_grad<T: Scalar>(batch: &PairBatch<T>) -> Result<(T, Vec<Vec<T>>, Vec<Vec<T>>)> {
    if batch.is_empty() {
        return Err(Error::data("alignment loss of an empty pair batch is undefined"));
    }
    let n = T::from_usize(batch.len()).expect("batch fits scalar");
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut d_src = Vec::with_capacity(batch.len());
    let mut d_aug = Vec::with_capacity(batch.len());
    for ((s, a), &l) in batch.src.iter().zip(&batch.aug).zip(&batch.labels) {
        let (x, y) = (s.values(), a.values());
        let d = euclid(x, y);
        // coefficient c such that dL/dx = c * (x - y)
        let coef = if l == 1 {
            total += d * d;
            two / n
        } else {
            let gap = batch.margin - d;
            if gap > T::zero() {
                total += gap * gap;
                if d > T::zero() {
                    -two * gap / (d * n)
                } else {
                    T::zero()
                }
            } else {
                T::zero()
            }
        };
        let gx: Vec<T> = x.iter().zip(y).map(|(&xi, &yi)| coef * (xi - yi)).collect();
        d_aug.push(gx.iter().map(|&g| -g).collect());
        d_src.push(gx);
    }
    Ok((total / n, d_src, d_aug))
}

fn check_same_shape<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "prediction shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over instances of the squared L2 distance between flattened predictions.
pub fn consistency_loss<T: Scalar>(p_src: &PredictionMap<T>, p_aug: &PredictionMap<T>) -> Result<T> {
    let (a, b) = (p_src.map(), p_aug.map());
    check_same_shape(a, b)?;
    let n = T::from_usize(a.batch()).expect("batch fits scalar");
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        / n)
}

/// Gradient of [`consistency_loss`] w.r.t. the first argument; the second is its negation.
pub fn consistency_loss_grad<T: Scalar>(p_src: &PredictionMap<T>, p_aug: &PredictionMap<T>) -> Result<(T, Vec<T>)> {
    let loss = consistency_loss(p_src, p_aug)?;
    let (a, b) = (p_src.map(), p_aug.map());
    let c = T::lit(2.0) / T::from_usize(a.batch()).expect("batch fits scalar");
    Ok((loss, a.data().iter().zip(b.data()).map(|(&x, &y)| c * (x - y)).collect()))
}

fn check_labels<T: Scalar>(pred: &PredictionMap<T>, target: &[u8]) -> Result<()> {
    let [b, k, h, w] = pred.map().shape();
    if target.len() != b * h * w {
        return Err(Error::dim(format!(
            "target has {} labels, prediction covers {b}x{h}x{w}",
            target.len()
        )));
    }
    if let Some(&l) = target.iter().find(|&&l| l as usize >= k) {
        return Err(Error::data(format!("label {l} out of range for {k} classes")));
    }
    if k < 2 {
        return Err(Error::dim("Dice loss needs a background and at least one foreground class"));
    }
    Ok(())
}

/// Soft Dice loss: one minus the mean over instances and foreground classes of
/// `(2 sum(p t) + rho) / (sum p + sum t + rho)`.
pub fn dice_loss<T: Scalar>(pred: &PredictionMap<T>, target: &[u8]) -> Result<T> {
    Ok(dice_loss_grad(pred, target)?.0)
}

/// Dice loss with its gradient w.r.t. every prediction entry.
pub fn dice_loss_grad<T: Scalar>(pred: &PredictionMap<T>, target: &[u8]) -> Result<(T, Vec<T>)> {
    check_labels(pred, target)?;
    let map = pred.map();
    let [b, k, h, w] = map.shape();
    let plane = h * w;
    let rho = T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let terms = T::from_usize(b * (k - 1)).expect("term count fits scalar");
    let mut grad = vec![T::zero(); map.data().len()];
    let mut dice_sum = T::zero();
    for bi in 0..b {
        let labels = &target[bi * plane..(bi + 1) * plane];
        for ki in 1..k {
            let p = map.channel(bi, ki);
            let mut inter = T::zero();
            let mut psum = T::zero();
            let mut tsum = T::zero();
            for (&pv, &l) in p.iter().zip(labels) {
                psum += pv;
                if l as usize == ki {
                    inter += pv;
                    tsum += T::one();
                }
            }
            let num = two * inter + rho;
            let den = psum + tsum + rho;
            dice_sum += num / den;
            let g = &mut grad[(bi * k + ki) * plane..(bi * k + ki + 1) * plane];
            let den2 = den * den;
            for (gv, &l) in g.iter_mut().zip(labels) {
                let t = if l as usize == ki { T::one() } else { T::zero() };
                // loss = 1 - mean(dice) so the sign flips
                *gv = -((two * t * den - num) / den2) / terms;
            }
        }
    }
    Ok((T::one() - dice_sum / terms, grad))
}

/// `(1 - w) * l_cons + w * l_align`, for `w` in `[0, 1)`.
pub fn aux_loss<T: Scalar>(l_cons: T, l_align: T, w: T) -> Result<T> {
    if !(w >= T::zero() && w < T::one()) {
        return Err(Error::domain(format!("dynamic weight {w} outside [0, 1)")));
    }
    Ok((T::one() - w) * l_cons + w * l_align)
}

/// `lambda * l_aux + (1 - lambda) * l_dice`, for `lambda` in `[0, 1]`.
pub fn total_loss<T: Scalar>(l_aux: T, l_dice: T, lambda: T) -> Result<T> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::domain(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * l_aux + (T::one() - lambda) * l_dice)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn pmap(shape: [usize; 4], data: Vec<f64>) -> PredictionMap<f64> {
        PredictionMap::new(FeatureMap::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn embedding_examples() {
        let f = FeatureMap::<f64>::from_fn([1, 3, 2, 2], |[_, c, _, _]| if c == 1 { 5.0 } else { 0.0 }).unwrap();
        assert_eq!(feature_embed(&f)[0].values(), &[0.0, 1.0, 0.0]);

        let z = FeatureMap::<f64>::zeros([1, 3, 2, 2]).unwrap();
        assert_eq!(feature_embed(&z)[0].values(), &[1.0, 0.0, 0.0]);

        let f = FeatureMap::<f64>::from_fn([1, 2, 1, 2], |[_, c, _, _]| if c == 0 { 3.0 } else { 4.0 }).unwrap();
        let e = feature_embed(&f);
        assert!((e[0].values()[0] - 0.6).abs() < 1e-15);
        assert!((e[0].values()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn embedding_rejects_non_unit() {
        assert!(EmbeddingVector::new(vec![0.5f64, 0.5]).is_err());
    }

    #[test]
    fn align_examples() {
        let pos = PairBatch::new(vec![emb(&[1.0, 0.0])], vec![emb(&[1.0, 0.0])], vec![1], 1.0).unwrap();
        assert_eq!(align_loss(&pos).unwrap(), 0.0);

        // orthogonal unit vectors are sqrt(2) apart, beyond margin 1
        let far = PairBatch::new(vec![emb(&[1.0, 0.0])], vec![emb(&[0.0, 1.0])], vec![0], 1.0).unwrap();
        assert_eq!(align_loss(&far).unwrap(), 0.0);

        // D = 0.5 between unit vectors: angle with 2 - 2cos = 0.25
        let c = 1.0 - 0.125f64;
        let s = (1.0 - c * c).sqrt();
        let near = PairBatch::new(vec![emb(&[1.0, 0.0])], vec![emb(&[c, s])], vec![0], 1.0).unwrap();
        assert!((align_loss(&near).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn align_empty_batch_errors() {
        let b = PairBatch::<f64>::new(vec![], vec![], vec![], 1.0).unwrap();
        assert!(matches!(align_loss(&b), Err(Error::Data(_))));
    }

    #[test]
    fn all_pairs_labels_diagonal() {
        let v = vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        let b = PairBatch::all_pairs(&v, &v, 1.0).unwrap();
        assert_eq!(b.labels, vec![1, 0, 0, 1]);
    }

    #[test]
    fn consistency_examples() {
        let a = pmap([1, 2, 1, 1], vec![1.0, 0.0]);
        let b = pmap([1, 2, 1, 1], vec![0.0, 1.0]);
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &b).unwrap(), 2.0);
        assert_eq!(consistency_loss(&b, &a).unwrap(), 2.0);
        let c = pmap([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(consistency_loss(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn dice_examples() {
        let target = vec![0u8, 1, 1, 0];
        let perfect = PredictionMap::<f64>::one_hot(&target, [1, 2, 2, 2]).unwrap();
        assert!(dice_loss(&perfect, &target).unwrap() < 1e-9);

        let inverse: Vec<u8> = target.iter().map(|&l| 1 - l).collect();
        let disjoint = PredictionMap::<f64>::one_hot(&inverse, [1, 2, 2, 2]).unwrap();
        assert!((dice_loss(&disjoint, &target).unwrap() - 1.0).abs() < 1e-5);

        // brute-force count: target {1,2}, prediction {2,3}: overlap 1, sizes 2+2
        let half = PredictionMap::<f64>::one_hot(&[0, 0, 1, 1], [1, 2, 2, 2]).unwrap();
        let inter = 1.0;
        let oracle = 1.0 - (2.0 * inter + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
        let got = dice_loss(&half, &target).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.5).abs() < 1e-5);
    }

    #[test]
    fn dice_rejects_bad_labels() {
        let p = PredictionMap::<f64>::one_hot(&[0, 1], [1, 2, 1, 2]).unwrap();
        assert!(matches!(dice_loss(&p, &[0, 2]), Err(Error::Data(_))));
    }

    #[test]
    fn composition_examples() {
        assert_eq!(aux_loss(0.2, 0.9, 0.0).unwrap(), 0.2);
        assert!((aux_loss(0.2, 0.4, 0.5f64).unwrap() - 0.3).abs() < 1e-15);
        assert!((aux_loss(0.7, 0.7, 0.37f64).unwrap() - 0.7).abs() < 1e-15);
        assert!(aux_loss(0.1, 0.1, 1.0f64).is_err());
        assert_eq!(total_loss(0.2, 0.4, 0.0).unwrap(), 0.4);
        assert_eq!(total_loss(0.2, 0.4, 1.0).unwrap(), 0.2);
        assert!((total_loss(0.2, 0.4, 0.5f64).unwrap() - 0.3).abs() < 1e-15);
        assert!(total_loss(0.2, 0.4, -0.1f64).is_err());
    }
}
