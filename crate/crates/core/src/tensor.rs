//! Rank-4 activation arrays (`batch x channels x height x width`).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major `B x C x H x W` array of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    /// Wraps `data`, checking the shape invariants and that every entry is finite.
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let fm = Self::new_unchecked_finite(shape, data)?;
        if let Some(pos) = fm.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite activation at flat index {pos}")));
        }
        Ok(fm)
    }

    /// Like [`FeatureMap::new`] but skips the finiteness scan.
    pub(crate) fn new_unchecked_finite(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("all extents must be >= 1, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::new_unchecked_finite(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Result<Self> {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([bi, ci, y, x]));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    /// Stacks equally shaped single instances (`C x H x W` each) into one batch.
    pub fn stack(instances: &[&[T]], chw: [usize; 3]) -> Result<Self> {
        let plane = chw.iter().product::<usize>();
        let mut data = Vec::with_capacity(plane * instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if inst.len() != plane {
                return Err(Error::Shape(format!(
                    "instance {i} has {} values, expected {plane}",
                    inst.len()
                )));
            }
            data.extend_from_slice(inst);
        }
        Self::new_unchecked_finite([instances.len(), chw[0], chw[1], chw[2]], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of spatial positions per channel plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// All channels of one instance, `C x H x W`.
    pub fn instance(&self, b: usize) -> &[T] {
        let n = self.shape[1] * self.plane();
        &self.data[b * n..(b + 1) * n]
    }

    /// One `H x W` plane.
    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn get(&self, idx: [usize; 4]) -> T {
        let [_, c, h, w] = self.shape;
        self.data[((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]]
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel class probabilities, `B x K x H x W`, summing to one over `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap<T>(FeatureMap<T>);

impl<T: Scalar> PredictionMap<T> {
    /// Validates the probability-simplex invariant (tolerance `1e-5` on the class sum).
    pub fn new(map: FeatureMap<T>) -> Result<Self> {
        let [b, k, h, w] = map.shape();
        let plane = h * w;
        let tol = T::lit(1e-5);
        for bi in 0..b {
            let inst = map.instance(bi);
            for p in 0..plane {
                let mut s = T::zero();
                for ki in 0..k {
                    let v = inst[ki * plane + p];
                    if v < T::zero() || v > T::one() || !v.is_finite() {
                        return Err(Error::data(format!(
                            "probability {v} outside [0,1] at instance {bi}, class {ki}"
                        )));
                    }
                    s += v;
                }
                if (s - T::one()).abs() > tol {
                    return Err(Error::data(format!(
                        "class probabilities sum to {s} at instance {bi}, pixel {p}"
                    )));
                }
            }
        }
        Ok(Self(map))
    }

    pub(crate) fn new_trusted(map: FeatureMap<T>) -> Self {
        Self(map)
    }

    /// One-hot prediction from a label mask (`B` masks of `H x W` labels).
    pub fn one_hot(labels: &[u8], shape: [usize; 4]) -> Result<Self> {
        let [b, k, h, w] = shape;
        if labels.len() != b * h * w {
            return Err(Error::Shape(format!(
                "label count {} does not match {b}x{h}x{w}",
                labels.len()
            )));
        }
        let plane = h * w;
        let mut data = vec![T::zero(); b * k * plane];
        for bi in 0..b {
            for p in 0..plane {
                let l = labels[bi * plane + p] as usize;
                if l >= k {
                    return Err(Error::data(format!("label {l} >= class count {k}")));
                }
                data[(bi * k + l) * plane + p] = T::one();
            }
        }
        Ok(Self(FeatureMap::new_unchecked_finite(shape, data)?))
    }

    pub fn map(&self) -> &FeatureMap<T> {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap<T> {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    /// Arg-max label per pixel, `B x H x W`.
    pub fn argmax(&self) -> Vec<u8> {
        let [b, k, h, w] = self.0.shape();
        let plane = h * w;
        let mut out = vec![0u8; b * plane];
        for bi in 0..b {
            let inst = self.0.instance(bi);
            for p in 0..plane {
                let mut best = 0;
                for ki in 1..k {
                    if inst[ki * plane + p] > inst[best * plane + p] {
                        best = ki;
                    }
                }
                out[bi * plane + p] = best as u8;
            }
        }
        out
    }
}
