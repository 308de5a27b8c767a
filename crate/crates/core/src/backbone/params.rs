use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered collection of parameter (or gradient) arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new(tensors: Vec<Vec<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            tensors: other.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &[T] {
        &self.tensors[i]
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps a flat index to `(tensor, offset)`.
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return Some((i, flat));
            }
            flat -= t.len();
        }
        None
    }

    pub fn get_flat(&self, flat: usize) -> T {
        let (i, j) = self.locate(flat).expect("flat index in range");
        self.tensors[i][j]
    }

    pub fn set_flat(&mut self, flat: usize, v: T) {
        let (i, j) = self.locate(flat).expect("flat index in range");
        self.tensors[i][j] = v;
    }

    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        let same = self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.len() == b.len());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets are not aligned".into()))
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        self.check_aligned(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += scale * y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flatten()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.iter()
            .zip(other.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|v| U::lit(v.to_f64_lossy())).collect())
                .collect(),
        }
    }
}

/// Plain gradient step `theta - lr * grads`, returned as a new parameter set.
pub fn param_update<T: Scalar>(params: &Params<T>, grads: &Params<T>, lr: T) -> Result<Params<T>> {
    let mut out = params.clone();
    out.add_scaled(grads, -lr)?;
    Ok(out)
}
