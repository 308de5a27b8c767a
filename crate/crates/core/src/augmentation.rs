//! Nonlinear intensity remapping with random cubic Bezier curves.
//!
//! Control abscissae are fixed at `0, 1/3, 2/3, 1`, which makes the curve's
//! horizontal coordinate equal to its parameter; the map is therefore the
//! Bernstein polynomial `y(x) = sum_i B_i(x) v_i` of the control values.

use rand::Rng;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of lookup-table samples used by [`apply_bezier`].
pub const LUT_BINS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BezierCurve {
    /// Control values at `t = 0, 1/3, 2/3, 1`.
    pub values: [f64; 4],
    /// Evaluate at `1 - x`, swapping which endpoint each end of the range hits.
    pub inverted: bool,
}

impl BezierCurve {
    pub fn identity() -> Self {
        Self {
            values: [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            inverted: false,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = if self.inverted { 1.0 - x } else { x };
        let u = 1.0 - t;
        let [a, b, c, d] = self.values;
        let y = u * u * u * a + 3.0 * u * u * t * b + 3.0 * u * t * t * c + t * t * t * d;
        y.clamp(0.0, 1.0)
    }

    /// `LUT_BINS` evenly spaced samples over `[0, 1]`.
    pub fn lookup_table(&self) -> Vec<f64> {
        (0..LUT_BINS)
            .map(|i| self.eval(i as f64 / (LUT_BINS - 1) as f64))
            .collect()
    }

    /// True when the control values are nondecreasing and the curve is not inverted.
    pub fn is_monotone(&self) -> bool {
        !self.inverted && self.values.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Draws control values uniformly in `[0, 1]`, blends them toward the identity
/// line by `1 - strength`, and inverts with probability 1/2 (never at strength 0).
pub fn sample_bezier<R: Rng + ?Sized>(rng: &mut R, strength: f64) -> BezierCurve {
    let strength = strength.clamp(0.0, 1.0);
    let id = BezierCurve::identity().values;
    let mut values = [0.0; 4];
    for (v, base) in values.iter_mut().zip(id) {
        let r: f64 = rng.gen();
        *v = strength * r + (1.0 - strength) * base;
    }
    let flip: bool = rng.gen();
    BezierCurve {
        values: if strength == 0.0 { id } else { values },
        inverted: flip && strength > 0.0,
    }
}

/// Remaps every intensity through the curve's lookup table with linear interpolation.
pub fn apply_bezier<T: Scalar>(image: &[T], curve: &BezierCurve) -> Result<Vec<T>> {
    apply_lut(image, &curve.lookup_table())
}

fn apply_lut<T: Scalar>(image: &[T], lut: &[f64]) -> Result<Vec<T>> {
    let top = (lut.len() - 1) as f64;
    image
        .iter()
        .map(|&v| {
            let x = v.to_f64_lossy();
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::data(format!("intensity {x} outside [0, 1]")));
            }
            let pos = x * top;
            let i = (pos.floor() as usize).min(lut.len() - 2);
            let frac = pos - i as f64;
            let y = lut[i] + (lut[i + 1] - lut[i]) * frac;
            Ok(T::lit(y.clamp(0.0, 1.0)))
        })
        .collect()
}

/// Builds `count` augmented copies of `src`, one fresh curve per copy.
///
/// Masks are copied unchanged; ids continue sequentially after `src.domain_id`.
pub fn build_augmented_domains<T: Scalar, R: Rng + ?Sized>(
    src: &DomainDataset<T>,
    count: usize,
    strength: f64,
    rng: &mut R,
) -> Result<(Vec<DomainDataset<T>>, Vec<BezierCurve>)> {
    if count < 1 {
        return Err(Error::config("need at least one augmented domain"));
    }
    let curves: Vec<BezierCurve> = (0..count).map(|_| sample_bezier(rng, strength)).collect();
    let domains = curves
        .iter()
        .enumerate()
        .map(|(a, curve)| apply_curve_to_domain(src, curve, src.domain_id + 1 + a as u32, &format!("{}-aug{}", src.name, a + 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok((domains, curves))
}

/// Applies a fixed curve to every image of `src`, relabeling the domain.
pub fn apply_curve_to_domain<T: Scalar>(src: &DomainDataset<T>, curve: &BezierCurve, domain_id: u32, name: &str) -> Result<DomainDataset<T>> {
    let lut = curve.lookup_table();
    let mut images = Vec::with_capacity(src.images().len());
    for i in 0..src.len() {
        images.extend(apply_lut(src.image(i), &lut)?);
    }
    DomainDataset::new(
        images,
        src.masks().to_vec(),
        [src.height(), src.width()],
        src.classes(),
        domain_id,
        name,
    )
}
