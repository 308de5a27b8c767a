//! Overlap and boundary-distance metrics on binary masks.

use crate::error::{Error, Result};

/// Boolean foreground mask, row-major `H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} pixels, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Pixels equal to `class` in a label map.
    pub fn from_labels(labels: &[u8], height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground pixels with at least one 4-neighbour outside the
    /// foreground; the image border counts as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(format!(
                "mask shapes {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice_coefficient(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (mut inter, mut sum) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        sum += p as usize + g as usize;
    }
    if sum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / sum as f64)
}

/// Symmetric Hausdorff distance between the boundary pixel sets, in pixels.
///
/// One empty mask yields the image diagonal; two empty masks yield 0.
pub fn hausdorff_distance(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = (pred.height as f64, pred.width as f64);
            return Ok((h * h + w * w).sqrt());
        }
        _ => {}
    }
    let bp = pred.boundary();
    let bg = gt.boundary();
    let d2 = directed_max_sq(&bp, &sq_distance_field(&bg, gt.height, gt.width), gt.width)
        .max(directed_max_sq(&bg, &sq_distance_field(&bp, pred.height, pred.width), pred.width));
    Ok((d2 as f64).sqrt())
}

fn directed_max_sq(points: &[(usize, usize)], field: &[u64], width: usize) -> u64 {
    points.iter().map(|&(y, x)| field[y * width + x]).max().unwrap_or(0)
}

/// Exact squared Euclidean distance from every pixel to the nearest point of
/// `points`: per-column nearest distances, then a row-wise minimisation.
fn sq_distance_field(points: &[(usize, usize)], h: usize, w: usize) -> Vec<u64> {
    const INF: u64 = u64::MAX / 4;
    let mut site = vec![false; h * w];
    for &(y, x) in points {
        site[y * w + x] = true;
    }
    // g[y][x]: vertical distance to the nearest site in column x
    let mut g = vec![INF; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if site[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                g[y * w + x] = (y - l) as u64;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if site[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                g[y * w + x] = g[y * w + x].min((l - y) as u64);
            }
        }
    }
    let mut out = vec![INF; h * w];
    for y in 0..h {
        let row = &g[y * w..(y + 1) * w];
        for x in 0..w {
            let mut best = INF;
            for (x2, &gv) in row.iter().enumerate() {
                if gv == INF {
                    continue;
                }
                let dx = x.abs_diff(x2) as u64;
                best = best.min(dx * dx + gv * gv);
            }
            out[y * w + x] = best;
        }
    }
    out
}

/// Per-class Dice and Hausdorff distance for one label map, foreground classes only.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub dice: Vec<f64>,
    pub hausdorff: Vec<f64>,
}

impl ClassScores {
    pub fn mean_dice(&self) -> f64 {
        mean(&self.dice)
    }

    pub fn mean_hausdorff(&self) -> f64 {
        mean(&self.hausdorff)
    }
}

pub fn score_labels(pred: &[u8], gt: &[u8], height: usize, width: usize, classes: usize) -> Result<ClassScores> {
    if pred.len() != gt.len() || pred.len() != height * width {
        return Err(Error::dim(format!(
            "label maps of {} and {} pixels for a {height}x{width} image",
            pred.len(),
            gt.len()
        )));
    }
    let mut dice = Vec::with_capacity(classes.saturating_sub(1));
    let mut hausdorff = Vec::with_capacity(classes.saturating_sub(1));
    for k in 1..classes as u8 {
        let p = BinaryMask::from_labels(pred, height, width, k)?;
        let g = BinaryMask::from_labels(gt, height, width, k)?;
        dice.push(dice_coefficient(&p, &g)?);
        hausdorff.push(hausdorff_distance(&p, &g)?);
    }
    Ok(ClassScores { dice, hausdorff })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
