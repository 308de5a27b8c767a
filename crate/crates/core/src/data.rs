//! Synthetic multi-domain segmentation data, splits, and on-disk datasets.
//!
//! Domains share anatomy (ellipse geometry driven by a geometry seed) and
//! differ only in how that anatomy is rendered.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Images (`N x 1 x H x W`, values in `[0, 1]`) with label masks for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset<T> {
    images: Vec<T>,
    masks: Vec<u8>,
    len: usize,
    height: usize,
    width: usize,
    classes: usize,
    pub domain_id: u32,
    pub name: String,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn new(
        images: Vec<T>,
        masks: Vec<u8>,
        [height, width]: [usize; 2],
        classes: usize,
        domain_id: u32,
        name: impl Into<String>,
    ) -> Result<Self> {
        let plane = height * width;
        if plane == 0 || images.len() % plane != 0 {
            return Err(Error::Shape(format!(
                "{} intensities do not tile {height}x{width} images",
                images.len()
            )));
        }
        if masks.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} mask labels for {} pixels",
                masks.len(),
                images.len()
            )));
        }
        if classes < 2 || classes > u8::MAX as usize {
            return Err(Error::config(format!("class count {classes} out of range")));
        }
        if let Some(v) = images.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::data(format!("intensity {v} outside [0, 1]")));
        }
        if let Some(l) = masks.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::data(format!("label {l} >= class count {classes}")));
        }
        Ok(Self {
            len: images.len() / plane,
            images,
            masks,
            height,
            width,
            classes,
            domain_id,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &[T] {
        let p = self.height * self.width;
        &self.images[i * p..(i + 1) * p]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let p = self.height * self.width;
        &self.masks[i * p..(i + 1) * p]
    }

    pub fn images(&self) -> &[T] {
        &self.images
    }

    pub fn masks(&self) -> &[u8] {
        &self.masks
    }

    /// Stacks the selected images into a `B x 1 x H x W` batch.
    pub fn batch_images(&self, idx: &[usize]) -> Result<FeatureMap<T>> {
        let planes: Vec<&[T]> = idx.iter().map(|&i| self.image(i)).collect();
        FeatureMap::stack(&planes, [1, self.height, self.width])
    }

    pub fn batch_masks(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().flat_map(|&i| self.mask(i).iter().copied()).collect()
    }

    /// New dataset holding the selected samples in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let images = idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        Self {
            images,
            masks: self.batch_masks(idx),
            len: idx.len(),
            height: self.height,
            width: self.width,
            classes: self.classes,
            domain_id: self.domain_id,
            name: self.name.clone(),
        }
    }

    /// Same masks and geometry with every image replaced by `f(image)`.
    pub fn map_images(&self, mut f: impl FnMut(&[T]) -> Vec<T>) -> Result<Self> {
        let mut images = Vec::with_capacity(self.images.len());
        for i in 0..self.len {
            images.extend(f(self.image(i)));
        }
        Self::new(
            images,
            self.masks.clone(),
            [self.height, self.width],
            self.classes,
            self.domain_id,
            self.name.clone(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> DomainDataset<U> {
        DomainDataset {
            images: self.images.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            masks: self.masks.clone(),
            len: self.len,
            height: self.height,
            width: self.width,
            classes: self.classes,
            domain_id: self.domain_id,
            name: self.name.clone(),
        }
    }
}

/// Rendering parameters of one synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticStyle {
    /// Background intensity.
    pub base_intensity: f64,
    /// Foreground minus background intensity; negative values invert contrast.
    pub contrast: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Cycles of the sinusoidal texture across the image; `0` disables it.
    pub texture_freq: f64,
}

impl SyntheticStyle {
    pub const TEXTURE_AMPLITUDE: f64 = 0.08;

    pub fn validate(&self) -> Result<()> {
        let fg = self.base_intensity + self.contrast;
        if !(0.0..=1.0).contains(&self.base_intensity) || !(0.0..=1.0).contains(&fg) {
            return Err(Error::config(format!(
                "style levels must lie in [0, 1]: background {}, foreground {fg}",
                self.base_intensity
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !(self.texture_freq >= 0.0 && self.texture_freq.is_finite()) {
            return Err(Error::config("texture_freq must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Image geometry and label layout of generated data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticLayout {
    pub height: usize,
    pub width: usize,
    /// `2` for a single foreground structure, `5` for four distinct organs.
    pub classes: usize,
}

impl Default for SyntheticLayout {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    label: u8,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn image_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index as u64) << 1 | stream);
    rng
}

fn sample_geometry(rng: &mut ChaCha8Rng, layout: &SyntheticLayout) -> Vec<Ellipse> {
    let (h, w) = (layout.height as f64, layout.width as f64);
    if layout.classes <= 2 {
        let n = rng.gen_range(1..=3);
        (0..n)
            .map(|_| Ellipse {
                cy: rng.gen_range(0.25..0.75) * h,
                cx: rng.gen_range(0.25..0.75) * w,
                ry: rng.gen_range(0.08..0.22) * h,
                rx: rng.gen_range(0.08..0.22) * w,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                label: 1,
            })
            .collect()
    } else {
        // one organ per foreground class, anchored around fixed quadrant positions
        let anchors = [(0.32, 0.3), (0.35, 0.7), (0.68, 0.3), (0.68, 0.7)];
        (1..layout.classes)
            .map(|k| {
                let (ay, ax) = anchors[(k - 1) % anchors.len()];
                Ellipse {
                    cy: (ay + rng.gen_range(-0.06..0.06)) * h,
                    cx: (ax + rng.gen_range(-0.06..0.06)) * w,
                    ry: rng.gen_range(0.08..0.15) * h,
                    rx: rng.gen_range(0.08..0.15) * w,
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    label: k as u8,
                }
            })
            .collect()
    }
}

fn render(
    style: &SyntheticStyle,
    layout: &SyntheticLayout,
    seed: u64,
    index: usize,
) -> (Vec<f64>, Vec<u8>) {
    let geometry = sample_geometry(&mut image_rng(seed, index, 0), layout);
    let mut noise_rng = image_rng(seed, index, 1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (h, w) = (layout.height, layout.width);
    let mut img = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    let fg_levels = layout.classes.saturating_sub(1).max(1);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let label = geometry
                .iter()
                .rev()
                .find(|e| e.contains(py, px))
                .map_or(0, |e| e.label);
            let mut v = if label == 0 {
                style.base_intensity
            } else if layout.classes <= 2 {
                style.base_intensity + style.contrast
            } else {
                // organs get distinct fractions of the full contrast
                let frac = 0.55 + 0.45 * (label as f64 - 1.0) / (fg_levels as f64 - 1.0).max(1.0);
                style.base_intensity + style.contrast * frac
            };
            if style.texture_freq > 0.0 {
                let phase = 2.0 * std::f64::consts::PI * style.texture_freq * (px / w as f64 + 0.5 * py / h as f64);
                v += SyntheticStyle::TEXTURE_AMPLITUDE * phase.sin();
            }
            // always draw so the noise stream is style-independent
            let z: f64 = normal.sample(&mut noise_rng);
            v += style.noise_sigma * z;
            img.push(v.clamp(0.0, 1.0));
            mask.push(label);
        }
    }
    (img, mask)
}

/// Generates `n` images of one rendered style from a geometry seed.
///
/// Image `i` depends only on `(seed, i)` and the style, so output is
/// identical for any worker count.
pub fn make_synthetic_domain<T: Scalar>(
    style: &SyntheticStyle,
    layout: &SyntheticLayout,
    n: usize,
    seed: u64,
    domain_id: u32,
    name: &str,
) -> Result<DomainDataset<T>> {
    if n == 0 {
        return Err(Error::config("synthetic domain needs n >= 1"));
    }
    style.validate()?;
    if layout.height == 0 || layout.width == 0 || !(2..=8).contains(&layout.classes) {
        return Err(Error::config(format!("invalid synthetic layout {layout:?}")));
    }
    let rendered: Vec<(Vec<f64>, Vec<u8>)> = (0..n)
        .into_par_iter()
        .map(|i| render(style, layout, seed, i))
        .collect();
    let mut images = Vec::with_capacity(n * layout.height * layout.width);
    let mut masks = Vec::with_capacity(images.capacity());
    for (img, mask) in rendered {
        images.extend(img.into_iter().map(T::lit));
        masks.extend(mask);
    }
    DomainDataset::new(
        images,
        masks,
        [layout.height, layout.width],
        layout.classes,
        domain_id,
        name,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Seeded disjoint split with `round(train_fraction * n)` training samples.
pub fn split<T: Scalar>(ds: &DomainDataset<T>, spec: &SplitSpec) -> Result<(DomainDataset<T>, DomainDataset<T>)> {
    if ds.len() < 2 {
        return Err(Error::config(format!("cannot split {} samples", ds.len())));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let n = ds.len();
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (tr, va) = idx.split_at(n_train);
    let (mut tr, mut va) = (tr.to_vec(), va.to_vec());
    tr.sort_unstable();
    va.sort_unstable();
    Ok((ds.subset(&tr), ds.subset(&va)))
}

/// One domain with its train/validation/test partitions.
#[derive(Debug, Clone)]
pub struct DomainSplits<T> {
    pub name: String,
    pub style: SyntheticStyle,
    pub train: DomainDataset<T>,
    pub val: DomainDataset<T>,
    pub test: DomainDataset<T>,
}

/// Named benchmark preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    BratsLike,
    AbdominalLike,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "brats-like" => Ok(Self::BratsLike),
            "abdominal-like" => Ok(Self::AbdominalLike),
            other => Err(Error::config(format!(
                "unknown scenario {other:?} (expected brats-like or abdominal-like)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BratsLike => "brats-like",
            Self::AbdominalLike => "abdominal-like",
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::BratsLike => 2,
            Self::AbdominalLike => 5,
        }
    }

    /// Source style followed by the three held-out target styles.
    pub fn styles(&self) -> [(&'static str, SyntheticStyle); 4] {
        let s = |b, c, n, t| SyntheticStyle {
            base_intensity: b,
            contrast: c,
            noise_sigma: n,
            texture_freq: t,
        };
        match self {
            Self::BratsLike => [
                ("source", s(0.15, 0.6, 0.03, 0.0)),
                ("target-inverted", s(0.8, -0.55, 0.03, 0.0)),
                ("target-lowcontrast", s(0.45, 0.2, 0.06, 3.0)),
                ("target-bright", s(0.55, 0.4, 0.02, 6.0)),
            ],
            Self::AbdominalLike => [
                ("source-ct", s(0.2, 0.6, 0.03, 0.0)),
                ("target-mri-a", s(0.85, -0.6, 0.03, 0.0)),
                ("target-mri-b", s(0.4, 0.3, 0.06, 4.0)),
                ("target-mri-c", s(0.6, 0.35, 0.02, 7.0)),
            ],
        }
    }
}

/// Sample counts of the shipped benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for ScenarioSizes {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 50,
        }
    }
}

/// The 1-source / 3-target benchmark. Split `s` of every domain uses
/// geometry seed `seed + s`, so corresponding splits share anatomy.
pub fn make_scenario<T: Scalar>(
    kind: ScenarioKind,
    sizes: ScenarioSizes,
    size_px: usize,
    seed: u64,
) -> Result<Vec<DomainSplits<T>>> {
    let layout = SyntheticLayout {
        height: size_px,
        width: size_px,
        classes: kind.classes(),
    };
    kind.styles()
        .iter()
        .enumerate()
        .map(|(d, (name, style))| {
            let gen = |n, off: u64| make_synthetic_domain(style, &layout, n, seed.wrapping_add(off), d as u32, name);
            Ok(DomainSplits {
                name: name.to_string(),
                style: *style,
                train: gen(sizes.train, 0)?,
                val: gen(sizes.val, 1)?,
                test: gen(sizes.test, 2)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// dataset directories

/// Key-value metadata stored next to a dataset's manifest.
pub type DatasetMeta = BTreeMap<String, String>;

/// Intensity encoding recorded in `meta`: stored values are the intensities
/// themselves, so the reader must not min-max rescale them.
pub const META_ABSOLUTE: &str = "absolute";

/// Writes `images/NNNN.png` (16-bit grayscale), `masks/NNNN.png` (8-bit labels),
/// `manifest` and `meta`.
pub fn write_dataset_dir<T: Scalar>(ds: &DomainDataset<T>, dir: &Path, extra_meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let (h, w) = (ds.height() as u32, ds.width() as u32);
    let mut manifest = String::new();
    for i in 0..ds.len() {
        let img_rel = format!("images/{i:04}.png");
        let mask_rel = format!("masks/{i:04}.png");
        let px: Vec<u16> = ds
            .image(i)
            .iter()
            .map(|v| (v.to_f64_lossy() * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, px).expect("sized buffer");
        img.save(dir.join(&img_rel))
            .map_err(|e| Error::data(format!("writing {img_rel}: {e}")))?;
        let mask: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w, h, ds.mask(i).to_vec()).expect("sized buffer");
        mask.save(dir.join(&mask_rel))
            .map_err(|e| Error::data(format!("writing {mask_rel}: {e}")))?;
        manifest.push_str(&format!("{img_rel}\t{mask_rel}\n"));
    }
    fs::write(dir.join("manifest"), manifest)?;
    let mut meta = extra_meta.clone();
    meta.insert("domain_id".into(), ds.domain_id.to_string());
    meta.insert("name".into(), ds.name.clone());
    meta.insert("classes".into(), ds.classes().to_string());
    meta.insert("intensity".into(), META_ABSOLUTE.into());
    fs::write(dir.join("meta"), format_meta(&meta))?;
    Ok(())
}

pub fn format_meta(meta: &DatasetMeta) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_meta(text: &str) -> Result<DatasetMeta> {
    let mut out = DatasetMeta::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("meta line {}: expected key=value", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_gray(path: &Path) -> Result<(Vec<f64>, u32, u32, bool)> {
    let img = image::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    // sixteen-bit sources keep their depth, everything else is read as 8-bit luma
    let (vals, is16) = match img {
        image::DynamicImage::ImageLuma16(b) => (b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(), true),
        other => (other.into_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(), false),
    };
    Ok((vals, w, h, is16))
}

fn read_labels(path: &Path) -> Result<(Vec<u8>, u32, u32)> {
    let img = image::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    Ok((img.into_luma8().into_raw(), w, h))
}

/// Loads image/mask pairs listed in `manifest` (one `image<TAB>mask` per line,
/// paths relative to `dir`). Intensities are min-max scaled per image; a
/// constant image becomes all zeros.
pub fn load_external<T: Scalar>(dir: &Path, manifest: &Path, classes: usize, domain_id: u32, name: &str) -> Result<DomainDataset<T>> {
    load_pairs(dir, manifest, classes, domain_id, name, true)
}

fn load_pairs<T: Scalar>(
    dir: &Path,
    manifest: &Path,
    classes: usize,
    domain_id: u32,
    name: &str,
    rescale: bool,
) -> Result<DomainDataset<T>> {
    let text = fs::read_to_string(manifest).map_err(|e| load_err(manifest, e.to_string()))?;
    let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| load_err(manifest, format!("line {}: expected image<TAB>mask", no + 1)))?;
        pairs.push((dir.join(a.trim()), dir.join(b.trim())));
    }
    if pairs.is_empty() {
        return Err(load_err(manifest, "manifest lists no image/mask pairs"));
    }
    let loaded: Vec<Result<(Vec<f64>, Vec<u8>, [u32; 2])>> = pairs
        .par_iter()
        .map(|(ip, mp)| {
            let (mut vals, w, h, _) = read_gray(ip)?;
            let (labels, mw, mh) = read_labels(mp)?;
            if (w, h) != (mw, mh) {
                return Err(load_err(
                    ip,
                    format!("image is {w}x{h} but mask {} is {mw}x{mh}", mp.display()),
                ));
            }
            if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
                return Err(load_err(mp, format!("label {l} not below class count {classes}")));
            }
            if rescale {
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let range = hi - lo;
                vals.iter_mut().for_each(|v| *v = if range > 0.0 { (*v - lo) / range } else { 0.0 });
            }
            Ok((vals, labels, [w, h]))
        })
        .collect();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut dims: Option<[u32; 2]> = None;
    for (r, (ip, _)) in loaded.into_iter().zip(&pairs) {
        let (vals, labels, wh) = r?;
        if *dims.get_or_insert(wh) != wh {
            return Err(load_err(ip, "image size differs from the first pair"));
        }
        images.extend(vals.into_iter().map(T::lit));
        masks.extend(labels);
    }
    let [w, h] = dims.expect("at least one pair");
    DomainDataset::new(images, masks, [h as usize, w as usize], classes, domain_id, name)
}

/// Reads a directory written by [`write_dataset_dir`] (or any directory with a
/// `manifest`; without `intensity=absolute` in `meta` it is min-max scaled).
pub fn read_dataset_dir<T: Scalar>(dir: &Path) -> Result<(DomainDataset<T>, DatasetMeta)> {
    let manifest = dir.join("manifest");
    if !manifest.is_file() {
        return Err(load_err(dir, "missing manifest"));
    }
    let meta_path = dir.join("meta");
    let meta = if meta_path.is_file() {
        parse_meta(&fs::read_to_string(&meta_path)?)?
    } else {
        DatasetMeta::new()
    };
    let get = |k: &str| meta.get(k).map(String::as_str);
    let classes = match get("classes") {
        Some(v) => v.parse().map_err(|_| load_err(&meta_path, format!("bad classes value {v:?}")))?,
        None => 2,
    };
    let domain_id = match get("domain_id") {
        Some(v) => v.parse().map_err(|_| load_err(&meta_path, format!("bad domain_id value {v:?}")))?,
        None => 0,
    };
    let name = get("name").unwrap_or("external").to_string();
    let rescale = get("intensity") != Some(META_ABSOLUTE);
    let ds = load_pairs(dir, &manifest, classes, domain_id, &name, rescale)?;
    Ok((ds, meta))
}
