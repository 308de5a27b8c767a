//! Run configuration: flat `key = value` text, `#` comments, unknown keys rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::OptimizerKind;
use crate::error::{Error, Result};

/// How the query-step update relates to the shared parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaUpdateMode {
    /// Every episode: `theta' = theta - gamma g`, then `theta = theta' - beta g'`.
    CarryForward,
    /// Per domain: every support batch restarts from the domain's initial
    /// parameters, query batches update the resulting copy sequentially, and
    /// the copy replaces the shared parameters when the domain is done.
    Literal,
}

impl MetaUpdateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "carry_forward" => Ok(Self::CarryForward),
            "literal" => Ok(Self::Literal),
            other => Err(Error::config(format!("meta_update_mode {other:?} (expected carry_forward or literal)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::CarryForward => "carry_forward",
            Self::Literal => "literal",
        }
    }
}

/// Where domain style statistics are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleSource {
    /// Shallow hook-layer activations.
    Feature,
    /// The raw single-channel input batch.
    Input,
}

impl StyleSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(Self::Feature),
            "input" => Ok(Self::Input),
            other => Err(Error::config(format!("style_source {other:?} (expected feature or input)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Feature => "feature",
            Self::Input => "input",
        }
    }
}

/// Logarithm base inside the sampling-gap formula `1 - exp(log_b(m))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapLogBase {
    Ten,
    E,
}

impl GapLogBase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "10" => Ok(Self::Ten),
            "e" => Ok(Self::E),
            other => Err(Error::config(format!("gap_log_base {other:?} (expected 10 or e)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ten => "10",
            Self::E => "e",
        }
    }
}

/// Whether the dynamic weight and the mixed recall statistics are
/// differentiated through or held constant during back-propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleGrad {
    Detached,
    Full,
}

impl StyleGrad {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "detached" => Ok(Self::Detached),
            "full" => Ok(Self::Full),
            other => Err(Error::config(format!("style_grad {other:?} (expected detached or full)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Detached => "detached",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::config(format!("precision {other:?} (expected f32 or f64)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

/// Every tunable of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub beta: f64,
    pub eta: f64,
    pub epochs_meta: usize,
    pub epochs_fdrt: usize,
    pub batch_size: usize,
    /// Cap on episodes per domain and epoch; 0 means one full pass.
    pub episodes_per_domain: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub sensitivity: f64,
    pub margin: f64,
    pub epsilon: f64,
    pub num_aug_domains: usize,
    pub aug_strength: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seeds: Vec<u64>,
    pub mka: bool,
    pub metastyle: bool,
    pub fdrt: bool,
    pub l_align: bool,
    pub l_cons: bool,
    pub meta_update_mode: MetaUpdateMode,
    pub style_source: StyleSource,
    pub style_grad: StyleGrad,
    pub gap_log_base: GapLogBase,
    pub meta_optimizer: OptimizerKind,
    pub fdrt_optimizer: OptimizerKind,
    pub fdrt_max_rounds: usize,
    pub fdrt_plateau_tol: f64,
    pub fdrt_meta_epochs: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub precision: Precision,
    pub scenario: String,
    pub image_size: usize,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            beta: 0.005,
            eta: 0.01,
            epochs_meta: 200,
            epochs_fdrt: 100,
            batch_size: 8,
            episodes_per_domain: 0,
            alpha: 0.5,
            lambda: 0.5,
            sensitivity: 10.0,
            margin: 1.0,
            epsilon: 1e-5,
            num_aug_domains: 3,
            aug_strength: 0.9,
            lr_decay_factor: 0.5,
            lr_decay_every: 20,
            seeds: vec![0, 1, 2, 3, 4],
            mka: true,
            metastyle: true,
            fdrt: true,
            l_align: true,
            l_cons: true,
            meta_update_mode: MetaUpdateMode::CarryForward,
            style_source: StyleSource::Feature,
            style_grad: StyleGrad::Detached,
            gap_log_base: GapLogBase::Ten,
            meta_optimizer: OptimizerKind::Sgd,
            fdrt_optimizer: OptimizerKind::Adam,
            fdrt_max_rounds: 3,
            fdrt_plateau_tol: 0.002,
            fdrt_meta_epochs: 0,
            depth: 3,
            base_channels: 16,
            precision: Precision::F32,
            scenario: "brats-like".into(),
            image_size: 64,
            data_seed: 2024,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl TrainConfig {
    /// Keys in snapshot order.
    pub const KEYS: &'static [&'static str] = &[
        "gamma",
        "beta",
        "eta",
        "epochs_meta",
        "epochs_fdrt",
        "batch_size",
        "episodes_per_domain",
        "alpha",
        "lambda",
        "sensitivity",
        "margin",
        "epsilon",
        "num_aug_domains",
        "aug_strength",
        "lr_decay_factor",
        "lr_decay_every",
        "seeds",
        "mka",
        "metastyle",
        "fdrt",
        "l_align",
        "l_cons",
        "meta_update_mode",
        "style_source",
        "style_grad",
        "gap_log_base",
        "meta_optimizer",
        "fdrt_optimizer",
        "fdrt_max_rounds",
        "fdrt_plateau_tol",
        "fdrt_meta_epochs",
        "depth",
        "base_channels",
        "precision",
        "scenario",
        "image_size",
        "data_seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "gamma" => self.gamma = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "eta" => self.eta = num(key, v)?,
            "epochs_meta" => self.epochs_meta = num(key, v)?,
            "epochs_fdrt" => self.epochs_fdrt = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "episodes_per_domain" => self.episodes_per_domain = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "sensitivity" => self.sensitivity = num(key, v)?,
            "margin" => self.margin = num(key, v)?,
            "epsilon" => self.epsilon = num(key, v)?,
            "num_aug_domains" => self.num_aug_domains = num(key, v)?,
            "aug_strength" => self.aug_strength = num(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, v)?,
            "lr_decay_every" => self.lr_decay_every = num(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?
            }
            "mka" => self.mka = flag(key, v)?,
            "metastyle" => self.metastyle = flag(key, v)?,
            "fdrt" => self.fdrt = flag(key, v)?,
            "l_align" => self.l_align = flag(key, v)?,
            "l_cons" => self.l_cons = flag(key, v)?,
            "meta_update_mode" => self.meta_update_mode = MetaUpdateMode::parse(v)?,
            "style_source" => self.style_source = StyleSource::parse(v)?,
            "style_grad" => self.style_grad = StyleGrad::parse(v)?,
            "gap_log_base" => self.gap_log_base = GapLogBase::parse(v)?,
            "meta_optimizer" => self.meta_optimizer = OptimizerKind::parse(v)?,
            "fdrt_optimizer" => self.fdrt_optimizer = OptimizerKind::parse(v)?,
            "fdrt_max_rounds" => self.fdrt_max_rounds = num(key, v)?,
            "fdrt_plateau_tol" => self.fdrt_plateau_tol = num(key, v)?,
            "fdrt_meta_epochs" => self.fdrt_meta_epochs = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "base_channels" => self.base_channels = num(key, v)?,
            "precision" => self.precision = Precision::parse(v)?,
            "scenario" => self.scenario = v.to_string(),
            "image_size" => self.image_size = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Applies a configuration text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "gamma" => self.gamma.to_string(),
            "beta" => self.beta.to_string(),
            "eta" => self.eta.to_string(),
            "epochs_meta" => self.epochs_meta.to_string(),
            "epochs_fdrt" => self.epochs_fdrt.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "episodes_per_domain" => self.episodes_per_domain.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda" => self.lambda.to_string(),
            "sensitivity" => self.sensitivity.to_string(),
            "margin" => self.margin.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "num_aug_domains" => self.num_aug_domains.to_string(),
            "aug_strength" => self.aug_strength.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "lr_decay_every" => self.lr_decay_every.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "mka" => self.mka.to_string(),
            "metastyle" => self.metastyle.to_string(),
            "fdrt" => self.fdrt.to_string(),
            "l_align" => self.l_align.to_string(),
            "l_cons" => self.l_cons.to_string(),
            "meta_update_mode" => self.meta_update_mode.name().into(),
            "style_source" => self.style_source.name().into(),
            "style_grad" => self.style_grad.name().into(),
            "gap_log_base" => self.gap_log_base.name().into(),
            "meta_optimizer" => self.meta_optimizer.name().into(),
            "fdrt_optimizer" => self.fdrt_optimizer.name().into(),
            "fdrt_max_rounds" => self.fdrt_max_rounds.to_string(),
            "fdrt_plateau_tol" => self.fdrt_plateau_tol.to_string(),
            "fdrt_meta_epochs" => self.fdrt_meta_epochs.to_string(),
            "depth" => self.depth.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "precision" => self.precision.name().into(),
            "scenario" => self.scenario.clone(),
            "image_size" => self.image_size.to_string(),
            "data_seed" => self.data_seed.to_string(),
            _ => unreachable!("key list and match arms agree"),
        }
    }

    /// Full snapshot; parsing it reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("gamma", self.gamma), ("beta", self.beta), ("eta", self.eta), ("sensitivity", self.sensitivity), ("margin", self.margin), ("epsilon", self.epsilon)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{k} = {v} must be positive")));
            }
        }
        let unit = [("alpha", self.alpha), ("lambda", self.lambda), ("aug_strength", self.aug_strength)];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{k} = {v} outside [0, 1]")));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(format!("lr_decay_factor = {} outside (0, 1]", self.lr_decay_factor)));
        }
        if !(self.fdrt_plateau_tol >= 0.0 && self.fdrt_plateau_tol.is_finite()) {
            return Err(Error::config("fdrt_plateau_tol must be non-negative"));
        }
        let at_least_one = [
            ("epochs_meta", self.epochs_meta),
            ("epochs_fdrt", self.epochs_fdrt),
            ("batch_size", self.batch_size),
            ("num_aug_domains", self.num_aug_domains),
            ("lr_decay_every", self.lr_decay_every),
            ("fdrt_max_rounds", self.fdrt_max_rounds),
            ("base_channels", self.base_channels),
        ];
        for (k, v) in at_least_one {
            if v == 0 {
                return Err(Error::config(format!("{k} must be at least 1")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds list is empty"));
        }
        if !(2..=6).contains(&self.depth) {
            return Err(Error::config(format!("depth = {} outside [2, 6]", self.depth)));
        }
        let m = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % m != 0 {
            return Err(Error::config(format!(
                "image_size = {} must be a positive multiple of {m}",
                self.image_size
            )));
        }
        crate::data::ScenarioKind::parse(&self.scenario)?;
        Ok(())
    }

    /// Learning rate at `epoch` for base rate `base`.
    pub fn decayed(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_documented_values() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.gamma, c.beta, c.eta), (0.01, 0.005, 0.01));
        assert_eq!((c.epochs_meta, c.epochs_fdrt, c.batch_size), (200, 100, 8));
        assert_eq!((c.alpha, c.lambda, c.sensitivity, c.margin, c.epsilon), (0.5, 0.5, 10.0, 1.0, 1e-5));
        assert_eq!(c.num_aug_domains, 3);
        assert_eq!(c.seeds.len(), 5);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = TrainConfig::default();
        c.apply_text("gamma=0.02\nmka = off # comment\nseeds=3,9\nmeta_update_mode=literal\ngap_log_base=e").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.seeds, vec![3, 9]);
        assert!(!back.mka);
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        assert!(matches!(TrainConfig::from_text("gama=0.1"), Err(Error::Config(_))));
        assert!(TrainConfig::from_text("alpha=1.5").is_err());
        assert!(TrainConfig::from_text("batch_size=0").is_err());
        assert!(TrainConfig::from_text("image_size=60").is_err());
        assert!(TrainConfig::from_text("mka=maybe").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn decay_schedule_is_exact() {
        let c = TrainConfig::default();
        assert_eq!(c.decayed(0.01, 0), 0.01);
        assert_eq!(c.decayed(0.01, 19), 0.01);
        assert_eq!(c.decayed(0.01, 20), 0.005);
        assert_eq!(c.decayed(0.01, 45), 0.0025);
    }
}
