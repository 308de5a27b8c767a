//! Style-statistics meta-learning for single-source domain-generalized
//! segmentation: style recall and banking, alignment losses, Bezier intensity
//! augmentation, a small U-Net, the episodic meta loop, feedback-driven
//! retraining, and segmentation metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32`/`*64` aliases below fix the precision.

pub mod augmentation;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fdrt;
pub mod losses;
pub mod meta_loop;
pub mod metrics;
pub mod scalar;
pub mod style_bank;
pub mod style_stats;
pub mod tensor;

pub use backbone::{Arch, SegModel};
pub use config::TrainConfig;
pub use data::DomainDataset;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use style_bank::StyleBank;
pub use style_stats::{StyleRecallConfig, StyleStats};
pub use tensor::{FeatureMap, PredictionMap};

pub type FeatureMap32 = FeatureMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
pub type PredictionMap32 = PredictionMap<f32>;
pub type PredictionMap64 = PredictionMap<f64>;
pub type StyleStats32 = StyleStats<f32>;
pub type StyleStats64 = StyleStats<f64>;
pub type StyleBank32 = StyleBank<f32>;
pub type StyleBank64 = StyleBank<f64>;
pub type DomainDataset32 = DomainDataset<f32>;
pub type DomainDataset64 = DomainDataset<f64>;
pub type SegModel32 = SegModel<f32>;
pub type SegModel64 = SegModel<f64>;
