//! Duplex-to-monoplex IHC translation with an auxiliary immunofluorescence
//! domain: stain-space math, a phantom corpus, a small CPU network engine,
//! the two-stage trainer and the posterior-based evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` / `f64`); the
//! aliases below fix the common cases.

pub mod data_io;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod phantom;
pub mod scalar;
pub mod stain_space;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type RgbPatch32 = stain_space::RgbPatch<f32>;
pub type RgbPatch64 = stain_space::RgbPatch<f64>;
pub type StainImage32 = stain_space::StainImage<f32>;
pub type StainImage64 = stain_space::StainImage<f64>;
pub type Generator32 = networks::Generator<f32>;
pub type Generator64 = networks::Generator<f64>;
pub type Discriminator32 = networks::Discriminator<f32>;
pub type Discriminator64 = networks::Discriminator<f64>;
pub type PosteriorModel32 = evalkit::PosteriorModel<f32>;
pub type PosteriorModel64 = evalkit::PosteriorModel<f64>;
pub type Stage1Trainer32 = trainer::Stage1Trainer<f32>;
pub type Stage2Trainer32 = trainer::Stage2Trainer<f32>;
