//! Differentially private training toolkit: a moments accountant for the
//! sampled Gaussian mechanism, DP-SGD over a dense feedforward network, and
//! differentially private PCA preprocessing.

// `!(x > 0.0)` style guards are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod container;
pub mod data;
pub mod dppca;
pub mod dpsgd;
pub mod mechanisms;
pub mod nn;
pub mod numeric;

pub use accountant::{
    AccountantError, IntegrationConfig, LogMomentLedger, MomentsAccountant, PrivacySpend, SampledGaussianStep,
};
pub use data::Dataset;
pub use dppca::ProjectionMatrix;
pub use dpsgd::{TrainingConfig, TrainingReport};
pub use mechanisms::{ClipConfig, NoiseSource};
pub use nn::{LabeledExample, MlpParams};
