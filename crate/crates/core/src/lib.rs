//! Feature-reweighting convolutional network for EEG trial classification.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense tensors with reverse-mode autodiff for the layer set
//!   the network needs, plus [`gradcheck`] for finite-difference validation;
//! - [`layers`]: parameterized layer wrappers with stable parameter names;
//! - [`network`]: the stem / multi-scale feature extraction / feature
//!   reweighting / prediction pipeline with ablation switches;
//! - [`training`]: Xavier init, Adam, the patience learning-rate schedule,
//!   and the stratified cross-validation harness;
//! - [`data`]: trial containers, the EEGB file format, normalization, and a
//!   synthetic EEG generator;
//! - [`eval`]: confusion matrix, accuracy, macro F-measure, Cohen's kappa,
//!   one-vs-rest ROC-AUC, and the paired t-test;
//! - [`explain`]: Grad-CAM temporal attribution;
//! - [`weights`]: the FRWT checkpoint container.

pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
