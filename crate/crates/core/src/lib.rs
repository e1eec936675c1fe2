//! Per-query input resolution routing for vision-language models.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the CLI and gateway.

pub mod anls;
pub mod cost;
pub mod imageops;
pub mod labeler;
pub mod menu;
pub mod routing;
pub mod scalar;
pub mod selector;
pub mod store;
pub mod synth;
pub mod vlm;

pub use anls::{anls, exact_match, MetricKind, UtilityScore};
pub use labeler::{LabelingConfig, SufficiencyLabel};
pub use menu::ResolutionMenu;
pub use scalar::Scalar;
pub use selector::{ClassifierHead, FeatureVector, ProbabilityVector, Selection, SelectorError, TrainConfig};

pub type Head = ClassifierHead<f64>;
pub type Head32 = ClassifierHead<f32>;
pub type Features = FeatureVector<f64>;
pub type Features32 = FeatureVector<f32>;
pub type Probabilities = ProbabilityVector<f64>;
