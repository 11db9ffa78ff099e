//! Multiple-instance learning with domain adaptation and confidence-weighted
//! pseudo-labels.
//!
//! The crate holds the data types, a synthetic bag generator, the model and
//! its losses, the pseudo-labeling rules, the three-step trainer and the
//! evaluation metrics. The `milda-harness` crate drives experiments on top of
//! it.

pub mod container;
pub mod error;
pub mod gradcheck;
pub mod kmeans;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pseudo;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    training_view, validate_bag_consistency, Bag, Domain, DomainDataset, Instance, InstanceRef,
    LabelOrigin, PseudoLabelAssignment, Split, Violation,
};
