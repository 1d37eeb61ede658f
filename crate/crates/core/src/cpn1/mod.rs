//! CPN1 model representation, evaluation, composition and the dense-tensor oracle.

mod builder;
mod model;
mod partition;
mod random;

pub use builder::{var, ModelBuilder, Poly, Term};
pub use model::{compose, contract_full, Cpn1Model, FullTensorModel, LiftConstraint, SparsityReport};
pub use partition::{der, SignalKind, SignalPartition, SignalVector};
pub use random::{random_model, random_point, seeded, RandomSpec};
