//! Implicit multilinear (iMTI) models in CPN1 form.
//!
//! Build models from blocks ([`blocks`]), simulate them as DAEs ([`dae`]),
//! linearize them analytically ([`linearize`]) and assess small-signal
//! stability through generalized eigenvalues ([`gep`]). The [`bench3bus`]
//! module assembles a three-bus grid-forming / grid-following benchmark.

pub mod bench3bus;
pub mod blocks;
pub mod cpn1;
pub mod dae;
pub mod error;
pub mod gep;
pub mod linearize;
pub mod par;
mod serde_rows;

pub use cpn1::{compose, contract_full, Cpn1Model, FullTensorModel, ModelBuilder, Poly, SignalKind, SignalPartition, SignalVector};
pub use error::{Error, Result};
