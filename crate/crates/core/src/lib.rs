//! Simulation of a passive three-quantum-dot spin entangler.
//!
//! A cluster of three dots (A, B, C) is fed from a source lead on C and
//! drained into leads A and B. Resonant transfer through the chain
//! `|002> ↔ |101> ↔ |110>` splits the singlet formed on dot C into two
//! electrons that leave through different leads.
//!
//! * [`model`]: device parameters and operating points.
//! * [`hilbert`]: the 12-state charge basis and its operators.
//! * [`master`]: Liouvillians, evolution, steady states, suppression map.
//! * [`trajectory`]: quantum-jump event streams and ensembles.
//! * [`stats`]: post-selection correlators, good-pair rate and fidelity.

pub mod error;
pub mod hilbert;
pub mod linalg;
pub mod master;
pub mod model;
pub mod stats;
pub mod trajectory;

pub use error::{Error, Result};
pub use model::{HamiltonianKind, SystemParams};
