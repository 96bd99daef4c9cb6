//! Upper and lower bounds on the largest n-block achievable rate of additive
//! Gaussian noise channels with noisy linear feedback.
//!
//! The crate builds the determinant-maximization programs for the upper and
//! lower bounds, solves them with a path-following barrier method, and
//! recovers certified coding schemes. Exact baselines (open-loop water-filling,
//! ideal-feedback capacity), closed-form Gaussian information measures and a
//! Monte Carlo cross-check round it out.

pub mod bounds;
pub mod channel;
pub mod error;
pub mod info;
pub mod maxdet;
pub mod numerics;
pub mod simulate;

pub use bounds::{compute_bound, open_loop_capacity, BoundKind, BoundResult};
pub use channel::ChannelSpec;
pub use error::{Error, Result};
pub use info::CodingScheme;
pub use maxdet::{MaxDetInstance, SolveOptions, SolveReport, SolveStatus};
pub use numerics::{StrictLowerTri, SymMatrix};
