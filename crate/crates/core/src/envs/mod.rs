//! Experimental environments.

pub mod coordination;
pub mod pursuit;

pub use coordination::{sample_gumbel, CoordinationGame};
pub use pursuit::{PursuitConfig, PursuitGrid, PursuitPolicyFeatures, PursuitState, PursuitValueFeatures};
