//! Synthetic problem families with exact oracles.

pub mod diffusion;
pub mod gvi;

pub use diffusion::{diffusion_oracle, generate_diffusion, DiffusionSpec, PoreNetwork};
pub use gvi::{generate_gvi, greedy_policy, policy_iteration_oracle, value_iteration_oracle, GviSpec};

use crate::dataset::{ProblemInstance, ProblemKind};
use crate::error::Result;

/// Either problem family with its generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    Gvi(GviSpec),
    Diffusion(DiffusionSpec),
}

impl ProblemSpec {
    pub fn kind(&self) -> ProblemKind {
        match self {
            ProblemSpec::Gvi(_) => ProblemKind::Gvi,
            ProblemSpec::Diffusion(_) => ProblemKind::Diffusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProblemSpec::Gvi(s) => s.validate(),
            ProblemSpec::Diffusion(s) => s.validate(),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<ProblemInstance> {
        match self {
            ProblemSpec::Gvi(s) => generate_gvi(s, seed),
            ProblemSpec::Diffusion(s) => generate_diffusion(s, seed),
        }
    }

    /// `(node_in, edge_in)` feature widths of generated graphs.
    pub fn feature_dims(&self) -> (usize, usize) {
        match self {
            ProblemSpec::Gvi(_) => (1, 1),
            ProblemSpec::Diffusion(_) => (2, 1),
        }
    }
}
