//! Minimum-energy density steering for feedback linearizable systems.
//!
//! The pipeline: take a control-affine multi-input system, construct its
//! full-state feedback linearization (exact Lie calculus on jets), push the
//! endpoint densities into the linearized coordinates, solve the entropic
//! steering problem there through the Schrödinger system's fixed point, and
//! validate the resulting control field with particle simulation in both
//! coordinate frames.
//!
//! Modules follow the pipeline stages:
//! - [`jet`]: truncated Taylor arithmetic (the differentiation engine)
//! - [`exprdsl`]: expression parser producing jet-differentiable fields
//! - [`vectorfield`]: Lie calculus and distribution tests
//! - [`feedlin`]: relative degree, the linearizing triple, Brunovsky form
//! - [`density`]: density representations and pushforward machinery
//! - [`bridge`]: PDE solvers and the Schrödinger fixed point
//! - [`simulate`]: Liouville / Euler-Maruyama particle validation
//! - [`scenario`]: config ingestion, the bundled registry, orchestration

pub mod bridge;
pub mod density;
pub mod exprdsl;
pub mod feedlin;
pub mod grid;
pub mod jet;
mod par;
mod probe;
pub mod scenario;
pub mod simulate;
pub mod vectorfield;

use thiserror::Error;

/// Top-level error, wrapping per-module errors with a module tag in the
/// message. The CLI maps these onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Field(#[from] vectorfield::FieldError),
    #[error(transparent)]
    Dsl(#[from] exprdsl::DslError),
    #[error(transparent)]
    Lin(#[from] feedlin::LinError),
    #[error(transparent)]
    Density(#[from] density::DensityError),
    #[error(transparent)]
    Bridge(#[from] bridge::BridgeError),
    #[error(transparent)]
    Sim(#[from] simulate::SimError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for configuration/validation failures (CLI exit code 2), false
    /// for numerical failures (exit code 3).
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Dsl(_) | Error::Scenario(_) | Error::Io(_))
    }
}
