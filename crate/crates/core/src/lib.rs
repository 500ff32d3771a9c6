//! Active learning of generalized Nash equilibria from noisy best-response
//! oracles.
//!
//! An external observer keeps affine surrogates of every agent's best
//! response, refines them with an inexact stochastic proximal step on noisy
//! replies, and queries the agents at the min-norm feasible profile closest
//! to a fixed point of the surrogates. The EV-charging game provides the
//! test bed.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod cli;
pub mod game;
pub mod learner;
pub mod linalg;
pub mod orchestrator;
pub mod qp;
pub mod query;
pub mod scalar;

pub use scalar::Scalar;

pub type MatrixF64 = linalg::Matrix<f64>;
pub type QuadProgramF64 = qp::QuadProgram<f64>;
pub type QpSolutionF64 = qp::QpSolution<f64>;
pub type GameInstanceF64 = game::GameInstance<f64>;
pub type AgentSpecF64 = game::AgentSpec<f64>;
pub type CouplingSpecF64 = game::CouplingSpec<f64>;
pub type NoiseModelF64 = game::NoiseModel<f64>;
pub type ProxyParamsF64 = learner::ProxyParams<f64>;
pub type InnerLoopConfigF64 = learner::InnerLoopConfig<f64>;
pub type CovEstimateF64 = learner::CovEstimate<f64>;
pub type LearnerStateF64 = learner::LearnerState<f64>;
pub type QuerySelectorConfigF64 = query::QuerySelectorConfig<f64>;
pub type RunConfigF64 = orchestrator::RunConfig<f64>;
pub type TraceRecordF64 = orchestrator::TraceRecord<f64>;
pub type ReferenceGneF64 = orchestrator::ReferenceGne<f64>;
