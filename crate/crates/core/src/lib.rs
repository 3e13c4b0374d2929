//! Learning provably stable linear parameter-varying dynamical systems from
//! demonstrations, one subsystem at a time.
//!
//! The state is split into subsystems wired together by a 0/1 interconnection
//! matrix. Each subsystem gets its own Gaussian-mixture scheduling, LPV
//! dynamics and a quadratic storage function with a quadratic supply rate;
//! a small LMI over scalar multipliers then certifies that the weighted sum
//! of storages is a Lyapunov function for the whole system.
//!
//! All numerics are generic over [`Real`] (`f32`/`f64`); the aliases at the
//! crate root fix the scalar to `f64`, which is what the pipeline uses.

pub mod composer;
pub mod demonstrations;
pub mod error;
pub mod gmm;
pub mod interconnection;
pub mod learner;
pub mod linalg;
pub mod pipeline;
pub mod scalar;
pub mod sdp;
pub mod simulator;
pub mod verifier;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mat = linalg::Mat<f64>;
pub type SymMat = linalg::SymMat<f64>;
pub type SdpProblem = sdp::SdpProblem<f64>;
pub type SdpSolution = sdp::SdpSolution<f64>;
pub type Trajectory = demonstrations::Trajectory<f64>;
pub type DemonstrationSet = demonstrations::DemonstrationSet<f64>;
pub type SubsystemData = demonstrations::SubsystemData<f64>;
pub type GmmModel = gmm::GmmModel<f64>;
pub type SubsystemModel = learner::SubsystemModel<f64>;
pub type SubsystemHyperparams = learner::SubsystemHyperparams<f64>;
pub type ComposedModel = composer::ComposedModel<f64>;
pub type Rollout = simulator::Rollout<f64>;

pub use interconnection::{InterconnectionSpec, SubsystemSpec, TopologyConfig};
pub use sdp::{SdpStatus, SolverOptions};
pub use verifier::CertificateReport;
