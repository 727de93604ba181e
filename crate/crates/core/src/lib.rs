//! Neural inverse kinematics with a hypernetwork that emits per-joint
//! primary networks. Each primary network outputs a one-dimensional Gaussian
//! mixture over its joint angle, conditioned on the joints before it, so full
//! solutions are drawn one joint at a time.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod gmm;
pub mod kinematics;
pub mod model;
pub mod numerics;
pub mod pathfollow;
pub mod training;

pub use error::{IkError, Result};
pub use exec::Exec;
pub use gmm::{GmmParams, Mixture, Neighborhood};
pub use kinematics::{JointAngles, KinematicChain, Pose};
pub use model::{IkModel, ModelConfig};
