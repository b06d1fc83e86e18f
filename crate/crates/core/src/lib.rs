//! Closed-loop teaching of a gridworld agent's reward function.
//!
//! The numeric core ([`sphere`], [`mdp`], [`bec`], [`beliefs`]) is generic
//! over [`Scalar`] (`f32` or `f64`); the controller, simulator and file
//! formats work in `f64` through the aliases below.

pub mod bec;
pub mod beliefs;
pub mod domain;
pub mod error;
pub mod mdp;
pub mod scalar;
pub mod sim;
pub mod sphere;
pub mod teaching;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vector = sphere::Vec3<f64>;
pub type Weights = mdp::RewardWeights<f64>;
pub type Features = mdp::FeatureVector<f64>;
pub type Spec = mdp::MDPSpec<f64>;
pub type Constraint = bec::HalfSpaceConstraint<f64>;
pub type Constraints = bec::ConstraintSet<f64>;
pub type Kc = bec::KnowledgeComponent<f64>;
pub type Lesson = bec::Lesson<f64>;
pub type Particles = beliefs::ParticleSet<f64>;
