//! Object-sensitive deep Q-learning on pixel mini-arcade games.
//!
//! The crate is split along the pipeline:
//!
//! * [`envsim`] renders small arcade games to RGB frames and exposes their
//!   ground-truth object boxes.
//! * [`vision`] finds objects in frames by template matching and turns the
//!   detections into binary object channels.
//! * [`tensornet`] is a small convolutional network with analytic gradients.
//! * [`agents`] trains DQN, Double-DQN and dueling Q-networks, optionally fed
//!   with object channels.
//! * [`saliency`] explains a chosen action with pixel and object saliency maps.
//! * [`harness`] runs the detection, score-comparison and disagreement
//!   experiments end to end.

pub mod agents;
pub mod envsim;
pub mod error;
pub mod harness;
pub mod pnm;
pub mod saliency;
pub mod tensornet;
pub mod vision;

pub use error::{Error, Result};
