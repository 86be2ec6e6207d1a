//! Motion-guided flow-matching policy: scene-flow representation, the two
//! flow-matching experts, guidance fusion, a synthetic tabletop world,
//! training, evaluation and the command-line surface.

pub mod ablation;
pub mod action_expert;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flowmatch;
pub mod guidance;
pub mod layers;
pub mod model;
pub mod motion_expert;
pub mod motionrep;
pub mod percept;
pub mod runtime;
pub mod selftest;
pub mod toyworld;
pub mod trainer;
pub mod util;
pub mod visualize;

pub use error::{LampError, Result};
