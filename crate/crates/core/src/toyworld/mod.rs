//! Synthetic tabletop world: kinematic simulation, scripted demonstrators,
//! rendering, exact scene flow and the demonstration dataset format.

pub mod dataset;
pub mod expert;
pub mod flow;
pub mod render;
pub mod sim;

pub use dataset::{generate_dataset, generate_episodes, ActionNormalizer, DataConfig, Dataset, EpisodeRecord};
pub use expert::{scripted_expert, ExpertAction, EXPERT_BUDGET};
pub use flow::ground_truth_flow;
pub use render::{default_camera, render, Frame};
pub use sim::{progress_score, reset, step, task_success, Color, TaskKind, TaskSpec, WorldState};
