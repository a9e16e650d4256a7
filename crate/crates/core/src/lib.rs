//! Household embodied-task simulator and trajectory data engine.

pub mod action;
pub mod canonical;
pub mod catalog;
pub mod corpus;
pub mod exemplar;
pub mod forge;
pub mod goal;
pub mod harness;
pub mod planner;
pub mod par;
pub mod prompt;
pub mod reward;
pub mod scene;
pub mod seed;
pub mod sim;
pub mod task;
pub mod thought;
pub mod trajectory;

pub use action::{Action, ActionKey, Verb};
pub use catalog::Catalog;
pub use goal::Goal;
pub use scene::{Scene, SceneSpec, RoomType};
pub use sim::{Episode, Observation, StepOutcome, StepStatus};
pub use task::{SubTask, TaskInstruction};
