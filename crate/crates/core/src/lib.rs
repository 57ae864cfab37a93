//! Failure-detection dataset toolkit: episode manifests, seeded plan and
//! execution perturbations, reasoning-trace generation, a chat-completion
//! gateway, detector prompts and answer parsing, evaluation, and an HTTP
//! verification service.

pub mod augment;
pub mod cot;
pub mod edits;
pub mod episode;
pub mod error;
pub mod eval;
pub mod exec_perturb;
pub mod gateway;
pub mod generate;
pub mod guard;
pub mod lexicon;
pub mod plan_perturb;
pub mod protocol;
pub mod sample;
pub mod taxonomy;
pub mod template;
pub mod text;

pub use episode::{Episode, FrameRef, PlanStep, SceneObject, Source};
pub use error::{Error, Result};
pub use generate::GenConfig;
pub use lexicon::Lexicon;
pub use protocol::{AnswerMode, DetectionQuery, Verdict};
pub use sample::{ExecutionSample, PlanningSample, Provenance, Sample, TOOL_VERSION};
pub use taxonomy::{Category, FailureLabel, Kind};
