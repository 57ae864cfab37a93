//! Episode data model, manifest ingestion and schema-level validation.
//!
//! A manifest is one UTF-8 JSON document per episode. Image paths inside a
//! manifest are relative to the corpus root. Top-level keys outside the
//! documented set are kept in [`Episode::extensions`] and written back out
//! under the `extensions` key.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::find_phrases;

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_SCHEMA: &str = include_str!("../schema/episode_manifest.v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sim,
    Real,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub camera_id: String,
    pub path: String,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub index: u32,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_place: Option<String>,
    pub start_frames: Vec<FrameRef>,
    pub end_frames: Vec<FrameRef>,
}

impl PlanStep {
    pub fn camera_ids(&self) -> BTreeSet<&str> {
        self.start_frames.iter().map(|f| f.camera_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_desc: Option<String>,
    /// `[x, y, w, h]` in front-camera pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraDecl {
    pub camera_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub step: u32,
    pub gripper_open: bool,
    /// End-effector pose: position xyz then quaternion xyzw.
    pub ee_pose: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub source: Source,
    pub task_instruction: String,
    pub plan_steps: Vec<PlanStep>,
    pub scene_objects: Vec<SceneObject>,
    pub cameras: Vec<CameraDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot_states: Option<Vec<RobotState>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extensions: BTreeMap<String, Value>,
}

/// Wire form: like [`Episode`] but collects unknown keys.
#[derive(Deserialize)]
struct RawEpisode {
    #[serde(default)]
    manifest_version: Option<String>,
    episode_id: String,
    source: Source,
    task_instruction: String,
    plan_steps: Vec<PlanStep>,
    scene_objects: Vec<SceneObject>,
    cameras: Vec<CameraDecl>,
    #[serde(default)]
    robot_states: Option<Vec<RobotState>>,
    #[serde(default)]
    extensions: BTreeMap<String, Value>,
    #[serde(flatten)]
    unknown: BTreeMap<String, Value>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.plan_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan_steps.is_empty()
    }

    pub fn plan(&self) -> Vec<String> {
        self.plan_steps.iter().map(|s| s.instruction.clone()).collect()
    }

    /// The camera whose role (or id) is `front`, else the first declared one.
    pub fn front_camera(&self) -> Option<&str> {
        self.cameras
            .iter()
            .find(|c| c.role.as_deref() == Some("front"))
            .or_else(|| self.cameras.iter().find(|c| c.camera_id == "front"))
            .or_else(|| self.cameras.first())
            .map(|c| c.camera_id.as_str())
    }

    pub fn object_names(&self) -> Vec<&str> {
        self.scene_objects.iter().map(|o| o.name.as_str()).collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("episode serializes")
    }

    /// Parses a manifest document. `source_name` is used in error messages.
    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let raw: RawEpisode = serde_json::from_str(text).map_err(|e| Error::from_json(source_name, e))?;
        let schema = |message: String| Error::Schema {
            source_name: source_name.to_string(),
            message,
        };
        if let Some(v) = &raw.manifest_version {
            if v != MANIFEST_VERSION {
                return Err(schema(format!("unsupported manifest_version {v:?}")));
            }
        }
        let mut extensions = raw.extensions;
        extensions.extend(raw.unknown);
        let ep = Episode {
            episode_id: raw.episode_id,
            source: raw.source,
            task_instruction: raw.task_instruction,
            plan_steps: raw.plan_steps,
            scene_objects: raw.scene_objects,
            cameras: raw.cameras,
            robot_states: raw.robot_states,
            extensions,
        };
        ep.check_structure().map_err(schema)?;
        Ok(ep)
    }

    /// Structural invariants enforced at load time.
    fn check_structure(&self) -> std::result::Result<(), String> {
        if self.episode_id.trim().is_empty() {
            return Err("episode_id: must be non-empty".into());
        }
        if self.plan_steps.is_empty() {
            return Err("plan_steps: at least one step required".into());
        }
        for (pos, step) in self.plan_steps.iter().enumerate() {
            if step.index as usize != pos {
                return Err(format!(
                    "plan_steps: non-contiguous indices (position {pos} has index {})",
                    step.index
                ));
            }
            if step.start_frames.is_empty() || step.end_frames.is_empty() {
                return Err(format!(
                    "plan_steps[{pos}]: start_frames and end_frames must be non-empty"
                ));
            }
            let end: BTreeSet<&str> = step.end_frames.iter().map(|f| f.camera_id.as_str()).collect();
            if step.camera_ids() != end {
                return Err(format!(
                    "plan_steps[{pos}]: start_frames and end_frames cover different cameras"
                ));
            }
        }
        for (i, obj) in self.scene_objects.iter().enumerate() {
            if obj.name.trim().is_empty() {
                return Err(format!("scene_objects[{i}].name: must be non-empty"));
            }
        }
        Ok(())
    }
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Episode::from_json_str(&text, &path.display().to_string())
}

/// Loads every `*.json` manifest directly inside `dir`, ordered by episode_id.
pub fn load_corpus(dir: &Path) -> Result<Vec<Episode>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json") && p.is_file())
        .collect();
    paths.sort();
    let mut episodes = paths.par_iter().map(|p| load_episode(p)).collect::<Result<Vec<_>>>()?;
    episodes.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    for pair in episodes.windows(2) {
        if pair[0].episode_id == pair[1].episode_id {
            return Err(Error::Schema {
                source_name: dir.display().to_string(),
                message: format!("duplicate episode_id {:?}", pair[0].episode_id),
            });
        }
    }
    Ok(episodes)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub episode_id: String,
    pub errors: Vec<(String, String)>,
    pub warnings: Vec<(String, String)>,
}

impl ValidationReport {
    pub fn is_ingestible(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn validate_episode(ep: &Episode, corpus_root: &Path) -> ValidationReport {
    let mut report = ValidationReport {
        episode_id: ep.episode_id.clone(),
        ..Default::default()
    };
    let mut error = |field: String, msg: String| report.errors.push((field, msg));

    if let Err(msg) = ep.check_structure() {
        error("episode".into(), msg);
    }

    let declared: BTreeSet<&str> = ep.cameras.iter().map(|c| c.camera_id.as_str()).collect();
    for (i, step) in ep.plan_steps.iter().enumerate() {
        let frames = step
            .start_frames
            .iter()
            .enumerate()
            .map(|(j, f)| (format!("plan_steps[{i}].start_frames[{j}]"), f))
            .chain(
                step.end_frames
                    .iter()
                    .enumerate()
                    .map(|(j, f)| (format!("plan_steps[{i}].end_frames[{j}]"), f)),
            );
        for (field, frame) in frames {
            if !declared.contains(frame.camera_id.as_str()) {
                error(
                    format!("{field}.camera_id"),
                    format!("camera {:?} is not declared", frame.camera_id),
                );
            }
            let rel = Path::new(&frame.path);
            if rel.is_absolute() {
                error(format!("{field}.path"), format!("absolute path {:?}", frame.path));
            } else if !corpus_root.join(rel).is_file() {
                error(format!("{field}.path"), format!("missing image file {}", frame.path));
            }
        }
    }

    for (i, obj) in ep.scene_objects.iter().enumerate() {
        if let Some([_, _, w, h]) = obj.bbox {
            if !(w > 0.0 && h > 0.0) {
                error(format!("scene_objects[{i}].bbox"), "non-positive bbox extent".into());
            }
        }
    }

    let names = ep.object_names();
    for (i, step) in ep.plan_steps.iter().enumerate() {
        if let Some(target) = &step.target_object {
            let known = names.iter().any(|n| n.eq_ignore_ascii_case(target))
                || !find_phrases(target, names.iter().copied()).is_empty();
            if !known {
                report.warnings.push((
                    format!("plan_steps[{i}].target_object"),
                    format!("target object {target:?} is not among scene_objects"),
                ));
            }
        }
    }
    report
}
