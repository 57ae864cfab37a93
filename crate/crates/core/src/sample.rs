//! Labeled samples, their provenance, and JSONL shard I/O.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::episode::FrameRef;
use crate::error::{Error, Result};
use crate::taxonomy::{FailureLabel, Kind};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub episode_id: String,
    pub mode: String,
    pub seed: u64,
    pub generator: Generator,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Provenance {
    pub fn rule(episode_id: &str, mode: &str, seed: u64) -> Self {
        Provenance {
            episode_id: episode_id.to_string(),
            mode: mode.to_string(),
            seed,
            generator: Generator::Rule,
            tool_version: TOOL_VERSION.to_string(),
            master_seed: None,
            config_hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningSample {
    pub sample_id: String,
    pub task_instruction: String,
    pub plan: Vec<String>,
    pub initial_image: FrameRef,
    pub label: FailureLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSample {
    pub sample_id: String,
    pub task_instruction: String,
    pub subtask_instruction: String,
    pub start_images: Vec<FrameRef>,
    pub end_images: Vec<FrameRef>,
    pub label: FailureLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
    pub provenance: Provenance,
}

/// Either sample kind, for code that handles both.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Planning(PlanningSample),
    Execution(ExecutionSample),
}

impl Sample {
    pub fn kind(&self) -> Kind {
        match self {
            Sample::Planning(_) => Kind::Plan,
            Sample::Execution(_) => Kind::Execution,
        }
    }

    pub fn sample_id(&self) -> &str {
        match self {
            Sample::Planning(s) => &s.sample_id,
            Sample::Execution(s) => &s.sample_id,
        }
    }

    pub fn label(&self) -> FailureLabel {
        match self {
            Sample::Planning(s) => s.label,
            Sample::Execution(s) => s.label,
        }
    }

    pub fn cot(&self) -> Option<&str> {
        match self {
            Sample::Planning(s) => s.cot.as_deref(),
            Sample::Execution(s) => s.cot.as_deref(),
        }
    }

    pub fn set_cot(&mut self, cot: Option<String>) {
        match self {
            Sample::Planning(s) => s.cot = cot,
            Sample::Execution(s) => s.cot = cot,
        }
    }

    pub fn task_instruction(&self) -> &str {
        match self {
            Sample::Planning(s) => &s.task_instruction,
            Sample::Execution(s) => &s.task_instruction,
        }
    }

    pub fn provenance(&self) -> &Provenance {
        match self {
            Sample::Planning(s) => &s.provenance,
            Sample::Execution(s) => &s.provenance,
        }
    }

    pub fn provenance_mut(&mut self) -> &mut Provenance {
        match self {
            Sample::Planning(s) => &mut s.provenance,
            Sample::Execution(s) => &mut s.provenance,
        }
    }

    /// All frames the sample references, start images first.
    pub fn frames(&self) -> Vec<&FrameRef> {
        match self {
            Sample::Planning(s) => vec![&s.initial_image],
            Sample::Execution(s) => s.start_images.iter().chain(&s.end_images).collect(),
        }
    }

    pub fn to_json_line(&self) -> String {
        match self {
            Sample::Planning(s) => serde_json::to_string(s),
            Sample::Execution(s) => serde_json::to_string(s),
        }
        .expect("sample serializes")
    }
}

impl From<PlanningSample> for Sample {
    fn from(s: PlanningSample) -> Self {
        Sample::Planning(s)
    }
}

impl From<ExecutionSample> for Sample {
    fn from(s: ExecutionSample) -> Self {
        Sample::Execution(s)
    }
}

/// `{root}/{dataset}/{split}/{planning,execution}.jsonl`
pub fn shard_path(root: &Path, dataset: &str, split: &str, kind: Kind) -> PathBuf {
    root.join(dataset).join(split).join(shard_file_name(kind))
}

pub fn shard_file_name(kind: Kind) -> &'static str {
    match kind {
        Kind::Plan => "planning.jsonl",
        Kind::Execution => "execution.jsonl",
    }
}

/// Writes one compact JSON object per line, creating parent directories.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            location: format!("{}:{}", n + 1, e.column()),
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn read_shard(path: &Path, kind: Kind) -> Result<Vec<Sample>> {
    Ok(match kind {
        Kind::Plan => read_jsonl::<PlanningSample>(path)?
            .into_iter()
            .map(Sample::from)
            .collect(),
        Kind::Execution => read_jsonl::<ExecutionSample>(path)?
            .into_iter()
            .map(Sample::from)
            .collect(),
    })
}

/// Writes a shard of a single kind, sorted by sample_id.
pub fn write_shard(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut lines: Vec<(&str, String)> = samples.iter().map(|s| (s.sample_id(), s.to_json_line())).collect();
    lines.sort();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut body = String::new();
    for (_, line) in lines {
        body.push_str(&line);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
