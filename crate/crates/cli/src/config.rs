//! Pipeline configuration: TOML file, then `FAILFORGE_*` environment
//! overrides, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use failforge_core::cot::CotConfig;
use failforge_core::eval::{Averaging, TrainingExportConfig};
use failforge_core::exec_perturb::DirectiveConfig;
use failforge_core::gateway::{GatewayConfig, ImageMode};
use failforge_core::guard::ServiceConfig;
use failforge_core::{AnswerMode, GenConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenBlock {
    pub target_count: usize,
    pub weights: BTreeMap<String, f64>,
}

impl Default for GenBlock {
    fn default() -> Self {
        GenBlock {
            target_count: 200,
            weights: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectiveBlock {
    /// Directives emitted per sim episode.
    pub per_episode: usize,
    pub offset_min_mm: f64,
    pub offset_max_mm: f64,
    pub pose_min_deg: f64,
    pub pose_max_deg: f64,
}

impl Default for DirectiveBlock {
    fn default() -> Self {
        let d = DirectiveConfig::default();
        DirectiveBlock {
            per_episode: 8,
            offset_min_mm: d.offset_min_mm,
            offset_max_mm: d.offset_max_mm,
            pose_min_deg: d.pose_min_deg,
            pose_max_deg: d.pose_max_deg,
        }
    }
}

impl DirectiveBlock {
    pub fn params(&self) -> DirectiveConfig {
        DirectiveConfig {
            offset_min_mm: self.offset_min_mm,
            offset_max_mm: self.offset_max_mm,
            pose_min_deg: self.pose_min_deg,
            pose_max_deg: self.pose_max_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorBlock {
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub answer_mode: AnswerMode,
    pub image_mode: ImageMode,
    /// 0 = every view.
    pub view_limit: usize,
    pub averaging: Averaging,
}

impl Default for DetectorBlock {
    fn default() -> Self {
        DetectorBlock {
            model_id: "detector".into(),
            max_tokens: 512,
            temperature: 0.0,
            answer_mode: AnswerMode::Direct,
            image_mode: ImageMode::Separated,
            view_limit: 0,
            averaging: Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceBlock {
    pub bind: String,
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub request_timeout_s: u64,
}

impl Default for ServiceBlock {
    fn default() -> Self {
        let s = ServiceConfig::default();
        ServiceBlock {
            bind: "127.0.0.1:8080".into(),
            model_id: s.model_id,
            max_tokens: s.max_tokens,
            temperature: s.temperature,
            request_timeout_s: s.request_timeout_s,
        }
    }
}

impl ServiceBlock {
    pub fn service(&self) -> ServiceConfig {
        ServiceConfig {
            model_id: self.model_id.clone(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            request_timeout_s: self.request_timeout_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: u64,
    /// Directories of episode manifests.
    pub corpus: Vec<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    /// Frame paths resolve against this; defaults to the first corpus dir.
    pub image_root: Option<PathBuf>,
    pub output_root: PathBuf,
    pub dataset: String,
    pub split: String,
    /// Add reversed copies of reversible real episodes before generating.
    pub augment_reversal: bool,
    /// Use the chat backend for LLM-based perturbations.
    pub use_llm: bool,
    pub planning: GenBlock,
    pub execution: GenBlock,
    pub directives: DirectiveBlock,
    pub gateway: GatewayConfig,
    pub cot: CotConfig,
    pub detector: DetectorBlock,
    pub export: TrainingExportConfig,
    pub service: ServiceBlock,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            master_seed: 0,
            corpus: Vec::new(),
            lexicon: None,
            templates_dir: None,
            image_root: None,
            output_root: PathBuf::from("out"),
            dataset: "dataset".into(),
            split: "train".into(),
            augment_reversal: true,
            use_llm: false,
            planning: GenBlock::default(),
            execution: GenBlock::default(),
            directives: DirectiveBlock::default(),
            gateway: GatewayConfig::default(),
            cot: CotConfig::default(),
            detector: DetectorBlock::default(),
            export: TrainingExportConfig::default(),
            service: ServiceBlock::default(),
        }
    }
}

enum Kind {
    Int,
    Float,
    Bool,
    Str,
    Paths,
}

/// Environment variables and the config keys they override.
const ENV_OVERRIDES: [(&str, &str, Kind); 17] = [
    ("FAILFORGE_MASTER_SEED", "master_seed", Kind::Int),
    ("FAILFORGE_CORPUS", "corpus", Kind::Paths),
    ("FAILFORGE_LEXICON", "lexicon", Kind::Str),
    ("FAILFORGE_TEMPLATES_DIR", "templates_dir", Kind::Str),
    ("FAILFORGE_IMAGE_ROOT", "image_root", Kind::Str),
    ("FAILFORGE_OUTPUT_ROOT", "output_root", Kind::Str),
    ("FAILFORGE_DATASET", "dataset", Kind::Str),
    ("FAILFORGE_SPLIT", "split", Kind::Str),
    ("FAILFORGE_USE_LLM", "use_llm", Kind::Bool),
    ("FAILFORGE_GATEWAY_URL", "gateway.base_url", Kind::Str),
    ("FAILFORGE_GATEWAY_MAX_INFLIGHT", "gateway.max_inflight", Kind::Int),
    ("FAILFORGE_GATEWAY_CACHE_DIR", "gateway.cache_dir", Kind::Str),
    ("FAILFORGE_GATEWAY_TIMEOUT_S", "gateway.timeout_s", Kind::Int),
    ("FAILFORGE_DETECTOR_MODEL", "detector.model_id", Kind::Str),
    ("FAILFORGE_COT_MODEL", "cot.model_id", Kind::Str),
    ("FAILFORGE_DETECTOR_TEMPERATURE", "detector.temperature", Kind::Float),
    ("FAILFORGE_SERVICE_BIND", "service.bind", Kind::Str),
];

fn env_value(name: &str, raw: &str, kind: &Kind) -> Result<toml::Value> {
    Ok(match kind {
        Kind::Int => toml::Value::Integer(
            raw.trim()
                .parse()
                .with_context(|| format!("{name}={raw:?} is not an integer"))?,
        ),
        Kind::Float => toml::Value::Float(
            raw.trim()
                .parse()
                .with_context(|| format!("{name}={raw:?} is not a number"))?,
        ),
        Kind::Bool => toml::Value::Boolean(match raw.trim() {
            "1" | "true" | "yes" => true,
            "0" | "false" | "no" => false,
            _ => bail!("{name}={raw:?} is not a boolean"),
        }),
        Kind::Str => toml::Value::String(raw.to_string()),
        Kind::Paths => toml::Value::Array(
            std::env::split_paths(raw)
                .map(|p| toml::Value::String(p.display().to_string()))
                .collect(),
        ),
    })
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        None => {
            table.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let entry = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if !entry.is_table() {
                *entry = toml::Value::Table(toml::Table::new());
            }
            set_path(entry.as_table_mut().expect("table"), rest, value);
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (if any) and applies environment overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut t: toml::Table =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                if let Some(dir) = p.parent() {
                    resolve_relative(&mut t, dir);
                }
                t
            }
            None => toml::Table::new(),
        };
        for (name, key, kind) in &ENV_OVERRIDES {
            if let Some(raw) = env(name) {
                set_path(&mut table, key, env_value(name, &raw, kind)?);
            }
        }
        let cfg: PipelineConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.gateway.validate()?;
        Ok(cfg)
    }

    /// First 16 hex chars of the SHA-256 of the canonical JSON form,
    /// ignoring where outputs are written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_root = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn gen_config(&self, block: &GenBlock) -> GenConfig {
        GenConfig {
            master_seed: self.master_seed,
            target_count: block.target_count,
            weights: block.weights.clone(),
            config_hash: Some(self.hash()),
        }
    }

    pub fn image_root(&self) -> Result<PathBuf> {
        match (&self.image_root, self.corpus.first()) {
            (Some(root), _) => Ok(root.clone()),
            (None, Some(first)) => Ok(first.clone()),
            (None, None) => bail!("no image_root and no corpus configured"),
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        for dir in &self.corpus {
            if !dir.is_dir() {
                bail!("corpus directory {} does not exist", dir.display());
            }
        }
        for p in self.lexicon.iter().chain(&self.templates_dir) {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
        }
        Ok(())
    }
}

/// Paths in a config file are relative to the file.
fn resolve_relative(table: &mut toml::Table, dir: &Path) {
    let fix = |v: &mut toml::Value| {
        if let toml::Value::String(s) = v {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = dir.join(p).display().to_string();
            }
        }
    };
    for key in ["lexicon", "templates_dir", "image_root", "output_root"] {
        if let Some(v) = table.get_mut(key) {
            fix(v);
        }
    }
    if let Some(toml::Value::Array(items)) = table.get_mut("corpus") {
        items.iter_mut().for_each(fix);
    }
    if let Some(toml::Value::Table(gw)) = table.get_mut("gateway") {
        if let Some(v) = gw.get_mut("cache_dir") {
            fix(v);
        }
    }
}
