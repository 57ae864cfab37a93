use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{select_views, ImageMode, ImagePart};
use crate::protocol::{build_exec_query, build_plan_query, exec_image_labels, parse_verdict, AnswerMode, Verdict};
use crate::sample::{write_jsonl, Sample};
use crate::text::hash64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Answer-only targets.
    #[default]
    Vanilla,
    /// Reasoning then answer on every target.
    Thinking,
    /// Reasoning on a fixed fraction of targets, answer-only on the rest.
    Dropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPolicy {
    #[default]
    One,
    Four,
    RandomOneOrFour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingExportConfig {
    pub strategy: Strategy,
    pub dropout_ratio: f64,
    pub view_policy: ViewPolicy,
    pub seed: u64,
}

impl Default for TrainingExportConfig {
    fn default() -> Self {
        TrainingExportConfig {
            strategy: Strategy::Vanilla,
            dropout_ratio: 0.5,
            view_policy: ViewPolicy::One,
            seed: 0,
        }
    }
}

impl TrainingExportConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_ratio > 0.0 && self.dropout_ratio < 1.0) {
            return Err(Error::Config(format!(
                "dropout_ratio must be in (0, 1), got {}",
                self.dropout_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub images: Vec<String>,
    pub prompt: String,
    pub target: String,
}

impl TrainingRecord {
    /// Whether the target carries reasoning before the answer line.
    pub fn has_reasoning(&self) -> bool {
        self.target.trim().lines().count() > 1
    }
}

fn view_limit(sample: &Sample, policy: ViewPolicy, seed: u64) -> usize {
    match (sample, policy) {
        (Sample::Planning(_), _) | (_, ViewPolicy::One) => 1,
        (_, ViewPolicy::Four) => 4,
        (Sample::Execution(s), ViewPolicy::RandomOneOrFour) => {
            if s.start_images.len() > 1 && hash64(seed, &[&s.sample_id, "coin"]) & 1 == 1 {
                4
            } else {
                1
            }
        }
    }
}

fn placeholder(label: String) -> ImagePart {
    ImagePart {
        label,
        media_type: "image/png".into(),
        data_base64: String::new(),
    }
}

fn record_for(sample: &Sample, with_cot: bool, cfg: &TrainingExportConfig) -> Result<TrainingRecord> {
    let label = sample.label();
    let answer = Verdict::answer_line(label.success(), label.category());
    let mode = if with_cot {
        AnswerMode::Thinking
    } else {
        AnswerMode::Direct
    };
    let (images, query) = match sample {
        Sample::Planning(s) => (
            vec![s.initial_image.path.clone()],
            build_plan_query(
                &s.task_instruction,
                &s.plan,
                vec![placeholder("initial front view".into())],
                mode,
            )?,
        ),
        Sample::Execution(s) => {
            let available: Vec<String> = s.start_images.iter().map(|f| f.camera_id.clone()).collect();
            let limit = view_limit(sample, cfg.view_policy, cfg.seed);
            let views = select_views(&available, limit, hash64(cfg.seed, &[&s.sample_id, "views"]))?;
            let pick = |frames: &[crate::episode::FrameRef]| -> Vec<String> {
                views
                    .iter()
                    .filter_map(|v| frames.iter().find(|f| &f.camera_id == v))
                    .map(|f| f.path.clone())
                    .collect()
            };
            let mut images = pick(&s.start_images);
            images.extend(pick(&s.end_images));
            let parts = exec_image_labels(views.len()).into_iter().map(placeholder).collect();
            (
                images,
                build_exec_query(
                    &s.task_instruction,
                    &s.subtask_instruction,
                    parts,
                    ImageMode::Separated,
                    mode,
                )?,
            )
        }
    };
    let prompt = match query.system_prompt {
        Some(system) => format!("{system}\n\n{}", query.text_prompt),
        None => query.text_prompt,
    };
    let target = if with_cot {
        let cot = sample
            .cot()
            .ok_or_else(|| Error::MissingCot(sample.sample_id().to_string()))?;
        let verdict =
            parse_verdict(cot, sample.kind()).map_err(|_| Error::MissingCot(sample.sample_id().to_string()))?;
        if verdict.success != label.success() || verdict.category != label.category() {
            return Err(Error::MissingCot(sample.sample_id().to_string()));
        }
        match verdict.reasoning {
            Some(r) => format!("{r}\n{answer}"),
            None => answer,
        }
    } else {
        answer
    };
    Ok(TrainingRecord { images, prompt, target })
}

/// Builds training records ordered by sample_id. Thinking and dropout need
/// a label-consistent trace on every sample.
pub fn export_training_set(samples: &[Sample], cfg: &TrainingExportConfig) -> Result<Vec<TrainingRecord>> {
    cfg.validate()?;
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.sample_id().cmp(b.sample_id()));
    if cfg.strategy != Strategy::Vanilla {
        if let Some(s) = ordered.iter().find(|s| s.cot().is_none()) {
            return Err(Error::MissingCot(s.sample_id().to_string()));
        }
    }
    let n = ordered.len();
    let mut with_cot = vec![cfg.strategy == Strategy::Thinking; n];
    if cfg.strategy == Strategy::Dropout {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let k = (cfg.dropout_ratio * n as f64).ceil() as usize;
        for &i in &idx[..k.min(n)] {
            with_cot[i] = true;
        }
    }
    ordered
        .iter()
        .zip(with_cot)
        .map(|(s, c)| record_for(s, c, cfg))
        .collect()
}

pub fn write_training_set(path: &Path, records: &[TrainingRecord]) -> Result<()> {
    write_jsonl(path, records)
}
