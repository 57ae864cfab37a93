use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cot::token_estimate;
use crate::error::Result;
use crate::gateway::{prepare_image_parts, ChatBackend, ImageMode};
use crate::protocol::{build_exec_query_with, build_plan_query_with, parse_verdict, AnswerMode, DetectionQuery};
use crate::sample::Sample;
use crate::taxonomy::{Category, Kind};
use crate::template::Template;
use crate::text::hash64;

use super::metrics::{binary_accuracy, confusion_matrix, ConfusionMatrix};

/// Column for predictions that produced no verdict.
pub const UNPARSED: &str = "unparsed";

/// Maps a detection query to the detector's raw reply.
pub trait Detector: Sync {
    fn detect(&self, query: &DetectionQuery) -> Result<String>;
}

impl<F> Detector for F
where
    F: Fn(&DetectionQuery) -> Result<String> + Sync,
{
    fn detect(&self, query: &DetectionQuery) -> Result<String> {
        self(query)
    }
}

/// Detector backed by a chat model.
pub struct ChatDetector<B> {
    pub backend: B,
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl<B: ChatBackend> Detector for ChatDetector<B> {
    fn detect(&self, query: &DetectionQuery) -> Result<String> {
        let req = query.to_chat_request(&self.model_id, self.max_tokens, self.temperature);
        Ok(self.backend.complete(&req)?.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of the per-kind accuracies.
    #[default]
    Macro,
    /// Pooled over all samples.
    Micro,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split_name: String,
    pub answer_mode: AnswerMode,
    pub image_mode: ImageMode,
    /// 0 = every view.
    pub view_limit: usize,
    pub image_root: PathBuf,
    pub seed: u64,
    pub averaging: Averaging,
    pub plan_template: Template,
    pub exec_template: Template,
}

impl EvalOptions {
    pub fn new(split_name: impl Into<String>, image_root: impl Into<PathBuf>) -> Self {
        EvalOptions {
            split_name: split_name.into(),
            answer_mode: AnswerMode::Direct,
            image_mode: ImageMode::Separated,
            view_limit: 0,
            image_root: image_root.into(),
            seed: 0,
            averaging: Averaging::Macro,
            plan_template: Template::builtin("detect_plan"),
            exec_template: Template::builtin("detect_exec"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sample_id: String,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_hash: Option<String>,
    pub raw_text: String,
    pub gold_success: bool,
    pub gold_category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_stage: Option<ErrorStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorStage {
    /// The sample could not be turned into a query (missing images, bad shape).
    Query,
    Backend,
    /// The reply had no valid answer line.
    Parse,
}

impl AuditRecord {
    fn pred_class(&self) -> &str {
        self.pred_category.map(Category::slug).unwrap_or(UNPARSED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split_name: String,
    pub n: usize,
    /// correct / n over every sample.
    pub binary_accuracy: f64,
    pub per_kind: BTreeMap<Kind, f64>,
    pub averaging: Averaging,
    /// Mean of `per_kind` (macro) or `binary_accuracy` (micro).
    pub averaged_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_kind_confusion: BTreeMap<Kind, ConfusionMatrix>,
    pub parse_failures: usize,
    pub backend_errors: usize,
    pub parse_failure_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_trace_tokens: Option<f64>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "split             {}", self.split_name);
        let _ = writeln!(out, "samples           {}", self.n);
        let _ = writeln!(out, "binary accuracy   {:.3}", self.binary_accuracy);
        for (kind, acc) in &self.per_kind {
            let _ = writeln!(out, "  {:<15} {acc:.3}", kind.as_str());
        }
        let avg = match self.averaging {
            Averaging::Macro => "macro",
            Averaging::Micro => "micro",
        };
        let _ = writeln!(out, "{avg} average     {:.3}", self.averaged_accuracy);
        let _ = writeln!(
            out,
            "parse failures    {} ({:.3})",
            self.parse_failures, self.parse_failure_rate
        );
        let _ = writeln!(out, "backend errors    {}", self.backend_errors);
        if let Some(t) = self.mean_trace_tokens {
            let _ = writeln!(out, "mean cot tokens   {t:.1}");
        }
        for (kind, m) in &self.per_kind_confusion {
            let _ = writeln!(out, "\n{} confusion (%)\n{}", kind.as_str(), m.to_table());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub audit: Vec<AuditRecord>,
}

/// Builds the detection query for one sample.
pub fn build_query(sample: &Sample, opts: &EvalOptions) -> Result<DetectionQuery> {
    let seed = hash64(opts.seed, &[sample.sample_id(), "views"]);
    let images = prepare_image_parts(sample, opts.image_mode, opts.view_limit, &opts.image_root, seed)?;
    let mut query = match sample {
        Sample::Planning(s) => build_plan_query_with(
            &opts.plan_template,
            &s.task_instruction,
            &s.plan,
            images.parts,
            opts.answer_mode,
        )?,
        Sample::Execution(s) => build_exec_query_with(
            &opts.exec_template,
            &s.task_instruction,
            &s.subtask_instruction,
            images.parts,
            opts.image_mode,
            opts.answer_mode,
        )?,
    };
    query.sample_id = Some(sample.sample_id().to_string());
    Ok(query)
}

fn evaluate_one(sample: &Sample, detector: &dyn Detector, opts: &EvalOptions) -> AuditRecord {
    let label = sample.label();
    let mut record = AuditRecord {
        sample_id: sample.sample_id().to_string(),
        kind: sample.kind(),
        query_hash: None,
        raw_text: String::new(),
        gold_success: label.success(),
        gold_category: label.category(),
        pred_success: None,
        pred_category: None,
        error_stage: None,
        error: None,
        correct: false,
    };
    let query = match build_query(sample, opts) {
        Ok(q) => q,
        Err(e) => {
            record.error_stage = Some(ErrorStage::Query);
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.query_hash = Some(query.hash());
    match detector.detect(&query) {
        Err(e) => {
            record.error_stage = Some(ErrorStage::Backend);
            record.error = Some(e.to_string());
            record
        }
        Ok(text) => {
            match parse_verdict(&text, sample.kind()) {
                Ok(v) => {
                    record.pred_success = Some(v.success);
                    record.pred_category = Some(v.category);
                    record.correct = v.success == label.success();
                }
                Err(e) => {
                    record.error_stage = Some(ErrorStage::Parse);
                    record.error = Some(e.to_string());
                }
            }
            record.raw_text = text;
            record
        }
    }
}

fn classes_for(kinds: impl IntoIterator<Item = Kind>) -> Vec<String> {
    let mut classes: Vec<Category> = kinds.into_iter().flat_map(|k| k.categories().iter().copied()).collect();
    classes.sort();
    classes.dedup();
    let mut out: Vec<String> = classes.into_iter().map(|c| c.slug().to_string()).collect();
    out.push(UNPARSED.to_string());
    out
}

fn confusion_of<'a>(records: impl Iterator<Item = &'a AuditRecord>, classes: &[String]) -> ConfusionMatrix {
    let (golds, preds): (Vec<String>, Vec<String>) = records
        .map(|r| (r.gold_category.slug().to_string(), r.pred_class().to_string()))
        .unzip();
    let classes: Vec<String> = classes.to_vec();
    confusion_matrix(&golds, &preds, &classes).expect("classes cover every taxonomy slug")
}

/// Aggregates audit records into a report. Deterministic for a given record set.
pub fn report_from_audit(
    split_name: &str,
    audit: &[AuditRecord],
    averaging: Averaging,
    mean_trace_tokens: Option<f64>,
) -> MetricsReport {
    let correct = audit.iter().filter(|r| r.correct).count();
    let accuracy = if audit.is_empty() {
        0.0
    } else {
        correct as f64 / audit.len() as f64
    };
    let mut per_kind = BTreeMap::new();
    let mut per_kind_confusion = BTreeMap::new();
    for kind in Kind::ALL {
        let rows: Vec<&AuditRecord> = audit.iter().filter(|r| r.kind == kind).collect();
        if rows.is_empty() {
            continue;
        }
        let correct = rows.iter().filter(|r| r.correct).count();
        per_kind.insert(kind, correct as f64 / rows.len() as f64);
        per_kind_confusion.insert(kind, confusion_of(rows.into_iter(), &classes_for([kind])));
    }
    let kinds: Vec<Kind> = per_kind.keys().copied().collect();
    let averaged_accuracy = match averaging {
        Averaging::Micro => accuracy,
        Averaging::Macro if per_kind.is_empty() => 0.0,
        Averaging::Macro => per_kind.values().sum::<f64>() / per_kind.len() as f64,
    };
    let stage_count = |stage: ErrorStage| audit.iter().filter(|r| r.error_stage == Some(stage)).count();
    let parse_failures = stage_count(ErrorStage::Parse);
    let backend_errors = stage_count(ErrorStage::Backend) + stage_count(ErrorStage::Query);
    MetricsReport {
        split_name: split_name.to_string(),
        n: audit.len(),
        binary_accuracy: accuracy,
        per_kind,
        averaging,
        averaged_accuracy,
        confusion: confusion_of(audit.iter(), &classes_for(kinds)),
        per_kind_confusion,
        parse_failures,
        backend_errors,
        parse_failure_rate: if audit.is_empty() {
            0.0
        } else {
            parse_failures as f64 / audit.len() as f64
        },
        mean_trace_tokens,
    }
}

/// Runs `detector` over every sample (in parallel) and scores the replies.
/// Samples that fail to build, reach the backend, or parse count as incorrect.
pub fn evaluate_split(samples: &[Sample], detector: &dyn Detector, opts: &EvalOptions) -> EvalOutcome {
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.sample_id().cmp(b.sample_id()));
    let audit: Vec<AuditRecord> = ordered.par_iter().map(|s| evaluate_one(s, detector, opts)).collect();
    let tokens: Vec<usize> = samples.iter().filter_map(|s| s.cot()).map(token_estimate).collect();
    let mean_tokens = (!tokens.is_empty()).then(|| tokens.iter().sum::<usize>() as f64 / tokens.len() as f64);
    EvalOutcome {
        report: report_from_audit(&opts.split_name, &audit, opts.averaging, mean_tokens),
        audit,
    }
}

/// Accuracy recomputed from audit lines alone.
pub fn accuracy_from_audit(audit: &[AuditRecord]) -> Result<f64> {
    let pairs: Vec<(bool, bool)> = audit
        .iter()
        .map(|r| (r.pred_success.unwrap_or(!r.gold_success), r.gold_success))
        .collect();
    binary_accuracy(&pairs)
}
