//! Detection contracts: query builders for plan and execution verification,
//! the answer-line grammar and its parser.
//!
//! Every detector reply ends with one answer line:
//!
//! ```text
//! ANSWER: success
//! ANSWER: failure | CATEGORY: <slug>
//! ```
//!
//! Everything before that line is free-form reasoning.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::gateway::{ChatMessage, ChatRequest, ContentPart, ImageMode, ImagePart};
use crate::taxonomy::{Category, Kind};
use crate::template::{Template, Vars};
use crate::text::sha256_hex;

/// Published answer-line grammar, embedded verbatim in prompts.
pub const ANSWER_GRAMMAR: &str = "ANSWER: success  or  ANSWER: failure | CATEGORY: <category>";

static ANSWER_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^ANSWER:\s*(success|failure)(?:\s*\|\s*CATEGORY:\s*([a-z_]+))?$").expect("answer regex")
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    #[default]
    Direct,
    Thinking,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub raw_text: String,
}

impl Verdict {
    pub fn answer_line(success: bool, category: Category) -> String {
        if success {
            "ANSWER: success".to_string()
        } else {
            format!("ANSWER: failure | CATEGORY: {}", category.slug())
        }
    }

    /// Reasoning (if any) followed by the answer line.
    pub fn to_text(&self) -> String {
        let line = Verdict::answer_line(self.success, self.category);
        match &self.reasoning {
            Some(r) => format!("{r}\n{line}"),
            None => line,
        }
    }

    pub fn from_category(category: Category, reasoning: Option<String>) -> Self {
        let mut v = Verdict {
            success: category == Category::Success,
            category,
            reasoning,
            raw_text: String::new(),
        };
        v.raw_text = v.to_text();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("no answer line found")]
    Unparseable,
    #[error("category {category:?} is not valid for {kind} verification")]
    UnknownCategory { category: String, kind: Kind },
    #[error("inconsistent verdict: {0}")]
    Inconsistent(String),
}

/// Parses a detector reply. Only the last non-blank line is considered as
/// the answer line; matching is case-insensitive.
pub fn parse_verdict(text: &str, kind: Kind) -> std::result::Result<Verdict, VerdictError> {
    let trimmed = text.trim_end();
    let (before, last) = match trimmed.rfind('\n') {
        Some(pos) => (&trimmed[..pos], &trimmed[pos + 1..]),
        None => ("", trimmed),
    };
    let caps = ANSWER_LINE.captures(last.trim()).ok_or(VerdictError::Unparseable)?;
    let success = caps[1].eq_ignore_ascii_case("success");
    let category = match caps.get(2) {
        Some(m) => {
            let slug = m.as_str().to_ascii_lowercase();
            match slug.parse::<Category>() {
                Ok(c) if c.is_valid_for(kind) => Some(c),
                _ => return Err(VerdictError::UnknownCategory { category: slug, kind }),
            }
        }
        None => None,
    };
    let category = match (success, category) {
        (true, None) | (true, Some(Category::Success)) => Category::Success,
        (true, Some(c)) => {
            return Err(VerdictError::Inconsistent(format!(
                "success answer with failure category {c}"
            )))
        }
        (false, None) => return Err(VerdictError::Inconsistent("failure answer without a category".into())),
        (false, Some(Category::Success)) => {
            return Err(VerdictError::Inconsistent(
                "failure answer with category success".into(),
            ))
        }
        (false, Some(c)) => c,
    };
    let reasoning = before.trim();
    Ok(Verdict {
        success,
        category,
        reasoning: (!reasoning.is_empty()).then(|| reasoning.to_string()),
        raw_text: text.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuery {
    /// Caller bookkeeping; never sent to the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub kind: Kind,
    pub template_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    pub text_prompt: String,
    pub image_parts: Vec<ImagePart>,
    pub answer_mode: AnswerMode,
}

impl DetectionQuery {
    /// Digest of everything the model sees.
    pub fn hash(&self) -> String {
        let mut q = self.clone();
        q.sample_id = None;
        sha256_hex(serde_json::to_string(&q).expect("query serializes").as_bytes())
    }

    /// Prompt text first, then each image preceded by its label.
    pub fn to_chat_request(&self, model_id: &str, max_tokens: u32, temperature: f64) -> ChatRequest {
        let mut content = vec![ContentPart::text(self.text_prompt.clone())];
        for part in &self.image_parts {
            content.push(ContentPart::text(format!("[{}]", part.label)));
            content.push(part.clone().into());
        }
        let mut messages = Vec::new();
        if let Some(system) = &self.system_prompt {
            messages.push(ChatMessage::system(system.clone()));
        }
        messages.push(ChatMessage::user(content));
        ChatRequest {
            model_id: model_id.to_string(),
            messages,
            max_tokens,
            temperature,
        }
    }
}

pub fn numbered(lines: &[String]) -> String {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}. {l}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn category_menu(kind: Kind) -> String {
    kind.categories()
        .iter()
        .map(|c| format!("- {}: {}", c.slug(), c.display_name()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn answer_instructions(mode: AnswerMode) -> &'static str {
    match mode {
        AnswerMode::Direct => "Respond with the answer line only, without any reasoning.",
        AnswerMode::Thinking => {
            "First reason step by step about the inputs, then give the answer line as the last line."
        }
    }
}

/// Describes the images attached to an execution query.
pub fn exec_image_description(parts: &[ImagePart], mode: ImageMode) -> String {
    match mode {
        ImageMode::Separated => {
            let labels: Vec<&str> = parts.iter().map(|p| p.label.as_str()).collect();
            format!("{} (start = before the subtask, end = after it)", labels.join(", "))
        }
        ImageMode::Grid => "one grid image; rows are camera views (view 1 at the top) and \
             columns are time (left column: start, before the subtask; right column: end, after it)"
            .to_string(),
    }
}

/// Labels for separated execution payloads: `start view 1..k, end view 1..k`.
pub fn exec_image_labels(views: usize) -> Vec<String> {
    let mut labels: Vec<String> = (1..=views).map(|i| format!("start view {i}")).collect();
    labels.extend((1..=views).map(|i| format!("end view {i}")));
    labels
}

pub fn build_plan_query(
    task: &str,
    plan: &[String],
    image_parts: Vec<ImagePart>,
    answer_mode: AnswerMode,
) -> Result<DetectionQuery> {
    build_plan_query_with(&Template::builtin("detect_plan"), task, plan, image_parts, answer_mode)
}

pub fn build_plan_query_with(
    template: &Template,
    task: &str,
    plan: &[String],
    image_parts: Vec<ImagePart>,
    answer_mode: AnswerMode,
) -> Result<DetectionQuery> {
    if plan.is_empty() {
        return Err(Error::Config("plan must have at least one step".into()));
    }
    if image_parts.len() != 1 {
        return Err(Error::Shape(format!(
            "plan queries carry exactly one image, got {}",
            image_parts.len()
        )));
    }
    let vars = Vars::new()
        .set("images", image_parts[0].label.clone())
        .set("task", task)
        .set("plan", numbered(plan))
        .set("categories", category_menu(Kind::Plan))
        .set("answer_instructions", answer_instructions(answer_mode))
        .set("grammar", ANSWER_GRAMMAR);
    let rendered = template.render(vars.as_map())?;
    Ok(DetectionQuery {
        sample_id: None,
        kind: Kind::Plan,
        template_id: rendered.template_id,
        system_prompt: rendered.system,
        text_prompt: rendered.user,
        image_parts,
        answer_mode,
    })
}

pub fn build_exec_query(
    task: &str,
    subtask: &str,
    image_parts: Vec<ImagePart>,
    image_mode: ImageMode,
    answer_mode: AnswerMode,
) -> Result<DetectionQuery> {
    build_exec_query_with(
        &Template::builtin("detect_exec"),
        task,
        subtask,
        image_parts,
        image_mode,
        answer_mode,
    )
}

pub fn build_exec_query_with(
    template: &Template,
    task: &str,
    subtask: &str,
    image_parts: Vec<ImagePart>,
    image_mode: ImageMode,
    answer_mode: AnswerMode,
) -> Result<DetectionQuery> {
    let ok = match image_mode {
        ImageMode::Separated => !image_parts.is_empty() && image_parts.len().is_multiple_of(2),
        ImageMode::Grid => image_parts.len() == 1,
    };
    if !ok {
        return Err(Error::Shape(format!(
            "{} execution image payloads do not fit {image_mode:?} mode",
            image_parts.len()
        )));
    }
    let vars = Vars::new()
        .set("images", exec_image_description(&image_parts, image_mode))
        .set("task", task)
        .set("subtask", subtask)
        .set("categories", category_menu(Kind::Execution))
        .set("answer_instructions", answer_instructions(answer_mode))
        .set("grammar", ANSWER_GRAMMAR);
    let rendered = template.render(vars.as_map())?;
    Ok(DetectionQuery {
        sample_id: None,
        kind: Kind::Execution,
        template_id: rendered.template_id,
        system_prompt: rendered.system,
        text_prompt: rendered.user,
        image_parts,
        answer_mode,
    })
}
