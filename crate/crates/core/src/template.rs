//! Versioned prompt templates.
//!
//! A template is plain text with `{name}` placeholders (`{{` and `}}` are
//! literal braces). An optional `### system` / `### user` header pair splits
//! it into chat roles. The template id is the first 12 hex digits of the
//! SHA-256 of the file contents, so any edit yields a new id.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::sha256_hex;

const BUILTINS: &[(&str, &str)] = &[
    ("detect_plan", include_str!("../templates/detect_plan.v1.txt")),
    ("detect_exec", include_str!("../templates/detect_exec.v1.txt")),
    ("cot_plan", include_str!("../templates/cot_plan.v1.txt")),
    ("cot_exec", include_str!("../templates/cot_exec.v1.txt")),
    ("perturb_plan", include_str!("../templates/perturb_plan.v1.txt")),
    (
        "perturb_instruction",
        include_str!("../templates/perturb_instruction.v1.txt"),
    ),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    id: String,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub system: Option<String>,
    pub user: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let name = name.into();
        placeholders(&text).map_err(|e| Error::Config(format!("template {name}: {e}")))?;
        Ok(Template {
            id: sha256_hex(text.as_bytes())[..12].to_string(),
            name,
            text,
        })
    }

    pub fn builtin(name: &str) -> Self {
        let (_, text) = BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .unwrap_or_else(|| panic!("no builtin template {name}"));
        Template::new(name, *text).expect("builtin templates are valid")
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTINS.iter().map(|(n, _)| *n)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.split('.').next().unwrap_or(s).to_string())
            .unwrap_or_default();
        Template::new(name, text)
    }

    /// The named template from `dir` if present there, else the builtin.
    pub fn resolve(name: &str, dir: Option<&Path>) -> Result<Self> {
        if let Some(dir) = dir {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                return Template::load(&path);
            }
        }
        Ok(Template::builtin(name))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholders(&self) -> Vec<String> {
        placeholders(&self.text).expect("validated at construction")
    }

    /// Fills every placeholder. Missing variables are an error; extra ones
    /// are ignored.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<RenderedPrompt> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(pos) = rest.find(['{', '}']) {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if let Some(after) = tail.strip_prefix("{{") {
                out.push('{');
                rest = after;
            } else if let Some(after) = tail.strip_prefix("}}") {
                out.push('}');
                rest = after;
            } else {
                let end = tail.find('}').expect("validated braces");
                let name = &tail[1..end];
                let value = vars
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("template {}: no value for {{{name}}}", self.name)))?;
                out.push_str(value);
                rest = &tail[end + 1..];
            }
        }
        out.push_str(rest);

        let (system, user) = split_sections(&out);
        Ok(RenderedPrompt {
            template_id: self.id.clone(),
            system,
            user,
        })
    }
}

fn split_sections(text: &str) -> (Option<String>, String) {
    let system_marker = "### system\n";
    let user_marker = "### user\n";
    match (text.find(system_marker), text.find(user_marker)) {
        (Some(s), Some(u)) if s < u => {
            let system = text[s + system_marker.len()..u].trim().to_string();
            let user = text[u + user_marker.len()..].trim().to_string();
            (Some(system), user)
        }
        (None, Some(u)) => (None, text[u + user_marker.len()..].trim().to_string()),
        _ => (None, text.trim().to_string()),
    }
}

fn placeholders(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut names = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(['{', '}']) {
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('}') {
            return Err("unmatched '}'".into());
        }
        let end = tail.find('}').ok_or("unterminated placeholder")?;
        let name = &tail[1..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            return Err(format!("bad placeholder name {name:?}"));
        }
        names.push(name.to_string());
        rest = &tail[end + 1..];
    }
    Ok(names)
}

/// Small builder for template variables.
#[derive(Debug, Default, Clone)]
pub struct Vars(BTreeMap<&'static str, String>);

impl Vars {
    pub fn new() -> Self {
        Vars::default()
    }

    pub fn set(mut self, name: &'static str, value: impl Into<String>) -> Self {
        self.0.insert(name, value.into());
        self
    }

    pub fn as_map(&self) -> &BTreeMap<&'static str, String> {
        &self.0
    }
}
