//! Planning-failure synthesis: five perturbation modes over an episode's
//! ground-truth plan, plus balanced corpus generation.
//!
//! Every "pick one of k options" choice resolves as `seed mod k` over the
//! options in sorted order, so rule output is a pure function of
//! (episode, mode, seed, lexicon).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::edits::free_prepositions;
use crate::episode::{Episode, FrameRef};
use crate::error::{Error, Result};
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, ContentPart};
use crate::generate::{allocate_quotas, GenConfig};
use crate::lexicon::Lexicon;
use crate::protocol::numbered;
use crate::sample::{Generator, PlanningSample, Provenance};
use crate::taxonomy::{Category, FailureLabel};
use crate::template::{Template, Vars};
use crate::text::{hash64, sample_id, seeded_index, splice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    WrongObjectManipulated,
    WrongStateOrPlacement,
    WrongOrder,
    MissingSubtask,
    ContradictorySubtasks,
}

impl PlanMode {
    pub const ALL: [PlanMode; 5] = [
        PlanMode::WrongObjectManipulated,
        PlanMode::WrongStateOrPlacement,
        PlanMode::WrongOrder,
        PlanMode::MissingSubtask,
        PlanMode::ContradictorySubtasks,
    ];

    pub fn category(self) -> Category {
        match self {
            PlanMode::WrongObjectManipulated => Category::WrongObjectManipulated,
            PlanMode::WrongStateOrPlacement => Category::WrongStateOrPlacement,
            PlanMode::WrongOrder => Category::WrongOrder,
            PlanMode::MissingSubtask => Category::MissingSubtask,
            PlanMode::ContradictorySubtasks => Category::ContradictorySubtasks,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.category().slug()
    }

    /// Modes with an LLM variant.
    pub fn supports_llm(self) -> bool {
        matches!(
            self,
            PlanMode::WrongObjectManipulated | PlanMode::WrongStateOrPlacement | PlanMode::WrongOrder
        )
    }

    fn llm_instruction(self) -> &'static str {
        match self {
            PlanMode::WrongObjectManipulated => {
                "wrong object manipulated: make one step act on a different visible object"
            }
            PlanMode::WrongStateOrPlacement => {
                "wrong object state or placement: make one step put the correct object in a wrong place or state"
            }
            PlanMode::WrongOrder => "wrong order: reorder steps so that a causal dependency is violated",
            PlanMode::MissingSubtask => "missing subtask: drop one required step",
            PlanMode::ContradictorySubtasks => "contradictory subtasks: add a step that undoes another step",
        }
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlanMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown planning mode {s:?}")))
    }
}

/// LLM-backed perturbation settings.
pub struct LlmPerturber<'a> {
    pub backend: &'a dyn ChatBackend,
    pub model_id: String,
    pub template: Template,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Replies rejected before falling back to the rule.
    pub max_attempts: u32,
}

impl<'a> LlmPerturber<'a> {
    pub fn new(backend: &'a dyn ChatBackend, model_id: impl Into<String>) -> Self {
        LlmPerturber {
            backend,
            model_id: model_id.into(),
            template: Template::builtin("perturb_plan"),
            temperature: 0.7,
            max_tokens: 512,
            max_attempts: 3,
        }
    }

    fn request(&self, ep: &Episode, mode: PlanMode, seed: u64, attempt: u32) -> Result<ChatRequest> {
        let vars = Vars::new()
            .set("mode_instruction", mode.llm_instruction())
            .set("task", ep.task_instruction.clone())
            .set("objects", ep.object_names().join(", "))
            .set("plan", numbered(&ep.plan()));
        let rendered = self.template.render(vars.as_map())?;
        let mut messages = Vec::new();
        if let Some(system) = rendered.system {
            messages.push(ChatMessage::system(system));
        }
        messages.push(ChatMessage::user(vec![
            ContentPart::text(rendered.user),
            ContentPart::text(format!("Variation {seed}.{attempt}")),
        ]));
        Ok(ChatRequest {
            model_id: self.model_id.clone(),
            messages,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        })
    }

    /// Asks for an altered plan; `None` when every reply was rejected.
    fn propose(&self, ep: &Episode, mode: PlanMode, seed: u64) -> Result<Option<Vec<String>>> {
        let original = ep.plan();
        for attempt in 0..self.max_attempts {
            let reply = self.backend.complete(&self.request(ep, mode, seed, attempt)?)?;
            match parse_numbered_plan(&reply.text) {
                Some(plan) if plan != original => return Ok(Some(plan)),
                Some(_) => debug!(attempt, "LLM returned the original plan"),
                None => debug!(attempt, "LLM reply is not a numbered plan"),
            }
        }
        warn!(episode = %ep.episode_id, %mode, "LLM perturbation rejected; using rule");
        Ok(None)
    }
}

/// Parses `1. step` / `2) step` lines. Every non-blank line must be
/// numbered consecutively from 1.
pub fn parse_numbered_plan(text: &str) -> Option<Vec<String>> {
    let mut steps = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let digits: String = line.chars().take_while(char::is_ascii_digit).collect();
        let n: usize = digits.parse().ok()?;
        if n != steps.len() + 1 {
            return None;
        }
        let rest = line[digits.len()..].strip_prefix(['.', ')'])?.trim();
        if rest.is_empty() {
            return None;
        }
        steps.push(rest.to_string());
    }
    (!steps.is_empty()).then_some(steps)
}

fn initial_image(ep: &Episode) -> Result<FrameRef> {
    let step0 = ep
        .plan_steps
        .first()
        .ok_or_else(|| Error::not_applicable("episode has no steps"))?;
    let front = ep.front_camera();
    Ok(step0
        .start_frames
        .iter()
        .find(|f| Some(f.camera_id.as_str()) == front)
        .unwrap_or(&step0.start_frames[0])
        .clone())
}

fn planning_sample(
    ep: &Episode,
    mode: &str,
    seed: u64,
    plan: Vec<String>,
    label: FailureLabel,
    generator: Generator,
) -> Result<PlanningSample> {
    let mut provenance = Provenance::rule(&ep.episode_id, mode, seed);
    provenance.generator = generator;
    Ok(PlanningSample {
        sample_id: sample_id(&ep.episode_id, mode, seed),
        task_instruction: ep.task_instruction.clone(),
        plan,
        initial_image: initial_image(ep)?,
        label,
        cot: None,
        provenance,
    })
}

/// The unmodified ground-truth plan as a success sample.
pub fn success_planning_sample(ep: &Episode, seed: u64) -> Result<PlanningSample> {
    planning_sample(ep, "success", seed, ep.plan(), FailureLabel::SUCCESS, Generator::Rule)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct StepEdit {
    step: usize,
    start: usize,
    replacement: String,
    end: usize,
}

fn apply_edit(plan: &[String], edit: &StepEdit) -> Vec<String> {
    let mut out = plan.to_vec();
    let span = crate::text::Span {
        start: edit.start,
        end: edit.end,
    };
    out[edit.step] = splice(&plan[edit.step], span, &edit.replacement);
    out
}

fn pick<T: Clone>(options: &[T], seed: u64, what: &str) -> Result<T> {
    if options.is_empty() {
        return Err(Error::not_applicable(what.to_string()));
    }
    Ok(options[seeded_index(seed, options.len())].clone())
}

/// Rule form of the wrong-object mode: one object mention in one step
/// becomes another scene object's name.
pub fn rule_wrong_object(ep: &Episode, seed: u64) -> Result<Vec<String>> {
    let objects = ep.object_names();
    if objects.len() < 2 {
        return Err(Error::not_applicable("fewer than two scene objects"));
    }
    let plan = ep.plan();
    let mut options = Vec::new();
    for (i, instruction) in plan.iter().enumerate() {
        for m in crate::text::find_phrases(instruction, objects.iter().copied()) {
            for other in objects.iter().filter(|o| !o.eq_ignore_ascii_case(&m.phrase)) {
                options.push(StepEdit {
                    step: i,
                    start: m.span.start,
                    end: m.span.end,
                    replacement: other.to_string(),
                });
            }
        }
    }
    options.sort();
    options.dedup();
    let edit = pick(&options, seed, "no scene object mentioned in the plan")?;
    Ok(apply_edit(&plan, &edit))
}

/// Rule form of the wrong-state/placement mode: swap one free preposition
/// within its group, or flip one antonym-bearing state phrase.
pub fn rule_wrong_state_or_placement(ep: &Episode, seed: u64, lex: &Lexicon) -> Result<Vec<String>> {
    let plan = ep.plan();
    let objects = ep.object_names();
    let mut options = Vec::new();
    for (i, instruction) in plan.iter().enumerate() {
        for p in free_prepositions(instruction, &objects, lex) {
            for alt in lex.alternatives(&p.phrase) {
                options.push(StepEdit {
                    step: i,
                    start: p.span.start,
                    end: p.span.end,
                    replacement: alt.to_string(),
                });
            }
        }
        let mentions = crate::text::find_phrases(instruction, objects.iter().copied());
        for a in lex.find_antonym_phrases(instruction) {
            let inside_object = mentions
                .iter()
                .any(|m| a.span.start < m.span.end && m.span.start < a.span.end);
            if inside_object {
                continue;
            }
            if let Some(antonym) = lex.antonym(&a.phrase) {
                options.push(StepEdit {
                    step: i,
                    start: a.span.start,
                    end: a.span.end,
                    replacement: antonym.to_string(),
                });
            }
        }
    }
    options.sort();
    options.dedup();
    let edit = pick(&options, seed, "no place phrase, preposition or state verb in the plan")?;
    Ok(apply_edit(&plan, &edit))
}

/// Rule form of the wrong-order mode: swap one adjacent pair of distinct steps.
pub fn rule_wrong_order(ep: &Episode, seed: u64) -> Result<Vec<String>> {
    let mut plan = ep.plan();
    if plan.len() < 2 {
        return Err(Error::not_applicable("plan has a single step"));
    }
    let pairs: Vec<usize> = (0..plan.len() - 1).filter(|&i| plan[i] != plan[i + 1]).collect();
    let i = pick(&pairs, seed, "all adjacent steps are identical")?;
    plan.swap(i, i + 1);
    Ok(plan)
}

pub fn rule_missing_subtask(ep: &Episode, seed: u64) -> Result<Vec<String>> {
    let mut plan = ep.plan();
    if plan.len() < 2 {
        return Err(Error::not_applicable("plan has a single step"));
    }
    plan.remove(seeded_index(seed, plan.len()));
    Ok(plan)
}

/// Inserts the antonym-rewritten copy of one step right after it.
pub fn rule_contradictory(ep: &Episode, seed: u64, lex: &Lexicon) -> Result<Vec<String>> {
    let plan = ep.plan();
    let mut options = Vec::new();
    for (i, instruction) in plan.iter().enumerate() {
        for a in lex.find_antonym_phrases(instruction) {
            if let Some(antonym) = lex.antonym(&a.phrase) {
                options.push(StepEdit {
                    step: i,
                    start: a.span.start,
                    end: a.span.end,
                    replacement: antonym.to_string(),
                });
            }
        }
    }
    options.sort();
    let edit = pick(&options, seed, "no step carries an antonym phrase")?;
    let rewritten = apply_edit(&plan, &edit)[edit.step].clone();
    let mut out = plan;
    out.insert(edit.step + 1, rewritten);
    Ok(out)
}

pub fn rule_plan(ep: &Episode, mode: PlanMode, seed: u64, lex: &Lexicon) -> Result<Vec<String>> {
    match mode {
        PlanMode::WrongObjectManipulated => rule_wrong_object(ep, seed),
        PlanMode::WrongStateOrPlacement => rule_wrong_state_or_placement(ep, seed, lex),
        PlanMode::WrongOrder => rule_wrong_order(ep, seed),
        PlanMode::MissingSubtask => rule_missing_subtask(ep, seed),
        PlanMode::ContradictorySubtasks => rule_contradictory(ep, seed, lex),
    }
}

/// Applies `mode` to the episode. The rule decides applicability; with an
/// LLM perturber, modes that support it try the model first and fall back
/// to the rule output when every reply is rejected.
pub fn perturb_plan(
    ep: &Episode,
    mode: PlanMode,
    seed: u64,
    lex: &Lexicon,
    llm: Option<&LlmPerturber<'_>>,
) -> Result<PlanningSample> {
    let rule_output = rule_plan(ep, mode, seed, lex)?;
    let (plan, generator) = match llm.filter(|_| mode.supports_llm()) {
        Some(llm) => match llm.propose(ep, mode, seed)? {
            Some(plan) => (plan, Generator::Llm),
            None => (rule_output, Generator::Rule),
        },
        None => (rule_output, Generator::Rule),
    };
    let label = FailureLabel::failure(mode.category())?;
    planning_sample(ep, mode.as_str(), seed, plan, label, generator)
}

pub fn perturb_wrong_object(
    ep: &Episode,
    seed: u64,
    lex: &Lexicon,
    llm: Option<&LlmPerturber<'_>>,
) -> Result<PlanningSample> {
    perturb_plan(ep, PlanMode::WrongObjectManipulated, seed, lex, llm)
}

pub fn perturb_wrong_state_or_placement(
    ep: &Episode,
    seed: u64,
    lex: &Lexicon,
    llm: Option<&LlmPerturber<'_>>,
) -> Result<PlanningSample> {
    perturb_plan(ep, PlanMode::WrongStateOrPlacement, seed, lex, llm)
}

pub fn perturb_wrong_order(
    ep: &Episode,
    seed: u64,
    lex: &Lexicon,
    llm: Option<&LlmPerturber<'_>>,
) -> Result<PlanningSample> {
    perturb_plan(ep, PlanMode::WrongOrder, seed, lex, llm)
}

pub fn perturb_missing_subtask(ep: &Episode, seed: u64, lex: &Lexicon) -> Result<PlanningSample> {
    perturb_plan(ep, PlanMode::MissingSubtask, seed, lex, None)
}

pub fn perturb_contradictory(ep: &Episode, seed: u64, lex: &Lexicon) -> Result<PlanningSample> {
    perturb_plan(ep, PlanMode::ContradictorySubtasks, seed, lex, None)
}

/// Balanced planning samples: `target/2` unmodified plans and the rest
/// failures split across modes by weight.
pub fn generate_planning_samples(
    corpus: &[Episode],
    cfg: &GenConfig,
    lex: &Lexicon,
    llm: Option<&LlmPerturber<'_>>,
) -> Result<Vec<PlanningSample>> {
    if corpus.is_empty() {
        return Err(Error::CorpusExhausted("empty corpus".into()));
    }
    let n_success = cfg.target_count / 2;
    let n_failure = cfg.target_count - n_success;

    let mut samples: Vec<PlanningSample> = (0..n_success)
        .into_par_iter()
        .map(|j| {
            let ep = &corpus[j % corpus.len()];
            let seed = hash64(cfg.master_seed, &[&ep.episode_id, "success", &j.to_string()]);
            success_planning_sample(ep, seed)
        })
        .collect::<Result<_>>()?;

    let weights = cfg.weights_for(PlanMode::ALL.iter().map(|m| m.as_str()))?;
    let quotas = allocate_quotas(n_failure, &weights);

    // Per mode: the j-th sample starts at episode j and walks forward past
    // episodes where the mode does not apply.
    let produce = |mode: PlanMode, j: usize| -> Result<Option<PlanningSample>> {
        for k in 0..corpus.len() {
            let ep = &corpus[(j + k) % corpus.len()];
            let seed = hash64(cfg.master_seed, &[&ep.episode_id, mode.as_str(), &j.to_string()]);
            match perturb_plan(ep, mode, seed, lex, llm) {
                Ok(s) => return Ok(Some(s)),
                Err(e) if e.is_not_applicable() => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    };

    let per_mode: Vec<(PlanMode, Vec<PlanningSample>, bool)> = quotas
        .par_iter()
        .map(|(mode, quota)| {
            let mode: PlanMode = mode.parse()?;
            let mut out = Vec::with_capacity(*quota);
            for j in 0..*quota {
                match produce(mode, j)? {
                    Some(s) => out.push(s),
                    None => return Ok((mode, out, false)),
                }
            }
            Ok((mode, out, true))
        })
        .collect::<Result<_>>()?;

    let mut deficit = 0;
    let mut open: Vec<(PlanMode, usize)> = Vec::new();
    for ((_, quota), (mode, out, applicable)) in quotas.iter().zip(per_mode) {
        deficit += quota - out.len();
        if applicable {
            open.push((mode, out.len()));
        } else {
            warn!(%mode, "mode not applicable to any episode; redrawing its quota");
        }
        samples.extend(out);
    }
    // Redraw the shortfall round-robin over modes that still apply.
    while deficit > 0 {
        if open.is_empty() {
            return Err(Error::CorpusExhausted(format!(
                "{deficit} planning failure samples could not be generated"
            )));
        }
        let mut still_open = Vec::new();
        for (mode, next) in open {
            if deficit == 0 {
                still_open.push((mode, next));
                continue;
            }
            if let Some(s) = produce(mode, next)? {
                samples.push(s);
                deficit -= 1;
                still_open.push((mode, next + 1));
            }
        }
        open = still_open;
    }

    for s in &mut samples {
        s.provenance.master_seed = Some(cfg.master_seed);
        s.provenance.config_hash = cfg.config_hash.clone();
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(samples)
}
