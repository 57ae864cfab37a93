//! Execution-failure synthesis.
//!
//! Simulator modes are realized outside the toolkit: [`emit_sim_directive`]
//! writes a directive, an external adapter replays the episode with the
//! perturbation, and [`ingest_sim_rollout`] turns the resulting manifest
//! into a sample. Real-data modes (semantic mismatch, revert action) only
//! alter instruction text or frame pairing and run fully in-process.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::edits::{classify_instruction_change, instruction_edits};
use crate::episode::{load_episode, Episode, Source};
use crate::error::{Error, Result};
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, ContentPart};
use crate::generate::{allocate_quotas, GenConfig};
use crate::lexicon::Lexicon;
use crate::sample::{ExecutionSample, Generator, Provenance};
use crate::taxonomy::{Category, FailureLabel};
use crate::template::{Template, Vars};
use crate::text::{digest_fields, hash64, sample_id, seeded_index};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    NoGripperClose,
    WrongStateOrPlacement,
    WrongObjectManipulated,
    ImpreciseGraspOrPush,
}

impl SimMode {
    /// Seeded choice order.
    pub const ALL: [SimMode; 4] = [
        SimMode::NoGripperClose,
        SimMode::WrongStateOrPlacement,
        SimMode::WrongObjectManipulated,
        SimMode::ImpreciseGraspOrPush,
    ];

    pub fn category(self) -> Category {
        match self {
            SimMode::NoGripperClose => Category::NoGripperClose,
            SimMode::WrongStateOrPlacement => Category::WrongStateOrPlacement,
            SimMode::WrongObjectManipulated => Category::WrongObjectManipulated,
            SimMode::ImpreciseGraspOrPush => Category::ImpreciseGraspOrPush,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.category().slug()
    }

    /// Mode id used in provenance and generation weights.
    pub fn mode_id(self) -> String {
        format!("sim_{}", self.as_str())
    }
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mode-specific directive parameters. Exactly the keys required by the
/// mode are present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectiveParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_object: Option<String>,
    /// Gripper target offset in millimetres (x, y, z).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_mm: Option<[f64; 3]>,
    /// Object placement target to use instead of the recorded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_place: Option<String>,
    /// Final end-effector orientation offset in degrees (roll, pitch, yaw).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_pose: Option<[f64; 3]>,
}

impl DirectiveParams {
    fn keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        if self.alt_object.is_some() {
            keys.push("alt_object");
        }
        if self.offset_mm.is_some() {
            keys.push("offset_mm");
        }
        if self.alt_place.is_some() {
            keys.push("alt_place");
        }
        if self.alt_pose.is_some() {
            keys.push("alt_pose");
        }
        keys
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDirective {
    pub episode_id: String,
    pub subtask_index: u32,
    pub mode: SimMode,
    pub params: DirectiveParams,
}

impl SimDirective {
    pub fn validate(&self) -> Result<()> {
        let keys = self.params.keys();
        let ok = match self.mode {
            SimMode::NoGripperClose => keys.is_empty(),
            SimMode::WrongObjectManipulated => keys == ["alt_object"],
            SimMode::ImpreciseGraspOrPush => {
                keys == ["offset_mm"]
                    && self
                        .params
                        .offset_mm
                        .is_some_and(|o| o.iter().map(|v| v.abs()).fold(0.0, f64::max) > 0.0)
            }
            SimMode::WrongStateOrPlacement => keys == ["alt_place"] || keys == ["alt_pose"],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Schema {
                source_name: format!("directive for {}", self.episode_id),
                message: format!("params {keys:?} do not fit mode {}", self.mode),
            })
        }
    }

    /// Content-derived identifier carried back by rollout manifests.
    pub fn directive_id(&self) -> String {
        let body = serde_json::to_string(self).expect("directive serializes");
        hex::encode(&digest_fields(&[body.as_bytes()])[..8])
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("directive serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let d: SimDirective = serde_json::from_str(line).map_err(|e| Error::from_json("directive", e))?;
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectiveConfig {
    pub offset_min_mm: f64,
    pub offset_max_mm: f64,
    pub pose_min_deg: f64,
    pub pose_max_deg: f64,
}

impl Default for DirectiveConfig {
    fn default() -> Self {
        DirectiveConfig {
            offset_min_mm: 15.0,
            offset_max_mm: 40.0,
            pose_min_deg: 30.0,
            pose_max_deg: 90.0,
        }
    }
}

fn signed_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let magnitude = rng.random_range(lo..=hi);
    let magnitude = (magnitude * 10.0).round() / 10.0;
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Seeded directive for a sim episode: mode = `seed mod 4` over
/// [`SimMode::ALL`], subtask = `(seed / 4) mod N`. When the chosen mode
/// cannot be parameterised (no alternative object) the next mode in order
/// is used.
pub fn emit_sim_directive(ep: &Episode, seed: u64, cfg: &DirectiveConfig) -> Result<SimDirective> {
    if ep.source != Source::Sim {
        return Err(Error::not_applicable(format!(
            "{} is a real episode; directives need a simulator",
            ep.episode_id
        )));
    }
    if !(0.0 < cfg.offset_min_mm && cfg.offset_min_mm <= cfg.offset_max_mm) {
        return Err(Error::Config("offset range must satisfy 0 < min <= max".into()));
    }
    let subtask = seeded_index(seed / 4, ep.len());
    let step = &ep.plan_steps[subtask];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mentioned: Vec<&str> = crate::text::find_phrases(&step.instruction, ep.object_names())
        .into_iter()
        .map(|m| m.phrase)
        .map(|p| ep.object_names().into_iter().find(|n| *n == p).unwrap_or(""))
        .collect();
    let unused: Vec<&str> = {
        let mut v: Vec<&str> = ep
            .object_names()
            .into_iter()
            .filter(|n| !mentioned.contains(n) && step.target_object.as_deref() != Some(*n))
            .filter(|n| step.target_place.as_deref() != Some(*n))
            .collect();
        v.sort();
        v
    };

    let first = seeded_index(seed, SimMode::ALL.len());
    for offset in 0..SimMode::ALL.len() {
        let mode = SimMode::ALL[(first + offset) % SimMode::ALL.len()];
        let params = match mode {
            SimMode::NoGripperClose => DirectiveParams::default(),
            SimMode::WrongObjectManipulated => {
                if unused.is_empty() {
                    continue;
                }
                DirectiveParams {
                    alt_object: Some(unused[rng.random_range(0..unused.len())].to_string()),
                    ..Default::default()
                }
            }
            SimMode::ImpreciseGraspOrPush => DirectiveParams {
                offset_mm: Some(std::array::from_fn(|_| {
                    signed_uniform(&mut rng, cfg.offset_min_mm, cfg.offset_max_mm)
                })),
                ..Default::default()
            },
            SimMode::WrongStateOrPlacement => {
                if step.target_place.is_some() && !unused.is_empty() {
                    DirectiveParams {
                        alt_place: Some(unused[rng.random_range(0..unused.len())].to_string()),
                        ..Default::default()
                    }
                } else {
                    DirectiveParams {
                        alt_pose: Some(std::array::from_fn(|_| {
                            signed_uniform(&mut rng, cfg.pose_min_deg, cfg.pose_max_deg)
                        })),
                        ..Default::default()
                    }
                }
            }
        };
        let directive = SimDirective {
            episode_id: ep.episode_id.clone(),
            subtask_index: subtask as u32,
            mode,
            params,
        };
        directive.validate()?;
        return Ok(directive);
    }
    unreachable!("no_gripper_close always applies")
}

fn directive_seed(directive_id: &str) -> u64 {
    u64::from_str_radix(&directive_id[..16.min(directive_id.len())], 16).unwrap_or(0)
}

/// Builds a failure sample from a rollout manifest produced for `directive`.
/// The manifest must carry `directive_id` and cover the perturbed subtask.
pub fn ingest_sim_rollout(directive: &SimDirective, rollout_manifest: &Path) -> Result<ExecutionSample> {
    let rollout = load_episode(rollout_manifest)?;
    sample_from_rollout(directive, &rollout)
}

pub fn sample_from_rollout(directive: &SimDirective, rollout: &Episode) -> Result<ExecutionSample> {
    directive.validate()?;
    let id = directive.directive_id();
    if rollout.episode_id != directive.episode_id {
        return Err(Error::Mismatch(format!(
            "rollout episode {} but directive targets {}",
            rollout.episode_id, directive.episode_id
        )));
    }
    match rollout.extensions.get("directive_id").and_then(|v| v.as_str()) {
        Some(found) if found == id => {}
        Some(found) => {
            return Err(Error::Mismatch(format!(
                "rollout directive_id {found} does not match {id}"
            )))
        }
        None => return Err(Error::Mismatch("rollout manifest has no directive_id".into())),
    }
    if let Some(sub) = rollout.extensions.get("subtask_index").and_then(|v| v.as_u64()) {
        if sub != directive.subtask_index as u64 {
            return Err(Error::Mismatch(format!(
                "rollout covers subtask {sub}, directive targets {}",
                directive.subtask_index
            )));
        }
    }
    let step = rollout
        .plan_steps
        .get(directive.subtask_index as usize)
        .ok_or_else(|| {
            Error::Mismatch(format!(
                "rollout has {} steps, directive targets subtask {}",
                rollout.len(),
                directive.subtask_index
            ))
        })?;
    let mode_id = directive.mode.mode_id();
    let seed = directive_seed(&id);
    Ok(ExecutionSample {
        sample_id: sample_id(&rollout.episode_id, &mode_id, seed),
        task_instruction: rollout.task_instruction.clone(),
        subtask_instruction: step.instruction.clone(),
        start_images: step.start_frames.clone(),
        end_images: step.end_frames.clone(),
        label: FailureLabel::failure(directive.mode.category())?,
        cot: None,
        provenance: Provenance::rule(&rollout.episode_id, &mode_id, seed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealMode {
    SemanticMismatch,
    RevertAction,
}

impl RealMode {
    pub const ALL: [RealMode; 2] = [RealMode::SemanticMismatch, RealMode::RevertAction];

    pub fn as_str(self) -> &'static str {
        match self {
            RealMode::SemanticMismatch => "semantic_mismatch",
            RealMode::RevertAction => "revert_action",
        }
    }
}

/// Instruction rewriter backed by a chat model.
pub struct LlmInstructionRewriter<'a> {
    pub backend: &'a dyn ChatBackend,
    pub model_id: String,
    pub template: Template,
    pub temperature: f64,
    pub max_attempts: u32,
}

impl<'a> LlmInstructionRewriter<'a> {
    pub fn new(backend: &'a dyn ChatBackend, model_id: impl Into<String>) -> Self {
        LlmInstructionRewriter {
            backend,
            model_id: model_id.into(),
            template: Template::builtin("perturb_instruction"),
            temperature: 0.7,
            max_attempts: 3,
        }
    }

    fn propose(&self, ep: &Episode, instruction: &str, seed: u64) -> Result<Option<String>> {
        let vars = Vars::new()
            .set("task", ep.task_instruction.clone())
            .set("instruction", instruction)
            .set("objects", ep.object_names().join(", "));
        let rendered = self.template.render(vars.as_map())?;
        for attempt in 0..self.max_attempts {
            let mut messages = Vec::new();
            if let Some(system) = &rendered.system {
                messages.push(ChatMessage::system(system.clone()));
            }
            messages.push(ChatMessage::user(vec![
                ContentPart::text(rendered.user.clone()),
                ContentPart::text(format!("Variation {seed}.{attempt}")),
            ]));
            let req = ChatRequest {
                model_id: self.model_id.clone(),
                messages,
                max_tokens: 128,
                temperature: self.temperature,
            };
            let reply = self.backend.complete(&req)?;
            let line = reply.text.trim();
            if !line.is_empty() && !line.contains('\n') && line != instruction {
                return Ok(Some(line.to_string()));
            }
            debug!(attempt, "rejected instruction rewrite");
        }
        Ok(None)
    }
}

fn check_real_step(ep: &Episode, step: usize) -> Result<()> {
    if ep.source != Source::Real {
        return Err(Error::not_applicable(format!(
            "{} is a sim episode; real-data modes need recorded segments",
            ep.episode_id
        )));
    }
    if step >= ep.len() {
        return Err(Error::not_applicable(format!(
            "step {step} out of range for {} ({} steps)",
            ep.episode_id,
            ep.len()
        )));
    }
    Ok(())
}

fn exec_sample(
    ep: &Episode,
    step: usize,
    mode: &str,
    seed: u64,
    subtask_instruction: String,
    label: FailureLabel,
    generator: Generator,
) -> ExecutionSample {
    let s = &ep.plan_steps[step];
    let mut provenance = Provenance::rule(&ep.episode_id, mode, seed);
    provenance.generator = generator;
    ExecutionSample {
        sample_id: sample_id(&ep.episode_id, mode, seed),
        task_instruction: ep.task_instruction.clone(),
        subtask_instruction,
        start_images: s.start_frames.clone(),
        end_images: s.end_frames.clone(),
        label,
        cot: None,
        provenance,
    }
}

/// An unmodified recorded (or scripted) segment as a success sample.
pub fn success_execution_sample(ep: &Episode, step: usize, seed: u64) -> Result<ExecutionSample> {
    if step >= ep.len() {
        return Err(Error::not_applicable(format!("step {step} out of range")));
    }
    Ok(exec_sample(
        ep,
        step,
        "success",
        seed,
        ep.plan_steps[step].instruction.clone(),
        FailureLabel::SUCCESS,
        Generator::Rule,
    ))
}

/// Replaces exactly one lexicon preposition with another member of its
/// group (`seed mod k` over occurrences × sorted alternatives).
pub fn preposition_swap(instruction: &str, lex: &Lexicon, seed: u64) -> Result<String> {
    let mut options = Vec::new();
    for p in lex.find_prepositions(instruction) {
        for alt in lex.alternatives(&p.phrase) {
            options.push((p.span, alt));
        }
    }
    if options.is_empty() {
        return Err(Error::NoPreposition(instruction.to_string()));
    }
    let (span, alt) = options[seeded_index(seed, options.len())];
    Ok(crate::text::splice(instruction, span, alt))
}

/// Alters the subtask instruction of a recorded real step while keeping its
/// images. The rule path picks `seed mod k` over every preposition swap,
/// object substitution and place-phrase rewrite, sorted by resulting text.
pub fn perturb_semantic_mismatch(
    ep: &Episode,
    step: usize,
    seed: u64,
    lex: &Lexicon,
    llm: Option<&LlmInstructionRewriter<'_>>,
) -> Result<ExecutionSample> {
    check_real_step(ep, step)?;
    let s = &ep.plan_steps[step];
    let objects = ep.object_names();
    let edits = instruction_edits(&s.instruction, &objects, s.target_place.as_deref(), lex);
    if edits.is_empty() {
        return Err(Error::not_applicable(format!(
            "no object or preposition to alter in {:?}",
            s.instruction
        )));
    }
    let rule = edits[seeded_index(seed, edits.len())].clone();

    let (text, category, generator) = match llm {
        Some(llm) => match llm.propose(ep, &s.instruction, seed)? {
            Some(text) => {
                let category =
                    classify_instruction_change(&s.instruction, &text, &objects, s.target_place.as_deref(), lex)
                        .unwrap_or(Category::WrongStateOrPlacement);
                (text, category, Generator::Llm)
            }
            None => (rule.text, rule.category, Generator::Rule),
        },
        None => (rule.text, rule.category, Generator::Rule),
    };
    Ok(exec_sample(
        ep,
        step,
        RealMode::SemanticMismatch.as_str(),
        seed,
        text,
        FailureLabel::failure(category)?,
        generator,
    ))
}

/// Pairs the step's start images with themselves: the robot made no progress.
pub fn perturb_revert_action(ep: &Episode, step: usize, seed: u64) -> Result<ExecutionSample> {
    check_real_step(ep, step)?;
    let mut sample = exec_sample(
        ep,
        step,
        RealMode::RevertAction.as_str(),
        seed,
        ep.plan_steps[step].instruction.clone(),
        FailureLabel::failure(Category::NoProgress)?,
        Generator::Rule,
    );
    sample.end_images = sample.start_images.clone();
    Ok(sample)
}

/// Real-mode sample with the step derived from the seed (`seed mod N`).
pub fn perturb_real(
    ep: &Episode,
    mode: RealMode,
    seed: u64,
    lex: &Lexicon,
    llm: Option<&LlmInstructionRewriter<'_>>,
) -> Result<ExecutionSample> {
    if ep.is_empty() {
        return Err(Error::not_applicable("episode has no steps"));
    }
    let step = seeded_index(seed, ep.len());
    match mode {
        RealMode::SemanticMismatch => perturb_semantic_mismatch(ep, step, seed, lex, llm),
        RealMode::RevertAction => perturb_revert_action(ep, step, seed),
    }
}

/// Balanced execution samples. Failures come from the in-toolkit real
/// modes and from already-ingested sim rollouts (each used at most once).
pub fn generate_execution_samples(
    corpus: &[Episode],
    cfg: &GenConfig,
    lex: &Lexicon,
    llm: Option<&LlmInstructionRewriter<'_>>,
    rollouts: &[ExecutionSample],
) -> Result<Vec<ExecutionSample>> {
    if corpus.is_empty() {
        return Err(Error::CorpusExhausted("empty corpus".into()));
    }
    let n_success = cfg.target_count / 2;
    let n_failure = cfg.target_count - n_success;

    let mut samples: Vec<ExecutionSample> = (0..n_success)
        .into_par_iter()
        .map(|j| {
            let ep = &corpus[j % corpus.len()];
            let seed = hash64(cfg.master_seed, &[&ep.episode_id, "success", &j.to_string()]);
            success_execution_sample(ep, seeded_index(seed, ep.len()), seed)
        })
        .collect::<Result<_>>()?;

    let mut pools: std::collections::BTreeMap<String, Vec<&ExecutionSample>> = Default::default();
    for r in rollouts {
        pools.entry(r.provenance.mode.clone()).or_default().push(r);
    }
    for pool in pools.values_mut() {
        pool.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        pool.dedup_by(|a, b| a.sample_id == b.sample_id);
    }

    let has_real = corpus.iter().any(|e| e.source == Source::Real);
    let mut modes: Vec<String> = Vec::new();
    if has_real || !cfg.weights.is_empty() {
        modes.extend(RealMode::ALL.iter().map(|m| m.as_str().to_string()));
    }
    for m in SimMode::ALL {
        if pools.contains_key(&m.mode_id()) || !cfg.weights.is_empty() {
            modes.push(m.mode_id());
        }
    }
    let weights = cfg.weights_for(modes.iter().map(String::as_str))?;
    let quotas = allocate_quotas(n_failure, &weights);

    let produce = |mode: &str, j: usize| -> Result<Option<ExecutionSample>> {
        let real = RealMode::ALL.into_iter().find(|m| m.as_str() == mode);
        match real {
            Some(real) => {
                for k in 0..corpus.len() {
                    let ep = &corpus[(j + k) % corpus.len()];
                    let seed = hash64(cfg.master_seed, &[&ep.episode_id, mode, &j.to_string()]);
                    match perturb_real(ep, real, seed, lex, llm) {
                        Ok(s) => return Ok(Some(s)),
                        Err(e) if e.is_not_applicable() => continue,
                        Err(e) => return Err(e),
                    }
                }
                Ok(None)
            }
            None => Ok(pools.get(mode).and_then(|p| p.get(j)).map(|s| (*s).clone())),
        }
    };

    let mut deficit = 0;
    let mut open: Vec<(String, usize)> = Vec::new();
    let per_mode: Vec<(String, Vec<ExecutionSample>, bool)> = quotas
        .par_iter()
        .map(|(mode, quota)| {
            let mut out = Vec::with_capacity(*quota);
            for j in 0..*quota {
                match produce(mode, j)? {
                    Some(s) => out.push(s),
                    None => return Ok((mode.clone(), out, false)),
                }
            }
            Ok((mode.clone(), out, true))
        })
        .collect::<Result<_>>()?;
    for ((_, quota), (mode, out, applicable)) in quotas.iter().zip(per_mode) {
        deficit += quota - out.len();
        if applicable {
            open.push((mode, out.len()));
        } else {
            warn!(%mode, "execution mode exhausted; redrawing its quota");
        }
        samples.extend(out);
    }
    while deficit > 0 {
        if open.is_empty() {
            return Err(Error::CorpusExhausted(format!(
                "{deficit} execution failure samples could not be generated"
            )));
        }
        let mut still_open = Vec::new();
        for (mode, next) in open {
            if deficit == 0 {
                still_open.push((mode, next));
                continue;
            }
            if let Some(s) = produce(&mode, next)? {
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

impl FromStr for RealMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RealMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown execution mode {s:?}")))
    }
}
