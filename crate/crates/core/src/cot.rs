//! Grounded reasoning-trace generation.
//!
//! The trace generator is told the scene contents, the robot state and, for
//! failures, what went wrong. Traces are kept only when their final line
//! agrees with the sample label.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::episode::{Episode, FrameRef};
use crate::error::{Error, Result};
use crate::gateway::{prepare_image_parts, ChatBackend, ChatMessage, ChatRequest, ContentPart, ImageMode, ImagePart};
use crate::protocol::{exec_image_labels, numbered, parse_verdict, Verdict, ANSWER_GRAMMAR};
use crate::sample::{ExecutionSample, PlanningSample, Sample};
use crate::taxonomy::{Category, FailureLabel, Kind};
use crate::template::{RenderedPrompt, Template, Vars};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    pub category: String,
    pub location_desc: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingInfo {
    pub object_entries: Vec<ObjectEntry>,
    pub robot_state_desc: String,
    /// Empty for success samples.
    pub failure_reason: String,
}

impl GroundingInfo {
    pub fn render(&self) -> String {
        let mut out = String::from("Objects:\n");
        for o in &self.object_entries {
            out.push_str(&format!("- {} ({}): {}\n", o.name, o.category, o.location_desc));
        }
        out.push_str(&format!("Robot state: {}", self.robot_state_desc));
        if !self.failure_reason.is_empty() {
            out.push_str(&format!("\nFailure reason: {}", self.failure_reason));
        }
        out
    }
}

fn object_entries(ep: &Episode) -> Vec<ObjectEntry> {
    ep.scene_objects
        .iter()
        .map(|o| ObjectEntry {
            name: o.name.clone(),
            category: o.category.clone().unwrap_or_else(|| "object".into()),
            location_desc: o
                .location_desc
                .clone()
                .or_else(|| {
                    o.bbox
                        .map(|[x, y, w, h]| format!("box at x={x:.0}, y={y:.0}, {w:.0}x{h:.0} px"))
                })
                .unwrap_or_else(|| "location unknown".into()),
        })
        .collect()
}

fn robot_state_desc(ep: &Episode, step: Option<usize>) -> String {
    let Some(states) = ep.robot_states.as_ref().filter(|s| !s.is_empty()) else {
        return "not recorded".into();
    };
    let gripper = |open: bool| if open { "open" } else { "closed" };
    let describe = |frame_step: u32| {
        states
            .iter()
            .filter(|s| s.step <= frame_step)
            .max_by_key(|s| s.step)
            .or_else(|| states.first())
            .map(|s| {
                format!(
                    "gripper {} at ({:.2}, {:.2}, {:.2})",
                    gripper(s.gripper_open),
                    s.ee_pose[0],
                    s.ee_pose[1],
                    s.ee_pose[2]
                )
            })
            .unwrap_or_default()
    };
    match step.and_then(|i| ep.plan_steps.get(i)) {
        Some(s) => {
            let start = s.start_frames.first().map(|f| f.step).unwrap_or(0);
            let end = s.end_frames.first().map(|f| f.step).unwrap_or(start);
            format!("before: {}; after: {}", describe(start), describe(end))
        }
        None => {
            let first = ep.plan_steps[0].start_frames.first().map(|f| f.step).unwrap_or(0);
            format!("initially {}", describe(first))
        }
    }
}

fn plan_failure_reason(ep: &Episode, s: &PlanningSample) -> String {
    let gold = ep.plan();
    let cat = s.label.category();
    let name = cat.display_name();
    let first_diff = gold.iter().zip(&s.plan).position(|(a, b)| a != b);
    let detail = match cat {
        Category::MissingSubtask => {
            let i = first_diff.unwrap_or(s.plan.len());
            gold.get(i).map(|m| format!("the required step \"{m}\" is missing"))
        }
        Category::ContradictorySubtasks => {
            let i = first_diff.unwrap_or(gold.len());
            s.plan
                .get(i)
                .map(|x| format!("step {} \"{x}\" undoes the step before it", i + 1))
        }
        Category::WrongOrder => {
            first_diff.map(|i| format!("step {} \"{}\" comes before the step it depends on", i + 1, s.plan[i]))
        }
        _ => first_diff.map(|i| format!("step {} should be \"{}\" but reads \"{}\"", i + 1, gold[i], s.plan[i])),
    };
    match detail {
        Some(d) => format!("{name}: {d}"),
        None => name.to_string(),
    }
}

fn step_of(ep: &Episode, frames: &[FrameRef]) -> Option<usize> {
    ep.plan_steps.iter().position(|p| p.start_frames == frames)
}

fn exec_failure_reason(ep: &Episode, s: &ExecutionSample) -> String {
    let cat = s.label.category();
    let name = cat.display_name();
    let recorded = step_of(ep, &s.start_images).map(|i| ep.plan_steps[i].instruction.as_str());
    let detail = match (s.provenance.mode.as_str(), recorded) {
        ("revert_action", _) => Some("the scene after the subtask is identical to the scene before it".to_string()),
        ("semantic_mismatch", Some(done)) => Some(format!(
            "the robot performed \"{done}\" instead of \"{}\"",
            s.subtask_instruction
        )),
        (mode, _) if mode.starts_with("sim_") => Some(match cat {
            Category::NoGripperClose => "the gripper never closed on the object".to_string(),
            Category::WrongObjectManipulated => "the robot manipulated a different object".to_string(),
            Category::ImpreciseGraspOrPush => "the grasp or push missed its target pose".to_string(),
            _ => "the object ended in the wrong place or orientation".to_string(),
        }),
        _ => None,
    };
    match detail {
        Some(d) => format!("{name}: {d}"),
        None => name.to_string(),
    }
}

/// Grounding for a sample, read from the episode it was generated from.
pub fn grounding_for(sample: &Sample, ep: &Episode) -> GroundingInfo {
    let (step, reason) = match sample {
        Sample::Planning(s) => (
            None,
            if s.label.success() {
                String::new()
            } else {
                plan_failure_reason(ep, s)
            },
        ),
        Sample::Execution(s) => (
            step_of(ep, &s.start_images),
            if s.label.success() {
                String::new()
            } else {
                exec_failure_reason(ep, s)
            },
        ),
    };
    GroundingInfo {
        object_entries: object_entries(ep),
        robot_state_desc: robot_state_desc(ep, step),
        failure_reason: reason,
    }
}

fn answer_line(label: FailureLabel) -> String {
    Verdict::answer_line(label.success(), label.category())
}

pub fn build_cot_prompt_planning(
    sample: &PlanningSample,
    g: &GroundingInfo,
    template: &Template,
) -> Result<RenderedPrompt> {
    let mut steps: Vec<String> = sample
        .plan
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "Verify subtask {}: \"{s}\" against the scene and the steps before it.",
                i + 1
            )
        })
        .collect();
    steps.push("Analyze the overall plan: does it achieve the task, in a feasible order, without missing or contradictory steps?".into());
    steps.push("State the final answer line.".into());
    let vars = Vars::new()
        .set("images", "initial front view")
        .set("task", sample.task_instruction.clone())
        .set("plan", numbered(&sample.plan))
        .set("grounding", g.render())
        .set("verification_steps", numbered(&steps))
        .set("grammar", ANSWER_GRAMMAR)
        .set("answer_line", answer_line(sample.label));
    template.render(vars.as_map())
}

pub fn build_cot_prompt_execution(
    sample: &ExecutionSample,
    g: &GroundingInfo,
    template: &Template,
) -> Result<RenderedPrompt> {
    let views = sample.start_images.len();
    let labels = exec_image_labels(views);
    let (start, end) = labels.split_at(views);
    let steps = vec![
        format!(
            "Describe the start images ({}), taken before the subtask.",
            start.join(", ")
        ),
        format!("Describe the end images ({}), taken after the subtask.", end.join(", ")),
        "Assess whether the subtask was completed by comparing start and end.".to_string(),
        "State the final answer line.".to_string(),
    ];
    let vars = Vars::new()
        .set("images", labels.join(", "))
        .set("task", sample.task_instruction.clone())
        .set("subtask", sample.subtask_instruction.clone())
        .set("grounding", g.render())
        .set("verification_steps", numbered(&steps))
        .set("grammar", ANSWER_GRAMMAR)
        .set("answer_line", answer_line(sample.label));
    template.render(vars.as_map())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub text: String,
    pub token_estimate: usize,
    pub verdict_line: String,
}

impl ReasoningTrace {
    pub fn from_text(text: &str) -> Self {
        let text = text.trim().to_string();
        ReasoningTrace {
            token_estimate: token_estimate(&text),
            verdict_line: text
                .lines()
                .rev()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("")
                .trim()
                .to_string(),
            text,
        }
    }
}

pub fn token_estimate(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_regen: u32,
    pub image_mode: ImageMode,
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig {
            model_id: "reasoner".into(),
            temperature: 0.7,
            max_output_tokens: 1024,
            min_tokens: 30,
            max_tokens: 400,
            max_regen: 3,
            image_mode: ImageMode::Separated,
        }
    }
}

fn check_trace(
    trace: &ReasoningTrace,
    label: FailureLabel,
    kind: Kind,
    cfg: &CotConfig,
) -> std::result::Result<(), String> {
    let v = parse_verdict(&trace.verdict_line, kind).map_err(|e| e.to_string())?;
    if v.success != label.success() || v.category != label.category() {
        return Err(format!(
            "verdict {:?} contradicts label {}",
            trace.verdict_line,
            answer_line(label)
        ));
    }
    if !(cfg.min_tokens..=cfg.max_tokens).contains(&trace.token_estimate) {
        return Err(format!(
            "{} tokens outside [{}, {}]",
            trace.token_estimate, cfg.min_tokens, cfg.max_tokens
        ));
    }
    Ok(())
}

/// True when the final line parses, matches `label`, and the length is in bounds.
pub fn validate_trace(trace: &ReasoningTrace, label: FailureLabel, cfg: &CotConfig) -> bool {
    let kind = if label.category().is_valid_for(Kind::Plan) {
        Kind::Plan
    } else {
        Kind::Execution
    };
    check_trace(trace, label, kind, cfg).is_ok()
}

/// Requests a trace, regenerating until one validates or the attempt budget
/// (`1 + max_regen`) runs out.
pub fn generate_cot(
    prompt: &RenderedPrompt,
    images: &[ImagePart],
    label: FailureLabel,
    kind: Kind,
    backend: &dyn ChatBackend,
    cfg: &CotConfig,
) -> Result<ReasoningTrace> {
    let attempts = cfg.max_regen + 1;
    let mut last_reason = String::new();
    for attempt in 0..attempts {
        let mut content = vec![ContentPart::text(prompt.user.clone())];
        for part in images {
            content.push(ContentPart::text(format!("[{}]", part.label)));
            content.push(part.clone().into());
        }
        if attempt > 0 {
            content.push(ContentPart::text(format!("Regeneration attempt {attempt}.")));
        }
        let mut messages = Vec::new();
        if let Some(system) = &prompt.system {
            messages.push(ChatMessage::system(system.clone()));
        }
        messages.push(ChatMessage::user(content));
        let req = ChatRequest {
            model_id: cfg.model_id.clone(),
            messages,
            max_tokens: cfg.max_output_tokens,
            temperature: cfg.temperature,
        };
        let reply = backend.complete(&req)?;
        let trace = ReasoningTrace::from_text(&reply.text);
        match check_trace(&trace, label, kind, cfg) {
            Ok(()) => return Ok(trace),
            Err(reason) => {
                debug!(attempt, %reason, "rejected reasoning trace");
                last_reason = reason;
            }
        }
    }
    Err(Error::InvalidTrace {
        attempts,
        reason: last_reason,
    })
}

pub fn build_cot_prompt(sample: &Sample, g: &GroundingInfo, templates: &CotTemplates) -> Result<RenderedPrompt> {
    match sample {
        Sample::Planning(s) => build_cot_prompt_planning(s, g, &templates.plan),
        Sample::Execution(s) => build_cot_prompt_execution(s, g, &templates.exec),
    }
}

#[derive(Debug, Clone)]
pub struct CotTemplates {
    pub plan: Template,
    pub exec: Template,
}

impl CotTemplates {
    pub fn resolve(dir: Option<&Path>) -> Result<Self> {
        Ok(CotTemplates {
            plan: Template::resolve("cot_plan", dir)?,
            exec: Template::resolve("cot_exec", dir)?,
        })
    }
}

impl Default for CotTemplates {
    fn default() -> Self {
        CotTemplates {
            plan: Template::builtin("cot_plan"),
            exec: Template::builtin("cot_exec"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CotReport {
    pub generated: usize,
    pub skipped: usize,
    pub failures: Vec<(String, String)>,
    pub mean_tokens: Option<f64>,
}

/// Generates traces for every sample without one, in parallel. Failed
/// samples keep `cot = None` and are listed in the report.
pub fn annotate_samples(
    samples: &mut [Sample],
    corpus: &[Episode],
    backend: &dyn ChatBackend,
    cfg: &CotConfig,
    templates: &CotTemplates,
    image_root: &Path,
) -> CotReport {
    let episodes: BTreeMap<&str, &Episode> = corpus.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let results: Vec<Option<Result<ReasoningTrace>>> = samples
        .par_iter()
        .map(|sample| {
            if sample.cot().is_some() {
                return None;
            }
            let run = || -> Result<ReasoningTrace> {
                let ep = episodes.get(sample.provenance().episode_id.as_str()).ok_or_else(|| {
                    Error::Config(format!("episode {} not in corpus", sample.provenance().episode_id))
                })?;
                let g = grounding_for(sample, ep);
                let prompt = build_cot_prompt(sample, &g, templates)?;
                let images = prepare_image_parts(sample, cfg.image_mode, 0, image_root, 0)?.parts;
                generate_cot(&prompt, &images, sample.label(), sample.kind(), backend, cfg)
            };
            Some(run())
        })
        .collect();

    let mut report = CotReport::default();
    for (sample, result) in samples.iter_mut().zip(results) {
        match result {
            None => report.skipped += 1,
            Some(Ok(trace)) => {
                sample.set_cot(Some(trace.text));
                report.generated += 1;
            }
            Some(Err(e)) => {
                warn!(sample = sample.sample_id(), error = %e, "no reasoning trace");
                report.failures.push((sample.sample_id().to_string(), e.to_string()));
            }
        }
    }
    report.mean_tokens = mean_trace_tokens(samples);
    report
}

pub fn mean_trace_tokens(samples: &[Sample]) -> Option<f64> {
    let counts: Vec<usize> = samples.iter().filter_map(|s| s.cot()).map(token_estimate).collect();
    (!counts.is_empty()).then(|| counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Errors on the first stored trace that does not validate against its label.
pub fn check_stored_traces(samples: &[Sample], cfg: &CotConfig) -> Result<()> {
    for s in samples {
        if let Some(cot) = s.cot() {
            let trace = ReasoningTrace::from_text(cot);
            if let Err(reason) = check_trace(&trace, s.label(), s.kind(), cfg) {
                return Err(Error::InvalidTrace {
                    attempts: 0,
                    reason: format!("{}: {reason}", s.sample_id()),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{CameraDecl, PlanStep, SceneObject, Source};
    use crate::gateway::ChatResponse;
    use crate::sample::Provenance;
    use std::sync::Mutex;

    fn frame(cam: &str, step: u32) -> FrameRef {
        FrameRef {
            camera_id: cam.into(),
            path: format!("{cam}_{step}.png"),
            step,
        }
    }

    fn episode(cams: &[&str]) -> Episode {
        let plan = ["pick up the cube", "put the cube in the box", "close the box"];
        Episode {
            episode_id: "ep".into(),
            source: Source::Sim,
            task_instruction: "pack the cube".into(),
            plan_steps: plan
                .iter()
                .enumerate()
                .map(|(i, s)| PlanStep {
                    index: i as u32,
                    instruction: s.to_string(),
                    target_object: None,
                    target_place: None,
                    start_frames: cams.iter().map(|c| frame(c, i as u32)).collect(),
                    end_frames: cams.iter().map(|c| frame(c, i as u32 + 1)).collect(),
                })
                .collect(),
            scene_objects: vec![SceneObject {
                name: "cube".into(),
                category: Some("toy".into()),
                location_desc: Some("left of the box".into()),
                bbox: None,
            }],
            cameras: cams
                .iter()
                .map(|c| CameraDecl {
                    camera_id: c.to_string(),
                    role: None,
                })
                .collect(),
            robot_states: None,
            extensions: Default::default(),
        }
    }

    fn plan_sample(ep: &Episode, plan: Vec<String>, label: FailureLabel) -> PlanningSample {
        PlanningSample {
            sample_id: "s".into(),
            task_instruction: ep.task_instruction.clone(),
            plan,
            initial_image: ep.plan_steps[0].start_frames[0].clone(),
            label,
            cot: None,
            provenance: Provenance::rule("ep", "m", 0),
        }
    }

    fn exec_sample(ep: &Episode, label: FailureLabel) -> ExecutionSample {
        ExecutionSample {
            sample_id: "e".into(),
            task_instruction: ep.task_instruction.clone(),
            subtask_instruction: ep.plan_steps[1].instruction.clone(),
            start_images: ep.plan_steps[1].start_frames.clone(),
            end_images: ep.plan_steps[1].end_frames.clone(),
            label,
            cot: None,
            provenance: Provenance::rule("ep", "success", 0),
        }
    }

    #[test]
    fn planning_prompt_verifies_each_step_then_the_plan() {
        let ep = episode(&["front"]);
        let s = plan_sample(&ep, ep.plan(), FailureLabel::SUCCESS);
        let g = grounding_for(&Sample::Planning(s.clone()), &ep);
        let t = Template::builtin("cot_plan");
        let p = build_cot_prompt_planning(&s, &g, &t).unwrap();
        for i in 1..=3 {
            assert!(p.user.contains(&format!("Verify subtask {i}:")));
        }
        let overall = p.user.find("Analyze the overall plan").unwrap();
        assert!(p.user.find("Verify subtask 3").unwrap() < overall);
        assert!(!p.user.contains("Failure reason"));
        assert!(p.user.contains("cube (toy): left of the box"));
        assert_eq!(p.template_id, t.id());
    }

    #[test]
    fn failure_grounding_carries_reason() {
        let ep = episode(&["front"]);
        let mut plan = ep.plan();
        plan.remove(1);
        let s = plan_sample(&ep, plan, FailureLabel::failure(Category::MissingSubtask).unwrap());
        let g = grounding_for(&Sample::Planning(s.clone()), &ep);
        assert!(g.failure_reason.contains("put the cube in the box"));
        let p = build_cot_prompt_planning(&s, &g, &Template::builtin("cot_plan")).unwrap();
        assert!(p.user.contains("Failure reason: "));
        assert!(p.user.contains("ANSWER: failure | CATEGORY: missing_subtask"));
    }

    #[test]
    fn execution_prompt_references_every_view() {
        let t = Template::builtin("cot_exec");
        for (cams, n) in [(&["front"][..], 2), (&["a", "b", "c", "d"][..], 8)] {
            let ep = episode(cams);
            let s = exec_sample(&ep, FailureLabel::SUCCESS);
            let g = grounding_for(&Sample::Execution(s.clone()), &ep);
            let p = build_cot_prompt_execution(&s, &g, &t).unwrap();
            let refs = exec_image_labels(cams.len());
            assert_eq!(refs.len(), n);
            for r in &refs {
                assert!(p.user.contains(r.as_str()), "{r}");
            }
            let a = p.user.find("Describe the start images").unwrap();
            let b = p.user.find("Describe the end images").unwrap();
            let c = p.user.find("Assess whether").unwrap();
            assert!(a < b && b < c);
        }
    }

    fn long_trace(answer: &str) -> String {
        format!("{}\n{answer}", "The robot arm is above the cube. ".repeat(8))
    }

    #[test]
    fn validation_rules() {
        let cfg = CotConfig::default();
        let ok = ReasoningTrace::from_text(&long_trace("ANSWER: success"));
        assert!(validate_trace(&ok, FailureLabel::SUCCESS, &cfg));
        let wrong = ReasoningTrace::from_text(&long_trace("ANSWER: failure | CATEGORY: wrong_order"));
        assert!(!validate_trace(
            &wrong,
            FailureLabel::failure(Category::MissingSubtask).unwrap(),
            &cfg
        ));
        assert!(validate_trace(
            &wrong,
            FailureLabel::failure(Category::WrongOrder).unwrap(),
            &cfg
        ));
        let junk = ReasoningTrace::from_text(&long_trace("the answer is yes"));
        assert!(!validate_trace(&junk, FailureLabel::SUCCESS, &cfg));
        let short = ReasoningTrace::from_text("ANSWER: success");
        assert!(!validate_trace(&short, FailureLabel::SUCCESS, &cfg));
    }

    struct Scripted {
        replies: Mutex<Vec<String>>,
        calls: Mutex<Vec<ChatRequest>>,
    }

    impl ChatBackend for Scripted {
        fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
            self.calls.lock().unwrap().push(req.clone());
            let mut r = self.replies.lock().unwrap();
            let text = if r.len() > 1 { r.remove(0) } else { r[0].clone() };
            Ok(ChatResponse::from_text(text))
        }

        fn probe(&self) -> bool {
            true
        }
    }

    #[test]
    fn regenerates_until_valid_then_gives_up() {
        let prompt = RenderedPrompt {
            template_id: "t".into(),
            system: None,
            user: "u".into(),
        };
        let cfg = CotConfig::default();
        let stub = Scripted {
            replies: Mutex::new(vec![
                long_trace("ANSWER: failure | CATEGORY: wrong_order"),
                long_trace("ANSWER: success"),
            ]),
            calls: Mutex::new(Vec::new()),
        };
        let t = generate_cot(&prompt, &[], FailureLabel::SUCCESS, Kind::Plan, &stub, &cfg).unwrap();
        assert_eq!(t.verdict_line, "ANSWER: success");
        let calls = stub.calls.lock().unwrap();
        assert_eq!(calls.len(), 2);
        assert_ne!(calls[0].cache_key(), calls[1].cache_key());
        drop(calls);

        let contradicting = Scripted {
            replies: Mutex::new(vec![long_trace("ANSWER: success")]),
            calls: Mutex::new(Vec::new()),
        };
        let label = FailureLabel::failure(Category::WrongOrder).unwrap();
        let err = generate_cot(&prompt, &[], label, Kind::Plan, &contradicting, &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidTrace { attempts: 4, .. }));
        assert_eq!(contradicting.calls.lock().unwrap().len(), 4);
    }
}
