//! Reversal augmentation: a recorded real success played backwards is a new
//! success for the antonym instruction.

use serde_json::Value;

use crate::episode::{Episode, PlanStep, Source};
use crate::lexicon::Lexicon;
use crate::text::splice;

/// Rewrites the leftmost-longest antonym phrase in `text`, if any.
pub fn rewrite_with_antonym(text: &str, lex: &Lexicon) -> Option<String> {
    let m = lex.find_antonym_phrases(text).into_iter().next()?;
    let antonym = lex.antonym(&m.phrase)?;
    Some(splice(text, m.span, antonym))
}

/// Returns the reversed episode when every step instruction carries an
/// antonym phrase; `None` for sim episodes or non-reversible plans.
pub fn reverse_episode(ep: &Episode, lex: &Lexicon) -> Option<Episode> {
    if ep.source != Source::Real {
        return None;
    }
    let rewritten: Vec<String> = ep
        .plan_steps
        .iter()
        .map(|s| rewrite_with_antonym(&s.instruction, lex))
        .collect::<Option<_>>()?;

    let plan_steps = ep
        .plan_steps
        .iter()
        .zip(rewritten)
        .rev()
        .enumerate()
        .map(|(i, (step, instruction))| PlanStep {
            index: i as u32,
            instruction,
            target_object: step.target_object.clone(),
            target_place: step.target_place.clone(),
            start_frames: step.end_frames.clone(),
            end_frames: step.start_frames.clone(),
        })
        .collect();

    let mut extensions = ep.extensions.clone();
    extensions.insert("reversed_from".into(), Value::String(ep.episode_id.clone()));

    Some(Episode {
        episode_id: format!("{}-rev", ep.episode_id),
        source: ep.source,
        task_instruction: rewrite_with_antonym(&ep.task_instruction, lex)
            .unwrap_or_else(|| ep.task_instruction.clone()),
        plan_steps,
        scene_objects: ep.scene_objects.clone(),
        cameras: ep.cameras.clone(),
        robot_states: ep.robot_states.clone(),
        extensions,
    })
}

/// Appends every reversible episode's reversal to the corpus, keeping
/// episode_id order.
pub fn augment_corpus(corpus: &[Episode], lex: &Lexicon) -> Vec<Episode> {
    let mut out: Vec<Episode> = corpus.to_vec();
    out.extend(corpus.iter().filter_map(|ep| reverse_episode(ep, lex)));
    out.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    out
}
