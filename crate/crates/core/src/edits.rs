//! Candidate text edits shared by the planning and execution perturbations.

use crate::lexicon::Lexicon;
use crate::taxonomy::Category;
use crate::text::{find_phrases, splice, word_spans, PhraseMatch, Span};

const DETERMINERS: [&str; 4] = ["the", "a", "an", "its"];

/// An object-name occurrence, flagged when it names a placement target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub matched: PhraseMatch,
    pub is_place: bool,
    /// The preposition directly governing this mention, if any.
    pub preposition: Option<PhraseMatch>,
}

/// Object mentions in `text`, longest names first at each position.
/// A mention is a place when it equals `target_place` or follows a lexicon
/// preposition (optionally through a determiner).
pub fn object_mentions(text: &str, objects: &[&str], target_place: Option<&str>, lex: &Lexicon) -> Vec<Mention> {
    let preps = lex.find_prepositions(text);
    let words = word_spans(text);
    find_phrases(text, objects.iter().copied())
        .into_iter()
        .map(|m| {
            let preposition = governing_preposition(text, &words, &preps, m.span);
            let is_target = target_place.is_some_and(|p| p.eq_ignore_ascii_case(&m.phrase));
            Mention {
                is_place: is_target || preposition.is_some(),
                preposition,
                matched: m,
            }
        })
        .collect()
}

fn governing_preposition(text: &str, words: &[Span], preps: &[PhraseMatch], span: Span) -> Option<PhraseMatch> {
    let idx = words.iter().position(|w| w.start == span.start)?;
    let mut before = idx.checked_sub(1)?;
    let w = words[before];
    if DETERMINERS.contains(&text[w.start..w.end].to_lowercase().as_str()) {
        before = before.checked_sub(1)?;
    }
    let end = words[before].end;
    preps.iter().find(|p| p.span.end == end).cloned()
}

/// Preposition occurrences that do not sit inside an object mention.
pub fn free_prepositions(text: &str, objects: &[&str], lex: &Lexicon) -> Vec<PhraseMatch> {
    let mentions = find_phrases(text, objects.iter().copied());
    lex.find_prepositions(text)
        .into_iter()
        .filter(|p| {
            !mentions
                .iter()
                .any(|m| p.span.start < m.span.end && m.span.start < p.span.end)
        })
        .collect()
}

/// A rewritten instruction and the failure category its change implies.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct InstructionEdit {
    pub text: String,
    pub category: Category,
}

/// Every rule-based semantic alteration of one instruction: preposition
/// swaps, object substitutions, and place-phrase rewrites (preposition and
/// place object together). Sorted by resulting text, deduplicated.
pub fn instruction_edits(
    text: &str,
    objects: &[&str],
    target_place: Option<&str>,
    lex: &Lexicon,
) -> Vec<InstructionEdit> {
    let mut edits = Vec::new();
    for p in free_prepositions(text, objects, lex) {
        for alt in lex.alternatives(&p.phrase) {
            edits.push(InstructionEdit {
                text: splice(text, p.span, alt),
                category: Category::WrongStateOrPlacement,
            });
        }
    }
    for m in object_mentions(text, objects, target_place, lex) {
        let category = if m.is_place {
            Category::WrongStateOrPlacement
        } else {
            Category::WrongObjectManipulated
        };
        for other in objects.iter().filter(|o| !o.eq_ignore_ascii_case(&m.matched.phrase)) {
            edits.push(InstructionEdit {
                text: splice(text, m.matched.span, other),
                category,
            });
            if let Some(prep) = &m.preposition {
                for alt in lex.alternatives(&prep.phrase) {
                    // Splice the later span first so earlier offsets stay valid.
                    let tmp = splice(text, m.matched.span, other);
                    edits.push(InstructionEdit {
                        text: splice(&tmp, prep.span, alt),
                        category: Category::WrongStateOrPlacement,
                    });
                }
            }
        }
    }
    edits.retain(|e| e.text != text);
    edits.sort();
    edits.dedup_by(|a, b| a.text == b.text);
    edits
}

/// Lower-cased word lists with the common prefix and suffix removed.
pub fn changed_words(original: &str, altered: &str) -> (Vec<String>, Vec<String>, usize) {
    let a = crate::text::words(original);
    let b = crate::text::words(altered);
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - prefix;
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    (
        a[prefix..a.len() - suffix].to_vec(),
        b[prefix..b.len() - suffix].to_vec(),
        prefix,
    )
}

/// Infers the category of an instruction change from which span differs:
/// a preposition or place object means a placement change, any other
/// object mention means the wrong object. Returns `None` for identical text.
pub fn classify_instruction_change(
    original: &str,
    altered: &str,
    objects: &[&str],
    target_place: Option<&str>,
    lex: &Lexicon,
) -> Option<Category> {
    let (old, new, prefix) = changed_words(original, altered);
    if old.is_empty() && new.is_empty() {
        return None;
    }
    let words = word_spans(original);
    let start = words.get(prefix).map(|w| w.start).unwrap_or(original.len());
    let end = if old.is_empty() {
        start
    } else {
        words[prefix + old.len() - 1].end
    };
    let touches = |s: Span| {
        if start == end {
            s.start <= start && start <= s.end
        } else {
            s.start < end && start < s.end
        }
    };

    let mentions = object_mentions(original, objects, target_place, lex);
    let preps = free_prepositions(original, objects, lex);
    if preps.iter().any(|p| touches(p.span)) || mentions.iter().any(|m| m.is_place && touches(m.matched.span)) {
        return Some(Category::WrongStateOrPlacement);
    }
    if mentions.iter().any(|m| touches(m.matched.span)) {
        return Some(Category::WrongObjectManipulated);
    }
    Some(Category::WrongStateOrPlacement)
}
