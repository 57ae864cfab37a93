//! Word-level text helpers and the seeded hashing used for sample identities.

use sha2::{Digest, Sha256};

/// Byte span of one word inside a string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '_'
}

/// Splits `text` into word spans (alphanumeric runs, apostrophes kept).
pub fn word_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (is_word_char(c), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(Span { start: s, end: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(Span {
            start: s,
            end: text.len(),
        });
    }
    spans
}

pub fn words(text: &str) -> Vec<String> {
    word_spans(text)
        .into_iter()
        .map(|s| text[s.start..s.end].to_lowercase())
        .collect()
}

/// A phrase occurrence: byte span in the haystack plus the matched phrase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PhraseMatch {
    pub span: Span,
    pub phrase: String,
}

/// Finds non-overlapping occurrences of any of `phrases` in `text`, matching
/// whole words case-insensitively. Scans left to right and prefers the
/// longest phrase at each position.
pub fn find_phrases<'a, I>(text: &str, phrases: I) -> Vec<PhraseMatch>
where
    I: IntoIterator<Item = &'a str>,
{
    let spans = word_spans(text);
    let lowered: Vec<String> = spans.iter().map(|s| text[s.start..s.end].to_lowercase()).collect();
    let mut candidates: Vec<(Vec<String>, &str)> = phrases
        .into_iter()
        .map(|p| (words(p), p))
        .filter(|(w, _)| !w.is_empty())
        .collect();
    // Longest first so the first hit at a position is the longest.
    candidates.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(b.1)));

    let mut out = Vec::new();
    let mut i = 0;
    while i < spans.len() {
        let hit = candidates
            .iter()
            .find(|(w, _)| i + w.len() <= spans.len() && lowered[i..i + w.len()] == w[..]);
        match hit {
            Some((w, phrase)) => {
                out.push(PhraseMatch {
                    span: Span {
                        start: spans[i].start,
                        end: spans[i + w.len() - 1].end,
                    },
                    phrase: phrase.to_string(),
                });
                i += w.len();
            }
            None => i += 1,
        }
    }
    out
}

/// Replaces `span` with `replacement`, copying the capitalisation of the
/// first character of the replaced text.
pub fn splice(text: &str, span: Span, replacement: &str) -> String {
    let original = &text[span.start..span.end];
    let capitalised = original.chars().next().is_some_and(char::is_uppercase);
    let mut repl = replacement.to_string();
    if capitalised {
        let mut chars = replacement.chars();
        if let Some(first) = chars.next() {
            repl = first.to_uppercase().chain(chars).collect();
        }
    }
    let mut out = String::with_capacity(text.len() + repl.len());
    out.push_str(&text[..span.start]);
    out.push_str(&repl);
    out.push_str(&text[span.end..]);
    out
}

/// Resolves a "pick one of k options" choice: `seed mod k`.
pub fn seeded_index(seed: u64, k: usize) -> usize {
    assert!(k > 0, "seeded choice over zero options");
    (seed % k as u64) as usize
}

/// Length-prefixed SHA-256 over a sequence of fields, so field boundaries
/// can never alias.
pub fn digest_fields(fields: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for f in fields {
        hasher.update((f.len() as u64).to_be_bytes());
        hasher.update(f);
    }
    hasher.finalize().into()
}

/// 64-bit seed derived from a master seed and identifying fields.
pub fn hash64(master_seed: u64, parts: &[&str]) -> u64 {
    let seed_bytes = master_seed.to_be_bytes();
    let mut fields: Vec<&[u8]> = vec![&seed_bytes];
    fields.extend(parts.iter().map(|p| p.as_bytes()));
    let d = digest_fields(&fields);
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Stable sample identifier: 16 hex chars of the digest of
/// (episode_id, mode, seed).
pub fn sample_id(episode_id: &str, mode: &str, seed: u64) -> String {
    let seed = seed.to_string();
    let d = digest_fields(&[episode_id.as_bytes(), mode.as_bytes(), seed.as_bytes()]);
    hex::encode(&d[..8])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
