//! Independent structural checks used by property and acceptance tests.

use failforge_core::Lexicon;

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Words removed and inserted between two strings after trimming the common
/// prefix and suffix.
pub fn word_diff(a: &str, b: &str) -> (Vec<String>, Vec<String>) {
    let (a, b) = (words(a), words(b));
    let mut p = 0;
    while p < a.len() && p < b.len() && a[p] == b[p] {
        p += 1;
    }
    let mut s = 0;
    while s < a.len() - p && s < b.len() - p && a[a.len() - 1 - s] == b[b.len() - 1 - s] {
        s += 1;
    }
    (a[p..a.len() - s].to_vec(), b[p..b.len() - s].to_vec())
}

pub fn positions_differing(a: &[String], b: &[String]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn is_permutation(a: &[String], b: &[String]) -> bool {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort();
    y.sort();
    x == y
}

pub fn check_wrong_order(orig: &[String], out: &[String]) -> Result<(), String> {
    if !is_permutation(orig, out) {
        return Err("not a permutation".into());
    }
    let d = positions_differing(orig, out);
    if d < 2 {
        return Err(format!("differs in {d} positions"));
    }
    Ok(())
}

pub fn is_subsequence(small: &[String], big: &[String]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

pub fn check_missing(orig: &[String], out: &[String]) -> Result<(), String> {
    if out.len() + 1 != orig.len() {
        return Err(format!("length {} for original {}", out.len(), orig.len()));
    }
    if !is_subsequence(out, orig) {
        return Err("not a subsequence".into());
    }
    Ok(())
}

fn antonym_pairs(lex: &Lexicon) -> Vec<(String, String)> {
    let toml: toml::Value = toml::from_str(&lex.to_toml_string()).unwrap();
    toml["verb_antonyms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            let p = p.as_array().unwrap();
            (p[0].as_str().unwrap().to_string(), p[1].as_str().unwrap().to_string())
        })
        .collect()
}

pub fn preposition_groups(lex: &Lexicon) -> Vec<Vec<String>> {
    let toml: toml::Value = toml::from_str(&lex.to_toml_string()).unwrap();
    toml["prepositions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| {
            g.as_array()
                .unwrap()
                .iter()
                .map(|p| p.as_str().unwrap().to_string())
                .collect()
        })
        .collect()
}

/// `b` is `a` with one antonym phrase swapped for its partner.
pub fn is_antonym_rewrite(a: &str, b: &str, lex: &Lexicon) -> bool {
    let (old, new) = word_diff(a, b);
    let (old, new) = (old.join(" "), new.join(" "));
    antonym_pairs(lex)
        .iter()
        .any(|(x, y)| (old == *x && new == *y) || (old == *y && new == *x))
}

pub fn check_contradictory(orig: &[String], out: &[String], lex: &Lexicon) -> Result<(), String> {
    if out.len() != orig.len() + 1 {
        return Err(format!("length {} for original {}", out.len(), orig.len()));
    }
    for j in 1..out.len() {
        let mut rest = out.to_vec();
        rest.remove(j);
        if rest == orig && is_antonym_rewrite(&out[j - 1], &out[j], lex) {
            return Ok(());
        }
    }
    Err("no inserted antonym copy after its source step".into())
}

pub fn check_single_step_change(orig: &[String], out: &[String]) -> Result<(), String> {
    if orig.len() != out.len() {
        return Err("length changed".into());
    }
    match positions_differing(orig, out) {
        1 => Ok(()),
        d => Err(format!("{d} steps changed")),
    }
}

/// Exactly one preposition replaced by another member of its group.
pub fn check_preposition_swap(orig: &str, out: &str, lex: &Lexicon) -> Result<(), String> {
    let (old, new) = word_diff(orig, out);
    let (old, new) = (old.join(" "), new.join(" "));
    let ok = preposition_groups(lex)
        .iter()
        .any(|g| old != new && g.contains(&old) && g.contains(&new));
    if ok {
        Ok(())
    } else {
        Err(format!("changed {old:?} -> {new:?}"))
    }
}
