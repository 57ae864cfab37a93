//! Antonym and preposition vocabulary used by reversal and text perturbations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{find_phrases, PhraseMatch};

const SEED_LEXICON: &str = include_str!("../data/lexicon.toml");

#[derive(Debug, Deserialize, Serialize)]
struct LexiconFile {
    verb_antonyms: Vec<[String; 2]>,
    prepositions: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    verb_antonyms: BTreeMap<String, String>,
    /// Groups are stored sorted; `group_of` maps each preposition to its group.
    groups: Vec<Vec<String>>,
    group_of: BTreeMap<String, usize>,
}

impl Lexicon {
    /// The shipped seed vocabulary.
    pub fn seed() -> Self {
        Self::from_toml_str(SEED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: LexiconFile = toml::from_str(text).map_err(|e| Error::Config(format!("lexicon: {e}")))?;
        Self::new(file.verb_antonyms, file.prepositions)
    }

    pub fn new(pairs: Vec<[String; 2]>, groups: Vec<Vec<String>>) -> Result<Self> {
        let mut verb_antonyms = BTreeMap::new();
        for [a, b] in pairs {
            let (a, b) = (normalize(&a), normalize(&b));
            if a.is_empty() || b.is_empty() || a == b {
                return Err(Error::Config(format!("bad antonym pair {a:?}/{b:?}")));
            }
            for (k, v) in [(&a, &b), (&b, &a)] {
                if let Some(prev) = verb_antonyms.insert(k.clone(), v.clone()) {
                    if &prev != v {
                        return Err(Error::Config(format!(
                            "phrase {k:?} has two antonyms ({prev:?}, {v:?})"
                        )));
                    }
                }
            }
        }

        let mut group_of = BTreeMap::new();
        let mut sorted_groups = Vec::new();
        for group in groups {
            let members: BTreeSet<String> = group.iter().map(|p| normalize(p)).collect();
            if members.len() < 2 || members.len() != group.len() {
                return Err(Error::Config(format!(
                    "preposition group {group:?} needs at least two distinct members"
                )));
            }
            let idx = sorted_groups.len();
            for m in &members {
                if group_of.insert(m.clone(), idx).is_some() {
                    return Err(Error::Config(format!("preposition {m:?} is in two groups")));
                }
            }
            sorted_groups.push(members.into_iter().collect());
        }

        Ok(Lexicon {
            verb_antonyms,
            groups: sorted_groups,
            group_of,
        })
    }

    pub fn antonym(&self, phrase: &str) -> Option<&str> {
        self.verb_antonyms.get(&normalize(phrase)).map(String::as_str)
    }

    pub fn antonym_phrases(&self) -> impl Iterator<Item = &str> {
        self.verb_antonyms.keys().map(String::as_str)
    }

    pub fn prepositions(&self) -> impl Iterator<Item = &str> {
        self.group_of.keys().map(String::as_str)
    }

    /// Other members of the preposition's group, sorted.
    pub fn alternatives(&self, preposition: &str) -> Vec<&str> {
        let p = normalize(preposition);
        match self.group_of.get(&p) {
            Some(&g) => self.groups[g].iter().filter(|m| **m != p).map(String::as_str).collect(),
            None => Vec::new(),
        }
    }

    pub fn find_antonym_phrases(&self, text: &str) -> Vec<PhraseMatch> {
        find_phrases(text, self.antonym_phrases())
    }

    pub fn find_prepositions(&self, text: &str) -> Vec<PhraseMatch> {
        find_phrases(text, self.prepositions())
    }

    pub fn to_toml_string(&self) -> String {
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::new();
        for (a, b) in &self.verb_antonyms {
            if seen.insert(a.clone()) && seen.insert(b.clone()) {
                pairs.push([a.clone(), b.clone()]);
            }
        }
        let file = LexiconFile {
            verb_antonyms: pairs,
            prepositions: self.groups.clone(),
        };
        toml::to_string(&file).expect("lexicon serializes")
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::seed()
    }
}

fn normalize(phrase: &str) -> String {
    phrase.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}
