use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cot::token_estimate;
use crate::error::{Error, Result};
use crate::sample::{read_shard, shard_file_name, Sample};
use crate::taxonomy::Kind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub split: String,
    pub kind: Kind,
    pub n: usize,
    pub success: usize,
    pub failure: usize,
    pub categories: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_cot_tokens: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rows: Vec<StatsRow>,
}

impl DatasetStats {
    pub fn count(&self, split: &str, kind: Kind) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.kind == kind)
            .map(|r| r.n)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:<10} {:>7} {:>7} {:>7} {:>9}\n",
            "split", "kind", "n", "success", "failure", "cot_tok"
        );
        for r in &self.rows {
            let tok = r
                .mean_cot_tokens
                .map(|t| format!("{t:.1}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<8} {:<10} {:>7} {:>7} {:>7} {:>9}",
                r.split,
                r.kind.as_str(),
                r.n,
                r.success,
                r.failure,
                tok
            );
            for (cat, c) in &r.categories {
                let _ = writeln!(out, "    {cat:<28} {c:>7}");
            }
        }
        out
    }
}

pub fn stats_row(split: &str, kind: Kind, samples: &[Sample]) -> StatsRow {
    let mut categories = BTreeMap::new();
    let mut success = 0;
    let mut tokens = Vec::new();
    for s in samples {
        let label = s.label();
        if label.success() {
            success += 1;
        }
        *categories.entry(label.category().slug().to_string()).or_insert(0) += 1;
        if let Some(cot) = s.cot() {
            tokens.push(token_estimate(cot));
        }
    }
    StatsRow {
        split: split.to_string(),
        kind,
        n: samples.len(),
        success,
        failure: samples.len() - success,
        categories,
        mean_cot_tokens: (!tokens.is_empty()).then(|| tokens.iter().sum::<usize>() as f64 / tokens.len() as f64),
    }
}

fn split_rows(dir: &Path, split: &str) -> Result<Vec<StatsRow>> {
    let mut rows = Vec::new();
    for kind in Kind::ALL {
        let path = dir.join(shard_file_name(kind));
        if path.is_file() {
            rows.push(stats_row(split, kind, &read_shard(&path, kind)?));
        }
    }
    Ok(rows)
}

/// Stats for a split directory (holding shard files) or a dataset directory
/// (holding split directories).
pub fn dataset_stats(path: &Path) -> Result<DatasetStats> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
    let mut rows = split_rows(path, &name)?;
    if rows.is_empty() {
        let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        let mut splits: Vec<_> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        splits.sort();
        for dir in splits {
            let split = dir.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            rows.extend(split_rows(&dir, &split)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no shards under {}", path.display())));
    }
    Ok(DatasetStats { rows })
}
