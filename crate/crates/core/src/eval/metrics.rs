use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of `(predicted, gold)` pairs that agree.
pub fn binary_accuracy(pairs: &[(bool, bool)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Percent of each gold row; all zeros for rows without support.
    pub row_normalized: Vec<Vec<f64>>,
    /// Gold classes with no support.
    pub empty_rows: Vec<String>,
}

impl ConfusionMatrix {
    pub fn support(&self, class: &str) -> Option<u64> {
        let i = self.classes.iter().position(|c| c == class)?;
        Some(self.counts[i].iter().sum())
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &c)| i == j || c == 0))
    }

    /// Percentages as an aligned text table.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(4).max(6);
        let mut out = format!("{:width$}", "gold\\pred");
        for c in &self.classes {
            out.push_str(&format!(" {c:>width$}"));
        }
        out.push('\n');
        for (class, row) in self.classes.iter().zip(&self.row_normalized) {
            out.push_str(&format!("{class:width$}"));
            for v in row {
                out.push_str(&format!(" {v:>width$.1}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix<S: AsRef<str>>(golds: &[S], preds: &[S], classes: &[S]) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    let classes: Vec<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
    let index = |label: &str| {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.to_string()))
    };
    let k = classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (g, p) in golds.iter().zip(preds) {
        counts[index(g.as_ref())?][index(p.as_ref())?] += 1;
    }
    let mut empty_rows = Vec::new();
    let row_normalized = counts
        .iter()
        .zip(&classes)
        .map(|(row, class)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                empty_rows.push(class.clone());
                vec![0.0; k]
            } else {
                row.iter().map(|&c| 100.0 * c as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(ConfusionMatrix {
        classes,
        counts,
        row_normalized,
        empty_rows,
    })
}
