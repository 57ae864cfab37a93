use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sample::Sample;
use crate::text::hash64;

/// Seeded subsample stratified by (kind, success). Each stratum keeps the
/// `round(fraction * n)` samples with the smallest seeded hash, so smaller
/// fractions under one seed are subsets of larger ones.
pub fn subsample_corpus(samples: &[Sample], fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut strata: BTreeMap<(crate::taxonomy::Kind, bool), Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        strata.entry((s.kind(), s.label().success())).or_default().push(s);
    }
    let mut out = Vec::new();
    for group in strata.values_mut() {
        group.sort_by_key(|s| (hash64(seed, &[s.sample_id()]), s.sample_id().to_string()));
        let keep = (fraction * group.len() as f64).round() as usize;
        out.extend(group.iter().take(keep).map(|s| (*s).clone()));
    }
    out.sort_by(|a, b| a.sample_id().cmp(b.sample_id()));
    Ok(out)
}
