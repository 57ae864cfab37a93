//! Shared configuration and quota allocation for balanced sample generation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::exec_perturb::{perturb_real, success_execution_sample, RealMode};
use crate::lexicon::Lexicon;
use crate::plan_perturb::{perturb_plan, success_planning_sample, PlanMode};
use crate::sample::{Generator, Sample};
use crate::text::seeded_index;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub master_seed: u64,
    /// Total samples to emit, successes and failures together.
    pub target_count: usize,
    /// Relative weight per failure mode id. Empty means uniform over the
    /// modes that apply.
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    /// Hash of the configuration the run came from, copied into provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl GenConfig {
    pub fn new(master_seed: u64, target_count: usize) -> Self {
        GenConfig {
            master_seed,
            target_count,
            weights: BTreeMap::new(),
            config_hash: None,
        }
    }

    pub fn with_weight(mut self, mode: &str, weight: f64) -> Self {
        self.weights.insert(mode.to_string(), weight);
        self
    }

    /// Weights for `modes` in the given order.
    pub fn weights_for<'a>(&self, modes: impl IntoIterator<Item = &'a str>) -> Result<Vec<(String, f64)>> {
        let modes: Vec<&str> = modes.into_iter().collect();
        if let Some(unknown) = self.weights.keys().find(|k| !modes.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "unknown mode {unknown:?} in weights (expected one of {modes:?})"
            )));
        }
        let out: Vec<(String, f64)> = if self.weights.is_empty() {
            modes.iter().map(|m| (m.to_string(), 1.0)).collect()
        } else {
            modes
                .iter()
                .map(|m| (m.to_string(), self.weights.get(*m).copied().unwrap_or(0.0)))
                .collect()
        };
        if out.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("mode weights must be finite and non-negative".into()));
        }
        if out.iter().all(|(_, w)| *w == 0.0) && !out.is_empty() {
            return Err(Error::Config("at least one mode weight must be positive".into()));
        }
        Ok(out)
    }
}

/// Splits `total` across weighted modes with the largest-remainder method,
/// so each count is the floor or ceiling of its exact share. Ties go to the
/// earlier mode.
pub fn allocate_quotas(total: usize, weights: &[(String, f64)]) -> Vec<(String, usize)> {
    let sum: f64 = weights.iter().map(|(_, w)| w).sum();
    if weights.is_empty() || sum <= 0.0 {
        return Vec::new();
    }
    let exact: Vec<f64> = weights.iter().map(|(_, w)| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    weights.iter().zip(counts).map(|((m, _), c)| (m.clone(), c)).collect()
}

/// Rebuilds a rule-generated sample from its provenance, copying the run
/// fields (master seed, config hash, trace) from the original. Returns
/// `None` for samples that cannot be recomputed offline: LLM-generated ones
/// and sim rollouts, which depend on simulator output.
pub fn regenerate_sample(sample: &Sample, episodes: &[Episode], lex: &Lexicon) -> Result<Option<Sample>> {
    let prov = sample.provenance();
    if prov.generator != Generator::Rule || prov.mode.starts_with("sim_") {
        return Ok(None);
    }
    let ep = episodes
        .iter()
        .find(|e| e.episode_id == prov.episode_id)
        .ok_or_else(|| Error::Mismatch(format!("episode {} is not in the corpus", prov.episode_id)))?;
    let mut fresh: Sample = match (sample, prov.mode.as_str()) {
        (Sample::Planning(_), "success") => success_planning_sample(ep, prov.seed)?.into(),
        (Sample::Planning(_), mode) => perturb_plan(ep, mode.parse::<PlanMode>()?, prov.seed, lex, None)?.into(),
        (Sample::Execution(_), "success") => {
            if ep.is_empty() {
                return Err(Error::Mismatch(format!("episode {} has no steps", ep.episode_id)));
            }
            success_execution_sample(ep, seeded_index(prov.seed, ep.len()), prov.seed)?.into()
        }
        (Sample::Execution(_), mode) => perturb_real(ep, mode.parse::<RealMode>()?, prov.seed, lex, None)?.into(),
    };
    let p = fresh.provenance_mut();
    p.master_seed = prov.master_seed;
    p.config_hash = prov.config_hash.clone();
    p.tool_version = prov.tool_version.clone();
    fresh.set_cot(sample.cot().map(str::to_string));
    Ok(Some(fresh))
}
