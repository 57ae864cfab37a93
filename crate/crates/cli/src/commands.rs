use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use failforge_core::augment::augment_corpus;
use failforge_core::cot::{annotate_samples, CotTemplates};
use failforge_core::episode::{load_corpus, load_episode, validate_episode};
use failforge_core::eval::{
    dataset_stats, evaluate_split, export_training_set, write_training_set, ChatDetector, EvalOptions, Strategy,
    ViewPolicy,
};
use failforge_core::exec_perturb::{
    emit_sim_directive, generate_execution_samples, ingest_sim_rollout, LlmInstructionRewriter, SimDirective,
};
use failforge_core::gateway::{compose_grid, decode_image, encode_png, ChatBackend, Gateway, GridCell};
use failforge_core::generate::regenerate_sample;
use failforge_core::guard::{serve, AppState};
use failforge_core::plan_perturb::{generate_planning_samples, LlmPerturber};
use failforge_core::sample::{read_jsonl, read_shard, shard_file_name, shard_path, write_jsonl, write_shard};
use failforge_core::template::Template;
use failforge_core::text::hash64;
use failforge_core::{Episode, ExecutionSample, Kind, Lexicon, Sample, Source, TOOL_VERSION};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Finished, but some inputs were skipped.
    Partial,
}

/// What a command prints: a table for people, JSON with `--json`.
pub struct Report {
    pub status: Status,
    pub text: String,
    pub json: Value,
}

impl Report {
    fn new(status: Status, text: impl Into<String>, json: Value) -> Self {
        Report {
            status,
            text: text.into(),
            json,
        }
    }
}

fn partial_if(bad: bool) -> Status {
    if bad {
        Status::Partial
    } else {
        Status::Ok
    }
}

pub fn lexicon(cfg: &PipelineConfig) -> Result<Lexicon> {
    Ok(match &cfg.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::seed(),
    })
}

fn gateway(cfg: &PipelineConfig) -> Result<Gateway> {
    Ok(Gateway::new(cfg.gateway.clone())?)
}

/// Writes `{path}.provenance.json` next to an artifact that has no room
/// for provenance of its own.
fn write_sidecar(path: &Path, cfg: &PipelineConfig, command: &str) -> Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".provenance.json");
    let body = json!({
        "tool_version": TOOL_VERSION,
        "master_seed": cfg.master_seed,
        "config_hash": cfg.hash(),
        "command": command,
    });
    std::fs::write(&name, serde_json::to_string_pretty(&body)? + "\n")
        .with_context(|| format!("writing {}", PathBuf::from(name).display()))
}

/// Loads every configured corpus directory, drops episodes that fail
/// validation, and applies reversal augmentation when enabled. The count
/// of dropped episodes is returned alongside.
pub fn load_episodes(cfg: &PipelineConfig, lex: &Lexicon) -> Result<(Vec<Episode>, usize)> {
    if cfg.corpus.is_empty() {
        bail!("no corpus directories configured");
    }
    cfg.check_paths()?;
    let mut episodes = Vec::new();
    let mut dropped = 0;
    for dir in &cfg.corpus {
        for ep in load_corpus(dir)? {
            let report = validate_episode(&ep, dir);
            if report.is_ingestible() {
                episodes.push(ep);
            } else {
                warn!(episode = %ep.episode_id, errors = ?report.errors, "episode failed validation; skipped");
                dropped += 1;
            }
        }
    }
    episodes.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    if let Some(pair) = episodes.windows(2).find(|p| p[0].episode_id == p[1].episode_id) {
        bail!(
            "episode_id {:?} appears in more than one corpus directory",
            pair[0].episode_id
        );
    }
    if cfg.augment_reversal {
        episodes = augment_corpus(&episodes, lex);
    }
    Ok((episodes, dropped))
}

fn shard_kind(path: &Path) -> Result<Kind> {
    for kind in Kind::ALL {
        if path.file_name().and_then(|n| n.to_str()) == Some(shard_file_name(kind)) {
            return Ok(kind);
        }
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match text.lines().find(|l| !l.trim().is_empty()) {
        Some(line) if line.contains("\"subtask_instruction\"") => Ok(Kind::Execution),
        Some(_) => Ok(Kind::Plan),
        None => bail!("{} is empty", path.display()),
    }
}

/// Samples from a shard file, or from both shard files of a split directory.
pub fn load_samples(path: &Path) -> Result<Vec<(Kind, PathBuf, Vec<Sample>)>> {
    if path.is_dir() {
        let mut out = Vec::new();
        for kind in Kind::ALL {
            let file = path.join(shard_file_name(kind));
            if file.is_file() {
                out.push((kind, file.clone(), read_shard(&file, kind)?));
            }
        }
        if out.is_empty() {
            bail!("no shard files in {}", path.display());
        }
        Ok(out)
    } else {
        let kind = shard_kind(path)?;
        Ok(vec![(kind, path.to_path_buf(), read_shard(path, kind)?)])
    }
}

fn all_samples(path: &Path) -> Result<Vec<Sample>> {
    Ok(load_samples(path)?.into_iter().flat_map(|(_, _, s)| s).collect())
}

pub fn validate(cfg: &PipelineConfig) -> Result<Report> {
    if cfg.corpus.is_empty() {
        bail!("no corpus directories configured");
    }
    let mut rows = Vec::new();
    let mut bad = 0;
    for dir in &cfg.corpus {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let (id, errors, warnings) = match load_episode(&path) {
                Ok(ep) => {
                    let r = validate_episode(&ep, dir);
                    (r.episode_id, r.errors, r.warnings)
                }
                Err(e) => (
                    path.display().to_string(),
                    vec![("manifest".to_string(), e.to_string())],
                    vec![],
                ),
            };
            if !errors.is_empty() {
                bad += 1;
            }
            rows.push((id, errors, warnings));
        }
    }
    let mut text = String::new();
    for (id, errors, warnings) in &rows {
        let state = if errors.is_empty() { "ok" } else { "INVALID" };
        text.push_str(&format!("{id:<32} {state}\n"));
        for (field, msg) in errors {
            text.push_str(&format!("  error   {field}: {msg}\n"));
        }
        for (field, msg) in warnings {
            text.push_str(&format!("  warning {field}: {msg}\n"));
        }
    }
    text.push_str(&format!("{} episodes, {bad} invalid\n", rows.len()));
    let json = json!({
        "episodes": rows.iter().map(|(id, e, w)| json!({"episode_id": id, "errors": e, "warnings": w})).collect::<Vec<_>>(),
        "invalid": bad,
    });
    Ok(Report::new(partial_if(bad > 0), text, json))
}

fn label_counts(labels: impl Iterator<Item = bool>) -> (usize, usize) {
    let mut s = 0;
    let mut f = 0;
    for ok in labels {
        if ok {
            s += 1;
        } else {
            f += 1;
        }
    }
    (s, f)
}

fn shard_summary(kind: Kind, path: &Path, samples: &[Sample], dropped: usize) -> Report {
    let (s, f) = label_counts(samples.iter().map(|x| x.label().success()));
    let text = format!(
        "wrote {} {kind} samples ({s} success, {f} failure) to {}\n",
        samples.len(),
        path.display()
    );
    Report::new(
        partial_if(dropped > 0),
        text,
        json!({"path": path, "kind": kind, "n": samples.len(), "success": s, "failure": f, "skipped_episodes": dropped}),
    )
}

pub fn gen_plan(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Report> {
    let lex = lexicon(cfg)?;
    let (episodes, dropped) = load_episodes(cfg, &lex)?;
    let gw = if cfg.use_llm { Some(gateway(cfg)?) } else { None };
    let llm = gw.as_ref().map(|g| LlmPerturber::new(g, cfg.cot.model_id.clone()));
    let samples: Vec<Sample> =
        generate_planning_samples(&episodes, &cfg.gen_config(&cfg.planning), &lex, llm.as_ref())?
            .into_iter()
            .map(Sample::from)
            .collect();
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| shard_path(&cfg.output_root, &cfg.dataset, &cfg.split, Kind::Plan));
    write_shard(&path, &samples)?;
    info!(n = samples.len(), path = %path.display(), "planning shard written");
    Ok(shard_summary(Kind::Plan, &path, &samples, dropped))
}

pub fn gen_exec(cfg: &PipelineConfig, rollouts: &[PathBuf], out: Option<&Path>) -> Result<Report> {
    let lex = lexicon(cfg)?;
    let (episodes, dropped) = load_episodes(cfg, &lex)?;
    let mut pool: Vec<ExecutionSample> = Vec::new();
    for path in rollouts {
        pool.extend(read_jsonl::<ExecutionSample>(path)?);
    }
    let gw = if cfg.use_llm { Some(gateway(cfg)?) } else { None };
    let llm = gw
        .as_ref()
        .map(|g| LlmInstructionRewriter::new(g, cfg.cot.model_id.clone()));
    let samples: Vec<Sample> =
        generate_execution_samples(&episodes, &cfg.gen_config(&cfg.execution), &lex, llm.as_ref(), &pool)?
            .into_iter()
            .map(Sample::from)
            .collect();
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| shard_path(&cfg.output_root, &cfg.dataset, &cfg.split, Kind::Execution));
    write_shard(&path, &samples)?;
    info!(n = samples.len(), path = %path.display(), "execution shard written");
    Ok(shard_summary(Kind::Execution, &path, &samples, dropped))
}

fn default_directives_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_root.join(&cfg.dataset).join("directives.jsonl")
}

fn default_rollouts_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_root.join(&cfg.dataset).join("sim_rollouts.jsonl")
}

pub fn emit_directives(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Report> {
    let lex = lexicon(cfg)?;
    let (episodes, dropped) = load_episodes(cfg, &lex)?;
    let params = cfg.directives.params();
    let mut directives: BTreeMap<String, SimDirective> = BTreeMap::new();
    for ep in episodes.iter().filter(|e| e.source == Source::Sim) {
        for k in 0..cfg.directives.per_episode {
            let seed = hash64(cfg.master_seed, &[&ep.episode_id, "directive", &k.to_string()]);
            let d = emit_sim_directive(ep, seed, &params)?;
            directives.insert(d.directive_id(), d);
        }
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_directives_path(cfg));
    let items: Vec<&SimDirective> = directives.values().collect();
    write_jsonl(&path, &items)?;
    write_sidecar(&path, cfg, "emit-directives")?;
    let mut per_mode: BTreeMap<String, usize> = BTreeMap::new();
    for d in &items {
        *per_mode.entry(d.mode.to_string()).or_default() += 1;
    }
    let mut text = format!("wrote {} directives to {}\n", items.len(), path.display());
    for (mode, n) in &per_mode {
        text.push_str(&format!("  {mode:<28} {n}\n"));
    }
    Ok(Report::new(
        partial_if(dropped > 0),
        text,
        json!({"path": path, "n": items.len(), "per_mode": per_mode}),
    ))
}

/// Rollout manifests are looked up as `{rollouts_dir}/{directive_id}.json`.
pub fn ingest_rollouts(
    cfg: &PipelineConfig,
    directives: Option<&Path>,
    rollouts_dir: &Path,
    out: Option<&Path>,
) -> Result<Report> {
    let dpath = directives
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_directives_path(cfg));
    let directives: Vec<SimDirective> = read_jsonl(&dpath)?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for d in &directives {
        d.validate()?;
        let id = d.directive_id();
        let manifest = rollouts_dir.join(format!("{id}.json"));
        if !manifest.is_file() {
            skipped.push((id, "no rollout manifest".to_string()));
            continue;
        }
        match ingest_sim_rollout(d, &manifest) {
            Ok(s) => samples.push(s),
            Err(e) => {
                warn!(directive = %id, error = %e, "rollout rejected");
                skipped.push((id, e.to_string()));
            }
        }
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| default_rollouts_path(cfg));
    write_jsonl(&path, &samples)?;
    let mut text = format!(
        "ingested {} of {} rollouts into {}\n",
        samples.len(),
        directives.len(),
        path.display()
    );
    for (id, why) in &skipped {
        text.push_str(&format!("  skipped {id}: {why}\n"));
    }
    Ok(Report::new(
        partial_if(!skipped.is_empty()),
        text,
        json!({"path": path, "ingested": samples.len(), "skipped": skipped}),
    ))
}

pub fn gen_cot(cfg: &PipelineConfig, input: &Path, out: Option<&Path>) -> Result<Report> {
    let lex = lexicon(cfg)?;
    let (episodes, _) = load_episodes(cfg, &lex)?;
    let templates = CotTemplates::resolve(cfg.templates_dir.as_deref())?;
    let gw = gateway(cfg)?;
    let image_root = cfg.image_root()?;
    let shards = load_samples(input)?;
    if out.is_some() && shards.len() > 1 {
        bail!("--out needs a single shard file as input");
    }
    let mut json_rows = Vec::new();
    let mut text = String::new();
    let mut any_failed = false;
    for (kind, path, mut samples) in shards {
        let report = annotate_samples(&mut samples, &episodes, &gw, &cfg.cot, &templates, &image_root);
        let target = out.map(Path::to_path_buf).unwrap_or(path);
        write_shard(&target, &samples)?;
        any_failed |= !report.failures.is_empty();
        text.push_str(&format!(
            "{kind}: {} traces generated, {} already present, {} failed -> {}\n",
            report.generated,
            report.skipped,
            report.failures.len(),
            target.display()
        ));
        for (id, why) in &report.failures {
            text.push_str(&format!("  {id}: {why}\n"));
        }
        json_rows.push(json!({
            "kind": kind, "path": target, "generated": report.generated, "skipped": report.skipped,
            "failures": report.failures, "mean_tokens": report.mean_tokens,
        }));
    }
    Ok(Report::new(partial_if(any_failed), text, Value::Array(json_rows)))
}

pub fn stats(path: &Path) -> Result<Report> {
    let stats = dataset_stats(path)?;
    Ok(Report::new(Status::Ok, stats.to_table(), serde_json::to_value(&stats)?))
}

pub struct EvalArgs {
    pub out: Option<PathBuf>,
    pub split_name: Option<String>,
}

pub fn eval(cfg: &PipelineConfig, input: &Path, args: &EvalArgs) -> Result<Report> {
    let samples = all_samples(input)?;
    let split_name = args.split_name.clone().unwrap_or_else(|| {
        input
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("split")
            .trim_end_matches(".jsonl")
            .to_string()
    });
    let mut opts = EvalOptions::new(split_name, cfg.image_root()?);
    opts.answer_mode = cfg.detector.answer_mode;
    opts.image_mode = cfg.detector.image_mode;
    opts.view_limit = cfg.detector.view_limit;
    opts.averaging = cfg.detector.averaging;
    opts.seed = cfg.master_seed;
    opts.plan_template = Template::resolve("detect_plan", cfg.templates_dir.as_deref())?;
    opts.exec_template = Template::resolve("detect_exec", cfg.templates_dir.as_deref())?;
    let detector = ChatDetector {
        backend: gateway(cfg)?,
        model_id: cfg.detector.model_id.clone(),
        max_tokens: cfg.detector.max_tokens,
        temperature: cfg.detector.temperature,
    };
    let outcome = evaluate_split(&samples, &detector, &opts);
    let report = &outcome.report;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_root.join("eval").join(&report.split_name));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let audit_path = dir.join("audit.jsonl");
    write_jsonl(&audit_path, &outcome.audit)?;
    let metrics_path = dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(report)? + "\n")?;
    write_sidecar(&metrics_path, cfg, "eval")?;
    let failed = report.parse_failures + report.backend_errors;
    Ok(Report::new(
        partial_if(failed > 0),
        format!("{}\naudit: {}\n", report.to_table(), audit_path.display()),
        serde_json::to_value(report)?,
    ))
}

pub fn export_train(cfg: &PipelineConfig, input: &Path, out: Option<&Path>) -> Result<Report> {
    let samples = all_samples(input)?;
    let records = export_training_set(&samples, &cfg.export)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        cfg.output_root
            .join(&cfg.dataset)
            .join(format!("{}_{}.jsonl", cfg.split, strategy_name(cfg.export.strategy)))
    });
    write_training_set(&path, &records)?;
    write_sidecar(&path, cfg, "export-train")?;
    let with_cot = records.iter().filter(|r| r.has_reasoning()).count();
    Ok(Report::new(
        Status::Ok,
        format!(
            "wrote {} training records ({with_cot} with reasoning) to {}\n",
            records.len(),
            path.display()
        ),
        json!({"path": path, "n": records.len(), "with_reasoning": with_cot}),
    ))
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Vanilla => "vanilla",
        Strategy::Thinking => "thinking",
        Strategy::Dropout => "dropout",
    }
}

pub fn view_policy(name: &str) -> Result<ViewPolicy> {
    Ok(match name {
        "one" | "1" => ViewPolicy::One,
        "four" | "4" => ViewPolicy::Four,
        "random" | "random_one_or_four" => ViewPolicy::RandomOneOrFour,
        _ => bail!("unknown view policy {name:?} (one, four, random)"),
    })
}

/// Rows are views in argument order, columns are start then end.
pub fn compose_grid_cmd(cfg: &PipelineConfig, start: &[PathBuf], end: &[PathBuf], out: &Path) -> Result<Report> {
    if start.is_empty() || start.len() != end.len() {
        bail!("need the same non-zero number of --start and --end images");
    }
    let mut cells = Vec::new();
    for (t, paths) in [start, end].iter().enumerate() {
        for (v, p) in paths.iter().enumerate() {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            cells.push(GridCell {
                view_id: format!("{v:04}"),
                timestep: t as u32,
                image: decode_image(&bytes)?,
            });
        }
    }
    let grid = compose_grid(&cells, start.len(), 2)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, encode_png(&grid)?).with_context(|| format!("writing {}", out.display()))?;
    write_sidecar(out, cfg, "compose-grid")?;
    let (w, h) = grid.dimensions();
    Ok(Report::new(
        Status::Ok,
        format!("wrote {w}x{h} grid to {}\n", out.display()),
        json!({"path": out, "width": w, "height": h}),
    ))
}

pub fn serve_cmd(cfg: &PipelineConfig) -> Result<Report> {
    let backend: Arc<dyn ChatBackend> = Arc::new(gateway(cfg)?);
    let state = AppState::with_templates(
        backend,
        cfg.service.service(),
        Template::resolve("detect_plan", cfg.templates_dir.as_deref())?,
        Template::resolve("detect_exec", cfg.templates_dir.as_deref())?,
    );
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.service.bind)
            .await
            .with_context(|| format!("binding {}", cfg.service.bind))?;
        info!(addr = %listener.local_addr()?, "guard service listening");
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })?;
    Ok(Report::new(Status::Ok, "server stopped\n", json!({"stopped": true})))
}

pub fn verify_provenance(cfg: &PipelineConfig, input: &Path) -> Result<Report> {
    let lex = lexicon(cfg)?;
    let (episodes, _) = load_episodes(cfg, &lex)?;
    let samples = all_samples(input)?;
    let mut verified = 0;
    let mut skipped = 0;
    let mut mismatched = Vec::new();
    for s in &samples {
        match regenerate_sample(s, &episodes, &lex) {
            Ok(Some(fresh)) if fresh.to_json_line() == s.to_json_line() => verified += 1,
            Ok(Some(_)) => mismatched.push((s.sample_id().to_string(), "content differs".to_string())),
            Ok(None) => skipped += 1,
            Err(e) => mismatched.push((s.sample_id().to_string(), e.to_string())),
        }
    }
    let mut text = format!(
        "{verified} verified, {} mismatched, {skipped} not recomputable (llm or sim)\n",
        mismatched.len()
    );
    for (id, why) in &mismatched {
        text.push_str(&format!("  {id}: {why}\n"));
    }
    Ok(Report::new(
        partial_if(!mismatched.is_empty()),
        text,
        json!({"verified": verified, "mismatched": mismatched, "skipped": skipped}),
    ))
}
