//! Judge-driven unit/principle labeling: extract a raw label per problem,
//! cluster the raw labels into an ontology, then map every raw label onto
//! one ontology category.
//!
//! [`run_pipeline`] writes one artifact per stage plus `manifest.json`.
//! Raw labels are appended as they arrive, so an interrupted run picks up
//! where it stopped. An existing `ontology.json` is reused rather than
//! rebuilt, which leaves room to review and edit it between runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ontology::{label_key, Cluster, UnitOntology, NONE};
use super::{options_text, Problem};
use crate::error::{contract, Error, Result};
use crate::judge::{
    render_prompt, slots, ChatMessage, ChatRequest, JudgeClient, JudgeTask, PromptId,
    PROMPT_SET_VERSION,
};

/// Which extracted field feeds clustering and normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelField {
    #[default]
    Unit,
    Principle,
}

impl FromStr for LabelField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" | "unit_type" => Ok(LabelField::Unit),
            "principle" => Ok(LabelField::Principle),
            _ => contract(format!("label field must be unit or principle, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLabel {
    pub problem_id: String,
    pub subfield: String,
    pub principle: String,
    pub unit_type: String,
    /// False when no reply parsed; the label fields then hold the last raw reply.
    pub parsed: bool,
    pub raw_response: String,
    pub prompt_hash: String,
    pub model: String,
}

impl RawLabel {
    pub fn field(&self, field: LabelField) -> &str {
        match field {
            LabelField::Unit => &self.unit_type,
            LabelField::Principle => &self.principle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub problem_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct LabelRun {
    /// In problem order; problems that failed are absent.
    pub labels: Vec<RawLabel>,
    pub failures: Vec<LabelFailure>,
}

fn unit_extract_messages(p: &Problem) -> Result<Vec<ChatMessage>> {
    let options = options_text(p);
    let prompt = render_prompt(
        PromptId::UnitExtract,
        &slots([
            ("subfield", p.subfield.as_str()),
            ("question", p.question.as_str()),
            ("options", options.as_str()),
        ]),
    )?;
    Ok(vec![ChatMessage::system(prompt)])
}

fn prompt_hash(task: JudgeTask, messages: &[ChatMessage]) -> String {
    ChatRequest {
        task,
        model: String::new(),
        messages: messages.to_vec(),
        temperature: 0.0,
        call_index: 0,
        attempt: 0,
    }
    .prompt_hash()
}

/// The outermost `{ ... }` span of a reply, tolerating code fences and prose.
fn json_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

fn clean_value(v: &str) -> String {
    v.trim()
        .trim_end_matches(',')
        .trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim()
        .to_string()
}

/// `(principle, unit_type)` from a unit-extraction reply. Accepts strict JSON
/// and the unquoted `key: value` layout shown in the prompt.
pub fn parse_unit_reply(raw: &str) -> Option<(String, String)> {
    if let Some(obj) = json_object(raw) {
        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(obj) {
            let get = |keys: &[&str]| {
                keys.iter().find_map(|k| map.get(*k)).map(|v| match v {
                    serde_json::Value::String(s) => s.trim().to_string(),
                    other => other.to_string(),
                })
            };
            let principle = get(&["principle"]);
            let unit = get(&["unit_type", "unit"]);
            if principle.is_some() || unit.is_some() {
                return Some((principle.unwrap_or_default(), unit.unwrap_or_default()));
            }
        }
    }
    let mut principle = None;
    let mut unit = None;
    for line in raw.lines() {
        let line = line.trim().trim_start_matches(['{', '"']).trim();
        if let Some((k, v)) = line.split_once(':') {
            match k.trim().trim_matches('"').to_ascii_lowercase().as_str() {
                "principle" => principle = Some(clean_value(v)),
                "unit_type" | "unit" => unit = Some(clean_value(v)),
                _ => {}
            }
        }
    }
    if principle.is_none() && unit.is_none() {
        return None;
    }
    Some((principle.unwrap_or_default(), unit.unwrap_or_default()))
}

fn label_one(client: &JudgeClient, p: &Problem) -> Result<RawLabel> {
    let messages = unit_extract_messages(p)?;
    let hash = prompt_hash(JudgeTask::UnitExtract, &messages);
    let out = client.ask_parsed(
        JudgeTask::UnitExtract,
        messages,
        client.config().equivalence_temperature,
        0,
        |raw| parse_unit_reply(raw).map(|parsed| (parsed, raw.to_string())),
    )?;
    let (principle, unit_type, parsed, raw_response) = match out {
        Ok(((principle, unit), raw)) => (principle, unit, true, raw),
        Err(raw) => {
            log::warn!("problem {}: unit label reply did not parse; keeping raw text", p.id);
            (raw.trim().to_string(), raw.trim().to_string(), false, raw)
        }
    };
    Ok(RawLabel {
        problem_id: p.id.clone(),
        subfield: p.subfield.clone(),
        principle,
        unit_type,
        parsed,
        raw_response,
        prompt_hash: hash,
        model: client.config().model_name.clone(),
    })
}

/// One raw label per problem. Transport errors are collected per problem.
pub fn label_units(problems: &[Problem], client: &JudgeClient) -> Result<LabelRun> {
    label_units_resumable(problems, client, None)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let file = std::fs::File::open(path)?;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            // an interrupted append leaves a torn final line
            Err(e) => log::warn!("{}: skipping unreadable line: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Like [`label_units`], appending to `artifact` and skipping problems it
/// already covers.
pub fn label_units_resumable(
    problems: &[Problem],
    client: &JudgeClient,
    artifact: Option<&Path>,
) -> Result<LabelRun> {
    let mut done: BTreeMap<String, RawLabel> = BTreeMap::new();
    if let Some(path) = artifact.filter(|p| p.exists()) {
        for label in read_jsonl::<RawLabel>(path)? {
            done.insert(label.problem_id.clone(), label);
        }
        log::info!("resuming: {} label(s) already present", done.len());
        // drop any torn line before appending
        let kept: Vec<&RawLabel> = done.values().collect();
        write_jsonl(path, &kept)?;
    }
    let sink = match artifact {
        Some(path) => Some(Mutex::new(
            OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };
    let todo: Vec<&Problem> = problems.iter().filter(|p| !done.contains_key(&p.id)).collect();
    let results: Vec<(String, Result<RawLabel>)> = client.install(|| {
        todo.par_iter()
            .map(|p| {
                let r = label_one(client, p).and_then(|label| {
                    if let Some(sink) = &sink {
                        let line = serde_json::to_string(&label)? + "\n";
                        sink.lock().expect("label sink poisoned").write_all(line.as_bytes())?;
                    }
                    Ok(label)
                });
                (p.id.clone(), r)
            })
            .collect()
    });
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(label) => {
                done.insert(id, label);
            }
            Err(e) => {
                log::warn!("problem {id}: {e}");
                failures.push(LabelFailure {
                    problem_id: id,
                    error: e.to_string(),
                });
            }
        }
    }
    let labels = problems.iter().filter_map(|p| done.get(&p.id).cloned()).collect();
    Ok(LabelRun { labels, failures })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedBatch {
    pub batch: usize,
    pub items: Vec<String>,
    pub raw_response: String,
}

#[derive(Debug, Clone)]
pub struct OntologyRun {
    pub ontology: UnitOntology,
    /// Batches whose replies never parsed; their items are left out.
    pub flagged: Vec<FlaggedBatch>,
}

/// Category for batch items the judge left out.
pub const OTHER: &str = "other";

fn cluster_key(name: &str) -> String {
    let mut out = String::new();
    for c in name.trim().chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

fn parse_ontology_reply(raw: &str) -> Option<Vec<(String, Vec<String>)>> {
    let obj = json_object(raw)?;
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(obj).ok()?;
    let mut out = Vec::new();
    for (name, items) in map {
        let items = items
            .as_array()?
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()?;
        out.push((name, items));
    }
    Some(out)
}

fn dedupe_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels
        .into_iter()
        .map(str::trim)
        .filter(|l| !l.is_empty() && seen.insert(label_key(l)))
        .map(str::to_string)
        .collect()
}

/// Batches distinct labels through the ontology prompt and merges the
/// replies. Clusters whose names agree after snake-casing are merged; each
/// label lands in exactly one cluster.
pub fn cluster_ontology(
    raw_labels: &[String],
    client: &JudgeClient,
    batch_size: usize,
) -> Result<OntologyRun> {
    if batch_size == 0 {
        return contract("batch_size must be positive");
    }
    let items = dedupe_labels(raw_labels.iter().map(String::as_str));
    if items.is_empty() {
        return contract("cluster_ontology needs at least one non-empty label");
    }
    let batches: Vec<&[String]> = items.chunks(batch_size).collect();
    let replies: Vec<Result<std::result::Result<Vec<(String, Vec<String>)>, String>>> =
        client.install(|| {
            batches
                .par_iter()
                .map(|batch| {
                    let listing: Vec<String> = batch.iter().map(|l| format!("- {l}")).collect();
                    let prompt = render_prompt(
                        PromptId::OntologyCreation,
                        &slots([("batch", listing.join("\n").as_str())]),
                    )?;
                    client.ask_parsed(
                        JudgeTask::Ontology,
                        vec![ChatMessage::system(prompt)],
                        client.config().equivalence_temperature,
                        0,
                        parse_ontology_reply,
                    )
                })
                .collect()
        });

    // key -> (display name, members)
    let mut clusters: Vec<(String, String, Vec<String>)> = Vec::new();
    let mut assigned: BTreeSet<String> = BTreeSet::new();
    let mut flagged = Vec::new();
    let place = |clusters: &mut Vec<(String, String, Vec<String>)>, name: &str, item: &str| {
        let key = cluster_key(name);
        let key = if key.is_empty() || key == NONE { OTHER.to_string() } else { key };
        match clusters.iter_mut().find(|c| c.0 == key) {
            Some(c) => c.2.push(item.to_string()),
            None => clusters.push((key.clone(), key, vec![item.to_string()])),
        }
    };
    for (index, (batch, reply)) in batches.iter().zip(replies).enumerate() {
        match reply? {
            Err(raw) => {
                log::warn!("ontology batch {index} never returned valid JSON; flagged for review");
                flagged.push(FlaggedBatch {
                    batch: index,
                    items: batch.to_vec(),
                    raw_response: raw,
                });
            }
            Ok(groups) => {
                let by_key: BTreeMap<String, &String> =
                    batch.iter().map(|l| (label_key(l), l)).collect();
                for (name, members) in groups {
                    for m in members {
                        // judges sometimes echo items with edits or invent new ones
                        let Some(&original) = by_key.get(&label_key(&m)) else {
                            continue;
                        };
                        if assigned.insert(label_key(original)) {
                            place(&mut clusters, &name, original);
                        }
                    }
                }
                for l in batch.iter() {
                    if assigned.insert(label_key(l)) {
                        place(&mut clusters, OTHER, l);
                    }
                }
            }
        }
    }
    let ontology = UnitOntology {
        version: format!("judge-{PROMPT_SET_VERSION}"),
        clusters: clusters
            .into_iter()
            .map(|(_, name, members)| Cluster {
                name,
                members,
                count: None,
            })
            .collect(),
    };
    ontology.validate()?;
    Ok(OntologyRun { ontology, flagged })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub problem_id: String,
    pub raw: String,
    /// An ontology cluster name or `"none"`.
    pub category: String,
}

fn parse_category(raw: &str, ontology: &UnitOntology) -> Option<String> {
    let line = raw.trim().lines().next().unwrap_or("").trim();
    let v = line
        .trim_start_matches("- ")
        .trim_matches(|c| matches!(c, '"' | '\'' | '`' | '*' | '.'))
        .trim();
    if label_key(v) == NONE {
        return Some(NONE.to_string());
    }
    ontology.canonical_name(v).map(str::to_string)
}

/// Maps each label's `field` onto one ontology category, retrying replies
/// that name no category and settling on `"none"` after the last retry.
pub fn normalize_labels(
    labels: &[RawLabel],
    field: LabelField,
    ontology: &UnitOntology,
    client: &JudgeClient,
) -> Result<Vec<Assignment>> {
    ontology.validate()?;
    if ontology.clusters.is_empty() {
        return contract("normalize_labels needs a non-empty ontology");
    }
    let categories: Vec<String> = ontology.names().map(|n| format!("- {n}")).collect();
    let categories = categories.join("\n");
    client.install(|| {
        labels
            .par_iter()
            .map(|label| {
                let raw = label.field(field).trim();
                if let Some(name) = ontology.canonical_name(raw) {
                    return Ok(Assignment {
                        problem_id: label.problem_id.clone(),
                        raw: raw.to_string(),
                        category: name.to_string(),
                    });
                }
                let prompt = render_prompt(
                    PromptId::PrincipleMapping,
                    &slots([
                        ("CATEGORIES", categories.as_str()),
                        ("raw", raw),
                        ("subfield", label.subfield.as_str()),
                    ]),
                )?;
                let out = client.ask_parsed(
                    JudgeTask::Mapping,
                    vec![ChatMessage::system(prompt)],
                    client.config().equivalence_temperature,
                    0,
                    |reply| parse_category(reply, ontology),
                )?;
                let category = out.unwrap_or_else(|reply| {
                    log::warn!(
                        "problem {}: mapping reply {reply:?} names no category; using none",
                        label.problem_id
                    );
                    NONE.to_string()
                });
                Ok(Assignment {
                    problem_id: label.problem_id.clone(),
                    raw: raw.to_string(),
                    category,
                })
            })
            .collect()
    })
}

/// Clusters as realized by the assignments: every labeled problem counted once.
pub fn assignment_counts(assignments: &[Assignment]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for a in assignments {
        *out.entry(a.category.clone()).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OntologySource {
    /// Build by clustering the raw labels.
    Cluster { batch_size: usize },
    /// Use a fixed ontology.
    Fixed(UnitOntology),
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub field: LabelField,
    pub ontology: OntologySource,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            field: LabelField::Unit,
            ontology: OntologySource::Cluster { batch_size: 50 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub artifact: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub prompt_set: String,
    pub model: String,
    pub field: LabelField,
    pub problems: usize,
    pub ontology_version: String,
    pub stages: Vec<StageRecord>,
    pub flagged_batches: usize,
    pub counts: BTreeMap<String, usize>,
}

pub const RAW_LABELS: &str = "raw_labels.jsonl";
pub const ONTOLOGY: &str = "ontology.json";
pub const FLAGGED: &str = "flagged_batches.json";
pub const ASSIGNMENTS: &str = "assignments.jsonl";
pub const MANIFEST: &str = "manifest.json";

fn stage(dir: &Path, name: &str, artifact: &str, records: usize) -> Result<StageRecord> {
    let bytes = std::fs::read(dir.join(artifact))?;
    Ok(StageRecord {
        name: name.into(),
        artifact: artifact.into(),
        records,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs all three stages into `out_dir`. Fails after the first stage if any
/// problem could not be labeled; rerunning retries only those problems.
pub fn run_pipeline(
    problems: &[Problem],
    client: &JudgeClient,
    out_dir: &Path,
    opts: &PipelineOptions,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let raw_path: PathBuf = out_dir.join(RAW_LABELS);
    let run = label_units_resumable(problems, client, Some(&raw_path))?;
    if !run.failures.is_empty() {
        let ids: Vec<&str> = run.failures.iter().map(|f| f.problem_id.as_str()).collect();
        return Err(Error::Transport(format!(
            "{} problem(s) could not be labeled ({}); rerun to retry them. First error: {}",
            ids.len(),
            ids.join(", "),
            run.failures[0].error
        )));
    }
    // rewrite in problem order so the artifact does not depend on completion order
    write_jsonl(&raw_path, &run.labels)?;

    let ontology_path = out_dir.join(ONTOLOGY);
    let mut flagged = Vec::new();
    let ontology = if ontology_path.exists() {
        log::info!("reusing {}", ontology_path.display());
        UnitOntology::load(&ontology_path)?
    } else {
        let ontology = match &opts.ontology {
            OntologySource::Fixed(o) => o.clone(),
            OntologySource::Cluster { batch_size } => {
                let raw: Vec<String> =
                    run.labels.iter().map(|l| l.field(opts.field).to_string()).collect();
                let built = cluster_ontology(&raw, client, *batch_size)?;
                flagged = built.flagged;
                built.ontology
            }
        };
        ontology.save(&ontology_path)?;
        ontology
    };
    if !flagged.is_empty() {
        std::fs::write(out_dir.join(FLAGGED), serde_json::to_string_pretty(&flagged)? + "\n")?;
    }

    let assignments = normalize_labels(&run.labels, opts.field, &ontology, client)?;
    write_jsonl(&out_dir.join(ASSIGNMENTS), &assignments)?;

    let manifest = Manifest {
        prompt_set: PROMPT_SET_VERSION.into(),
        model: client.config().model_name.clone(),
        field: opts.field,
        problems: problems.len(),
        ontology_version: ontology.version.clone(),
        stages: vec![
            stage(out_dir, "label_units", RAW_LABELS, run.labels.len())?,
            stage(out_dir, "cluster_ontology", ONTOLOGY, ontology.clusters.len())?,
            stage(out_dir, "normalize_labels", ASSIGNMENTS, assignments.len())?,
        ],
        flagged_batches: flagged.len(),
        counts: assignment_counts(&assignments),
    };
    std::fs::write(out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
