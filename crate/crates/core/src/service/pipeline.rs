use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifact;
use super::config::{GroupBy, PipelineConfig};
use crate::classifier::{sample_labels, train, Classifier, ClassifierModel, FeatureAssembler};
use crate::embedding::{embed_with_store, Embedder, EmbeddingStore};
use crate::error::{Error, Result};
use crate::exec_features::{encode, fit_stats, FeatureConfig, FeatureStats};
use crate::log_ingest::{QueryLogRecord, RecordStore};
use crate::optimizer::{build_dependency_graph, schedule, DependencyGraph};
use crate::pattern_miner::{mine, ClassifiedQuery, MdlCost};
use crate::sql_template::{digest, SqlId, SqlTemplate};

pub const STATE_FILE: &str = "state.json";
pub const PATTERNS_FILE: &str = "patterns.json";
pub const MODEL_FILE: &str = "model.json";
pub const STATS_FILE: &str = "feature_stats.json";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const STATUS_FILE: &str = "run_status.json";

const STATE_FORMAT: &str = "awm_pipeline_state";
const PATTERNS_FORMAT: &str = "awm_patterns";
const MODEL_FORMAT: &str = "awm_classifier_model";
const STATS_FORMAT: &str = "awm_feature_stats";
const STATUS_FORMAT: &str = "awm_run_status";

/// Group name for records without a label under `group_by = label`.
pub const UNLABELED_GROUP: &str = "unlabeled";
/// Group name under `group_by = none`.
pub const SINGLE_GROUP: &str = "all";

/// Group name and SqlId sequence identifying a pattern across runs.
type PatternKey = (String, Vec<SqlId>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub id: usize,
    pub group: String,
    pub pattern: Vec<SqlId>,
    pub templates: Vec<String>,
    pub support: u64,
    pub probability: f64,
    pub model_ord: usize,
    pub theta: f64,
    /// Mean observed response time per position, seconds.
    pub rt: Vec<f64>,
    /// Business-based dependencies as `(from, to)` positions.
    pub deps: Vec<(usize, usize)>,
    pub stages: Vec<Vec<usize>>,
    /// Bumped on every dependency edit.
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub ord: usize,
    pub sequence_len: usize,
    pub alphabet_size: usize,
    pub costs: Vec<MdlCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub config: PipelineConfig,
    pub registry: BTreeMap<SqlId, SqlTemplate>,
    pub groups: Vec<GroupSummary>,
    pub patterns: Vec<PatternEntry>,
}

impl PipelineState {
    pub fn pattern(&self, id: usize) -> Option<&PatternEntry> {
        self.patterns.iter().find(|p| p.id == id)
    }

    pub fn templates_of(&self, entry: &PatternEntry) -> Result<Vec<SqlTemplate>> {
        entry
            .pattern
            .iter()
            .map(|id| {
                self.registry.get(id).cloned().ok_or_else(|| {
                    Error::CorruptState(format!(
                        "pattern {} references unknown SqlId {id}",
                        entry.id
                    ))
                })
            })
            .collect()
    }

    pub fn graph(&self, entry: &PatternEntry) -> Result<DependencyGraph> {
        build_dependency_graph(&self.templates_of(entry)?, &entry.deps)
    }

    /// Check the registry and that every stored schedule matches its deps.
    pub fn validate(&self) -> Result<()> {
        for entry in &self.patterns {
            let stages = schedule(&self.graph(entry)?)?.stages;
            if stages != entry.stages {
                return Err(Error::CorruptState(format!(
                    "pattern {} has a stale schedule",
                    entry.id
                )));
            }
        }
        Ok(())
    }
}

pub fn persist_state(state: &PipelineState, dir: &Path) -> Result<()> {
    artifact::write(&dir.join(STATE_FILE), STATE_FORMAT, state)?;
    artifact::write(&dir.join(PATTERNS_FILE), PATTERNS_FORMAT, &state.patterns)
}

pub fn load_state(dir: &Path) -> Result<PipelineState> {
    let state: PipelineState = artifact::read(&dir.join(STATE_FILE), STATE_FORMAT)?;
    state.validate()?;
    Ok(state)
}

/// Read a pattern output file.
pub fn load_patterns(path: &Path) -> Result<Vec<PatternEntry>> {
    artifact::read(path, PATTERNS_FORMAT)
}

pub fn load_model(dir: &Path) -> Result<ClassifierModel> {
    let model: ClassifierModel = artifact::read(&dir.join(MODEL_FILE), MODEL_FORMAT)?;
    model.validate()?;
    Ok(model)
}

pub fn load_feature_stats(dir: &Path) -> Result<FeatureStats> {
    let stats: FeatureStats = artifact::read(&dir.join(STATS_FILE), STATS_FORMAT)?;
    stats.validate()?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatus {
    pub phase: RunPhase,
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn load_status(dir: &Path) -> Result<RunStatus> {
    artifact::read(&dir.join(STATUS_FILE), STATUS_FORMAT)
}

fn write_status(dir: &Path, phase: RunPhase, step: &str, error: Option<String>) -> Result<()> {
    let status = RunStatus {
        phase,
        step: step.to_string(),
        error,
    };
    artifact::write(&dir.join(STATUS_FILE), STATUS_FORMAT, &status)
}

fn open_nonempty(dir: &Path) -> Result<RecordStore> {
    let store = RecordStore::open(dir)?;
    if store.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub queries: usize,
    pub distinct: usize,
    pub store_size: usize,
}

/// Embed every stored query through the cache and persist the cache.
pub fn embed_records(dir: &Path, embedder: &dyn Embedder) -> Result<EmbedReport> {
    let store = open_nonempty(dir)?;
    let cache = EmbeddingStore::open(dir, embedder.dim())?;
    let sqls: Vec<&str> = store.records().iter().map(|r| r.sql.as_str()).collect();
    embed_with_store(&sqls, &cache, embedder)?;
    cache.persist()?;
    let mut distinct = sqls.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(EmbedReport {
        queries: sqls.len(),
        distinct: distinct.len(),
        store_size: cache.len(),
    })
}

fn features(
    records: &[QueryLogRecord],
    stats: &FeatureStats,
    cache: &EmbeddingStore,
    embedder: &dyn Embedder,
) -> Result<Vec<Vec<f64>>> {
    let sqls: Vec<&str> = records.iter().map(|r| r.sql.as_str()).collect();
    let z = embed_with_store(&sqls, cache, embedder)?;
    let mut assembler = FeatureAssembler::new();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let x = encode(r, stats)?;
            let sql_id = digest(&r.sql)?.sql_id();
            Ok(assembler
                .assemble(z.row(i), Some(&x), sql_id, r.timestamp)?
                .values)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: usize,
    pub labeled: usize,
    pub classes: Vec<String>,
    pub feature_dim: usize,
}

/// Sample labels, fit feature stats, train the classifier and persist both.
/// The labeled sample is written to disk while training runs and removed
/// afterwards, whether or not training succeeded.
pub fn train_classifier(
    dir: &Path,
    config: &PipelineConfig,
    embedder: &dyn Embedder,
) -> Result<TrainReport> {
    config.validate()?;
    let store = open_nonempty(dir)?;
    let labeled = sample_labels(store.records(), &config.label_policy());
    let labeled_path = dir.join(LABELED_FILE);
    let lines: String = labeled.iter().map(|r| r.to_line() + "\n").collect();
    fs::write(&labeled_path, lines).map_err(|source| Error::StoreUnavailable {
        path: labeled_path.display().to_string(),
        source,
    })?;
    let result = train_on(dir, store.records(), &labeled, config, embedder);
    let _ = fs::remove_file(&labeled_path);
    result
}

fn train_on(
    dir: &Path,
    all: &[QueryLogRecord],
    labeled: &[QueryLogRecord],
    config: &PipelineConfig,
    embedder: &dyn Embedder,
) -> Result<TrainReport> {
    if labeled.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let stats = fit_stats(all, &FeatureConfig::default())?;
    let cache = EmbeddingStore::open(dir, embedder.dim())?;
    let fs = features(labeled, &stats, &cache, embedder)?;
    cache.persist()?;
    let data: Vec<_> = labeled
        .iter()
        .zip(fs)
        .map(|(r, values)| {
            let fv = crate::classifier::FeatureVector {
                values,
                sql_id: SqlId(0),
                timestamp: r.timestamp,
            };
            (
                fv,
                r.group_label.clone().expect("sampled records are labeled"),
            )
        })
        .collect();
    let model = train(&data, &config.training())?;
    artifact::write(&dir.join(STATS_FILE), STATS_FORMAT, &stats)?;
    artifact::write(&dir.join(MODEL_FILE), MODEL_FORMAT, &model)?;
    Ok(TrainReport {
        records: all.len(),
        labeled: labeled.len(),
        classes: model.classes.clone(),
        feature_dim: model.dim,
    })
}

fn assign_groups(
    dir: &Path,
    records: &[QueryLogRecord],
    config: &PipelineConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<String>> {
    match config.group_by {
        GroupBy::Label => Ok(records
            .iter()
            .map(|r| {
                r.group_label
                    .clone()
                    .unwrap_or_else(|| UNLABELED_GROUP.to_string())
            })
            .collect()),
        GroupBy::None => Ok(vec![SINGLE_GROUP.to_string(); records.len()]),
        GroupBy::Predicted => {
            let model = load_model(dir)?;
            let stats = load_feature_stats(dir)?;
            let cache = EmbeddingStore::open(dir, embedder.dim())?;
            let fs = features(records, &stats, &cache, embedder)?;
            cache.persist()?;
            fs.iter()
                .map(|f| Ok(model.predict(f)?.to_string()))
                .collect()
        }
    }
}

/// digest, group, mine, then schedule every pattern with its business deps.
///
/// An empty record store fails with `EmptyInput` before anything is written.
/// Otherwise a status marker tracks progress and records failures.
pub fn run_pipeline(
    dir: &Path,
    config: &PipelineConfig,
    embedder: &dyn Embedder,
) -> Result<PipelineState> {
    config.validate()?;
    let store = open_nonempty(dir)?;
    write_status(dir, RunPhase::Running, "digest", None)?;
    let mut step = "digest";
    let result = run_steps(dir, store.records(), config, embedder, &mut step);
    match &result {
        Ok(_) => write_status(dir, RunPhase::Complete, "persist", None)?,
        Err(e) => write_status(dir, RunPhase::Failed, step, Some(e.to_string()))?,
    }
    result
}

fn run_steps(
    dir: &Path,
    records: &[QueryLogRecord],
    config: &PipelineConfig,
    embedder: &dyn Embedder,
    step: &mut &'static str,
) -> Result<PipelineState> {
    let templates: Vec<SqlTemplate> = records
        .iter()
        .map(|r| digest(&r.sql))
        .collect::<Result<_>>()?;

    *step = "classify";
    let groups = assign_groups(dir, records, config, embedder)?;

    *step = "mine";
    let queries: Vec<ClassifiedQuery> = records
        .iter()
        .zip(templates)
        .zip(&groups)
        .map(|((r, template), group)| ClassifiedQuery {
            group: group.clone(),
            timestamp: r.timestamp,
            template,
        })
        .collect();
    let mined = mine(&queries, &config.mining())?;

    *step = "schedule";
    let mut rt_totals: HashMap<(&str, SqlId), (f64, usize)> = HashMap::new();
    let mut registry = BTreeMap::new();
    for (q, r) in queries.iter().zip(records) {
        let id = q.template.sql_id();
        let slot = rt_totals.entry((q.group.as_str(), id)).or_insert((0.0, 0));
        slot.0 += r.rt;
        slot.1 += 1;
        registry.entry(id).or_insert_with(|| q.template.clone());
    }
    let previous: HashMap<PatternKey, Vec<(usize, usize)>> = match load_state(dir) {
        Ok(state) => state
            .patterns
            .into_iter()
            .filter(|p| !p.deps.is_empty())
            .map(|p| ((p.group, p.pattern), p.deps))
            .collect(),
        Err(_) => HashMap::new(),
    };

    let mut summaries = Vec::new();
    let mut patterns = Vec::new();
    for (group, found) in mined {
        summaries.push(GroupSummary {
            group: group.clone(),
            ord: found.ord,
            sequence_len: found.sequence_len,
            alphabet_size: found.alphabet_size,
            costs: found.costs,
        });
        for p in found.patterns {
            let rt = p
                .sequence
                .iter()
                .map(|id| {
                    let (sum, n) = rt_totals[&(group.as_str(), *id)];
                    sum / n as f64
                })
                .collect();
            let mut graph = build_dependency_graph(&p.templates, &[])?;
            let mut deps = Vec::new();
            for &(from, to) in previous
                .get(&(group.clone(), p.sequence.clone()))
                .into_iter()
                .flatten()
            {
                if graph.add_business_edge(from, to).is_ok() {
                    deps.push((from, to));
                }
            }
            patterns.push(PatternEntry {
                id: patterns.len(),
                group: group.clone(),
                templates: p.templates.iter().map(|t| t.text.clone()).collect(),
                pattern: p.sequence,
                support: p.support,
                probability: p.probability,
                model_ord: found.ord,
                theta: found.theta,
                rt,
                deps,
                stages: schedule(&graph)?.stages,
                version: 0,
            });
        }
    }

    *step = "persist";
    let state = PipelineState {
        config: config.clone(),
        registry,
        groups: summaries,
        patterns,
    };
    persist_state(&state, dir)?;
    Ok(state)
}
