use std::fs;
use std::path::Path;

use awm_core::embedding::BuiltinEmbedder;
use awm_core::log_ingest::{ingest_stream, RecordStore};
use awm_core::optimizer::{build_dependency_graph, schedule};
use awm_core::service::pipeline::{
    LABELED_FILE, MODEL_FILE, PATTERNS_FILE, STATE_FILE, STATS_FILE, STATUS_FILE,
};
use awm_core::service::{
    load_state, load_status, run_pipeline, train_classifier, Api, GroupBy, PipelineConfig, Request,
    RunPhase,
};
use awm_core::synthetic::interleaved_workload;
use awm_core::Error;
use serde_json::Value;

fn embedder(config: &PipelineConfig) -> BuiltinEmbedder {
    BuiltinEmbedder::new(config.embedding())
}

fn seeded_store(dir: &Path, reps: usize) -> awm_core::synthetic::SyntheticWorkload {
    let w = interleaved_workload(reps, 5);
    let mut store = RecordStore::open(dir).unwrap();
    ingest_stream(w.records.iter().map(|r| r.to_line()), &mut store, 3).unwrap();
    w
}

fn label_config() -> PipelineConfig {
    PipelineConfig {
        group_by: GroupBy::Label,
        ..PipelineConfig::default()
    }
}

fn find_planted(
    state: &awm_core::service::PipelineState,
    w: &awm_core::synthetic::SyntheticWorkload,
) -> Vec<Option<u64>> {
    w.planted
        .iter()
        .map(|p| {
            state
                .patterns
                .iter()
                .find(|e| e.group == p.group && e.pattern == p.pattern)
                .map(|e| e.support)
        })
        .collect()
}

#[test]
fn label_grouping_recovers_both_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let w = seeded_store(dir.path(), 100);
    let config = label_config();
    let state = run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    assert_eq!(state.groups.len(), 2);
    assert!(state.groups.iter().all(|g| g.ord == 1));
    assert_eq!(find_planted(&state, &w), [Some(100), Some(100)]);
    assert_eq!(load_status(dir.path()).unwrap().phase, RunPhase::Complete);
}

#[test]
fn single_group_recovers_neither() {
    let dir = tempfile::tempdir().unwrap();
    let w = seeded_store(dir.path(), 100);
    let config = PipelineConfig {
        group_by: GroupBy::None,
        ..PipelineConfig::default()
    };
    let state = run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    assert_eq!(state.groups.len(), 1);
    assert!(state
        .patterns
        .iter()
        .all(|e| w.planted.iter().all(|p| p.pattern != e.pattern)));
}

#[test]
fn trained_classifier_grouping() {
    let dir = tempfile::tempdir().unwrap();
    let w = seeded_store(dir.path(), 100);
    let config = PipelineConfig {
        p_l: 0.2,
        seed: 3,
        ..PipelineConfig::default()
    };
    let e = embedder(&config);
    let report = train_classifier(dir.path(), &config, &e).unwrap();
    assert_eq!(report.classes, ["billing", "catalog"]);
    assert!(report.labeled > 0);
    assert!(!dir.path().join(LABELED_FILE).exists());
    assert!(dir.path().join(MODEL_FILE).exists() && dir.path().join(STATS_FILE).exists());

    let state = run_pipeline(dir.path(), &config, &e).unwrap();
    assert_eq!(
        state
            .groups
            .iter()
            .map(|g| g.group.as_str())
            .collect::<Vec<_>>(),
        ["billing", "catalog"]
    );
    assert_eq!(find_planted(&state, &w), [Some(100), Some(100)]);
}

#[test]
fn predicted_grouping_needs_a_model() {
    let dir = tempfile::tempdir().unwrap();
    seeded_store(dir.path(), 5);
    let config = PipelineConfig::default();
    let err = run_pipeline(dir.path(), &config, &embedder(&config)).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    let status = load_status(dir.path()).unwrap();
    assert_eq!(status.phase, RunPhase::Failed);
    assert_eq!(status.step, "classify");
    assert!(!dir.path().join(STATE_FILE).exists());
}

#[test]
fn empty_store_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = label_config();
    assert!(matches!(
        run_pipeline(dir.path(), &config, &embedder(&config)),
        Err(Error::EmptyInput)
    ));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    seeded_store(dir.path(), 100);
    let config = label_config();
    run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    let first = fs::read(dir.path().join(PATTERNS_FILE)).unwrap();
    run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    assert_eq!(first, fs::read(dir.path().join(PATTERNS_FILE)).unwrap());
}

#[test]
fn state_round_trip_and_damage() {
    let dir = tempfile::tempdir().unwrap();
    seeded_store(dir.path(), 100);
    let config = label_config();
    let state = run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    assert_eq!(load_state(dir.path()).unwrap(), state);

    let path = dir.path().join(STATE_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() - 40]).unwrap();
    assert!(matches!(
        load_state(dir.path()),
        Err(Error::CorruptState(_))
    ));

    fs::write(&path, text.replacen("\"version\": 1", "\"version\": 9", 1)).unwrap();
    assert!(matches!(
        load_state(dir.path()),
        Err(Error::VersionMismatch { found: 9, .. })
    ));
}

fn json(body: &str) -> Value {
    serde_json::from_str(body).unwrap()
}

fn two_query_pattern(api: &Api) -> usize {
    let state = api.snapshot();
    state
        .patterns
        .iter()
        .find(|p| p.pattern.len() == 2)
        .unwrap()
        .id
}

#[test]
fn api_routes() {
    let dir = tempfile::tempdir().unwrap();
    seeded_store(dir.path(), 100);
    let config = label_config();
    run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    let api = Api::load(dir.path()).unwrap();

    let health = api.handle(&Request::new("GET", "/health", ""));
    assert_eq!(health.status, 200);
    assert_eq!(json(&health.body)["status"], "ok");

    let list = api.handle(&Request::new("GET", "/patterns", ""));
    assert_eq!(list.status, 200);
    assert_eq!(list.content_type, "application/json");
    let items = json(&list.body);
    assert_eq!(
        items.as_array().unwrap().len(),
        api.snapshot().patterns.len()
    );
    for key in ["id", "group", "templates", "support", "probability"] {
        assert!(items[0].get(key).is_some(), "{key}");
    }

    let id = two_query_pattern(&api);
    let detail = api.handle(&Request::new("GET", &format!("/patterns/{id}"), ""));
    assert_eq!(detail.status, 200);
    assert_eq!(json(&detail.body)["id"], id);

    assert_eq!(
        api.handle(&Request::new("GET", "/patterns/9999", ""))
            .status,
        404
    );
    assert_eq!(
        api.handle(&Request::new("GET", "/patterns/abc/schedule", ""))
            .status,
        404
    );
    assert_eq!(api.handle(&Request::new("GET", "/nope", "")).status, 404);
    assert_eq!(
        api.handle(&Request::new("PUT", "/patterns", "")).status,
        405
    );
}

#[test]
fn api_dependency_edits() {
    let dir = tempfile::tempdir().unwrap();
    seeded_store(dir.path(), 100);
    let config = label_config();
    run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    let api = Api::load(dir.path()).unwrap();
    let id = two_query_pattern(&api);
    let schedule_path = format!("/patterns/{id}/schedule");
    let deps_path = format!("/patterns/{id}/deps");
    let before = api.handle(&Request::new("GET", &schedule_path, ""));

    // malformed and invalid edges leave everything untouched
    for body in [
        "{",
        r#"{"from":1,"to":0}"#,
        r#"{"from":0,"to":5}"#,
        r#"{"from":1,"to":1}"#,
    ] {
        assert_eq!(
            api.handle(&Request::new("POST", &deps_path, body)).status,
            400,
            "{body}"
        );
        assert_eq!(api.handle(&Request::new("GET", &schedule_path, "")), before);
    }

    let added = api.handle(&Request::new(
        "POST",
        &deps_path,
        r#"{"from":0,"to":1,"version":0}"#,
    ));
    assert_eq!(added.status, 200);
    let view = json(&added.body);
    assert_eq!(view["version"], 1);
    assert_eq!(view["deps"], serde_json::json!([[0, 1]]));
    assert_eq!(view["stages"], serde_json::json!([[0], [1]]));
    assert_eq!(
        api.handle(&Request::new("GET", &schedule_path, "")).body,
        added.body
    );

    // stale token
    let stale = api.handle(&Request::new(
        "POST",
        &deps_path,
        r#"{"from":0,"to":1,"version":0}"#,
    ));
    assert_eq!(stale.status, 409);

    // the edit survived a reload, and the stored schedule matches the optimizer
    let reloaded = load_state(dir.path()).unwrap();
    let entry = reloaded.pattern(id).unwrap();
    assert_eq!(entry.deps, [(0, 1)]);
    let templates = reloaded.templates_of(entry).unwrap();
    let expected = schedule(&build_dependency_graph(&templates, &entry.deps).unwrap()).unwrap();
    assert_eq!(entry.stages, expected.stages);

    let stale_delete = api.handle(&Request::new(
        "DELETE",
        &format!("/patterns/{id}/deps/0/1?version=0"),
        "",
    ));
    assert_eq!(stale_delete.status, 409);
    let removed = api.handle(&Request::new(
        "DELETE",
        &format!("/patterns/{id}/deps/0/1?version=1"),
        "",
    ));
    assert_eq!(removed.status, 200);
    assert_eq!(json(&removed.body)["version"], 2);
    assert_eq!(
        api.handle(&Request::new(
            "DELETE",
            &format!("/patterns/{id}/deps/0/1"),
            ""
        ))
        .status,
        404
    );
}

#[test]
fn deps_survive_rerun() {
    let dir = tempfile::tempdir().unwrap();
    seeded_store(dir.path(), 100);
    let config = label_config();
    run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    let api = Api::load(dir.path()).unwrap();
    let id = two_query_pattern(&api);
    let entry = api.snapshot().pattern(id).unwrap().clone();
    let response = api.handle(&Request::new(
        "POST",
        &format!("/patterns/{id}/deps"),
        r#"{"from":0,"to":1}"#,
    ));
    assert_eq!(response.status, 200);

    let state = run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    let again = state
        .patterns
        .iter()
        .find(|p| p.group == entry.group && p.pattern == entry.pattern)
        .unwrap();
    assert_eq!(again.deps, [(0, 1)]);
    assert_eq!(again.stages, [vec![0], vec![1]]);
}

#[test]
fn status_marker_written() {
    let dir = tempfile::tempdir().unwrap();
    seeded_store(dir.path(), 5);
    let config = label_config();
    run_pipeline(dir.path(), &config, &embedder(&config)).unwrap();
    assert!(dir.path().join(STATUS_FILE).exists());
}
