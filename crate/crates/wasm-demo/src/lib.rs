//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain strings and numbers and returns a JSON document,
//! so the page needs no generated type glue beyond `wasm-bindgen`'s own.

use std::collections::HashMap;

use awm_core::optimizer::{
    build_dependency_graph, estimate_speedup, parse_business_deps, schedule, EdgeKind,
};
use awm_core::pattern_miner::{
    build_prefix_tree, discover_patterns, scan, select_order, smoothed_transitions, QuerySequence,
};
use awm_core::sql_template::digest;
use awm_core::SqlId;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct DigestView {
    template: String,
    sql_id: String,
    kind: String,
    tables: Vec<String>,
}

#[derive(Serialize)]
struct CostView {
    ord: usize,
    kept_entries: usize,
    model_bits: f64,
    data_bits: f64,
    total: f64,
}

#[derive(Serialize)]
struct RowView {
    context: Vec<String>,
    probabilities: Vec<f64>,
}

#[derive(Serialize)]
struct PatternView {
    symbols: Vec<String>,
    support: u64,
    probability: f64,
}

#[derive(Serialize)]
struct MiningView {
    alphabet: Vec<String>,
    tau: f64,
    ord: usize,
    costs: Vec<CostView>,
    rows: Vec<RowView>,
    /// Emitted occurrences in scan order; concatenated they give the input.
    partition: Vec<Vec<String>>,
    patterns: Vec<PatternView>,
}

#[derive(Serialize)]
struct EdgeView {
    from: usize,
    to: usize,
    kind: &'static str,
}

#[derive(Serialize)]
struct ScheduleView {
    templates: Vec<String>,
    edges: Vec<EdgeView>,
    stages: Vec<Vec<usize>>,
    estimated_speedup: Option<f64>,
}

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Template, SqlId and tables of one statement.
pub fn digest_json(sql: &str) -> Result<String, String> {
    let t = digest(sql).map_err(|e| e.to_string())?;
    to_json(&DigestView {
        sql_id: t.sql_id().to_string(),
        kind: format!("{:?}", t.statement_kind),
        tables: t.tables.clone(),
        template: t.text,
    })
}

/// Mine a whitespace-separated symbol sequence such as `q1 q2 q3 q4 q3`.
///
/// The order is chosen by description length over `0..=max_ord` unless
/// `order` pins it; the costs are reported either way.
pub fn mine_json(
    symbols: &str,
    theta: f64,
    max_ord: usize,
    order: Option<usize>,
) -> Result<String, String> {
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<&str, u64> = HashMap::new();
    let mut ids = Vec::new();
    for token in symbols.split_whitespace() {
        let id = *index.entry(token).or_insert_with(|| {
            names.push(token.to_string());
            names.len() as u64 - 1
        });
        ids.push(SqlId(id));
    }
    let name = |id: &SqlId| names[id.0 as usize].clone();
    let seq = QuerySequence::new(ids);
    let selection =
        select_order(&seq, max_ord.max(order.unwrap_or(0))).map_err(|e| e.to_string())?;
    let (ord, model) = match order {
        Some(ord) => {
            let tree = build_prefix_tree(&seq, ord).map_err(|e| e.to_string())?;
            (
                ord,
                smoothed_transitions(&tree, ord).map_err(|e| e.to_string())?,
            )
        }
        None => (selection.ord, selection.model.clone()),
    };
    let model = &model;
    let trace = scan(seq.symbols(), model, theta).map_err(|e| e.to_string())?;
    let patterns = discover_patterns(&seq, model, theta).map_err(|e| e.to_string())?;
    to_json(&MiningView {
        alphabet: model.alphabet.iter().map(name).collect(),
        tau: model.tau,
        ord,
        costs: selection
            .costs
            .iter()
            .map(|c| CostView {
                ord: c.ord,
                kept_entries: c.kept_entries,
                model_bits: c.model_bits,
                data_bits: c.data_bits,
                total: c.total,
            })
            .collect(),
        rows: model
            .rows()
            .into_iter()
            .map(|r| RowView {
                context: r.context.iter().map(name).collect(),
                probabilities: r.probabilities.clone(),
            })
            .collect(),
        partition: trace
            .instances
            .iter()
            .map(|i| {
                seq.symbols()[i.start..i.start + i.len]
                    .iter()
                    .map(name)
                    .collect()
            })
            .collect(),
        patterns: patterns
            .iter()
            .map(|p| PatternView {
                symbols: p.sequence.iter().map(name).collect(),
                support: p.support,
                probability: p.probability,
            })
            .collect(),
    })
}

/// Stages for one SQL statement per line plus `from -> to` dependency lines.
/// `rt` holds whitespace-separated response times; when empty every query
/// counts as one unit.
pub fn schedule_json(sql_lines: &str, deps: &str, rt: &str) -> Result<String, String> {
    let templates = sql_lines
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| digest(l).map_err(|e| format!("{l:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    let deps = parse_business_deps(deps).map_err(|e| e.to_string())?;
    let graph = build_dependency_graph(&templates, &deps).map_err(|e| e.to_string())?;
    let stages = schedule(&graph).map_err(|e| e.to_string())?;
    let rt: Vec<f64> = if rt.trim().is_empty() {
        vec![1.0; templates.len()]
    } else {
        rt.split_whitespace()
            .map(|v| v.parse().map_err(|_| format!("bad response time {v:?}")))
            .collect::<Result<_, _>>()?
    };
    to_json(&ScheduleView {
        templates: templates.into_iter().map(|t| t.text).collect(),
        edges: graph
            .edges
            .iter()
            .map(|e| EdgeView {
                from: e.from,
                to: e.to,
                kind: match e.kind {
                    EdgeKind::BlockBased => "block",
                    EdgeKind::BusinessBased => "business",
                },
            })
            .collect(),
        estimated_speedup: estimate_speedup(&stages, &rt).ok(),
        stages: stages.stages,
    })
}

#[wasm_bindgen]
pub fn digest_sql(sql: &str) -> Result<String, JsError> {
    digest_json(sql).map_err(|e| JsError::new(&e))
}

/// A negative `order` selects the order automatically.
#[wasm_bindgen]
pub fn mine_sequence(
    symbols: &str,
    theta: f64,
    max_ord: usize,
    order: i32,
) -> Result<String, JsError> {
    let order = usize::try_from(order).ok();
    mine_json(symbols, theta, max_ord, order).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn schedule_pattern(sql_lines: &str, deps: &str, rt: &str) -> Result<String, JsError> {
    schedule_json(sql_lines, deps, rt).map_err(|e| JsError::new(&e))
}
