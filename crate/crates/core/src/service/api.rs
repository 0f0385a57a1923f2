//! Transport-independent HTTP API over a [`PipelineState`].
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/health` | liveness and pattern count |
//! | GET | `/patterns` | pattern summaries |
//! | GET | `/patterns/{id}` | one pattern with edges and schedule |
//! | GET | `/patterns/{id}/schedule` | stages, edges and rt estimates |
//! | POST | `/patterns/{id}/deps` | add business edge `{from, to, version?}` |
//! | DELETE | `/patterns/{id}/deps/{from}/{to}?version=N` | remove business edge |
//!
//! Mutations take the write lock, recompute the schedule, persist, and only
//! then publish the new state, so a failed request changes nothing.

use std::path::PathBuf;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::pipeline::{load_state, persist_state, PatternEntry, PipelineState};
use crate::error::{Error, Result};
use crate::optimizer::{estimate_speedup, schedule, Edge, Schedule};
use crate::sql_template::SqlId;

pub const JSON: &str = "application/json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    /// Path including an optional query string.
    pub path: String,
    pub body: String,
}

impl Request {
    pub fn new(method: &str, path: &str, body: &str) -> Self {
        Self {
            method: method.to_string(),
            path: path.to_string(),
            body: body.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl Response {
    fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            content_type: JSON,
            body: serde_json::to_string(value).expect("API views serialize"),
        }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, &json!({ "error": message.into() }))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PatternSummary<'a> {
    pub id: usize,
    pub group: &'a str,
    pub pattern: &'a [SqlId],
    pub templates: &'a [String],
    pub support: u64,
    pub probability: f64,
    pub version: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleView<'a> {
    pub id: usize,
    pub version: u64,
    pub templates: &'a [String],
    pub deps: &'a [(usize, usize)],
    pub edges: Vec<Edge>,
    pub stages: &'a [Vec<usize>],
    pub rt: &'a [f64],
    /// Absent when some position has no usable response time.
    pub estimated_speedup: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PatternDetail<'a> {
    #[serde(flatten)]
    pub entry: &'a PatternEntry,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Deserialize)]
struct DepRequest {
    from: usize,
    to: usize,
    #[serde(default)]
    version: Option<u64>,
}

pub struct Api {
    dir: Option<PathBuf>,
    state: RwLock<PipelineState>,
}

fn error_status(e: &Error) -> u16 {
    match e {
        Error::CycleDetected { .. }
        | Error::IndexOutOfRange { .. }
        | Error::OrderViolation { .. } => 400,
        _ => 500,
    }
}

impl Api {
    /// Serve `state`, persisting mutations into `dir` when given.
    pub fn new(state: PipelineState, dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            state: RwLock::new(state),
        }
    }

    pub fn load(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let state = load_state(&dir)?;
        Ok(Self::new(state, Some(dir)))
    }

    pub fn snapshot(&self) -> PipelineState {
        self.state.read().expect("state lock poisoned").clone()
    }

    pub fn handle(&self, req: &Request) -> Response {
        let (path, query) = req.path.split_once('?').unwrap_or((&req.path, ""));
        let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        match (req.method.as_str(), segments.as_slice()) {
            ("GET", ["health"]) => {
                let state = self.state.read().expect("state lock poisoned");
                Response::json(
                    200,
                    &json!({ "status": "ok", "patterns": state.patterns.len() }),
                )
            }
            ("GET", ["patterns"]) => {
                let state = self.state.read().expect("state lock poisoned");
                let list: Vec<PatternSummary> = state
                    .patterns
                    .iter()
                    .map(|p| PatternSummary {
                        id: p.id,
                        group: &p.group,
                        pattern: &p.pattern,
                        templates: &p.templates,
                        support: p.support,
                        probability: p.probability,
                        version: p.version,
                    })
                    .collect();
                Response::json(200, &list)
            }
            ("GET", ["patterns", id]) => self.read_pattern(id, |state, entry| {
                let edges = state.graph(entry)?.edges;
                Ok(Response::json(200, &PatternDetail { entry, edges }))
            }),
            ("GET", ["patterns", id, "schedule"]) => self.read_pattern(id, schedule_response),
            ("POST", ["patterns", id, "deps"]) => {
                let dep: DepRequest = match serde_json::from_str(&req.body) {
                    Ok(dep) => dep,
                    Err(e) => {
                        return Response::error(400, format!("expected {{\"from\", \"to\"}}: {e}"))
                    }
                };
                self.mutate(id, dep.version, |state, entry| {
                    let mut graph = state.graph(entry)?;
                    graph.add_business_edge(dep.from, dep.to)?;
                    Ok(Some(graph))
                })
            }
            ("DELETE", ["patterns", id, "deps", from, to]) => {
                let (Ok(from), Ok(to)) = (from.parse::<usize>(), to.parse::<usize>()) else {
                    return Response::error(400, "dependency endpoints must be integers");
                };
                let version = match query_param(query, "version").map(str::parse::<u64>) {
                    None => None,
                    Some(Ok(v)) => Some(v),
                    Some(Err(_)) => return Response::error(400, "version must be an integer"),
                };
                self.mutate(id, version, |state, entry| {
                    let mut graph = state.graph(entry)?;
                    Ok(graph.remove_business_edge(from, to).then_some(graph))
                })
            }
            (_, ["health"]) | (_, ["patterns", ..]) => Response::error(405, "method not allowed"),
            _ => Response::error(404, "no such route"),
        }
    }

    fn read_pattern(
        &self,
        id: &str,
        view: impl FnOnce(&PipelineState, &PatternEntry) -> Result<Response>,
    ) -> Response {
        let state = self.state.read().expect("state lock poisoned");
        let Some(entry) = id.parse().ok().and_then(|id| state.pattern(id)) else {
            return Response::error(404, format!("unknown pattern {id}"));
        };
        view(&state, entry).unwrap_or_else(|e| Response::error(error_status(&e), e.to_string()))
    }

    /// `edit` returns the edited graph, or `None` if the target edge does not
    /// exist.
    fn mutate(
        &self,
        id: &str,
        expected_version: Option<u64>,
        edit: impl FnOnce(
            &PipelineState,
            &PatternEntry,
        ) -> Result<Option<crate::optimizer::DependencyGraph>>,
    ) -> Response {
        let mut state = self.state.write().expect("state lock poisoned");
        let Some(index) = id
            .parse::<usize>()
            .ok()
            .and_then(|id| state.patterns.iter().position(|p| p.id == id))
        else {
            return Response::error(404, format!("unknown pattern {id}"));
        };
        let entry = &state.patterns[index];
        if let Some(v) = expected_version {
            if v != entry.version {
                return Response::json(
                    409,
                    &json!({ "error": "stale version", "expected": v, "current": entry.version }),
                );
            }
        }
        let graph = match edit(&state, entry) {
            Ok(Some(graph)) => graph,
            Ok(None) => return Response::error(404, "no such business dependency"),
            Err(e) => return Response::error(error_status(&e), e.to_string()),
        };
        let deps = graph.business_edges();
        if deps == entry.deps {
            return schedule_response(&state, entry)
                .unwrap_or_else(|e| Response::error(500, e.to_string()));
        }
        let stages = match schedule(&graph) {
            Ok(s) => s.stages,
            Err(e) => return Response::error(error_status(&e), e.to_string()),
        };
        let mut next = state.clone();
        let updated = &mut next.patterns[index];
        updated.deps = deps;
        updated.stages = stages;
        updated.version += 1;
        if let Some(dir) = &self.dir {
            if let Err(e) = persist_state(&next, dir) {
                return Response::error(500, e.to_string());
            }
        }
        *state = next;
        schedule_response(&state, &state.patterns[index])
            .unwrap_or_else(|e| Response::error(500, e.to_string()))
    }
}

fn schedule_response(state: &PipelineState, entry: &PatternEntry) -> Result<Response> {
    let edges = state.graph(entry)?.edges;
    let estimated_speedup = estimate_speedup(
        &Schedule {
            stages: entry.stages.clone(),
        },
        &entry.rt,
    )
    .ok();
    Ok(Response::json(
        200,
        &ScheduleView {
            id: entry.id,
            version: entry.version,
            templates: &entry.templates,
            deps: &entry.deps,
            edges,
            stages: &entry.stages,
            rt: &entry.rt,
            estimated_speedup,
        },
    ))
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<&'a str> {
    query
        .split('&')
        .filter_map(|pair| pair.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}
