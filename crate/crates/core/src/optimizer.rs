//! Dependency graphs and parallel schedules for mined patterns.
//!
//! Block-based edges come from the statements themselves: reads wait for the
//! last write on their table, writes wait for the last write and every read
//! since, and DDL waits for everything in its database and blocks everything
//! after it. Business-based edges are supplied by users. A schedule groups
//! the pattern positions into stages by longest-path levelization.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sql_template::SqlTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blocking {
    None,
    TableWrite,
    DatabaseDdl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scope {
    /// Empty for the session's default database.
    pub database: String,
    pub table: String,
    pub access: Access,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementClass {
    pub blocking: Blocking,
    pub database: String,
    pub scopes: Vec<Scope>,
}

fn split_table(name: &str, default_db: &str) -> (String, String) {
    match name.split_once('.') {
        Some((db, table)) => (db.to_lowercase(), table.to_lowercase()),
        None => (default_db.to_string(), name.to_lowercase()),
    }
}

/// Blocking level and touched scopes of a statement. For DML writes the
/// first table is the target and any further tables are read.
pub fn classify_statement(template: &SqlTemplate) -> StatementClass {
    let kind = template.statement_kind;
    let database = template.database.as_deref().unwrap_or("").to_lowercase();
    let blocking = if kind.is_ddl() {
        Blocking::DatabaseDdl
    } else if kind.is_dml_write() {
        Blocking::TableWrite
    } else {
        Blocking::None
    };
    let scopes = template
        .tables
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (database, table) = split_table(name, &database);
            let access = if blocking != Blocking::None && i == 0 {
                Access::Write
            } else {
                Access::Read
            };
            Scope {
                database,
                table,
                access,
            }
        })
        .collect();
    StatementClass {
        blocking,
        database,
        scopes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    BlockBased,
    BusinessBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub nodes: Vec<SqlTemplate>,
    /// Sorted and unique.
    pub edges: Vec<Edge>,
}

/// Edges implied by the statements alone.
pub fn block_edges(pattern: &[SqlTemplate]) -> Vec<Edge> {
    let mut last_writer: HashMap<(String, String), usize> = HashMap::new();
    let mut readers: HashMap<(String, String), Vec<usize>> = HashMap::new();
    let mut last_ddl: HashMap<String, usize> = HashMap::new();
    let mut since_ddl: HashMap<String, Vec<usize>> = HashMap::new();
    let mut edges = BTreeSet::new();

    for (i, template) in pattern.iter().enumerate() {
        let class = classify_statement(template);
        let mut deps: BTreeSet<usize> = BTreeSet::new();
        let mut databases: BTreeSet<String> =
            class.scopes.iter().map(|s| s.database.clone()).collect();
        databases.insert(class.database.clone());
        for db in &databases {
            if let Some(&d) = last_ddl.get(db) {
                deps.insert(d);
            }
        }
        if class.blocking == Blocking::DatabaseDdl {
            for db in &databases {
                deps.extend(since_ddl.remove(db).unwrap_or_default());
                last_ddl.insert(db.clone(), i);
                last_writer.retain(|(d, _), _| d != db);
                readers.retain(|(d, _), _| d != db);
            }
        } else {
            for scope in &class.scopes {
                let key = (scope.database.clone(), scope.table.clone());
                if let Some(&w) = last_writer.get(&key) {
                    deps.insert(w);
                }
                match scope.access {
                    Access::Read => readers.entry(key).or_default().push(i),
                    Access::Write => {
                        deps.extend(readers.remove(&key).unwrap_or_default());
                        last_writer.insert(key, i);
                    }
                }
            }
            for db in databases {
                since_ddl.entry(db).or_default().push(i);
            }
        }
        deps.remove(&i);
        edges.extend(deps.into_iter().map(|from| Edge {
            from,
            to: i,
            kind: EdgeKind::BlockBased,
        }));
    }
    edges.into_iter().collect()
}

pub fn build_dependency_graph(
    pattern: &[SqlTemplate],
    business_deps: &[(usize, usize)],
) -> Result<DependencyGraph> {
    if pattern.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut graph = DependencyGraph {
        nodes: pattern.to_vec(),
        edges: block_edges(pattern),
    };
    for &(from, to) in business_deps {
        graph.add_business_edge(from, to)?;
    }
    Ok(graph)
}

impl DependencyGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn reaches(&self, start: usize, target: usize) -> bool {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            if u == target {
                return true;
            }
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(self.edges.iter().filter(|e| e.from == u).map(|e| e.to));
        }
        false
    }

    /// Check a business edge against range, acyclicity and pattern order.
    pub fn check_business_edge(&self, from: usize, to: usize) -> Result<()> {
        let len = self.len();
        if from >= len || to >= len {
            return Err(Error::IndexOutOfRange { from, to, len });
        }
        if from == to || self.reaches(to, from) {
            return Err(Error::CycleDetected { from, to });
        }
        if from > to {
            return Err(Error::OrderViolation { from, to });
        }
        Ok(())
    }

    /// Returns false if the edge was already present.
    pub fn add_business_edge(&mut self, from: usize, to: usize) -> Result<bool> {
        self.check_business_edge(from, to)?;
        let edge = Edge {
            from,
            to,
            kind: EdgeKind::BusinessBased,
        };
        match self.edges.binary_search(&edge) {
            Ok(_) => Ok(false),
            Err(pos) => {
                self.edges.insert(pos, edge);
                Ok(true)
            }
        }
    }

    /// Returns false if no such business edge existed.
    pub fn remove_business_edge(&mut self, from: usize, to: usize) -> bool {
        let before = self.edges.len();
        self.edges
            .retain(|e| !(e.from == from && e.to == to && e.kind == EdgeKind::BusinessBased));
        self.edges.len() != before
    }

    pub fn business_edges(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::BusinessBased)
            .map(|e| (e.from, e.to))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn stage_of(&self, node: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.contains(&node))
    }

    pub fn node_count(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }
}

/// Longest-path levelization: sources at stage 0, every other node one stage
/// after its latest predecessor.
pub fn schedule(graph: &DependencyGraph) -> Result<Schedule> {
    let n = graph.len();
    let mut indegree = vec![0usize; n];
    let mut successors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &graph.edges {
        if e.from >= n || e.to >= n {
            return Err(Error::IndexOutOfRange {
                from: e.from,
                to: e.to,
                len: n,
            });
        }
        indegree[e.to] += 1;
        successors[e.from].push(e.to);
    }
    let mut level = vec![0usize; n];
    let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut done = 0;
    while let Some(u) = ready.pop() {
        done += 1;
        for &v in &successors[u] {
            level[v] = level[v].max(level[u] + 1);
            indegree[v] -= 1;
            if indegree[v] == 0 {
                ready.push(v);
            }
        }
    }
    if done < n {
        let stuck = graph
            .edges
            .iter()
            .find(|e| indegree[e.to] > 0 && indegree[e.from] > 0)
            .expect("an unresolved node lies on a cycle");
        return Err(Error::CycleDetected {
            from: stuck.from,
            to: stuck.to,
        });
    }
    let depth = level.iter().max().map_or(0, |m| m + 1);
    let mut stages = vec![Vec::new(); depth];
    for (v, &l) in level.iter().enumerate() {
        stages[l].push(v);
    }
    Ok(Schedule { stages })
}

/// Serial time over parallel time, where a stage costs its slowest query.
pub fn estimate_speedup(schedule: &Schedule, rt: &[f64]) -> Result<f64> {
    let n = schedule.node_count();
    if rt.len() < n {
        return Err(Error::MissingRt(rt.len()));
    }
    if let Some(i) = rt.iter().position(|&t| !(t.is_finite() && t > 0.0)) {
        return Err(Error::MissingRt(i));
    }
    let mut serial = 0.0;
    let mut parallel = 0.0;
    for stage in &schedule.stages {
        let mut slowest = 0.0f64;
        for &v in stage {
            let t = *rt.get(v).ok_or(Error::MissingRt(v))?;
            serial += t;
            slowest = slowest.max(t);
        }
        parallel += slowest;
    }
    Ok(serial / parallel)
}

/// Parse `from -> to` lines. Blank lines and `#` comments are skipped.
pub fn parse_business_deps(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut deps = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::MalformedLine(format!(
                "line {}: expected `from -> to`, got {raw:?}",
                lineno + 1
            ))
        };
        let (from, to) = line.split_once("->").ok_or_else(bad)?;
        let from = from.trim().parse().map_err(|_| bad())?;
        let to = to.trim().parse().map_err(|_| bad())?;
        deps.push((from, to));
    }
    Ok(deps)
}

/// One line per stage, node indices comma-separated.
pub fn format_stages(schedule: &Schedule) -> String {
    schedule
        .stages
        .iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .map(|line| line + "\n")
        .collect()
}
