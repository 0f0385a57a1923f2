//! Variable-order Markov pattern mining over SQL id sequences.
//!
//! For one business group the miner
//!
//! * counts every contiguous window of length `<= max_ord + 1` in a prefix tree,
//! * derives transition rows smoothed around the threshold `tau = 1/|alphabet|`,
//! * picks the order with the smallest description length, and
//! * scans the sequence once, growing a pattern while the next transition
//!   probability stays at or above `theta`.
//!
//! Probabilities that must be exact (`c / n`, residual mass split evenly) are
//! formed from integer counts with a single division.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sql_template::{digest, SqlId, SqlTemplate};

pub const DEFAULT_THETA: f64 = 0.77;
pub const DEFAULT_MAX_ORD: usize = 1;

/// Ordered SQL ids of one business group plus its sorted alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySequence {
    symbols: Vec<SqlId>,
    alphabet: Vec<SqlId>,
}

impl QuerySequence {
    pub fn new(symbols: Vec<SqlId>) -> Self {
        let mut alphabet = symbols.clone();
        alphabet.sort_unstable();
        alphabet.dedup();
        Self { symbols, alphabet }
    }

    pub fn symbols(&self) -> &[SqlId] {
        &self.symbols
    }

    pub fn alphabet(&self) -> &[SqlId] {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

impl FromIterator<SqlId> for QuerySequence {
    fn from_iter<I: IntoIterator<Item = SqlId>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone)]
struct Node {
    count: u64,
    children: BTreeMap<SqlId, usize>,
}

/// Count tree over contiguous windows of the sequence. The root (level 0)
/// holds `|S|`; a node at level `k` holds the occurrence count of the length-`k`
/// window spelled by the path to it.
#[derive(Debug, Clone)]
pub struct PrefixTree {
    nodes: Vec<Node>,
    max_ord: usize,
    alphabet: Vec<SqlId>,
}

pub fn build_prefix_tree(sequence: &QuerySequence, max_ord: usize) -> Result<PrefixTree> {
    if sequence.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut nodes = vec![Node {
        count: sequence.len() as u64,
        children: BTreeMap::new(),
    }];
    let symbols = sequence.symbols();
    for start in 0..symbols.len() {
        let mut cur = 0;
        for &sym in symbols[start..].iter().take(max_ord + 1) {
            let next = match nodes[cur].children.get(&sym) {
                Some(&idx) => idx,
                None => {
                    nodes.push(Node {
                        count: 0,
                        children: BTreeMap::new(),
                    });
                    let idx = nodes.len() - 1;
                    nodes[cur].children.insert(sym, idx);
                    idx
                }
            };
            nodes[next].count += 1;
            cur = next;
        }
    }
    Ok(PrefixTree {
        nodes,
        max_ord,
        alphabet: sequence.alphabet().to_vec(),
    })
}

impl PrefixTree {
    pub fn max_ord(&self) -> usize {
        self.max_ord
    }

    pub fn alphabet(&self) -> &[SqlId] {
        &self.alphabet
    }

    /// Number of nodes including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn find(&self, window: &[SqlId]) -> Option<usize> {
        window
            .iter()
            .try_fold(0, |cur, sym| self.nodes[cur].children.get(sym).copied())
    }

    /// Occurrence count of `window`; zero when absent or pruned. The empty
    /// window yields `|S|`.
    pub fn count(&self, window: &[SqlId]) -> u64 {
        self.find(window).map_or(0, |idx| self.nodes[idx].count)
    }

    pub fn contains(&self, window: &[SqlId]) -> bool {
        self.find(window).is_some()
    }

    /// All windows stored at `level`, in lexicographic id order, with counts.
    pub fn level(&self, level: usize) -> Vec<(Vec<SqlId>, u64)> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.collect_level(0, level, &mut path, &mut out);
        out
    }

    fn collect_level(
        &self,
        node: usize,
        remaining: usize,
        path: &mut Vec<SqlId>,
        out: &mut Vec<(Vec<SqlId>, u64)>,
    ) {
        if remaining == 0 {
            out.push((path.clone(), self.nodes[node].count));
            return;
        }
        for (&sym, &child) in &self.nodes[node].children {
            path.push(sym);
            self.collect_level(child, remaining - 1, path, out);
            path.pop();
        }
    }

    /// Sum of the children's counts of `window`.
    pub fn children_total(&self, window: &[SqlId]) -> u64 {
        self.find(window).map_or(0, |idx| {
            self.nodes[idx]
                .children
                .values()
                .map(|&c| self.nodes[c].count)
                .sum()
        })
    }

    /// Drop every subtree whose count is below `min_count`. With the default
    /// of 1 nothing is removed.
    pub fn prune(&mut self, min_count: u64) {
        let mut stack = vec![0];
        while let Some(idx) = stack.pop() {
            let keep: BTreeMap<SqlId, usize> = self.nodes[idx]
                .children
                .iter()
                .filter(|(_, &c)| self.nodes[c].count >= min_count)
                .map(|(&s, &c)| (s, c))
                .collect();
            stack.extend(keep.values().copied());
            self.nodes[idx].children = keep;
        }
    }
}

/// One smoothed transition row, aligned with the model alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub context: Vec<SqlId>,
    pub probabilities: Vec<f64>,
    /// Entries whose raw probability reached `tau`.
    pub kept: Vec<bool>,
}

/// Markov model of a fixed order with smoothed rows for every observed
/// context of length `0..=ord`. Shorter contexts serve as back-off when a
/// pattern is still shorter than the order.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    pub ord: usize,
    pub tau: f64,
    pub alphabet: Vec<SqlId>,
    /// Empirical unigram distribution, used for the first factor of the
    /// chain probability.
    pub initial: Vec<f64>,
    rows: HashMap<Vec<SqlId>, TransitionRow>,
    index: HashMap<SqlId, usize>,
}

/// Smoothed distribution following `context`.
///
/// Entries with raw probability `>= tau` keep it; the residual mass is shared
/// evenly by the rest of the alphabet. If nothing reaches `tau` the row is
/// uniform.
pub fn smoothed_row(tree: &PrefixTree, context: &[SqlId]) -> Result<TransitionRow> {
    let denom = tree.count(context);
    if denom == 0 || context.len() > tree.max_ord {
        return Err(Error::UnknownContext);
    }
    let n = tree.alphabet.len() as u64;
    let mut window = context.to_vec();
    let counts: Vec<u64> = tree
        .alphabet
        .iter()
        .map(|&q| {
            window.push(q);
            let c = tree.count(&window);
            window.pop();
            c
        })
        .collect();
    // raw = c / denom >= 1 / n
    let kept: Vec<bool> = counts.iter().map(|&c| c * n >= denom).collect();
    let kept_total: u64 = counts
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(&c, _)| c)
        .sum();
    let kept_count = kept.iter().filter(|&&k| k).count() as u64;
    let rest = n - kept_count;

    let probabilities = if kept_count == 0 {
        vec![1.0 / n as f64; n as usize]
    } else {
        // every entry kept implies the counts already sum to denom
        let residual = if rest == 0 {
            0.0
        } else {
            (denom - kept_total) as f64 / (denom * rest) as f64
        };
        counts
            .iter()
            .zip(&kept)
            .map(|(&c, &k)| if k { c as f64 / denom as f64 } else { residual })
            .collect()
    };
    Ok(TransitionRow {
        context: context.to_vec(),
        probabilities,
        kept,
    })
}

/// Build the order-`ord` model from a prefix tree.
pub fn smoothed_transitions(tree: &PrefixTree, ord: usize) -> Result<MarkovModel> {
    if ord > tree.max_ord {
        return Err(Error::InvalidModel(format!(
            "order {ord} exceeds tree max_ord {}",
            tree.max_ord
        )));
    }
    let mut rows = HashMap::new();
    for level in 0..=ord {
        for (context, _) in tree.level(level) {
            let row = smoothed_row(tree, &context)?;
            rows.insert(context, row);
        }
    }
    let total = tree.count(&[]) as f64;
    let initial = tree
        .alphabet
        .iter()
        .map(|&q| tree.count(&[q]) as f64 / total)
        .collect();
    Ok(MarkovModel::assemble(
        ord,
        tree.alphabet.clone(),
        rows,
        initial,
    ))
}

impl MarkovModel {
    fn assemble(
        ord: usize,
        alphabet: Vec<SqlId>,
        rows: HashMap<Vec<SqlId>, TransitionRow>,
        initial: Vec<f64>,
    ) -> Self {
        let index = alphabet.iter().enumerate().map(|(i, &q)| (q, i)).collect();
        Self {
            ord,
            tau: 1.0 / alphabet.len() as f64,
            alphabet,
            initial,
            rows,
            index,
        }
    }

    /// Build a model from explicit rows. Every row must be a distribution
    /// over `alphabet`; contexts may have any length up to `ord`. A `None`
    /// initial distribution means uniform.
    pub fn from_rows(
        ord: usize,
        alphabet: Vec<SqlId>,
        rows: Vec<(Vec<SqlId>, Vec<f64>)>,
        initial: Option<Vec<f64>>,
    ) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::EmptySequence);
        }
        let n = alphabet.len();
        let tau = 1.0 / n as f64;
        let check = |what: &str, p: &[f64]| -> Result<()> {
            if p.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: p.len(),
                });
            }
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&x| x.is_nan() || x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("{what} is not a distribution")));
            }
            Ok(())
        };
        let initial = initial.unwrap_or_else(|| vec![tau; n]);
        check("initial", &initial)?;
        let mut map = HashMap::new();
        for (context, probabilities) in rows {
            if context.len() > ord {
                return Err(Error::InvalidModel("context longer than order".into()));
            }
            check("row", &probabilities)?;
            let kept = probabilities.iter().map(|&p| p >= tau).collect();
            map.insert(
                context.clone(),
                TransitionRow {
                    context,
                    probabilities,
                    kept,
                },
            );
        }
        Ok(Self::assemble(ord, alphabet, map, initial))
    }

    /// Rows whose context has exactly `ord` symbols, sorted by context.
    pub fn rows(&self) -> Vec<&TransitionRow> {
        let mut rows: Vec<&TransitionRow> = self
            .rows
            .values()
            .filter(|r| r.context.len() == self.ord)
            .collect();
        rows.sort_by(|a, b| a.context.cmp(&b.context));
        rows
    }

    /// Rows of every context length, including back-off rows.
    pub fn all_rows(&self) -> impl Iterator<Item = &TransitionRow> {
        self.rows.values()
    }

    pub fn row(&self, context: &[SqlId]) -> Option<&TransitionRow> {
        self.rows.get(context)
    }

    /// Number of full-order entries whose raw probability reached `tau`.
    pub fn kept_entries(&self) -> usize {
        self.rows
            .values()
            .filter(|r| r.context.len() == self.ord)
            .map(|r| r.kept.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn initial_probability(&self, q: SqlId) -> f64 {
        self.index.get(&q).map_or(0.0, |&i| self.initial[i])
    }

    /// P(next | context) using the last `min(|context|, ord)` symbols and
    /// backing off to shorter contexts when a context was never observed.
    pub fn probability(&self, context: &[SqlId], next: SqlId) -> f64 {
        let Some(&col) = self.index.get(&next) else {
            return 0.0;
        };
        let mut suffix = &context[context.len().saturating_sub(self.ord)..];
        loop {
            if let Some(row) = self.rows.get(suffix) {
                return row.probabilities[col];
            }
            if suffix.is_empty() {
                return self.tau;
            }
            suffix = &suffix[1..];
        }
    }

    /// log2 P(S | M): initial unigram factor times the chain of transitions.
    pub fn chain_log2_probability(&self, sequence: &[SqlId]) -> f64 {
        let Some(&first) = sequence.first() else {
            return 0.0;
        };
        let mut logp = self.initial_probability(first).log2();
        for i in 1..sequence.len() {
            let ctx = &sequence[i.saturating_sub(self.ord)..i];
            logp += self.probability(ctx, sequence[i]).log2();
        }
        logp
    }
}

/// Terms of the description length of a sequence under a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdlCost {
    pub ord: usize,
    /// Full-order entries at or above `tau`.
    pub kept_entries: usize,
    pub model_bits: f64,
    pub data_bits: f64,
    pub total: f64,
}

fn log2_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        x.log2()
    } else {
        0.0
    }
}

/// Description length in bits:
/// `2(log ord + log m + 1) + m((ord+1) log|set(S)| + 2 log|S|) - log P(S|M)`.
/// `log 0` terms (ord = 0, or no entry reaching tau) count as zero.
pub fn description_length(model: &MarkovModel, sequence: &QuerySequence) -> MdlCost {
    let m = model.kept_entries() as f64;
    let ord = model.ord as f64;
    let header = 2.0 * (log2_or_zero(ord) + log2_or_zero(m) + 1.0);
    let per_entry = (ord + 1.0) * (sequence.alphabet().len() as f64).log2()
        + 2.0 * (sequence.len() as f64).log2();
    let model_bits = header + m * per_entry;
    let data_bits = -model.chain_log2_probability(sequence.symbols());
    MdlCost {
        ord: model.ord,
        kept_entries: model.kept_entries(),
        model_bits,
        data_bits,
        total: model_bits + data_bits,
    }
}

pub fn mdl_cost(sequence: &QuerySequence, ord: usize) -> Result<f64> {
    let tree = build_prefix_tree(sequence, ord)?;
    let model = smoothed_transitions(&tree, ord)?;
    Ok(description_length(&model, sequence).total)
}

#[derive(Debug, Clone)]
pub struct OrderSelection {
    pub ord: usize,
    pub model: MarkovModel,
    /// Cost breakdown for every candidate order `0..=max_ord`.
    pub costs: Vec<MdlCost>,
}

pub fn select_order(sequence: &QuerySequence, max_ord: usize) -> Result<OrderSelection> {
    select_order_pruned(sequence, max_ord, 1)
}

/// Order selection over a tree pruned to nodes with count `>= min_count`.
pub fn select_order_pruned(
    sequence: &QuerySequence,
    max_ord: usize,
    min_count: u64,
) -> Result<OrderSelection> {
    let mut tree = build_prefix_tree(sequence, max_ord)?;
    if min_count > 1 {
        tree.prune(min_count);
    }
    let mut best: Option<(MdlCost, MarkovModel)> = None;
    let mut costs = Vec::with_capacity(max_ord + 1);
    for ord in 0..=max_ord {
        let model = smoothed_transitions(&tree, ord)?;
        let cost = description_length(&model, sequence);
        costs.push(cost);
        // strict comparison keeps the smaller order on ties
        if best.as_ref().is_none_or(|(b, _)| cost.total < b.total) {
            best = Some((cost, model));
        }
    }
    let (cost, model) = best.expect("at least one order evaluated");
    Ok(OrderSelection {
        ord: cost.ord,
        model,
        costs,
    })
}

/// A mined pattern aggregated over all of its occurrences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub sequence: Vec<SqlId>,
    pub support: u64,
    /// Product of the transition probabilities along the pattern (1 for a
    /// single query).
    pub probability: f64,
}

/// One emitted pattern occurrence `S[start..start + len]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternInstance {
    pub start: usize,
    pub len: usize,
    pub probability: f64,
}

/// A single extend-or-stop decision of the scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanStep {
    /// Start of the pattern being grown.
    pub start: usize,
    /// Position of the candidate next query.
    pub position: usize,
    pub transition: f64,
    /// Probability the pattern would have if extended.
    pub candidate_probability: f64,
    pub extended: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub instances: Vec<PatternInstance>,
    pub steps: Vec<ScanStep>,
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidValue {
            field: "theta".into(),
            reason: format!("{theta} not in (0, 1]"),
        })
    }
}

/// Left-to-right scan partitioning the sequence into pattern occurrences.
pub fn scan(sequence: &[SqlId], model: &MarkovModel, theta: f64) -> Result<Scan> {
    check_theta(theta)?;
    let mut out = Scan::default();
    let mut start = 0;
    while start < sequence.len() {
        let mut probability = 1.0;
        let mut end = start + 1;
        while end < sequence.len() {
            let ctx = &sequence[start.max(end.saturating_sub(model.ord))..end];
            let transition = model.probability(ctx, sequence[end]);
            let extended = transition >= theta;
            out.steps.push(ScanStep {
                start,
                position: end,
                transition,
                candidate_probability: probability * transition,
                extended,
            });
            if !extended {
                break;
            }
            probability *= transition;
            end += 1;
        }
        out.instances.push(PatternInstance {
            start,
            len: end - start,
            probability,
        });
        start = end;
    }
    Ok(out)
}

/// Patterns aggregated by identical sequence, in order of first occurrence.
pub fn discover_patterns(
    sequence: &QuerySequence,
    model: &MarkovModel,
    theta: f64,
) -> Result<Vec<Pattern>> {
    let symbols = sequence.symbols();
    let scan = scan(symbols, model, theta)?;
    let mut patterns: Vec<Pattern> = Vec::new();
    let mut seen: HashMap<&[SqlId], usize> = HashMap::new();
    for inst in &scan.instances {
        let seq = &symbols[inst.start..inst.start + inst.len];
        match seen.get(seq) {
            Some(&i) => patterns[i].support += 1,
            None => {
                seen.insert(seq, patterns.len());
                patterns.push(Pattern {
                    sequence: seq.to_vec(),
                    support: 1,
                    probability: inst.probability,
                });
            }
        }
    }
    Ok(patterns)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub theta: f64,
    pub max_ord: usize,
    /// Prefix-tree pruning threshold; 1 keeps every node.
    pub min_count: u64,
    /// Mine groups on separate threads.
    pub parallel: bool,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            max_ord: DEFAULT_MAX_ORD,
            min_count: 1,
            parallel: false,
        }
    }
}

/// A query already assigned to a business group.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedQuery {
    pub group: String,
    pub timestamp: i64,
    pub template: SqlTemplate,
}

impl ClassifiedQuery {
    pub fn from_sql(group: impl Into<String>, timestamp: i64, sql: &str) -> Result<Self> {
        Ok(Self {
            group: group.into(),
            timestamp,
            template: digest(sql)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedPattern {
    pub sequence: Vec<SqlId>,
    pub templates: Vec<SqlTemplate>,
    pub support: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPatterns {
    pub group: String,
    pub ord: usize,
    pub theta: f64,
    pub sequence_len: usize,
    pub alphabet_size: usize,
    pub costs: Vec<MdlCost>,
    pub patterns: Vec<MinedPattern>,
}

pub fn mine_sequence(
    group: &str,
    sequence: &QuerySequence,
    templates: &HashMap<SqlId, SqlTemplate>,
    config: &MineConfig,
) -> Result<GroupPatterns> {
    let selection = select_order_pruned(sequence, config.max_ord, config.min_count)?;
    let patterns = discover_patterns(sequence, &selection.model, config.theta)?
        .into_iter()
        .map(|p| MinedPattern {
            templates: p.sequence.iter().map(|id| templates[id].clone()).collect(),
            sequence: p.sequence,
            support: p.support,
            probability: p.probability,
        })
        .collect();
    Ok(GroupPatterns {
        group: group.to_string(),
        ord: selection.ord,
        theta: config.theta,
        sequence_len: sequence.len(),
        alphabet_size: sequence.alphabet().len(),
        costs: selection.costs,
        patterns,
    })
}

/// Mine every group independently. Each group's queries are ordered by
/// timestamp (stable for equal timestamps); output is keyed by group id.
pub fn mine(
    queries: &[ClassifiedQuery],
    config: &MineConfig,
) -> Result<BTreeMap<String, GroupPatterns>> {
    check_theta(config.theta)?;
    let mut groups: BTreeMap<&str, Vec<&ClassifiedQuery>> = BTreeMap::new();
    let mut templates: HashMap<SqlId, SqlTemplate> = HashMap::new();
    for q in queries {
        groups.entry(q.group.as_str()).or_default().push(q);
        templates
            .entry(q.template.sql_id())
            .or_insert_with(|| q.template.clone());
    }
    let sequences: Vec<(&str, QuerySequence)> = groups
        .into_iter()
        .map(|(group, mut members)| {
            members.sort_by_key(|q| q.timestamp);
            (group, members.iter().map(|q| q.template.sql_id()).collect())
        })
        .collect();

    let results: Vec<Result<GroupPatterns>> = if config.parallel && sequences.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = sequences
                .iter()
                .map(|(g, s)| scope.spawn(|| mine_sequence(g, s, &templates, config)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("mining thread panicked"))
                .collect()
        })
    } else {
        sequences
            .iter()
            .map(|(g, s)| mine_sequence(g, s, &templates, config))
            .collect()
    };
    results
        .into_iter()
        .map(|r| r.map(|g| (g.group.clone(), g)))
        .collect()
}
