//! Query-log records and the local retention-bounded record store.
//!
//! Records arrive as one JSON object per line using the execution-feature
//! field names below. The store is a single `records.jsonl` file inside the
//! store directory; appends go to the end of the file and a purge rewrites it.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_RETENTION_DAYS: u32 = 3;
pub const RECORDS_FILE: &str = "records.jsonl";
const DAY_MS: i64 = 86_400_000;

/// One executed query with its execution statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogRecord {
    pub lock_wait_time: f64,
    pub logical_read: u64,
    pub rows_examined: u64,
    pub rows_returned: u64,
    pub rows_updated: u64,
    pub rt: f64,
    /// Epoch milliseconds.
    pub timestamp: i64,
    pub physical_sync_read: u64,
    pub database: String,
    pub error_code: String,
    pub origin_host: String,
    pub sql_type: String,
    pub sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_label: Option<bool>,
}

fn missing(field: &str) -> Error {
    Error::MissingField(field.to_string())
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidValue {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn get<'a>(obj: &'a Map<String, Value>, field: &str) -> Result<&'a Value> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(missing(field)),
        Some(v) => Ok(v),
    }
}

fn count(obj: &Map<String, Value>, field: &str) -> Result<u64> {
    let v = get(obj, field)?;
    if let Some(n) = v.as_u64() {
        return Ok(n);
    }
    match v.as_f64() {
        Some(x) if x < 0.0 => Err(invalid(field, format!("negative count {x}"))),
        Some(x) if x.fract() == 0.0 && x.is_finite() => Ok(x as u64),
        _ => Err(invalid(
            field,
            format!("expected a non-negative integer, got {v}"),
        )),
    }
}

fn seconds(obj: &Map<String, Value>, field: &str) -> Result<f64> {
    match get(obj, field)?.as_f64() {
        Some(x) if x.is_finite() && x >= 0.0 => Ok(x),
        Some(x) => Err(invalid(
            field,
            format!("expected non-negative seconds, got {x}"),
        )),
        None => Err(invalid(field, "expected a number")),
    }
}

fn text(obj: &Map<String, Value>, field: &str) -> Result<String> {
    match get(obj, field)? {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        v => Err(invalid(field, format!("expected a string, got {v}"))),
    }
}

fn timestamp(obj: &Map<String, Value>) -> Result<i64> {
    let v = get(obj, "timestamp")?;
    if let Some(ts) = v.as_i64() {
        return if ts >= 0 {
            Ok(ts)
        } else {
            Err(invalid("timestamp", "negative epoch milliseconds"))
        };
    }
    match v.as_f64() {
        Some(x) if x.is_finite() && x >= 0.0 && x.fract() == 0.0 => Ok(x as i64),
        _ => Err(invalid(
            "timestamp",
            format!("expected epoch milliseconds, got {v}"),
        )),
    }
}

/// Parse one serialized record. Unknown fields are ignored.
pub fn parse_record(line: &str) -> Result<QueryLogRecord> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| Error::MalformedLine(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(Error::MalformedLine("expected a JSON object".into()));
    };
    let sql = text(&obj, "sql")?;
    if sql.trim().is_empty() {
        return Err(missing("sql"));
    }
    let group_label = match obj.get("group_label") {
        None | Some(Value::Null) => None,
        Some(_) => Some(text(&obj, "group_label")?),
    };
    let no_label = match obj.get("no_label") {
        None | Some(Value::Null) => None,
        Some(Value::Bool(b)) => Some(*b),
        Some(v) => return Err(invalid("no_label", format!("expected a boolean, got {v}"))),
    };
    Ok(QueryLogRecord {
        lock_wait_time: seconds(&obj, "lock_wait_time")?,
        logical_read: count(&obj, "logical_read")?,
        rows_examined: count(&obj, "rows_examined")?,
        rows_returned: count(&obj, "rows_returned")?,
        rows_updated: count(&obj, "rows_updated")?,
        rt: seconds(&obj, "rt")?,
        timestamp: timestamp(&obj)?,
        physical_sync_read: count(&obj, "physical_sync_read")?,
        database: text(&obj, "database")?,
        error_code: text(&obj, "error_code")?,
        origin_host: text(&obj, "origin_host")?,
        sql_type: text(&obj, "sql_type")?,
        sql,
        group_label,
        no_label,
    })
}

impl QueryLogRecord {
    /// Serialize to a single line (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }
}

/// Append-only record store with time-based retention.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    records: Vec<QueryLogRecord>,
}

fn unavailable(path: &Path, source: std::io::Error) -> Error {
    Error::StoreUnavailable {
        path: path.display().to_string(),
        source,
    }
}

impl RecordStore {
    /// Open (creating if needed) the store in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| unavailable(dir, e))?;
        let path = dir.join(RECORDS_FILE);
        let mut records = Vec::new();
        match File::open(&path) {
            Ok(file) => {
                for (n, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|e| unavailable(&path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record = parse_record(&line).map_err(|e| {
                        Error::CorruptState(format!("{}:{}: {e}", path.display(), n + 1))
                    })?;
                    records.push(record);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(unavailable(&path, e)),
        }
        Ok(Self { path, records })
    }

    pub fn records(&self) -> &[QueryLogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append_lines(&self, records: &[QueryLogRecord]) -> Result<()> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| unavailable(&self.path, e))?;
        let mut w = BufWriter::new(file);
        for r in records {
            writeln!(w, "{}", r.to_line()).map_err(|e| unavailable(&self.path, e))?;
        }
        w.flush().map_err(|e| unavailable(&self.path, e))
    }

    fn rewrite(&self) -> Result<()> {
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let file = File::create(&tmp).map_err(|e| unavailable(&tmp, e))?;
            let mut w = BufWriter::new(file);
            for r in &self.records {
                writeln!(w, "{}", r.to_line()).map_err(|e| unavailable(&tmp, e))?;
            }
            w.flush().map_err(|e| unavailable(&tmp, e))?;
        }
        fs::rename(&tmp, &self.path).map_err(|e| unavailable(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub appended: usize,
    pub skipped: usize,
    pub purged: usize,
}

/// Append every parseable line of `source` to `store`, then purge records
/// older than `retention_days` before the newest stored timestamp.
///
/// Lines that fail to parse are counted in `skipped`; blank lines are ignored.
pub fn ingest_stream<I, S>(
    source: I,
    store: &mut RecordStore,
    retention_days: u32,
) -> Result<IngestReport>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if retention_days == 0 {
        return Err(invalid("retention_days", "must be at least 1"));
    }
    let mut report = IngestReport::default();
    let mut fresh = Vec::new();
    for line in source {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line) {
            Ok(r) => fresh.push(r),
            Err(_) => report.skipped += 1,
        }
    }
    if fresh.is_empty() {
        return Ok(report);
    }
    report.appended = fresh.len();
    store.records.extend(fresh);

    let newest = store.records.iter().map(|r| r.timestamp).max().unwrap_or(0);
    let cutoff = newest.saturating_sub(i64::from(retention_days) * DAY_MS);
    let before = store.records.len();
    store.records.retain(|r| r.timestamp >= cutoff);
    report.purged = before - store.records.len();

    if report.purged > 0 {
        store.rewrite()?;
    } else {
        let start = store.records.len() - report.appended;
        store.append_lines(&store.records[start..])?;
    }
    Ok(report)
}

/// Read all lines from a reader and ingest them.
pub fn ingest_reader(
    reader: impl BufRead,
    store: &mut RecordStore,
    retention_days: u32,
) -> Result<IngestReport> {
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    ingest_stream(lines, store, retention_days)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample(ts: i64, sql: &str) -> QueryLogRecord {
        QueryLogRecord {
            lock_wait_time: 0.001,
            logical_read: 12,
            rows_examined: 40,
            rows_returned: 1,
            rows_updated: 0,
            rt: 0.004,
            timestamp: ts,
            physical_sync_read: 0,
            database: "shop".into(),
            error_code: "0".into(),
            origin_host: "10.0.0.7".into(),
            sql_type: "SELECT".into(),
            sql: sql.into(),
            group_label: None,
            no_label: None,
        }
    }

    const FULL: &str = r#"{"lock_wait_time":0.5,"logical_read":10,"rows_examined":100,"rows_returned":3,"rows_updated":0,"rt":0.25,"timestamp":1700000000000,"physical_sync_read":2,"database":"db1","error_code":"0","origin_host":"10.1.1.1","sql_type":"SELECT","sql":"SELECT * FROM t WHERE id = 1"}"#;

    #[test]
    fn parses_all_fields() {
        let r = parse_record(FULL).unwrap();
        assert_eq!(r.lock_wait_time, 0.5);
        assert_eq!(r.logical_read, 10);
        assert_eq!(r.rows_examined, 100);
        assert_eq!(r.rows_returned, 3);
        assert_eq!(r.rows_updated, 0);
        assert_eq!(r.rt, 0.25);
        assert_eq!(r.timestamp, 1_700_000_000_000);
        assert_eq!(r.physical_sync_read, 2);
        assert_eq!(r.database, "db1");
        assert_eq!(r.error_code, "0");
        assert_eq!(r.origin_host, "10.1.1.1");
        assert_eq!(r.sql_type, "SELECT");
        assert_eq!(r.sql, "SELECT * FROM t WHERE id = 1");
        assert_eq!(r.group_label, None);
        assert_eq!(r.no_label, None);
    }

    #[test]
    fn extra_fields_ignored_and_optionals_read() {
        let line = FULL.replace(
            "}",
            r#","region":"cn-hz","group_label":"checkout","no_label":true}"#,
        );
        let r = parse_record(&line).unwrap();
        assert_eq!(r.group_label.as_deref(), Some("checkout"));
        assert_eq!(r.no_label, Some(true));
    }

    #[test]
    fn parse_errors() {
        let no_sql = FULL.replace(r#","sql":"SELECT * FROM t WHERE id = 1""#, "");
        assert!(matches!(parse_record(&no_sql), Err(Error::MissingField(f)) if f == "sql"));
        assert!(matches!(
            parse_record("not json"),
            Err(Error::MalformedLine(_))
        ));
        assert!(matches!(
            parse_record("[1,2]"),
            Err(Error::MalformedLine(_))
        ));
        let negative = FULL.replace(r#""rows_examined":100"#, r#""rows_examined":-4"#);
        assert!(
            matches!(parse_record(&negative), Err(Error::InvalidValue { field, .. }) if field == "rows_examined")
        );
        let bad_ts = FULL.replace("1700000000000", r#""yesterday""#);
        assert!(
            matches!(parse_record(&bad_ts), Err(Error::InvalidValue { field, .. }) if field == "timestamp")
        );
        let neg_rt = FULL.replace(r#""rt":0.25"#, r#""rt":-1"#);
        assert!(
            matches!(parse_record(&neg_rt), Err(Error::InvalidValue { field, .. }) if field == "rt")
        );
    }

    #[test]
    fn ingest_appends_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        let lines: Vec<String> = (0..3)
            .map(|i| sample(i, &format!("SELECT {i}")).to_line())
            .collect();
        let report = ingest_stream(&lines, &mut store, 3).unwrap();
        assert_eq!(report.appended, 3);
        assert_eq!(store.len(), 3);
        let reopened = RecordStore::open(dir.path()).unwrap();
        let sqls: Vec<&str> = reopened.records().iter().map(|r| r.sql.as_str()).collect();
        assert_eq!(sqls, ["SELECT 0", "SELECT 1", "SELECT 2"]);
    }

    #[test]
    fn empty_source_leaves_store_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        let report = ingest_stream(Vec::<String>::new(), &mut store, 3).unwrap();
        assert_eq!(report, IngestReport::default());
        assert!(store.is_empty());
        assert!(!dir.path().join(RECORDS_FILE).exists());
    }

    #[test]
    fn malformed_lines_are_counted_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        let lines = vec![
            sample(1, "SELECT 1").to_line(),
            "garbage".into(),
            String::new(),
            sample(2, "SELECT 2").to_line(),
        ];
        let report = ingest_stream(&lines, &mut store, 3).unwrap();
        assert_eq!((report.appended, report.skipped), (2, 1));
    }

    #[test]
    fn retention_purges_old_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        ingest_stream([sample(0, "SELECT 1").to_line()], &mut store, 3).unwrap();
        let report =
            ingest_stream([sample(5 * DAY_MS, "SELECT 2").to_line()], &mut store, 3).unwrap();
        assert_eq!(report.purged, 1);
        assert_eq!(store.len(), 1);
        assert_eq!(
            RecordStore::open(dir.path()).unwrap().records()[0].timestamp,
            5 * DAY_MS
        );
        assert!(ingest_stream([sample(0, "x").to_line()], &mut store, 0).is_err());
    }

    fn record_strategy() -> impl Strategy<Value = QueryLogRecord> {
        (
            (
                0.0f64..1e3,
                any::<u32>(),
                any::<u32>(),
                any::<u32>(),
                any::<u32>(),
                0.0f64..1e3,
            ),
            (
                0i64..4_000_000_000_000,
                any::<u32>(),
                "[a-z_]{1,8}",
                "[0-9]{1,4}",
                "[0-9.]{1,15}",
                "SELECT|INSERT|UPDATE",
            ),
            (
                "[ -~]{1,40}",
                proptest::option::of("[a-z]{1,6}"),
                proptest::option::of(any::<bool>()),
            ),
        )
            .prop_filter("sql non-empty", |(_, _, (sql, _, _))| {
                !sql.trim().is_empty()
            })
            .prop_map(
                |((lw, lr, re, rr, ru, rt), (ts, psr, db, ec, host, kind), (sql, gl, nl))| {
                    QueryLogRecord {
                        lock_wait_time: lw,
                        logical_read: u64::from(lr),
                        rows_examined: u64::from(re),
                        rows_returned: u64::from(rr),
                        rows_updated: u64::from(ru),
                        rt,
                        timestamp: ts,
                        physical_sync_read: u64::from(psr),
                        database: db,
                        error_code: ec,
                        origin_host: host,
                        sql_type: kind,
                        sql,
                        group_label: gl,
                        no_label: nl,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(r in record_strategy()) {
            prop_assert_eq!(parse_record(&r.to_line()).unwrap(), r);
        }

        #[test]
        fn retention_window_holds(days in 1u32..5, stamps in prop::collection::vec(0i64..10 * DAY_MS, 1..30)) {
            let dir = tempfile::tempdir().unwrap();
            let mut store = RecordStore::open(dir.path()).unwrap();
            for chunk in stamps.chunks(7) {
                let lines: Vec<String> = chunk.iter().map(|&t| sample(t, "SELECT 1").to_line()).collect();
                ingest_stream(&lines, &mut store, days).unwrap();
            }
            let newest = store.records().iter().map(|r| r.timestamp).max().unwrap();
            prop_assert!(store.records().iter().all(|r| r.timestamp >= newest - i64::from(days) * DAY_MS));
            let reopened = RecordStore::open(dir.path()).unwrap();
            prop_assert_eq!(reopened.records(), store.records());
        }
    }
}
