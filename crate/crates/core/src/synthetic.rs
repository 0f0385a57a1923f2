//! Seeded synthetic workloads with planted patterns.
//!
//! Each business repeats a fixed two-query bigram followed by one to three
//! noise queries drawn from its own noise pool. The businesses use disjoint
//! tables, databases and hosts, and their streams are interleaved one query
//! at a time by timestamp. Mined per business, the bigram comes back with
//! support equal to the repetition count; mined as one stream it does not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::log_ingest::QueryLogRecord;
use crate::sql_template::{digest, SqlId};

pub const START_MS: i64 = 1_700_000_000_000;
pub const STEP_MS: i64 = 1_000;

struct Business {
    name: &'static str,
    database: &'static str,
    host: &'static str,
    planted: [&'static str; 2],
    noise: [&'static str; 4],
}

const BUSINESSES: [Business; 2] = [
    Business {
        name: "billing",
        database: "bank",
        host: "10.0.1.15",
        planted: [
            "SELECT balance FROM accounts WHERE user_id = {n}",
            "UPDATE accounts SET balance = balance - {n} WHERE user_id = {m}",
        ],
        noise: [
            "SELECT * FROM invoices WHERE id = {n}",
            "INSERT INTO ledger (user_id, amount) VALUES ({n}, {m})",
            "SELECT count(*) FROM refunds WHERE user_id = {n}",
            "SELECT rate FROM currencies WHERE code = 'C{n}'",
        ],
    },
    Business {
        name: "catalog",
        database: "shop",
        host: "10.0.2.40",
        planted: [
            "SELECT name, price FROM items WHERE sku = {n}",
            "INSERT INTO carts (sku, qty) VALUES ({n}, {m})",
        ],
        noise: [
            "SELECT * FROM reviews WHERE sku = {n} LIMIT 10",
            "SELECT stock FROM warehouses WHERE region = {n}",
            "UPDATE sessions SET seen = {n} WHERE sid = {m}",
            "SELECT title FROM banners WHERE slot = {n}",
        ],
    },
];

#[derive(Debug, Clone)]
pub struct PlantedPattern {
    pub group: String,
    pub pattern: Vec<SqlId>,
    pub support: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorkload {
    /// Ordered by timestamp, labeled with the owning business.
    pub records: Vec<QueryLogRecord>,
    pub planted: Vec<PlantedPattern>,
}

fn fill(template: &str, rng: &mut ChaCha8Rng) -> String {
    template
        .replace("{n}", &rng.random_range(1..100_000u32).to_string())
        .replace("{m}", &rng.random_range(1..1_000u32).to_string())
}

fn business_sqls(b: &Business, reps: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for _ in 0..reps {
        out.push((fill(b.planted[0], rng), 0));
        out.push((fill(b.planted[1], rng), 1));
        for _ in 0..rng.random_range(1..=3) {
            let k = rng.random_range(0..b.noise.len());
            out.push((fill(b.noise[k], rng), 2 + k));
        }
    }
    out
}

fn record(
    b: &Business,
    sql: String,
    slot: usize,
    timestamp: i64,
    rng: &mut ChaCha8Rng,
) -> QueryLogRecord {
    let write = sql.starts_with("UPDATE") || sql.starts_with("INSERT");
    QueryLogRecord {
        lock_wait_time: rng.random_range(0.0..0.002),
        logical_read: rng.random_range(1..50) * (slot as u64 + 1),
        rows_examined: rng.random_range(1..500),
        rows_returned: if write { 0 } else { rng.random_range(1..20) },
        rows_updated: if write { rng.random_range(1..3) } else { 0 },
        rt: 0.001 * (slot as f64 + 1.0) + rng.random_range(0.0..0.0005),
        timestamp,
        physical_sync_read: rng.random_range(0..3),
        database: b.database.to_string(),
        error_code: "0".to_string(),
        origin_host: b.host.to_string(),
        sql_type: sql.split_whitespace().next().unwrap_or("").to_string(),
        sql,
        group_label: Some(b.name.to_string()),
        no_label: None,
    }
}

/// Two businesses, each repeating its planted bigram `reps` times.
pub fn interleaved_workload(reps: usize, seed: u64) -> SyntheticWorkload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streams: Vec<Vec<(String, usize)>> = BUSINESSES
        .iter()
        .map(|b| business_sqls(b, reps, &mut rng))
        .collect();
    let mut records = Vec::new();
    let longest = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut t = START_MS;
    for i in 0..longest {
        for (b, stream) in BUSINESSES.iter().zip(&streams) {
            if let Some((sql, slot)) = stream.get(i) {
                records.push(record(b, sql.clone(), *slot, t, &mut rng));
                t += STEP_MS;
            }
        }
    }
    let planted = BUSINESSES
        .iter()
        .map(|b| PlantedPattern {
            group: b.name.to_string(),
            pattern: b
                .planted
                .iter()
                .map(|sql| {
                    digest(&sql.replace("{n}", "1").replace("{m}", "1"))
                        .expect("valid SQL")
                        .sql_id()
                })
                .collect(),
            support: reps as u64,
        })
        .collect();
    SyntheticWorkload { records, planted }
}
