//! Execution feature vector X.
//!
//! Numeric features are standardized, long-tail features are replaced by a
//! decile bucket `1..=10`, zero-special features keep `0` as a reserved code,
//! and categorical features are one-hot encoded over the vocabulary seen at
//! fit time. The timestamp is not part of X.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log_ingest::QueryLogRecord;

/// Numeric columns in record order.
pub const NUMERIC_FEATURES: [&str; 7] = [
    "lock_wait_time",
    "logical_read",
    "rows_examined",
    "rows_returned",
    "rows_updated",
    "rt",
    "physical_sync_read",
];

pub const CATEGORICAL_FEATURES: [&str; 4] = ["database", "error_code", "origin_host", "sql_type"];

pub const BUCKETS: usize = 10;

pub fn numeric_value(record: &QueryLogRecord, feature: &str) -> Option<f64> {
    Some(match feature {
        "lock_wait_time" => record.lock_wait_time,
        "logical_read" => record.logical_read as f64,
        "rows_examined" => record.rows_examined as f64,
        "rows_returned" => record.rows_returned as f64,
        "rows_updated" => record.rows_updated as f64,
        "rt" => record.rt,
        "physical_sync_read" => record.physical_sync_read as f64,
        _ => return None,
    })
}

pub fn categorical_value<'a>(record: &'a QueryLogRecord, feature: &str) -> Option<&'a str> {
    Some(match feature {
        "database" => &record.database,
        "error_code" => &record.error_code,
        "origin_host" => &record.origin_host,
        "sql_type" => &record.sql_type,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub long_tail: Vec<String>,
    pub zero_special: Vec<String>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            long_tail: vec![
                "rows_examined".into(),
                "logical_read".into(),
                "physical_sync_read".into(),
            ],
            zero_special: vec!["rows_updated".into()],
        }
    }
}

impl FeatureConfig {
    fn validate(&self) -> Result<()> {
        for name in self.long_tail.iter().chain(&self.zero_special) {
            if !NUMERIC_FEATURES.contains(&name.as_str()) {
                return Err(Error::Config(format!("{name:?} is not a numeric feature")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NumericEncoding {
    Standardized {
        mean: f64,
        std: f64,
    },
    /// Nine non-decreasing cut points.
    Bucketized {
        cuts: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStat {
    pub name: String,
    pub zero_special: bool,
    pub encoding: NumericEncoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalStat {
    pub name: String,
    /// Sorted, duplicate-free.
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub numeric: Vec<NumericStat>,
    pub categorical: Vec<CategoricalStat>,
}

/// Where one feature lives inside X.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub feature: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecVector {
    pub values: Vec<f64>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Decile cut points: `cut_k` is the smallest value with at least `k/10` of
/// the data at or below it.
pub fn decile_cuts(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return vec![0.0; BUCKETS - 1];
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (1..BUCKETS)
        .map(|k| sorted[(k * n).div_ceil(BUCKETS) - 1])
        .collect()
}

/// Bucket label in `1..=10`.
pub fn bucket(cuts: &[f64], v: f64) -> u8 {
    1 + cuts.iter().filter(|&&c| c < v).count() as u8
}

pub fn fit_stats(records: &[QueryLogRecord], config: &FeatureConfig) -> Result<FeatureStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    config.validate()?;
    let numeric = NUMERIC_FEATURES
        .iter()
        .map(|&name| {
            let zero_special = config.zero_special.iter().any(|z| z == name);
            let values: Vec<f64> = records
                .iter()
                .map(|r| numeric_value(r, name).expect("known feature"))
                .filter(|&v| !(zero_special && v == 0.0))
                .collect();
            let encoding = if config.long_tail.iter().any(|l| l == name) {
                NumericEncoding::Bucketized {
                    cuts: decile_cuts(&values),
                }
            } else {
                let (mean, std) = mean_std(&values);
                NumericEncoding::Standardized { mean, std }
            };
            NumericStat {
                name: name.to_string(),
                zero_special,
                encoding,
            }
        })
        .collect();
    let categorical = CATEGORICAL_FEATURES
        .iter()
        .map(|&name| CategoricalStat {
            name: name.to_string(),
            vocabulary: records
                .iter()
                .map(|r| {
                    categorical_value(r, name)
                        .expect("known feature")
                        .to_string()
                })
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        })
        .collect();
    Ok(FeatureStats {
        numeric,
        categorical,
    })
}

impl FeatureStats {
    /// Check that the stats describe the known feature set consistently.
    pub fn validate(&self) -> Result<()> {
        let mismatch = |msg: String| Err(Error::StatsMismatch(msg));
        let names: Vec<&str> = self.numeric.iter().map(|s| s.name.as_str()).collect();
        if names != NUMERIC_FEATURES {
            return mismatch(format!("numeric features {names:?}"));
        }
        let names: Vec<&str> = self.categorical.iter().map(|s| s.name.as_str()).collect();
        if names != CATEGORICAL_FEATURES {
            return mismatch(format!("categorical features {names:?}"));
        }
        for stat in &self.numeric {
            match &stat.encoding {
                NumericEncoding::Standardized { mean, std } => {
                    if !mean.is_finite() || !std.is_finite() || *std < 0.0 {
                        return mismatch(format!("{}: mean {mean}, std {std}", stat.name));
                    }
                }
                NumericEncoding::Bucketized { cuts } => {
                    if cuts.len() != BUCKETS - 1 || cuts.windows(2).any(|w| w[0] > w[1]) {
                        return mismatch(format!("{}: cut points {cuts:?}", stat.name));
                    }
                }
            }
        }
        for stat in &self.categorical {
            if stat.vocabulary.windows(2).any(|w| w[0] >= w[1]) {
                return mismatch(format!("{}: vocabulary not sorted and unique", stat.name));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut start = 0;
        let mut out = Vec::new();
        for stat in &self.numeric {
            out.push(LayoutEntry {
                feature: stat.name.clone(),
                range: start..start + 1,
            });
            start += 1;
        }
        for stat in &self.categorical {
            let width = stat.vocabulary.len();
            out.push(LayoutEntry {
                feature: stat.name.clone(),
                range: start..start + width,
            });
            start += width;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.numeric.len()
            + self
                .categorical
                .iter()
                .map(|c| c.vocabulary.len())
                .sum::<usize>()
    }
}

pub fn encode(record: &QueryLogRecord, stats: &FeatureStats) -> Result<ExecVector> {
    stats.validate()?;
    let mut values = Vec::with_capacity(stats.dim());
    for stat in &stats.numeric {
        let v = numeric_value(record, &stat.name).expect("validated name");
        values.push(if stat.zero_special && v == 0.0 {
            0.0
        } else {
            match &stat.encoding {
                NumericEncoding::Standardized { mean, std } => {
                    if *std > 0.0 {
                        (v - mean) / std
                    } else {
                        0.0
                    }
                }
                NumericEncoding::Bucketized { cuts } => f64::from(bucket(cuts, v)),
            }
        });
    }
    for stat in &stats.categorical {
        let v = categorical_value(record, &stat.name).expect("validated name");
        let hit = stat.vocabulary.binary_search_by(|w| w.as_str().cmp(v)).ok();
        values.extend((0..stat.vocabulary.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
    }
    Ok(ExecVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(rt: f64, rows_examined: u64, rows_updated: u64, sql_type: &str) -> QueryLogRecord {
        QueryLogRecord {
            lock_wait_time: 0.0,
            logical_read: 3,
            rows_examined,
            rows_returned: 1,
            rows_updated,
            rt,
            timestamp: 0,
            physical_sync_read: 0,
            database: "db".into(),
            error_code: "0".into(),
            origin_host: "h1".into(),
            sql_type: sql_type.into(),
            sql: "SELECT 1".into(),
            group_label: None,
            no_label: None,
        }
    }

    fn rt_slot(stats: &FeatureStats) -> usize {
        stats
            .layout()
            .iter()
            .find(|e| e.feature == "rt")
            .unwrap()
            .range
            .start
    }

    #[test]
    fn population_std() {
        let (mean, std) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(mean, 2.0);
        assert!((std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((std - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn constant_feature_encodes_to_zero() {
        let rs: Vec<_> = (0..3).map(|_| record(5.0, 1, 0, "SELECT")).collect();
        let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        let x = encode(&rs[0], &stats).unwrap();
        assert_eq!(x.values[rt_slot(&stats)], 0.0);
        assert!(x.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mean_maps_to_zero() {
        let rs: Vec<_> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&rt| record(rt, 1, 0, "SELECT"))
            .collect();
        let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        let slot = rt_slot(&stats);
        assert_eq!(encode(&rs[1], &stats).unwrap().values[slot], 0.0);
        let hi = encode(&rs[2], &stats).unwrap().values[slot];
        assert!((hi - 1.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn deciles_over_uniform_range() {
        let values: Vec<f64> = (0..1000).map(f64::from).collect();
        let cuts = decile_cuts(&values);
        assert_eq!(
            cuts,
            [99.0, 199.0, 299.0, 399.0, 499.0, 599.0, 699.0, 799.0, 899.0]
        );
        let mut counts = [0usize; BUCKETS];
        for &v in &values {
            counts[usize::from(bucket(&cuts, v)) - 1] += 1;
        }
        assert_eq!(counts, [100; BUCKETS]);
    }

    #[test]
    fn long_tail_uses_buckets() {
        let rs: Vec<_> = (0..1000).map(|i| record(1.0, i, 0, "SELECT")).collect();
        let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        let slot = stats
            .layout()
            .iter()
            .find(|e| e.feature == "rows_examined")
            .unwrap()
            .range
            .start;
        assert_eq!(encode(&rs[0], &stats).unwrap().values[slot], 1.0);
        assert_eq!(encode(&rs[999], &stats).unwrap().values[slot], 10.0);
        assert_eq!(
            encode(&record(1.0, 1_000_000, 0, "SELECT"), &stats)
                .unwrap()
                .values[slot],
            10.0
        );
    }

    #[test]
    fn zero_special_reserves_zero() {
        let rs = vec![
            record(1.0, 1, 0, "UPDATE"),
            record(1.0, 1, 10, "UPDATE"),
            record(1.0, 1, 20, "UPDATE"),
        ];
        let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        let slot = stats
            .layout()
            .iter()
            .find(|e| e.feature == "rows_updated")
            .unwrap()
            .range
            .start;
        let stat = &stats.numeric[slot];
        // zeros are left out of the fitted distribution
        assert_eq!(
            stat.encoding,
            NumericEncoding::Standardized {
                mean: 15.0,
                std: 5.0
            }
        );
        assert_eq!(encode(&rs[0], &stats).unwrap().values[slot], 0.0);
        assert_eq!(encode(&rs[1], &stats).unwrap().values[slot], -1.0);
        assert_eq!(encode(&rs[2], &stats).unwrap().values[slot], 1.0);
    }

    #[test]
    fn one_hot_and_unseen_category() {
        let kinds = ["SELECT", "UPDATE", "INSERT", "DELETE"];
        let rs: Vec<_> = kinds.iter().map(|k| record(1.0, 1, 0, k)).collect();
        let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        let range = stats
            .layout()
            .into_iter()
            .find(|e| e.feature == "sql_type")
            .unwrap()
            .range;
        assert_eq!(range.len(), 4);
        // sorted vocabulary: DELETE, INSERT, SELECT, UPDATE
        let x = encode(&rs[1], &stats).unwrap();
        assert_eq!(&x.values[range.clone()], &[0.0, 0.0, 0.0, 1.0]);
        let unseen = encode(&record(1.0, 1, 0, "REPLACE"), &stats).unwrap();
        assert_eq!(&unseen.values[range], &[0.0; 4]);
        assert_eq!(unseen.values.len(), stats.dim());
    }

    #[test]
    fn layout_covers_vector() {
        let rs = vec![record(1.0, 1, 0, "SELECT"), record(2.0, 5, 1, "UPDATE")];
        let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        let layout = stats.layout();
        assert_eq!(layout.first().unwrap().range.start, 0);
        assert!(layout
            .windows(2)
            .all(|w| w[0].range.end == w[1].range.start));
        assert_eq!(layout.last().unwrap().range.end, stats.dim());
        assert!(!layout.iter().any(|e| e.feature == "timestamp"));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            fit_stats(&[], &FeatureConfig::default()),
            Err(Error::EmptyInput)
        ));
        let rs = vec![record(1.0, 1, 0, "SELECT")];
        let mut stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        stats.numeric.pop();
        assert!(matches!(
            encode(&rs[0], &stats),
            Err(Error::StatsMismatch(_))
        ));
        let bad = FeatureConfig {
            long_tail: vec!["timestamp".into()],
            zero_special: vec![],
        };
        assert!(matches!(fit_stats(&rs, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn stats_json_round_trip() {
        let rs = vec![record(1.0, 1, 0, "SELECT"), record(2.5, 7, 3, "UPDATE")];
        let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
        let text = serde_json::to_string_pretty(&stats).unwrap();
        let back: FeatureStats = serde_json::from_str(&text).unwrap();
        assert_eq!(back, stats);
    }

    proptest! {
        #[test]
        fn bucket_is_monotone(mut values in prop::collection::vec(0u32..10_000, 1..200), a in 0u32..20_000, b in 0u32..20_000) {
            let fs: Vec<f64> = values.drain(..).map(f64::from).collect();
            let cuts = decile_cuts(&fs);
            prop_assert!(cuts.windows(2).all(|w| w[0] <= w[1]));
            let (lo, hi) = (a.min(b), a.max(b));
            let (bl, bh) = (bucket(&cuts, f64::from(lo)), bucket(&cuts, f64::from(hi)));
            prop_assert!(bl <= bh);
            prop_assert!((1..=10).contains(&bl) && (1..=10).contains(&bh));
        }

        #[test]
        fn encoded_length_is_constant(rts in prop::collection::vec(0.0f64..100.0, 1..30), probe in 0.0f64..1000.0) {
            let rs: Vec<_> = rts.iter().enumerate().map(|(i, &rt)| record(rt, i as u64, (i % 3) as u64, if i % 2 == 0 { "SELECT" } else { "UPDATE" })).collect();
            let stats = fit_stats(&rs, &FeatureConfig::default()).unwrap();
            for r in rs.iter().chain([&record(probe, 42, 0, "DDL")]) {
                let x = encode(r, &stats).unwrap();
                prop_assert_eq!(x.values.len(), stats.dim());
                prop_assert_eq!(&x, &encode(r, &stats).unwrap());
            }
        }
    }
}
