//! Business-group classification.
//!
//! Labels are collected under a [`LabelPolicy`], each query becomes a
//! [`FeatureVector`] `F = [Z || X]`, and a [`ClassifierModel`] maps `F` to a
//! group id. The built-in model is multinomial logistic regression trained
//! with gradient descent over timestamp-ordered mini-batches.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec_features::ExecVector;
use crate::log_ingest::QueryLogRecord;
use crate::sql_template::SqlId;

pub const DEFAULT_P_L: f64 = 0.01;
pub const DEFAULT_NUM_BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    RandomSample,
    Manual,
    Hybrid,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_sample" => Ok(LabelMode::RandomSample),
            "manual" => Ok(LabelMode::Manual),
            "hybrid" => Ok(LabelMode::Hybrid),
            other => Err(Error::Config(format!(
                "unknown label mode {other:?}, expected random_sample, manual or hybrid"
            ))),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::RandomSample => "random_sample",
            LabelMode::Manual => "manual",
            LabelMode::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPolicy {
    pub mode: LabelMode,
    pub p_l: f64,
    pub seed: u64,
}

impl Default for LabelPolicy {
    fn default() -> Self {
        Self {
            mode: LabelMode::RandomSample,
            p_l: DEFAULT_P_L,
            seed: 0,
        }
    }
}

impl LabelPolicy {
    pub fn new(mode: LabelMode, p_l: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_l) {
            return Err(Error::Config(format!("P_L must be in [0, 1], got {p_l}")));
        }
        Ok(Self { mode, p_l, seed })
    }
}

/// Select the labeled records that may be used for training.
///
/// One uniform draw is consumed per record regardless of its fields, so the
/// kept subset only depends on the stream and the seed.
pub fn sample_labels(records: &[QueryLogRecord], policy: &LabelPolicy) -> Vec<QueryLogRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    records
        .iter()
        .filter(|r| {
            let u: f64 = rng.random();
            let labeled = r.group_label.is_some();
            let opted_out = r.no_label == Some(true);
            match policy.mode {
                LabelMode::RandomSample => labeled && u < policy.p_l,
                LabelMode::Manual => labeled && !opted_out,
                LabelMode::Hybrid => labeled && !opted_out && u < policy.p_l,
            }
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub sql_id: SqlId,
    pub timestamp: i64,
}

/// `F = [Z || X]`, or `F = Z` when no execution features are available.
pub fn assemble_feature(
    z: &[f32],
    x: Option<&ExecVector>,
    sql_id: SqlId,
    timestamp: i64,
) -> Result<FeatureVector> {
    if z.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let mut values: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
    if let Some(x) = x {
        values.extend_from_slice(&x.values);
    }
    Ok(FeatureVector {
        values,
        sql_id,
        timestamp,
    })
}

/// Assembles features for one run and rejects a change of shape midway.
#[derive(Debug, Default)]
pub struct FeatureAssembler {
    shape: Option<(usize, usize)>,
}

impl FeatureAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assemble(
        &mut self,
        z: &[f32],
        x: Option<&ExecVector>,
        sql_id: SqlId,
        timestamp: i64,
    ) -> Result<FeatureVector> {
        let shape = (z.len(), x.map_or(0, |x| x.values.len()));
        match self.shape {
            Some(expected) if expected != shape => {
                return Err(Error::DimensionMismatch {
                    expected: expected.0 + expected.1,
                    actual: shape.0 + shape.1,
                })
            }
            _ => self.shape = Some(shape),
        }
        assemble_feature(z, x, sql_id, timestamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_batches: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_batches: DEFAULT_NUM_BATCHES,
            learning_rate: 0.1,
            epochs: 50,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Anything that scores a feature vector against an ordered class list.
pub trait Classifier {
    fn classes(&self) -> &[String];
    fn dim(&self) -> usize;
    fn scores(&self, features: &[f64]) -> Result<Vec<f64>>;

    /// Highest-scoring class; ties go to the class listed first.
    fn predict(&self, features: &[f64]) -> Result<&str> {
        let scores = self.scores(features)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(&self.classes()[best])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub num_batches: usize,
    pub epochs: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub kind: ModelKind,
    /// Sorted group ids.
    pub classes: Vec<String>,
    pub dim: usize,
    /// One row of `dim` weights per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub metadata: TrainingMetadata,
}

impl Classifier for ClassifierModel {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: features.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(features).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }
}

impl ClassifierModel {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 {
            return Err(Error::InvalidModel("model has no classes".into()));
        }
        if self.weights.len() != k
            || self.bias.len() != k
            || self.weights.iter().any(|w| w.len() != self.dim)
        {
            return Err(Error::InvalidModel(
                "parameter shape does not match classes and dim".into(),
            ));
        }
        Ok(())
    }
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    scores.iter_mut().for_each(|s| *s /= total);
}

/// Train the built-in model. Data is ordered by timestamp and cut into
/// `num_batches` contiguous batches; each epoch takes one gradient step per
/// batch.
pub fn train(labeled: &[(FeatureVector, String)], config: &TrainConfig) -> Result<ClassifierModel> {
    let Some((first, _)) = labeled.first() else {
        return Err(Error::EmptyTrainingSet);
    };
    if config.num_batches == 0 {
        return Err(Error::Config("number of batches must be at least 1".into()));
    }
    let dim = first.values.len();
    if let Some((f, _)) = labeled.iter().find(|(f, _)| f.values.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: f.values.len(),
        });
    }
    let mut classes: Vec<String> = labeled.iter().map(|(_, g)| g.clone()).collect();
    classes.sort();
    classes.dedup();
    let k = classes.len();
    let metadata = TrainingMetadata {
        num_batches: config.num_batches,
        epochs: config.epochs,
        samples: labeled.len(),
        seed: config.seed,
    };
    if k == 1 {
        return Ok(ClassifierModel {
            kind: ModelKind::Constant,
            classes,
            dim,
            weights: vec![vec![0.0; dim]],
            bias: vec![0.0],
            metadata,
        });
    }

    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.sort_by_key(|&i| labeled[i].0.timestamp);
    let targets: Vec<usize> = labeled
        .iter()
        .map(|(_, g)| {
            classes
                .binary_search(g)
                .expect("class list built from labels")
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut weights: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| init.sample(&mut rng)).collect())
        .collect();
    let mut bias = vec![0.0; k];

    let n = order.len();
    let batches: Vec<&[usize]> = (0..config.num_batches)
        .map(|b| &order[b * n / config.num_batches..(b + 1) * n / config.num_batches])
        .filter(|batch| !batch.is_empty())
        .collect();

    let mut grad_w = vec![vec![0.0; dim]; k];
    let mut grad_b = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for _ in 0..config.epochs {
        for batch in &batches {
            grad_w.iter_mut().for_each(|g| g.fill(0.0));
            grad_b.fill(0.0);
            for &i in batch.iter() {
                let x = &labeled[i].0.values;
                for c in 0..k {
                    probs[c] = bias[c] + weights[c].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                }
                softmax_in_place(&mut probs);
                probs[targets[i]] -= 1.0;
                for c in 0..k {
                    grad_b[c] += probs[c];
                    for (g, v) in grad_w[c].iter_mut().zip(x) {
                        *g += probs[c] * v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for c in 0..k {
                bias[c] -= config.learning_rate * grad_b[c] * scale;
                for (w, g) in weights[c].iter_mut().zip(&grad_w[c]) {
                    *w -= config.learning_rate * (g * scale + config.l2 * *w);
                }
            }
        }
    }

    Ok(ClassifierModel {
        kind: ModelKind::LogisticRegression,
        classes,
        dim,
        weights,
        bias,
        metadata,
    })
}

pub fn predict<'m>(model: &'m dyn Classifier, features: &FeatureVector) -> Result<&'m str> {
    model.predict(&features.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    fn labeled_record(i: usize, label: Option<&str>, no_label: Option<bool>) -> QueryLogRecord {
        QueryLogRecord {
            lock_wait_time: 0.0,
            logical_read: 0,
            rows_examined: 0,
            rows_returned: 0,
            rows_updated: 0,
            rt: 0.001,
            timestamp: i as i64,
            physical_sync_read: 0,
            database: "db".into(),
            error_code: "0".into(),
            origin_host: "h".into(),
            sql_type: "SELECT".into(),
            sql: format!("SELECT {i}"),
            group_label: label.map(str::to_string),
            no_label,
        }
    }

    fn fv(values: Vec<f64>, ts: i64) -> FeatureVector {
        FeatureVector {
            values,
            sql_id: SqlId(0),
            timestamp: ts,
        }
    }

    /// Two Gaussian clusters around `±center` on every coordinate.
    fn clusters(n: usize, dim: usize, center: f64, seed: u64) -> Vec<(FeatureVector, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let (sign, label) = if rng.random::<bool>() {
                    (1.0, "g1")
                } else {
                    (-1.0, "g0")
                };
                let values = (0..dim)
                    .map(|_| sign * center + noise.sample(&mut rng))
                    .collect();
                (fv(values, i as i64), label.to_string())
            })
            .collect()
    }

    fn nearest_centroid_accuracy(
        train: &[(FeatureVector, String)],
        test: &[(FeatureVector, String)],
    ) -> f64 {
        let dim = train[0].0.values.len();
        let centroid = |label: &str| {
            let members: Vec<_> = train.iter().filter(|(_, g)| g == label).collect();
            let mut c = vec![0.0; dim];
            for (f, _) in &members {
                c.iter_mut().zip(&f.values).for_each(|(a, v)| *a += v);
            }
            c.iter_mut().for_each(|a| *a /= members.len() as f64);
            c
        };
        let (c0, c1) = (centroid("g0"), centroid("g1"));
        let dist =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let hits = test
            .iter()
            .filter(|(f, g)| {
                let guess = if dist(&f.values, &c1) < dist(&f.values, &c0) {
                    "g1"
                } else {
                    "g0"
                };
                guess == g
            })
            .count();
        hits as f64 / test.len() as f64
    }

    fn accuracy(model: &ClassifierModel, data: &[(FeatureVector, String)]) -> f64 {
        let hits = data
            .iter()
            .filter(|(f, g)| model.predict(&f.values).unwrap() == g)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn sampling_edges() {
        let rs: Vec<_> = (0..50)
            .map(|i| labeled_record(i, Some("g"), None))
            .collect();
        let none = LabelPolicy::new(LabelMode::RandomSample, 0.0, 1).unwrap();
        assert!(sample_labels(&rs, &none).is_empty());

        let mut flagged = rs.clone();
        flagged[7].no_label = Some(true);
        flagged[9].group_label = None;
        let all = LabelPolicy::new(LabelMode::Hybrid, 1.0, 1).unwrap();
        let kept = sample_labels(&flagged, &all);
        assert_eq!(kept.len(), 48);
        assert!(kept.iter().all(|r| r.timestamp != 7 && r.timestamp != 9));

        let manual = LabelPolicy::new(LabelMode::Manual, 0.0, 1).unwrap();
        assert_eq!(sample_labels(&flagged, &manual).len(), 48);
        assert!(LabelPolicy::new(LabelMode::Manual, 1.5, 0).is_err());
    }

    #[test]
    fn one_percent_rate_within_four_sigma() {
        let rs: Vec<_> = (0..100_000)
            .map(|i| labeled_record(i, Some("g"), None))
            .collect();
        let policy = LabelPolicy::new(LabelMode::RandomSample, 0.01, 2024).unwrap();
        let kept = sample_labels(&rs, &policy).len() as f64;
        let sigma = (100_000.0f64 * 0.01 * 0.99).sqrt();
        assert!((kept - 1000.0).abs() <= 4.0 * sigma, "kept {kept}");
        assert_eq!(sample_labels(&rs, &policy).len() as f64, kept);
    }

    #[test]
    fn assemble_concatenates() {
        let z = vec![0.5f32; 64];
        let x = ExecVector {
            values: vec![1.0; 30],
        };
        let f = assemble_feature(&z, Some(&x), SqlId(1), 5).unwrap();
        assert_eq!(f.values.len(), 94);
        assert!(f.values[..64].iter().all(|&v| v == 0.5));
        let only_z = assemble_feature(&z, None, SqlId(1), 5).unwrap();
        assert_eq!(only_z.values, vec![0.5; 64]);

        let mut run = FeatureAssembler::new();
        run.assemble(&z, Some(&x), SqlId(1), 0).unwrap();
        let short = ExecVector {
            values: vec![1.0; 29],
        };
        assert!(matches!(
            run.assemble(&z, Some(&short), SqlId(1), 1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(assemble_feature(&[], None, SqlId(1), 0).is_err());
    }

    #[test]
    fn separable_clusters_match_nearest_centroid() {
        let data = clusters(200, 8, 1.5, 11);
        let (train_set, holdout) = data.split_at(150);
        let oracle = nearest_centroid_accuracy(train_set, holdout);
        assert!(oracle >= 0.95, "oracle {oracle}");
        let model = train(train_set, &TrainConfig::default()).unwrap();
        let held = accuracy(&model, holdout);
        assert!(
            held >= 0.95 && held >= oracle,
            "model {held} oracle {oracle}"
        );
        assert!(accuracy(&model, train_set) >= held - 0.05);
        // a training point from a cluster is assigned to that cluster
        let (f, g) = &train_set[0];
        assert_eq!(model.predict(&f.values).unwrap(), g);
    }

    #[test]
    fn training_is_deterministic() {
        let data = clusters(120, 4, 1.0, 3);
        let config = TrainConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(
            train(&data, &config).unwrap(),
            train(&data, &config).unwrap()
        );
        let other = TrainConfig { seed: 10, ..config };
        assert_ne!(
            train(&data, &config).unwrap().weights,
            train(&data, &other).unwrap().weights
        );
    }

    #[test]
    fn single_class_gives_constant_model() {
        let data = vec![
            (fv(vec![1.0, 2.0], 0), "only".to_string()),
            (fv(vec![3.0, 1.0], 1), "only".to_string()),
        ];
        let model = train(&data, &TrainConfig::default()).unwrap();
        assert_eq!(model.kind, ModelKind::Constant);
        assert_eq!(model.predict(&[-100.0, 7.0]).unwrap(), "only");
        assert!(matches!(
            train(&[], &TrainConfig::default()),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn ties_go_to_first_class() {
        let model = ClassifierModel {
            kind: ModelKind::LogisticRegression,
            classes: vec!["a".into(), "b".into()],
            dim: 2,
            weights: vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
            bias: vec![0.0, 0.0],
            metadata: TrainingMetadata {
                num_batches: 1,
                epochs: 0,
                samples: 0,
                seed: 0,
            },
        };
        assert_eq!(model.predict(&[0.0, 0.0]).unwrap(), "a");
        assert_eq!(model.predict(&[-1.0, 1.0]).unwrap(), "b");
        assert!(matches!(
            model.predict(&[0.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let model = train(&clusters(40, 3, 2.0, 5), &TrainConfig::default()).unwrap();
        let back: ClassifierModel =
            serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
        assert_eq!(back, model);
        back.validate().unwrap();
    }

    proptest! {
        #[test]
        fn hybrid_never_keeps_opted_out(flags in prop::collection::vec((any::<bool>(), prop::option::of(any::<bool>())), 0..200), p_l in 0.0f64..=1.0, seed in any::<u64>()) {
            let rs: Vec<_> = flags.iter().enumerate().map(|(i, &(has, flag))| labeled_record(i, has.then_some("g"), flag)).collect();
            let policy = LabelPolicy::new(LabelMode::Hybrid, p_l, seed).unwrap();
            let kept = sample_labels(&rs, &policy);
            prop_assert!(kept.iter().all(|r| r.no_label != Some(true) && r.group_label.is_some()));
            prop_assert_eq!(kept, sample_labels(&rs, &policy));
        }

        #[test]
        fn argmax_ignores_common_shift(ws in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..5), x in prop::collection::vec(-5.0f64..5.0, 3), shift in -100.0f64..100.0) {
            let k = ws.len();
            let mut model = ClassifierModel {
                kind: ModelKind::LogisticRegression,
                classes: (0..k).map(|i| format!("c{i}")).collect(),
                dim: 3,
                weights: ws,
                bias: vec![0.0; k],
                metadata: TrainingMetadata { num_batches: 1, epochs: 0, samples: 0, seed: 0 },
            };
            let before = model.predict(&x).unwrap().to_string();
            model.bias.iter_mut().for_each(|b| *b += shift);
            prop_assert_eq!(before, model.predict(&x).unwrap());
        }
    }
}
