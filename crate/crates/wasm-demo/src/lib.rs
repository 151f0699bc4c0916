//! Browser bindings for a few interactive views of the recommender:
//! session splitting of a pasted log, the lag discretization curve, and a
//! tiny model trained in the page whose attention and gate can be probed.
//!
//! Every export returns a JSON string. The `*_value` functions hold the
//! logic and are usable natively.

use serde::Serialize;
use serde_json::{json, Value};
use tlsrec::dataset::{
    build_dataset, discretize_lag, min_positive_gap, parse_interactions, split_sessions, DatasetSplit, FormatDescriptor,
};
use tlsrec::evaluation::{evaluate, export_inspection, rank_items, EvalOptions};
use tlsrec::model::{Model, ModelConfig, Variant};
use tlsrec::synthetic::{parse_csv, GateCorpus};
use tlsrec::training::{train_from, TrainConfig};
use tlsrec::{Error, Result};
use wasm_bindgen::prelude::*;

fn to_js(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&format!("error[{}]: {e}", e.class())))
}

#[derive(Serialize)]
struct SessionView {
    items: Vec<String>,
    start: i64,
    end: i64,
    /// Seconds from the end of this session to the start of the next.
    lag_to_next: Option<i64>,
    delta_to_next: Option<usize>,
}

/// Splits a `user,item,timestamp` log into sessions per user and labels
/// each gap with its lag bucket.
pub fn sessions_value(csv: &str, threshold_seconds: i64, lag_buckets: usize) -> Result<Value> {
    if lag_buckets == 0 {
        return Err(Error::Config("lag_buckets must be at least 1".into()));
    }
    let format = FormatDescriptor {
        has_header: csv.trim_start().starts_with("user"),
        ..FormatDescriptor::default()
    };
    let log = parse_interactions(csv.as_bytes(), &format)?;
    let mut users = Vec::new();
    for (u, seq) in log.by_user().iter().enumerate() {
        let sessions = split_sessions(seq, threshold_seconds)?;
        let min_gap = min_positive_gap(seq);
        let views: Vec<SessionView> = sessions
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let lag = sessions.get(k + 1).map(|n| n.start_ts - s.end_ts);
                SessionView {
                    items: s.items.iter().map(|&i| log.item_labels[i].clone()).collect(),
                    start: s.start_ts,
                    end: s.end_ts,
                    lag_to_next: lag,
                    delta_to_next: lag.zip(min_gap).map(|(l, g)| discretize_lag(l, g, lag_buckets)),
                }
            })
            .collect();
        users.push(json!({
            "user": log.user_labels[u],
            "min_gap": min_gap,
            "sessions": views,
        }));
    }
    Ok(json!({ "users": users }))
}

/// `points` samples of the lag bucket over `[0, max_seconds]`.
pub fn lag_curve_value(min_gap: i64, lag_buckets: usize, max_seconds: i64, points: usize) -> Result<Value> {
    if min_gap <= 0 || lag_buckets == 0 || max_seconds <= 0 || points < 2 {
        return Err(Error::Config(
            "min_gap and max_seconds must be positive, lag_buckets at least 1, points at least 2".into(),
        ));
    }
    let curve: Vec<[i64; 2]> = (0..points)
        .map(|p| {
            let s = max_seconds * p as i64 / (points as i64 - 1);
            [s, discretize_lag(s, min_gap, lag_buckets) as i64]
        })
        .collect();
    Ok(json!({ "min_gap": min_gap, "lag_buckets": lag_buckets, "curve": curve }))
}

/// Small lag-dependent corpus, sized for training inside a page.
pub fn demo_corpus(seed: u64) -> GateCorpus {
    GateCorpus {
        users: 60,
        clusters: 5,
        items_per_cluster: 10,
        sessions_per_user: 20,
        session_len: 3,
        short_gap_seconds: 3600,
        long_gap_seconds: 8 * 3600,
        seed,
        ..GateCorpus::default()
    }
}

/// A model trained in the page on [`demo_corpus`].
#[wasm_bindgen]
pub struct Demo {
    split: DatasetSplit,
    model: Model,
    seed: u64,
    epochs_done: usize,
}

impl Demo {
    pub fn create(seed: u64) -> Result<Self> {
        let corpus = demo_corpus(seed);
        let log = parse_csv(&corpus.csv())?;
        let (split, _) = build_dataset(&log, &corpus.ingest(3, seed))?;
        let config = ModelConfig {
            dim: 16,
            heads: 2,
            sessions: split.sessions_per_instance,
            session_len: split.max_session_length,
            lag_buckets: split.lag_buckets,
            dropout: 0.0,
            variant: Variant::Full,
            ..ModelConfig::default()
        };
        let model = Model::new(config, split.user_count(), split.item_count(), seed)?;
        Ok(Self {
            split,
            model,
            seed,
            epochs_done: 0,
        })
    }

    pub fn train_value(&mut self, epochs: usize) -> Result<Value> {
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs,
            lambda_reg: 0.0,
            early_stop_patience: epochs.max(1),
            seed: self.seed.wrapping_add(self.epochs_done as u64),
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let outcome = train_from(&self.split, self.model.clone(), &config, &mut |r| {
            log.push(json!({ "epoch": self.epochs_done + r.epoch, "loss": r.train_loss, "val_hit": r.val_hit }))
        })?;
        self.model = outcome.model;
        self.epochs_done += epochs;
        let test = evaluate(
            &self.model,
            &self.split.test,
            &EvalOptions {
                ks: vec![5],
                ..EvalOptions::default()
            },
        )?;
        Ok(json!({ "epochs": self.epochs_done, "log": log, "test_hit5": test.rows[0].hit }))
    }

    pub fn instances_value(&self) -> Value {
        let rows: Vec<Value> = self
            .split
            .test
            .iter()
            .enumerate()
            .map(|(k, inst)| {
                json!({
                    "index": k,
                    "user": self.split.user_labels[inst.user],
                    "delta": inst.delta,
                    "lag_seconds": inst.lag_seconds,
                })
            })
            .collect();
        json!({ "lag_buckets": self.split.lag_buckets, "instances": rows })
    }

    /// Attention, pooling weights, the gate at every lag bucket, and the
    /// top items for test instance `index`, optionally scored as if the
    /// lag were `delta`.
    pub fn inspect_value(&self, index: usize, delta: Option<usize>) -> Result<Value> {
        let mut inst = self
            .split
            .test
            .get(index)
            .ok_or_else(|| Error::Lookup(format!("no test instance {index}")))?
            .clone();
        if let Some(d) = delta {
            if d == 0 || d > self.split.lag_buckets {
                return Err(Error::Config(format!(
                    "delta must lie in 1..={}",
                    self.split.lag_buckets
                )));
            }
            inst.delta = d;
        }
        let ins = export_inspection(&self.model, &inst)?;
        let label = |i: usize| self.split.item_labels[i].clone();
        let top: Vec<String> = rank_items(&self.model.score_all(&inst)?, &[])
            .into_iter()
            .take(5)
            .map(label)
            .collect();
        let attention: Vec<Vec<Vec<f64>>> = ins
            .attention
            .iter()
            .map(|a| (0..a.rows()).map(|r| a.row(r).to_vec()).collect())
            .collect();
        let gate_mean: Vec<f64> = ins
            .gate
            .unwrap_or_default()
            .iter()
            .map(|g| g.iter().sum::<f64>() / g.len() as f64)
            .collect();
        Ok(json!({
            "user": self.split.user_labels[inst.user],
            "sessions": inst.sessions.iter().map(|s| s.iter().map(|&i| label(i)).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "targets": inst.targets.iter().map(|&i| label(i)).collect::<Vec<_>>(),
            "delta": inst.delta,
            "attention": attention,
            "pool": ins.pool_weights,
            "gate_mean": gate_mean,
            "top": top,
        }))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsValue> {
        Demo::create(u64::from(seed)).map_err(|e| JsValue::from_str(&format!("error[{}]: {e}", e.class())))
    }

    pub fn train(&mut self, epochs: u32) -> std::result::Result<String, JsValue> {
        to_js(self.train_value(epochs as usize))
    }

    pub fn instances(&self) -> String {
        self.instances_value().to_string()
    }

    /// `delta` of 0 keeps the instance's own lag.
    pub fn inspect(&self, index: u32, delta: u32) -> std::result::Result<String, JsValue> {
        to_js(self.inspect_value(index as usize, (delta > 0).then_some(delta as usize)))
    }
}

#[wasm_bindgen]
pub fn sessions(csv: &str, threshold_seconds: f64, lag_buckets: u32) -> std::result::Result<String, JsValue> {
    to_js(sessions_value(csv, threshold_seconds as i64, lag_buckets as usize))
}

#[wasm_bindgen]
pub fn lag_curve(
    min_gap: f64,
    lag_buckets: u32,
    max_seconds: f64,
    points: u32,
) -> std::result::Result<String, JsValue> {
    to_js(lag_curve_value(
        min_gap as i64,
        lag_buckets as usize,
        max_seconds as i64,
        points as usize,
    ))
}

/// A short example log for the session view.
#[wasm_bindgen]
pub fn sample_log() -> String {
    let corpus = GateCorpus {
        users: 3,
        sessions_per_user: 5,
        ..demo_corpus(1)
    };
    format!("user,item,timestamp\n{}", corpus.csv())
}
