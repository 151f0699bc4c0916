//! Full-ranking evaluation with Hit@k and MAP@k, and the attention and
//! gate exports used for inspection.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::dataset::TrainingInstance;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Anything that assigns a preference score to every item.
pub trait Scorer: Sync {
    fn item_count(&self) -> usize;
    fn scores(&self, instance: &TrainingInstance) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn item_count(&self) -> usize {
        Model::item_count(self)
    }

    /// Logits rather than ratings: the ranking is the same and the logits
    /// do not saturate into ties.
    fn scores(&self, instance: &TrainingInstance) -> Result<Vec<f64>> {
        self.score_all(instance)
    }
}

/// Item ids by descending score, ties by ascending id, excluded ids last
/// (in ascending order).
pub fn rank_items(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut excluded = vec![false; scores.len()];
    for &e in exclude {
        if e < excluded.len() {
            excluded[e] = true;
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        excluded[a]
            .cmp(&excluded[b])
            .then_with(|| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    order
}

/// 1 if any ground-truth item appears in `top`, else 0.
pub fn hit_at_k(truth: &[usize], top: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Contract("hit_at_k needs a non-empty ground truth".into()));
    }
    Ok(if top.iter().any(|i| truth.contains(i)) {
        1.0
    } else {
        0.0
    })
}

/// Sum over ground-truth items ranked within the top `k` of
/// `(hits ranked at or above it) / rank`, ranks starting at 1. No
/// division by the number of relevant items.
pub fn map_at_k(truth: &[usize], ranking: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, item) in ranking.iter().take(k).enumerate() {
        if truth.contains(item) {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    total
}

/// Conventional average precision: [`map_at_k`] divided by
/// `min(|truth|, k)`.
pub fn average_precision_at_k(truth: &[usize], ranking: &[usize], k: usize) -> f64 {
    let denom = truth.len().min(k);
    if denom == 0 {
        return 0.0;
    }
    map_at_k(truth, ranking, k) / denom as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Drop items of the input sessions from the candidate set.
    pub exclude_history: bool,
    /// Keep each instance's top-k list (largest k) in the report.
    pub retain_top: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![20, 30],
            exclude_history: false,
            retain_top: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub k: usize,
    pub hit: f64,
    pub map: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingReport {
    pub instances: usize,
    pub rows: Vec<MetricRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top: Option<Vec<Vec<usize>>>,
}

impl RankingReport {
    pub fn at(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// Aligned text table, one line per k.
    pub fn table(&self) -> String {
        let mut s = format!(
            "instances: {}\n{:>5}  {:>10}  {:>10}  {:>10}\n",
            self.instances, "k", "hit", "map", "ap"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>5}  {:>10.6}  {:>10.6}  {:>10.6}\n",
                r.k, r.hit, r.map, r.ap
            ));
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
struct InstanceMetrics {
    per_k: Vec<[f64; 3]>,
    top: Vec<usize>,
}

fn evaluate_one<S: Scorer + ?Sized>(
    scorer: &S,
    inst: &TrainingInstance,
    opts: &EvalOptions,
) -> Result<InstanceMetrics> {
    let scores = scorer.scores(inst)?;
    if scores.len() != scorer.item_count() {
        return Err(Error::Contract(format!(
            "scorer returned {} scores for {} items",
            scores.len(),
            scorer.item_count()
        )));
    }
    let exclude: Vec<usize> = if opts.exclude_history {
        inst.sessions.iter().flatten().copied().collect()
    } else {
        Vec::new()
    };
    let ranking = rank_items(&scores, &exclude);
    let per_k = opts
        .ks
        .iter()
        .map(|&k| {
            let top = &ranking[..k.min(ranking.len())];
            Ok([
                hit_at_k(&inst.targets, top)?,
                map_at_k(&inst.targets, &ranking, k),
                average_precision_at_k(&inst.targets, &ranking, k),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let top = if opts.retain_top {
        let kmax = opts.ks.iter().copied().max().unwrap_or(0);
        ranking[..kmax.min(ranking.len())].to_vec()
    } else {
        Vec::new()
    };
    Ok(InstanceMetrics { per_k, top })
}

/// Scores and ranks every instance and averages the metrics. Instances
/// may be scored in parallel; totals are accumulated in instance order.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    instances: &[TrainingInstance],
    opts: &EvalOptions,
) -> Result<RankingReport> {
    if opts.ks.contains(&0) {
        return Err(Error::Config("evaluation cutoffs must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    let results: Vec<Result<InstanceMetrics>> = {
        use rayon::prelude::*;
        instances
            .par_iter()
            .map(|inst| evaluate_one(scorer, inst, opts))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<InstanceMetrics>> = instances.iter().map(|inst| evaluate_one(scorer, inst, opts)).collect();

    let mut sums = vec![[0.0f64; 3]; opts.ks.len()];
    let mut tops = Vec::new();
    for r in results {
        let m = r?;
        for (acc, v) in sums.iter_mut().zip(&m.per_k) {
            for j in 0..3 {
                acc[j] += v[j];
            }
        }
        if opts.retain_top {
            tops.push(m.top);
        }
    }
    let n = instances.len();
    let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    let rows = opts
        .ks
        .iter()
        .zip(&sums)
        .map(|(&k, s)| MetricRow {
            k,
            hit: mean(s[0]),
            map: mean(s[1]),
            ap: mean(s[2]),
        })
        .collect();
    Ok(RankingReport {
        instances: n,
        rows,
        top: opts.retain_top.then_some(tops),
    })
}

/// Attention and gate values for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    /// Head-averaged `[T, T]` session attention, one per block.
    pub attention: Vec<Tensor>,
    /// Long-term pooling weights over the `T` sessions.
    pub pool_weights: Vec<f64>,
    /// Gate vector for each lag bucket `1..=C`; `None` without a gate.
    pub gate: Option<Vec<Vec<f64>>>,
}

pub fn export_inspection(model: &Model, instance: &TrainingInstance) -> Result<Inspection> {
    let trace = model.trace(instance)?;
    Ok(Inspection {
        attention: trace.session_attention,
        pool_weights: trace.pool_weights,
        gate: model.gate_sweep(instance)?,
    })
}

/// `query,s1..sT` header, one row per query session.
pub fn write_attention_csv<W: Write>(attention: &Tensor, mut out: W) -> std::io::Result<()> {
    let t = attention.cols();
    let cols: Vec<String> = (1..=t).map(|j| format!("s{j}")).collect();
    writeln!(out, "query,{}", cols.join(","))?;
    for i in 0..attention.rows() {
        let vals: Vec<String> = attention.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "s{},{}", i + 1, vals.join(","))?;
    }
    Ok(())
}

/// `delta,g1..gd,mean` header, one row per lag bucket starting at 1.
pub fn write_gate_csv<W: Write>(rows: &[Vec<f64>], mut out: W) -> std::io::Result<()> {
    let d = rows.first().map_or(0, Vec::len);
    let cols: Vec<String> = (1..=d).map(|j| format!("g{j}")).collect();
    writeln!(out, "delta,{},mean", cols.join(","))?;
    for (i, row) in rows.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{}", i + 1, vals.join(","), mean)?;
    }
    Ok(())
}

/// `session,weight` rows.
pub fn write_pool_csv<W: Write>(weights: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "session,weight")?;
    for (i, w) in weights.iter().enumerate() {
        writeln!(out, "s{},{}", i + 1, w)?;
    }
    Ok(())
}
