//! Pairwise ranking optimization with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_negatives, DatasetSplit, TrainingInstance};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::model::{predict_logits, predict_rating, Model, ModelConfig, ParameterSet};
use crate::tensor::{Tape, Var};

/// What the pairwise loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairwiseScore {
    /// `z_u · e_v`.
    #[default]
    Logit,
    /// `sigmoid(z_u · e_v)`. The pairwise margin is then bounded by 1 and
    /// the loss saturates long before the ranking is fitted.
    Rating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Cutoff of the validation Hit@k that selects the best epoch.
    pub validation_k: usize,
    /// Instances per gradient tape. Tapes of one batch may run in
    /// parallel; their gradients are summed in tape order, so results do
    /// not depend on the thread count.
    pub chunk_size: usize,
    pub pairwise_score: PairwiseScore,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 50,
            lambda_reg: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 42,
            early_stop_patience: 5,
            validation_k: 20,
            chunk_size: 16,
            pairwise_score: PairwiseScore::Logit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return fail("adam_epsilon must be positive");
        }
        if self.lambda_reg.is_nan() || self.lambda_reg < 0.0 {
            return fail("lambda_reg must be non-negative");
        }
        if self.batch_size == 0 || self.chunk_size == 0 || self.validation_k == 0 {
            return fail("batch_size, chunk_size and validation_k must be positive");
        }
        Ok(())
    }
}

/// Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// `−Σ ln σ(r⁺ − r⁻) + λ Σ‖θ‖²` over paired score vectors. `params` may
/// be empty to leave out the regularizer.
pub fn bpr_batch_loss(tape: &mut Tape, pairs: &[(Var, Var)], params: &[Var], lambda: f64) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("bpr loss needs at least one pair".into()));
    }
    let mut total: Option<Var> = None;
    for &(pos, neg) in pairs {
        let diff = tape.sub(pos, neg)?;
        let ls = tape.log_sigmoid(diff)?;
        let s = tape.sum(ls)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let mut loss = tape.scale(total.expect("non-empty"), -1.0)?;
    if lambda > 0.0 {
        for &p in params {
            let sq = tape.sum_squares(p)?;
            let sq = tape.scale(sq, lambda)?;
            loss = tape.add(loss, sq)?;
        }
    }
    Ok(loss)
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "gradient {i} has {} entries, parameter {}",
                g.len(),
                p.len()
            )));
        }
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= config.learning_rate * mhat / (vhat.sqrt() + config.adam_epsilon);
        }
    }
    Ok(())
}

/// Loss and gradients of `instances` under fixed negatives, with dropout
/// driven by `rng` when given.
pub fn loss_and_gradients(
    model: &Model,
    instances: &[TrainingInstance],
    negatives: &[Vec<usize>],
    lambda: f64,
    score: PairwiseScore,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let item_table = model.item_table(&bound);
    let mut rng = rng;
    let mut pairs = Vec::with_capacity(instances.len());
    for (inst, neg) in instances.iter().zip(negatives) {
        let dropout = rng.as_deref_mut().map(|r| r as &mut dyn rand::RngCore);
        let g = model.build(&mut tape, &bound, inst, dropout)?;
        let score_of = match score {
            PairwiseScore::Logit => predict_logits,
            PairwiseScore::Rating => predict_rating,
        };
        let pos = score_of(&mut tape, g.fused, item_table, &inst.targets)?;
        let neg = score_of(&mut tape, g.fused, item_table, neg)?;
        pairs.push((pos, neg));
    }
    let loss = bpr_batch_loss(&mut tape, &pairs, &bound, lambda)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, bound.iter().map(|&v| grads.get_or_zeros(v)).collect()))
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hit: f64,
    pub val_map: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation Hit@k (the last
    /// epoch when there is no validation data; the initial model when
    /// `epochs` is 0).
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Wall time since training started. Browsers have no monotonic clock
/// through std, so wasm builds report zero.
struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Clock {
    fn start() -> Self {
        Clock(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    parts.iter().fold(seed, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

fn parameter_norms(params: &ParameterSet) -> String {
    params
        .iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.sum_of_squares().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn chunk_gradients(
    model: &Model,
    chunk: &[&TrainingInstance],
    lambda: f64,
    score: PairwiseScore,
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<TrainingInstance> = chunk.iter().map(|&i| i.clone()).collect();
    let negatives = instances
        .iter()
        .map(|inst| sample_negatives(&inst.targets, model.item_count(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let dropout = (model.config().dropout > 0.0).then_some(&mut rng);
    loss_and_gradients(model, &instances, &negatives, lambda, score, dropout)
}

/// Runs one epoch over `order` and returns the summed loss.
fn run_epoch(
    model: &mut Model,
    state: &mut OptimizerState,
    train: &[TrainingInstance],
    order: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut epoch_loss = 0.0;
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        let chunks: Vec<(usize, Vec<&TrainingInstance>)> = batch
            .chunks(config.chunk_size)
            .map(|c| c.iter().map(|&i| &train[i]).collect())
            .enumerate()
            .collect();
        let seed_of = |c: usize| stream_seed(config.seed, &[epoch as u64, b as u64, c as u64]);
        let run = |(c, chunk): &(usize, Vec<&TrainingInstance>)| {
            let lambda = if *c == 0 { config.lambda_reg } else { 0.0 };
            chunk_gradients(model, chunk, lambda, config.pairwise_score, seed_of(*c))
        };
        #[cfg(feature = "parallel")]
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = {
            use rayon::prelude::*;
            chunks.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = chunks.iter().map(run).collect();

        let mut loss = 0.0;
        let mut total: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(gi) {
                            *x += y;
                        }
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {loss} at epoch {epoch}, batch {b}; parameter norms: {}",
                parameter_norms(model.params())
            )));
        }
        adam_step(model.params_mut(), &total.unwrap_or_default(), state, config)?;
        epoch_loss += loss;
    }
    Ok(epoch_loss)
}

pub fn train(split: &DatasetSplit, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(split, model_config, config, &mut |_| {})
}

/// As [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    split: &DatasetSplit,
    model_config: &ModelConfig,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(
        model_config.clone(),
        split.user_count(),
        split.item_count(),
        config.seed,
    )?;
    train_from(split, model, config, observer)
}

/// Continues training from `model` with fresh optimizer moments.
pub fn train_from(
    split: &DatasetSplit,
    mut model: Model,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    crate::checkpoint::check_compatible(&model, split)?;
    let mut state = OptimizerState::new(model.params());
    let eval_opts = EvalOptions {
        ks: vec![config.validation_k],
        ..EvalOptions::default()
    };
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_hit = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let start = Clock::start();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            config.seed,
            &[epoch as u64],
        )));
        let loss = run_epoch(&mut model, &mut state, &split.train, &order, config, epoch)?;
        let (val_hit, val_map) = if split.validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&model, &split.validation, &eval_opts)?;
            (r.rows[0].hit, r.rows[0].map)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss,
            val_hit,
            val_map,
            wall_seconds: start.seconds(),
        };
        observer(&record);
        log.push(record);
        if split.validation.is_empty() || val_hit > best_hit {
            best_hit = val_hit;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        log,
    })
}

/// L2 norm of every parameter together.
pub fn parameter_norm(params: &ParameterSet) -> f64 {
    params.sum_of_squares().sqrt()
}
