//! The recommender network.
//!
//! Shapes follow one convention throughout: sequences are stored with one
//! token per row, so a session's item embeddings are `[m, d]` and the
//! session sequence is `[T, d]`. Learnable matrices keep their natural
//! `[out, in]` layout and are applied as `x · Wᵀ`. Embedding tables are
//! `[d, count]` and looked up by column.
//!
//! Pipeline for one instance:
//!
//! 1. item lookup for every padded session, then a single-head
//!    self-attention over the session's items whose outputs are summed
//!    into the session embedding (weights shared across sessions);
//! 2. the last session embedding is the short-term preference;
//! 3. learnable positions are added and `blocks` causal multi-head
//!    self-attention blocks (attention, residual, layer norm, ReLU FFN)
//!    produce attentional session embeddings;
//! 4. a user-conditioned attention pools those into the long-term
//!    preference;
//! 5. a sigmoid gate driven by both preferences and an embedding of the
//!    discretized time lag mixes them per dimension;
//! 6. items are scored by `sigmoid(z_u · e_v)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingInstance;
use crate::error::{Error, Result};
use crate::tensor::{KeyMask, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    #[default]
    Full,
    /// Session embedding is the mean of raw item embeddings.
    NoShortAttention,
    /// Raw session embeddings go straight to the long-term pooling.
    NoLongAttention,
    /// One attention head in the session-level blocks.
    SingleHead,
    /// `z_u` is the average of the two preference embeddings.
    GateAverage,
    /// Single-head attention between the two preference embeddings, summed.
    GateSelfAttention,
    /// Multi-head attention between the two preference embeddings, summed.
    GateMultiHead,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoShortAttention,
        Variant::NoLongAttention,
        Variant::SingleHead,
        Variant::GateAverage,
        Variant::GateSelfAttention,
        Variant::GateMultiHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoShortAttention => "no_short_attention",
            Variant::NoLongAttention => "no_long_attention",
            Variant::SingleHead => "single_head",
            Variant::GateAverage => "gate_average",
            Variant::GateSelfAttention => "gate_self_attention",
            Variant::GateMultiHead => "gate_multihead",
        }
    }

    /// Table label, e.g. `TLSRec-G+A`.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "TLSRec",
            Variant::NoShortAttention => "TLSRec-S",
            Variant::NoLongAttention => "TLSRec-L",
            Variant::SingleHead => "TLSRec-M",
            Variant::GateAverage => "TLSRec-G+A",
            Variant::GateSelfAttention => "TLSRec-G+S",
            Variant::GateMultiHead => "TLSRec-G+M",
        }
    }

    fn short(self) -> &'static str {
        &self.label()["TLSRec".len()..]
    }

    pub fn has_time_gate(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoShortAttention | Variant::NoLongAttention | Variant::SingleHead
        )
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the snake-case name, the table label, or its suffix
    /// (`-S`, `G+A`, ...).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| {
                s == v.name()
                    || s.eq_ignore_ascii_case(v.label())
                    || (!v.short().is_empty()
                        && (s.eq_ignore_ascii_case(v.short())
                            || s.eq_ignore_ascii_case(v.short().trim_start_matches('-'))))
            })
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; valid names: {}", names.join(", ")))
            })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub sessions: usize,
    pub session_len: usize,
    pub lag_buckets: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub norm_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 8,
            sessions: 4,
            session_len: 1,
            lag_buckets: 128,
            blocks: 1,
            dropout: 0.5,
            variant: Variant::Full,
            norm_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Heads actually used by the session-level blocks.
    pub fn effective_heads(&self) -> usize {
        match self.variant {
            Variant::SingleHead => 1,
            _ => self.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 {
            return fail("dim and heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.sessions == 0 || self.session_len == 0 || self.lag_buckets == 0 {
            return fail("sessions, session_len and lag_buckets must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.norm_epsilon <= 0.0 {
            return fail("norm_epsilon must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Named learnable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Contract("parameter names and tensors differ in count".into()));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_of_squares).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct HeadLayout {
    query: usize,
    key: usize,
    value: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    heads: Vec<HeadLayout>,
    output: usize,
    norm_scale: usize,
    norm_shift: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct GateLayout {
    time_embedding: usize,
    w_long: usize,
    w_short: usize,
    w_lag: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct FusionLayout {
    heads: Vec<HeadLayout>,
    output: Option<usize>,
}

/// Indices of every parameter inside the [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    item: usize,
    user: usize,
    short: Option<HeadLayout>,
    position: Option<usize>,
    blocks: Vec<BlockLayout>,
    long_weight: usize,
    long_bias: usize,
    gate: Option<GateLayout>,
    fusion: Option<FusionLayout>,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push((name.into(), shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn heads(&mut self, prefix: &str, count: usize, width: usize, dim: usize) -> Vec<HeadLayout> {
        (0..count)
            .map(|j| HeadLayout {
                query: self.add(format!("{prefix}.head{j}.query"), &[width, dim], Init::Uniform),
                key: self.add(format!("{prefix}.head{j}.key"), &[width, dim], Init::Uniform),
                value: self.add(format!("{prefix}.head{j}.value"), &[width, dim], Init::Uniform),
            })
            .collect()
    }
}

fn plan(config: &ModelConfig, users: usize, items: usize) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = config.dim;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let item = b.add("item_embedding", &[d, items], Init::Uniform);
    let user = b.add("user_embedding", &[d, users], Init::Uniform);
    let short = (config.variant != Variant::NoShortAttention).then(|| HeadLayout {
        query: b.add("short.query", &[d, d], Init::Uniform),
        key: b.add("short.key", &[d, d], Init::Uniform),
        value: b.add("short.value", &[d, d], Init::Uniform),
    });
    let (position, blocks) = if config.variant == Variant::NoLongAttention {
        (None, Vec::new())
    } else {
        let position = b.add("position_embedding", &[d, config.sessions], Init::Uniform);
        let h = config.effective_heads();
        let blocks = (0..config.blocks)
            .map(|k| {
                let p = format!("block{k}");
                BlockLayout {
                    heads: b.heads(&p, h, d / h, d),
                    output: b.add(format!("{p}.output"), &[d, d], Init::Uniform),
                    norm_scale: b.add(format!("{p}.norm.scale"), &[d], Init::Ones),
                    norm_shift: b.add(format!("{p}.norm.shift"), &[d], Init::Zeros),
                    ffn_w1: b.add(format!("{p}.ffn.w1"), &[4 * d, d], Init::Uniform),
                    ffn_b1: b.add(format!("{p}.ffn.b1"), &[4 * d], Init::Zeros),
                    ffn_w2: b.add(format!("{p}.ffn.w2"), &[d, 4 * d], Init::Uniform),
                    ffn_b2: b.add(format!("{p}.ffn.b2"), &[d], Init::Zeros),
                }
            })
            .collect();
        (Some(position), blocks)
    };
    let long_weight = b.add("long.weight", &[d, d], Init::Uniform);
    let long_bias = b.add("long.bias", &[d], Init::Zeros);
    let gate = config.variant.has_time_gate().then(|| GateLayout {
        time_embedding: b.add("gate.time_embedding", &[d, config.lag_buckets], Init::Uniform),
        w_long: b.add("gate.long", &[d, d], Init::Uniform),
        w_short: b.add("gate.short", &[d, d], Init::Uniform),
        w_lag: b.add("gate.lag", &[d, d], Init::Uniform),
        bias: b.add("gate.bias", &[d], Init::Zeros),
    });
    let fusion = match config.variant {
        Variant::GateSelfAttention => Some(FusionLayout {
            heads: b.heads("fusion", 1, d, d),
            output: None,
        }),
        Variant::GateMultiHead => Some(FusionLayout {
            heads: b.heads("fusion", config.heads, d / config.heads, d),
            output: Some(b.add("fusion.output", &[d, d], Init::Uniform)),
        }),
        _ => None,
    };
    let layout = Layout {
        item,
        user,
        short,
        position,
        blocks,
        long_weight,
        long_bias,
        gate,
        fusion,
    };
    (layout, b.specs)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Variables of one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub output: Var,
    pub norm_scale: Var,
    pub norm_shift: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub time_embedding: Var,
    pub w_long: Var,
    pub w_short: Var,
    pub w_lag: Var,
    pub bias: Var,
}

/// Outputs of one session-level block.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: Var,
    /// Multi-head attention after the output projection, before the
    /// residual connection.
    pub pre_residual: Var,
    /// `[T, T]` attention weights, one per head.
    pub attention: Vec<Var>,
}

/// Tape variables of a full forward pass.
#[derive(Clone, Debug)]
pub struct Graph {
    pub sessions: Var,
    pub short: Var,
    pub attentional: Var,
    pub pool_weights: Var,
    pub long: Var,
    pub gate: Option<Var>,
    pub fused: Var,
    pub blocks: Vec<BlockOutput>,
}

/// Values of a forward pass, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[T, d]`, row `i` is session embedding `s_i`.
    pub session_embeddings: Tensor,
    pub short: Vec<f64>,
    /// `[T, d]` output of the last block (the session embeddings for the
    /// no-long-attention variant).
    pub attentional: Tensor,
    pub pool_weights: Vec<f64>,
    pub long: Vec<f64>,
    pub gate: Option<Vec<f64>>,
    pub fused: Vec<f64>,
    /// Per block, the head-averaged `[T, T]` session attention.
    pub session_attention: Vec<Tensor>,
    /// Per block, the pre-residual attention output `[T, d]`.
    pub pre_residual: Vec<Tensor>,
}

/// `x · Wᵀ` for `x: [n, in]` (or `[in]`) and `W: [out, in]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    if tape.value(x).shape().len() == 1 {
        return Ok(tape.matmul(w, x)?);
    }
    let wt = tape.transpose(w)?;
    Ok(tape.matmul(x, wt)?)
}

/// Scaled dot-product attention over the rows of `q`, `k`, `v`.
/// Returns `(output, weights)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64, mask: Option<&KeyMask>) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / scale)?;
    let weights = tape.softmax(scores, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Item embeddings of one session, one row per item: `[m, d]`.
pub fn embed_session_items(tape: &mut Tape, item_table: Var, ids: &[usize]) -> Result<Var> {
    Ok(tape.lookup(item_table, ids)?)
}

/// Self-attention over the items of one session, summed into the session
/// embedding. Returns `(s_i, item attention [m, m])`.
pub fn short_term_session_embedding(tape: &mut Tape, items: Var, head: HeadVars) -> Result<(Var, Var)> {
    let d = tape.value(items).cols();
    let q = linear(tape, items, head.query)?;
    let k = linear(tape, items, head.key)?;
    let v = linear(tape, items, head.value)?;
    let (attended, weights) = attend(tape, q, k, v, (d as f64).sqrt(), None)?;
    Ok((tape.sum_rows(attended)?, weights))
}

/// `S + Pᵀ` for session rows `S: [T, d]` and position table `P: [d, T]`.
pub fn inject_positions(tape: &mut Tape, sessions: Var, positions: Var) -> Result<Var> {
    let pt = tape.transpose(positions)?;
    Ok(tape.add(sessions, pt)?)
}

/// One causal multi-head self-attention block:
/// `FFN(Norm(MultiHead(x) + x))` with a ReLU feed-forward network.
pub fn multi_head_block<R: RngCore + ?Sized>(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    norm_epsilon: f64,
    dropout: Option<(f64, &mut R)>,
) -> Result<BlockOutput> {
    let t = tape.value(x).rows();
    let mask = KeyMask::causal(t);
    let mut heads = Vec::with_capacity(block.heads.len());
    let mut attention = Vec::with_capacity(block.heads.len());
    for h in &block.heads {
        let width = tape.value(h.query).rows();
        let q = linear(tape, x, h.query)?;
        let k = linear(tape, x, h.key)?;
        let v = linear(tape, x, h.value)?;
        let (out, w) = attend(tape, q, k, v, (width as f64).sqrt(), Some(&mask))?;
        heads.push(out);
        attention.push(w);
    }
    let concat = tape.concat_cols(&heads)?;
    let pre_residual = linear(tape, concat, block.output)?;
    let residual = tape.add(pre_residual, x)?;
    let normed = tape.layer_norm(residual, block.norm_scale, block.norm_shift, norm_epsilon)?;
    let hidden = linear(tape, normed, block.ffn_w1)?;
    let hidden = tape.add_row_bias(hidden, block.ffn_b1)?;
    let hidden = tape.relu(hidden)?;
    let out = linear(tape, hidden, block.ffn_w2)?;
    let mut out = tape.add_row_bias(out, block.ffn_b2)?;
    if let Some((rate, rng)) = dropout {
        out = tape.dropout(out, rate, rng)?;
    }
    Ok(BlockOutput {
        output: out,
        pre_residual,
        attention,
    })
}

/// User-conditioned attention pooling of the session rows `z: [T, d]`.
/// Returns `(z_long, weights [T])`.
pub fn long_term_pool(tape: &mut Tape, z: Var, user: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let h = linear(tape, z, weight)?;
    let h = tape.add_row_bias(h, bias)?;
    let h = tape.relu(h)?;
    let scores = tape.matmul(h, user)?;
    let weights = tape.softmax(scores, None)?;
    let pooled = tape.matmul(weights, z)?;
    Ok((pooled, weights))
}

/// Sigmoid gate over both preferences and the lag embedding, then the
/// per-dimension mix `g ⊗ short + (1 − g) ⊗ long`. Returns `(g, z_u)`.
pub fn time_gate<R: RngCore + ?Sized>(
    tape: &mut Tape,
    long: Var,
    short: Var,
    delta: usize,
    gate: &GateVars,
    dropout: Option<(f64, &mut R)>,
) -> Result<(Var, Var)> {
    let buckets = tape.value(gate.time_embedding).cols();
    if delta == 0 || delta > buckets {
        return Err(Error::Tensor(crate::tensor::TensorError::Index {
            index: delta,
            len: buckets,
        }));
    }
    let y = tape.column(gate.time_embedding, delta - 1)?;
    let a = linear(tape, long, gate.w_long)?;
    let b = linear(tape, short, gate.w_short)?;
    let c = linear(tape, y, gate.w_lag)?;
    let pre = tape.add(a, b)?;
    let pre = tape.add(pre, c)?;
    let mut pre = tape.add(pre, gate.bias)?;
    if let Some((rate, rng)) = dropout {
        pre = tape.dropout(pre, rate, rng)?;
    }
    let g = tape.sigmoid(pre)?;
    let diff = tape.sub(short, long)?;
    let mixed = tape.mul(g, diff)?;
    let fused = tape.add(long, mixed)?;
    Ok((g, fused))
}

/// Attention between the long- and short-term embeddings (each attends
/// over both), with the two attended rows summed.
pub fn mutual_attention(
    tape: &mut Tape,
    long: Var,
    short: Var,
    heads: &[HeadVars],
    output: Option<Var>,
) -> Result<Var> {
    let x = tape.stack_rows(&[long, short])?;
    let mut outs = Vec::with_capacity(heads.len());
    for h in heads {
        let width = tape.value(h.query).rows();
        let q = linear(tape, x, h.query)?;
        let k = linear(tape, x, h.key)?;
        let v = linear(tape, x, h.value)?;
        outs.push(attend(tape, q, k, v, (width as f64).sqrt(), None)?.0);
    }
    let mut attended = tape.concat_cols(&outs)?;
    if let Some(w) = output {
        attended = linear(tape, attended, w)?;
    }
    Ok(tape.sum_rows(attended)?)
}

/// `sigmoid(z_u · e_v)` for each id.
pub fn predict_rating(tape: &mut Tape, fused: Var, item_table: Var, ids: &[usize]) -> Result<Var> {
    let logits = predict_logits(tape, fused, item_table, ids)?;
    Ok(tape.sigmoid(logits)?)
}

pub fn predict_logits(tape: &mut Tape, fused: Var, item_table: Var, ids: &[usize]) -> Result<Var> {
    let e = tape.lookup(item_table, ids)?;
    Ok(tape.matmul(e, fused)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    users: usize,
    items: usize,
    params: ParameterSet,
    layout: Layout,
}

impl Model {
    /// Fresh parameters: `U(-1/√d, 1/√d)` for matrices and embedding
    /// tables, zeros for biases and norm shifts, ones for norm scales.
    /// Each tensor draws from its own stream seeded by `seed` and its
    /// name, so tensors shared between variants start out identical.
    pub fn new(config: ModelConfig, users: usize, items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config, users, items);
        let bound = 1.0 / (config.dim as f64).sqrt();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
                Init::Uniform => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&name));
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())?
                }
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            users,
            items,
            params: ParameterSet { names, tensors },
            layout,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and
    /// shapes against the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, users: usize, items: usize, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config, users, items);
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in specs.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            users,
            items,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn user_count(&self) -> usize {
        self.users
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    pub fn check_instance(&self, inst: &TrainingInstance) -> Result<()> {
        let c = &self.config;
        let bad = |what: String| Err(Error::Contract(format!("instance does not match the model: {what}")));
        if inst.sessions.len() != c.sessions {
            return bad(format!(
                "{} sessions, model expects {}",
                inst.sessions.len(),
                c.sessions
            ));
        }
        if let Some(s) = inst.sessions.iter().find(|s| s.len() != c.session_len) {
            return bad(format!(
                "session of length {}, model expects {}",
                s.len(),
                c.session_len
            ));
        }
        if inst.user >= self.users {
            return bad(format!("user {} of {}", inst.user, self.users));
        }
        if let Some(i) = inst.sessions.iter().flatten().find(|&&i| i >= self.items) {
            return bad(format!("item {i} of {}", self.items));
        }
        if inst.delta == 0 || inst.delta > c.lag_buckets {
            return bad(format!("lag index {} outside [1, {}]", inst.delta, c.lag_buckets));
        }
        Ok(())
    }

    fn head_vars(bound: &[Var], h: &HeadLayout) -> HeadVars {
        HeadVars {
            query: bound[h.query],
            key: bound[h.key],
            value: bound[h.value],
        }
    }

    fn block_vars(bound: &[Var], b: &BlockLayout) -> BlockVars {
        BlockVars {
            heads: b.heads.iter().map(|h| Self::head_vars(bound, h)).collect(),
            output: bound[b.output],
            norm_scale: bound[b.norm_scale],
            norm_shift: bound[b.norm_shift],
            ffn_w1: bound[b.ffn_w1],
            ffn_b1: bound[b.ffn_b1],
            ffn_w2: bound[b.ffn_w2],
            ffn_b2: bound[b.ffn_b2],
        }
    }

    /// Item-table variable among the bound parameters.
    pub fn item_table(&self, bound: &[Var]) -> Var {
        bound[self.layout.item]
    }

    /// Records the forward pass of `inst` on `tape`. `bound` comes from
    /// [`ParameterSet::bind`]; `dropout_rng` enables dropout.
    pub fn build(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        inst: &TrainingInstance,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Graph> {
        self.check_instance(inst)?;
        let cfg = &self.config;
        let l = &self.layout;
        let rate = cfg.dropout;
        let mut rng = dropout_rng;
        macro_rules! drop {
            () => {
                rng.as_deref_mut().map(|r| (rate, r))
            };
        }

        let t = cfg.sessions;
        let m = cfg.session_len;
        let ids: Vec<usize> = inst.sessions.iter().flatten().copied().collect();
        let mut items = embed_session_items(tape, bound[l.item], &ids)?;
        if let Some((rate, r)) = drop!() {
            items = tape.dropout(items, rate, r)?;
        }

        let mut session_rows = Vec::with_capacity(t);
        match &l.short {
            Some(h) => {
                let head = Self::head_vars(bound, h);
                let d = cfg.dim;
                let q = linear(tape, items, head.query)?;
                let k = linear(tape, items, head.key)?;
                let v = linear(tape, items, head.value)?;
                for i in 0..t {
                    let qi = tape.slice_rows(q, i * m, m)?;
                    let ki = tape.slice_rows(k, i * m, m)?;
                    let vi = tape.slice_rows(v, i * m, m)?;
                    let (out, _) = attend(tape, qi, ki, vi, (d as f64).sqrt(), None)?;
                    session_rows.push(tape.sum_rows(out)?);
                }
            }
            None => {
                for i in 0..t {
                    let e = tape.slice_rows(items, i * m, m)?;
                    session_rows.push(tape.mean_rows(e)?);
                }
            }
        }
        let sessions = tape.stack_rows(&session_rows)?;
        let short = session_rows[t - 1];

        let mut blocks = Vec::with_capacity(l.blocks.len());
        let attentional = match l.position {
            Some(p) => {
                let mut x = inject_positions(tape, sessions, bound[p])?;
                for b in &l.blocks {
                    let vars = Self::block_vars(bound, b);
                    let out = multi_head_block(tape, x, &vars, cfg.norm_epsilon, drop!())?;
                    x = out.output;
                    blocks.push(out);
                }
                x
            }
            None => sessions,
        };

        let user = tape.column(bound[l.user], inst.user)?;
        let (long, pool_weights) = long_term_pool(tape, attentional, user, bound[l.long_weight], bound[l.long_bias])?;

        let (gate, fused) = match (&l.gate, &l.fusion) {
            (Some(g), _) => {
                let vars = GateVars {
                    time_embedding: bound[g.time_embedding],
                    w_long: bound[g.w_long],
                    w_short: bound[g.w_short],
                    w_lag: bound[g.w_lag],
                    bias: bound[g.bias],
                };
                let (g, z) = time_gate(tape, long, short, inst.delta, &vars, drop!())?;
                (Some(g), z)
            }
            (None, Some(f)) => {
                let heads: Vec<HeadVars> = f.heads.iter().map(|h| Self::head_vars(bound, h)).collect();
                let out = f.output.map(|o| bound[o]);
                (None, mutual_attention(tape, long, short, &heads, out)?)
            }
            (None, None) => {
                let sum = tape.add(long, short)?;
                (None, tape.scale(sum, 0.5)?)
            }
        };

        Ok(Graph {
            sessions,
            short,
            attentional,
            pool_weights,
            long,
            gate,
            fused,
            blocks,
        })
    }

    /// Evaluation-mode forward pass (no dropout) with all intermediate
    /// values.
    pub fn trace(&self, inst: &TrainingInstance) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let g = self.build(&mut tape, &bound, inst, None)?;
        let vec = |v: Var| tape.value(v).data().to_vec();
        let mut session_attention = Vec::new();
        let mut pre_residual = Vec::new();
        for b in &g.blocks {
            let mut mean = Tensor::zeros(tape.value(b.attention[0]).shape());
            for &a in &b.attention {
                for (m, v) in mean.data_mut().iter_mut().zip(tape.value(a).data()) {
                    *m += v / b.attention.len() as f64;
                }
            }
            session_attention.push(mean);
            pre_residual.push(tape.value(b.pre_residual).clone());
        }
        Ok(ForwardTrace {
            session_embeddings: tape.value(g.sessions).clone(),
            short: vec(g.short),
            attentional: tape.value(g.attentional).clone(),
            pool_weights: vec(g.pool_weights),
            long: vec(g.long),
            gate: g.gate.map(vec),
            fused: vec(g.fused),
            session_attention,
            pre_residual,
        })
    }

    /// Preference logits `z_u · e_v` for every item.
    pub fn score_all(&self, inst: &TrainingInstance) -> Result<Vec<f64>> {
        let fused = self.trace(inst)?.fused;
        Ok(self.logits_for(&fused))
    }

    /// `z_u · e_v` for every item, given a fused embedding.
    pub fn logits_for(&self, fused: &[f64]) -> Vec<f64> {
        let table = &self.params.tensors[self.layout.item];
        let (d, n) = (table.rows(), table.cols());
        let mut out = vec![0.0; n];
        for (k, &z) in fused.iter().enumerate().take(d) {
            for (o, e) in out.iter_mut().zip(table.row(k)) {
                *o += z * e;
            }
        }
        out
    }

    /// Predicted ratings `sigmoid(z_u · e_v)` for every item.
    pub fn ratings(&self, inst: &TrainingInstance) -> Result<Vec<f64>> {
        Ok(self.score_all(inst)?.into_iter().map(crate::tensor::sigmoid).collect())
    }

    /// Gate vectors for every lag bucket `1..=C` with the inputs of `inst`
    /// held fixed. `None` for variants without a time gate.
    pub fn gate_sweep(&self, inst: &TrainingInstance) -> Result<Option<Vec<Vec<f64>>>> {
        if !self.config.variant.has_time_gate() {
            return Ok(None);
        }
        let mut probe = inst.clone();
        let mut rows = Vec::with_capacity(self.config.lag_buckets);
        for delta in 1..=self.config.lag_buckets {
            probe.delta = delta;
            rows.push(self.trace(&probe)?.gate.expect("gated variant"));
        }
        Ok(Some(rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            sessions: 3,
            session_len: 2,
            lag_buckets: 5,
            blocks: 1,
            dropout: 0.0,
            variant,
            norm_epsilon: 1e-5,
        }
    }

    fn toy_instance() -> TrainingInstance {
        TrainingInstance {
            user: 1,
            sessions: vec![vec![0, 1], vec![2, 2], vec![3, 4]],
            targets: vec![5],
            lag_seconds: 10,
            delta: 3,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
        assert_eq!("-S".parse::<Variant>().unwrap(), Variant::NoShortAttention);
        assert_eq!("G+A".parse::<Variant>().unwrap(), Variant::GateAverage);
        assert_eq!("m".parse::<Variant>().unwrap(), Variant::SingleHead);
        let err = "bogus".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("gate_multihead") && err.contains("full"));
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config(Variant::Full);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    // closed form of every tensor the layout should hold
    fn expected_count(c: &ModelConfig, n: usize, m: usize) -> usize {
        let d = c.dim;
        let mut total = d * m + d * n + d * d + d;
        if c.variant != Variant::NoShortAttention {
            total += 3 * d * d;
        }
        if c.variant != Variant::NoLongAttention {
            let block = 3 * d * d + d * d + 2 * d + 4 * d * d + 4 * d + 4 * d * d + d;
            total += d * c.sessions + c.blocks * block;
        }
        match c.variant {
            Variant::GateAverage => {}
            Variant::GateSelfAttention => total += 3 * d * d,
            Variant::GateMultiHead => total += 3 * d * d + d * d,
            _ => total += d * c.lag_buckets + 3 * d * d + d,
        }
        total
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for v in Variant::ALL {
            for blocks in [1, 2] {
                let mut c = toy_config(v);
                c.blocks = blocks;
                let model = Model::new(c.clone(), 2, 8, 0).unwrap();
                assert_eq!(model.params().scalar_count(), expected_count(&c, 2, 8), "{v}");
            }
        }
    }

    #[test]
    fn initialization_follows_kind() {
        let model = Model::new(toy_config(Variant::Full), 2, 8, 3).unwrap();
        let bound = 1.0 / 8f64.sqrt();
        for (name, t) in model.params().iter() {
            if name.ends_with("norm.scale") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            } else if name.ends_with("bias")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with("shift")
            {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
                assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
            }
        }
    }

    #[test]
    fn single_head_variant_equals_full_with_one_head() {
        let mut full = toy_config(Variant::Full);
        full.heads = 1;
        let a = Model::new(full, 2, 8, 9).unwrap();
        let b = Model::new(toy_config(Variant::SingleHead), 2, 8, 9).unwrap();
        assert_eq!(a.params(), b.params());
        let inst = toy_instance();
        assert_eq!(a.trace(&inst).unwrap(), b.trace(&inst).unwrap());
    }

    #[test]
    fn shared_tensors_start_identical_across_variants() {
        let a = Model::new(toy_config(Variant::Full), 2, 8, 9).unwrap();
        let b = Model::new(toy_config(Variant::GateAverage), 2, 8, 9).unwrap();
        assert_eq!(a.params().get("item_embedding"), b.params().get("item_embedding"));
        assert_eq!(a.params().get("block0.ffn.w1"), b.params().get("block0.ffn.w1"));
    }

    #[test]
    fn instance_shape_mismatch_is_rejected() {
        let model = Model::new(toy_config(Variant::Full), 2, 8, 0).unwrap();
        let mut inst = toy_instance();
        inst.sessions.pop();
        assert!(matches!(model.trace(&inst), Err(Error::Contract(_))));
        let mut inst = toy_instance();
        inst.delta = 6;
        assert!(model.trace(&inst).is_err());
        let mut inst = toy_instance();
        inst.sessions[0][0] = 8;
        assert!(model.trace(&inst).is_err());
    }

    #[test]
    fn trace_invariants_hold_for_every_variant() {
        for v in Variant::ALL {
            let model = Model::new(toy_config(v), 2, 8, 1).unwrap();
            let tr = model.trace(&toy_instance()).unwrap();
            assert!((tr.pool_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(tr.pool_weights.iter().all(|&w| w >= 0.0));
            assert_eq!(tr.gate.is_some(), v.has_time_gate());
            if let Some(g) = &tr.gate {
                for (k, &gk) in g.iter().enumerate() {
                    assert!(gk > 0.0 && gk < 1.0);
                    let (lo, hi) = (tr.short[k].min(tr.long[k]), tr.short[k].max(tr.long[k]));
                    assert!(tr.fused[k] >= lo - 1e-12 && tr.fused[k] <= hi + 1e-12);
                }
            }
            for a in &tr.session_attention {
                for r in 0..a.rows() {
                    assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for c in r + 1..a.cols() {
                        assert_eq!(a.at(r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gate_average_of_equal_embeddings_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = t.add(x, x).unwrap();
        let z = t.scale(s, 0.5).unwrap();
        assert_eq!(t.value(z).data(), t.value(x).data());
    }

    #[test]
    fn batched_scores_match_per_item_loop() {
        let model = Model::new(toy_config(Variant::Full), 2, 8, 4).unwrap();
        let inst = toy_instance();
        let fused = model.trace(&inst).unwrap().fused;
        let batched = model.ratings(&inst).unwrap();
        let table = model.params().get("item_embedding").unwrap();
        for (v, r) in batched.iter().enumerate() {
            let e = table.column(v);
            let dot: f64 = e.iter().zip(&fused).map(|(a, b)| a * b).sum();
            assert!((r - crate::tensor::sigmoid(dot)).abs() < 1e-12);
            assert!(*r > 0.0 && *r < 1.0);
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut c = toy_config(Variant::Full);
        c.dropout = 0.5;
        let model = Model::new(c, 2, 8, 4).unwrap();
        let inst = toy_instance();
        assert_eq!(model.trace(&inst).unwrap(), model.trace(&inst).unwrap());
        let run = |seed| {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = model.build(&mut tape, &bound, &inst, Some(&mut rng)).unwrap();
            tape.value(g.fused).data().to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert_ne!(run(1), model.trace(&inst).unwrap().fused);
    }

    #[test]
    fn gate_sweep_covers_every_bucket() {
        let model = Model::new(toy_config(Variant::Full), 2, 8, 4).unwrap();
        let rows = model.gate_sweep(&toy_instance()).unwrap().unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.len() == 8));
        let avg = Model::new(toy_config(Variant::GateAverage), 2, 8, 4).unwrap();
        assert!(avg.gate_sweep(&toy_instance()).unwrap().is_none());
    }

    #[test]
    fn from_parts_checks_layout() {
        let model = Model::new(toy_config(Variant::Full), 2, 8, 4).unwrap();
        let params = model.params().clone();
        assert!(Model::from_parts(toy_config(Variant::Full), 2, 8, params.clone()).is_ok());
        assert!(Model::from_parts(toy_config(Variant::GateAverage), 2, 8, params.clone()).is_err());
        assert!(Model::from_parts(toy_config(Variant::Full), 2, 9, params).is_err());
    }
}
