//! Spiking encoder stack (student) and the full-precision teacher.
//!
//! The student is a stack of encoder blocks. Every block holds nine neuron
//! populations, evaluated in this order:
//!
//! ```text
//! query, key, value   = clip((x W^T + b) / v_th)           x = block input
//! attention           = clip(concat_h softmax(q_h k_h^T / sqrt(d_h)) v_h / v_th)
//! attn_out            = clip((attention W^T + b) / v_th)
//! norm1               = clip((g * LN(attn_out + x) + c) / v_th)
//! ff_in, ff_out       = clip((. W^T + b) / v_th)
//! norm2               = clip((g * LN(ff_out + norm1) + c) / v_th)   block output
//! ```
//!
//! The stack input is a rate code `clip(0.5 + 0.5 (E[token] + P[position]))`.
//! Populations are numbered globally: 0 is the input, block `l` sublayer `p`
//! is `1 + 9 l + p`. The same numbering indexes the ASR state of the
//! equilibrium solver and the LIF layers of the temporal simulator.

pub mod teacher;
pub mod temporal;

use serde::{Deserialize, Serialize};

use crate::data::PAD_ID;
use crate::equilibrium::{solve_fixed_point, EquilibriumSolution, SolverConfig, SteadyStateMap};
use crate::error::{Error, Result};
use crate::neuron::LifConfig;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{seeded_rng, Matrix};
use crate::quantizer::{QuantMode, QuantizedLinear, DEFAULT_EPSILON};

/// Epsilon inside every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Parameters per encoder block.
pub const PARAMS_PER_BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayerConfig {
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub num_heads: usize,
    pub quant_mode: QuantMode,
}

impl EncoderLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.intermediate_dim == 0 || self.num_heads == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_labels: usize,
    pub quant: QuantMode,
    pub lif: LifConfig,
    pub epsilon: f64,
    pub binary_scale: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            max_len: 32,
            hidden: 64,
            intermediate: 128,
            heads: 2,
            layers: 2,
            num_labels: 2,
            quant: QuantMode::FullPrecision,
            lif: LifConfig::default(),
            epsilon: DEFAULT_EPSILON,
            binary_scale: false,
        }
    }
}

impl StudentConfig {
    pub fn layer_config(&self) -> EncoderLayerConfig {
        EncoderLayerConfig {
            hidden_dim: self.hidden,
            intermediate_dim: self.intermediate,
            num_heads: self.heads,
            quant_mode: self.quant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_config().validate()?;
        self.lif.validate()?;
        if self.layers == 0 {
            return Err(Error::config("the stack needs at least one layer"));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.num_labels < 2 {
            return Err(Error::config(
                "vocab_size and max_len must be positive and num_labels at least 2",
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

/// The nine populations of one encoder block, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sublayer {
    Query,
    Key,
    Value,
    Attention,
    AttnOut,
    Norm1,
    FfIn,
    FfOut,
    Norm2,
}

impl Sublayer {
    pub const ALL: [Sublayer; 9] = [
        Sublayer::Query,
        Sublayer::Key,
        Sublayer::Value,
        Sublayer::Attention,
        Sublayer::AttnOut,
        Sublayer::Norm1,
        Sublayer::FfIn,
        Sublayer::FfOut,
        Sublayer::Norm2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::Query => "query",
            Sublayer::Key => "key",
            Sublayer::Value => "value",
            Sublayer::Attention => "attention",
            Sublayer::AttnOut => "attn_out",
            Sublayer::Norm1 => "norm1",
            Sublayer::FfIn => "ff_in",
            Sublayer::FfOut => "ff_out",
            Sublayer::Norm2 => "norm2",
        }
    }

    fn offset(self) -> usize {
        self as usize
    }

    /// Parameter offsets (weight, bias) within the block for linear sublayers,
    /// (gain, bias) for normalizations.
    fn param_offsets(self) -> Option<(usize, usize)> {
        match self {
            Sublayer::Query => Some((0, 1)),
            Sublayer::Key => Some((2, 3)),
            Sublayer::Value => Some((4, 5)),
            Sublayer::AttnOut => Some((6, 7)),
            Sublayer::FfIn => Some((8, 9)),
            Sublayer::FfOut => Some((10, 11)),
            Sublayer::Norm1 => Some((12, 13)),
            Sublayer::Norm2 => Some((14, 15)),
            Sublayer::Attention => None,
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, Sublayer::Attention | Sublayer::Norm1 | Sublayer::Norm2)
    }
}

/// A neuron population of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Population {
    Input,
    Block(usize, Sublayer),
}

impl Population {
    pub fn index(self) -> usize {
        match self {
            Population::Input => 0,
            Population::Block(l, s) => 1 + 9 * l + s.offset(),
        }
    }

    pub fn from_index(index: usize) -> Self {
        if index == 0 {
            Population::Input
        } else {
            let k = index - 1;
            Population::Block(k / 9, Sublayer::ALL[k % 9])
        }
    }

    pub fn name(self) -> String {
        match self {
            Population::Input => "input".to_string(),
            Population::Block(l, s) => format!("block{l}.{}", s.name()),
        }
    }

    /// Populations whose ASR this one reads.
    pub fn inputs(self) -> Vec<Population> {
        let Population::Block(l, s) = self else {
            return Vec::new();
        };
        let b = |s| Population::Block(l, s);
        let block_input = block_input(l);
        match s {
            Sublayer::Query | Sublayer::Key | Sublayer::Value => vec![block_input],
            Sublayer::Attention => vec![b(Sublayer::Query), b(Sublayer::Key), b(Sublayer::Value)],
            Sublayer::AttnOut => vec![b(Sublayer::Attention)],
            Sublayer::Norm1 => vec![b(Sublayer::AttnOut), block_input],
            Sublayer::FfIn => vec![b(Sublayer::Norm1)],
            Sublayer::FfOut => vec![b(Sublayer::FfIn)],
            Sublayer::Norm2 => vec![b(Sublayer::FfOut), b(Sublayer::Norm1)],
        }
    }
}

/// Population feeding block `l`.
pub fn block_input(l: usize) -> Population {
    if l == 0 {
        Population::Input
    } else {
        Population::Block(l - 1, Sublayer::Norm2)
    }
}

/// Output population of block `l`.
pub fn block_output(l: usize) -> Population {
    Population::Block(l, Sublayer::Norm2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikingEncoderLayer {
    pub query: QuantizedLinear,
    pub key: QuantizedLinear,
    pub value: QuantizedLinear,
    pub attn_out: QuantizedLinear,
    pub ff_in: QuantizedLinear,
    pub ff_out: QuantizedLinear,
    pub norm1_gain: Matrix,
    pub norm1_bias: Matrix,
    pub norm2_gain: Matrix,
    pub norm2_bias: Matrix,
}

impl SpikingEncoderLayer {
    pub fn linear(&self, s: Sublayer) -> Option<&QuantizedLinear> {
        match s {
            Sublayer::Query => Some(&self.query),
            Sublayer::Key => Some(&self.key),
            Sublayer::Value => Some(&self.value),
            Sublayer::AttnOut => Some(&self.attn_out),
            Sublayer::FfIn => Some(&self.ff_in),
            Sublayer::FfOut => Some(&self.ff_out),
            _ => None,
        }
    }

    /// The six projections in parameter order.
    pub fn linears(&self) -> [&QuantizedLinear; 6] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.attn_out,
            &self.ff_in,
            &self.ff_out,
        ]
    }

    pub fn linears_mut(&mut self) -> [&mut QuantizedLinear; 6] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_out,
            &mut self.ff_in,
            &mut self.ff_out,
        ]
    }

    fn params(&self) -> [&Matrix; PARAMS_PER_BLOCK] {
        [
            &self.query.latent,
            &self.query.bias,
            &self.key.latent,
            &self.key.bias,
            &self.value.latent,
            &self.value.bias,
            &self.attn_out.latent,
            &self.attn_out.bias,
            &self.ff_in.latent,
            &self.ff_in.bias,
            &self.ff_out.latent,
            &self.ff_out.bias,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Matrix; PARAMS_PER_BLOCK] {
        [
            &mut self.query.latent,
            &mut self.query.bias,
            &mut self.key.latent,
            &mut self.key.bias,
            &mut self.value.latent,
            &mut self.value.bias,
            &mut self.attn_out.latent,
            &mut self.attn_out.bias,
            &mut self.ff_in.latent,
            &mut self.ff_in.bias,
            &mut self.ff_out.latent,
            &mut self.ff_out.bias,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }
}

const BLOCK_PARAM_NAMES: [&str; PARAMS_PER_BLOCK] = [
    "query.weight",
    "query.bias",
    "key.weight",
    "key.bias",
    "value.weight",
    "value.bias",
    "attn_out.weight",
    "attn_out.bias",
    "ff_in.weight",
    "ff_in.bias",
    "ff_out.weight",
    "ff_out.bias",
    "norm1.gain",
    "norm1.bias",
    "norm2.gain",
    "norm2.bias",
];

/// Block parameters whose effective value is a quantized weight.
const QUANTIZED_OFFSETS: [usize; 6] = [0, 2, 4, 6, 8, 10];

/// The spiking student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStack {
    pub config: StudentConfig,
    /// `vocab x hidden`.
    pub tok_emb: Matrix,
    /// `max_len x hidden`.
    pub pos_emb: Matrix,
    pub layers: Vec<SpikingEncoderLayer>,
    /// Full-precision classifier, `labels x hidden`.
    pub cls_w: Matrix,
    pub cls_b: Matrix,
}

impl EncoderStack {
    pub fn init(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let (d, di, v_th) = (config.hidden, config.intermediate, config.lif.v_th);
        let mode = config.quant;
        let tok_emb = Matrix::random_uniform(config.vocab_size, d, 1.0, &mut rng);
        let pos_emb = Matrix::random_uniform(config.max_len, d, 0.1, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut lin = |i, o| {
                let mut l = QuantizedLinear::init(i, o, mode, 0.5 * v_th, &mut rng);
                l.epsilon = config.epsilon;
                l.binary_scale = config.binary_scale;
                l
            };
            let query = lin(d, d);
            let key = lin(d, d);
            let value = lin(d, d);
            let attn_out = lin(d, d);
            let ff_in = lin(d, di);
            let ff_out = lin(di, d);
            layers.push(SpikingEncoderLayer {
                query,
                key,
                value,
                attn_out,
                ff_in,
                ff_out,
                norm1_gain: Matrix::filled(1, d, 0.25 * v_th),
                norm1_bias: Matrix::filled(1, d, 0.5 * v_th),
                norm2_gain: Matrix::filled(1, d, 0.25 * v_th),
                norm2_bias: Matrix::filled(1, d, 0.5 * v_th),
            });
        }
        let cls_w = Matrix::init_fan_in(config.num_labels, d, d, &mut rng);
        let cls_b = Matrix::zeros(1, config.num_labels);
        let mut stack = Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            cls_w,
            cls_b,
        };
        stack.refresh_quant_stats()?;
        Ok(stack)
    }

    /// Switches every quantized projection to `mode`, keeping latent weights.
    pub fn set_quant_mode(&mut self, mode: QuantMode) -> Result<()> {
        self.config.quant = mode;
        for layer in &mut self.layers {
            for lin in layer.linears_mut() {
                lin.mode = mode;
            }
        }
        self.refresh_quant_stats()
    }

    pub fn refresh_quant_stats(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            for lin in layer.linears_mut() {
                lin.refresh_stats()?;
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_populations(&self) -> usize {
        1 + 9 * self.layers.len()
    }

    pub fn population_width(&self, pop: Population) -> usize {
        match pop {
            Population::Block(_, Sublayer::FfIn) => self.config.intermediate,
            _ => self.config.hidden,
        }
    }

    pub fn population_names(&self) -> Vec<String> {
        (0..self.num_populations())
            .map(|i| Population::from_index(i).name())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        4 + PARAMS_PER_BLOCK * self.layers.len()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.layers.len() {
            names.extend(BLOCK_PARAM_NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.params());
        }
        out.push(&self.cls_w);
        out.push(&self.cls_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.params_mut());
        }
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }

    /// Index of a block parameter in [`EncoderStack::params`].
    pub fn block_param_index(layer: usize, offset: usize) -> usize {
        2 + PARAMS_PER_BLOCK * layer + offset
    }

    /// Whether parameter `index` is a latent weight seen through a quantizer.
    pub fn is_quantized_param(&self, index: usize) -> bool {
        if !self.config.quant.is_quantized() || index < 2 {
            return false;
        }
        let k = index - 2;
        k / PARAMS_PER_BLOCK < self.layers.len() && QUANTIZED_OFFSETS.contains(&(k % PARAMS_PER_BLOCK))
    }

    /// Parameters as seen by the forward pass: quantized projections are
    /// replaced by their dequantized effective weights.
    pub fn effective_params(&self) -> Result<Vec<Matrix>> {
        let mut out: Vec<Matrix> = Vec::with_capacity(self.num_params());
        out.push(self.tok_emb.clone());
        out.push(self.pos_emb.clone());
        for layer in &self.layers {
            for (k, p) in layer.params().into_iter().enumerate() {
                let lin = match k {
                    0 => Some(&layer.query),
                    2 => Some(&layer.key),
                    4 => Some(&layer.value),
                    6 => Some(&layer.attn_out),
                    8 => Some(&layer.ff_in),
                    10 => Some(&layer.ff_out),
                    _ => None,
                };
                out.push(match lin {
                    Some(l) => l.effective_weight()?,
                    None => p.clone(),
                });
            }
        }
        out.push(self.cls_w.clone());
        out.push(self.cls_b.clone());
        Ok(out)
    }

    /// Steady-state map of the stack on one token sequence.
    pub fn graph(&self, tokens: &[usize]) -> Result<StudentGraph<'_>> {
        StudentGraph::new(self, tokens)
    }

    /// Equilibrium forward pass: solves every population's steady-state ASR
    /// and applies the classifier to the pooled final block output.
    pub fn forward_train(&self, tokens: &[usize], solver: &SolverConfig) -> Result<StudentOutput> {
        let graph = self.graph(tokens)?;
        let solution = solve_fixed_point(&graph, solver)?;
        let logits = graph.logits(&solution.asr_star)?;
        Ok(StudentOutput {
            tokens: graph.tokens.clone(),
            solution,
            logits,
            num_layers: self.layers.len(),
        })
    }
}

/// Result of [`EncoderStack::forward_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    /// Tokens actually simulated (trailing padding removed).
    pub tokens: Vec<usize>,
    pub solution: EquilibriumSolution,
    pub logits: Vec<f64>,
    num_layers: usize,
}

impl StudentOutput {
    /// Equilibrium ASR of every block output, `seq x hidden` each.
    pub fn block_outputs(&self) -> Vec<&Matrix> {
        (0..self.num_layers)
            .map(|l| &self.solution.asr_star[block_output(l).index()])
            .collect()
    }

    pub fn predicted_label(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Drops trailing padding, keeping at least one token.
pub fn trim_padding(tokens: &[usize]) -> &[usize] {
    let mut end = tokens.len();
    while end > 1 && tokens[end - 1] == PAD_ID {
        end -= 1;
    }
    &tokens[..end]
}

/// Lazily registered parameter leaves on a tape.
pub struct ParamLeaves<'p> {
    values: &'p [Matrix],
    vars: Vec<Option<Var>>,
}

impl<'p> ParamLeaves<'p> {
    pub fn new(values: &'p [Matrix]) -> Self {
        Self {
            values,
            vars: vec![None; values.len()],
        }
    }

    pub fn get(&mut self, tape: &mut Tape, index: usize) -> Var {
        *self.vars[index].get_or_insert_with(|| tape.leaf(self.values[index].clone()))
    }

    /// Parameters registered so far, with their index.
    pub fn registered(&self) -> Vec<(usize, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }
}

/// `clip((x W^T + b) / v_th)` on the tape.
pub fn linear_population(tape: &mut Tape, x: Var, w: Var, b: Var, v_th: f64) -> Result<Var> {
    let h = tape.matmul_transpose_b(x, w)?;
    let h = tape.add_row(h, b)?;
    let h = tape.scale(h, 1.0 / v_th);
    Ok(tape.clip01(h))
}

/// Multi-head softmax attention on the tape, without the final clip.
pub fn attention_mix(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let d = qv.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} cannot be split into {heads} heads")));
    }
    if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
        return Err(Error::shape(format!(
            "attention operands q {:?}, k {:?}, v {:?} are inconsistent",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_transpose_b(qh, kh)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax_rows(s);
        parts.push(tape.matmul(p, vh)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_cols(&parts)
    }
}

/// `clip((g * LN(a + b) + c) / v_th)` on the tape.
pub fn norm_population(tape: &mut Tape, a: Var, b: Var, gain: Var, bias: Var, v_th: f64) -> Result<Var> {
    let s = tape.add(a, b)?;
    let n = tape.layer_norm_rows(s, LN_EPS);
    let n = tape.mul_row(n, gain)?;
    let n = tape.add_row(n, bias)?;
    let n = tape.scale(n, 1.0 / v_th);
    Ok(tape.clip01(n))
}

fn check_rates(m: &Matrix, what: &str) -> Result<()> {
    if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!("{what} has entries outside [0, 1]")));
    }
    Ok(())
}

/// Steady-state surrogate of one quantized linear sublayer:
/// `clip((a W_eff^T + b) / v_th)` for a `seq x in` ASR matrix.
pub fn steady_state_layer(asr_in: &Matrix, layer: &QuantizedLinear, v_th: f64) -> Result<Matrix> {
    check_rates(asr_in, "input ASR")?;
    if !(v_th > 0.0) {
        return Err(Error::Domain(format!("v_th must be positive, got {v_th}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(asr_in.clone());
    let w = tape.leaf(layer.effective_weight()?);
    let b = tape.leaf(layer.bias.clone());
    let y = linear_population(&mut tape, x, w, b, v_th)?;
    Ok(tape.value(y).clone())
}

/// Row-normalized attention weights per head, `seq x seq` each.
pub fn attention_weights(q: &Matrix, k: &Matrix, heads: usize) -> Result<Vec<Matrix>> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) || k.cols() != d {
        return Err(Error::shape(format!(
            "cannot split q {:?} / k {:?} into {heads} heads",
            q.shape(),
            k.shape()
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut w = Matrix::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            let row = w.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * crate::numerics::dot(qi, &k.row(j)[h * dh..(h + 1) * dh]);
            }
            crate::numerics::tape::softmax_in_place(row);
        }
        out.push(w);
    }
    Ok(out)
}

/// Spiking attention on ASR inputs: per head
/// `softmax(q_h k_h^T / sqrt(d_h)) v_h`, heads concatenated.
pub fn spiking_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let y = attention_mix(&mut tape, qv, kv, vv, heads)?;
    Ok(tape.value(y).clone())
}

/// The steady-state map of a stack on one token sequence.
pub struct StudentGraph<'a> {
    stack: &'a EncoderStack,
    eff: Vec<Matrix>,
    tokens: Vec<usize>,
}

impl<'a> StudentGraph<'a> {
    pub fn new(stack: &'a EncoderStack, tokens: &[usize]) -> Result<Self> {
        Self::with_params(stack, stack.effective_params()?, tokens)
    }

    /// Same map with explicitly supplied effective parameters.
    pub fn with_params(stack: &'a EncoderStack, eff: Vec<Matrix>, tokens: &[usize]) -> Result<Self> {
        let cfg = &stack.config;
        if tokens.is_empty() {
            return Err(Error::shape("empty token sequence"));
        }
        let tokens = trim_padding(tokens);
        if tokens.len() > cfg.max_len {
            return Err(Error::shape(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                cfg.max_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::shape(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if eff.len() != stack.num_params() {
            return Err(Error::shape("parameter list does not match the stack"));
        }
        Ok(Self {
            stack,
            eff,
            tokens: tokens.to_vec(),
        })
    }

    pub fn stack(&self) -> &EncoderStack {
        self.stack
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn effective_params(&self) -> &[Matrix] {
        &self.eff
    }

    /// Builds population `index` from the ASR variables of its inputs.
    pub fn build_population(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves<'_>,
        index: usize,
        state: &[Option<Var>],
    ) -> Result<Var> {
        let v_th = self.stack.config.lif.v_th;
        let pop = Population::from_index(index);
        let input = |p: Population| {
            state
                .get(p.index())
                .copied()
                .flatten()
                .ok_or_else(|| Error::shape(format!("missing input {} for {}", p.name(), pop.name())))
        };
        match pop {
            Population::Input => {
                let e = leaves.get(tape, 0);
                let p = leaves.get(tape, 1);
                let positions: Vec<usize> = (0..self.tokens.len()).collect();
                let te = tape.gather_rows(e, &self.tokens)?;
                let pe = tape.gather_rows(p, &positions)?;
                let s = tape.add(te, pe)?;
                let s = tape.scale(s, 0.5);
                let s = tape.add_scalar(s, 0.5);
                Ok(tape.clip01(s))
            }
            Population::Block(l, s) => {
                let param = |k: usize| EncoderStack::block_param_index(l, k);
                match s {
                    Sublayer::Attention => {
                        let q = input(Population::Block(l, Sublayer::Query))?;
                        let k = input(Population::Block(l, Sublayer::Key))?;
                        let v = input(Population::Block(l, Sublayer::Value))?;
                        let mix = attention_mix(tape, q, k, v, self.stack.config.heads)?;
                        let mix = tape.scale(mix, 1.0 / v_th);
                        Ok(tape.clip01(mix))
                    }
                    Sublayer::Norm1 | Sublayer::Norm2 => {
                        let ins = pop.inputs();
                        let a = input(ins[0])?;
                        let b = input(ins[1])?;
                        let (go, bo) = s.param_offsets().expect("norm has parameters");
                        let g = leaves.get(tape, param(go));
                        let c = leaves.get(tape, param(bo));
                        norm_population(tape, a, b, g, c, v_th)
                    }
                    _ => {
                        let x = input(pop.inputs()[0])?;
                        let (wo, bo) = s.param_offsets().expect("linear has parameters");
                        let w = leaves.get(tape, param(wo));
                        let b = leaves.get(tape, param(bo));
                        linear_population(tape, x, w, b, v_th)
                    }
                }
            }
        }
    }

    /// Classifier on the token-averaged final block output.
    pub fn build_logits(&self, tape: &mut Tape, leaves: &mut ParamLeaves<'_>, last: Var) -> Result<Var> {
        let n = self.stack.num_params();
        let pooled = tape.mean_rows(last);
        let w = leaves.get(tape, n - 2);
        let b = leaves.get(tape, n - 1);
        let z = tape.matmul_transpose_b(pooled, w)?;
        tape.add_row(z, b)
    }

    /// Logits for a given (solved) state.
    pub fn logits(&self, state: &[Matrix]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new(&self.eff);
        let last = tape.leaf(state[state.len() - 1].clone());
        let z = self.build_logits(&mut tape, &mut leaves, last)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Rate-coded stack input, `seq x hidden`.
    pub fn input_rates(&self) -> Result<Matrix> {
        self.eval_layer(0, &[])
    }
}

impl SteadyStateMap for StudentGraph<'_> {
    fn layer_count(&self) -> usize {
        self.stack.num_populations()
    }

    fn layer_name(&self, index: usize) -> String {
        Population::from_index(index).name()
    }

    fn initial_state(&self) -> Vec<Matrix> {
        (0..self.layer_count())
            .map(|i| Matrix::zeros(self.seq_len(), self.stack.population_width(Population::from_index(i))))
            .collect()
    }

    fn eval_layer(&self, index: usize, state: &[Matrix]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new(&self.eff);
        let mut vars = vec![None; self.layer_count()];
        for p in Population::from_index(index).inputs() {
            let i = p.index();
            vars[i] = Some(tape.leaf(state[i].clone()));
        }
        let y = self.build_population(&mut tape, &mut leaves, index, &vars)?;
        Ok(tape.value(y).clone())
    }
}
