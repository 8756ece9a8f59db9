//! Full-precision, non-spiking transformer encoder used as the KD teacher.
//!
//! Post-norm blocks: `h = LN(x + MHA(x))`, `y = LN(h + W2 gelu(W1 h))`,
//! each LN with a learned gain and bias. Logits come from the
//! token-averaged output of the last block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_mix, trim_padding, ParamLeaves, LN_EPS};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{seeded_rng, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_labels: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            max_len: 32,
            hidden: 64,
            intermediate: 128,
            heads: 2,
            layers: 2,
            num_labels: 2,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.intermediate == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::config("teacher dimensions must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config("teacher hidden size must be divisible by heads"));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.num_labels < 2 {
            return Err(Error::config("teacher vocabulary, length and labels are invalid"));
        }
        Ok(())
    }
}

pub const TEACHER_PARAMS_PER_BLOCK: usize = 16;

const TEACHER_BLOCK_NAMES: [&str; TEACHER_PARAMS_PER_BLOCK] = [
    "query.weight",
    "query.bias",
    "key.weight",
    "key.bias",
    "value.weight",
    "value.bias",
    "attn_out.weight",
    "attn_out.bias",
    "ln1.gain",
    "ln1.bias",
    "ff_in.weight",
    "ff_in.bias",
    "ff_out.weight",
    "ff_out.bias",
    "ln2.gain",
    "ln2.bias",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub config: TeacherConfig,
    /// Embeddings followed by 16 tensors per block and the classifier,
    /// in the order of [`TeacherModel::param_names`].
    pub params: Vec<Matrix>,
}

/// Result of [`TeacherModel::teacher_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    /// Output of every block, `seq x hidden`.
    pub hiddens: Vec<Matrix>,
    pub logits: Vec<f64>,
}

impl TeacherModel {
    pub fn init(config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let (d, di) = (config.hidden, config.intermediate);
        let mut params = vec![
            Matrix::random_uniform(config.vocab_size, d, 1.0, &mut rng),
            Matrix::random_uniform(config.max_len, d, 0.1, &mut rng),
        ];
        for _ in 0..config.layers {
            for _ in 0..4 {
                params.push(Matrix::init_fan_in(d, d, d, &mut rng));
                params.push(Matrix::zeros(1, d));
            }
            params.push(Matrix::filled(1, d, 1.0));
            params.push(Matrix::zeros(1, d));
            params.push(Matrix::init_fan_in(di, d, d, &mut rng));
            params.push(Matrix::zeros(1, di));
            params.push(Matrix::init_fan_in(d, di, di, &mut rng));
            params.push(Matrix::zeros(1, d));
            params.push(Matrix::filled(1, d, 1.0));
            params.push(Matrix::zeros(1, d));
        }
        params.push(Matrix::init_fan_in(config.num_labels, d, d, &mut rng));
        params.push(Matrix::zeros(1, config.num_labels));
        Ok(Self { config, params })
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(config: TeacherConfig) -> Result<Self> {
        let mut t = Self::init(config, 0)?;
        for p in &mut t.params {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        Ok(t)
    }

    pub fn num_layers(&self) -> usize {
        self.config.layers
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.config.layers {
            names.extend(TEACHER_BLOCK_NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    /// Checks that the parameter list matches the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let fresh = Self::init(self.config, 0)?;
        if fresh.params.len() != self.params.len()
            || fresh
                .params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint(
                "teacher tensors do not match its configuration".into(),
            ));
        }
        Ok(())
    }

    fn check_tokens<'t>(&self, tokens: &'t [usize]) -> Result<&'t [usize]> {
        if tokens.is_empty() {
            return Err(Error::shape("empty token sequence"));
        }
        let tokens = trim_padding(tokens);
        if tokens.len() > self.config.max_len {
            return Err(Error::shape(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::shape(format!("token id {bad} outside teacher vocabulary")));
        }
        Ok(tokens)
    }

    /// Builds the forward pass on a tape; returns block outputs and logits.
    pub fn build(&self, tape: &mut Tape, leaves: &mut ParamLeaves<'_>, tokens: &[usize]) -> Result<(Vec<Var>, Var)> {
        let tokens = self.check_tokens(tokens)?;
        let cfg = &self.config;
        let e = leaves.get(tape, 0);
        let p = leaves.get(tape, 1);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let te = tape.gather_rows(e, tokens)?;
        let pe = tape.gather_rows(p, &positions)?;
        let mut x = tape.add(te, pe)?;
        let mut hiddens = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let base = 2 + TEACHER_PARAMS_PER_BLOCK * l;
            let q = dense(tape, leaves, x, base)?;
            let k = dense(tape, leaves, x, base + 2)?;
            let v = dense(tape, leaves, x, base + 4)?;
            let mix = attention_mix(tape, q, k, v, cfg.heads)?;
            let o = dense(tape, leaves, mix, base + 6)?;
            let r = tape.add(x, o)?;
            let h = affine_norm(tape, leaves, r, base + 8)?;
            let f = dense(tape, leaves, h, base + 10)?;
            let f = tape.gelu(f);
            let f = dense(tape, leaves, f, base + 12)?;
            let r = tape.add(h, f)?;
            x = affine_norm(tape, leaves, r, base + 14)?;
            hiddens.push(x);
        }
        let n = self.params.len();
        let pooled = tape.mean_rows(x);
        let w = leaves.get(tape, n - 2);
        let b = leaves.get(tape, n - 1);
        let z = tape.matmul_transpose_b(pooled, w)?;
        let logits = tape.add_row(z, b)?;
        Ok((hiddens, logits))
    }

    pub fn teacher_forward(&self, tokens: &[usize]) -> Result<TeacherOutput> {
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new(&self.params);
        let (hiddens, logits) = self.build(&mut tape, &mut leaves, tokens)?;
        Ok(TeacherOutput {
            hiddens: hiddens.iter().map(|h| tape.value(*h).clone()).collect(),
            logits: tape.value(logits).data().to_vec(),
        })
    }
}

/// `x W^T + b` with weight and bias at `param`, `param + 1`.
fn dense(tape: &mut Tape, leaves: &mut ParamLeaves<'_>, x: Var, param: usize) -> Result<Var> {
    let w = leaves.get(tape, param);
    let b = leaves.get(tape, param + 1);
    let y = tape.matmul_transpose_b(x, w)?;
    tape.add_row(y, b)
}

/// `gain * LN(x) + bias` with gain and bias at `param`, `param + 1`.
fn affine_norm(tape: &mut Tape, leaves: &mut ParamLeaves<'_>, x: Var, param: usize) -> Result<Var> {
    let gain = leaves.get(tape, param);
    let bias = leaves.get(tape, param + 1);
    let n = tape.layer_norm_rows(x, LN_EPS);
    let n = tape.mul_row(n, gain)?;
    tape.add_row(n, bias)
}
