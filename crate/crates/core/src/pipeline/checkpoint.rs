//! Versioned, stage-tagged JSON checkpoints.
//!
//! Tensors are stored by name as row-major `f64` arrays. Quantized students
//! also carry their inference codes packed two bits per weight (hex), which
//! are checked against the latent weights on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::teacher::{TeacherConfig, TeacherModel};
use crate::model::{EncoderStack, StudentConfig};
use crate::numerics::Matrix;
use crate::quantizer::{pack_codes, unpack_codes, QuantMode};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Training stage a checkpoint was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    /// Freshly initialized student, no distillation.
    Init,
    Distilled,
    Finetuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Init => "init",
            Stage::Distilled => "distilled",
            Stage::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackedKernel {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub mode: QuantMode,
    pub scale: f64,
    pub codes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelPayload {
    Teacher {
        config: TeacherConfig,
        tensors: Vec<NamedTensor>,
    },
    Student {
        config: StudentConfig,
        tensors: Vec<NamedTensor>,
        packed: Vec<PackedKernel>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: Stage,
    pub tokenizer: Tokenizer,
    pub label_names: Vec<String>,
    pub model: ModelPayload,
}

fn named(names: Vec<String>, params: Vec<&Matrix>) -> Vec<NamedTensor> {
    names
        .into_iter()
        .zip(params)
        .map(|(name, m)| NamedTensor {
            name,
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        })
        .collect()
}

fn restore(names: &[String], targets: Vec<&mut Matrix>, tensors: &[NamedTensor]) -> Result<()> {
    if tensors.len() != targets.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            targets.len(),
            tensors.len()
        )));
    }
    for ((name, target), t) in names.iter().zip(targets).zip(tensors) {
        if &t.name != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", t.name)));
        }
        if (t.rows, t.cols) != target.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {}x{} does not match {:?}",
                t.rows,
                t.cols,
                target.shape()
            )));
        }
        let m = Matrix::new(t.rows, t.cols, t.data.clone()).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if !m.is_finite() {
            return Err(Error::Checkpoint(format!("{name}: non-finite values")));
        }
        *target = m;
    }
    Ok(())
}

fn packed_kernels(stack: &EncoderStack) -> Result<Vec<PackedKernel>> {
    let names = stack.param_names();
    let mut out = Vec::new();
    for (l, layer) in stack.layers.iter().enumerate() {
        for (k, lin) in layer.linears().into_iter().enumerate() {
            if let Some((codes, _, scale)) = lin.quantize()? {
                out.push(PackedKernel {
                    name: names[EncoderStack::block_param_index(l, 2 * k)].clone(),
                    rows: lin.out_dim(),
                    cols: lin.in_dim(),
                    mode: lin.mode,
                    scale,
                    codes: hex::encode(pack_codes(&codes.codes)?),
                });
            }
        }
    }
    Ok(out)
}

impl Checkpoint {
    pub fn teacher(model: &TeacherModel, tokenizer: &Tokenizer, label_names: &[String]) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            stage: Stage::Teacher,
            tokenizer: tokenizer.clone(),
            label_names: label_names.to_vec(),
            model: ModelPayload::Teacher {
                config: model.config,
                tensors: named(model.param_names(), model.params.iter().collect()),
            },
        }
    }

    pub fn student(stack: &EncoderStack, stage: Stage, tokenizer: &Tokenizer, label_names: &[String]) -> Result<Self> {
        if stage == Stage::Teacher {
            return Err(Error::Checkpoint("a student cannot carry the teacher stage".into()));
        }
        Ok(Self {
            version: CHECKPOINT_VERSION,
            stage,
            tokenizer: tokenizer.clone(),
            label_names: label_names.to_vec(),
            model: ModelPayload::Student {
                config: stack.config,
                tensors: named(stack.param_names(), stack.params()),
                packed: packed_kernels(stack)?,
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let is_teacher = matches!(ck.model, ModelPayload::Teacher { .. });
        if is_teacher != (ck.stage == Stage::Teacher) {
            return Err(Error::Checkpoint(
                "checkpoint stage does not match its model kind".into(),
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn kind(&self) -> &'static str {
        match self.model {
            ModelPayload::Teacher { .. } => "teacher",
            ModelPayload::Student { .. } => "student",
        }
    }

    pub fn to_teacher(&self) -> Result<TeacherModel> {
        let ModelPayload::Teacher { config, tensors } = &self.model else {
            return Err(Error::Checkpoint(format!(
                "expected a teacher checkpoint, found a {}",
                self.kind()
            )));
        };
        let mut model = TeacherModel::zeros(*config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let names = model.param_names();
        restore(&names, model.params.iter_mut().collect(), tensors)?;
        self.check_vocab(config.vocab_size, config.num_labels)?;
        Ok(model)
    }

    pub fn to_student(&self) -> Result<EncoderStack> {
        let ModelPayload::Student {
            config,
            tensors,
            packed,
        } = &self.model
        else {
            return Err(Error::Checkpoint(format!(
                "expected a student checkpoint, found a {}",
                self.kind()
            )));
        };
        let mut stack = EncoderStack::init(*config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let names = stack.param_names();
        restore(&names, stack.params_mut(), tensors)?;
        stack.refresh_quant_stats()?;
        if packed_kernels(&stack)? != *packed {
            return Err(Error::Checkpoint("packed codes do not match the latent weights".into()));
        }
        for p in packed {
            let bytes = hex::decode(&p.codes).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
            unpack_codes(&bytes, p.rows * p.cols)?;
        }
        self.check_vocab(config.vocab_size, config.num_labels)?;
        Ok(stack)
    }

    fn check_vocab(&self, vocab_size: usize, num_labels: usize) -> Result<()> {
        if self.tokenizer.vocab_size() != vocab_size {
            return Err(Error::Checkpoint(format!(
                "tokenizer has {} entries, model vocabulary {vocab_size}",
                self.tokenizer.vocab_size()
            )));
        }
        if self.label_names.len() != num_labels {
            return Err(Error::Checkpoint("label names do not match the classifier".into()));
        }
        Ok(())
    }
}
