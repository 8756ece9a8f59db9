//! 1-bit and 1.58-bit weight quantization with latent full-precision weights.
//!
//! * 1-bit: `q = sign(w - alpha)` with `alpha = mean(w)` and `sign(0) = -1`.
//! * 1.58-bit: `q = round(clip(w / (beta + eps), -1, 1))` with
//!   `beta = mean(|w|)`; the layer output is scaled by `beta`.
//!
//! Training uses the dequantized weight in the forward pass and passes
//! gradients straight through to the latent weights. Inference uses the
//! integer codes directly, accumulating one code per incoming spike.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    #[serde(rename = "fp")]
    FullPrecision,
    #[serde(rename = "1bit")]
    Binary1Bit,
    #[serde(rename = "1.58bit")]
    Ternary158Bit,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::FullPrecision => "fp",
            QuantMode::Binary1Bit => "1bit",
            QuantMode::Ternary158Bit => "1.58bit",
        }
    }

    pub fn is_quantized(self) -> bool {
        self != QuantMode::FullPrecision
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(QuantMode::FullPrecision),
            "1bit" => Ok(QuantMode::Binary1Bit),
            "1.58bit" => Ok(QuantMode::Ternary158Bit),
            other => Err(Error::config(format!(
                "unknown quantization mode {other:?} (expected fp, 1bit or 1.58bit)"
            ))),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major matrix of integer weight codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantCodes {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
}

impl QuantCodes {
    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.codes[r * self.cols + c]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(self.rows, self.cols, self.codes.iter().map(|&c| f64::from(c)).collect())
            .expect("code buffer matches its shape")
    }
}

fn check_quantizable(w: &Matrix) -> Result<()> {
    if w.is_empty() {
        return Err(Error::shape("cannot quantize an empty matrix"));
    }
    if !w.is_finite() {
        return Err(Error::Numeric("cannot quantize non-finite weights".into()));
    }
    Ok(())
}

/// Zero-mean signum binarization; returns the codes and the centering `alpha`.
pub fn quantize_1bit(w: &Matrix) -> Result<(QuantCodes, f64)> {
    check_quantizable(w)?;
    let alpha = w.mean();
    let codes = w.data().iter().map(|&v| if v - alpha > 0.0 { 1 } else { -1 }).collect();
    Ok((
        QuantCodes {
            rows: w.rows(),
            cols: w.cols(),
            codes,
        },
        alpha,
    ))
}

/// Absmean round-clip ternarization; returns the codes and the scale `beta`.
pub fn quantize_158bit(w: &Matrix, epsilon: f64) -> Result<(QuantCodes, f64)> {
    check_quantizable(w)?;
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let beta = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    let codes = w
        .data()
        .iter()
        // f64::round rounds half away from zero
        .map(|&v| (v / (beta + epsilon)).clamp(-1.0, 1.0).round() as i8)
        .collect();
    Ok((
        QuantCodes {
            rows: w.rows(),
            cols: w.cols(),
            codes,
        },
        beta,
    ))
}

/// Linear layer `y = W x + b` whose weight is quantized on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLinear {
    /// Trainable full-precision weight, `out x in`.
    pub latent: Matrix,
    /// `1 x out`.
    pub bias: Matrix,
    pub mode: QuantMode,
    pub epsilon: f64,
    /// Scale binary outputs by `mean(|W|)` as well (off by default).
    pub binary_scale: bool,
    /// Centering of the most recent 1-bit quantization.
    pub alpha: f64,
    /// Scale of the most recent quantization (1.0 when unscaled).
    pub beta: f64,
}

impl QuantizedLinear {
    pub fn new(latent: Matrix, bias: Matrix, mode: QuantMode) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != latent.rows() {
            return Err(Error::shape(format!(
                "bias {:?} does not match weight {:?}",
                bias.shape(),
                latent.shape()
            )));
        }
        let mut layer = Self {
            latent,
            bias,
            mode,
            epsilon: DEFAULT_EPSILON,
            binary_scale: false,
            alpha: 0.0,
            beta: 1.0,
        };
        layer.refresh_stats()?;
        Ok(layer)
    }

    /// Fan-in initialization with every bias set to `bias_value`.
    pub fn init(in_dim: usize, out_dim: usize, mode: QuantMode, bias_value: f64, rng: &mut SeededRng) -> Self {
        let latent = Matrix::init_fan_in(out_dim, in_dim, in_dim, rng);
        Self::new(latent, Matrix::filled(1, out_dim, bias_value), mode)
            .expect("freshly initialized layer is consistent")
    }

    pub fn in_dim(&self) -> usize {
        self.latent.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.latent.rows()
    }

    /// Current integer codes and output scale. Full precision has no codes.
    pub fn quantize(&self) -> Result<Option<(QuantCodes, f64, f64)>> {
        match self.mode {
            QuantMode::FullPrecision => Ok(None),
            QuantMode::Binary1Bit => {
                let (codes, alpha) = quantize_1bit(&self.latent)?;
                let scale = if self.binary_scale {
                    self.latent.data().iter().map(|v| v.abs()).sum::<f64>() / self.latent.len() as f64
                } else {
                    1.0
                };
                Ok(Some((codes, alpha, scale)))
            }
            QuantMode::Ternary158Bit => {
                let (codes, beta) = quantize_158bit(&self.latent, self.epsilon)?;
                Ok(Some((codes, 0.0, beta)))
            }
        }
    }

    /// Recomputes `alpha` / `beta` from the latent weights.
    pub fn refresh_stats(&mut self) -> Result<()> {
        match self.quantize()? {
            Some((_, alpha, scale)) => {
                self.alpha = alpha;
                self.beta = scale;
            }
            None => {
                self.alpha = 0.0;
                self.beta = 1.0;
            }
        }
        Ok(())
    }

    /// The weight used by the training forward pass: `latent` in full
    /// precision, otherwise `scale * codes`.
    pub fn effective_weight(&self) -> Result<Matrix> {
        Ok(match self.quantize()? {
            None => self.latent.clone(),
            Some((codes, _, scale)) => codes.to_matrix().scale(scale),
        })
    }

    /// Straight-through estimator: the gradient with respect to the
    /// effective weight is passed to the latent weight unchanged.
    pub fn ste_backward(&self, upstream: &Matrix) -> Result<Matrix> {
        self.latent.check_same_shape(upstream)?;
        Ok(upstream.clone())
    }

    /// Inference kernel with codes fixed at the current latent weights.
    pub fn freeze(&self) -> Result<FrozenLinear> {
        let (out_dim, in_dim) = self.latent.shape();
        let weights = match self.quantize()? {
            None => KernelWeights::Float(self.latent.transpose().into_data()),
            Some((codes, _, scale)) => {
                let mut col_major = vec![0i8; in_dim * out_dim];
                for r in 0..out_dim {
                    for c in 0..in_dim {
                        col_major[c * out_dim + r] = codes.get(r, c);
                    }
                }
                KernelWeights::Int {
                    codes: col_major,
                    scale,
                }
            }
        };
        Ok(FrozenLinear {
            in_dim,
            out_dim,
            weights,
            bias: self.bias.data().to_vec(),
        })
    }
}

/// Generic forward `W_eff x + b` on a real-valued input vector.
pub fn quantized_forward(layer: &QuantizedLinear, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.in_dim() {
        return Err(Error::shape(format!(
            "input has {} entries, layer expects {}",
            x.len(),
            layer.in_dim()
        )));
    }
    let w = layer.effective_weight()?;
    Ok((0..layer.out_dim())
        .map(|r| crate::numerics::dot(w.row(r), x) + layer.bias.data()[r])
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelWeights {
    /// Full-precision weights, column-major (`in x out`).
    Float(Vec<f64>),
    /// Integer codes, column-major (`in x out`), with one output scale.
    Int { codes: Vec<i8>, scale: f64 },
}

/// Weights fixed for spike-driven inference.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: KernelWeights,
    pub bias: Vec<f64>,
}

impl FrozenLinear {
    pub fn is_integer(&self) -> bool {
        matches!(self.weights, KernelWeights::Int { .. })
    }

    /// Number of nonzero weights fed by input `j`.
    pub fn column_nnz(&self, j: usize) -> u64 {
        let range = j * self.out_dim..(j + 1) * self.out_dim;
        match &self.weights {
            KernelWeights::Float(w) => w[range].iter().filter(|v| **v != 0.0).count() as u64,
            KernelWeights::Int { codes, .. } => codes[range].iter().filter(|c| **c != 0).count() as u64,
        }
    }

    /// Spike-driven forward pass: for every input that spiked, accumulate
    /// its column of nonzero weights. `ops` is incremented once per
    /// accumulate actually performed.
    pub fn forward_spikes(&self, spikes: &[u8], ops: &mut u64) -> Result<Vec<f64>> {
        if spikes.len() != self.in_dim {
            return Err(Error::shape(format!(
                "{} spikes for a layer with {} inputs",
                spikes.len(),
                self.in_dim
            )));
        }
        let n = self.out_dim;
        match &self.weights {
            KernelWeights::Int { codes, scale } => {
                let mut acc = vec![0i32; n];
                for (j, _) in spikes.iter().enumerate().filter(|(_, s)| **s != 0) {
                    for (a, &c) in acc.iter_mut().zip(&codes[j * n..(j + 1) * n]) {
                        if c != 0 {
                            *a += i32::from(c);
                            *ops += 1;
                        }
                    }
                }
                Ok(acc
                    .iter()
                    .zip(&self.bias)
                    .map(|(&a, b)| scale * f64::from(a) + b)
                    .collect())
            }
            KernelWeights::Float(w) => {
                let mut acc = vec![0.0; n];
                for (j, _) in spikes.iter().enumerate().filter(|(_, s)| **s != 0) {
                    for (a, &v) in acc.iter_mut().zip(&w[j * n..(j + 1) * n]) {
                        if v != 0.0 {
                            *a += v;
                            *ops += 1;
                        }
                    }
                }
                Ok(acc.iter().zip(&self.bias).map(|(a, b)| a + b).collect())
            }
        }
    }
}

/// Packs ternary codes at 2 bits each, four per byte, least-significant
/// pair first. `0 -> 0b00`, `+1 -> 0b01`, `-1 -> 0b10`.
pub fn pack_codes(codes: &[i8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (k, &c) in codes.iter().enumerate() {
        let bits = match c {
            0 => 0b00,
            1 => 0b01,
            -1 => 0b10,
            other => return Err(Error::Checkpoint(format!("code {other} is not ternary"))),
        };
        out[k / 4] |= bits << (2 * (k % 4));
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() != count.div_ceil(4) {
        return Err(Error::Checkpoint(format!(
            "{} packed bytes cannot hold exactly {count} codes",
            bytes.len()
        )));
    }
    (0..count)
        .map(|k| match (bytes[k / 4] >> (2 * (k % 4))) & 0b11 {
            0b00 => Ok(0),
            0b01 => Ok(1),
            0b10 => Ok(-1),
            _ => Err(Error::Checkpoint(format!("invalid code bits at weight {k}"))),
        })
        .collect()
}
