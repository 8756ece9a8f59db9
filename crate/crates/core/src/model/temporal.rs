//! Temporal spiking inference.
//!
//! Every population is a [`LifLayerState`] of `seq * width` neurons,
//! row-major by token. Within a step, populations update in index order and
//! read the spikes their inputs emitted in the same step.
//!
//! * input: constant current `v_th * x0` (deterministic rate code)
//! * linear sublayers: spike-driven [`FrozenLinear`] kernels
//! * attention: weights from the running ASRs of query and key, current
//!   is the weighted sum of the value spikes of this step
//! * normalizations: `g * LN(a + b) + c` evaluated on the running ASRs of
//!   the two residual inputs
//!
//! Logits are the classifier applied to the token-averaged ASR of the
//! final block output after `T` steps.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{attention_weights, block_input, EncoderStack, Population, Sublayer, LN_EPS};
use crate::neuron::LifLayerState;
use crate::numerics::tape::layer_norm_rows;
use crate::numerics::Matrix;
use crate::quantizer::FrozenLinear;

/// Linear sublayers in kernel order.
pub const KERNELS: [Sublayer; 6] = [
    Sublayer::Query,
    Sublayer::Key,
    Sublayer::Value,
    Sublayer::AttnOut,
    Sublayer::FfIn,
    Sublayer::FfOut,
];

static SIMULATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of temporal simulations started by this process.
pub fn simulation_count() -> u64 {
    SIMULATIONS.load(Ordering::SeqCst)
}

/// Receives the population states after every step.
pub trait SimulationObserver {
    fn on_step(&mut self, step: usize, states: &[LifLayerState]) -> Result<()>;
}

impl SimulationObserver for () {
    fn on_step(&mut self, _: usize, _: &[LifLayerState]) -> Result<()> {
        Ok(())
    }
}

/// Accumulate operations performed by one frozen kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelCount {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub logits: Vec<f64>,
    pub timesteps: usize,
    pub seq_len: usize,
    pub population_names: Vec<String>,
    /// Final state of every population (spike counts, ASR accumulators).
    pub states: Vec<LifLayerState>,
    /// Instrumented accumulate counts of the linear kernels.
    pub kernel_ops: Vec<KernelCount>,
    /// Instrumented accumulate counts of the attention value mix, per block.
    pub mix_ops: Vec<u64>,
    /// Whether the linear kernels ran on integer codes.
    pub integer_kernels: bool,
}

impl InferenceOutput {
    /// ASR of one population as a `seq x width` matrix.
    pub fn asr(&self, index: usize) -> Result<Matrix> {
        let st = &self.states[index];
        let width = st.len() / self.seq_len;
        Matrix::new(self.seq_len, width, st.asr()?)
    }

    pub fn total_spikes(&self) -> u64 {
        self.states.iter().map(LifLayerState::total_spikes).sum()
    }

    /// Every accumulate the simulator performed.
    pub fn instrumented_ops(&self) -> u64 {
        self.kernel_ops.iter().map(|k| k.ops).sum::<u64>() + self.mix_ops.iter().sum::<u64>()
    }

    pub fn predicted_label(&self) -> usize {
        crate::model::argmax(&self.logits)
    }
}

fn rates(st: &LifLayerState, seq: usize) -> Result<Matrix> {
    let w = st.len() / seq;
    Matrix::new(seq, w, st.asr()?)
}

fn kernel_current(kernel: &FrozenLinear, spikes: &[u8], seq: usize, ops: &mut u64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seq * kernel.out_dim);
    for i in 0..seq {
        out.extend(kernel.forward_spikes(&spikes[i * kernel.in_dim..(i + 1) * kernel.in_dim], ops)?);
    }
    Ok(out)
}

fn norm_current(a: &Matrix, b: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Vec<f64>> {
    let (n, _) = layer_norm_rows(&a.add(b)?, LN_EPS);
    let mut out = n.into_data();
    let d = gain.cols();
    for (i, v) in out.iter_mut().enumerate() {
        *v = gain.data()[i % d] * *v + bias.data()[i % d];
    }
    Ok(out)
}

/// Runs the stack for `timesteps` steps on one token sequence.
pub fn simulate(
    stack: &EncoderStack,
    tokens: &[usize],
    timesteps: usize,
    observer: &mut dyn SimulationObserver,
) -> Result<InferenceOutput> {
    if timesteps == 0 {
        return Err(Error::Domain("timesteps must be at least 1".into()));
    }
    SIMULATIONS.fetch_add(1, Ordering::SeqCst);
    let graph = stack.graph(tokens)?;
    let seq = graph.seq_len();
    let cfg = &stack.config;
    let lif = cfg.lif;
    let heads = cfg.heads;
    let d = cfg.hidden;
    let dh = d / heads;

    let x0 = graph.input_rates()?;
    let input_current: Vec<f64> = x0.data().iter().map(|x| x * lif.v_th).collect();

    let mut kernels: Vec<Vec<FrozenLinear>> = Vec::with_capacity(stack.num_layers());
    for layer in &stack.layers {
        let ks = KERNELS
            .iter()
            .map(|s| layer.linear(*s).expect("kernel sublayer is linear").freeze())
            .collect::<Result<Vec<_>>>()?;
        kernels.push(ks);
    }
    let integer_kernels = kernels.iter().flatten().any(FrozenLinear::is_integer);
    let mut kernel_ops: Vec<KernelCount> = (0..stack.num_layers())
        .flat_map(|l| {
            KERNELS.iter().map(move |s| KernelCount {
                layer: l,
                sublayer: *s,
                ops: 0,
            })
        })
        .collect();
    let mut mix_ops = vec![0u64; stack.num_layers()];

    let mut states: Vec<LifLayerState> = (0..stack.num_populations())
        .map(|i| LifLayerState::new(seq * stack.population_width(Population::from_index(i))))
        .collect();

    for t in 1..=timesteps {
        states[0].step(&input_current, &lif)?;
        for (l, layer) in stack.layers.iter().enumerate() {
            let idx = |s: Sublayer| Population::Block(l, s).index();
            let inp = block_input(l).index();
            let mut run = |k: usize, states: &mut [LifLayerState]| -> Result<()> {
                let pop = Population::Block(l, KERNELS[k]);
                let src = pop.inputs()[0].index();
                let ops = &mut kernel_ops[l * KERNELS.len() + k].ops;
                let current = kernel_current(&kernels[l][k], &states[src].s, seq, ops)?;
                states[pop.index()].step(&current, &lif)?;
                Ok(())
            };
            for k in 0..3 {
                run(k, &mut states)?;
            }

            let q = rates(&states[idx(Sublayer::Query)], seq)?;
            let k = rates(&states[idx(Sublayer::Key)], seq)?;
            let weights = attention_weights(&q, &k, heads)?;
            let mut current = vec![0.0; seq * d];
            let v_spikes = &states[idx(Sublayer::Value)].s;
            for j in 0..seq {
                for c in 0..d {
                    if v_spikes[j * d + c] == 0 {
                        continue;
                    }
                    let w = &weights[c / dh];
                    for i in 0..seq {
                        current[i * d + c] += w.get(i, j);
                        mix_ops[l] += 1;
                    }
                }
            }
            states[idx(Sublayer::Attention)].step(&current, &lif)?;
            run(3, &mut states)?;

            let a = rates(&states[idx(Sublayer::AttnOut)], seq)?;
            let x = rates(&states[inp], seq)?;
            let current = norm_current(&a, &x, &layer.norm1_gain, &layer.norm1_bias)?;
            states[idx(Sublayer::Norm1)].step(&current, &lif)?;
            run(4, &mut states)?;
            run(5, &mut states)?;

            let f = rates(&states[idx(Sublayer::FfOut)], seq)?;
            let n1 = rates(&states[idx(Sublayer::Norm1)], seq)?;
            let current = norm_current(&f, &n1, &layer.norm2_gain, &layer.norm2_bias)?;
            states[idx(Sublayer::Norm2)].step(&current, &lif)?;
        }
        observer.on_step(t, &states)?;
    }

    let last = rates(&states[states.len() - 1], seq)?;
    let logits = graph.logits(&[last])?;
    Ok(InferenceOutput {
        logits,
        timesteps,
        seq_len: seq,
        population_names: stack.population_names(),
        states,
        kernel_ops,
        mix_ops,
        integer_kernels,
    })
}

impl EncoderStack {
    /// Temporal spiking inference for `timesteps` steps.
    pub fn forward_infer(&self, tokens: &[usize], timesteps: usize) -> Result<InferenceOutput> {
        simulate(self, tokens, timesteps, &mut ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::SolverConfig;
    use crate::model::StudentConfig;
    use crate::quantizer::QuantMode;

    fn config(quant: QuantMode) -> StudentConfig {
        StudentConfig {
            vocab_size: 30,
            max_len: 8,
            hidden: 8,
            intermediate: 16,
            heads: 2,
            layers: 2,
            num_labels: 2,
            quant,
            ..Default::default()
        }
    }

    fn mean_abs_gap(stack: &EncoderStack, tokens: &[usize], t: usize) -> Vec<f64> {
        let star = stack
            .forward_train(
                tokens,
                &SolverConfig {
                    tol: 1e-10,
                    ..Default::default()
                },
            )
            .unwrap()
            .solution
            .asr_star;
        let out = stack.forward_infer(tokens, t).unwrap();
        (0..star.len())
            .map(|i| {
                let a = out.asr(i).unwrap();
                a.data()
                    .iter()
                    .zip(star[i].data())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / a.len() as f64
            })
            .collect()
    }

    #[test]
    fn temporal_rates_approach_equilibrium() {
        for quant in [
            QuantMode::FullPrecision,
            QuantMode::Ternary158Bit,
            QuantMode::Binary1Bit,
        ] {
            let stack = EncoderStack::init(config(quant), 4).unwrap();
            let tokens = [2, 11, 5, 17, 3];
            let short = mean_abs_gap(&stack, &tokens, 50);
            let long = mean_abs_gap(&stack, &tokens, 500);
            let total = |v: &[f64]| v.iter().sum::<f64>();
            assert!(total(&long) < total(&short), "{quant}: {long:?} vs {short:?}");
            if quant != QuantMode::Binary1Bit {
                assert!(long.iter().all(|g| *g <= 0.02), "{quant}: {long:?}");
            }
        }
    }

    #[test]
    fn subthreshold_single_step_gives_bias_logits() {
        let mut stack = EncoderStack::init(config(QuantMode::FullPrecision), 2).unwrap();
        stack.cls_b = Matrix::row_vector(&[0.25, -0.5]);
        let out = stack.forward_infer(&[4, 9, 1], 1).unwrap();
        // The input population cannot exceed threshold on the first step.
        assert_eq!(out.states[0].total_spikes(), 0);
        assert_eq!(out.total_spikes(), 0);
        assert_eq!(out.logits, vec![0.25, -0.5]);
    }

    #[test]
    fn kernel_counters_match_spike_weighted_fan_out() {
        let stack = EncoderStack::init(config(QuantMode::Ternary158Bit), 6).unwrap();
        let out = stack.forward_infer(&[3, 8, 12, 20], 40).unwrap();
        assert!(out.integer_kernels);
        let seq = out.seq_len;
        for kc in &out.kernel_ops {
            let lin = stack.layers[kc.layer].linear(kc.sublayer).unwrap().freeze().unwrap();
            let src = Population::Block(kc.layer, kc.sublayer).inputs()[0].index();
            let counts = &out.states[src].spike_count;
            let mut expect = 0;
            for i in 0..seq {
                for j in 0..lin.in_dim {
                    expect += counts[i * lin.in_dim + j] * lin.column_nnz(j);
                }
            }
            assert_eq!(kc.ops, expect);
        }
        for (l, m) in out.mix_ops.iter().enumerate() {
            let v = Population::Block(l, Sublayer::Value).index();
            assert_eq!(*m, out.states[v].total_spikes() * seq as u64);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_counted() {
        let stack = EncoderStack::init(config(QuantMode::Binary1Bit), 9).unwrap();
        let before = simulation_count();
        let a = stack.forward_infer(&[5, 6, 7], 30).unwrap();
        let b = stack.forward_infer(&[5, 6, 7], 30).unwrap();
        assert_eq!(a, b);
        assert!(simulation_count() >= before + 2);
        assert!(stack.forward_infer(&[5], 0).is_err());
    }
}
