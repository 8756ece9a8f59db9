//! Spike-driven operation counts and dynamic accumulate energy.
//!
//! Population `i` drives `Layer#OPS_i` synaptic accumulates per step when
//! every neuron spikes. With `IFR_i` its spikes per neuron per step,
//!
//! ```text
//! Norm#OPS = sum_i IFR_i Layer#OPS_i / (sum_i Layer#OPS_i + head ops)
//! energy   = T sum_i IFR_i Layer#OPS_i e_acc
//! ```
//!
//! The last population drives only the classifier head; its outgoing term is
//! dropped from the numerator and the head ops stay in the denominator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::temporal::{InferenceOutput, KERNELS};
use crate::model::{EncoderStack, Population, Sublayer};

/// Per-population spike totals of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub names: Vec<String>,
    pub spikes: Vec<u64>,
    pub neurons: Vec<u64>,
    pub timesteps: u64,
}

impl SpikeStats {
    pub fn from_inference(out: &InferenceOutput) -> Self {
        Self {
            names: out.population_names.clone(),
            spikes: out.states.iter().map(|s| s.total_spikes()).collect(),
            neurons: out.states.iter().map(|s| s.len() as u64).collect(),
            timesteps: out.timesteps as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Domain("spike statistics need at least one time step".into()));
        }
        if self.spikes.len() != self.neurons.len() || self.names.len() != self.neurons.len() {
            return Err(Error::config("spike statistics have mismatched layer lists"));
        }
        for ((name, s), n) in self.names.iter().zip(&self.spikes).zip(&self.neurons) {
            if *s > n * self.timesteps {
                return Err(Error::Domain(format!(
                    "{name}: {s} spikes exceed {n} neurons x {} steps",
                    self.timesteps
                )));
            }
        }
        Ok(())
    }
}

/// Spikes per neuron per step, one value per population.
pub fn compute_ifr(stats: &SpikeStats) -> Result<Vec<f64>> {
    stats.validate()?;
    Ok(stats
        .spikes
        .iter()
        .zip(&stats.neurons)
        .map(|(&s, &n)| {
            if n == 0 {
                0.0
            } else {
                s as f64 / (n * stats.timesteps) as f64
            }
        })
        .collect())
}

/// Dense synaptic operations driven per step by each population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub driven: Vec<u64>,
    /// Operations counted in the denominator only (the classifier head).
    pub head: u64,
}

impl LayerOps {
    pub fn total(&self) -> u64 {
        self.driven.iter().sum::<u64>() + self.head
    }
}

/// Per-step dense op counts of `stack` on a sequence of `seq_len` tokens.
pub fn layer_ops(stack: &EncoderStack, seq_len: usize) -> LayerOps {
    let n = seq_len as u64;
    let d = stack.config.hidden as u64;
    let di = stack.config.intermediate as u64;
    let last = stack.num_layers() - 1;
    let driven = (0..stack.num_populations())
        .map(|i| match Population::from_index(i) {
            Population::Input => 3 * n * d * d,
            Population::Block(l, s) => match s {
                Sublayer::Query | Sublayer::Value => n * n * d,
                Sublayer::Attention => n * d * d,
                Sublayer::Norm1 => n * d * di,
                Sublayer::FfIn => n * di * d,
                Sublayer::Norm2 if l < last => 3 * n * d * d,
                _ => 0,
            },
        })
        .collect();
    LayerOps {
        driven,
        head: d * stack.config.num_labels as u64,
    }
}

/// `sum IFR_i ops_i / total ops`; zero when there are no ops.
pub fn norm_ops(stats: &SpikeStats, ops: &LayerOps) -> Result<f64> {
    let ifr = compute_ifr(stats)?;
    if ifr.len() != ops.driven.len() {
        return Err(Error::config(format!(
            "{} spiking layers but {} op counts",
            ifr.len(),
            ops.driven.len()
        )));
    }
    let total = ops.total();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(driven_ops(&ifr, ops) / total as f64)
}

fn driven_ops(ifr: &[f64], ops: &LayerOps) -> f64 {
    ifr.iter().zip(&ops.driven).map(|(f, &o)| f * o as f64).sum()
}

/// Per-accumulate energies in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechProfile {
    pub float_acc_pj: f64,
    pub int_acc_pj: f64,
}

impl Default for TechProfile {
    /// 45nm CMOS: 32-bit float add 0.9 pJ, 32-bit int add 0.1 pJ.
    fn default() -> Self {
        Self {
            float_acc_pj: 0.9,
            int_acc_pj: 0.1,
        }
    }
}

impl TechProfile {
    /// Builds a profile from named entries `float_acc_pj` and `int_acc_pj`.
    pub fn from_entries(entries: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            entries
                .get(k)
                .copied()
                .ok_or_else(|| Error::config(format!("technology profile lacks {k}")))
        };
        let p = Self {
            float_acc_pj: get("float_acc_pj")?,
            int_acc_pj: get("int_acc_pj")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("float_acc_pj", self.float_acc_pj), ("int_acc_pj", self.int_acc_pj)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{k} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn per_op(&self, integer: bool) -> f64 {
        if integer {
            self.int_acc_pj
        } else {
            self.float_acc_pj
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub neurons: u64,
    pub spikes: u64,
    pub ifr: f64,
    /// Dense per-step ops driven by this population.
    pub layer_ops: u64,
    /// `ifr * layer_ops`.
    pub driven_ops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub timesteps: u64,
    pub examples: usize,
    pub integer_acc: bool,
    pub layers: Vec<LayerEnergy>,
    pub head_ops: u64,
    pub total_ops: u64,
    pub norm_ops: f64,
    pub per_op_energy_pj: f64,
    /// Per-op energy relative to a float accumulate.
    pub ac_energy_ratio: f64,
    pub energy_pj: f64,
    /// Accumulates actually executed by the inference kernels, when known.
    pub executed_acc_ops: Option<u64>,
    pub notes: Vec<String>,
}

const NOTES: [&str; 3] = [
    "classifier head ops are counted in the denominator only",
    "the last population's outgoing term is omitted",
    "attention scores are attributed to the query population and value mixing to the value population",
];

/// Sums spike statistics of several runs with the same population layout.
#[derive(Debug, Clone)]
pub struct EnergyAccumulator {
    names: Vec<String>,
    timesteps: u64,
    neurons: Vec<u64>,
    spikes: Vec<u64>,
    layer_ops: Vec<u64>,
    driven: Vec<f64>,
    head_ops: u64,
    executed: Option<u64>,
    examples: usize,
}

impl EnergyAccumulator {
    pub fn new(names: Vec<String>, timesteps: u64) -> Self {
        let n = names.len();
        Self {
            names,
            timesteps,
            neurons: vec![0; n],
            spikes: vec![0; n],
            layer_ops: vec![0; n],
            driven: vec![0.0; n],
            head_ops: 0,
            executed: Some(0),
            examples: 0,
        }
    }

    pub fn add(&mut self, stats: &SpikeStats, ops: &LayerOps, executed: Option<u64>) -> Result<()> {
        if stats.names != self.names || stats.timesteps != self.timesteps {
            return Err(Error::config("spike statistics do not match the accumulated layout"));
        }
        let ifr = compute_ifr(stats)?;
        if ops.driven.len() != ifr.len() {
            return Err(Error::config("op counts do not match the spiking layers"));
        }
        for i in 0..ifr.len() {
            self.neurons[i] += stats.neurons[i];
            self.spikes[i] += stats.spikes[i];
            self.layer_ops[i] += ops.driven[i];
            self.driven[i] += ifr[i] * ops.driven[i] as f64;
        }
        self.head_ops += ops.head;
        self.executed = match (self.executed, executed) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        self.examples += 1;
        Ok(())
    }

    pub fn finish(&self, integer_acc: bool, profile: &TechProfile) -> Result<EnergyReport> {
        profile.validate()?;
        let layers: Vec<LayerEnergy> = (0..self.names.len())
            .map(|i| LayerEnergy {
                name: self.names[i].clone(),
                neurons: self.neurons[i],
                spikes: self.spikes[i],
                ifr: if self.neurons[i] == 0 {
                    0.0
                } else {
                    self.spikes[i] as f64 / (self.neurons[i] * self.timesteps) as f64
                },
                layer_ops: self.layer_ops[i],
                driven_ops: self.driven[i],
            })
            .collect();
        let total_ops = self.layer_ops.iter().sum::<u64>() + self.head_ops;
        let driven: f64 = self.driven.iter().sum();
        let per_op = profile.per_op(integer_acc);
        Ok(EnergyReport {
            timesteps: self.timesteps,
            examples: self.examples,
            integer_acc,
            layers,
            head_ops: self.head_ops,
            total_ops,
            norm_ops: if total_ops == 0 { 0.0 } else { driven / total_ops as f64 },
            per_op_energy_pj: per_op,
            ac_energy_ratio: if profile.float_acc_pj > 0.0 {
                per_op / profile.float_acc_pj
            } else {
                f64::NAN
            },
            energy_pj: self.timesteps as f64 * driven * per_op,
            executed_acc_ops: if self.examples > 0 { self.executed } else { None },
            notes: NOTES.iter().map(|s| s.to_string()).collect(),
        })
    }
}

/// Energy report of a single run.
pub fn energy_estimate(
    stats: &SpikeStats,
    ops: &LayerOps,
    integer_acc: bool,
    profile: &TechProfile,
) -> Result<EnergyReport> {
    let mut acc = EnergyAccumulator::new(stats.names.clone(), stats.timesteps);
    acc.add(stats, ops, None)?;
    acc.finish(integer_acc, profile)
}

/// Accumulates implied by the recorded spikes: every spike of an input
/// neuron traverses the nonzero weights of its kernel column, and every
/// value spike is mixed into each query position.
pub fn exact_acc_ops(stack: &EncoderStack, out: &InferenceOutput) -> Result<u64> {
    let seq = out.seq_len;
    let mut total = 0u64;
    for (l, layer) in stack.layers.iter().enumerate() {
        for s in KERNELS {
            let kernel = layer.linear(s).expect("kernel sublayer is linear").freeze()?;
            let src = Population::Block(l, s).inputs()[0].index();
            let counts = &out.states[src].spike_count;
            if counts.len() != seq * kernel.in_dim {
                return Err(Error::shape("spike record does not match the kernel width"));
            }
            let nnz: Vec<u64> = (0..kernel.in_dim).map(|j| kernel.column_nnz(j)).collect();
            for (k, c) in counts.iter().enumerate() {
                total += c * nnz[k % kernel.in_dim];
            }
        }
        total += out.states[Population::Block(l, Sublayer::Value).index()].total_spikes() * seq as u64;
    }
    Ok(total)
}

/// Quantized versus full-precision reports on the same inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyComparison {
    pub quantized: EnergyReport,
    pub full_precision: EnergyReport,
    /// `None` when the full-precision value is zero.
    pub norm_ops_ratio: Option<f64>,
    pub energy_ratio: Option<f64>,
}

impl EnergyComparison {
    pub fn new(quantized: EnergyReport, full_precision: EnergyReport) -> Self {
        let ratio = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
        Self {
            norm_ops_ratio: ratio(quantized.norm_ops, full_precision.norm_ops),
            energy_ratio: ratio(quantized.energy_pj, full_precision.energy_pj),
            quantized,
            full_precision,
        }
    }

    /// Plain-text table of per-layer IFRs and the aggregate ratios.
    pub fn table(&self) -> String {
        let mut s = format!("{:<20} {:>10} {:>10} {:>12}\n", "layer", "ifr_q", "ifr_fp", "ops/step");
        for (q, f) in self.quantized.layers.iter().zip(&self.full_precision.layers) {
            s.push_str(&format!(
                "{:<20} {:>10.4} {:>10.4} {:>12}\n",
                q.name, q.ifr, f.ifr, q.layer_ops
            ));
        }
        let fmt = |r: Option<f64>| r.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "norm_ops {:.6} / {:.6}  ratio {}\nenergy_pj {:.3} / {:.3}  ratio {}\n",
            self.quantized.norm_ops,
            self.full_precision.norm_ops,
            fmt(self.norm_ops_ratio),
            self.quantized.energy_pj,
            self.full_precision.energy_pj,
            fmt(self.energy_ratio),
        ));
        s
    }
}

/// Runs temporal inference on every sequence and aggregates the energy
/// report, checking the counted accumulates against the instrumented kernels.
pub fn evaluate_energy(
    stack: &EncoderStack,
    sequences: &[Vec<usize>],
    timesteps: usize,
    profile: &TechProfile,
) -> Result<EnergyReport> {
    let mut acc = EnergyAccumulator::new(stack.population_names(), timesteps as u64);
    let mut integer = stack.config.quant.is_quantized();
    for tokens in sequences {
        let out = stack.forward_infer(tokens, timesteps)?;
        let exact = exact_acc_ops(stack, &out)?;
        if exact != out.instrumented_ops() {
            return Err(Error::Numeric(format!(
                "counted {exact} accumulates, kernels executed {}",
                out.instrumented_ops()
            )));
        }
        integer &= out.integer_kernels;
        acc.add(
            &SpikeStats::from_inference(&out),
            &layer_ops(stack, out.seq_len),
            Some(exact),
        )?;
    }
    acc.finish(integer, profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StudentConfig;
    use crate::quantizer::QuantMode;
    use proptest::prelude::*;

    fn stats(spikes: Vec<u64>, neurons: Vec<u64>, t: u64) -> SpikeStats {
        SpikeStats {
            names: (0..spikes.len()).map(|i| format!("l{i}")).collect(),
            spikes,
            neurons,
            timesteps: t,
        }
    }

    #[test]
    fn ifr_examples() {
        assert_eq!(compute_ifr(&stats(vec![12], vec![3], 4)).unwrap(), vec![1.0]);
        assert_eq!(compute_ifr(&stats(vec![0], vec![3], 4)).unwrap(), vec![0.0]);
        assert_eq!(compute_ifr(&stats(vec![6], vec![3], 4)).unwrap(), vec![0.5]);
        assert!(compute_ifr(&stats(vec![13], vec![3], 4)).is_err());
        assert!(compute_ifr(&stats(vec![1], vec![3], 0)).is_err());
    }

    #[test]
    fn saturated_spiking_counts_driven_fraction() {
        let s = stats(vec![8, 8, 8], vec![2, 2, 2], 4);
        let ops = LayerOps {
            driven: vec![10, 20, 0],
            head: 5,
        };
        assert!((norm_ops(&s, &ops).unwrap() - 30.0 / 35.0).abs() < 1e-15);
        let silent = stats(vec![0, 0, 0], vec![2, 2, 2], 4);
        assert_eq!(norm_ops(&silent, &ops).unwrap(), 0.0);
        assert!(norm_ops(
            &s,
            &LayerOps {
                driven: vec![1, 2],
                head: 0
            }
        )
        .is_err());
    }

    #[test]
    fn default_profile_gives_ninefold_saving() {
        let s = stats(vec![3, 5], vec![2, 4], 4);
        let ops = LayerOps {
            driven: vec![7, 11],
            head: 2,
        };
        let p = TechProfile::default();
        let q = energy_estimate(&s, &ops, true, &p).unwrap();
        let f = energy_estimate(&s, &ops, false, &p).unwrap();
        assert!((q.energy_pj / f.energy_pj - 1.0 / 9.0).abs() < 1e-12);
        let c = EnergyComparison::new(q, f);
        assert!((c.energy_ratio.unwrap() - c.norm_ops_ratio.unwrap() / 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_spikes_give_zero_energy_and_undefined_ratio() {
        let s = stats(vec![0, 0], vec![2, 4], 4);
        let ops = LayerOps {
            driven: vec![7, 11],
            head: 2,
        };
        let p = TechProfile::default();
        let q = energy_estimate(&s, &ops, true, &p).unwrap();
        assert_eq!(q.energy_pj, 0.0);
        let c = EnergyComparison::new(q.clone(), q);
        assert_eq!(c.norm_ops_ratio, None);
        assert!(c.table().contains("undefined"));
    }

    #[test]
    fn doubling_time_doubles_energy() {
        let ops = LayerOps {
            driven: vec![7, 11],
            head: 2,
        };
        let p = TechProfile::default();
        let a = energy_estimate(&stats(vec![3, 5], vec![2, 4], 4), &ops, false, &p).unwrap();
        let b = energy_estimate(&stats(vec![6, 10], vec![2, 4], 8), &ops, false, &p).unwrap();
        assert!((b.energy_pj - 2.0 * a.energy_pj).abs() < 1e-12);
        assert_eq!(a.norm_ops, b.norm_ops);
    }

    #[test]
    fn profile_entries_are_required() {
        let mut m = BTreeMap::new();
        m.insert("float_acc_pj".to_string(), 0.9);
        assert!(matches!(TechProfile::from_entries(&m), Err(Error::Config(_))));
        m.insert("int_acc_pj".to_string(), 0.1);
        assert_eq!(TechProfile::from_entries(&m).unwrap(), TechProfile::default());
    }

    #[test]
    fn counted_ops_match_instrumented_kernels() {
        let cfg = StudentConfig {
            vocab_size: 20,
            max_len: 8,
            hidden: 8,
            intermediate: 12,
            heads: 2,
            layers: 2,
            ..Default::default()
        };
        for quant in [
            QuantMode::FullPrecision,
            QuantMode::Binary1Bit,
            QuantMode::Ternary158Bit,
        ] {
            let mut stack = EncoderStack::init(cfg, 6).unwrap();
            stack.set_quant_mode(quant).unwrap();
            let report =
                evaluate_energy(&stack, &[vec![2, 5, 11, 3], vec![2, 9, 3]], 20, &TechProfile::default()).unwrap();
            assert_eq!(report.integer_acc, quant.is_quantized());
            assert!(report.executed_acc_ops.unwrap() > 0);
            assert!(report.layers.iter().all(|l| (0.0..=1.0).contains(&l.ifr)));
            assert_eq!(report.layers.len(), stack.num_populations());
        }
    }

    proptest! {
        #[test]
        fn norm_ops_is_monotone_in_spikes(
            base in proptest::collection::vec(0u64..=40, 4),
            ops in proptest::collection::vec(0u64..1000, 4),
            head in 0u64..100,
            layer in 0usize..4,
            extra in 1u64..40,
        ) {
            let neurons = vec![10u64; 4];
            let lo = stats(base.clone(), neurons.clone(), 4);
            let mut more = base;
            more[layer] = (more[layer] + extra).min(40);
            let hi = stats(more, neurons, 4);
            let ops = LayerOps { driven: ops, head };
            let a = norm_ops(&lo, &ops).unwrap();
            let b = norm_ops(&hi, &ops).unwrap();
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&b));
            for f in compute_ifr(&hi).unwrap() {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }
}
