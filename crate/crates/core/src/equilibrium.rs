//! Fixed-point solving of steady-state ASR equations and the temporal
//! convergence trace.
//!
//! A [`SteadyStateMap`] exposes a layered map `a_i <- f_i(a)`. The solver
//! runs damped Picard iteration with a Gauss-Seidel sweep (layer 0 to L-1,
//! each layer reading the freshest values of the others). The residual
//! recorded per iteration is the Jacobi certificate `||f(a) - a||_inf`
//! evaluated at the iterate, so `converged` always means the returned
//! state is a certified fixed point to `tol`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::temporal::{simulate, SimulationObserver};
use crate::model::EncoderStack;
use crate::neuron::LifLayerState;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Sup-norm residual threshold.
    pub tol: f64,
    /// Relaxation factor in `(0, 1]`.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-6,
            damping: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("solver max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("solver tol must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("solver damping must be in (0, 1]"));
        }
        Ok(())
    }
}

/// A layered steady-state map over ASR matrices.
pub trait SteadyStateMap {
    fn layer_count(&self) -> usize;

    fn layer_name(&self, index: usize) -> String {
        format!("layer{index}")
    }

    /// Starting iterate; every entry must lie in `[0, 1]`.
    fn initial_state(&self) -> Vec<Matrix>;

    /// `f_index(state)`, a matrix with entries in `[0, 1]`.
    fn eval_layer(&self, index: usize, state: &[Matrix]) -> Result<Matrix>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    /// Steady-state ASR per layer.
    pub asr_star: Vec<Matrix>,
    /// Certificate residual after each iteration.
    pub residual_history: Vec<f64>,
    pub iters_used: usize,
    pub converged: bool,
}

impl EquilibriumSolution {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// `||f(a) - a||_inf` with every layer evaluated from the same state.
pub fn fixed_point_residual(map: &impl SteadyStateMap, state: &[Matrix]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..map.layer_count() {
        let next = map.eval_layer(i, state)?;
        worst = worst.max(next.max_abs_diff(&state[i])?);
    }
    Ok(worst)
}

/// Damped Gauss-Seidel Picard iteration to a certified fixed point.
pub fn solve_fixed_point(map: &impl SteadyStateMap, cfg: &SolverConfig) -> Result<EquilibriumSolution> {
    cfg.validate()?;
    let mut state = map.initial_state();
    if state.len() != map.layer_count() {
        return Err(Error::shape("initial state does not match the layer count"));
    }
    for (i, layer) in state.iter().enumerate() {
        if layer.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("initial ASR of layer {i} is outside [0, 1]")));
        }
    }
    let lambda = cfg.damping;
    let mut history = Vec::new();
    for iter in 1..=cfg.max_iters {
        for i in 0..state.len() {
            let target = map.eval_layer(i, &state)?;
            state[i] = if lambda == 1.0 {
                target
            } else {
                state[i].zip_map(&target, |a, f| ((1.0 - lambda) * a + lambda * f).clamp(0.0, 1.0))?
            };
        }
        let residual = fixed_point_residual(map, &state)?;
        if !residual.is_finite() {
            return Err(Error::Numeric("fixed-point residual is not finite".into()));
        }
        history.push(residual);
        if residual <= cfg.tol {
            return Ok(EquilibriumSolution {
                asr_star: state,
                residual_history: history,
                iters_used: iter,
                converged: true,
            });
        }
    }
    Err(Error::NonConvergence {
        iters: cfg.max_iters,
        last_residual: history.last().copied().unwrap_or(f64::INFINITY),
        residual_history: history,
    })
}

pub fn flatten(state: &[Matrix]) -> Vec<f64> {
    state.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Splits a flat vector back into matrices shaped like `like`.
pub fn unflatten(like: &[Matrix], flat: &[f64]) -> Result<Vec<Matrix>> {
    let total: usize = like.iter().map(Matrix::len).sum();
    if total != flat.len() {
        return Err(Error::shape(format!(
            "flat vector has {} entries, state needs {total}",
            flat.len()
        )));
    }
    let mut at = 0;
    like.iter()
        .map(|m| {
            let part = Matrix::new(m.rows(), m.cols(), flat[at..at + m.len()].to_vec());
            at += m.len();
            part
        })
        .collect()
}

/// One row of the convergence-trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub layer_name: String,
    /// ASR averaged over all neurons of the layer (all tokens).
    pub mean_asr: f64,
    /// Mean absolute deviation of the layer's ASR from its steady state.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub layer_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    pub equilibrium: EquilibriumSolution,
    pub timesteps: usize,
}

impl ConvergenceTrace {
    /// Residual series of one layer, indexed by step - 1.
    pub fn residual_series(&self, layer: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.layer_name == layer)
            .map(|r| r.residual)
            .collect()
    }

    pub fn mean_asr_series(&self, layer: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.layer_name == layer)
            .map(|r| r.mean_asr)
            .collect()
    }

    /// Mean steady-state ASR of a layer.
    pub fn steady_state_mean(&self, layer: &str) -> Option<f64> {
        let idx = self.layer_names.iter().position(|n| n == layer)?;
        Some(self.equilibrium.asr_star[idx].mean())
    }

    /// Final-step residual of every layer.
    pub fn final_residuals(&self) -> Vec<(String, f64)> {
        self.layer_names
            .iter()
            .map(|n| (n.clone(), *self.residual_series(n).last().unwrap_or(&f64::NAN)))
            .collect()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,layer_name,mean_asr,residual")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:.9},{:.9}", r.step, r.layer_name, r.mean_asr, r.residual)?;
        }
        Ok(())
    }
}

/// First step after which `series` stays at or below `tol` through the end.
pub fn steps_to_tolerance(series: &[f64], tol: f64) -> Option<usize> {
    match series.iter().rposition(|&r| r > tol) {
        None => Some(1),
        Some(last_bad) if last_bad + 1 < series.len() => Some(last_bad + 2),
        Some(_) => None,
    }
}

struct TraceObserver<'a> {
    names: &'a [String],
    star: &'a [Matrix],
    rows: Vec<TraceRow>,
}

impl SimulationObserver for TraceObserver<'_> {
    fn on_step(&mut self, step: usize, states: &[LifLayerState]) -> Result<()> {
        for ((name, st), star) in self.names.iter().zip(states).zip(self.star) {
            let asr = st.asr()?;
            let n = asr.len().max(1) as f64;
            let mean = asr.iter().sum::<f64>() / n;
            let residual = asr.iter().zip(star.data()).map(|(a, s)| (a - s).abs()).sum::<f64>() / n;
            self.rows.push(TraceRow {
                step,
                layer_name: name.clone(),
                mean_asr: mean,
                residual,
            });
        }
        Ok(())
    }
}

/// Runs the temporal simulation and records, per step and per layer, the
/// mean ASR and its mean absolute distance to the solved steady state.
pub fn convergence_trace(
    stack: &EncoderStack,
    tokens: &[usize],
    timesteps: usize,
    solver: &SolverConfig,
) -> Result<ConvergenceTrace> {
    if timesteps == 0 {
        return Err(Error::Domain("timesteps must be at least 1".into()));
    }
    let graph = stack.graph(tokens)?;
    let equilibrium = solve_fixed_point(&graph, solver)?;
    let names: Vec<String> = (0..graph.layer_count()).map(|i| graph.layer_name(i)).collect();
    let mut obs = TraceObserver {
        names: &names,
        star: &equilibrium.asr_star,
        rows: Vec::with_capacity(timesteps * names.len()),
    };
    simulate(stack, tokens, timesteps, &mut obs)?;
    let rows = obs.rows;
    Ok(ConvergenceTrace {
        layer_names: names,
        rows,
        equilibrium,
        timesteps,
    })
}
