//! Gradients through the equilibrium by implicit differentiation, and the
//! training step built on them.
//!
//! At a fixed point `a* = f(a*, theta)` the loss gradient is
//!
//! ```text
//! dL/dtheta = dL/dtheta|_direct + v^T df/dtheta,   v^T (I - df/da) = dL/da*
//! ```
//!
//! `v` is obtained from the Neumann series `v = sum_k (J^T)^k g` with
//! `J = df/da` at `a*`, each term one vector-Jacobian product. No temporal
//! unrolling is involved.

use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::distill::KdConfig;
use crate::equilibrium::{solve_fixed_point, SolverConfig};
use crate::error::{Error, Result};
use crate::model::{block_output, EncoderStack, ParamLeaves, StudentGraph};
use crate::numerics::tape::{clip01_grad, Tape, Var};
use crate::numerics::{solve_linear, AdamState, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VjpSolveConfig {
    pub max_terms: usize,
    /// Sup-norm threshold on the newest series term.
    pub tol: f64,
}

impl Default for VjpSolveConfig {
    fn default() -> Self {
        Self {
            max_terms: 50,
            tol: 1e-8,
        }
    }
}

impl VjpSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_terms == 0 {
            return Err(Error::config("vjp max_terms must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("vjp tol must be positive"));
        }
        Ok(())
    }
}

/// Consecutive growing terms that signal a divergent series.
pub const DIVERGENCE_RUN: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub adjoint: Vec<f64>,
    /// Series terms summed, including the first.
    pub terms: usize,
    /// Sup norm of the last term added.
    pub tail_norm: f64,
    /// The series was cut at `max_terms` before the tail criterion fired.
    pub truncated: bool,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Neumann solve of `v^T (I - J) = g^T`, with `vjp(u) = u^T J`.
pub fn implicit_vjp(
    g: &[f64],
    vjp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    cfg: &VjpSolveConfig,
) -> Result<AdjointSolution> {
    neumann(g, vjp, cfg, true)
}

/// [`implicit_vjp`] for a nilpotent `J`. The series is finite, so terms
/// that grow on the way are not taken as divergence.
pub fn implicit_vjp_nilpotent(
    g: &[f64],
    vjp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    cfg: &VjpSolveConfig,
) -> Result<AdjointSolution> {
    neumann(g, vjp, cfg, false)
}

fn neumann(
    g: &[f64],
    mut vjp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    cfg: &VjpSolveConfig,
    check_growth: bool,
) -> Result<AdjointSolution> {
    cfg.validate()?;
    let mut v = g.to_vec();
    let mut term = g.to_vec();
    let mut norm = sup_norm(&term);
    let mut growing = 0;
    let mut terms = 1;
    while norm > cfg.tol && terms < cfg.max_terms {
        let next = vjp(&term)?;
        if next.len() != v.len() {
            return Err(Error::shape("vector-Jacobian product changed the dimension"));
        }
        let next_norm = sup_norm(&next);
        if !next_norm.is_finite() {
            return Err(Error::Numeric("Neumann term is not finite".into()));
        }
        for (a, b) in v.iter_mut().zip(&next) {
            *a += b;
        }
        terms += 1;
        growing = if next_norm > norm { growing + 1 } else { 0 };
        if check_growth && growing >= DIVERGENCE_RUN {
            return Err(Error::SpectralRadius(terms));
        }
        term = next;
        norm = next_norm;
    }
    Ok(AdjointSolution {
        adjoint: v,
        terms,
        tail_norm: norm,
        truncated: norm > cfg.tol,
    })
}

/// Dense reference: solves `(I - J)^T v = g` directly.
pub fn dense_adjoint(jacobian: &Matrix, g: &[f64]) -> Result<Vec<f64>> {
    let n = g.len();
    if jacobian.shape() != (n, n) {
        return Err(Error::shape("jacobian must be square and match the gradient"));
    }
    let a = Matrix::identity(n).sub(jacobian)?.transpose();
    solve_linear(&a, g)
}

/// Subgradient of the `[0, 1]` clip: 1 on the closed interval, 0 outside.
pub fn clip_derivative(a: f64) -> f64 {
    clip01_grad(a)
}

/// Which loss terms a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    CrossEntropy,
    Distill,
    Both,
}

impl Objective {
    fn ce(self) -> bool {
        matches!(self, Objective::CrossEntropy | Objective::Both)
    }

    fn kd(self) -> bool {
        matches!(self, Objective::Distill | Objective::Both)
    }
}

/// Per-parameter gradients and the loss they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Aligned with [`EncoderStack::params`]; quantized weights carry the
    /// straight-through gradient of their latent values.
    pub params: Vec<Matrix>,
    /// Aligned with the KD projections (empty without KD).
    pub projections: Vec<Matrix>,
    pub loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub kd_pairs: Vec<f64>,
    /// Largest final solver residual over the batch.
    pub max_residual: f64,
    /// Largest Neumann length over the batch.
    pub max_vjp_terms: usize,
}

impl GradientBundle {
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .chain(&self.projections)
            .flat_map(|m| m.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.projections).all(Matrix::is_finite) && self.loss.is_finite()
    }
}

/// Teacher targets of one example for the KD term.
pub struct KdTargets<'a> {
    pub config: &'a KdConfig,
    /// Every teacher block output, `seq x teacher_hidden`.
    pub hiddens: &'a [Matrix],
}

/// The loss and its tape at a solved equilibrium.
struct EquilibriumTape<'p> {
    tape: Tape,
    leaves: ParamLeaves<'p>,
    /// Leaves holding `a*`, one per population.
    state: Vec<Var>,
    /// `f_i(a*)` built from the state leaves.
    outputs: Vec<Var>,
    proj: Vec<Var>,
    loss: Var,
    ce: f64,
    kd: f64,
    kd_pairs: Vec<f64>,
}

fn build_loss_tape<'p>(
    graph: &StudentGraph<'_>,
    eff: &'p [Matrix],
    astar: &[Matrix],
    label: usize,
    kd: Option<&KdTargets<'_>>,
    objective: Objective,
) -> Result<EquilibriumTape<'p>> {
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new(eff);
    let state: Vec<Var> = astar.iter().map(|a| tape.leaf(a.clone())).collect();
    let svars: Vec<Option<Var>> = state.iter().copied().map(Some).collect();
    let mut outputs = Vec::with_capacity(state.len());
    for i in 0..state.len() {
        outputs.push(graph.build_population(&mut tape, &mut leaves, i, &svars)?);
    }
    let mut terms = Vec::new();
    let mut ce = 0.0;
    if objective.ce() {
        let logits = graph.build_logits(&mut tape, &mut leaves, state[state.len() - 1])?;
        let l = tape.cross_entropy(logits, label)?;
        ce = tape.value(l).get(0, 0);
        terms.push((l, 1.0));
    }
    let mut proj = Vec::new();
    let mut kd_total = 0.0;
    let mut kd_pairs = Vec::new();
    if objective.kd() {
        let t = kd.ok_or_else(|| Error::config("distillation objective without teacher targets"))?;
        let cfg = t.config;
        cfg.check(graph.stack().num_layers(), t.hiddens.len())?;
        for (h, &f) in cfg.layer_map.iter().enumerate() {
            let p = tape.leaf(cfg.projections[h].clone());
            proj.push(p);
            let s = state[block_output(h).index()];
            let y = tape.matmul(s, p)?;
            let target = tape.leaf(t.hiddens[f].clone());
            let m = tape.mse(y, target)?;
            let mse = tape.value(m).get(0, 0);
            kd_pairs.push(mse);
            kd_total += cfg.loss_weights[h] * mse;
            terms.push((m, cfg.loss_weights[h]));
        }
    }
    if terms.is_empty() {
        return Err(Error::config("no active loss term"));
    }
    let loss = tape.weighted_sum(&terms)?;
    Ok(EquilibriumTape {
        tape,
        leaves,
        state,
        outputs,
        proj,
        loss,
        ce,
        kd: kd_total,
        kd_pairs,
    })
}

/// Gradient contribution of one example.
#[derive(Debug, Clone)]
pub struct ExampleGradient {
    pub params: Vec<Matrix>,
    pub projections: Vec<Matrix>,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub kd_pairs: Vec<f64>,
    pub residual: f64,
    pub vjp: AdjointSolution,
}

impl ExampleGradient {
    pub fn loss(&self) -> f64 {
        self.ce_loss + self.kd_loss
    }
}

/// Loss gradient of one example through the equilibrium. Gradients of
/// quantized weights are taken with respect to their effective values.
#[allow(clippy::too_many_arguments)]
pub fn example_gradient(
    stack: &EncoderStack,
    eff: &[Matrix],
    tokens: &[usize],
    label: usize,
    kd: Option<&KdTargets<'_>>,
    objective: Objective,
    solver: &SolverConfig,
    vjp_cfg: &VjpSolveConfig,
) -> Result<ExampleGradient> {
    let graph = StudentGraph::with_params(stack, eff.to_vec(), tokens)?;
    let solution = solve_fixed_point(&graph, solver)?;
    let astar = &solution.asr_star;
    let et = build_loss_tape(&graph, graph.effective_params(), astar, label, kd, objective)?;
    let tape = &et.tape;

    let one = Matrix::filled(1, 1, 1.0);
    let g_grads = tape.backward_wrt(&[(et.loss, one.clone())], &et.state)?;
    let g: Vec<Matrix> = et
        .state
        .iter()
        .zip(astar)
        .map(|(v, a)| g_grads.get_or_zeros(*v, a))
        .collect();

    let vjp = |u: &[f64]| -> Result<Vec<f64>> {
        let parts = crate::equilibrium::unflatten(astar, u)?;
        let seeds: Vec<(Var, Matrix)> = et
            .outputs
            .iter()
            .zip(parts)
            .filter(|(_, m)| m.data().iter().any(|x| *x != 0.0))
            .map(|(o, m)| (*o, m))
            .collect();
        if seeds.is_empty() {
            return Ok(vec![0.0; u.len()]);
        }
        let grads = tape.backward_wrt(&seeds, &et.state)?;
        Ok(et
            .state
            .iter()
            .zip(astar)
            .flat_map(|(v, a)| grads.get_or_zeros(*v, a).into_data())
            .collect())
    };
    // Every population reads only earlier ones, so J is strictly block
    // lower triangular.
    let adj = implicit_vjp_nilpotent(&crate::equilibrium::flatten(&g), vjp, vjp_cfg)?;

    let parts = crate::equilibrium::unflatten(astar, &adj.adjoint)?;
    let mut seeds = vec![(et.loss, one)];
    seeds.extend(
        et.outputs
            .iter()
            .zip(parts)
            .filter(|(_, m)| m.data().iter().any(|x| *x != 0.0))
            .map(|(o, m)| (*o, m)),
    );
    let registered = et.leaves.registered();
    let mut targets: Vec<Var> = registered.iter().map(|(_, v)| *v).collect();
    targets.extend(&et.proj);
    let grads = tape.backward_wrt(&seeds, &targets)?;
    let mut params: Vec<Matrix> = eff.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for (i, v) in registered {
        if let Some(gm) = grads.get(v) {
            params[i] = gm.clone();
        }
    }
    let projections = et.proj.iter().map(|p| grads.get_or_zeros(*p, tape.value(*p))).collect();
    Ok(ExampleGradient {
        params,
        projections,
        ce_loss: et.ce,
        kd_loss: et.kd,
        kd_pairs: et.kd_pairs,
        residual: solution.final_residual(),
        vjp: adj,
    })
}

/// Loss of one example at its equilibrium (finite-difference objective).
pub fn example_loss(
    stack: &EncoderStack,
    tokens: &[usize],
    label: usize,
    kd: Option<&KdTargets<'_>>,
    objective: Objective,
    solver: &SolverConfig,
) -> Result<f64> {
    let eff = stack.effective_params()?;
    let graph = StudentGraph::with_params(stack, eff, tokens)?;
    let solution = solve_fixed_point(&graph, solver)?;
    let et = build_loss_tape(
        &graph,
        graph.effective_params(),
        &solution.asr_star,
        label,
        kd,
        objective,
    )?;
    Ok(et.tape.value(et.loss).get(0, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam state for the student parameters and KD projections.
#[derive(Debug, Clone)]
pub struct StudentOptimizer {
    pub params: Vec<AdamState>,
    pub projections: Vec<AdamState>,
}

impl StudentOptimizer {
    pub fn new(stack: &EncoderStack, kd: Option<&KdConfig>, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = |m: &Matrix| AdamState::for_param(m, cfg.lr, cfg.beta1, cfg.beta2);
        Ok(Self {
            params: stack.params().into_iter().map(adam).collect(),
            projections: kd.map(|k| k.projections.iter().map(adam).collect()).unwrap_or_default(),
        })
    }
}

/// Settings shared by every training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub objective: Objective,
    pub solver: SolverConfig,
    pub vjp: VjpSolveConfig,
}

impl StepConfig {
    /// Solver settings used for gradients (tolerance at most 1e-8).
    pub fn gradient_solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.solver.tol.min(1e-8),
            ..self.solver
        }
    }
}

/// Mean gradient over a batch.
pub fn batch_gradient(
    stack: &EncoderStack,
    batch: &[&EncodedExample],
    teacher_hiddens: Option<&[&[Matrix]]>,
    kd: Option<&KdConfig>,
    cfg: &StepConfig,
) -> Result<GradientBundle> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let eff = stack.effective_params()?;
    let solver = cfg.gradient_solver();
    let mut bundle = GradientBundle {
        params: eff.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        projections: kd
            .map(|k| {
                k.projections
                    .iter()
                    .map(|p| Matrix::zeros(p.rows(), p.cols()))
                    .collect()
            })
            .unwrap_or_default(),
        loss: 0.0,
        ce_loss: 0.0,
        kd_loss: 0.0,
        kd_pairs: kd.map(|k| vec![0.0; k.layer_map.len()]).unwrap_or_default(),
        max_residual: 0.0,
        max_vjp_terms: 0,
    };
    let scale = 1.0 / batch.len() as f64;
    for (i, ex) in batch.iter().enumerate() {
        let targets = match (kd, teacher_hiddens) {
            (Some(config), Some(h)) => Some(KdTargets { config, hiddens: h[i] }),
            _ => None,
        };
        let g = example_gradient(
            stack,
            &eff,
            &ex.ids,
            ex.label,
            targets.as_ref(),
            cfg.objective,
            &solver,
            &cfg.vjp,
        )?;
        for (acc, p) in bundle.params.iter_mut().zip(&g.params) {
            acc.add_scaled(p, scale)?;
        }
        for (acc, p) in bundle.projections.iter_mut().zip(&g.projections) {
            acc.add_scaled(p, scale)?;
        }
        for (acc, p) in bundle.kd_pairs.iter_mut().zip(&g.kd_pairs) {
            *acc += scale * p;
        }
        bundle.ce_loss += scale * g.ce_loss;
        bundle.kd_loss += scale * g.kd_loss;
        bundle.max_residual = bundle.max_residual.max(g.residual);
        bundle.max_vjp_terms = bundle.max_vjp_terms.max(g.vjp.terms);
    }
    bundle.loss = bundle.ce_loss + bundle.kd_loss;
    for (i, p) in bundle.params.iter_mut().enumerate() {
        if stack.is_quantized_param(i) {
            let layer = (i - 2) / crate::model::PARAMS_PER_BLOCK;
            let lin = stack.layers[layer].linears()[(i - 2) % crate::model::PARAMS_PER_BLOCK / 2];
            *p = lin.ste_backward(p)?;
        }
    }
    if !bundle.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(bundle)
}

/// One optimization step: batch gradient through the equilibrium, Adam on
/// latent weights (and KD projections), then fresh quantization statistics.
pub fn training_step(
    stack: &mut EncoderStack,
    batch: &[&EncodedExample],
    teacher_hiddens: Option<&[&[Matrix]]>,
    kd: Option<&mut KdConfig>,
    optimizer: &mut StudentOptimizer,
    cfg: &StepConfig,
) -> Result<GradientBundle> {
    let bundle = batch_gradient(stack, batch, teacher_hiddens, kd.as_deref(), cfg)?;
    for ((p, g), st) in stack
        .params_mut()
        .into_iter()
        .zip(&bundle.params)
        .zip(&mut optimizer.params)
    {
        st.step(p, g)?;
    }
    if let Some(k) = kd {
        if cfg.objective.kd() {
            for ((p, g), st) in k
                .projections
                .iter_mut()
                .zip(&bundle.projections)
                .zip(&mut optimizer.projections)
            {
                st.step(p, g)?;
            }
        }
    }
    stack.refresh_quant_stats()?;
    Ok(bundle)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub max_residual: f64,
    pub max_vjp_terms: usize,
    pub grad_norm: f64,
}

impl TrainLogRecord {
    pub fn from_bundle(stage: &str, epoch: usize, step: usize, b: &GradientBundle) -> Self {
        Self {
            stage: stage.to_string(),
            epoch,
            step,
            loss: b.loss,
            ce_loss: b.ce_loss,
            kd_loss: b.kd_loss,
            max_residual: b.max_residual,
            max_vjp_terms: b.max_vjp_terms,
            grad_norm: b.grad_norm(),
        }
    }
}
