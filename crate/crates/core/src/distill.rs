//! Layer-wise knowledge distillation from the teacher into the spiking
//! student's equilibrium rates.
//!
//! Student block `h` is paired with teacher block `f(h) = ceil(h L_t / L_s)`
//! (1-based) and a projection `W_p` maps its ASRs into the teacher width:
//! `L_kd = sum_h w_h MSE(a*_h W_p_h, T_f(h))`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::equilibrium::SolverConfig;
use crate::error::{Error, Result};
use crate::implicit_grad::{
    batch_gradient, training_step, Objective, OptimizerConfig, StepConfig, StudentOptimizer, TrainLogRecord,
    VjpSolveConfig,
};
use crate::model::teacher::TeacherModel;
use crate::model::{block_output, EncoderStack};
use crate::numerics::{seeded_rng, Matrix};

/// 0-based teacher block paired with each student block.
pub fn default_layer_map(student_layers: usize, teacher_layers: usize) -> Vec<usize> {
    (1..=student_layers)
        .map(|h| (h * teacher_layers).div_ceil(student_layers) - 1)
        .collect()
}

/// `rows x cols` matrix with ones on the leading diagonal.
pub fn padded_identity(rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows.min(cols) {
        m.set(i, i, 1.0);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub layer_map: Vec<usize>,
    /// One `student_hidden x teacher_hidden` matrix per student block.
    pub projections: Vec<Matrix>,
    pub loss_weights: Vec<f64>,
}

impl KdConfig {
    /// Default map, identity-padded projections and unit weights.
    pub fn new(
        student_layers: usize,
        student_hidden: usize,
        teacher_layers: usize,
        teacher_hidden: usize,
    ) -> Result<Self> {
        if student_layers == 0 || teacher_layers == 0 {
            return Err(Error::config("distillation needs at least one block on each side"));
        }
        Ok(Self {
            layer_map: default_layer_map(student_layers, teacher_layers),
            projections: vec![padded_identity(student_hidden, teacher_hidden); student_layers],
            loss_weights: vec![1.0; student_layers],
        })
    }

    /// Projections drawn from `U(-1/sqrt(ds), 1/sqrt(ds))` instead of the
    /// padded identity.
    pub fn with_random_projections(mut self, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        for p in &mut self.projections {
            *p = Matrix::init_fan_in(p.rows(), p.cols(), p.rows(), &mut rng);
        }
        self
    }

    pub fn for_models(student: &EncoderStack, teacher: &TeacherModel) -> Result<Self> {
        Self::new(
            student.num_layers(),
            student.config.hidden,
            teacher.num_layers(),
            teacher.config.hidden,
        )
    }

    pub fn num_pairs(&self) -> usize {
        self.layer_map.len()
    }

    /// Validates the map against the model depths.
    pub fn check(&self, student_layers: usize, teacher_layers: usize) -> Result<()> {
        if self.layer_map.len() != student_layers
            || self.projections.len() != student_layers
            || self.loss_weights.len() != student_layers
        {
            return Err(Error::config(format!(
                "distillation map covers {} blocks, student has {student_layers}",
                self.layer_map.len()
            )));
        }
        if let Some(bad) = self.layer_map.iter().find(|&&f| f >= teacher_layers) {
            return Err(Error::config(format!(
                "distillation maps to teacher block {bad}, teacher has {teacher_layers}"
            )));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config(
                "distillation loss weights must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Per-pair and weighted total distillation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss {
    pub pairs: Vec<f64>,
    pub total: f64,
}

/// Distillation loss of one example from student block ASRs and teacher
/// block outputs.
pub fn kd_loss(student: &[&Matrix], teacher: &[Matrix], cfg: &KdConfig) -> Result<KdLoss> {
    cfg.check(student.len(), teacher.len())?;
    let mut pairs = Vec::with_capacity(student.len());
    let mut total = 0.0;
    for (h, &f) in cfg.layer_map.iter().enumerate() {
        let y = student[h].matmul(&cfg.projections[h])?;
        let diff = y.sub(&teacher[f])?;
        let mse = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        total += cfg.loss_weights[h] * mse;
        pairs.push(mse);
    }
    Ok(KdLoss { pairs, total })
}

/// Mean distillation loss over a data set at the student's equilibria.
pub fn evaluate_kd(
    student: &EncoderStack,
    teacher_hiddens: &[Vec<Matrix>],
    data: &[EncodedExample],
    cfg: &KdConfig,
    solver: &SolverConfig,
) -> Result<KdLoss> {
    if data.is_empty() {
        return Err(Error::config("distillation needs at least one example"));
    }
    let mut acc = KdLoss {
        pairs: vec![0.0; cfg.num_pairs()],
        total: 0.0,
    };
    for (ex, th) in data.iter().zip(teacher_hiddens) {
        let out = student.forward_train(&ex.ids, solver)?;
        let l = kd_loss(&out.block_outputs(), th, cfg)?;
        for (a, p) in acc.pairs.iter_mut().zip(&l.pairs) {
            *a += p;
        }
        acc.total += l.total;
    }
    let n = data.len() as f64;
    acc.pairs.iter_mut().for_each(|p| *p /= n);
    acc.total /= n;
    Ok(acc)
}

/// Training hyperparameters for one optimization stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub solver: SolverConfig,
    pub vjp: VjpSolveConfig,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        self.optimizer.validate()?;
        self.solver.validate()?;
        self.vjp.validate()
    }
}

/// Distillation loss after one epoch (epoch 0 is before training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdEpoch {
    pub epoch: usize,
    pub pair_mse: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdReport {
    pub epochs: Vec<KdEpoch>,
}

impl KdReport {
    pub fn initial(&self) -> &KdEpoch {
        &self.epochs[0]
    }

    pub fn last(&self) -> &KdEpoch {
        self.epochs.last().expect("report holds the initial loss")
    }

    /// `epoch,pair_index,mse,total` rows for every trained epoch.
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        let io = |e| Error::io("<kd report>", e);
        writeln!(out, "epoch,pair_index,mse,total").map_err(io)?;
        for e in self.epochs.iter().filter(|e| e.epoch > 0) {
            for (i, m) in e.pair_mse.iter().enumerate() {
                writeln!(out, "{},{},{:.9},{:.9}", e.epoch, i, m, e.total).map_err(io)?;
            }
        }
        Ok(())
    }
}

/// Trains the student (and the projections) on the distillation loss alone.
/// `on_step` receives every training-log record.
pub fn run_distillation(
    student: &mut EncoderStack,
    teacher: &TeacherModel,
    data: &[EncodedExample],
    kd: &mut KdConfig,
    stage: &StageConfig,
    on_step: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<KdReport> {
    stage.validate()?;
    kd.check(student.num_layers(), teacher.num_layers())?;
    if data.is_empty() {
        return Err(Error::config("distillation needs at least one example"));
    }
    let hiddens: Vec<Vec<Matrix>> = data
        .iter()
        .map(|ex| teacher.teacher_forward(&ex.ids).map(|o| o.hiddens))
        .collect::<Result<_>>()?;
    let step_cfg = StepConfig {
        objective: Objective::Distill,
        solver: stage.solver,
        vjp: stage.vjp,
    };
    let eval_solver = step_cfg.gradient_solver();
    let mut optimizer = StudentOptimizer::new(student, Some(kd), &stage.optimizer)?;
    let mut rng = seeded_rng(stage.seed);
    let first = evaluate_kd(student, &hiddens, data, kd, &eval_solver)?;
    let mut report = KdReport {
        epochs: vec![KdEpoch {
            epoch: 0,
            pair_mse: first.pairs,
            total: first.total,
        }],
    };
    let mut step = 0;
    for epoch in 1..=stage.epochs {
        for batch in crate::data::shuffled_batches(data.len(), stage.batch_size, &mut rng)? {
            let examples: Vec<&EncodedExample> = batch.iter().map(|&i| &data[i]).collect();
            let targets: Vec<&[Matrix]> = batch.iter().map(|&i| hiddens[i].as_slice()).collect();
            let b = training_step(student, &examples, Some(&targets), Some(kd), &mut optimizer, &step_cfg)?;
            step += 1;
            on_step(&TrainLogRecord::from_bundle("distill", epoch, step, &b))?;
        }
        let l = evaluate_kd(student, &hiddens, data, kd, &eval_solver)?;
        report.epochs.push(KdEpoch {
            epoch,
            pair_mse: l.pairs,
            total: l.total,
        });
    }
    Ok(report)
}

/// Distillation gradient of one batch, exposed for checks.
pub fn kd_batch_gradient(
    student: &EncoderStack,
    teacher: &TeacherModel,
    batch: &[&EncodedExample],
    kd: &KdConfig,
    solver: SolverConfig,
    vjp: VjpSolveConfig,
) -> Result<crate::implicit_grad::GradientBundle> {
    let hiddens: Vec<Vec<Matrix>> = batch
        .iter()
        .map(|ex| teacher.teacher_forward(&ex.ids).map(|o| o.hiddens))
        .collect::<Result<_>>()?;
    let targets: Vec<&[Matrix]> = hiddens.iter().map(Vec::as_slice).collect();
    batch_gradient(
        student,
        batch,
        Some(&targets),
        Some(kd),
        &StepConfig {
            objective: Objective::Distill,
            solver,
            vjp,
        },
    )
}

/// Student ASRs of the distilled blocks, in map order.
pub fn distilled_populations(student_layers: usize) -> Vec<usize> {
    (0..student_layers).map(|h| block_output(h).index()).collect()
}
