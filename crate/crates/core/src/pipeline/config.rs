//! TOML pipeline configuration. Every key has a default and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SynthKind, DEFAULT_MAX_LEN};
use crate::distill::StageConfig;
use crate::energy::TechProfile;
use crate::equilibrium::SolverConfig;
use crate::error::{Error, Result};
use crate::implicit_grad::{OptimizerConfig, VjpSolveConfig};
use crate::model::teacher::TeacherConfig;
use crate::model::StudentConfig;
use crate::neuron::LifConfig;
use crate::quantizer::{QuantMode, DEFAULT_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic task used when no TSV paths are given.
    pub task: SynthKind,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub train_size: usize,
    pub dev_size: usize,
    pub max_len: usize,
    /// Seed of the synthetic corpora (independent of the model seed).
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: SynthKind::KeywordPresence,
            train_path: None,
            dev_path: None,
            train_size: 256,
            dev_size: 128,
            max_len: DEFAULT_MAX_LEN,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            intermediate: 128,
            heads: 2,
            layers: 2,
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub quant: QuantMode,
    pub lif: LifConfig,
    pub epsilon: f64,
    pub binary_scale: bool,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            intermediate: 128,
            heads: 2,
            layers: 2,
            quant: QuantMode::Ternary158Bit,
            lif: LifConfig::default(),
            epsilon: DEFAULT_EPSILON,
            binary_scale: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionInit {
    Identity,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub projection: ProjectionInit,
    /// One weight per student block; unit weights when absent.
    pub loss_weights: Option<Vec<f64>>,
}

impl Default for KdSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 5e-4,
            batch_size: 16,
            projection: ProjectionInit::Identity,
            loss_weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 5e-4,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub timesteps: usize,
    /// Dev example traced by `simulate`.
    pub example: usize,
    /// Output-layer residual defining steps-to-tolerance.
    pub tolerance: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            timesteps: 500,
            example: 0,
            tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub timesteps: usize,
    /// Leading dev examples used as the evaluation set.
    pub eval_examples: usize,
    pub profile: TechProfile,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self {
            timesteps: 100,
            eval_examples: 32,
            profile: TechProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub solver: SolverConfig,
    pub vjp: VjpSolveConfig,
    pub kd: KdSection,
    pub finetune: FinetuneSection,
    pub adam: AdamSection,
    pub simulate: SimulateSection,
    pub energy: EnergySection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            solver: SolverConfig::default(),
            vjp: VjpSolveConfig::default(),
            kd: KdSection::default(),
            finetune: FinetuneSection::default(),
            adam: AdamSection::default(),
            simulate: SimulateSection::default(),
            energy: EnergySection::default(),
        }
    }
}

fn check_batch(name: &str, batch: usize, lr: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::config(format!("{name}.batch_size must be at least 1")));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("{name}.lr must be finite and non-negative")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.max_len < 2 {
            return Err(Error::config("data.max_len must be at least 2"));
        }
        if d.train_path.is_some() != d.dev_path.is_some() {
            return Err(Error::config(
                "data.train_path and data.dev_path must be given together",
            ));
        }
        if d.train_path.is_none() && (d.train_size < 2 || d.dev_size < 2) {
            return Err(Error::config("synthetic splits need at least 2 examples"));
        }
        self.teacher_config(2, 2).validate()?;
        self.student_config(2, 2).validate()?;
        self.solver.validate()?;
        self.vjp.validate()?;
        check_batch("teacher", self.teacher.batch_size, self.teacher.lr)?;
        check_batch("kd", self.kd.batch_size, self.kd.lr)?;
        check_batch("finetune", self.finetune.batch_size, self.finetune.lr)?;
        self.optimizer(0.0).validate()?;
        if let Some(w) = &self.kd.loss_weights {
            if w.len() != self.student.layers {
                return Err(Error::config(format!(
                    "kd.loss_weights has {} entries for {} student layers",
                    w.len(),
                    self.student.layers
                )));
            }
        }
        if self.simulate.timesteps == 0 || self.energy.timesteps == 0 {
            return Err(Error::config("timesteps must be at least 1"));
        }
        if !(self.simulate.tolerance > 0.0) {
            return Err(Error::config("simulate.tolerance must be positive"));
        }
        if self.energy.eval_examples == 0 {
            return Err(Error::config("energy.eval_examples must be at least 1"));
        }
        self.energy.profile.validate()
    }

    pub fn teacher_config(&self, vocab_size: usize, num_labels: usize) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            vocab_size,
            max_len: self.data.max_len,
            hidden: t.hidden,
            intermediate: t.intermediate,
            heads: t.heads,
            layers: t.layers,
            num_labels,
        }
    }

    pub fn student_config(&self, vocab_size: usize, num_labels: usize) -> StudentConfig {
        let s = &self.student;
        StudentConfig {
            vocab_size,
            max_len: self.data.max_len,
            hidden: s.hidden,
            intermediate: s.intermediate,
            heads: s.heads,
            layers: s.layers,
            num_labels,
            quant: s.quant,
            lif: s.lif,
            epsilon: s.epsilon,
            binary_scale: s.binary_scale,
        }
    }

    pub fn optimizer(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            lr,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
        }
    }

    pub fn kd_stage(&self, seed: u64) -> StageConfig {
        StageConfig {
            epochs: self.kd.epochs,
            batch_size: self.kd.batch_size,
            optimizer: self.optimizer(self.kd.lr),
            solver: self.solver,
            vjp: self.vjp,
            seed,
        }
    }

    pub fn finetune_stage(&self, seed: u64) -> StageConfig {
        StageConfig {
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            optimizer: self.optimizer(self.finetune.lr),
            solver: self.solver,
            vjp: self.vjp,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.kd.epochs, 30);
        assert_eq!(cfg.finetune.epochs, 20);
        assert_eq!(cfg.teacher.lr, 1e-3);
        assert_eq!(cfg.finetune.lr, 5e-4);
        assert_eq!(cfg.kd.batch_size, 16);
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 4\n[student]\nquant = \"1bit\"\nhidden = 16\nintermediate = 32\n[solver]\ntol = 1e-7\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.student.quant, QuantMode::Binary1Bit);
        assert_eq!(cfg.student.heads, 2);
        assert_eq!(cfg.solver.tol, 1e-7);
        assert_eq!(cfg.solver.max_iters, 500);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[student]\nwidth = 3", "[solver]\ntolerance = 1.0"] {
            assert!(
                matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "[student]\nhidden = 15",
            "[finetune]\nbatch_size = 0",
            "[solver]\ndamping = 0.0",
            "[kd]\nloss_weights = [1.0]",
            "[data]\ntrain_path = \"a.tsv\"",
            "[energy.profile]\nfloat_acc_pj = 0.9",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = PipelineConfig::default();
        cfg.data.train_path = Some("train.tsv".into());
        cfg.data.dev_path = Some("dev.tsv".into());
        cfg.kd.loss_weights = Some(vec![1.0, 0.5]);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
