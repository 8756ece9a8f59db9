//! Harness for the acceptance suite: runs the reference pipeline through
//! the `spikelm` command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde_json::Value;

pub const MODES: [&str; 3] = ["1.58bit", "fp", "1bit"];

/// The reference task configuration.
pub fn reference_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

pub fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

pub fn number(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

/// Runs one `spikelm` command with the reference config and returns its
/// wall time. Panics if the command fails.
pub fn spikelm(args: &[&str]) -> Duration {
    let t0 = Instant::now();
    let config = reference_config();
    let argv = ["spikelm", "--config", p(&config)]
        .into_iter()
        .chain(args.iter().copied());
    if let Err((code, message)) = spikelm_cli::execute(argv) {
        panic!("spikelm {args:?} exited with {code}: {message}");
    }
    t0.elapsed()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One seed of the reference pipeline: teacher, a distilled and fine-tuned
/// student per quantization mode, and a fine-tuned student without KD.
pub struct SeedRun {
    pub dir: PathBuf,
    /// Wall time per command.
    pub timings: BTreeMap<String, Duration>,
}

impl SeedRun {
    pub fn run(root: &Path, seed: u64) -> Self {
        let dir = root.join(format!("s{seed}"));
        let s = seed.to_string();
        let mut timings = BTreeMap::new();
        timings.insert(
            "teacher".to_string(),
            spikelm(&["--seed", &s, "--out", p(&dir), "train-teacher"]),
        );
        let teacher = dir.join("teacher.ckpt.json");
        for q in MODES {
            let out = dir.join(q);
            let base = ["--seed", &s, "--quant", q, "--out", p(&out)];
            let d = spikelm(&[&base[..], &["distill", "--teacher", p(&teacher)]].concat());
            timings.insert(format!("distill-{q}"), d);
            let student = out.join("student_distilled.ckpt.json");
            let ft = spikelm(&[&base[..], &["finetune", "--student", p(&student)]].concat());
            timings.insert(format!("finetune-{q}"), ft);
        }
        let nokd = dir.join("nokd");
        let t = spikelm(&["--seed", &s, "--out", p(&nokd), "finetune", "--allow-skip-kd"]);
        timings.insert("nokd".to_string(), t);
        Self { dir, timings }
    }

    pub fn finetuned(&self, q: &str) -> PathBuf {
        self.dir.join(q).join("student_finetuned.ckpt.json")
    }

    pub fn final_accuracy(&self, sub: &str) -> f64 {
        number(&read_json(&self.dir.join(sub).join("finetune_metrics.json"))["final_dev_accuracy"])
    }

    /// `simulate`, `energy` and `eval` on the fine-tuned students.
    pub fn analyze(&self) {
        for q in MODES {
            let out = self.dir.join(format!("simulate-{q}"));
            spikelm(&["--out", p(&out), "simulate", "--checkpoint", p(&self.finetuned(q))]);
        }
        let energy = self.dir.join("energy");
        spikelm(&[
            "--out",
            p(&energy),
            "energy",
            "--quant-checkpoint",
            p(&self.finetuned("1.58bit")),
            "--fp-checkpoint",
            p(&self.finetuned("fp")),
        ]);
        let eval = self.dir.join("eval");
        spikelm(&["--out", p(&eval), "eval", "--checkpoint", p(&self.finetuned("1.58bit"))]);
    }
}

/// Every file below `dir` with its bytes, keyed by relative path.
pub fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}
