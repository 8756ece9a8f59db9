use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
seed = 3
[data]
train_size = 32
dev_size = 16
max_len = 8
[teacher]
hidden = 8
intermediate = 16
epochs = 3
batch_size = 8
[student]
hidden = 8
intermediate = 16
[kd]
epochs = 2
batch_size = 8
[finetune]
epochs = 2
batch_size = 8
[simulate]
timesteps = 40
[energy]
timesteps = 20
eval_examples = 4
"#;

fn spikelm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikelm")).args(args).output().unwrap()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

/// Teacher, distilled and fine-tuned tiny students, built once.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = write_config(&root, "tiny.toml", "");
        let cfg = path_arg(&config);
        let out = path_arg(&root);
        assert_exit(&spikelm(&["--config", cfg, "--out", out, "train-teacher"]), 0);
        let teacher = root.join("teacher.ckpt.json");
        assert_exit(
            &spikelm(&[
                "--config",
                cfg,
                "--out",
                out,
                "distill",
                "--teacher",
                path_arg(&teacher),
            ]),
            0,
        );
        let distilled = root.join("student_distilled.ckpt.json");
        assert_exit(
            &spikelm(&[
                "--config",
                cfg,
                "--out",
                out,
                "finetune",
                "--student",
                path_arg(&distilled),
            ]),
            0,
        );
        Trained {
            _dir: dir,
            root,
            config,
        }
    })
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_its_artifacts() {
    let t = trained();
    for name in [
        "teacher.ckpt.json",
        "teacher_log.jsonl",
        "teacher_metrics.json",
        "student_distilled.ckpt.json",
        "kd_report.csv",
        "distill_log.jsonl",
        "distill_metrics.json",
        "student_finetuned.ckpt.json",
        "finetune_log.jsonl",
        "finetune_metrics.json",
    ] {
        assert!(t.root.join(name).is_file(), "missing {name}");
    }
    let csv = std::fs::read_to_string(t.root.join("kd_report.csv")).unwrap();
    assert!(csv.starts_with("epoch,pair_index,mse,total\n"));
    // two epochs over two layer pairs
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn simulate_energy_and_eval_run_on_the_students() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cfg = path_arg(&t.config);
    let out = path_arg(dir.path());
    let ft = t.root.join("student_finetuned.ckpt.json");

    let sim = spikelm(&["--config", cfg, "--out", out, "simulate", "--checkpoint", path_arg(&ft)]);
    assert_exit(&sim, 0);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,layer_name,mean_asr,residual\n"));
    // 40 steps of 1 + 9 * 2 populations
    assert_eq!(trace.lines().count(), 1 + 40 * 19);

    let fp_dir = tempfile::tempdir().unwrap();
    let fp_out = path_arg(fp_dir.path());
    let fresh = [
        "--config",
        cfg,
        "--out",
        fp_out,
        "--quant",
        "fp",
        "finetune",
        "--allow-skip-kd",
    ];
    assert_exit(&spikelm(&fresh), 0);
    let fp = fp_dir.path().join("student_finetuned.ckpt.json");
    let energy = spikelm(&[
        "--config",
        cfg,
        "--out",
        out,
        "energy",
        "--quant-checkpoint",
        path_arg(&ft),
        "--fp-checkpoint",
        path_arg(&fp),
    ]);
    assert_exit(&energy, 0);
    let report = json(&dir.path().join("energy.json"));
    assert!(report["quantized"]["integer_acc"].as_bool().unwrap());
    assert!(!report["full_precision"]["integer_acc"].as_bool().unwrap());

    let eval = spikelm(&[
        "--config",
        cfg,
        "--out",
        out,
        "--timesteps",
        "30",
        "eval",
        "--checkpoint",
        path_arg(&ft),
    ]);
    assert_exit(&eval, 0);
    let summary = json(&dir.path().join("eval.json"));
    assert_eq!(summary["stage"], "finetuned");
    assert_eq!(summary["timesteps"], 30);
}

#[test]
fn finetuning_an_undistilled_student_needs_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", "");
    let out = path_arg(dir.path());
    let refused = spikelm(&["--config", path_arg(&config), "--out", out, "finetune"]);
    assert_exit(&refused, 2);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--allow-skip-kd"));
    assert!(!dir.path().join("student_finetuned.ckpt.json").exists());

    let accepted = spikelm(&[
        "--config",
        path_arg(&config),
        "--out",
        out,
        "finetune",
        "--allow-skip-kd",
    ]);
    assert_exit(&accepted, 0);
    assert_eq!(json(&dir.path().join("finetune_metrics.json"))["input_stage"], "init");
}

#[test]
fn zero_learning_rate_keeps_the_student() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", "");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("[finetune]\nepochs = 2", "[finetune]\nlr = 0.0\nepochs = 2");
    std::fs::write(&config, text).unwrap();
    let distilled = t.root.join("student_distilled.ckpt.json");
    let run = spikelm(&[
        "--config",
        path_arg(&config),
        "--out",
        path_arg(dir.path()),
        "finetune",
        "--student",
        path_arg(&distilled),
    ]);
    assert_exit(&run, 0);
    let m = json(&dir.path().join("finetune_metrics.json"));
    for acc in m["dev_accuracy_per_epoch"].as_array().unwrap() {
        assert_eq!(acc, &m["initial_dev_accuracy"]);
    }
    let before = json(&distilled);
    let after = json(&dir.path().join("student_finetuned.ckpt.json"));
    assert_eq!(before["model"], after["model"]);
}

#[test]
fn zero_kd_epochs_returns_the_initial_student() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("[kd]\nepochs = 2", "[kd]\nepochs = 0")
        .replace("[finetune]\nepochs = 2", "[finetune]\nepochs = 0");
    let config = dir.path().join("c.toml");
    std::fs::write(&config, text).unwrap();
    let cfg = path_arg(&config);
    let kd_dir = dir.path().join("kd");
    let init_dir = dir.path().join("init");
    let teacher = t.root.join("teacher.ckpt.json");
    assert_exit(
        &spikelm(&[
            "--config",
            cfg,
            "--out",
            path_arg(&kd_dir),
            "distill",
            "--teacher",
            path_arg(&teacher),
        ]),
        0,
    );
    assert_exit(
        &spikelm(&[
            "--config",
            cfg,
            "--out",
            path_arg(&init_dir),
            "finetune",
            "--allow-skip-kd",
        ]),
        0,
    );
    let distilled = json(&kd_dir.join("student_distilled.ckpt.json"));
    let init = json(&init_dir.join("student_finetuned.ckpt.json"));
    assert_eq!(distilled["model"], init["model"]);
    let m = json(&kd_dir.join("distill_metrics.json"));
    assert_eq!(m["initial_kd_loss"], m["final_kd_loss"]);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_arg(dir.path());
    let unknown = write_config(dir.path(), "u.toml", "[bogus]\nx = 1\n");
    assert_exit(
        &spikelm(&["--config", path_arg(&unknown), "--out", out, "train-teacher"]),
        2,
    );

    let bad_heads = dir.path().join("h.toml");
    std::fs::write(
        &bad_heads,
        TINY.replace("[student]\nhidden = 8", "[student]\nhidden = 9"),
    )
    .unwrap();
    assert_exit(
        &spikelm(&[
            "--config",
            path_arg(&bad_heads),
            "--out",
            out,
            "finetune",
            "--allow-skip-kd",
        ]),
        2,
    );

    let t = trained();
    let teacher = t.root.join("teacher.ckpt.json");
    let cfg = path_arg(&t.config);
    // a teacher is not a student
    assert_exit(
        &spikelm(&[
            "--config",
            cfg,
            "--out",
            out,
            "simulate",
            "--checkpoint",
            path_arg(&teacher),
        ]),
        2,
    );

    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, "{\"version\": 1").unwrap();
    assert_exit(
        &spikelm(&[
            "--config",
            cfg,
            "--out",
            out,
            "eval",
            "--checkpoint",
            path_arg(&corrupt),
        ]),
        2,
    );
}

#[test]
fn energy_rejects_mismatched_students() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let wide = dir.path().join("w.toml");
    std::fs::write(&wide, TINY.replace("[student]\nhidden = 8", "[student]\nhidden = 12")).unwrap();
    let other = dir.path().join("other");
    let fresh = [
        "--config",
        path_arg(&wide),
        "--out",
        path_arg(&other),
        "--quant",
        "fp",
        "finetune",
        "--allow-skip-kd",
    ];
    assert_exit(&spikelm(&fresh), 0);
    let run = spikelm(&[
        "--config",
        path_arg(&t.config),
        "--out",
        path_arg(dir.path()),
        "energy",
        "--quant-checkpoint",
        path_arg(&t.root.join("student_finetuned.ckpt.json")),
        "--fp-checkpoint",
        path_arg(&other.join("student_finetuned.ckpt.json")),
    ]);
    assert_exit(&run, 2);
}

#[test]
fn solver_non_convergence_exits_with_code_3() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", "[solver]\nmax_iters = 2\ndamping = 0.5\n");
    let ft = t.root.join("student_finetuned.ckpt.json");
    let run = spikelm(&[
        "--config",
        path_arg(&config),
        "--out",
        path_arg(dir.path()),
        "eval",
        "--checkpoint",
        path_arg(&ft),
    ]);
    assert_exit(&run, 3);
}

#[test]
fn missing_files_exit_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_arg(dir.path());
    let missing = dir.path().join("nope.toml");
    assert_exit(
        &spikelm(&["--config", path_arg(&missing), "--out", out, "train-teacher"]),
        4,
    );

    let data = write_config(dir.path(), "d.toml", "");
    let text = std::fs::read_to_string(&data).unwrap().replace(
        "[data]\n",
        "[data]\ntrain_path = \"/nonexistent/train.tsv\"\ndev_path = \"/nonexistent/dev.tsv\"\n",
    );
    std::fs::write(&data, text).unwrap();
    assert_exit(
        &spikelm(&["--config", path_arg(&data), "--out", out, "train-teacher"]),
        4,
    );

    let absent = dir.path().join("absent.ckpt.json");
    let cfg = write_config(dir.path(), "c.toml", "");
    assert_exit(
        &spikelm(&[
            "--config",
            path_arg(&cfg),
            "--out",
            out,
            "eval",
            "--checkpoint",
            path_arg(&absent),
        ]),
        4,
    );
}
