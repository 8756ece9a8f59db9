//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is always
//! printed. Numeric arguments select criteria, e.g.
//! `cargo test -p spikelm-validation --test acceptance -- 3 6`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use spikelm::energy::exact_acc_ops;
use spikelm::equilibrium::SolverConfig;
use spikelm::implicit_grad::{example_gradient, example_loss, Objective, VjpSolveConfig};
use spikelm::model::{EncoderStack, StudentConfig};
use spikelm::numerics::{finite_difference_grad, seeded_rng, Matrix};
use spikelm::pipeline::checkpoint::Checkpoint;
use spikelm::pipeline::config::PipelineConfig;
use spikelm::pipeline::Dataset;
use spikelm::quantizer::{quantize_158bit, quantize_1bit, QuantMode, DEFAULT_EPSILON};
use spikelm_validation::{files_under, number as f, read_json, reference_config, SeedRun};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Context {
    root: PathBuf,
    runs: Option<Vec<SeedRun>>,
    analyzed: bool,
}

impl Context {
    fn runs(&mut self) -> &[SeedRun] {
        if self.runs.is_none() {
            let t0 = Instant::now();
            let root = self.root.join("run1");
            self.runs = Some(SEEDS.iter().map(|&s| SeedRun::run(&root, s)).collect());
            println!(
                "  reference pipelines for {} seeds trained in {:.1?}",
                SEEDS.len(),
                t0.elapsed()
            );
        }
        self.runs.as_deref().unwrap()
    }

    /// Seed-0 run with simulate, energy and eval artifacts.
    fn reference(&mut self) -> &SeedRun {
        self.runs();
        if !self.analyzed {
            self.runs.as_ref().unwrap()[0].analyze();
            self.analyzed = true;
        }
        &self.runs.as_ref().unwrap()[0]
    }
}

fn mean_abs_gap(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn criterion_1(_: &mut Context) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let cfg = StudentConfig {
            vocab_size: 64,
            max_len: 16,
            hidden: 64,
            intermediate: 128,
            heads: 2,
            layers: 2,
            quant: QuantMode::FullPrecision,
            ..Default::default()
        };
        let stack = EncoderStack::init(cfg, 100 + seed).unwrap();
        let mut rng = seeded_rng(200 + seed);
        let tokens: Vec<usize> = (0..16).map(|_| rng.gen_range(1..64)).collect();
        let solver = SolverConfig {
            tol: 1e-8,
            ..Default::default()
        };
        let star = stack.forward_train(&tokens, &solver).unwrap().solution.asr_star;
        let out = stack.forward_infer(&tokens, 500).unwrap();
        for (i, s) in star.iter().enumerate() {
            worst = worst.max(mean_abs_gap(&out.asr(i).unwrap(), s));
        }
    }
    check(
        worst <= 0.02,
        format!("worst per-layer mean |ASR(500) - a*| = {worst:.4} (limit 0.02)"),
    )
}

/// Dim-8 full-precision stack whose steady state avoids the clip boundaries.
fn gradient_check_stack(seed: u64) -> EncoderStack {
    let cfg = StudentConfig {
        vocab_size: 12,
        max_len: 6,
        hidden: 8,
        intermediate: 16,
        heads: 2,
        layers: 2,
        quant: QuantMode::FullPrecision,
        ..Default::default()
    };
    let mut s = EncoderStack::init(cfg, seed).unwrap();
    s.tok_emb = s.tok_emb.scale(0.8);
    for l in &mut s.layers {
        l.norm1_gain = Matrix::filled(1, 8, 0.15);
        l.norm2_gain = Matrix::filled(1, 8, 0.15);
        for lin in l.linears_mut() {
            lin.latent = lin.latent.scale(0.3);
        }
    }
    s
}

fn criterion_2(_: &mut Context) -> Outcome {
    let solver = SolverConfig {
        tol: 1e-12,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in SEEDS {
        let stack = gradient_check_stack(seed);
        let mut rng = seeded_rng(300 + seed);
        let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(1..12)).collect();
        let label = (seed % 2) as usize;
        let out = stack.forward_train(&tokens, &solver).unwrap();
        let min_margin = out
            .solution
            .asr_star
            .iter()
            .flat_map(|a| a.data().iter().map(|v| v.min(1.0 - v)))
            .fold(f64::INFINITY, f64::min);
        if min_margin <= 1e-3 {
            return Err(format!(
                "seed {seed}: a unit sits at the clip boundary (margin {min_margin:.2e})"
            ));
        }
        let eff = stack.effective_params().unwrap();
        let g = example_gradient(
            &stack,
            &eff,
            &tokens,
            label,
            None,
            Objective::CrossEntropy,
            &solver,
            &VjpSolveConfig::default(),
        )
        .unwrap();
        for idx in 0..stack.num_params() {
            let fd = finite_difference_grad(
                |m| {
                    let mut s = stack.clone();
                    *s.params_mut()[idx] = m.clone();
                    example_loss(&s, &tokens, label, None, Objective::CrossEntropy, &solver).unwrap()
                },
                stack.params()[idx],
                1e-4,
            )
            .unwrap();
            for (a, d) in g.params[idx].data().iter().zip(fd.data()) {
                if a.abs() > 1e-6 {
                    worst = worst.max((a - d).abs() / a.abs());
                    checked += 1;
                }
            }
        }
    }
    check(
        worst <= 1e-2,
        format!("max relative error {worst:.2e} over {checked} coordinates, 5 seeds (limit 1e-2)"),
    )
}

fn criterion_3(_: &mut Context) -> Outcome {
    let mut rng = seeded_rng(400);
    let mut failures = Vec::new();
    for trial in 0..10_000 {
        let rows = rng.gen_range(1..=8);
        let cols = rng.gen_range(1..=8);
        // odd trials live on a dyadic grid, where shifts are exact and ties occur
        let grid = trial % 2 == 1;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if grid {
                    f64::from(rng.gen_range(-64i32..=64)) / 64.0
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            })
            .collect();
        let w = Matrix::new(rows, cols, data.clone()).unwrap();
        let n = data.len() as f64;

        let (q1, alpha) = quantize_1bit(&w).unwrap();
        let mean = data.iter().rev().sum::<f64>() / n;
        if !q1.codes.iter().all(|c| *c == 1 || *c == -1) || (alpha - mean).abs() > 1e-12 {
            failures.push(format!("trial {trial}: 1-bit codomain or alpha"));
        }
        let shift = if grid {
            f64::from(rng.gen_range(-640i32..=640)) / 64.0
        } else {
            rng.gen_range(-100.0..100.0)
        };
        let (q1s, _) = quantize_1bit(&w.map(|v| v + shift)).unwrap();
        if q1s != q1 {
            failures.push(format!("trial {trial}: shift {shift} changed the binary codes"));
        }

        let (q2, beta) = quantize_158bit(&w, DEFAULT_EPSILON).unwrap();
        let abs_mean = data.iter().rev().map(|v| v.abs()).sum::<f64>() / n;
        if !q2.codes.iter().all(|c| (-1..=1).contains(c)) || (beta - abs_mean).abs() > 1e-12 {
            failures.push(format!("trial {trial}: 1.58-bit codomain or beta"));
        }
        let c = 2f64.powi(rng.gen_range(-10..=10));
        let (q2s, beta_s) = quantize_158bit(&w.scale(c), c * DEFAULT_EPSILON).unwrap();
        if q2s != q2 || beta_s != c * beta {
            failures.push(format!("trial {trial}: scale {c} changed the ternary codes"));
        }
    }
    let detail = "10^4 matrices: codomains, alpha/beta to 1e-12, shift equivariance, positive-scale invariance";
    match failures.first() {
        None => Ok(detail.to_string()),
        Some(first) => Err(format!("{} failures, first: {first}", failures.len())),
    }
}

fn criterion_4(ctx: &mut Context) -> Outcome {
    let runs = ctx.runs();
    let mut ratios = Vec::new();
    let mut kd_wins = 0;
    let mut accs = Vec::new();
    let mut runtime = Duration::ZERO;
    for r in runs {
        let m = read_json(&r.dir.join("1.58bit").join("distill_metrics.json"));
        let epochs = m["epochs"].as_u64().unwrap();
        ratios.push((f(&m["loss_ratio"]), epochs));
        let (with, without) = (r.final_accuracy("1.58bit"), r.final_accuracy("nokd"));
        accs.push(format!("{with:.3}/{without:.3}"));
        if without < with {
            kd_wins += 1;
        }
        runtime += ["teacher", "distill-1.58bit", "finetune-1.58bit", "nokd"]
            .iter()
            .map(|k| r.timings[*k])
            .sum::<Duration>();
    }
    let worst = ratios.iter().map(|r| r.0).fold(0.0, f64::max);
    let ok = ratios.iter().all(|&(r, e)| r <= 0.5 && e <= 30) && kd_wins >= 4 && runtime <= Duration::from_secs(900);
    check(
        ok,
        format!(
            "worst KD loss ratio {worst:.3} (limit 0.5); dev accuracy KD/no-KD {}; KD ahead on {kd_wins}/5 (need 4); runtime {runtime:.0?}",
            accs.join(" ")
        ),
    )
}

fn criterion_5(ctx: &mut Context) -> Outcome {
    let runs = ctx.runs();
    let mut ordered = 0;
    let mut rows = Vec::new();
    let mut ternary_min: f64 = 1.0;
    for r in runs {
        let (fp, t, b) = (
            r.final_accuracy("fp"),
            r.final_accuracy("1.58bit"),
            r.final_accuracy("1bit"),
        );
        rows.push(format!("{fp:.3}/{t:.3}/{b:.3}"));
        if fp >= t && t >= b {
            ordered += 1;
        }
        ternary_min = ternary_min.min(t);
    }
    check(
        ordered >= 3 && ternary_min >= 0.85,
        format!(
            "fp/1.58/1-bit dev accuracy {}; ordered on {ordered}/5 (need 3); min 1.58-bit {ternary_min:.3} (need 0.85)",
            rows.join(" ")
        ),
    )
}

fn criterion_6(ctx: &mut Context) -> Outcome {
    let r = ctx.reference();
    let t0 = Instant::now();
    let e = read_json(&r.dir.join("energy").join("energy.json"));
    let ratio = f(&e["norm_ops_ratio"]);
    let energy_ratio = f(&e["energy_ratio"]);
    let composed = ratio / 9.0;
    let compose_ok = (energy_ratio - composed).abs() <= 1e-12 * composed.abs();
    let executed = |k: &str| e[k]["executed_acc_ops"].as_u64();
    let cli_counts = executed("quantized").is_some() && executed("full_precision").is_some();

    // independent recount on the eval examples
    let cfg = PipelineConfig::load(&reference_config()).unwrap();
    let mut mismatches = 0;
    let mut counted = 0u64;
    for q in ["1.58bit", "fp"] {
        let ck = Checkpoint::load(&r.finetuned(q)).unwrap();
        let stack = ck.to_student().unwrap();
        let ds = Dataset::for_checkpoint(&cfg, &ck).unwrap();
        for ex in ds.dev.iter().take(cfg.energy.eval_examples) {
            let out = stack.forward_infer(&ex.ids, cfg.energy.timesteps).unwrap();
            let exact = exact_acc_ops(&stack, &out).unwrap();
            counted += exact;
            if exact != out.instrumented_ops() {
                mismatches += 1;
            }
        }
    }
    check(
        (0.8..=1.25).contains(&ratio) && compose_ok && cli_counts && mismatches == 0,
        format!(
            "Norm#OPS ratio {ratio:.4} (band [0.8, 1.25]); energy ratio {energy_ratio:.5} = ratio/9 {compose_ok}; \
             {counted} accumulates recounted, {mismatches} mismatches; {:.1?}",
            t0.elapsed()
        ),
    )
}

/// Residual series per layer, indexed by step - 1.
fn trace_residuals(path: &Path) -> BTreeMap<String, Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        series
            .entry(cols[1].to_string())
            .or_default()
            .push(cols[3].parse().unwrap());
    }
    series
}

fn criterion_7(ctx: &mut Context) -> Outcome {
    let r = ctx.reference();
    let trace = trace_residuals(&r.dir.join("simulate-1.58bit").join("trace.csv"));
    let mut rising = Vec::new();
    for (layer, s) in &trace {
        let t = s.len();
        let mut grid: Vec<usize> = std::iter::successors(Some(10usize), |g| Some(g * 2))
            .take_while(|g| *g < t)
            .collect();
        grid.push(t);
        for w in grid.windows(2) {
            if s[w[1] - 1] > s[w[0] - 1] {
                rising.push(format!("{layer} {}->{}", w[0], w[1]));
            }
        }
    }
    let steps = |q: &str| {
        read_json(&r.dir.join(format!("simulate-{q}")).join("simulate_summary.json"))["steps_to_tolerance"].as_u64()
    };
    let (fp, binary) = (steps("fp"), steps("1bit"));
    let close = match (fp, binary) {
        (Some(a), Some(b)) => (a as f64 - b as f64).abs() <= 0.2 * a as f64,
        _ => false,
    };
    let show = |v: Option<u64>| v.map_or("not reached".to_string(), |s| s.to_string());
    check(
        rising.is_empty() && close,
        format!(
            "residual rises on the dyadic grid after step 10: {}; output-layer steps to tolerance fp {} vs 1-bit {} (limit 20%)",
            if rising.is_empty() { "none".to_string() } else { rising.join(", ") },
            show(fp),
            show(binary)
        ),
    )
}

fn criterion_8(ctx: &mut Context) -> Outcome {
    let first = ctx.reference().dir.clone();
    let t0 = Instant::now();
    let again = SeedRun::run(&ctx.root.join("run2"), SEEDS[0]);
    again.analyze();
    let (a, b) = (files_under(&first), files_under(&again.dir));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    check(
        differing.is_empty() && !a.is_empty(),
        format!(
            "{} artifacts from every command compared byte for byte, {} differ{}; rerun {:.1?}",
            a.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(": {}", differing.join(", "))
            },
            t0.elapsed()
        ),
    )
}

type Criterion = (u32, &'static str, fn(&mut Context) -> Outcome);

const CRITERIA: [Criterion; 8] = [
    (1, "temporal-equilibrium equivalence", criterion_1),
    (2, "implicit gradient vs finite differences", criterion_2),
    (3, "quantizer exactness", criterion_3),
    (4, "distillation efficacy", criterion_4),
    (5, "quantization ordering", criterion_5),
    (6, "energy accounting", criterion_6),
    (7, "convergence curves", criterion_7),
    (8, "determinism", criterion_8),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, name, _) in CRITERIA {
            println!("criterion_{id}_{}: test", name.replace([' ', '-'], "_"));
        }
        return ExitCode::SUCCESS;
    }
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let mut ctx = Context {
        root,
        runs: None,
        analyzed: false,
    };

    let mut failed = 0;
    let mut ran = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] criterion {id} ({name}): {detail} [{:.1?}]", t0.elapsed());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
