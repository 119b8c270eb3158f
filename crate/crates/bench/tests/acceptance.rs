//! Acceptance suite. Runs every criterion in order and prints one
//! `[PASS]` / `[FAIL]` line each; exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rso_bench::train::run;
use rso_bench::verify::{
    bound_report, expectation_grid, isometry_grid, verify_projections, verify_sandwich, BoundArgs, ProjectionsArgs,
    SandwichArgs, EXPECTATION_TOL, ISOMETRY_TOL,
};
use rso_bench::ExperimentConfig;
use rso_core::cost::{
    activation_entries, comm_bytes_per_sync, encode_gradients, model_memory_report, optimizer_state_entries,
    Algorithm, BlockShape, GIB,
};
use rso_core::engine::{adam_train, rso_train, AdamTrainConfig, RsoConfig};
use rso_core::objectives::gradcheck::block_gradcheck;
use rso_core::objectives::transformer::{
    block_forward, BlockMode, BlockOptions, BlockProjections, BlockSubspace, BlockWeights,
};
use rso_core::objectives::{Objective, QuadraticProblem};
use rso_core::projection::{sample_projection, verify_isometry, ProjectionKind};
use rso_core::solvers::{zo_two_point_grad, InnerSolver};
use rso_core::tensor::RngStream;
use rso_core::Mat;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < budget, || format!("took {took:.1?}, budget {budget:?}"))
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn projection_identities() -> Outcome {
    let start = Instant::now();
    let kinds = [ProjectionKind::Haar, ProjectionKind::Coordinate];
    let mut worst_iso = 0.0f64;
    let mut rng = RngStream::new(0, 0);
    for kind in kinds {
        for (m, r) in isometry_grid() {
            for _ in 0..3 {
                let p: Mat = sample_projection(&mut rng, m, r, kind).map_err(s)?;
                worst_iso = worst_iso.max(verify_isometry(&p, m, r).map_err(s)?);
            }
        }
    }
    ensure(worst_iso < ISOMETRY_TOL, || format!("isometry error {worst_iso:.2e} ≥ {ISOMETRY_TOL:e}"))?;
    let rep = verify_projections(&ProjectionsArgs {
        cells: None,
        kinds: kinds.to_vec(),
        trials: 20000,
        isometry_samples: 1,
        seed: 0,
    })
    .map_err(s)?;
    let worst_mc = rep
        .items
        .iter()
        .filter(|i| i.label.contains("E[PP"))
        .map(|i| i.value)
        .fold(0.0, f64::max);
    ensure(rep.pass, || format!("{:?}", rep.first_failure))?;
    ensure(worst_mc < EXPECTATION_TOL, || format!("Monte-Carlo error {worst_mc:.4}"))?;
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "max isometry error {worst_iso:.2e} over {} cells; max MC error {worst_mc:.4} over {:?} at 20000 trials",
        isometry_grid().len(),
        expectation_grid()
    ))
}

fn gradient_correctness() -> Outcome {
    let mut fd = 0.0f64;
    let mut chain = 0.0f64;
    for causal in [true, false] {
        let g = block_gradcheck(8, 16, 4, 0, causal).map_err(s)?;
        fd = fd.max(g.max_finite_difference());
        chain = chain.max(g.chain_rule);
        ensure(g.finite_difference.len() >= 6, || "fewer than six B gradients checked".into())?;
    }
    ensure(fd < 1e-5, || format!("finite-difference error {fd:.2e}"))?;
    ensure(chain < 1e-10, || format!("chain-rule error {chain:.2e}"))?;
    Ok(format!("(s,n,r)=(8,16,4) causal and bidirectional: FD {fd:.2e}, ∂B vs Pᵀ∂W {chain:.2e}"))
}

fn reparameterization() -> Outcome {
    let mut rng = RngStream::new(11, 0);
    let kinds = [ProjectionKind::Haar, ProjectionKind::Coordinate, ProjectionKind::GaussianApprox];
    let mut worst = 0.0f64;
    for i in 0..20 {
        let s_len = 1 + rng.below(12);
        let n = 2 + rng.below(23);
        let r = 1 + rng.below(n);
        let causal = i % 2 == 0;
        let x: Mat = rng.gauss(s_len, n, 1.0).map_err(s)?;
        let w = BlockWeights::random(n, &mut rng).map_err(s)?;
        let p = BlockProjections::random(n, r, kinds[i % 3], &mut rng).map_err(s)?;
        let b = BlockSubspace::random(n, r, 0.1, &mut rng).map_err(s)?;
        let opts = BlockOptions { causal, index: 0 };
        let (z_rso, _) = block_forward(&x, &w, BlockMode::Rso { proj: &p, sub: &b }, opts).map_err(s)?;
        let shifted = b.effective(&w, &p).map_err(s)?;
        let (z_full, _) = block_forward(&x, &shifted, BlockMode::Full, opts).map_err(s)?;
        worst = worst.max(z_rso.sub(&z_full).map_err(s)?.max_abs());
    }
    ensure(worst < 1e-12, || format!("max entrywise gap {worst:.2e}"))?;
    Ok(format!("20 random configurations, max entrywise gap {worst:.2e}"))
}

fn convergence_bound() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for eps in [0.0, 1e-4, 1e-2] {
        let rep = bound_report(&BoundArgs { m: 32, r: 8, n: 16, k: 64, eps, seeds: 32, problem_seed: 0, inner_steps: 200 })
            .map_err(s)?;
        let ks: Vec<usize> = rep.rows.iter().map(|r| r.k).collect();
        ensure(ks == [1, 2, 4, 8, 16, 32, 64], || format!("iteration grid {ks:?}"))?;
        ensure(rep.excluded_seeds.is_empty(), || format!("ε={eps}: uncertified seeds {:?}", rep.excluded_seeds))?;
        ensure(rep.seeds_used == 32, || format!("ε={eps}: {} seeds used", rep.seeds_used))?;
        for row in &rep.rows {
            ensure(row.lhs <= row.rhs, || format!("ε={eps}, K={}: {:.4} > {:.4}", row.k, row.lhs, row.rhs))?;
        }
        ensure(rep.max_telescoping_residual < 1e-12, || {
            format!("ε={eps}: telescoping residual {:.2e}", rep.max_telescoping_residual)
        })?;
        let last = rep.rows.last().expect("rows");
        lines.push(format!(
            "ε={eps}: K=64 {:.2} ≤ {:.2}, telescoping {:.1e}",
            last.lhs, last.rhs, rep.max_telescoping_residual
        ));
    }
    within_budget(start, Duration::from_secs(300))?;
    Ok(lines.join("; "))
}

fn sandwich() -> Outcome {
    let rep = verify_sandwich(&SandwichArgs { model: "quadratic".into(), m: 32, r: 8, n: 16, pairs: 1000, eta: None, seed: 0 })
        .map_err(s)?;
    ensure(rep.pass, || format!("{:?}", rep.first_failure))?;
    Ok(format!("1000 quadratic pairs, {} checks within slack 1e-9", rep.items.len()))
}

fn cost_model() -> Outcome {
    // Per-block counts with an n → 4n feed-forward.
    for (s_len, b, n, r) in [(256u64, 1u64, 512u64, 128u64), (128, 4, 768, 256), (64, 2, 1024, 8), (1, 1, 16, 16)] {
        let shape = BlockShape::new(s_len, b, n, r).map_err(s)?;
        let state = |a| optimizer_state_entries(a, &shape);
        let expected = [
            (Algorithm::Rso, 24 * n * r),
            (Algorithm::Galore, 24 * n * r),
            (Algorithm::Lora, 48 * n * r),
            (Algorithm::Adam, 24 * n * n),
        ];
        for (alg, want) in expected {
            ensure(state(alg) == want, || format!("{alg:?} state at n={n}, r={r}: {} ≠ {want}", state(alg)))?;
        }
        let act = |a| activation_entries(a, &shape).0;
        let rso_act = 8 * b * s_len * n + 4 * b * s_len * r + 2 * b * s_len * s_len;
        let full_act = 15 * b * s_len * n + 2 * b * s_len * s_len;
        for (alg, want) in [(Algorithm::Rso, rso_act), (Algorithm::Galore, full_act), (Algorithm::Lora, full_act), (Algorithm::Adam, full_act)] {
            ensure(act(alg) == want, || format!("{alg:?} activations: {} ≠ {want}", act(alg)))?;
        }
    }

    // Published whole-model optimizer-state sizes in GiB at 16-bit storage.
    let mut gaps = Vec::new();
    for (arch, rank, rso_g, adam_g) in [("60M", 128u64, 0.14, 0.22), ("350M", 256, 0.49, 1.37), ("1B", 512, 1.46, 4.99)] {
        for (alg, want) in [(Algorithm::Rso, rso_g), (Algorithm::Adam, adam_g)] {
            let got = model_memory_report(arch, alg, rank, 2, 2).map_err(s)?.optimizer_state_bytes as f64 / GIB;
            let rel = (got - want).abs() / want;
            ensure(rel < 0.15, || format!("{arch} {alg:?}: {got:.3}G vs {want}G ({:.1}%)", 100.0 * rel))?;
            gaps.push(format!("{arch} {alg:?} {got:.3}G/{want}G"));
        }
    }

    // Recorded tapes against the per-block formulas.
    let mut rng = RngStream::new(3, 0);
    let mut cells = 0;
    for s_len in [1usize, 4, 9] {
        for n in [2usize, 8, 13] {
            for r in [1, n / 2 + 1, n] {
                let x: Mat = rng.gauss(s_len, n, 1.0).map_err(s)?;
                let w = BlockWeights::random(n, &mut rng).map_err(s)?;
                let p = BlockProjections::random(n, r, ProjectionKind::Haar, &mut rng).map_err(s)?;
                let b = BlockSubspace::random(n, r, 0.1, &mut rng).map_err(s)?;
                let opts = BlockOptions { causal: true, index: 0 };
                let (_, tape_rso) = block_forward(&x, &w, BlockMode::Rso { proj: &p, sub: &b }, opts).map_err(s)?;
                let (_, tape_full) = block_forward(&x, &w, BlockMode::Full, opts).map_err(s)?;
                let (s64, n64, r64) = (s_len as u64, n as u64, r as u64);
                let want_rso = 8 * s64 * n64 + 2 * s64 * s64 + 4 * s64 * r64;
                let want_full = 15 * s64 * n64 + 2 * s64 * s64;
                ensure(tape_rso.entry_count() as u64 == want_rso, || {
                    format!("rso tape (s={s_len}, n={n}, r={r}): {} ≠ {want_rso}", tape_rso.entry_count())
                })?;
                ensure(tape_full.entry_count() as u64 == want_full, || {
                    format!("full tape (s={s_len}, n={n}): {} ≠ {want_full}", tape_full.entry_count())
                })?;
                cells += 1;
            }
        }
    }
    Ok(format!("state/activation formulas exact; {}; {cells} tape shapes exact", gaps.join(", ")))
}

fn communication() -> Outcome {
    let shapes = [(24usize, 24usize), (16, 10), (9, 30)];
    let ranks = [6usize, 4, 9];
    let p = QuadraticProblem::<f64>::random(&shapes, 5).map_err(s)?;
    let steps = 7;
    for bytes in [2usize, 4] {
        let expected: u64 = bytes as u64 * shapes.iter().zip(&ranks).map(|(&(_, n), &r)| (r * n) as u64).sum::<u64>();
        let mut rng = RngStream::new(9, 0);
        let grads: Vec<Mat> = shapes.iter().zip(&ranks).map(|(&(_, n), &r)| rng.gauss(r, n, 1.0).unwrap()).collect();
        let encoded = encode_gradients(&grads, bytes).map_err(s)?.len() as u64;
        ensure(encoded == expected, || format!("encoded {encoded} bytes, expected {expected}"))?;
        let cfg = RsoConfig {
            ranks: ranks.to_vec(),
            solver: InnerSolver::Gd { lr: Some(0.05) },
            inner_steps: steps,
            outer_iters: 4,
            comm_element_bytes: bytes,
            ..RsoConfig::default()
        };
        let out = rso_train(&p, &cfg).map_err(s)?;
        for row in &out.trace.rows[..4] {
            ensure(row.comm_bytes == steps as u64 * expected, || {
                format!("outer step {} sent {} bytes, expected {}", row.k, row.comm_bytes, steps as u64 * expected)
            })?;
        }
    }

    // Square layer: RSO sends r·n per sync, Adam sends m·n.
    let (m, r) = (24usize, 6usize);
    let sq = QuadraticProblem::<f64>::random(&[(m, m)], 6).map_err(s)?;
    let rso = rso_train(&sq, &RsoConfig { ranks: vec![r], inner_steps: 5, outer_iters: 2, ..RsoConfig::default() }).map_err(s)?;
    let adam = adam_train(&sq, &AdamTrainConfig { steps: 10, log_every: 5, ..AdamTrainConfig::default() }).map_err(s)?;
    let per_sync = |row: &rso_core::engine::TraceRow| row.comm_bytes as f64 / row.inner_steps as f64;
    let ratio = per_sync(&rso.trace.rows[0]) / per_sync(&adam.trace.rows[0]);
    let want = r as f64 / m as f64;
    ensure(ratio == want, || format!("RSO/Adam bytes per sync {ratio} ≠ r/m = {want}"))?;
    let predicted = comm_bytes_per_sync(Algorithm::Rso, &[(m, m)], &[r], 4).map_err(s)? as f64
        / comm_bytes_per_sync(Algorithm::Adam, &[(m, m)], &[r], 4).map_err(s)? as f64;
    ensure(predicted == want, || format!("predicted ratio {predicted} ≠ {want}"))?;
    Ok(format!("bytes per sync = element_bytes·Σrn on 3 layers at 2 and 4 bytes; square-layer ratio {ratio} = r/m"))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn language_model() -> Outcome {
    let start = Instant::now();
    let load = |f: &str| ExperimentConfig::load(&configs_dir().join(f)).map_err(s);
    let mut results = Vec::new();
    for file in ["tiny_lm_adam.toml", "tiny_lm_rso.toml", "tiny_lm_galore.toml"] {
        let cfg = load(file)?;
        let res = run(&cfg).map_err(s)?;
        ensure(res.summary.aborted.is_none(), || format!("{file} aborted: {:?}", res.summary.aborted))?;
        results.push(res.summary);
    }
    let [adam, rso, galore] = [&results[0], &results[1], &results[2]];
    let steps: Vec<usize> = results.iter().map(|r| r.total_steps).collect();
    ensure(steps.iter().all(|&t| t == steps[0]), || format!("unequal step budgets {steps:?}"))?;
    let init = adam.initial_loss.ok_or("missing initial loss")?;
    let ln64 = 64f64.ln();
    ensure((init - ln64).abs() <= 0.05 * ln64, || format!("initial loss {init:.4} not within 5% of ln 64"))?;
    let fin = |r: &rso_bench::train::RunSummary| r.final_loss.ok_or_else(|| format!("{} has no final loss", r.name));
    let (fa, fr, fg) = (fin(adam)?, fin(rso)?, fin(galore)?);
    for (name, f) in [("adam", fa), ("rso", fr), ("galore", fg)] {
        ensure(f < init, || format!("{name} final {f:.4} not below initial {init:.4}"))?;
    }
    ensure(fr <= 1.10 * fa, || format!("rso final {fr:.4} exceeds adam {fa:.4} by more than 10%"))?;
    ensure(fg <= 1.25 * fa, || format!("galore final {fg:.4} exceeds adam {fa:.4} by more than 25%"))?;
    within_budget(start, Duration::from_secs(600))?;
    Ok(format!(
        "{} steps each, init {init:.4}; final adam {fa:.4}, rso {fr:.4} ({:+.1}%), galore {fg:.4} ({:+.1}%); {:.0?}",
        steps[0],
        100.0 * (fr / fa - 1.0),
        100.0 * (fg / fa - 1.0),
        start.elapsed()
    ))
}

fn zeroth_order() -> Outcome {
    // F(x) = ½ xᵀAx + bᵀx with a fixed symmetric positive definite A.
    let a = [[3.0, 0.5, 0.0, 0.2], [0.5, 2.0, 0.3, 0.0], [0.0, 0.3, 1.5, 0.1], [0.2, 0.0, 0.1, 1.0]];
    let b = [0.4, -0.2, 0.1, 0.3];
    let f = |x: &[f64]| -> rso_core::Result<f64> {
        let mut v = 0.0;
        for i in 0..4 {
            v += b[i] * x[i];
            for j in 0..4 {
                v += 0.5 * x[i] * a[i][j] * x[j];
            }
        }
        Ok(v)
    };
    let x = [0.3, -0.7, 1.1, 0.2];
    let truth: Vec<f64> = (0..4).map(|i| b[i] + (0..4).map(|j| a[i][j] * x[j]).sum::<f64>()).collect();
    let samples = 100_000;
    let mut rng = RngStream::new(21, 0);
    let mut mean = [0.0; 4];
    for _ in 0..samples {
        let g = zo_two_point_grad(f, &x, 1e-3, &mut rng).map_err(s)?;
        for i in 0..4 {
            mean[i] += g[i] / samples as f64;
        }
    }
    let err = (0..4).map(|i| (mean[i] - truth[i]).powi(2)).sum::<f64>().sqrt()
        / truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    ensure(err < 0.02, || format!("estimator mean off by {:.2}%", 100.0 * err))?;

    let mut drops = Vec::new();
    for seed in 0..4 {
        let p = QuadraticProblem::<f64>::random(&[(16, 8)], seed).map_err(s)?;
        let f0 = p.loss(&p.initial_params(), &()).map_err(s)?;
        let cfg = RsoConfig {
            ranks: vec![4],
            solver: InnerSolver::Zo { lr: None, radius: 1e-4 },
            inner_steps: 20,
            outer_iters: 20,
            seed,
            ..RsoConfig::default()
        };
        let out = rso_train(&p, &cfg).map_err(s)?;
        let f1 = p.loss(&out.params, &()).map_err(s)?;
        ensure(f1 < f0, || format!("seed {seed}: f went from {f0:.4} to {f1:.4}"))?;
        drops.push(f1 / f0);
    }
    let worst = drops.iter().cloned().fold(0.0, f64::max);
    Ok(format!("estimator mean error {:.3}% at 1e5 samples; RSO+ZO f ratio ≤ {worst:.3} on 4 quadratics", 100.0 * err))
}

fn run_cli(args: &[&str], out: &Path) -> Result<Vec<u8>, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_rso-bench"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .map_err(s)?;
    ensure(output.status.success(), || {
        format!("{args:?} exited {:?}: {}", output.status.code(), String::from_utf8_lossy(&output.stderr))
    })?;
    Ok(output.stdout)
}

fn dir_contents(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(s)?
        .map(|e| {
            let e = e.map_err(s)?;
            Ok((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).map_err(s)?))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let cfg = |f: &str| configs_dir().join(f).to_string_lossy().into_owned();
    let (quad, zo, sweep) = (cfg("quadratic_rso.toml"), cfg("logistic_zo.toml"), cfg("quadratic_sweep.toml"));
    let commands: Vec<Vec<&str>> = vec![
        vec!["train", &quad],
        vec!["train", &zo],
        vec!["verify", "projections", "--m", "16", "--r", "4", "--trials", "2000"],
        vec!["verify", "gradcheck"],
        vec!["verify", "sandwich", "--pairs", "200"],
        vec!["verify", "bound", "--K", "8", "--seeds", "4", "--eps", "1e-4"],
        vec!["memory-report", "--arch", "350M", "--alg", "rso", "--rank", "256"],
    ];
    let a = tempfile::tempdir().map_err(s)?;
    let b = tempfile::tempdir().map_err(s)?;
    for cmd in &commands {
        let first = run_cli(cmd, a.path())?;
        let second = run_cli(cmd, b.path())?;
        ensure(first == second, || format!("{cmd:?}: stdout differs"))?;
    }
    run_cli(&["sweep", &sweep, "--jobs", "1"], a.path())?;
    run_cli(&["sweep", &sweep, "--jobs", "4"], b.path())?;
    let (fa, fb) = (dir_contents(a.path())?, dir_contents(b.path())?);
    let names_a: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    let names_b: Vec<&str> = fb.iter().map(|f| f.0.as_str()).collect();
    ensure(names_a == names_b, || format!("file sets differ: {names_a:?} vs {names_b:?}"))?;
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} commands repeated, {} output files byte-identical (sweep at 1 and 4 jobs)", commands.len() + 1, fa.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("projection identities", projection_identities),
        ("gradient correctness", gradient_correctness),
        ("reparameterization equivalence", reparameterization),
        ("convergence bound at desk scale", convergence_bound),
        ("subproblem sandwich", sandwich),
        ("cost model", cost_model),
        ("communication accounting", communication),
        ("desk-scale language model training", language_model),
        ("zeroth-order inner solver", zeroth_order),
        ("determinism", determinism),
    ];
    // Filter arguments from `cargo test -- <name>` select criteria by substring.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|m| m.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({took:.1?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name} ({took:.1?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
