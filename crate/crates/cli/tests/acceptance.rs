//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use attnforge::engine::gradcheck::{gradcheck, GradcheckOptions};
use attnforge::engine::{run_naive_parallel, run_reference, Matrix};
use attnforge::schedule::{
    candidate_of, compute_memory_constraint, generate_plans, infer_possible_tile_configs, plan_from_candidate,
    tile_resource_scheduling_traced, TierSpec,
};
use attnforge::{
    bind_executable, brute_force_schedule, builtin, builtin_names, code_generation, lower_spec, run_chunk_recurrent,
    run_step_recurrent, run_tiled_parallel, tile_config_scheduling, AttentionSpec, AttnDims, DeviceConfig,
    ExecutionPlan, KernelGraph, MemoryLocation, Pattern, ProblemInstance, ProfileMode, ScheduleError, TileShape,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn with_dims(name: &str, batch: usize, heads: usize, seq: usize, dqk: usize, dv: usize) -> AttentionSpec {
    builtin(name).unwrap().with_dims(AttnDims { batch, heads, seq_q: seq, seq_k: seq, dqk, dv })
}

/// Largest tiled-vs-naive error over seeds and square blocks.
fn tiled_sweep(spec: &AttentionSpec, seeds: std::ops::RangeInclusive<u64>, blocks: &[usize]) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let inst = ProblemInstance::random(spec, seed);
        let naive = run_naive_parallel(spec, &inst).map_err(s)?;
        for &b in blocks {
            let tiled = run_tiled_parallel(spec, &inst, b, b).map_err(s)?;
            worst = worst.max(tiled.max_abs_diff(&naive));
        }
    }
    Ok(worst)
}

fn c1_online_normalization() -> Outcome {
    let spec = with_dims("softmax", 1, 2, 128, 128, 128);
    let err = tiled_sweep(&spec, 1..=20, &[16, 48, 128])?;
    ensure(err <= 1e-10, || format!("max abs err {err:e} > 1e-10"))?;
    Ok(format!("softmax 20 seeds x blocks {{16,48,128}}: max abs err {err:e}"))
}

fn c2_non_square_heads() -> Outcome {
    let mut parts = Vec::new();
    for (name, dqk, dv) in [("softmax-deepseek", 192, 128), ("softmax-diff", 128, 256)] {
        let spec = with_dims(name, 1, 2, 128, dqk, dv);
        let err = tiled_sweep(&spec, 1..=20, &[16, 48, 128])?;
        ensure(err <= 1e-10, || format!("{name}: max abs err {err:e}"))?;
        for b in [16usize, 48, 128] {
            let tile = TileShape { m: b, n: b };
            let kg = KernelGraph::from_spec(&spec).map_err(s)?;
            for t in &kg.tensors {
                let (r, c) = t.tile_extents(tile);
                let ok = match t.name.as_str() {
                    "q" | "k" => (r, c) == (b, dqk),
                    "v" | "acc" => (r, c) == (b, dv),
                    "scores" => (r, c) == (b, b),
                    _ => (r, c) == (b, 1),
                };
                ensure(ok, || format!("{name}: buffer {} is {r}x{c} at block {b}", t.name))?;
            }
            let allowed = [1, b, dqk, dv];
            let prog = lower_spec(&spec, tile).map_err(s)?;
            for sec in &prog.sections {
                for slot in &sec.seq.slots {
                    ensure(allowed.contains(&slot.rows) && allowed.contains(&slot.cols), || {
                        format!("{name}: slot {}x{} in {} is padded", slot.rows, slot.cols, sec.name)
                    })?;
                }
            }
        }
        parts.push(format!("{name} (dqk={dqk}, dv={dv}) err {err:e}"));
    }
    Ok(format!("{}; every buffer and slot within dqk/dv x block", parts.join(", ")))
}

fn retention_row(scores: [f64; 2]) -> Result<(Vec<f64>, Vec<f64>), String> {
    let spec = with_dims("retention-parallel", 1, 1, 1, 1, 2).with_dims(AttnDims {
        batch: 1,
        heads: 1,
        seq_q: 1,
        seq_k: 2,
        dqk: 1,
        dv: 2,
    });
    let mut inst = ProblemInstance::random(&spec, 0);
    let set = |inst: &mut ProblemInstance, name: &str, m: Matrix| inst.tensor_mut(name).unwrap().set_slice(0, 0, &m);
    set(&mut inst, "q", Matrix::from_vec(1, 1, vec![1.0]));
    set(&mut inst, "k", Matrix::from_vec(2, 1, scores.to_vec()));
    set(&mut inst, "v", Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    set(&mut inst, "mask", Matrix::from_vec(1, 2, vec![1.0, 1.0]));
    let naive = run_naive_parallel(&spec, &inst).map_err(s)?.data;
    let tiled = run_tiled_parallel(&spec, &inst, 1, 1).map_err(s)?.data;
    Ok((naive, tiled))
}

fn c3_custom_variants() -> Outcome {
    let mut parts = Vec::new();
    for name in ["sigmoid", "relu", "retention-parallel"] {
        let spec = with_dims(name, 1, 2, 128, 64, 64);
        let err = tiled_sweep(&spec, 1..=5, &[16, 48, 128])?;
        ensure(err <= 1e-10, || format!("{name}: max abs err {err:e}"))?;
        parts.push(format!("{name} {err:e}"));
    }
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    let (naive, tiled) = retention_row([0.5, -2.0])?;
    ensure(close(&naive, &[0.2, -0.8]) && close(&tiled, &[0.2, -0.8]), || {
        format!("row [0.5, -2] gave naive {naive:?}, tiled {tiled:?}")
    })?;
    let (naive, tiled) = retention_row([0.25, -0.5])?;
    ensure(close(&naive, &[0.25, -0.5]) && close(&tiled, &[0.25, -0.5]), || {
        format!("clamp-floor row gave naive {naive:?}, tiled {tiled:?}")
    })?;
    Ok(format!("{}; [0.5,-2] -> [0.2,-0.8]; [0.25,-0.5] unchanged", parts.join(", ")))
}

fn c4_recurrent() -> Outcome {
    let mut parts = Vec::new();
    for name in ["mamba2-ssm", "retention-recurrent", "gated-retention"] {
        let b = builtin(name).unwrap();
        let spec = b.with_dims(AttnDims { batch: 1, heads: 2, seq_q: 128, seq_k: 128, ..b.dims });
        let mut worst: f64 = 0.0;
        for seed in 1..=10 {
            let inst = ProblemInstance::random(&spec, seed);
            let step = run_step_recurrent(&spec, &inst).map_err(s)?;
            for chunk in [1, 16, 48, 128] {
                worst = worst.max(run_chunk_recurrent(&spec, &inst, chunk).map_err(s)?.max_abs_diff(&step));
            }
        }
        ensure(worst <= 1e-10, || format!("{name}: max abs err {worst:e}"))?;
        parts.push(format!("{name} {worst:e}"));
    }
    Ok(format!("chunks {{1,16,48,128}} x 10 seeds: {}", parts.join(", ")))
}

fn c5_cross_pattern() -> Outcome {
    let mut parts = Vec::new();
    for seq in [64usize, 256] {
        for gamma in [0.9f64, 0.99] {
            let rec = with_dims("retention-recurrent", 1, 2, seq, 32, 16);
            let mut par = with_dims("retention-parallel", 1, 2, seq, 32, 16);
            par.rownorm = None;
            let mut ri = ProblemInstance::random(&rec, 11);
            let mut pi = ProblemInstance::random(&par, 11);
            for n in ["q", "k", "v"] {
                *pi.tensor_mut(n).unwrap() = ri.tensor(n).unwrap().clone();
            }
            let mask = Matrix::from_vec(
                seq,
                seq,
                (0..seq * seq)
                    .map(|x| {
                        let (i, j) = (x / seq, x % seq);
                        if j <= i {
                            gamma.powi((i - j) as i32)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
            let decay = Matrix::filled(seq, 1, gamma);
            for h in 0..2 {
                pi.tensor_mut("mask").unwrap().set_slice(0, h, &mask);
                ri.tensor_mut("decay").unwrap().set_slice(0, h, &decay);
            }
            let a = run_naive_parallel(&par, &pi).map_err(s)?;
            let b = run_step_recurrent(&rec, &ri).map_err(s)?;
            let err = a.max_abs_diff(&b);
            ensure(err <= 1e-8, || format!("s={seq} gamma={gamma}: max abs err {err:e}"))?;
            parts.push(format!("s={seq} g={gamma} {err:e}"));
        }
    }
    Ok(parts.join(", "))
}

fn c6_autodiff() -> Outcome {
    let opts = GradcheckOptions::default();
    let mut parts = Vec::new();
    for name in builtin_names() {
        let spec = with_dims(name, 1, 1, 8, 4, 4);
        let report = gradcheck(&spec, 1, &opts).map_err(s)?;
        let err = report.max_rel_err();
        let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
        ensure(err <= 1e-5, || format!("{name}: rel err {err:e}"))?;
        for extra in &spec.extras {
            ensure(names.contains(&extra.name.as_str()), || format!("{name}: no gradient for {}", extra.name))?;
        }
        parts.push(format!("{name} {err:.1e} ({} resampled)", report.resamples));
    }
    Ok(parts.join(", "))
}

fn device(file: &str) -> DeviceConfig {
    let text = std::fs::read_to_string(repo().join("docs/devices").join(file)).unwrap();
    DeviceConfig::from_json(&text).unwrap()
}

fn toy_graph() -> KernelGraph {
    let b = builtin("relu").unwrap();
    KernelGraph::from_spec(&b.with_dims(b.dims.scaled(1.0 / 32.0))).unwrap()
}

fn fits(g: &KernelGraph, d: &DeviceConfig, p: &ExecutionPlan) -> bool {
    compute_memory_constraint(p.tile_config, &g.tensors, &candidate_of(g, p), d)
}

fn c7_toy_optimality() -> Outcome {
    let g = toy_graph();
    let mut parts = Vec::new();
    for file in ["toy-roomy.json", "toy-register-pressure.json", "toy-shared-pressure.json"] {
        let d = device(file);
        let space = attnforge::schedule::search_space_size(&g, &d).map_err(s)?;
        ensure(space <= 1e5, || format!("{file}: space {space} > 1e5"))?;
        let two = tile_config_scheduling(&g, &d, ProfileMode::Analytic).map_err(s)?;
        let brute = brute_force_schedule(&g, &d).map_err(s)?;
        ensure(two.cost == brute.cost, || format!("{file}: two-layer {} vs brute force {}", two.cost, brute.cost))?;
        ensure(fits(&g, &d, &two) && fits(&g, &d, &brute), || format!("{file}: plan violates memory"))?;
        parts.push(format!("{file} {} = {}", two.cost, brute.cost));
    }
    let fixture: Value = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/demotion-counterexample.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let d = device("demotion-counterexample.json");
    let two = tile_config_scheduling(&g, &d, ProfileMode::Analytic).map_err(s)?;
    let brute = brute_force_schedule(&g, &d).map_err(s)?;
    let recorded = fixture["two_layer_cost"].as_f64().unwrap();
    ensure(two.cost <= recorded && brute.cost <= two.cost, || {
        format!("counterexample: two-layer {} (recorded {recorded}), brute force {}", two.cost, brute.cost)
    })?;
    ensure(fits(&g, &d, &two) && fits(&g, &d, &brute), || "counterexample plan violates memory".into())?;
    parts.push(format!("counterexample two-layer {} vs brute force {} (recorded {recorded})", two.cost, brute.cost));
    Ok(parts.join("; "))
}

fn random_pair(rng: &mut ChaCha8Rng) -> (KernelGraph, DeviceConfig) {
    let mut pick = |n: u64| (rng.next_u64() % n) as usize;
    let names = builtin_names();
    let spec = builtin(names[pick(names.len() as u64)]).unwrap();
    let sq = 8 + pick(121);
    let sk = if spec.pattern == Pattern::Recurrent { sq } else { 8 + pick(121) };
    let dqk = [8, 16, 32, 64][pick(4)];
    let dv = [8, 16, 64][pick(3)];
    let spec = spec.with_dims(AttnDims { batch: 1, heads: 1 + pick(2), seq_q: sq, seq_k: sk, dqk, dv });
    let reg = pick(65536) as u64;
    let sh = reg + pick(262144) as u64;
    let gl = sh + pick(1 << 22) as u64;
    let dev = DeviceConfig {
        basetile: TileShape { m: [8, 16, 32][pick(3)], n: [8, 16, 32][pick(3)] },
        tiers: vec![
            TierSpec { name: "REGISTER".into(), capacity_bytes: reg, bandwidth: 1.0 + pick(256) as f64 },
            TierSpec { name: "SHARED".into(), capacity_bytes: sh, bandwidth: 1.0 + pick(64) as f64 },
            TierSpec { name: "GLOBAL".into(), capacity_bytes: gl, bandwidth: 0.5 + pick(8) as f64 },
        ],
        throughput_flops: 1.0 + pick(512) as f64,
        max_stages: 1 + pick(3) as u32,
        element_bytes: 2,
    };
    (KernelGraph::from_spec(&spec).unwrap(), dev)
}

fn c8_scheduler_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let (mut planned, mut infeasible, mut traces) = (0, 0, 0);
    for case in 0..500 {
        let (g, d) = random_pair(&mut rng);
        let a = one.install(|| tile_config_scheduling(&g, &d, ProfileMode::Analytic));
        let b = four.install(|| tile_config_scheduling(&g, &d, ProfileMode::Analytic));
        match (&a, &b) {
            (Ok(x), Ok(y)) => {
                ensure(x == y, || format!("case {case}: plans differ across thread counts"))?;
                ensure(fits(&g, &d, x), || format!("case {case}: plan violates memory"))?;
                planned += 1;
            }
            (Err(ScheduleError::NoFeasiblePlan), Err(ScheduleError::NoFeasiblePlan))
            | (Err(ScheduleError::BasetileExceedsProblem { .. }), Err(ScheduleError::BasetileExceedsProblem { .. })) => {
                infeasible += 1
            }
            _ => return Err(format!("case {case}: outcomes {a:?} / {b:?}")),
        }
        for tile in infer_possible_tile_configs(&g, d.basetile).unwrap_or_default() {
            let (_, trace) = tile_resource_scheduling_traced(tile, &g.tensors, &d);
            traces += 1;
            for w in trace.placements.windows(2) {
                let changed: Vec<usize> = (0..w[0].len()).filter(|&i| w[0][i] != w[1][i]).collect();
                ensure(changed.len() == 1 && w[0][changed[0]].lower() == Some(w[1][changed[0]]), || {
                    format!("case {case}: non-monotone demotion at {tile}")
                })?;
            }
        }
    }
    Ok(format!(
        "500 pairs: {planned} planned, {infeasible} infeasible, {traces} monotone traces, 1 vs 4 threads identical"
    ))
}

fn c9_lowering() -> Outcome {
    let dev = DeviceConfig::default_device();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for name in builtin_names() {
        let spec = with_dims(name, 1, 2, 96, 16, 16);
        let kg = KernelGraph::from_spec(&spec).map_err(s)?;
        let configs = infer_possible_tile_configs(&kg, TileShape { m: 16, n: 16 }).map_err(s)?;
        let inst = ProblemInstance::random(&spec, 3);
        let want = run_reference(&spec, &inst).map_err(s)?;
        for _ in 0..3 {
            let tile = configs[rng.next_u64() as usize % configs.len()];
            let tiers: Vec<MemoryLocation> =
                kg.tensors.iter().map(|_| MemoryLocation::ALL[rng.next_u64() as usize % 3]).collect();
            let cands: Vec<_> = generate_plans(&tiers, dev.max_stages)
                .into_iter()
                .filter(|c| compute_memory_constraint(tile, &kg.tensors, c, &dev))
                .collect();
            let cand = &cands[rng.next_u64() as usize % cands.len()];
            let plan = plan_from_candidate(&kg, tile, cand, 0.0);
            let prog = lower_spec(&spec, tile).map_err(s)?;
            let got = bind_executable(&prog, &plan, &spec).map_err(s)?.run(&inst).map_err(s)?;
            let err = got.max_abs_diff(&want);
            ensure(err <= 1e-10, || format!("{name} {tile}: {err:e}"))?;
            worst = worst.max(err);
            let src = code_generation(&prog, &plan).map_err(s)?;
            ensure(src == code_generation(&prog, &plan).map_err(s)?, || format!("{name}: emission not repeatable"))?;
        }
    }
    let snapshot = std::fs::read_to_string(repo().join("crates/core/tests/fixtures/relu.kernel")).map_err(s)?;
    let b = builtin("relu").unwrap();
    let spec = b.with_dims(b.dims.scaled(1.0 / 16.0));
    let kg = KernelGraph::from_spec(&spec).map_err(s)?;
    let plan = tile_config_scheduling(&kg, &dev, ProfileMode::Analytic).map_err(s)?;
    let src = code_generation(&lower_spec(&spec, plan.tile_config).map_err(s)?, &plan).map_err(s)?;
    ensure(src == snapshot, || "relu emission differs from the frozen snapshot".into())?;
    Ok(format!("9 builtins x 3 plans: max abs err {worst:e}; emission repeatable; relu snapshot matches"))
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_attnforge"))
        .args(args)
        .current_dir(repo())
        .env_remove("ATTNFORGE_SEED")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn json_of(r: &Run, keys: &[&str]) -> Result<Value, String> {
    let v: Value = serde_json::from_str(&r.stdout).map_err(|e| format!("invalid JSON ({e}): {}", r.stdout))?;
    for k in keys {
        ensure(v.get(*k).is_some(), || format!("JSON lacks `{k}`"))?;
    }
    Ok(v)
}

fn c10_cli() -> Outcome {
    let expect = |r: &Run, code: i32, what: &str| {
        ensure(r.code == code, || format!("{what}: exit {} (want {code}); stderr: {}", r.code, r.stderr))
    };
    let r = cli(&["list", "--json"]);
    expect(&r, 0, "list")?;
    let v: Value = serde_json::from_str(&r.stdout).map_err(s)?;
    ensure(v.as_array().map(|a| a.len()) == Some(9), || "list --json does not have 9 entries".into())?;

    let r = cli(&["check", "softmax", "--scale", "0.0625", "--seed", "7", "--json"]);
    expect(&r, 0, "check")?;
    json_of(&r, &["command", "variant", "dims", "seed", "comparisons", "pass"])?;

    let r = cli(&["gradcheck", "softmax", "--json"]);
    expect(&r, 0, "gradcheck")?;
    json_of(&r, &["command", "tensors", "resamples", "max_rel_err", "pass"])?;

    let r = cli(&[
        "schedule",
        "relu",
        "--scale",
        "0.03125",
        "--device",
        "docs/devices/toy-roomy.json",
        "--verify",
        "--json",
    ]);
    expect(&r, 0, "schedule")?;
    let v = json_of(&r, &["command", "plan", "verify", "pass"])?;
    ensure(v["verify"]["optimal"] == Value::Bool(true), || "schedule --verify not optimal on toy device".into())?;

    let dir = tempfile::tempdir().map_err(s)?;
    let out = dir.path().join("relu.kernel");
    let r = cli(&["emit", "relu", "-o", out.to_str().unwrap(), "--check", "--json"]);
    expect(&r, 0, "emit")?;
    json_of(&r, &["command", "plan", "bytes", "check", "path", "pass"])?;
    let snapshot = std::fs::read_to_string(repo().join("crates/core/tests/fixtures/relu.kernel")).map_err(s)?;
    ensure(std::fs::read_to_string(&out).map_err(s)? == snapshot, || "emit relu differs from snapshot".into())?;

    let r = cli(&["bench", "relu", "--repeats", "1", "--scale", "0.03125", "--json"]);
    expect(&r, 0, "bench")?;
    let v = json_of(&r, &["command", "rows"])?;
    ensure(v["rows"].as_array().map(|a| a.len()) == Some(1), || {
        "bench with one variant and block gives one row".into()
    })?;

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "broken", "pattern": "parallel"}"#).map_err(s)?;
    let r = cli(&["check", "--file", bad.to_str().unwrap()]);
    expect(&r, 2, "malformed variant file")?;
    ensure(r.stderr.contains("dims"), || format!("diagnostic does not name `dims`: {}", r.stderr))?;

    let mut zero = DeviceConfig::default_device();
    for t in &mut zero.tiers {
        t.capacity_bytes = 0;
    }
    let zpath = dir.path().join("zero.json");
    std::fs::write(&zpath, zero.to_json()).map_err(s)?;
    let r = cli(&["schedule", "softmax", "--device", zpath.to_str().unwrap()]);
    expect(&r, 1, "zero-capacity device")?;
    ensure(r.stderr.contains("no feasible plan"), || format!("stderr: {}", r.stderr))?;

    Ok("list/check/gradcheck/schedule/emit/bench exit 0 with JSON; malformed file exit 2; infeasible device exit 1"
        .into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("online-normalization equivalence", c1_online_normalization),
        ("non-square head dims", c2_non_square_heads),
        ("custom-variant coverage", c3_custom_variants),
        ("recurrent equivalence", c4_recurrent),
        ("cross-pattern equivalence", c5_cross_pattern),
        ("autodiff vs finite differences", c6_autodiff),
        ("scheduler optimality on toy devices", c7_toy_optimality),
        ("scheduler soundness", c8_scheduler_soundness),
        ("lowering preservation", c9_lowering),
        ("CLI contract", c10_cli),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
