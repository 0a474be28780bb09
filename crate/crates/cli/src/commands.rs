use std::io::Write;
use std::time::Instant;

use anyhow::Context;
use attnforge::engine::gradcheck::{gradcheck as run_gradcheck, GradcheckOptions};
use attnforge::schedule::{profile, search_space_size};
use attnforge::{
    bind_executable, brute_force_schedule, builtin, builtin_names, code_generation, lower_spec, run_chunk_recurrent,
    run_naive_parallel, run_reference, run_step_recurrent, run_tiled_parallel, tile_config_scheduling, AttentionSpec,
    DeviceConfig, EngineError, ExecutionPlan, KernelGraph, Pattern, ProblemInstance, ProfileMode,
};
use log::info;
use serde_json::{json, Value};

use crate::{input_error, load_device, resolve_seed, BenchArgs, CheckArgs, EmitArgs, GradArgs, Mode, ScheduleArgs};

const CHECK_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-5;
const MAX_VERIFY_SPACE: f64 = 1e6;

fn print_json(v: &Value) {
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn pattern_name(p: Pattern) -> &'static str {
    match p {
        Pattern::Parallel => "parallel",
        Pattern::Recurrent => "recurrent",
    }
}

pub fn list(as_json: bool) -> anyhow::Result<bool> {
    let specs: Vec<AttentionSpec> = builtin_names().iter().map(|n| builtin(n).expect("builtin")).collect();
    if as_json {
        let rows: Vec<Value> = specs
            .iter()
            .map(|s| json!({ "name": s.name, "pattern": pattern_name(s.pattern), "dims": s.dims }))
            .collect();
        print_json(&Value::Array(rows));
    } else {
        for s in &specs {
            println!(
                "{:<20}{:<11}dqk={} dv={} heads={} seq={}",
                s.name,
                pattern_name(s.pattern),
                s.dims.dqk,
                s.dims.dv,
                s.dims.heads,
                s.dims.seq_q
            );
        }
    }
    Ok(true)
}

pub fn check(args: &CheckArgs) -> anyhow::Result<bool> {
    let spec = args.variant.load(1.0 / 16.0)?;
    let seed = args.variant.seed()?;
    let d = spec.dims;
    let inst = ProblemInstance::random(&spec, seed);
    let reference = run_reference(&spec, &inst)?;
    let seq = d.seq_q.max(d.seq_k);
    let sizes: Vec<usize> = match args.chunk {
        Some(0) => return Err(input_error("--chunk must be positive")),
        Some(c) => vec![c],
        None => {
            let mut v: Vec<usize> = [16, 48].into_iter().filter(|&b| b < seq).collect();
            v.push(seq);
            v
        }
    };
    let mut rows = Vec::new();
    for &b in &sizes {
        let (executor, out) = match spec.pattern {
            Pattern::Parallel => ("tiled", run_tiled_parallel(&spec, &inst, b.min(d.seq_q), b.min(d.seq_k))?),
            Pattern::Recurrent => ("chunked", run_chunk_recurrent(&spec, &inst, b)?),
        };
        let err = out.max_abs_diff(&reference);
        info!("{executor} block {b}: max abs err {err:e}");
        rows.push((executor, b, err));
    }
    let pass = rows.iter().all(|r| r.2 <= CHECK_TOL);
    let reference_name = match spec.pattern {
        Pattern::Parallel => "naive",
        Pattern::Recurrent => "step",
    };
    if args.variant.json {
        let cmp: Vec<Value> = rows
            .iter()
            .map(|(e, b, err)| json!({ "executor": e, "block": b, "max_abs_err": err, "pass": *err <= CHECK_TOL }))
            .collect();
        print_json(&json!({
            "command": "check",
            "variant": spec.name,
            "dims": d,
            "seed": seed,
            "reference": reference_name,
            "tolerance": CHECK_TOL,
            "comparisons": cmp,
            "pass": pass,
        }));
    } else {
        println!("{} ({d}) seed={seed}", spec.name);
        for (e, b, err) in &rows {
            let verdict = if *err <= CHECK_TOL { "ok" } else { "FAIL" };
            println!("  {e} vs {reference_name}  block={b:<5} max_abs_err={err:e}  {verdict}");
        }
    }
    Ok(pass)
}

pub fn gradcheck(args: &GradArgs) -> anyhow::Result<bool> {
    let spec = args.variant.load(1.0 / 256.0)?;
    let seed = args.variant.seed()?;
    if !(args.eps.is_finite() && args.eps > 0.0) {
        return Err(input_error(format!("--eps must be positive, got {}", args.eps)));
    }
    let opts = GradcheckOptions {
        eps: args.eps,
        samples_per_tensor: (args.samples > 0).then_some(args.samples),
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&spec, seed, &opts)?;
    let worst = report.max_rel_err();
    let pass = worst <= GRAD_TOL;
    if args.variant.json {
        print_json(&json!({
            "command": "gradcheck",
            "variant": spec.name,
            "dims": spec.dims,
            "seed": seed,
            "compared_seed": report.seed,
            "eps": args.eps,
            "resamples": report.resamples,
            "tolerance": GRAD_TOL,
            "tensors": report.tensors,
            "max_rel_err": worst,
            "pass": pass,
        }));
    } else {
        println!("{} ({}) seed={} resamples={}", spec.name, spec.dims, report.seed, report.resamples);
        for t in &report.tensors {
            let verdict = if t.max_rel_err <= GRAD_TOL { "ok" } else { "FAIL" };
            println!(
                "  d/d{:<8} compared={:<5} excluded={:<4} max_rel_err={:e} max_abs_err={:e} worst={:?}  {verdict}",
                t.name, t.compared, t.excluded, t.max_rel_err, t.max_abs_err, t.worst
            );
        }
    }
    Ok(pass)
}

fn plan_json(plan: &ExecutionPlan) -> Value {
    json!({
        "tile_config": plan.tile_config,
        "placements": plan.placements.iter().map(|(n, m)| json!({ "tensor": n, "tier": m.name() })).collect::<Vec<_>>(),
        "stages": plan.stages.iter().map(|(n, s)| json!({ "tensor": n, "stages": s })).collect::<Vec<_>>(),
        "cost": plan.cost,
    })
}

fn print_plan(plan: &ExecutionPlan) {
    println!("  tile {}  cost {}", plan.tile_config, plan.cost);
    for ((n, m), (_, s)) in plan.placements.iter().zip(&plan.stages) {
        println!("    {n:<10} {m:<9} stages={s}");
    }
}

fn schedule_plan(
    spec: &AttentionSpec,
    device: &DeviceConfig,
    mode: Mode,
) -> anyhow::Result<(KernelGraph, ExecutionPlan)> {
    let kg = KernelGraph::from_spec(spec)?;
    let mode = match mode {
        Mode::Analytic => ProfileMode::Analytic,
        Mode::Measured => ProfileMode::Measured,
    };
    let plan = tile_config_scheduling(&kg, device, mode)?;
    Ok((kg, plan))
}

pub fn schedule(args: &ScheduleArgs) -> anyhow::Result<bool> {
    let spec = args.variant.load(1.0 / 16.0)?;
    let device = load_device(&args.device)?;
    let (kg, plan) = schedule_plan(&spec, &device, args.mode)?;
    let mut pass = true;
    let mut verify = Value::Null;
    if args.verify {
        let space = search_space_size(&kg, &device)?;
        if space <= MAX_VERIFY_SPACE {
            let brute = brute_force_schedule(&kg, &device)?;
            // Brute force ranks by the analytic model; compare like with like.
            let analytic = profile(&plan, &kg, &device, ProfileMode::Analytic)?;
            let optimal = analytic <= brute.cost;
            pass = optimal;
            verify = json!({ "space": space, "brute_force": plan_json(&brute), "optimal": optimal });
        } else {
            verify = json!({ "space": space, "skipped": "search space exceeds the brute-force limit" });
        }
    }
    let mode = match args.mode {
        Mode::Analytic => "analytic",
        Mode::Measured => "measured",
    };
    if args.variant.json {
        print_json(&json!({
            "command": "schedule",
            "variant": spec.name,
            "dims": spec.dims,
            "mode": mode,
            "plan": plan_json(&plan),
            "verify": verify,
            "pass": pass,
        }));
    } else {
        println!("{} ({}) mode={mode}", spec.name, spec.dims);
        print_plan(&plan);
        if let Some(b) = verify.get("brute_force") {
            println!(
                "  brute force over {} candidates: cost {}  {}",
                verify["space"],
                b["cost"],
                if pass { "optimal" } else { "SUBOPTIMAL" }
            );
        } else if !verify.is_null() {
            println!("  brute force skipped: space {} exceeds the limit", verify["space"]);
        }
    }
    Ok(pass)
}

pub fn emit(args: &EmitArgs) -> anyhow::Result<bool> {
    let spec = args.variant.load(1.0 / 16.0)?;
    let device = load_device(&args.device)?;
    let (_, plan) = schedule_plan(&spec, &device, Mode::Analytic)?;
    let program = lower_spec(&spec, plan.tile_config)?;
    let source = code_generation(&program, &plan)?;
    if let Some(path) = &args.output {
        std::fs::write(path, &source).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut pass = true;
    let mut checked = Value::Null;
    if args.check {
        let seed = args.variant.seed()?;
        let exe = bind_executable(&program, &plan, &spec)?;
        let inst = ProblemInstance::random(&spec, seed);
        let err = exe.run(&inst)?.max_abs_diff(&run_reference(&spec, &inst)?);
        pass = err <= CHECK_TOL;
        checked = json!({ "seed": seed, "max_abs_err": err, "tolerance": CHECK_TOL, "pass": pass });
    }
    if args.variant.json {
        let mut report = json!({
            "command": "emit",
            "variant": spec.name,
            "dims": spec.dims,
            "plan": plan_json(&plan),
            "bytes": source.len(),
            "check": checked,
            "pass": pass,
        });
        match &args.output {
            Some(p) => report["path"] = json!(p.display().to_string()),
            None => report["source"] = json!(source),
        }
        print_json(&report);
    } else {
        if args.output.is_none() {
            print!("{source}");
        }
        if let Some(c) = checked.as_object() {
            eprintln!("lowered vs reference: max_abs_err={}  {}", c["max_abs_err"], if pass { "ok" } else { "FAIL" });
        }
    }
    Ok(pass)
}

fn median_secs<F: FnMut() -> Result<(), EngineError>>(repeats: usize, mut f: F) -> anyhow::Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn bench(args: &BenchArgs) -> anyhow::Result<bool> {
    if args.repeats == 0 {
        return Err(input_error("--repeats must be positive"));
    }
    if args.blocks.contains(&0) {
        return Err(input_error("--blocks entries must be positive"));
    }
    if !(args.scale.is_finite() && args.scale > 0.0) {
        return Err(input_error(format!("--scale must be positive, got {}", args.scale)));
    }
    let names: Vec<String> = if args.names.is_empty() {
        builtin_names().iter().map(|s| s.to_string()).collect()
    } else {
        args.names.clone()
    };
    let seed = resolve_seed(args.seed)?;
    let mut rows = Vec::new();
    for name in &names {
        let base = builtin(name).map_err(input_error)?;
        let spec = base.with_dims(base.dims.scaled(args.scale));
        let inst = ProblemInstance::random(&spec, seed);
        for &b in &args.blocks {
            let (reference, executor, r, e) = match spec.pattern {
                Pattern::Parallel => {
                    let d = spec.dims;
                    let r = median_secs(args.repeats, || run_naive_parallel(&spec, &inst).map(drop))?;
                    let e = median_secs(args.repeats, || {
                        run_tiled_parallel(&spec, &inst, b.min(d.seq_q), b.min(d.seq_k)).map(drop)
                    })?;
                    ("naive", "tiled", r, e)
                }
                Pattern::Recurrent => {
                    let r = median_secs(args.repeats, || run_step_recurrent(&spec, &inst).map(drop))?;
                    let e = median_secs(args.repeats, || run_chunk_recurrent(&spec, &inst, b).map(drop))?;
                    ("step", "chunked", r, e)
                }
            };
            rows.push(json!({
                "variant": spec.name,
                "dims": spec.dims,
                "block": b,
                "reference": reference,
                "executor": executor,
                "reference_s": r,
                "executor_s": e,
                "ratio": r / e,
            }));
        }
    }
    if args.json {
        print_json(&json!({ "command": "bench", "repeats": args.repeats, "seed": seed, "rows": rows }));
    } else {
        println!(
            "{:<20} {:>6} {:>9} {:>12} {:>9} {:>12} {:>8}",
            "variant", "block", "reference", "seconds", "executor", "seconds", "ratio"
        );
        for r in &rows {
            println!(
                "{:<20} {:>6} {:>9} {:>12.6} {:>9} {:>12.6} {:>8.3}",
                r["variant"].as_str().unwrap_or_default(),
                r["block"],
                r["reference"].as_str().unwrap_or_default(),
                r["reference_s"].as_f64().unwrap_or_default(),
                r["executor"].as_str().unwrap_or_default(),
                r["executor_s"].as_f64().unwrap_or_default(),
                r["ratio"].as_f64().unwrap_or_default()
            );
        }
    }
    Ok(true)
}
