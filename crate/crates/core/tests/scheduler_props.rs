use attnforge::schedule::{
    candidate_of, compute_memory_constraint, infer_possible_tile_configs, tile_config_scheduling,
    tile_resource_scheduling_traced, DeviceConfig, KernelGraph, MemoryLocation, ProfileMode, ScheduleError, TierSpec,
    TileShape,
};
use attnforge::spec::{builtin, builtin_names, AttnDims, Pattern};
use proptest::prelude::*;

fn arb_graph() -> impl Strategy<Value = KernelGraph> {
    (
        0..builtin_names().len(),
        1usize..3,
        8usize..129,
        8usize..129,
        prop::sample::select(vec![8usize, 16, 32, 64]),
        prop::sample::select(vec![8usize, 16, 64]),
    )
        .prop_map(|(i, heads, sq, sk, dqk, dv)| {
            let spec = builtin(builtin_names()[i]).unwrap();
            let sk = if spec.pattern == Pattern::Recurrent { sq } else { sk };
            let spec = spec.with_dims(AttnDims { batch: 1, heads, seq_q: sq, seq_k: sk, dqk, dv });
            KernelGraph::from_spec(&spec).unwrap()
        })
}

fn arb_device() -> impl Strategy<Value = DeviceConfig> {
    (
        prop::sample::select(vec![8usize, 16, 32]),
        prop::sample::select(vec![8usize, 16, 32]),
        0u64..65536,
        0u64..262144,
        0u64..1 << 22,
        1u32..4,
        (1.0f64..256.0, 1.0f64..64.0, 0.5f64..8.0, 1.0f64..512.0),
    )
        .prop_map(|(bm, bn, reg, extra_sh, extra_gl, stages, (br, bs, bg, thr))| DeviceConfig {
            basetile: TileShape { m: bm, n: bn },
            tiers: vec![
                TierSpec { name: "REGISTER".into(), capacity_bytes: reg, bandwidth: br },
                TierSpec { name: "SHARED".into(), capacity_bytes: reg + extra_sh, bandwidth: bs },
                TierSpec { name: "GLOBAL".into(), capacity_bytes: reg + extra_sh + extra_gl, bandwidth: bg },
            ],
            throughput_flops: thr,
            max_stages: stages,
            element_bytes: 2,
        })
}

fn schedule_with_threads(
    g: &KernelGraph,
    d: &DeviceConfig,
    threads: usize,
) -> Result<attnforge::ExecutionPlan, ScheduleError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| tile_config_scheduling(g, d, ProfileMode::Analytic))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn scheduler_is_sound_and_deterministic(g in arb_graph(), d in arb_device()) {
        let one = schedule_with_threads(&g, &d, 1);
        let four = schedule_with_threads(&g, &d, 4);
        match (&one, &four) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a, b);
                prop_assert!(compute_memory_constraint(a.tile_config, &g.tensors, &candidate_of(&g, a), &d));
            }
            (Err(ScheduleError::NoFeasiblePlan), Err(ScheduleError::NoFeasiblePlan)) => {}
            (Err(ScheduleError::BasetileExceedsProblem { .. }), Err(ScheduleError::BasetileExceedsProblem { .. })) => {}
            other => prop_assert!(false, "unexpected outcome {:?}", other),
        }

        if let Ok(configs) = infer_possible_tile_configs(&g, d.basetile) {
            for tile in configs {
                let (plans, trace) = tile_resource_scheduling_traced(tile, &g.tensors, &d);
                for p in &plans {
                    prop_assert!(compute_memory_constraint(tile, &g.tensors, p, &d));
                }
                prop_assert_eq!(&trace.placements[0], &vec![MemoryLocation::Register; g.tensors.len()]);
                for w in trace.placements.windows(2) {
                    let changed: Vec<usize> = (0..w[0].len()).filter(|&i| w[0][i] != w[1][i]).collect();
                    prop_assert_eq!(changed.len(), 1);
                    let i = changed[0];
                    prop_assert_eq!(w[0][i].lower(), Some(w[1][i]));
                }
                let bytes: Vec<u64> = trace.order.iter().map(|&i| g.tensors[i].bytes_per_tile(tile, d.element_bytes)).collect();
                prop_assert!(bytes.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }
}
