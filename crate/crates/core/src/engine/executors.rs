use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rayon::prelude::*;

use super::eval::{evaluate_outputs, Bindings};
use super::problem::ProblemInstance;
use super::tensor::{dense_shape, DenseTensor, Matrix};
use super::EngineError;
use crate::graph::{DimKind, Graph};
use crate::spec::{
    build_parallel, build_recurrent, build_sections, AttentionSpec, ParallelGraph, Pattern, RecurrenceDef,
    SectionGraphs, TileExtents,
};

/// One (batch, head) slice of every input.
pub(crate) struct SliceInputs<'a> {
    spec: &'a AttentionSpec,
    tensors: HashMap<String, Matrix>,
}

impl<'a> SliceInputs<'a> {
    pub fn new(spec: &'a AttentionSpec, inst: &ProblemInstance, b: usize, h: usize) -> SliceInputs<'a> {
        let tensors = inst.names().into_iter().map(|n| {
            let m = inst.tensor(&n).expect("listed name").slice(b, h);
            (n, m)
        });
        SliceInputs { spec, tensors: tensors.collect() }
    }

    fn axis_range(kind: DimKind, rows: &Range<usize>, cols: &Range<usize>, extent: usize) -> Range<usize> {
        match kind {
            DimKind::SeqQ => rows.clone(),
            DimKind::SeqK => cols.clone(),
            _ => 0..extent,
        }
    }

    /// Binds every placeholder of `g` that names an input or position index,
    /// restricted to query positions `rows` and key positions `cols`.
    pub fn bind(&self, g: &Graph, rows: Range<usize>, cols: Range<usize>) -> Bindings {
        self.bind_names(g.placeholders().iter().map(|(n, _)| n.as_str()), rows, cols)
    }

    pub fn bind_names<'n>(
        &self,
        names: impl IntoIterator<Item = &'n str>,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Bindings {
        let mut out = Bindings::new();
        for name in names {
            let m = match name {
                "q" => self.tensors["q"].rows_slice(rows.start, rows.end),
                "k" | "v" => self.tensors[name].rows_slice(cols.start, cols.end),
                "row_idx" | "col_idx" => {
                    let mut m = Matrix::zeros(rows.len(), cols.len());
                    for (i, r) in rows.clone().enumerate() {
                        for (j, c) in cols.clone().enumerate() {
                            m.set(i, j, if name == "row_idx" { r } else { c } as f64);
                        }
                    }
                    m
                }
                other => match (self.spec.extra(other), self.tensors.get(other)) {
                    (Some(e), Some(t)) => {
                        let r = Self::axis_range(e.axes[0], &rows, &cols, t.rows);
                        let c = Self::axis_range(e.axes[1], &rows, &cols, t.cols);
                        t.sub_block(r.start, r.end, c.start, c.end)
                    }
                    _ => continue,
                },
            };
            out.insert(name.to_string(), m);
        }
        out
    }
}

/// Runs `f` for every (batch, head) pair in parallel and assembles the output.
pub(crate) fn per_slice<F>(spec: &AttentionSpec, what: &'static str, f: F) -> Result<DenseTensor, EngineError>
where
    F: Fn(usize, usize) -> Result<Matrix, EngineError> + Sync,
{
    let d = spec.dims;
    let slices: Vec<Matrix> =
        (0..d.batch * d.heads).into_par_iter().map(|i| f(i / d.heads, i % d.heads)).collect::<Result<_, _>>()?;
    let mut out = DenseTensor::zeros(dense_shape(d.batch, d.heads, d.dim(DimKind::SeqQ), d.dim(DimKind::DimV)));
    for (i, m) in slices.iter().enumerate() {
        out.set_slice(i / d.heads, i % d.heads, m);
    }
    if out.has_nan() {
        return Err(EngineError::NanInOutput { executor: what });
    }
    Ok(out)
}

fn expect_pattern(spec: &AttentionSpec, pattern: Pattern, executor: &str) -> Result<(), EngineError> {
    if spec.pattern != pattern {
        return Err(EngineError::WrongPattern { executor: executor.to_string(), variant: spec.name.clone() });
    }
    Ok(())
}

fn single(mut v: Vec<Matrix>) -> Matrix {
    v.pop().expect("graph has one output")
}

/// Evaluates the full parallel graph per slice.
pub fn run_naive_parallel(spec: &AttentionSpec, inst: &ProblemInstance) -> Result<DenseTensor, EngineError> {
    expect_pattern(spec, Pattern::Parallel, "naive parallel")?;
    inst.check(spec)?;
    let ParallelGraph { graph, .. } = build_parallel(spec)?;
    let d = spec.dims;
    per_slice(spec, "naive parallel", |b, h| {
        let inputs = SliceInputs::new(spec, inst, b, h);
        Ok(single(evaluate_outputs(&graph, &inputs.bind(&graph, 0..d.seq_q, 0..d.seq_k))?))
    })
}

pub(crate) fn blocks(len: usize, size: usize) -> Vec<Range<usize>> {
    (0..len).step_by(size).map(|s| s..(s + size).min(len)).collect()
}

/// Online blockwise execution with `block_m` query rows and `block_n` key
/// columns per tile.
pub fn run_tiled_parallel(
    spec: &AttentionSpec,
    inst: &ProblemInstance,
    block_m: usize,
    block_n: usize,
) -> Result<DenseTensor, EngineError> {
    expect_pattern(spec, Pattern::Parallel, "tiled parallel")?;
    if block_m == 0 || block_n == 0 {
        return Err(EngineError::InvalidBlock(format!("tile {block_m}x{block_n} has a zero extent")));
    }
    inst.check(spec)?;
    let d = spec.dims;
    let row_blocks = blocks(d.seq_q, block_m);
    let col_blocks = blocks(d.seq_k, block_n);
    let mut sections: BTreeMap<TileExtents, SectionGraphs> = BTreeMap::new();
    for r in &row_blocks {
        for c in &col_blocks {
            let tile = TileExtents { rows: r.len(), cols: c.len() };
            if !sections.contains_key(&tile) {
                sections.insert(tile, build_sections(spec, tile)?);
            }
        }
    }
    per_slice(spec, "tiled parallel", |b, h| {
        let inputs = SliceInputs::new(spec, inst, b, h);
        let mut out = Matrix::zeros(d.seq_q, d.dv);
        for r in &row_blocks {
            let first = &sections[&TileExtents { rows: r.len(), cols: col_blocks[0].len() }];
            let mut state = evaluate_outputs(&first.prologue, &Bindings::new())?;
            let mut last = first;
            for c in &col_blocks {
                let sec = &sections[&TileExtents { rows: r.len(), cols: c.len() }];
                let mut bind = inputs.bind(&sec.body, r.clone(), c.clone());
                for (name, m) in sec.rowscales.iter().chain(std::iter::once(&"acc".to_string())).zip(state) {
                    bind.insert(name.clone(), m);
                }
                state = evaluate_outputs(&sec.body, &bind)?;
                last = sec;
            }
            let mut bind = inputs.bind(&last.epilogue, r.clone(), col_blocks[col_blocks.len() - 1].clone());
            for (name, m) in last.rowscales.iter().chain(std::iter::once(&"acc".to_string())).zip(state) {
                bind.insert(name.clone(), m);
            }
            out.write_rows(r.start, &single(evaluate_outputs(&last.epilogue, &bind)?));
        }
        Ok(out)
    })
}

fn check_recurrent_dims(spec: &AttentionSpec) -> Result<(), EngineError> {
    if spec.dims.seq_q != spec.dims.seq_k {
        return Err(EngineError::Instance(format!(
            "recurrent variants need seq_q == seq_k, got {} and {}",
            spec.dims.seq_q, spec.dims.seq_k
        )));
    }
    Ok(())
}

fn modified_inputs(
    def: &RecurrenceDef,
    inputs: &SliceInputs,
    seq: usize,
) -> Result<(Matrix, Matrix, Matrix), EngineError> {
    let mut m = evaluate_outputs(&def.mods, &inputs.bind(&def.mods, 0..seq, 0..seq))?.into_iter();
    Ok((m.next().unwrap(), m.next().unwrap(), m.next().unwrap()))
}

fn finish_output(def: &RecurrenceDef, inputs: &SliceInputs, seq: usize, o: Matrix) -> Result<Matrix, EngineError> {
    match &def.output {
        None => Ok(o),
        Some(g) => {
            let mut bind = inputs.bind(g, 0..seq, 0..seq);
            bind.insert("o".into(), o);
            Ok(single(evaluate_outputs(g, &bind)?))
        }
    }
}

/// One recurrence step per position, evaluating `h_mod` on the full state.
pub fn run_step_recurrent(spec: &AttentionSpec, inst: &ProblemInstance) -> Result<DenseTensor, EngineError> {
    expect_pattern(spec, Pattern::Recurrent, "step recurrent")?;
    check_recurrent_dims(spec)?;
    inst.check(spec)?;
    let def = build_recurrent(spec)?;
    let d = spec.dims;
    let seq = d.seq_q;
    per_slice(spec, "step recurrent", |b, h| {
        let inputs = SliceInputs::new(spec, inst, b, h);
        let (qm, km, vm) = modified_inputs(&def, &inputs, seq)?;
        let mut state = Matrix::zeros(d.dqk, d.dv);
        let mut o = Matrix::zeros(seq, d.dv);
        for t in 0..seq {
            let mut bind = inputs.bind(&def.step, t..t + 1, t..t + 1);
            bind.insert("h".into(), state);
            state = single(evaluate_outputs(&def.step, &bind)?);
            let (kt, vt) = (km.row(t), vm.row(t));
            for i in 0..d.dqk {
                for j in 0..d.dv {
                    let v = state.at(i, j) + kt[i] * vt[j];
                    state.set(i, j, v);
                }
            }
            let qt = Matrix::from_vec(1, d.dqk, qm.row(t).to_vec());
            o.write_rows(t, &qt.matmul(&state));
        }
        finish_output(&def, &inputs, seq, o)
    })
}

/// Closed form of one chunk of the diagonal-decay recurrence.
///
/// With `A_t` the inclusive running product of `a` inside the chunk and
/// `L[t][s] = a_{s+1} ... a_t` (1 on the diagonal, 0 above it):
/// `O = diag(A) Q H + (Q K^T * L) V` and
/// `H' = A_last H + sum_s L[last][s] k_s^T v_s`, summed in ascending `s`.
/// `state` is updated in place.
pub fn chunk_core(q: &Matrix, k: &Matrix, v: &Matrix, a: &[f64], state: &mut Matrix) -> Matrix {
    let c = q.rows;
    debug_assert!(k.rows == c && v.rows == c && a.len() == c);
    let mut cum = vec![0.0; c];
    let mut l = Matrix::zeros(c, c);
    for t in 0..c {
        cum[t] = if t == 0 { a[0] } else { cum[t - 1] * a[t] };
        for s in 0..t {
            l.set(t, s, l.at(t - 1, s) * a[t]);
        }
        l.set(t, t, 1.0);
    }
    let inter = q.matmul(state);
    let mut scores = q.matmul_t(k);
    for t in 0..c {
        for s in 0..c {
            scores.set(t, s, scores.at(t, s) * l.at(t, s));
        }
    }
    let intra = scores.matmul(v);
    let mut o = Matrix::zeros(c, v.cols);
    for t in 0..c {
        for j in 0..v.cols {
            o.set(t, j, cum[t] * inter.at(t, j) + intra.at(t, j));
        }
    }
    let last = c - 1;
    for i in 0..state.rows {
        for j in 0..state.cols {
            let mut acc = cum[last] * state.at(i, j);
            for s in 0..c {
                acc += l.at(last, s) * k.at(s, i) * v.at(s, j);
            }
            state.set(i, j, acc);
        }
    }
    o
}

/// Per-position decay factors `a_t` from the recurrence's scale graph.
pub(crate) fn decay_factors(
    def: &RecurrenceDef,
    spec: &AttentionSpec,
    inputs: &SliceInputs,
    seq: usize,
) -> Result<Vec<f64>, EngineError> {
    let g = def.scale.as_ref().ok_or_else(|| {
        EngineError::UnsupportedHMod(format!(
            "`{}`: h_mod is not `h` times per-position factors, so it has no chunked form",
            spec.name
        ))
    })?;
    let m = single(evaluate_outputs(g, &inputs.bind(g, 0..seq, 0..seq))?);
    Ok((0..seq).map(|t| if m.rows == 1 { m.at(0, 0) } else { m.at(t, 0) }).collect())
}

/// Chunked recurrence: exact closed form within chunks of `chunk` positions,
/// state carried between chunks.
pub fn run_chunk_recurrent(
    spec: &AttentionSpec,
    inst: &ProblemInstance,
    chunk: usize,
) -> Result<DenseTensor, EngineError> {
    expect_pattern(spec, Pattern::Recurrent, "chunked recurrent")?;
    if chunk == 0 {
        return Err(EngineError::InvalidBlock("chunk size must be positive".into()));
    }
    check_recurrent_dims(spec)?;
    inst.check(spec)?;
    let def = build_recurrent(spec)?;
    let d = spec.dims;
    let seq = d.seq_q;
    per_slice(spec, "chunked recurrent", |b, h| {
        let inputs = SliceInputs::new(spec, inst, b, h);
        let (qm, km, vm) = modified_inputs(&def, &inputs, seq)?;
        let a = decay_factors(&def, spec, &inputs, seq)?;
        let mut state = Matrix::zeros(d.dqk, d.dv);
        let mut o = Matrix::zeros(seq, d.dv);
        for r in blocks(seq, chunk) {
            let oc = chunk_core(
                &qm.rows_slice(r.start, r.end),
                &km.rows_slice(r.start, r.end),
                &vm.rows_slice(r.start, r.end),
                &a[r.clone()],
                &mut state,
            );
            o.write_rows(r.start, &oc);
        }
        finish_output(&def, &inputs, seq, o)
    })
}

/// The plain reference for a variant: the full parallel graph, or the step
/// recurrence.
pub fn run_reference(spec: &AttentionSpec, inst: &ProblemInstance) -> Result<DenseTensor, EngineError> {
    match spec.pattern {
        Pattern::Parallel => run_naive_parallel(spec, inst),
        Pattern::Recurrent => run_step_recurrent(spec, inst),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{builtin, AttnDims, ModificationFn};

    fn small(name: &str, seq_q: usize, seq_k: usize) -> AttentionSpec {
        builtin(name).unwrap().with_dims(AttnDims { batch: 2, heads: 2, seq_q, seq_k, dqk: 8, dv: 4 })
    }

    /// Softmax attention straight from its definition, without graphs.
    fn softmax_oracle(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Matrix {
        let scale = 1.0 / (q.cols as f64).sqrt();
        let shift = k.rows as i64 - q.rows as i64;
        let mut o = Matrix::zeros(q.rows, v.cols);
        for i in 0..q.rows {
            let s: Vec<Option<f64>> = (0..k.rows)
                .map(|j| {
                    if causal && j as i64 > i as i64 + shift {
                        return None;
                    }
                    Some((0..q.cols).map(|c| q.at(i, c) * scale * k.at(j, c)).sum())
                })
                .collect();
            let m = s.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().flatten().map(|x| (x - m).exp()).sum();
            for c in 0..v.cols {
                let num: f64 = s.iter().enumerate().filter_map(|(j, x)| x.map(|x| (x - m).exp() * v.at(j, c))).sum();
                o.set(i, c, if z > 0.0 { num / z } else { 0.0 });
            }
        }
        o
    }

    #[test]
    fn naive_softmax_matches_oracle() {
        for causal in [false, true] {
            let mut spec = small("softmax", 7, 11);
            if causal {
                spec.score_mods.push(ModificationFn::causal());
            }
            let inst = ProblemInstance::random(&spec, 3);
            let out = run_naive_parallel(&spec, &inst).unwrap();
            for b in 0..2 {
                for h in 0..2 {
                    let want = softmax_oracle(&inst.q.slice(b, h), &inst.k.slice(b, h), &inst.v.slice(b, h), causal);
                    assert!(out.slice(b, h).max_abs_diff(&want) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tiled_matches_naive() {
        for name in ["softmax", "sigmoid", "relu", "retention-parallel"] {
            let spec = small(name, 13, 21);
            let inst = ProblemInstance::random(&spec, 1);
            let naive = run_naive_parallel(&spec, &inst).unwrap();
            for (bm, bn) in [(4, 5), (13, 21), (1, 1), (64, 64)] {
                let tiled = run_tiled_parallel(&spec, &inst, bm, bn).unwrap();
                assert!(tiled.max_abs_diff(&naive) <= 1e-12, "{name} {bm}x{bn}");
            }
        }
    }

    #[test]
    fn single_block_is_bitwise_naive() {
        let mut spec = small("softmax", 9, 9);
        spec.rownorm.as_mut().unwrap().direct = None;
        let inst = ProblemInstance::random(&spec, 2);
        let naive = run_naive_parallel(&spec, &inst).unwrap();
        let tiled = run_tiled_parallel(&spec, &inst, 64, 64).unwrap();
        assert_eq!(naive.data, tiled.data);
    }

    /// The recurrence with explicit loops and no graphs.
    fn recurrence_oracle(q: &Matrix, k: &Matrix, v: &Matrix, a: &[f64]) -> Matrix {
        let mut st = Matrix::zeros(k.cols, v.cols);
        let mut o = Matrix::zeros(q.rows, v.cols);
        for t in 0..q.rows {
            for i in 0..k.cols {
                for j in 0..v.cols {
                    st.set(i, j, a[t] * st.at(i, j) + k.at(t, i) * v.at(t, j));
                }
            }
            for j in 0..v.cols {
                o.set(t, j, (0..k.cols).map(|i| q.at(t, i) * st.at(i, j)).sum());
            }
        }
        o
    }

    #[test]
    fn retention_step_matches_oracle() {
        let spec = small("retention-recurrent", 10, 10);
        let inst = ProblemInstance::random(&spec, 4);
        let out = run_step_recurrent(&spec, &inst).unwrap();
        for h in 0..2 {
            let g = crate::spec::retention_gamma(h);
            let k = inst.k.slice(1, h);
            let ks = Matrix::from_vec(k.rows, k.cols, k.data.iter().map(|x| x / 8f64.sqrt()).collect());
            let want = recurrence_oracle(&inst.q.slice(1, h), &ks, &inst.v.slice(1, h), &[g; 10]);
            assert!(out.slice(1, h).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn chunked_matches_step() {
        for name in ["retention-recurrent", "gated-retention", "mamba2-ssm"] {
            let spec = small(name, 37, 37);
            let inst = ProblemInstance::random(&spec, 9);
            let step = run_step_recurrent(&spec, &inst).unwrap();
            for chunk in [1, 5, 16, 37, 100] {
                let chunked = run_chunk_recurrent(&spec, &inst, chunk).unwrap();
                assert!(chunked.max_abs_diff(&step) <= 1e-12, "{name} chunk {chunk}");
            }
        }
    }

    #[test]
    fn recurrent_matches_parallel_retention() {
        let rec = small("retention-recurrent", 12, 12);
        // Same decay structure without the row normalization.
        let mut par = small("retention-parallel", 12, 12);
        par.rownorm = None;
        let inst = ProblemInstance::random(&rec, 6);
        let mut pinst = ProblemInstance::random(&par, 6);
        pinst.q = inst.q.clone();
        pinst.k = inst.k.clone();
        pinst.v = inst.v.clone();
        let a = run_step_recurrent(&rec, &inst).unwrap();
        let b = run_naive_parallel(&par, &pinst).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn executor_rejects_wrong_pattern() {
        let spec = small("softmax", 4, 4);
        let inst = ProblemInstance::random(&spec, 0);
        assert!(matches!(run_step_recurrent(&spec, &inst), Err(EngineError::WrongPattern { .. })));
        assert!(matches!(run_tiled_parallel(&spec, &inst, 0, 4), Err(EngineError::InvalidBlock(_))));
    }

    #[test]
    fn degenerate_function_reports_nan() {
        let mut spec = small("relu", 4, 4);
        spec.score_mods = vec![ModificationFn::parse("log(scores)").unwrap()];
        let inst = ProblemInstance::random(&spec, 0);
        assert!(matches!(run_naive_parallel(&spec, &inst), Err(EngineError::NanInOutput { .. })));
    }
}
