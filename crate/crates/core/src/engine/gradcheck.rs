//! Reverse-mode gradients of `sum(output)` and their finite-difference check.
//!
//! Kink policy: a problem instance is *kink-adjacent* when some
//! non-differentiable point of the forward graph lies within `kink_margin`
//! of its operand values (a `max`/`min` with nearly equal operands, a
//! nonzero `abs` operand near zero, a `clamp` input near a bound, a row maximum whose top two
//! entries nearly tie, a comparison with nearly equal sides). Only nodes that
//! depend on a differentiated input count. Such instances are not compared;
//! the seed is advanced and a fresh instance drawn, and the number of
//! resamples is reported.
//!
//! Input elements that are exactly zero (masked entries of a fixed mask) are
//! also skipped: perturbing one moves an `abs` operand off an exact zero,
//! which costs the central difference an O(eps) error. Random draws are never
//! exactly zero, so this only affects structural zeros; the count is reported.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::eval::{evaluate, evaluate_outputs};
use super::executors::{per_slice, SliceInputs};
use super::problem::ProblemInstance;
use super::tensor::{DenseTensor, Matrix};
use super::EngineError;
use crate::graph::{Graph, NodeId, PrimitiveKind};
use crate::spec::{build_parallel, build_unrolled, derive_backward, AttentionSpec, Pattern};

/// The single-graph forward used for differentiation and finite differences.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    spec: AttentionSpec,
    graph: Graph,
    output: NodeId,
}

fn bcast(m: &Matrix, i: usize, j: usize) -> f64 {
    m.at(if m.rows == 1 { 0 } else { i }, if m.cols == 1 { 0 } else { j })
}

impl ForwardModel {
    pub fn new(spec: &AttentionSpec) -> Result<ForwardModel, EngineError> {
        let (graph, output) = match spec.pattern {
            Pattern::Parallel => {
                let pg = build_parallel(spec)?;
                (pg.graph, pg.output)
            }
            Pattern::Recurrent => build_unrolled(spec)?,
        };
        Ok(ForwardModel { spec: spec.clone(), graph, output })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn bind(&self, inputs: &SliceInputs) -> super::Bindings {
        let d = self.spec.dims;
        inputs.bind(&self.graph, 0..d.seq_q, 0..d.seq_k)
    }

    /// Output slice for one (batch, head) pair.
    pub fn slice_output(&self, inst: &ProblemInstance, b: usize, h: usize) -> Result<Matrix, EngineError> {
        let inputs = SliceInputs::new(&self.spec, inst, b, h);
        let vals = evaluate(&self.graph, &self.bind(&inputs), &[self.output])?;
        Ok(vals.get(self.output).clone())
    }

    /// `sum(output)` of one slice, summed in row-major order.
    pub fn slice_loss(&self, inst: &ProblemInstance, b: usize, h: usize) -> Result<f64, EngineError> {
        Ok(self.slice_output(inst, b, h)?.data.iter().sum())
    }

    pub fn run(&self, inst: &ProblemInstance) -> Result<DenseTensor, EngineError> {
        per_slice(&self.spec, "forward model", |b, h| self.slice_output(inst, b, h))
    }

    /// Number of kink-adjacent sites over all slices.
    pub fn kink_sites(&self, inst: &ProblemInstance, margin: f64) -> Result<usize, EngineError> {
        let g = &self.graph;
        let mut depends = vec![false; g.len()];
        for node in g.nodes() {
            depends[node.id.0] = match &node.op {
                PrimitiveKind::Input(name) => inst.tensor(name).is_some(),
                _ => node.inputs.iter().any(|i| depends[i.0]),
            };
        }
        let d = self.spec.dims;
        let mut total = 0;
        for b in 0..d.batch {
            for h in 0..d.heads {
                let inputs = SliceInputs::new(&self.spec, inst, b, h);
                let vals = evaluate(g, &self.bind(&inputs), &[self.output])?;
                for node in g.nodes() {
                    if !depends[node.id.0] {
                        continue;
                    }
                    let Some(out) = vals.try_get(node.id) else { continue };
                    let arg = |k: usize| vals.get(node.inputs[k]);
                    let near = |x: f64, y: f64| (x - y).abs() < margin;
                    // Exact zeros under `abs` are masked entries; the derived
                    // gradient uses sign(0) = 0, which a central difference
                    // reproduces.
                    let near_nonzero = |x: f64| x != 0.0 && x.abs() < margin;
                    let mut count_elementwise = |f: &dyn Fn(usize, usize) -> bool| {
                        for i in 0..out.rows {
                            for j in 0..out.cols {
                                if f(i, j) {
                                    total += 1;
                                }
                            }
                        }
                    };
                    match &node.op {
                        PrimitiveKind::Max | PrimitiveKind::Min | PrimitiveKind::Cmp(_) => {
                            let (a, c) = (arg(0), arg(1));
                            count_elementwise(&|i, j| near(bcast(a, i, j), bcast(c, i, j)));
                        }
                        PrimitiveKind::Abs => {
                            let a = arg(0);
                            count_elementwise(&|i, j| near_nonzero(a.at(i, j)));
                        }
                        PrimitiveKind::ReduceAbssum => {
                            let a = arg(0);
                            total += a.data.iter().filter(|&&x| near_nonzero(x)).count();
                        }
                        PrimitiveKind::Clamp { lo, hi } => {
                            let a = arg(0);
                            count_elementwise(&|i, j| near(a.at(i, j), *lo) || near(a.at(i, j), *hi));
                        }
                        PrimitiveKind::ReduceMax => {
                            let a = arg(0);
                            for i in 0..a.rows {
                                let mut row: Vec<f64> = a.row(i).iter().copied().filter(|x| x.is_finite()).collect();
                                row.sort_by(|x, y| y.total_cmp(x));
                                if row.len() >= 2 && near(row[0], row[1]) {
                                    total += 1;
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(total)
    }
}

/// Gradients of `sum(output)` for q, k, v and every extra input, from the
/// derived backward graph.
pub fn autodiff_grads(
    spec: &AttentionSpec,
    inst: &ProblemInstance,
) -> Result<BTreeMap<String, DenseTensor>, EngineError> {
    inst.check(spec)?;
    let bw = derive_backward(spec)?;
    let d = spec.dims;
    let mut grads: BTreeMap<String, DenseTensor> = inst
        .names()
        .into_iter()
        .map(|n| (n.clone(), DenseTensor::zeros(inst.tensor(&n).unwrap().shape.clone())))
        .collect();
    for b in 0..d.batch {
        for h in 0..d.heads {
            let inputs = SliceInputs::new(spec, inst, b, h);
            let outs = evaluate_outputs(&bw.graph, &inputs.bind(&bw.graph, 0..d.seq_q, 0..d.seq_k))?;
            // Outputs are the forward output (if marked) followed by the gradients.
            let offset = outs.len() - bw.grads.len();
            for ((name, _), m) in bw.grads.iter().zip(&outs[offset..]) {
                grads.get_mut(name).expect("input name").set_slice(b, h, m);
            }
        }
    }
    Ok(grads)
}

/// Central difference of `sum(output)` with respect to one input element.
pub fn finite_diff_at(
    model: &ForwardModel,
    inst: &ProblemInstance,
    name: &str,
    coord: [usize; 4],
    eps: f64,
) -> Result<f64, EngineError> {
    let t = inst.tensor(name).ok_or_else(|| EngineError::UnknownTensor(name.into()))?;
    let [b, h, i, j] = coord;
    let idx = ((b * t.heads() + h) * t.rows() + i) * t.cols() + j;
    let mut p = inst.clone();
    let x = t.data[idx];
    p.tensor_mut(name).unwrap().data[idx] = x + eps;
    let plus = model.slice_loss(&p, b, h)?;
    p.tensor_mut(name).unwrap().data[idx] = x - eps;
    let minus = model.slice_loss(&p, b, h)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Central-difference gradient of every element of `name`.
pub fn finite_diff_grad(
    spec: &AttentionSpec,
    inst: &ProblemInstance,
    name: &str,
    eps: f64,
) -> Result<DenseTensor, EngineError> {
    let model = ForwardModel::new(spec)?;
    let t = inst.tensor(name).ok_or_else(|| EngineError::UnknownTensor(name.into()))?;
    let mut out = DenseTensor::zeros(t.shape.clone());
    for (n, c) in all_coords(t).into_iter().enumerate() {
        out.data[n] = finite_diff_at(&model, inst, name, c, eps)?;
    }
    Ok(out)
}

fn all_coords(t: &DenseTensor) -> Vec<[usize; 4]> {
    let mut v = Vec::with_capacity(t.data.len());
    for b in 0..t.batch() {
        for h in 0..t.heads() {
            for i in 0..t.rows() {
                for j in 0..t.cols() {
                    v.push([b, h, i, j]);
                }
            }
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Step of the compared central difference.
    pub eps: f64,
    /// Second step, used only to report how stable the difference is.
    pub cross_eps: f64,
    /// Relative error is `|a - f| / max(|a|, |f|, floor)`.
    pub floor: f64,
    pub kink_margin: f64,
    pub max_resamples: usize,
    /// Compare this many sampled elements per tensor; `None` compares all.
    pub samples_per_tensor: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            cross_eps: 1e-4,
            floor: 1e-3,
            kink_margin: 1e-3,
            max_resamples: 32,
            samples_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub compared: usize,
    /// Exact-zero elements skipped.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `[batch, head, row, col]` of the largest relative error.
    pub worst: [usize; 4],
    /// Largest relative disagreement between the two finite-difference steps.
    pub cross_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub variant: String,
    /// Seed of the instance that was finally compared.
    pub seed: u64,
    /// Kink-adjacent instances skipped before it.
    pub resamples: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

fn sample_coords(t: &DenseTensor, n: Option<usize>, seed: u64, stream: u64) -> Vec<[usize; 4]> {
    let all = all_coords(t);
    match n {
        Some(n) if n < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut picked = BTreeSet::new();
            while picked.len() < n {
                picked.insert((rng.next_u64() % all.len() as u64) as usize);
            }
            picked.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    }
}

/// Compares derived gradients against central differences on a random
/// instance drawn from `seed`, resampling kink-adjacent instances.
pub fn gradcheck(spec: &AttentionSpec, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport, EngineError> {
    let model = ForwardModel::new(spec)?;
    let mut resamples = 0;
    let mut s = seed;
    let inst = loop {
        let inst = ProblemInstance::random(spec, s);
        if model.kink_sites(&inst, opts.kink_margin)? == 0 {
            break inst;
        }
        resamples += 1;
        if resamples > opts.max_resamples {
            return Err(EngineError::Instance(format!(
                "every one of {} instances of `{}` lies near a non-differentiable point",
                resamples, spec.name
            )));
        }
        s = s.wrapping_add(1);
    };
    let grads = autodiff_grads(spec, &inst)?;
    let mut tensors = Vec::new();
    for (k, name) in inst.names().iter().enumerate() {
        let t = inst.tensor(name).unwrap();
        let coords = sample_coords(t, opts.samples_per_tensor, s, 1 << 32 | k as u64);
        let g = &grads[name];
        let mut check = TensorCheck {
            name: name.clone(),
            compared: 0,
            excluded: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: [0; 4],
            cross_rel: 0.0,
        };
        for c in coords {
            let [b, h, i, j] = c;
            if t.slice_at(b, h, i, j) == 0.0 {
                check.excluded += 1;
                continue;
            }
            check.compared += 1;
            let a = g.slice_at(b, h, i, j);
            let f = finite_diff_at(&model, &inst, name, c, opts.eps)?;
            let f2 = finite_diff_at(&model, &inst, name, c, opts.cross_eps)?;
            let r = rel_err(a, f, opts.floor);
            if r > check.max_rel_err || r.is_nan() {
                check.max_rel_err = r;
                check.worst = c;
            }
            check.max_abs_err = check.max_abs_err.max((a - f).abs());
            check.cross_rel = check.cross_rel.max(rel_err(f, f2, opts.floor));
        }
        tensors.push(check);
    }
    Ok(GradcheckReport { variant: spec.name.clone(), seed: s, resamples, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_reference;
    use crate::spec::{builtin, AttnDims, ModificationFn};

    fn tiny(name: &str) -> AttentionSpec {
        builtin(name).unwrap().with_dims(AttnDims { batch: 1, heads: 2, seq_q: 6, seq_k: 6, dqk: 4, dv: 3 })
    }

    #[test]
    fn forward_model_matches_reference() {
        for name in crate::spec::BUILTIN_NAMES {
            let spec = tiny(name);
            let inst = ProblemInstance::random(&spec, 1);
            let a = ForwardModel::new(&spec).unwrap().run(&inst).unwrap();
            let b = run_reference(&spec, &inst).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "{name}");
        }
    }

    #[test]
    fn builtin_gradients_match_differences() {
        for name in crate::spec::BUILTIN_NAMES {
            let report = gradcheck(&tiny(name), 11, &GradcheckOptions::default()).unwrap();
            assert!(report.max_rel_err() <= 1e-5, "{name}: {report:?}");
        }
    }

    #[test]
    fn relu_at_zero_is_kink_adjacent() {
        let spec = tiny("relu");
        let mut inst = ProblemInstance::random(&spec, 0);
        let model = ForwardModel::new(&spec).unwrap();
        // A zero query row makes every score of that row exactly zero.
        for j in 0..4 {
            let idx = j;
            inst.q.data[idx] = 0.0;
        }
        assert!(model.kink_sites(&inst, 1e-3).unwrap() >= 6);
    }

    #[test]
    fn mask_only_inputs_get_zero_gradient() {
        let mut spec = tiny("softmax");
        spec.score_mods.push(ModificationFn::causal());
        let inst = ProblemInstance::random(&spec, 2);
        let grads = autodiff_grads(&spec, &inst).unwrap();
        assert_eq!(grads.len(), 3);
        let report = gradcheck(&spec, 2, &GradcheckOptions::default()).unwrap();
        assert!(report.max_rel_err() <= 1e-5);
    }
}
