use std::collections::BTreeMap;

use super::tensor::{dense_shape, DenseTensor, Matrix};
use super::EngineError;
use crate::graph::{Dim, DimKind};
use crate::spec::{retention_gamma, AttentionSpec, AttnDims, Fill};

/// Concrete inputs for one run: q, k, v and extras as `[batch, heads, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub dims: AttnDims,
    pub q: DenseTensor,
    pub k: DenseTensor,
    pub v: DenseTensor,
    pub extras: BTreeMap<String, DenseTensor>,
    pub seed: u64,
}

/// Stream ids of the counter-based generator: q, k, v, then extras in
/// declaration order.
pub const STREAM_Q: u64 = 0;
pub const STREAM_K: u64 = 1;
pub const STREAM_V: u64 = 2;
pub const STREAM_EXTRAS: u64 = 3;

fn fill_extra(shape: Vec<Dim>, fill: Fill, seed: u64, stream: u64) -> DenseTensor {
    match fill {
        Fill::Uniform { lo, hi } => DenseTensor::uniform(shape, seed, stream, lo, hi),
        Fill::Constant(c) => {
            let mut t = DenseTensor::zeros(shape);
            t.data.fill(c);
            t
        }
        Fill::RetentionDecay => {
            let mut t = DenseTensor::zeros(shape);
            for b in 0..t.batch() {
                for h in 0..t.heads() {
                    let m = Matrix::filled(t.rows(), t.cols(), retention_gamma(h));
                    t.set_slice(b, h, &m);
                }
            }
            t
        }
        Fill::RetentionMask => {
            let mut t = DenseTensor::zeros(shape.clone());
            // Rows are queries aligned to the end of the key axis.
            let shift = shape[3].extent() as i64 - shape[2].extent() as i64;
            for b in 0..t.batch() {
                for h in 0..t.heads() {
                    let g = retention_gamma(h);
                    let mut m = Matrix::zeros(t.rows(), t.cols());
                    for i in 0..t.rows() {
                        let pos = i as i64 + shift;
                        for j in 0..t.cols() {
                            if (j as i64) <= pos {
                                m.set(i, j, g.powi((pos - j as i64) as i32));
                            }
                        }
                    }
                    t.set_slice(b, h, &m);
                }
            }
            t
        }
    }
}

impl ProblemInstance {
    /// q, k, v uniform in `[-1, 1]`; extras per their declared fill.
    pub fn random(spec: &AttentionSpec, seed: u64) -> ProblemInstance {
        let d = spec.dims;
        let shape = |r: DimKind, c: DimKind| dense_shape(d.batch, d.heads, d.dim(r), d.dim(c));
        let extras = spec
            .extras
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let t = fill_extra(shape(e.axes[0], e.axes[1]), e.fill, seed, STREAM_EXTRAS + i as u64);
                (e.name.clone(), t)
            })
            .collect();
        ProblemInstance {
            dims: d,
            q: DenseTensor::uniform(shape(DimKind::SeqQ, DimKind::DimQK), seed, STREAM_Q, -1.0, 1.0),
            k: DenseTensor::uniform(shape(DimKind::SeqK, DimKind::DimQK), seed, STREAM_K, -1.0, 1.0),
            v: DenseTensor::uniform(shape(DimKind::SeqK, DimKind::DimV), seed, STREAM_V, -1.0, 1.0),
            extras,
            seed,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&DenseTensor> {
        match name {
            "q" => Some(&self.q),
            "k" => Some(&self.k),
            "v" => Some(&self.v),
            other => self.extras.get(other),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        match name {
            "q" => Some(&mut self.q),
            "k" => Some(&mut self.k),
            "v" => Some(&mut self.v),
            other => self.extras.get_mut(other),
        }
    }

    /// Names of every input tensor: q, k, v, then extras.
    pub fn names(&self) -> Vec<String> {
        ["q", "k", "v"].into_iter().map(String::from).chain(self.extras.keys().cloned()).collect()
    }

    pub fn check(&self, spec: &AttentionSpec) -> Result<(), EngineError> {
        let d = spec.dims;
        if self.dims != d {
            return Err(EngineError::Instance(format!("instance dims ({}) differ from spec dims ({d})", self.dims)));
        }
        let expect = |name: &str, r: DimKind, c: DimKind| -> Result<(), EngineError> {
            let t = self.tensor(name).ok_or_else(|| EngineError::MissingBinding(name.to_string()))?;
            let want = [d.batch, d.heads, d.dim(r).extent(), d.dim(c).extent()];
            let got: Vec<usize> = t.shape.iter().map(Dim::extent).collect();
            if got != want || t.data.len() != want.iter().product::<usize>() {
                return Err(EngineError::Instance(format!("tensor `{name}` has shape {got:?}, expected {want:?}")));
            }
            Ok(())
        };
        expect("q", DimKind::SeqQ, DimKind::DimQK)?;
        expect("k", DimKind::SeqK, DimKind::DimQK)?;
        expect("v", DimKind::SeqK, DimKind::DimV)?;
        for e in &spec.extras {
            expect(&e.name, e.axes[0], e.axes[1])?;
        }
        Ok(())
    }
}
