//! Dense kernels for every primitive, shared by the graph evaluator and the
//! lowered-statement interpreter.

use super::tensor::Matrix;
use crate::graph::PrimitiveKind;

fn bcast_index(m: &Matrix, r: usize, c: usize) -> f64 {
    let rr = if m.rows == 1 { 0 } else { r };
    let cc = if m.cols == 1 { 0 } else { c };
    m.data[rr * m.cols + cc]
}

fn out_extent(a: usize, b: usize) -> usize {
    if a == 1 {
        b
    } else {
        a
    }
}

fn zip2(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let rows = out_extent(a.rows, b.rows);
    let cols = out_extent(a.cols, b.cols);
    if a.rows == b.rows && a.cols == b.cols {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Matrix::from_vec(rows, cols, data);
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.data[r * cols + c] = f(bcast_index(a, r, c), bcast_index(b, r, c));
        }
    }
    out
}

fn map(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec(a.rows, a.cols, a.data.iter().map(|&x| f(x)).collect())
}

fn reduce_rows(a: &Matrix, init: f64, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = Matrix::zeros(a.rows, 1);
    for r in 0..a.rows {
        out.data[r] = a.row(r).iter().fold(init, |acc, &x| f(acc, x));
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `op` to already-evaluated operands. `out_shape` gives the target
/// extents for ops whose output size is not implied by the operands.
pub fn apply(op: &PrimitiveKind, args: &[&Matrix], out_shape: (usize, usize)) -> Matrix {
    use PrimitiveKind::*;
    match op {
        Const(v) => Matrix::scalar(*v),
        Input(name) => panic!("placeholder `{name}` must be bound, not applied"),
        Add => zip2(args[0], args[1], |x, y| x + y),
        Sub => zip2(args[0], args[1], |x, y| x - y),
        Mul => zip2(args[0], args[1], |x, y| x * y),
        Div => zip2(args[0], args[1], |x, y| x / y),
        Max => zip2(args[0], args[1], |x, y| if x.is_nan() || y.is_nan() { f64::NAN } else { x.max(y) }),
        Min => zip2(args[0], args[1], |x, y| if x.is_nan() || y.is_nan() { f64::NAN } else { x.min(y) }),
        Cmp(c) => zip2(args[0], args[1], |x, y| if c.apply(x, y) { 1.0 } else { 0.0 }),
        Neg => map(args[0], |x| -x),
        Exp => map(args[0], f64::exp),
        Exp2 => map(args[0], f64::exp2),
        Log => map(args[0], f64::ln),
        Abs => map(args[0], f64::abs),
        Tanh => map(args[0], f64::tanh),
        Sigmoid => map(args[0], sigmoid),
        Sqrt => map(args[0], f64::sqrt),
        Clamp { lo, hi } => map(args[0], |x| if x.is_nan() { x } else { x.max(*lo).min(*hi) }),
        Where => {
            let ab = zip2(args[1], args[2], |_, _| 0.0);
            let (rows, cols) = (out_extent(args[0].rows, ab.rows), out_extent(args[0].cols, ab.cols));
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let pick = if bcast_index(args[0], r, c) != 0.0 { args[1] } else { args[2] };
                    out.data[r * cols + c] = bcast_index(pick, r, c);
                }
            }
            out
        }
        Broadcast(_) => {
            let (rows, cols) = out_shape;
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    out.data[r * cols + c] = bcast_index(args[0], r, c);
                }
            }
            out
        }
        ReduceSum => reduce_rows(args[0], 0.0, |acc, x| acc + x),
        ReduceAbssum => reduce_rows(args[0], 0.0, |acc, x| acc + x.abs()),
        ReduceMax => reduce_rows(args[0], f64::NEG_INFINITY, |acc, x| {
            if acc.is_nan() || x.is_nan() {
                f64::NAN
            } else if x > acc {
                x
            } else {
                acc
            }
        }),
        FirstMaxMask => {
            let a = args[0];
            let mut out = Matrix::zeros(a.rows, a.cols);
            for r in 0..a.rows {
                let row = a.row(r);
                let mut best = 0;
                for (c, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = c;
                    }
                }
                out.data[r * a.cols + best] = 1.0;
            }
            out
        }
        MatMul => args[0].matmul(args[1]),
        Transpose => args[0].transpose(),
        Row(i) => args[0].rows_slice(*i, *i + 1),
        ScatterRow { index, rows } => {
            let mut out = Matrix::zeros(rows.extent(), args[0].cols);
            out.write_rows(*index, args[0]);
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CmpOp;

    #[test]
    fn row_broadcast_add() {
        let a = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Matrix::from_vec(2, 1, vec![10., 20.]);
        let c = apply(&PrimitiveKind::Add, &[&a, &b], (2, 3));
        assert_eq!(c.data, vec![11., 12., 13., 24., 25., 26.]);
    }

    #[test]
    fn first_max_breaks_ties_left() {
        let a = Matrix::from_vec(1, 3, vec![3., 3., 1.]);
        let m = apply(&PrimitiveKind::FirstMaxMask, &[&a], (1, 3));
        assert_eq!(m.data, vec![1., 0., 0.]);
    }

    #[test]
    fn where_selects_without_propagating_unselected_nan() {
        let c = Matrix::from_vec(1, 2, vec![1., 0.]);
        let a = Matrix::from_vec(1, 2, vec![5., f64::NAN]);
        let z = Matrix::scalar(0.0);
        let out = apply(&PrimitiveKind::Where, &[&c, &a, &z], (1, 2));
        assert_eq!(out.data, vec![5., 0.]);
        let lt = apply(&PrimitiveKind::Cmp(CmpOp::Lt), &[&a, &z], (1, 2));
        assert_eq!(lt.data, vec![0., 0.]);
    }

    #[test]
    fn reduce_max_of_masked_row_is_neg_inf() {
        let a = Matrix::filled(1, 4, f64::NEG_INFINITY);
        let m = apply(&PrimitiveKind::ReduceMax, &[&a], (1, 1));
        assert_eq!(m.data, vec![f64::NEG_INFINITY]);
    }
}
