//! Tape operations: forward kernels and their vector-Jacobian products.
//!
//! Every differentiable op appears here exactly once, as an enum variant with
//! a `forward` kernel and a `backward` accumulation rule. The finite-difference
//! harness in `testing` checks each pair.

use super::gemm::gemm_acc;
use super::Node;

/// Sigmoid outputs are clamped into this band before any downstream log, so
/// `-ln(1 - d)` stays below `-ln(1e-6) ~= 13.8155`.
pub const SIGMOID_CLAMP: f64 = 1e-6;

/// Floor for `ln` inputs; the clamp policy for probabilities that reached
/// exactly zero.
pub const LN_FLOOR: f64 = 1e-300;

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub enum Op {
    /// Constant leaf (inputs, detached values). No gradient.
    Input,
    /// Parameter leaf; gradient is collected under the registered name.
    Param,
    Add(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    /// `[n,m] + [m]`, bias broadcast over rows.
    AddBiasRow { x: usize, bias: usize },
    /// Elementwise multiply by a constant vector (dropout masks, label masks).
    MulConstVec { x: usize, w: Vec<f64> },
    /// Elementwise add of a constant vector (attention masks, constant targets).
    AddConstVec { x: usize, w: Vec<f64> },
    /// `op(a) @ op(b)` with optional transposes; logical dims m,k,n.
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Row gather: `out[i,:] = src[ids[i],:]` (embedding lookup, position select).
    GatherRows { src: usize, ids: Vec<usize> },
    /// Element gather: `out[i] = src[pairs[i].0, pairs[i].1]`.
    Pick { src: usize, pairs: Vec<(usize, usize)> },
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    /// Sigmoid clamped to `[SIGMOID_CLAMP, 1-SIGMOID_CLAMP]`.
    SigmoidClamped(usize),
    Tanh(usize),
    Gelu(usize),
    Ln(usize),
    Exp(usize),
    PowConst(usize, f64),
    OneMinus(usize),
    Square(usize),
    /// Row-wise layer norm with learnable gain/bias over the last dim.
    LayerNorm { x: usize, gain: usize, bias: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize, len: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    /// Scalar dot with a constant weight vector: `sum_i w[i] * x[i]`.
    DotConst { x: usize, w: Vec<f64> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBiasRow { .. } => "add_bias_row",
            Op::MulConstVec { .. } => "mul_const_vec",
            Op::AddConstVec { .. } => "add_const_vec",
            Op::MatMul { .. } => "matmul",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(..) => "row_log_softmax",
            Op::SigmoidClamped(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Ln(..) => "ln",
            Op::Exp(..) => "exp",
            Op::PowConst(..) => "pow_const",
            Op::OneMinus(..) => "one_minus",
            Op::Square(..) => "square",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::DotConst { .. } => "dot_const",
        }
    }

    pub fn parents(&self) -> Vec<usize> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::SigmoidClamped(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Ln(a)
            | Op::Exp(a)
            | Op::PowConst(a, _)
            | Op::OneMinus(a)
            | Op::Square(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::AddBiasRow { x, bias } => vec![*x, *bias],
            Op::MulConstVec { x, .. }
            | Op::AddConstVec { x, .. }
            | Op::SliceCols { x, .. }
            | Op::DotConst { x, .. } => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::GatherRows { src, .. } | Op::Pick { src, .. } => vec![*src],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("row op on tensor of rank {}", shape.len()),
    }
}

pub fn gelu_value(x: f64) -> f64 {
    // tanh approximation
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Compute the output value and shape for `op` given existing nodes.
pub fn forward(op: &Op, nodes: &[Node]) -> (Vec<usize>, Vec<f64>) {
    let val = |id: usize| -> &Node { &nodes[id] };
    match op {
        Op::Input | Op::Param => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => {
            let (na, nb) = (val(*a), val(*b));
            assert_eq!(na.shape, nb.shape, "add: shape mismatch");
            let out = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
            (na.shape.clone(), out)
        }
        Op::Mul(a, b) => {
            let (na, nb) = (val(*a), val(*b));
            assert_eq!(na.shape, nb.shape, "mul: shape mismatch");
            let out = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect();
            (na.shape.clone(), out)
        }
        Op::Neg(a) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| -x).collect())
        }
        Op::Scale(a, c) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| x * c).collect())
        }
        Op::AddScalar(a, c) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| x + c).collect())
        }
        Op::AddBiasRow { x, bias } => {
            let (nx, nb) = (val(*x), val(*bias));
            let (r, c) = rows_cols(&nx.shape);
            assert_eq!(nb.value.len(), c, "add_bias_row: bias length mismatch");
            let mut out = nx.value.clone();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += nb.value[j];
                }
            }
            (nx.shape.clone(), out)
        }
        Op::MulConstVec { x, w } => {
            let nx = val(*x);
            assert_eq!(nx.value.len(), w.len(), "mul_const_vec: length mismatch");
            let out = nx.value.iter().zip(w).map(|(x, w)| x * w).collect();
            (nx.shape.clone(), out)
        }
        Op::AddConstVec { x, w } => {
            let nx = val(*x);
            assert_eq!(nx.value.len(), w.len(), "add_const_vec: length mismatch");
            let out = nx.value.iter().zip(w).map(|(x, w)| x + w).collect();
            (nx.shape.clone(), out)
        }
        Op::MatMul { a, b, ta, tb, m, k, n } => {
            let (na, nb) = (val(*a), val(*b));
            assert_eq!(na.value.len(), m * k, "matmul: lhs size mismatch");
            assert_eq!(nb.value.len(), k * n, "matmul: rhs size mismatch");
            let mut out = vec![0.0; m * n];
            gemm_acc(*m, *k, *n, 1.0, &na.value, *ta, &nb.value, *tb, &mut out);
            (vec![*m, *n], out)
        }
        Op::GatherRows { src, ids } => {
            let ns = val(*src);
            let (r, c) = rows_cols(&ns.shape);
            let mut out = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                assert!(id < r, "gather_rows: row {id} out of range {r}");
                out.extend_from_slice(&ns.value[id * c..(id + 1) * c]);
            }
            (vec![ids.len(), c], out)
        }
        Op::Pick { src, pairs } => {
            let ns = val(*src);
            let (r, c) = rows_cols(&ns.shape);
            let out = pairs
                .iter()
                .map(|&(i, j)| {
                    assert!(i < r && j < c, "pick: index ({i},{j}) out of range");
                    ns.value[i * c + j]
                })
                .collect();
            (vec![pairs.len()], out)
        }
        Op::RowSoftmax(a) => {
            let na = val(*a);
            let (r, c) = rows_cols(&na.shape);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &na.value[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    out[i * c + j] /= sum;
                }
            }
            (na.shape.clone(), out)
        }
        Op::RowLogSoftmax(a) => {
            let na = val(*a);
            let (r, c) = rows_cols(&na.shape);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &na.value[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                for j in 0..c {
                    out[i * c + j] = row[j] - lse;
                }
            }
            (na.shape.clone(), out)
        }
        Op::SigmoidClamped(a) => {
            let na = val(*a);
            let out = na
                .value
                .iter()
                .map(|&x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
                })
                .collect();
            (na.shape.clone(), out)
        }
        Op::Tanh(a) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| x.tanh()).collect())
        }
        Op::Gelu(a) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|&x| gelu_value(x)).collect())
        }
        Op::Ln(a) => {
            let na = val(*a);
            let out = na.value.iter().map(|&x| x.max(LN_FLOOR).ln()).collect();
            (na.shape.clone(), out)
        }
        Op::Exp(a) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| x.exp()).collect())
        }
        Op::PowConst(a, e) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| x.powf(*e)).collect())
        }
        Op::OneMinus(a) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| 1.0 - x).collect())
        }
        Op::Square(a) => {
            let na = val(*a);
            (na.shape.clone(), na.value.iter().map(|x| x * x).collect())
        }
        Op::LayerNorm { x, gain, bias } => {
            let (nx, ng, nb) = (val(*x), val(*gain), val(*bias));
            let (r, c) = rows_cols(&nx.shape);
            assert_eq!(ng.value.len(), c, "layer_norm: gain length mismatch");
            assert_eq!(nb.value.len(), c, "layer_norm: bias length mismatch");
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &nx.value[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mu) * rstd * ng.value[j] + nb.value[j];
                }
            }
            (nx.shape.clone(), out)
        }
        Op::ConcatCols(parts) => {
            assert!(!parts.is_empty());
            let r = rows_cols(&val(parts[0]).shape).0;
            let widths: Vec<usize> = parts
                .iter()
                .map(|&p| {
                    let (pr, pc) = rows_cols(&val(p).shape);
                    assert_eq!(pr, r, "concat_cols: row count mismatch");
                    pc
                })
                .collect();
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; r * total];
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = &val(p).value;
                for i in 0..r {
                    out[i * total + off..i * total + off + w]
                        .copy_from_slice(&v[i * w..(i + 1) * w]);
                }
                off += w;
            }
            (vec![r, total], out)
        }
        Op::SliceCols { x, start, len } => {
            let nx = val(*x);
            let (r, c) = rows_cols(&nx.shape);
            assert!(start + len <= c, "slice_cols: out of range");
            let mut out = vec![0.0; r * len];
            for i in 0..r {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&nx.value[i * c + start..i * c + start + len]);
            }
            (vec![r, *len], out)
        }
        Op::Reshape(a) => {
            let na = val(*a);
            (vec![], na.value.clone()) // shape filled by the caller
        }
        Op::Sum(a) => (vec![1], vec![val(*a).value.iter().sum()]),
        Op::Mean(a) => {
            let na = val(*a);
            (vec![1], vec![na.value.iter().sum::<f64>() / na.value.len() as f64])
        }
        Op::DotConst { x, w } => {
            let nx = val(*x);
            assert_eq!(nx.value.len(), w.len(), "dot_const: length mismatch");
            (vec![1], vec![nx.value.iter().zip(w).map(|(x, w)| x * w).sum()])
        }
    }
}

/// Accumulate the vector-Jacobian product of `op` into the parents' grads.
///
/// `grad` is the adjoint of the op's output; `get` fetches a parent's grad
/// buffer (allocated zero on first touch).
pub fn backward(
    op: &Op,
    nodes: &[Node],
    grad: &[f64],
    mut acc: impl FnMut(usize) -> *mut Vec<f64>,
) {
    // Helper: the closure returns raw pointers so two different parents can
    // be borrowed in one arm; parents are distinct slots in one Vec.
    let mut g = |id: usize, f: &mut dyn FnMut(&mut Vec<f64>)| {
        let p = acc(id);
        unsafe { f(&mut *p) }
    };
    let node_val = |id: usize| -> &[f64] { &nodes[id].value };
    let needs = |id: usize| nodes[id].requires_grad;

    match op {
        Op::Input | Op::Param => {}
        Op::Add(a, b) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for (ga, &gz) in ga.iter_mut().zip(grad) {
                        *ga += gz;
                    }
                });
            }
            if needs(*b) {
                g(*b, &mut |gb| {
                    for (gb, &gz) in gb.iter_mut().zip(grad) {
                        *gb += gz;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bv = node_val(*b);
                g(*a, &mut |ga| {
                    for ((ga, &gz), &b) in ga.iter_mut().zip(grad).zip(bv) {
                        *ga += gz * b;
                    }
                });
            }
            if needs(*b) {
                let av = node_val(*a);
                g(*b, &mut |gb| {
                    for ((gb, &gz), &a) in gb.iter_mut().zip(grad).zip(av) {
                        *gb += gz * a;
                    }
                });
            }
        }
        Op::Neg(a) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for (ga, &gz) in ga.iter_mut().zip(grad) {
                        *ga -= gz;
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for (ga, &gz) in ga.iter_mut().zip(grad) {
                        *ga += gz * c;
                    }
                });
            }
        }
        Op::AddScalar(a, _) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for (ga, &gz) in ga.iter_mut().zip(grad) {
                        *ga += gz;
                    }
                });
            }
        }
        Op::AddBiasRow { x, bias } => {
            let c = node_val(*bias).len();
            if needs(*x) {
                g(*x, &mut |gx| {
                    for (gx, &gz) in gx.iter_mut().zip(grad) {
                        *gx += gz;
                    }
                });
            }
            if needs(*bias) {
                g(*bias, &mut |gb| {
                    for (idx, &gz) in grad.iter().enumerate() {
                        gb[idx % c] += gz;
                    }
                });
            }
        }
        Op::MulConstVec { x, w } => {
            if needs(*x) {
                g(*x, &mut |gx| {
                    for ((gx, &gz), &w) in gx.iter_mut().zip(grad).zip(w) {
                        *gx += gz * w;
                    }
                });
            }
        }
        Op::AddConstVec { x, .. } => {
            if needs(*x) {
                g(*x, &mut |gx| {
                    for (gx, &gz) in gx.iter_mut().zip(grad) {
                        *gx += gz;
                    }
                });
            }
        }
        Op::MatMul { a, b, ta, tb, m, k, n } => {
            let av = node_val(*a);
            let bv = node_val(*b);
            if needs(*a) {
                g(*a, &mut |ga| {
                    if !*ta {
                        // dA = g @ op(B)^T
                        gemm_acc(*m, *n, *k, 1.0, grad, false, bv, !*tb, ga);
                    } else {
                        // physical A is [k,m]; dA = op(B) @ g^T
                        gemm_acc(*k, *n, *m, 1.0, bv, *tb, grad, true, ga);
                    }
                });
            }
            if needs(*b) {
                g(*b, &mut |gb| {
                    if !*tb {
                        // dB = op(A)^T @ g
                        gemm_acc(*k, *m, *n, 1.0, av, !*ta, grad, false, gb);
                    } else {
                        // physical B is [n,k]; dB = g^T @ op(A)
                        gemm_acc(*n, *m, *k, 1.0, grad, true, av, *ta, gb);
                    }
                });
            }
        }
        Op::GatherRows { src, ids } => {
            if needs(*src) {
                let c = nodes[*src].shape.last().copied().unwrap_or(1);
                g(*src, &mut |gs| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gs[id * c + j] += grad[i * c + j];
                        }
                    }
                });
            }
        }
        Op::Pick { src, pairs } => {
            if needs(*src) {
                let c = nodes[*src].shape.last().copied().unwrap_or(1);
                g(*src, &mut |gs| {
                    for (idx, &(i, j)) in pairs.iter().enumerate() {
                        gs[i * c + j] += grad[idx];
                    }
                });
            }
        }
        // These need the op's own forward output; the dispatcher routes them
        // to `backward_with_output` before ever reaching here.
        Op::RowSoftmax(_)
        | Op::RowLogSoftmax(_)
        | Op::SigmoidClamped(_)
        | Op::Tanh(_)
        | Op::Exp(_)
        | Op::LayerNorm { .. } => {
            unreachable!("op handled by backward_with_output");
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let xv = node_val(*a);
                g(*a, &mut |ga| {
                    for ((ga, &gz), &x) in ga.iter_mut().zip(grad).zip(xv) {
                        *ga += gz * gelu_grad(x);
                    }
                });
            }
        }
        Op::Ln(a) => {
            if needs(*a) {
                let xv = node_val(*a);
                g(*a, &mut |ga| {
                    for ((ga, &gz), &x) in ga.iter_mut().zip(grad).zip(xv) {
                        *ga += gz / x.max(LN_FLOOR);
                    }
                });
            }
        }
        Op::PowConst(a, e) => {
            if needs(*a) {
                let xv = node_val(*a);
                g(*a, &mut |ga| {
                    for ((ga, &gz), &x) in ga.iter_mut().zip(grad).zip(xv) {
                        let d = if x == 0.0 && *e > 1.0 {
                            0.0
                        } else {
                            e * x.powf(e - 1.0)
                        };
                        *ga += gz * d;
                    }
                });
            }
        }
        Op::OneMinus(a) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for (ga, &gz) in ga.iter_mut().zip(grad) {
                        *ga -= gz;
                    }
                });
            }
        }
        Op::Square(a) => {
            if needs(*a) {
                let xv = node_val(*a);
                g(*a, &mut |ga| {
                    for ((ga, &gz), &x) in ga.iter_mut().zip(grad).zip(xv) {
                        *ga += gz * 2.0 * x;
                    }
                });
            }
        }
        Op::ConcatCols(parts) => {
            let widths: Vec<usize> = parts
                .iter()
                .map(|&p| nodes[p].shape.last().copied().unwrap_or(1))
                .collect();
            let total: usize = widths.iter().sum();
            let r = grad.len() / total;
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if needs(p) {
                    g(p, &mut |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += grad[i * total + off + j];
                            }
                        }
                    });
                }
                off += w;
            }
        }
        Op::SliceCols { x, start, len } => {
            if needs(*x) {
                let c = nodes[*x].shape.last().copied().unwrap_or(1);
                let r = grad.len() / len;
                g(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..*len {
                            gx[i * c + start + j] += grad[i * len + j];
                        }
                    }
                });
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for (ga, &gz) in ga.iter_mut().zip(grad) {
                        *ga += gz;
                    }
                });
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                let gz = grad[0];
                g(*a, &mut |ga| {
                    for ga in ga.iter_mut() {
                        *ga += gz;
                    }
                });
            }
        }
        Op::Mean(a) => {
            if needs(*a) {
                let n = node_val(*a).len() as f64;
                let gz = grad[0] / n;
                g(*a, &mut |ga| {
                    for ga in ga.iter_mut() {
                        *ga += gz;
                    }
                });
            }
        }
        Op::DotConst { x, w } => {
            if needs(*x) {
                let gz = grad[0];
                g(*x, &mut |gx| {
                    for (gx, &w) in gx.iter_mut().zip(w) {
                        *gx += gz * w;
                    }
                });
            }
        }
    }
}

/// Backward rules that need the op's own forward output (`out`).
pub fn backward_with_output(
    op: &Op,
    nodes: &[Node],
    out: &[f64],
    grad: &[f64],
    mut acc: impl FnMut(usize) -> *mut Vec<f64>,
) -> bool {
    let mut g = |id: usize, f: &mut dyn FnMut(&mut Vec<f64>)| {
        let p = acc(id);
        unsafe { f(&mut *p) }
    };
    let needs = |id: usize| nodes[id].requires_grad;

    match op {
        Op::RowSoftmax(a) => {
            if needs(*a) {
                let (r, c) = rows_cols(&nodes[*a].shape);
                g(*a, &mut |ga| {
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gz = &grad[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gz).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            ga[i * c + j] += y[j] * (gz[j] - dot);
                        }
                    }
                });
            }
            true
        }
        Op::RowLogSoftmax(a) => {
            if needs(*a) {
                let (r, c) = rows_cols(&nodes[*a].shape);
                g(*a, &mut |ga| {
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gz = &grad[i * c..(i + 1) * c];
                        let gsum: f64 = gz.iter().sum();
                        for j in 0..c {
                            ga[i * c + j] += gz[j] - y[j].exp() * gsum;
                        }
                    }
                });
            }
            true
        }
        Op::SigmoidClamped(a) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for ((ga, &gz), &s) in ga.iter_mut().zip(grad).zip(out) {
                        *ga += gz * s * (1.0 - s);
                    }
                });
            }
            true
        }
        Op::Tanh(a) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for ((ga, &gz), &t) in ga.iter_mut().zip(grad).zip(out) {
                        *ga += gz * (1.0 - t * t);
                    }
                });
            }
            true
        }
        Op::Exp(a) => {
            if needs(*a) {
                g(*a, &mut |ga| {
                    for ((ga, &gz), &y) in ga.iter_mut().zip(grad).zip(out) {
                        *ga += gz * y;
                    }
                });
            }
            true
        }
        Op::LayerNorm { x, gain, bias } => {
            let (r, c) = rows_cols(&nodes[*x].shape);
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            // Recompute per-row stats; cheaper than persisting them in the op.
            let mut mus = vec![0.0; r];
            let mut rstds = vec![0.0; r];
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
                mus[i] = mu;
                rstds[i] = 1.0 / (var + LN_EPS).sqrt();
            }
            if needs(*x) {
                g(*x, &mut |gx| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let gz = &grad[i * c..(i + 1) * c];
                        let (mu, rstd) = (mus[i], rstds[i]);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mu) * rstd;
                            let dxhat = gz[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for j in 0..c {
                            let xhat = (row[j] - mu) * rstd;
                            let dxhat = gz[j] * gv[j];
                            gx[i * c + j] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                });
            }
            if needs(*gain) {
                g(*gain, &mut |gg| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        for j in 0..c {
                            let xhat = (row[j] - mus[i]) * rstds[i];
                            gg[j] += grad[i * c + j] * xhat;
                        }
                    }
                });
            }
            if needs(*bias) {
                g(*bias, &mut |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += grad[i * c + j];
                        }
                    }
                });
            }
            true
        }
        _ => false,
    }
}
