//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! A `Graph` is a single-threaded append-only tape; a `Tensor` is a handle to
//! one node. Parameters live outside the tape in a `ParamSet` and are bound
//! per step as leaves, so gradient accumulation across shared uses (tied
//! embeddings) happens by name. One step = build graph, read values,
//! `backward`, apply optimizer, drop graph.
//!
//! Checked mode scans every op output (and every adjoint) for non-finite
//! values and reports the first offending op instead of letting NaNs travel.

mod adam;
mod gemm;
mod op;
pub mod schedule;

use std::cell::RefCell;
use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::RngState;

pub use adam::AdamState;
pub use op::{gelu_value, Op, LN_EPS, SIGMOID_CLAMP};

/// Numeric width for op outputs. `F32` keeps f64 storage but rounds every op
/// result through f32, emulating a single-precision engine; oracles stay in
/// `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
pub struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

struct GraphInner {
    nodes: Vec<Node>,
    precision: Precision,
    checked: bool,
    fault: Option<String>,
    params: IndexMap<String, usize>,
}

/// Reverse-mode gradient tape. Cheap to clone (shared handle), confined to
/// one thread.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Precision::F64, true)
    }
}

impl Graph {
    pub fn new(precision: Precision, checked: bool) -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                precision,
                checked,
                fault: None,
                params: IndexMap::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First numeric fault observed so far, if any.
    pub fn fault(&self) -> Option<String> {
        self.inner.borrow().fault.clone()
    }

    pub fn ensure_healthy(&self) -> Result<()> {
        match self.fault() {
            Some(f) => Err(Error::numeric("graph", f)),
            None => Ok(()),
        }
    }

    fn round(&self, precision: Precision, values: &mut [f64]) {
        if precision == Precision::F32 {
            for v in values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn push_leaf(&self, op: Op, shape: Vec<usize>, mut value: Vec<f64>, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            value.len(),
            "leaf value count {} does not match shape {:?}",
            value.len(),
            shape
        );
        let mut inner = self.inner.borrow_mut();
        self.round(inner.precision, &mut value);
        if inner.checked && inner.fault.is_none() {
            if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
                inner.fault = Some(format!(
                    "non-finite value at flat index {pos} in `{}` leaf",
                    op.name()
                ));
            }
        }
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn push_op(&self, op: Op) -> Tensor {
        self.push_op_shaped(op, None)
    }

    fn push_op_shaped(&self, op: Op, shape_override: Option<Vec<usize>>) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let (shape, mut value) = op::forward(&op, &inner.nodes);
        let shape = shape_override.unwrap_or(shape);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "op `{}` produced mismatched shape", op.name());
        self.round(inner.precision, &mut value);
        if inner.checked && inner.fault.is_none() {
            if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
                inner.fault = Some(format!(
                    "non-finite value at flat index {pos} in op `{}`",
                    op.name()
                ));
            }
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|&p| inner.nodes[p].requires_grad);
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&self, value: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.push_leaf(Op::Input, shape, value, false)
    }

    pub fn input_1d(&self, value: Vec<f64>) -> Tensor {
        let n = value.len();
        self.input(value, vec![n])
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.input(vec![v], vec![1])
    }

    /// Bind a parameter as a gradient leaf. Repeated binds of the same name
    /// return the same node, which is what makes weight tying a single
    /// accumulation target.
    pub fn param(&self, params: &ParamSet, name: &str) -> Tensor {
        if let Some(&id) = self.inner.borrow().params.get(name) {
            return Tensor {
                graph: self.clone(),
                id,
            };
        }
        let p = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let t = self.push_leaf(Op::Param, p.shape.clone(), p.data.clone(), true);
        self.inner.borrow_mut().params.insert(name.to_string(), t.id);
        t
    }

    pub fn concat_cols(&self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        for p in parts {
            assert!(Rc::ptr_eq(&self.inner, &p.graph.inner), "cross-graph concat");
        }
        self.push_op(Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Run reverse-mode accumulation from a scalar loss. Every bound
    /// parameter gets an entry; parameters unreachable from the loss get
    /// zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.graph.inner),
            "loss from another graph"
        );
        self.ensure_healthy()?;
        let inner = self.inner.borrow();
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gz) = std::mem::take(&mut grads[id]) else {
                continue;
            };
            if inner.checked {
                if let Some(pos) = gz.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        node.op.name(),
                        format!("non-finite gradient at flat index {pos} (node {id})"),
                    ));
                }
            }
            {
                let grads_ptr = grads.as_mut_ptr();
                let mut acc = |pid: usize| -> *mut Vec<f64> {
                    debug_assert!(pid < id, "tape parent must precede child");
                    // Distinct slots: parents all have pid < id and the loop
                    // only hands out one pointer at a time.
                    unsafe {
                        let slot = &mut *grads_ptr.add(pid);
                        if slot.is_none() {
                            *slot = Some(vec![0.0; inner.nodes[pid].value.len()]);
                        }
                        slot.as_mut().unwrap() as *mut Vec<f64>
                    }
                };
                if !op::backward_with_output(&node.op, &inner.nodes, &node.value, &gz, &mut acc) {
                    op::backward(&node.op, &inner.nodes, &gz, &mut acc);
                }
            }
            if matches!(node.op, Op::Param) {
                grads[id] = Some(gz);
            }
        }

        let mut out = IndexMap::new();
        for (name, &nid) in &inner.params {
            let g = std::mem::take(&mut grads[nid])
                .unwrap_or_else(|| vec![0.0; inner.nodes[nid].value.len()]);
            out.insert(name.clone(), g);
        }
        Ok(Gradients { map: out })
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.graph.inner.borrow().nodes[self.id].value[idx]
    }

    pub fn scalar_value(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.id].value;
        assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Re-enter the tape as a constant: same values, no gradient path.
    pub fn detach(&self) -> Tensor {
        let (v, s) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.clone(), n.shape.clone())
        };
        self.graph.input(v, s)
    }

    fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors from different graphs"
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        self.graph.push_op(Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        self.graph.push_op(Op::Mul(self.id, other.id))
    }

    pub fn neg(&self) -> Tensor {
        self.graph.push_op(Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.graph.push_op(Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.graph.push_op(Op::AddScalar(self.id, c))
    }

    pub fn add_bias_row(&self, bias: &Tensor) -> Tensor {
        self.same_graph(bias);
        self.graph.push_op(Op::AddBiasRow {
            x: self.id,
            bias: bias.id,
        })
    }

    pub fn mul_const_vec(&self, w: &[f64]) -> Tensor {
        self.graph.push_op(Op::MulConstVec {
            x: self.id,
            w: w.to_vec(),
        })
    }

    pub fn add_const_vec(&self, w: &[f64]) -> Tensor {
        self.graph.push_op(Op::AddConstVec {
            x: self.id,
            w: w.to_vec(),
        })
    }

    fn matmul_dims(&self, other: &Tensor, ta: bool, tb: bool) -> (usize, usize, usize) {
        let sa = self.shape();
        let sb = other.shape();
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d");
        let (m, k1) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k1, k2, "matmul inner dims {k1} vs {k2}");
        (m, k1, n)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (m, k, n) = self.matmul_dims(other, false, false);
        self.graph.push_op(Op::MatMul {
            a: self.id,
            b: other.id,
            ta: false,
            tb: false,
            m,
            k,
            n,
        })
    }

    /// `self @ other^T`
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (m, k, n) = self.matmul_dims(other, false, true);
        self.graph.push_op(Op::MatMul {
            a: self.id,
            b: other.id,
            ta: false,
            tb: true,
            m,
            k,
            n,
        })
    }

    /// `self^T @ other`
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (m, k, n) = self.matmul_dims(other, true, false);
        self.graph.push_op(Op::MatMul {
            a: self.id,
            b: other.id,
            ta: true,
            tb: false,
            m,
            k,
            n,
        })
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        self.graph.push_op(Op::GatherRows {
            src: self.id,
            ids: ids.to_vec(),
        })
    }

    pub fn pick(&self, pairs: &[(usize, usize)]) -> Tensor {
        self.graph.push_op(Op::Pick {
            src: self.id,
            pairs: pairs.to_vec(),
        })
    }

    pub fn row_softmax(&self) -> Tensor {
        self.graph.push_op(Op::RowSoftmax(self.id))
    }

    pub fn row_log_softmax(&self) -> Tensor {
        self.graph.push_op(Op::RowLogSoftmax(self.id))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.graph.push_op(Op::SigmoidClamped(self.id))
    }

    pub fn tanh_(&self) -> Tensor {
        self.graph.push_op(Op::Tanh(self.id))
    }

    pub fn gelu(&self) -> Tensor {
        self.graph.push_op(Op::Gelu(self.id))
    }

    pub fn ln(&self) -> Tensor {
        self.graph.push_op(Op::Ln(self.id))
    }

    pub fn exp(&self) -> Tensor {
        self.graph.push_op(Op::Exp(self.id))
    }

    pub fn pow_const(&self, e: f64) -> Tensor {
        self.graph.push_op(Op::PowConst(self.id, e))
    }

    pub fn one_minus(&self) -> Tensor {
        self.graph.push_op(Op::OneMinus(self.id))
    }

    pub fn square(&self) -> Tensor {
        self.graph.push_op(Op::Square(self.id))
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Tensor {
        self.same_graph(gain);
        self.same_graph(bias);
        self.graph.push_op(Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        self.graph.push_op(Op::SliceCols {
            x: self.id,
            start,
            len,
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.value_len(), "reshape must preserve element count");
        self.graph.push_op_shaped(Op::Reshape(self.id), Some(shape))
    }

    fn value_len(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.len()
    }

    pub fn sum(&self) -> Tensor {
        self.graph.push_op(Op::Sum(self.id))
    }

    pub fn mean(&self) -> Tensor {
        self.graph.push_op(Op::Mean(self.id))
    }

    pub fn dot_const(&self, w: &[f64]) -> Tensor {
        self.graph.push_op(Op::DotConst {
            x: self.id,
            w: w.to_vec(),
        })
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. Identity when `p == 0`. The mask comes from the caller's
    /// dropout RNG stream, so the draw sequence is a pure function of the
    /// stream key.
    pub fn dropout(&self, p: f64, rng: &mut RngState) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value_len())
            .map(|_| if rng.uniform() < p { 0.0 } else { 1.0 / keep })
            .collect();
        self.mul_const_vec(&mask)
    }
}

/// One named parameter: shape plus row-major f64 payload.
#[derive(Debug, Clone, PartialEq)]
pub struct PTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl PTensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        PTensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        PTensor {
            shape,
            data: vec![v; n],
        }
    }
}

/// Ordered, named parameter storage. Insertion order is the canonical order
/// for optimizer sweeps and checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: IndexMap<String, PTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: PTensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), p).is_none(),
            "duplicate parameter `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> Option<&PTensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut PTensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PTensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut PTensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }
}

/// Per-parameter gradients keyed by name, in `ParamSet` order.
#[derive(Debug, Clone)]
pub struct Gradients {
    map: IndexMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            map: params
                .iter()
                .map(|(n, p)| (n.clone(), vec![0.0; p.data.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    /// Merge another gradient map by elementwise addition.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(w ⊙ w), w=[1,2] → grad(w)=[2,4]
        let mut params = ParamSet::new();
        params.insert(
            "w",
            PTensor {
                shape: vec![2],
                data: vec![1.0, 2.0],
            },
        );
        let g = Graph::default();
        let w = g.param(&params, "w");
        let loss = w.mul(&w).sum();
        assert_eq!(loss.scalar_value(), 5.0);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut params = ParamSet::new();
        params.insert("w", PTensor::filled(vec![3], 1.5));
        let g = Graph::default();
        let _w = g.param(&params, "w"); // bound but unused by the loss
        let loss = g.scalar(4.0);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_violation() {
        let g = Graph::default();
        let x = g.input_1d(vec![1.0, 2.0]);
        let err = g.backward(&x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn tied_parameter_accumulates_from_both_uses() {
        let mut params = ParamSet::new();
        params.insert(
            "e",
            PTensor {
                shape: vec![2, 2],
                data: vec![1.0, 0.0, 0.0, 1.0],
            },
        );
        let g = Graph::default();
        let e1 = g.param(&params, "e");
        let e2 = g.param(&params, "e");
        assert_eq!(e1.id, e2.id, "same name must alias one leaf");
        let loss = e1.mul(&e2).sum(); // sum(e^2), d = 2e
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get("e").unwrap(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn checked_mode_flags_nan_inputs() {
        let g = Graph::default();
        let _x = g.input_1d(vec![1.0, f64::NAN]);
        assert!(g.fault().is_some());
        let loss = g.scalar(1.0);
        assert!(g.backward(&loss).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::default();
        let x = g.input(vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0], vec![2, 3]);
        let y = x.row_softmax().value();
        for row in y.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn sigmoid_stays_inside_open_interval() {
        let g = Graph::default();
        let x = g.input_1d(vec![-1e9, -5.0, 0.0, 5.0, 1e9]);
        for v in x.sigmoid().value() {
            assert!(v >= SIGMOID_CLAMP && v <= 1.0 - SIGMOID_CLAMP, "{v}");
        }
    }

    #[test]
    fn f32_precision_rounds_values() {
        let g = Graph::new(Precision::F32, true);
        let x = g.input_1d(vec![0.1]);
        assert_eq!(x.value()[0], 0.1f32 as f64);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let g = Graph::default();
        let x = g.input_1d(vec![1.0, 2.0, 3.0]);
        let mut rng = RngState::new(1, crate::rng::Stream::Dropout);
        let y = x.dropout(0.0, &mut rng);
        assert_eq!(y.value(), vec![1.0, 2.0, 3.0]);
    }
}
