//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value; nodes are
//! therefore topologically ordered by construction. A tape is rebuilt for
//! every batch and may be differentiated more than once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::functional as f;
use crate::quant::{self, Bits};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Pact {
        x: Var,
        alpha: Var,
    },
    WeightQuant(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    KlLogits {
        p: Var,
        q: Var,
    },
    SelectSum {
        logits: Var,
        labels: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Relu(a) | Op::WeightQuant(a) => {
                vec![a]
            }
            Op::Softmax(a) => vec![a],
            Op::Pact { x, alpha } => vec![x, alpha],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::MaxPool { x, .. } => vec![x],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::CrossEntropy { logits, .. } | Op::SelectSum { logits, .. } => vec![logits],
            Op::KlLogits { p, q } => vec![p, q],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph with saved forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss,
    /// does not require gradients, or is not a leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Non-finite data is rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Backward(format!(
                "node {} was not recorded on this tape",
                v.0
            )))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.record(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).scale(c);
        Ok(self.record(out, Op::Scale(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = f::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.record(out, Op::Sum(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape.to_vec())?;
        Ok(self.record(out, Op::Reshape(a)))
    }

    /// Collapses all dimensions after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(a, &[n, rest])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v.max(0.0));
        Ok(self.record(out, Op::Relu(a)))
    }

    /// PACT clip to `[0, α]` followed, if `bits` is set, by k-bit
    /// quantization. `alpha` must be a one-element node.
    pub fn pact(&mut self, x: Var, alpha: Var, bits: Option<Bits>) -> Result<Var> {
        self.check(x)?;
        self.check(alpha)?;
        let a = self.value(alpha).item().ok_or_else(|| {
            Error::shape(
                "pact",
                format!("α must be scalar, got {:?}", self.value(alpha).shape()),
            )
        })?;
        let clipped = quant::pact_forward(self.value(x), a)?;
        let out = match bits {
            Some(k) => quant::pact_quantize(&clipped, a, k)?,
            None => clipped,
        };
        Ok(self.record(out, Op::Pact { x, alpha }))
    }

    /// Symmetric per-tensor weight fake quantization; identity backward.
    pub fn weight_quant(&mut self, w: Var, bits: Bits) -> Result<Var> {
        self.check(w)?;
        let out = quant::quantize_weights_qat(self.value(w), bits);
        Ok(self.record(out, Op::WeightQuant(w)))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let out = f::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.record(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        self.check(x)?;
        let (out, argmax) = f::maxpool2d_forward(self.value(x), window)?;
        Ok(self.record(out, Op::MaxPool { x, argmax }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let out = f::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.record(out, Op::Dense { x, w, b }))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.check(logits)?;
        let out = f::softmax(self.value(logits))?;
        Ok(self.record(out, Op::Softmax(logits)))
    }

    /// Mean cross-entropy of `logits` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let v = f::cross_entropy(self.value(logits), labels)?;
        Ok(self.record(
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean KL(softmax(p) ∥ softmax(q)) computed from logits.
    pub fn kl_logits(&mut self, p: Var, q: Var) -> Result<Var> {
        self.check(p)?;
        self.check(q)?;
        let v = f::kl_from_logits(self.value(p), self.value(q))?;
        Ok(self.record(Tensor::scalar(v), Op::KlLogits { p, q }))
    }

    /// Sum over rows of the logit at each row's label.
    pub fn select_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let v = f::select_sum(self.value(logits), labels)?;
        Ok(self.record(
            Tensor::scalar(v),
            Op::SelectSum {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of `loss` with respect to every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_impl(loss, None)
    }

    /// Like [`Tape::backward`] but only propagates along paths that reach
    /// one of `targets`, skipping work for everything else.
    pub fn backward_wrt(&self, loss: Var, targets: &[Var]) -> Result<Gradients> {
        for &t in targets {
            self.check(t)?;
        }
        self.backward_impl(loss, Some(targets))
    }

    fn backward_impl(&self, loss: Var, targets: Option<&[Var]>) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let end = loss.0 + 1;
        let mut needed: Vec<bool> = self.nodes[..end].iter().map(|n| n.requires_grad).collect();
        if let Some(targets) = targets {
            let mut reach = vec![false; end];
            for &t in targets {
                if t.0 < end {
                    reach[t.0] = true;
                }
            }
            for i in 0..end {
                if !reach[i] && self.nodes[i].op.inputs().iter().any(|v| reach[v.0]) {
                    reach[i] = true;
                }
            }
            for (n, r) in needed.iter_mut().zip(reach) {
                *n &= r;
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..end).map(|_| None).collect();
        if !needed[loss.0] {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..end).rev() {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.vjp(node, &g, &needed)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product of one node: upstream gradient `g` mapped to
    /// contributions for each input that needs one.
    fn vjp(&self, node: &Node, g: &Tensor, needed: &[bool]) -> Result<Vec<(Var, Tensor)>> {
        let need = |v: Var| needed[v.0];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let prod = |t: &Tensor| {
                    let d = g.data().iter().zip(t.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape(), d)
                };
                if need(*a) {
                    out.push((*a, prod(val(*b))?));
                }
                if need(*b) {
                    out.push((*b, prod(val(*a))?));
                }
            }
            Op::Scale(a, c) => {
                if need(*a) {
                    out.push((*a, g.scale(*c)));
                }
            }
            Op::MatMul(a, b) => {
                let (da, db) = f::matmul_backward(val(*a), val(*b), g, (need(*a), need(*b)));
                out.extend(da.map(|t| (*a, t)));
                out.extend(db.map(|t| (*b, t)));
            }
            Op::Sum(a) => {
                if need(*a) {
                    out.push((*a, Tensor::full(val(*a).shape(), g.data()[0])));
                }
            }
            Op::Reshape(a) => {
                if need(*a) {
                    out.push((*a, g.reshape(val(*a).shape().to_vec())?));
                }
            }
            Op::Relu(a) => {
                if need(*a) {
                    let d = val(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                        .collect();
                    out.push((*a, Tensor::new(g.shape(), d)?));
                }
            }
            Op::Pact { x, alpha } => {
                let a = val(*alpha).data()[0];
                let (dx, da) = quant::pact_backward(val(*x), a, g)?;
                if need(*x) {
                    out.push((*x, dx));
                }
                if need(*alpha) {
                    out.push((*alpha, Tensor::new(val(*alpha).shape(), vec![da])?));
                }
            }
            Op::WeightQuant(w) => {
                if need(*w) {
                    out.push((*w, g.clone()));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let want = (need(*x), need(*w), b.is_some_and(&need));
                let grads = f::conv2d_backward(val(*x), val(*w), g, *stride, *pad, want)?;
                out.extend(grads.input.map(|t| (*x, t)));
                out.extend(grads.kernel.map(|t| (*w, t)));
                if let (Some(b), Some(db)) = (b, grads.bias) {
                    out.push((*b, db));
                }
            }
            Op::MaxPool { x, argmax } => {
                if need(*x) {
                    out.push((*x, f::maxpool2d_backward(val(*x).shape(), argmax, g)?));
                }
            }
            Op::Dense { x, w, b } => {
                let (dx, dw) = f::matmul_backward(val(*x), val(*w), g, (need(*x), need(*w)));
                out.extend(dx.map(|t| (*x, t)));
                out.extend(dw.map(|t| (*w, t)));
                if need(*b) {
                    let cols = g.shape()[1];
                    let mut db = vec![0.0f32; cols];
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    out.push((*b, Tensor::from_vec(db)));
                }
            }
            Op::Softmax(a) => {
                if need(*a) {
                    out.push((*a, f::softmax_backward(&node.value, g)));
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if need(*logits) {
                    out.push((
                        *logits,
                        f::cross_entropy_backward(val(*logits), labels, g.data()[0]),
                    ));
                }
            }
            Op::KlLogits { p, q } => {
                let (dp, dq) = f::kl_from_logits_backward(val(*p), val(*q), g.data()[0]);
                if need(*p) {
                    out.push((*p, dp));
                }
                if need(*q) {
                    out.push((*q, dq));
                }
            }
            Op::SelectSum { logits, labels } => {
                if need(*logits) {
                    let lv = val(*logits);
                    let c = lv.shape()[1];
                    let mut d = vec![0.0f32; lv.len()];
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] = g.data()[0];
                    }
                    out.push((*logits, Tensor::new(lv.shape(), d)?));
                }
            }
        }
        Ok(out)
    }
}

/// Named inputs bound to leaves of a tape.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("input {name:?} is not bound")))
    }
}

/// Records named inputs as gradient-tracking leaves, runs `graph` on them
/// and returns the values of the named outputs. The tape keeps every
/// intermediate so that [`Tape::backward`] can be called afterwards.
pub fn evaluate<G>(
    tape: &mut Tape,
    inputs: &BTreeMap<String, Tensor>,
    graph: G,
) -> Result<BTreeMap<String, Tensor>>
where
    G: FnOnce(&mut Tape, &Bindings) -> Result<BTreeMap<String, Var>>,
{
    let mut bindings = Bindings::default();
    for (name, t) in inputs {
        let v = tape.leaf(t.clone(), true)?;
        bindings.vars.insert(name.clone(), v);
    }
    let outputs = graph(tape, &bindings)?;
    Ok(outputs
        .into_iter()
        .map(|(k, v)| (k, tape.value(v).clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(d: &[f32]) -> Tensor {
        Tensor::from_vec(d.to_vec())
    }

    fn inputs(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn evaluate_examples() {
        let mut tape = Tape::new();
        let out = evaluate(
            &mut tape,
            &inputs(&[("x", vec1(&[1.0, 2.0, 3.0]))]),
            |_, b| Ok(BTreeMap::from([("y".to_string(), b.get("x")?)])),
        )
        .unwrap();
        assert_eq!(out["y"].data(), &[1.0, 2.0, 3.0]);

        let mut tape = Tape::new();
        let out = evaluate(&mut tape, &inputs(&[("x", vec1(&[1.0, 2.0]))]), |t, b| {
            let x = b.get("x")?;
            Ok(BTreeMap::from([("y".to_string(), t.add(x, x)?)]))
        })
        .unwrap();
        assert_eq!(out["y"].data(), &[2.0, 4.0]);

        let mut tape = Tape::new();
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let col = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        let out = evaluate(
            &mut tape,
            &inputs(&[("a", eye), ("b", col.clone())]),
            |t, b| {
                Ok(BTreeMap::from([(
                    "y".to_string(),
                    t.matmul(b.get("a")?, b.get("b")?)?,
                )]))
            },
        )
        .unwrap();
        assert_eq!(out["y"], col);
    }

    #[test]
    fn evaluate_errors() {
        let mut tape = Tape::new();
        let err = evaluate(
            &mut tape,
            &inputs(&[("a", vec1(&[1.0, 2.0])), ("b", vec1(&[1.0, 2.0, 3.0]))]),
            |t, b| {
                Ok(BTreeMap::from([(
                    "y".to_string(),
                    t.add(b.get("a")?, b.get("b")?)?,
                )]))
            },
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"),
            "{msg}"
        );

        let mut tape = Tape::new();
        let err = evaluate(&mut tape, &inputs(&[("x", vec1(&[f32::NAN]))]), |_, b| {
            Ok(BTreeMap::from([("y".to_string(), b.get("x")?)]))
        });
        assert!(matches!(err, Err(Error::NonFinite { .. })));

        let mut tape = Tape::new();
        let err = evaluate(&mut tape, &BTreeMap::new(), |_, b| {
            Ok(BTreeMap::from([("y".to_string(), b.get("missing")?)]))
        });
        assert!(err.is_err());
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.0, -2.0, 3.0]), true).unwrap();
        let s = t.sum(x).unwrap();
        assert_eq!(
            t.backward(s).unwrap().get(x).unwrap().data(),
            &[1.0, 1.0, 1.0]
        );

        let mut t = Tape::new();
        let x = t.leaf(vec1(&[2.0, 3.0]), true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[4.0, 6.0]);

        let mut t = Tape::new();
        let w = t
            .leaf(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap(), false)
            .unwrap();
        let x = t
            .leaf(Tensor::new([2, 1], vec![5.0, 7.0]).unwrap(), true)
            .unwrap();
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.0, 2.0]), true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Backward(_))));
        let empty = Tape::new();
        assert!(matches!(empty.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_wrt_prunes_unrelated_leaves() {
        let mut t = Tape::new();
        let a = t.leaf(vec1(&[1.0, 2.0]), true).unwrap();
        let b = t.leaf(vec1(&[3.0, 4.0]), true).unwrap();
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward_wrt(s, &[a]).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn pact_node_routes_alpha_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[0.3, 1.4, -0.2]), true).unwrap();
        let a = t.leaf(Tensor::scalar(1.0), true).unwrap();
        let y = t.pact(x, a, None).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0]);
    }
}
