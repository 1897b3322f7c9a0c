use super::tensor::{axpy, dot};
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Relu(Var),
    Softmax(Var),
    Dot(Var, Var),
    Mean(Vec<Var>),
    Stack(Vec<Var>),
    WeightedSum(Var, Vec<Var>),
    BceWithLogits(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of forward operations. Nodes are appended in evaluation
/// order, so reverse index order is a valid reverse topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node reachable from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_vector(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.is_vector() {
        Ok(())
    } else {
        Err(NumericsError::InvalidArgument {
            op,
            message: format!("expected a vector, got shape {:?}", t.shape()),
        })
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Leaves receive gradients; use them for parameters
    /// and constants alike.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `m x` for `m: [rows, cols]`, `x: [cols]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var, NumericsError> {
        let (mt, xt) = (self.value(m), self.value(x));
        if mt.shape().len() != 2 || !xt.is_vector() || mt.shape()[1] != xt.len() {
            return Err(mismatch("matvec", mt, xt));
        }
        let rows = mt.shape()[0];
        let out: Vec<f64> = (0..rows).map(|r| dot(mt.row(r), xt.data())).collect();
        self.push(Tensor::vector(out), Op::MatVec(m, x), "matvec")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(mismatch("add", at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn elemwise_mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(mismatch("elemwise_mul", at, bt));
        }
        let data: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b), "elemwise_mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let at = self.value(a);
        let data: Vec<f64> = at.data().iter().map(|x| x * c).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale(a, c), "scale")
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat",
                message: "no inputs".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            require_vector("concat", t)?;
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), "concat")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let at = self.value(a);
        let data = at.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Relu(a), "relu")
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let at = self.value(a);
        require_vector("softmax", at)?;
        if at.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "softmax",
                message: "empty input".into(),
            });
        }
        let max = at.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = at.data().iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = exps.into_iter().map(|e| e / total).collect();
        self.push(Tensor::vector(out), Op::Softmax(a), "softmax")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.is_vector() || at.shape() != bt.shape() {
            return Err(mismatch("dot", at, bt));
        }
        let v = dot(at.data(), bt.data());
        self.push(Tensor::scalar(v), Op::Dot(a, b), "dot")
    }

    /// Elementwise mean of equally shaped inputs.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| NumericsError::InvalidArgument {
            op: "mean",
            message: "no inputs".into(),
        })?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![0.0; self.value(*first).len()];
        for &p in parts {
            let t = self.value(p);
            if t.shape() != shape.as_slice() {
                return Err(mismatch("mean", self.value(*first), t));
            }
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let n = parts.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        self.push(Tensor::new(shape, acc)?, Op::Mean(parts.to_vec()), "mean")
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            out.push(t.item().ok_or_else(|| NumericsError::InvalidArgument {
                op: "stack",
                message: format!("expected one element, got shape {:?}", t.shape()),
            })?);
        }
        self.push(Tensor::vector(out), Op::Stack(parts.to_vec()), "stack")
    }

    /// `Σ_k weights[k] · items[k]` over equally sized vectors.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var, NumericsError> {
        let wt = self.value(weights);
        require_vector("weighted_sum", wt)?;
        if wt.len() != items.len() || items.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "weighted_sum",
                message: format!("{} weights for {} items", wt.len(), items.len()),
            });
        }
        let dim = self.value(items[0]).len();
        let mut out = vec![0.0; dim];
        for (k, &it) in items.iter().enumerate() {
            let t = self.value(it);
            if !t.is_vector() || t.len() != dim {
                return Err(mismatch("weighted_sum", self.value(items[0]), t));
            }
            axpy(&mut out, self.value(weights).data()[k], t.data());
        }
        self.push(
            Tensor::vector(out),
            Op::WeightedSum(weights, items.to_vec()),
            "weighted_sum",
        )
    }

    /// Numerically stable binary cross-entropy on a logit:
    /// `max(x, 0) - x·y + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var, NumericsError> {
        let x = self.value(logit).item().ok_or_else(|| NumericsError::InvalidArgument {
            op: "bce_with_logits",
            message: "logit must have one element".into(),
        })?;
        let loss = x.max(0.0) - x * label + (-x.abs()).exp().ln_1p();
        self.push(Tensor::scalar(loss), Op::BceWithLogits(logit, label), "bce_with_logits")
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatVec(m, x) => {
                    let (mt, xt) = (self.value(*m), self.value(*x));
                    let cols = xt.len();
                    {
                        let gm = acc(&mut grads, *m, mt.len());
                        for (r, &gr) in g.iter().enumerate() {
                            if gr != 0.0 {
                                axpy(&mut gm[r * cols..(r + 1) * cols], gr, xt.data());
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, cols);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            axpy(gx, gr, mt.row(r));
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let ga = acc(&mut grads, *v, g.len());
                        axpy(ga, 1.0, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    {
                        let ga = acc(&mut grads, *a, g.len());
                        for k in 0..g.len() {
                            ga[k] += g[k] * bt.data()[k];
                        }
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * at.data()[k];
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut grads, *a, g.len());
                    axpy(ga, *c, &g);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let gp = acc(&mut grads, *p, n);
                        axpy(gp, 1.0, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Relu(a) => {
                    let at = self.value(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        if at.data()[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
                Op::Softmax(a) => {
                    // dx_k = y_k (g_k - Σ_j g_j y_j)
                    let y = node.value.data();
                    let inner = dot(&g, y);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += y[k] * (g[k] - inner);
                    }
                }
                Op::Dot(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let n = at.len();
                    axpy(acc(&mut grads, *a, n), g[0], bt.data());
                    axpy(acc(&mut grads, *b, n), g[0], at.data());
                }
                Op::Mean(parts) => {
                    let w = 1.0 / parts.len() as f64;
                    for p in parts {
                        axpy(acc(&mut grads, *p, g.len()), w, &g);
                    }
                }
                Op::Stack(parts) => {
                    for (k, p) in parts.iter().enumerate() {
                        acc(&mut grads, *p, 1)[0] += g[k];
                    }
                }
                Op::WeightedSum(w, items) => {
                    let wt = self.value(*w);
                    let mut gw = vec![0.0; items.len()];
                    for (k, it) in items.iter().enumerate() {
                        let t = self.value(*it);
                        gw[k] = dot(&g, t.data());
                        axpy(acc(&mut grads, *it, t.len()), wt.data()[k], &g);
                    }
                    axpy(acc(&mut grads, *w, items.len()), 1.0, &gw);
                }
                Op::BceWithLogits(x, label) => {
                    let xv = self.value(*x).data()[0];
                    let sig = 1.0 / (1.0 + (-xv).exp());
                    acc(&mut grads, *x, 1)[0] += g[0] * (sig - label);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(t: &mut Tape, xs: &[f64]) -> Var {
        t.leaf(Tensor::vector(xs.to_vec()))
    }

    #[test]
    fn softmax_singleton_is_one() {
        for x in [-1e6, -3.0, 0.0, 42.0, 1e300] {
            let mut t = Tape::new();
            let a = v(&mut t, &[x]);
            let s = t.softmax(a).unwrap();
            assert_eq!(t.value(s).data(), &[1.0]);
        }
    }

    #[test]
    fn relu_and_dot_definitions() {
        let mut t = Tape::new();
        let a = v(&mut t, &[-1.0, 0.0, 2.0]);
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let u = v(&mut t, &[3.0, 4.0]);
        let d = t.dot(u, u).unwrap();
        assert_eq!(t.value(d).data(), &[25.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::zeros(vec![2, 3]));
        let x = v(&mut t, &[1.0, 2.0]);
        match t.matvec(m, x) {
            Err(NumericsError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2]);
            }
            other => panic!("{other:?}"),
        }
        let y = v(&mut t, &[1.0, 2.0, 3.0]);
        assert!(t.dot(x, y).is_err());
        assert!(t.add(x, y).is_err());
        assert!(t.elemwise_mul(x, y).is_err());
    }

    #[test]
    fn grad_of_squared_norm() {
        let mut t = Tape::new();
        let w = v(&mut t, &[1.0, 2.0]);
        let l = t.dot(w, w).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn singleton_softmax_has_zero_grad() {
        let mut t = Tape::new();
        let a = v(&mut t, &[0.7]);
        let s = t.softmax(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = v(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(a), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_results_rejected() {
        let mut t = Tape::new();
        let a = v(&mut t, &[1e300]);
        assert!(matches!(t.scale(a, 1e300), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // l = (a·a) + (a·b) via add of two scalars; dl/da = 2a + b
        let mut t = Tape::new();
        let a = v(&mut t, &[1.0, -2.0]);
        let b = v(&mut t, &[0.5, 3.0]);
        let aa = t.dot(a, a).unwrap();
        let ab = t.dot(a, b).unwrap();
        let l = t.add(aa, ab).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[2.5, -1.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn bce_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = v(&mut t, &[0.0]);
        for y in [0.0, 1.0] {
            let l = t.bce_with_logits(x, y).unwrap();
            assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }
}
