//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a tracked leaf.
//! Every op checks its output for NaN/Inf and fails instead of propagating.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use super::tensor::{
    log_softmax_row, matmul_dims, matmul_into, matmul_nt_into, matmul_tn_into, sigmoid, softmax_row, softplus, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    DivRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Gather(usize, Vec<usize>),
    BuildCholesky(usize, usize),
    BatchMatVec(usize, usize),
    Diagonal(usize),
    Mix(usize, Vec<usize>),
    StraightThrough(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

fn tril_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Solves `n(n+1)/2 = len` for `n`.
pub fn tril_side(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (tril_len(n) == len).then_some(n)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Tracked leaf.
    pub fn leaf(&self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Registers a named parameter. Untracked parameters act as constants.
    pub fn param(&self, name: &str, value: &Tensor, trainable: bool) -> Result<Var> {
        let v = self.push(value.clone(), Op::Leaf, trainable, "param")?;
        if trainable {
            self.params.borrow_mut().push((name.to_string(), v.0));
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.same_shape(name, a, b)?;
        let data = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.data().iter().zip(nodes[b.0].value.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.tracked(&[a.0, b.0]);
        self.push(Tensor::new(shape, data)?, op, rg, name)
    }

    fn map_unary(&self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f);
        let rg = self.tracked(&[a.0]);
        self.push(value, op, rg, name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a.0, b.0), "div", |x, y| x / y)
    }

    /// `a[m×n] + b[n]` with `b` repeated over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.rank() != 2 || bv.shape() != [av.cols()] {
                return Err(Error::shape("add_row", format!("{:?} + {:?}", av.shape(), bv.shape())));
            }
            let n = av.cols();
            let data = av.data().iter().enumerate().map(|(i, &x)| x + bv.data()[i % n]).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.tracked(&[a.0, b.0]);
        self.push(value, Op::AddRow(a.0, b.0), rg, "add_row")
    }

    /// `a[m×n] / s[m]`, dividing row `i` by `s[i]`.
    pub fn div_rows(&self, a: Var, s: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, sv) = (&nodes[a.0].value, &nodes[s.0].value);
            if av.rank() != 2 || sv.shape() != [av.rows()] {
                return Err(Error::shape("div_rows", format!("{:?} / {:?}", av.shape(), sv.shape())));
            }
            let n = av.cols();
            let data = av.data().iter().enumerate().map(|(i, &x)| x / sv.data()[i / n]).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.tracked(&[a.0, s.0]);
        self.push(value, Op::DivRows(a.0, s.0), rg, "div_rows")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.map_unary(a, Op::Scale(a.0, c), "scale", |x| x * c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.map_unary(a, Op::AddScalar(a.0), "add_scalar", |x| x + c)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = matmul_dims(av.shape(), bv.shape())?;
            let mut out = vec![0.0; m * n];
            matmul_into(av.data(), bv.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.tracked(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Relu(a.0), "relu", |x| x.max(0.0))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Exp(a.0), "exp", f64::exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Log(a.0), "log", f64::ln)
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Softplus(a.0), "softplus", softplus)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let total = self.nodes.borrow()[a.0].value.sum();
        let rg = self.tracked(&[a.0]);
        self.push(Tensor::scalar(total), Op::Sum(a.0), rg, "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (total, n) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.sum(), nodes[a.0].value.len())
        };
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let rg = self.tracked(&[a.0]);
        self.push(Tensor::scalar(total / n as f64), Op::Mean(a.0), rg, "mean")
    }

    /// Sums the trailing axis: `[.., n] -> [..]`.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if av.rank() == 0 {
                return Err(Error::shape("sum_last", "scalar input"));
            }
            let n = av.cols();
            let data: Vec<f64> = av.data().chunks(n).map(|c| c.iter().sum()).collect();
            Tensor::new(av.shape()[..av.rank() - 1].to_vec(), data)?
        };
        let rg = self.tracked(&[a.0]);
        self.push(value, Op::SumLast(a.0), rg, "sum_last")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.clone().reshape(shape)?;
        let rg = self.tracked(&[a.0]);
        self.push(value, Op::Reshape(a.0), rg, "reshape")
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if av.rank() == 0 || av.cols() == 0 {
                return Err(Error::shape("softmax", "needs a trailing axis of length >= 1"));
            }
            let data = av.data().chunks(av.cols()).flat_map(softmax_row).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.tracked(&[a.0]);
        self.push(value, Op::Softmax(a.0), rg, "softmax")
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if av.rank() == 0 || av.cols() == 0 {
                return Err(Error::shape("log_softmax", "needs a trailing axis of length >= 1"));
            }
            let data = av.data().chunks(av.cols()).flat_map(log_softmax_row).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.tracked(&[a.0]);
        self.push(value, Op::LogSoftmax(a.0), rg, "log_softmax")
    }

    /// Picks `a[i, idx[i]]` from a matrix, giving a vector.
    pub fn gather(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if av.rank() != 2 || av.rows() != idx.len() {
                return Err(Error::shape("gather", format!("{:?} with {} indices", av.shape(), idx.len())));
            }
            let n = av.cols();
            if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
                return Err(Error::shape("gather", format!("index {bad} out of range {n}")));
            }
            Tensor::vector(idx.iter().enumerate().map(|(i, &j)| av.data()[i * n + j]).collect())
        };
        let rg = self.tracked(&[a.0]);
        self.push(value, Op::Gather(a.0, idx.to_vec()), rg, "gather")
    }

    /// Mean negative log-likelihood of integer targets under row-wise softmax.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lsm = self.log_softmax(logits)?;
        let picked = self.gather(lsm, targets)?;
        let m = self.mean(picked)?;
        self.scale(m, -1.0)
    }

    /// Fills `[B, N(N+1)/2]` rows into `[B, N, N]` lower-triangular factors
    /// in row-major tril order, exponentiating the diagonal.
    pub fn build_cholesky(&self, flat: Var) -> Result<Var> {
        let (value, n) = {
            let nodes = self.nodes.borrow();
            let fv = &nodes[flat.0].value;
            if fv.rank() != 2 {
                return Err(Error::shape("build_cholesky", format!("{:?}", fv.shape())));
            }
            let n = tril_side(fv.cols())
                .ok_or_else(|| Error::shape("build_cholesky", format!("{} is not a triangular number", fv.cols())))?;
            let b = fv.rows();
            let mut out = vec![0.0; b * n * n];
            for bi in 0..b {
                fill_cholesky(fv.row(bi), n, &mut out[bi * n * n..(bi + 1) * n * n]);
            }
            (Tensor::new(vec![b, n, n], out)?, n)
        };
        let rg = self.tracked(&[flat.0]);
        self.push(value, Op::BuildCholesky(flat.0, n), rg, "build_cholesky")
    }

    /// `y[b] = m[b] · x[b]` for `m: [B, N, N]`, `x: [B, N]`.
    pub fn batch_matvec(&self, m: Var, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (mv, xv) = (&nodes[m.0].value, &nodes[x.0].value);
            let ok = mv.rank() == 3
                && xv.rank() == 2
                && mv.shape()[0] == xv.shape()[0]
                && mv.shape()[1] == mv.shape()[2]
                && mv.shape()[2] == xv.shape()[1];
            if !ok {
                return Err(Error::shape("batch_matvec", format!("{:?} x {:?}", mv.shape(), xv.shape())));
            }
            let (b, n) = (xv.shape()[0], xv.shape()[1]);
            let mut out = vec![0.0; b * n];
            for bi in 0..b {
                let mat = &mv.data()[bi * n * n..(bi + 1) * n * n];
                let vec = xv.row(bi);
                for i in 0..n {
                    out[bi * n + i] = (0..n).map(|j| mat[i * n + j] * vec[j]).sum();
                }
            }
            Tensor::new(vec![b, n], out)?
        };
        let rg = self.tracked(&[m.0, x.0]);
        self.push(value, Op::BatchMatVec(m.0, x.0), rg, "batch_matvec")
    }

    /// Diagonals of a `[B, N, N]` batch, as `[B, N]`.
    pub fn diagonal(&self, m: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let mv = &nodes[m.0].value;
            if mv.rank() != 3 || mv.shape()[1] != mv.shape()[2] {
                return Err(Error::shape("diagonal", format!("{:?}", mv.shape())));
            }
            let (b, n) = (mv.shape()[0], mv.shape()[1]);
            let data = (0..b)
                .flat_map(|bi| (0..n).map(move |i| (bi, i)))
                .map(|(bi, i)| mv.data()[bi * n * n + i * n + i])
                .collect();
            Tensor::new(vec![b, n], data)?
        };
        let rg = self.tracked(&[m.0]);
        self.push(value, Op::Diagonal(m.0), rg, "diagonal")
    }

    /// Gated mixture `out[b] = Σ_i gates[b, i] · experts[i][b]`.
    pub fn mix(&self, gates: Var, experts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let gv = &nodes[gates.0].value;
            if gv.rank() != 2 || gv.cols() != experts.len() || experts.is_empty() {
                return Err(Error::shape("mix", format!("gates {:?} for {} experts", gv.shape(), experts.len())));
            }
            let shape = nodes[experts[0].0].value.shape().to_vec();
            if shape.len() != 2 || shape[0] != gv.rows() {
                return Err(Error::shape("mix", format!("expert output {shape:?}")));
            }
            let (b, d) = (shape[0], shape[1]);
            let mut out = vec![0.0; b * d];
            for (i, e) in experts.iter().enumerate() {
                let ev = &nodes[e.0].value;
                if ev.shape() != shape.as_slice() {
                    return Err(Error::shape("mix", "expert outputs differ in shape"));
                }
                for bi in 0..b {
                    let w = gv.data()[bi * experts.len() + i];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &x) in out[bi * d..(bi + 1) * d].iter_mut().zip(ev.row(bi)) {
                        *o += w * x;
                    }
                }
            }
            Tensor::new(shape, out)?
        };
        let mut ids: Vec<usize> = experts.iter().map(|e| e.0).collect();
        ids.push(gates.0);
        let rg = self.tracked(&ids);
        ids.pop();
        self.push(value, Op::Mix(gates.0, ids), rg, "mix")
    }

    /// Forward value `hard`, backward gradient routed unchanged into `soft`.
    pub fn straight_through(&self, hard: Tensor, soft: Var) -> Result<Var> {
        let soft_shape = self.shape(soft);
        if hard.shape() != soft_shape.as_slice() {
            return Err(Error::shape("straight_through", format!("{:?} vs {soft_shape:?}", hard.shape())));
        }
        let rg = self.tracked(&[soft.0]);
        self.push(hard, Op::StraightThrough(soft.0), rg, "straight_through")
    }

    /// Copy of `a` cut out of the gradient path.
    pub fn detach(&self, a: Var) -> Result<Var> {
        self.constant(self.value(a))
    }

    /// Reverse pass from a scalar loss. Fails when called twice without
    /// [`Graph::reset_grads`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &go, &mut grads)?;
            grads[i] = Some(go);
        }
        if grads.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(shape, g.clone()).expect("gradient matches node shape"))
    }

    /// Gradients of every trainable parameter, zero-filled when untouched.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let params = self.params.borrow();
        params
            .iter()
            .map(|(name, id)| {
                let g = self.grad(Var(*id)).unwrap_or_else(|| Tensor::zeros(&self.shape(Var(*id))));
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn fill_cholesky(flat: &[f64], n: usize, out: &mut [f64]) {
    let mut t = 0;
    for r in 0..n {
        for c in 0..=r {
            out[r * n + c] = if r == c { flat[t].exp() } else { flat[t] };
            t += 1;
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], i: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
            accumulate(grads, nodes, *b, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
            accumulate(grads, nodes, *b, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(grads, nodes, *a, |g| {
                for k in 0..g.len() {
                    g[k] += go[k] * bv[k];
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for k in 0..g.len() {
                    g[k] += go[k] * av[k];
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(grads, nodes, *a, |g| {
                for k in 0..g.len() {
                    g[k] += go[k] / bv[k];
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for k in 0..g.len() {
                    g[k] -= go[k] * av[k] / (bv[k] * bv[k]);
                }
            });
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
            let n = nodes[*b].value.len();
            accumulate(grads, nodes, *b, |g| {
                for (k, y) in go.iter().enumerate() {
                    g[k % n] += y;
                }
            });
        }
        Op::DivRows(a, s) => {
            let av = &nodes[*a].value;
            let sv = nodes[*s].value.data();
            let n = av.cols();
            accumulate(grads, nodes, *a, |g| {
                for (k, y) in go.iter().enumerate() {
                    g[k] += y / sv[k / n];
                }
            });
            accumulate(grads, nodes, *s, |g| {
                for (k, y) in go.iter().enumerate() {
                    let r = k / n;
                    g[r] -= y * av.data()[k] / (sv[r] * sv[r]);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += c * y));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
        }
        Op::StraightThrough(a) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            accumulate(grads, nodes, *a, |g| matmul_nt_into(go, bv.data(), g, m, k, n));
            accumulate(grads, nodes, *b, |g| matmul_tn_into(av.data(), go, g, m, k, n));
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |g| {
                for k in 0..g.len() {
                    if av[k] > 0.0 {
                        g[k] += go[k];
                    }
                }
            });
        }
        Op::Exp(a) => {
            accumulate(grads, nodes, *a, |g| {
                for k in 0..g.len() {
                    g[k] += go[k] * out[k];
                }
            });
        }
        Op::Log(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |g| {
                for k in 0..g.len() {
                    g[k] += go[k] / av[k];
                }
            });
        }
        Op::Softplus(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |g| {
                for k in 0..g.len() {
                    g[k] += go[k] * sigmoid(av[k]);
                }
            });
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |g| g.iter_mut().for_each(|x| *x += go[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            accumulate(grads, nodes, *a, |g| g.iter_mut().for_each(|x| *x += go[0] / n));
        }
        Op::SumLast(a) => {
            let n = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |g| {
                for (k, x) in g.iter_mut().enumerate() {
                    *x += go[k / n];
                }
            });
        }
        Op::Softmax(a) => {
            let n = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |g| {
                for ((gr, y), gor) in g.chunks_mut(n).zip(out.chunks(n)).zip(go.chunks(n)) {
                    let dot: f64 = y.iter().zip(gor).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        gr[j] += y[j] * (gor[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let n = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |g| {
                for ((gr, y), gor) in g.chunks_mut(n).zip(out.chunks(n)).zip(go.chunks(n)) {
                    let total: f64 = gor.iter().sum();
                    for j in 0..n {
                        gr[j] += gor[j] - y[j].exp() * total;
                    }
                }
            });
        }
        Op::Gather(a, idx) => {
            let n = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |g| {
                for (r, &j) in idx.iter().enumerate() {
                    g[r * n + j] += go[r];
                }
            });
        }
        Op::BuildCholesky(flat, n) => {
            let n = *n;
            let m = tril_len(n);
            accumulate(grads, nodes, *flat, |g| {
                let b = g.len() / m;
                for bi in 0..b {
                    let mut t = 0;
                    for r in 0..n {
                        for c in 0..=r {
                            let o = bi * n * n + r * n + c;
                            g[bi * m + t] += if r == c { go[o] * out[o] } else { go[o] };
                            t += 1;
                        }
                    }
                }
            });
        }
        Op::BatchMatVec(mat, x) => {
            let (mv, xv) = (nodes[*mat].value.data(), &nodes[*x].value);
            let (b, n) = (xv.shape()[0], xv.shape()[1]);
            accumulate(grads, nodes, *mat, |g| {
                for bi in 0..b {
                    for i in 0..n {
                        let gi = go[bi * n + i];
                        for j in 0..n {
                            g[bi * n * n + i * n + j] += gi * xv.data()[bi * n + j];
                        }
                    }
                }
            });
            accumulate(grads, nodes, *x, |g| {
                for bi in 0..b {
                    for i in 0..n {
                        let gi = go[bi * n + i];
                        for j in 0..n {
                            g[bi * n + j] += gi * mv[bi * n * n + i * n + j];
                        }
                    }
                }
            });
        }
        Op::Diagonal(mat) => {
            let shape = nodes[*mat].value.shape();
            let (b, n) = (shape[0], shape[1]);
            accumulate(grads, nodes, *mat, |g| {
                for bi in 0..b {
                    for k in 0..n {
                        g[bi * n * n + k * n + k] += go[bi * n + k];
                    }
                }
            });
        }
        Op::Mix(gates, experts) => {
            let gv = nodes[*gates].value.data();
            let ne = experts.len();
            let d = nodes[i].value.cols();
            let b = nodes[i].value.rows();
            accumulate(grads, nodes, *gates, |g| {
                for (e_idx, &e) in experts.iter().enumerate() {
                    let ev = nodes[e].value.data();
                    for bi in 0..b {
                        let dot: f64 = (0..d).map(|k| go[bi * d + k] * ev[bi * d + k]).sum();
                        g[bi * ne + e_idx] += dot;
                    }
                }
            });
            for (e_idx, &e) in experts.iter().enumerate() {
                accumulate(grads, nodes, e, |g| {
                    for bi in 0..b {
                        let w = gv[bi * ne + e_idx];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            g[bi * d + k] += w * go[bi * d + k];
                        }
                    }
                });
            }
        }
    }
    Ok(())
}
