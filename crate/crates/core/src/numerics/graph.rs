use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm, gemm_tn, matmul, transpose};
use super::{check_shape, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    None,
    /// rhs is a vector matching the last extent of lhs.
    Row,
    /// rhs holds a single value.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul {
        a: usize,
        b: usize,
        transpose_rhs: bool,
    },
    Add(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Silu(usize),
    Concat(usize, usize),
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward evaluation. Parameter leaves borrow the store's
/// buffers for the lifetime `'a`.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records an owned tensor as a leaf. It is differentiable iff the tensor
    /// requires a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape, Cow::Owned(t.values), Op::Leaf(None), rg)
    }

    /// Records a borrowed tensor as a leaf without copying it.
    pub fn input_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape.clone(),
            Cow::Borrowed(&t.values),
            Op::Leaf(None),
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        Ok(self.input(Tensor::new(shape, values)?))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Records a parameter as a leaf. Frozen parameters are constants.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            p.shape().to_vec(),
            Cow::Borrowed(p.values()),
            Op::Leaf(Some(id)),
            !p.is_frozen(),
        )
    }

    /// Like [`Graph::param`] but never differentiable.
    pub fn param_const(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            p.shape().to_vec(),
            Cow::Borrowed(p.values()),
            Op::Leaf(Some(id)),
            false,
        )
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when the leaf shares its buffer with the caller instead of owning a copy.
    pub fn is_borrowed(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].value, Cow::Borrowed(_))
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.nodes[v.0].shape.clone(),
                reason: alloc::format!("{op} expects a 2-D operand"),
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.grad_of(&[a.0, b.0]);
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            transpose_rhs: false,
        };
        Ok(self.push(vec![m, n], Cow::Owned(out), op, rg))
    }

    /// `a (m x k) * b^T` where `b` is stored `n x k`, the layout of a linear
    /// layer's weight.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (n, k2) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let bt = transpose(self.value(b), n, k);
        let out = matmul(self.value(a), &bt, m, k, n);
        let rg = self.grad_of(&[a.0, b.0]);
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            transpose_rhs: true,
        };
        Ok(self.push(vec![m, n], Cow::Owned(out), op, rg))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok(Broadcast::None)
        } else if nb == 1 {
            Ok(Broadcast::Scalar)
        } else if sa.len() == 2 && nb == sa[1] && sb[sb.len() - 1] == sa[1] {
            Ok(Broadcast::Row)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<(Broadcast, Vec<f64>)> {
        let bc = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = match bc {
            Broadcast::None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Row => av
                .chunks_exact(bv.len())
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        Ok((bc, out))
    }

    /// Elementwise sum. `b` may be a row vector or a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_of(&[a.0, b.0]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a.0, b.0, bc), rg))
    }

    /// Elementwise product. `b` may be a row vector or a single value.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.grad_of(&[a.0, b.0]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a.0, b.0, bc), rg))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.grad_of(&[a.0]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, Cow::Owned(out), Op::Silu(a.0), rg)
    }

    /// Concatenates two matrices along their columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a, "concat")?;
        let (m2, q) = self.dims2(b, "concat")?;
        if m != m2 {
            return Err(self.mismatch("concat", a, b));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for (ra, rb) in self
            .value(a)
            .chunks_exact(p)
            .zip(self.value(b).chunks_exact(q))
        {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(vec![m, p + q], Cow::Owned(out), Op::Concat(a.0, b.0), rg))
    }

    /// Gathers rows of `table (vocab x dim)`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        check_shape(&[indices.len()])?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: i,
                    len: vocab,
                });
            }
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let rg = self.grad_of(&[table.0]);
        let op = Op::Embedding {
            table: table.0,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len(), dim], Cow::Owned(out), op, rg))
    }

    /// Mean over all elements of `(a - b)^2`, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("mse", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let sum: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = sum / av.len() as f64;
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(vec![1], Cow::Owned(vec![out]), Op::Mse(a.0, b.0), rg))
    }

    /// Reverse pass from a one-element output. Returns d(output)/d(leaf) for
    /// every differentiable leaf; parameter leaves are also summed per
    /// parameter id.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        let mut result = Gradients::default();
        if !out.requires_grad {
            return Ok(result);
        }
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf(pid) => {
                    if let Some(pid) = pid {
                        match result.params.get_mut(pid) {
                            Some(acc) => add_into(acc, &g),
                            None => {
                                result.params.insert(*pid, g.clone());
                            }
                        }
                    }
                    result.leaves.insert(i, g);
                }
                Op::MatMul {
                    a,
                    b,
                    transpose_rhs,
                } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = node.shape[1];
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        if *transpose_rhs {
                            // b: n x k
                            gemm(&g, bv, &mut da, m, n, k);
                        } else {
                            let bt = transpose(bv, k, n);
                            gemm(&g, &bt, &mut da, m, n, k);
                        }
                        accumulate(&mut grads, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        let db = if *transpose_rhs {
                            let mut db = vec![0.0; n * k];
                            gemm_tn(&g, av, &mut db, m, n, k);
                            db
                        } else {
                            let mut db = vec![0.0; k * n];
                            gemm_tn(av, &g, &mut db, m, k, n);
                            db
                        };
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b, bc) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[b].requires_grad {
                        let nb = self.nodes[b].value.len();
                        accumulate(&mut grads, b, reduce_broadcast(&g, nb, *bc));
                    }
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Mul(a, b, bc) => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[a].requires_grad {
                        let da = match bc {
                            Broadcast::None => {
                                g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
                            }
                            Broadcast::Scalar => g.iter().map(|x| x * bv[0]).collect(),
                            Broadcast::Row => g
                                .chunks_exact(bv.len())
                                .flat_map(|row| row.iter().zip(bv.iter()).map(|(x, y)| x * y))
                                .collect(),
                        };
                        accumulate(&mut grads, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        let prod: Vec<f64> = g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, b, reduce_broadcast(&prod, bv.len(), *bc));
                    }
                }
                Op::Silu(a) => {
                    let av = &self.nodes[*a].value;
                    let da = g
                        .iter()
                        .zip(av.iter())
                        .map(|(gi, &x)| {
                            let s = sigmoid(x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat(a, b) => {
                    let (a, b) = (*a, *b);
                    let p = self.nodes[a].shape[1];
                    let q = self.nodes[b].shape[1];
                    let rows = g.chunks_exact(p + q);
                    if self.nodes[a].requires_grad {
                        let da = rows.clone().flat_map(|r| r[..p].iter().copied()).collect();
                        accumulate(&mut grads, a, da);
                    }
                    if self.nodes[b].requires_grad {
                        let db = rows.flat_map(|r| r[p..].iter().copied()).collect();
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Embedding { table, indices } => {
                    let dim = self.nodes[*table].shape[1];
                    let mut dt = vec![0.0; self.nodes[*table].value.len()];
                    for (&idx, row) in indices.iter().zip(g.chunks_exact(dim)) {
                        add_into(&mut dt[idx * dim..(idx + 1) * dim], row);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Mse(a, b) => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let scale = 2.0 * g[0] / av.len() as f64;
                    let diff: Vec<f64> = av
                        .iter()
                        .zip(bv.iter())
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    if self.nodes[b].requires_grad {
                        accumulate(&mut grads, b, diff.iter().map(|d| -d).collect());
                    }
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, diff);
                    }
                }
            }
        }
        Ok(result)
    }
}

/// Free-function form of [`Graph::backward`].
pub fn backpropagate(graph: &Graph<'_>, output: Var) -> Result<Gradients> {
    graph.backward(output)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_broadcast(g: &[f64], nb: usize, bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::None => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; nb];
            for row in g.chunks_exact(nb) {
                add_into(&mut out, row);
            }
            out
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Vec<f64>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if it is differentiable and the
    /// output depends on it through the recorded program.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Adds the gradient of leaf `v` into `t`'s buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
