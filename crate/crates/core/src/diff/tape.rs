//! Append-only reverse-mode tape.
//!
//! Every primitive pushes one node holding its output value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products into the inputs, so each
//! backward pass is strictly first order: no node ever records the
//! backward computation itself.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::str::FromStr;

use super::error::{DiffError, Result};
use super::tensor::{matmul_raw, Tensor};
use crate::scalar::Scalar;

/// Primitive operations understood by [`Tape::forward`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Relu,
    Sigmoid,
    Sin,
    Asin,
    Cos,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    /// Concatenate along an axis (0 = rows, 1 = columns).
    Concat {
        axis: usize,
    },
    /// `len` entries starting at `start` along `axis`.
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Replicate a scalar, a row or a column up to `shape`.
    Broadcast {
        shape: Vec<usize>,
    },
}

impl FromStr for Primitive {
    type Err = DiffError;

    /// Parses the argument-free primitives by name.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "matmul" => Self::MatMul,
            "tanh" => Self::Tanh,
            "relu" => Self::Relu,
            "sigmoid" => Self::Sigmoid,
            "sin" => Self::Sin,
            "asin" => Self::Asin,
            "cos" => Self::Cos,
            "exp" => Self::Exp,
            "log" => Self::Log,
            "square" => Self::Square,
            "sum" => Self::Sum,
            "mean" => Self::Mean,
            other => return Err(DiffError::UnknownPrimitive(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Sin(usize),
    Asin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softplus(usize),
    Clamp { a: usize, lo: T, hi: T },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Broadcast(usize),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    slots: RefCell<Vec<(String, usize)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Scalar = f64> {
    tape: &'t Tape<T>,
    idx: usize,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f64> {
    slots: BTreeMap<String, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a named parameter slot.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name)
    }

    /// Gradient with respect to any variable that required one.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.nodes.get(var.idx).and_then(|g| g.as_ref())
    }

    pub fn slots(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.slots
    }

    /// Largest absolute gradient entry over all slots.
    pub fn max_abs(&self) -> T {
        self.slots
            .values()
            .fold(T::zero(), |m, g| m.max(g.max_abs()))
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix_like(shape: &[usize]) -> bool {
    shape.len() <= 2
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            slots: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn checked(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn own(&self, v: Var<'_, T>) -> Result<usize> {
        if std::ptr::eq(v.tape, self) {
            Ok(v.idx)
        } else {
            Err(DiffError::ForeignVar)
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// A value that no gradient flows into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed leaf that receives a gradient (see [`Gradients::wrt`]).
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named trainable slot.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Result<Var<'_, T>> {
        let mut slots = self.slots.borrow_mut();
        if slots.iter().any(|(n, _)| n == name) {
            return Err(DiffError::DuplicateSlot(name.to_string()));
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        slots.push((name.to_string(), v.idx));
        Ok(v)
    }

    pub fn slot_names(&self) -> Vec<String> {
        self.slots.borrow().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Applies a primitive by name.
    pub fn forward<'t>(&'t self, prim: &Primitive, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let arity = |op: &'static str, n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(DiffError::Arity {
                    op,
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match prim {
            Primitive::Add => arity("add", 2).and_then(|_| inputs[0].add(inputs[1])),
            Primitive::Sub => arity("sub", 2).and_then(|_| inputs[0].sub(inputs[1])),
            Primitive::Mul => arity("mul", 2).and_then(|_| inputs[0].mul(inputs[1])),
            Primitive::MatMul => arity("matmul", 2).and_then(|_| inputs[0].matmul(inputs[1])),
            Primitive::Tanh => arity("tanh", 1).and_then(|_| inputs[0].tanh()),
            Primitive::Relu => arity("relu", 1).and_then(|_| inputs[0].relu()),
            Primitive::Sigmoid => arity("sigmoid", 1).and_then(|_| inputs[0].sigmoid()),
            Primitive::Sin => arity("sin", 1).and_then(|_| inputs[0].sin()),
            Primitive::Asin => arity("asin", 1).and_then(|_| inputs[0].asin()),
            Primitive::Cos => arity("cos", 1).and_then(|_| inputs[0].cos()),
            Primitive::Exp => arity("exp", 1).and_then(|_| inputs[0].exp()),
            Primitive::Log => arity("log", 1).and_then(|_| inputs[0].log()),
            Primitive::Square => arity("square", 1).and_then(|_| inputs[0].square()),
            Primitive::Sum => arity("sum", 1).and_then(|_| inputs[0].sum()),
            Primitive::Mean => arity("mean", 1).and_then(|_| inputs[0].mean()),
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, len } => {
                arity("slice", 1).and_then(|_| inputs[0].slice(*axis, *start, *len))
            }
            Primitive::Broadcast { shape } => {
                arity("broadcast", 1).and_then(|_| inputs[0].broadcast_to(shape))
            }
        }
    }

    fn unary(
        &self,
        name: &'static str,
        a: usize,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var<'_, T>> {
        let value = self.nodes.borrow()[a].value.map(f);
        self.checked(name, value, op, self.needs(a))
    }

    fn binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'_, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            if x.shape() != y.shape() {
                return Err(mismatch(name, x, y));
            }
            x.zip_map(y, f)?
        };
        let rg = self.needs(a) || self.needs(b);
        self.checked(name, value, op, rg)
    }

    /// Concatenation of rank <= 2 tensors along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if parts.is_empty() || axis > 1 {
            return Err(DiffError::Arity {
                op: "concat",
                expected: 1,
                got: parts.len(),
            });
        }
        let idx: Vec<usize> = parts.iter().map(|p| self.own(*p)).collect::<Result<_>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[idx[0]].value;
            let (r0, c0) = first.dims2();
            let mut total = 0;
            for &i in &idx {
                let v = &nodes[i].value;
                let (r, c) = v.dims2();
                if !is_matrix_like(v.shape()) || (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                    return Err(mismatch("concat", first, v));
                }
                total += if axis == 0 { r } else { c };
            }
            if axis == 0 {
                let data: Vec<T> = idx
                    .iter()
                    .flat_map(|&i| nodes[i].value.data().iter().copied())
                    .collect();
                if first.rank() == 1 {
                    Tensor::vector(data)
                } else {
                    Tensor::matrix(total, c0, data)
                }
            } else {
                let mut data = Vec::with_capacity(r0 * total);
                for row in 0..r0 {
                    for &i in &idx {
                        let v = &nodes[i].value;
                        let c = v.dims2().1;
                        data.extend_from_slice(&v.data()[row * c..(row + 1) * c]);
                    }
                }
                Tensor::matrix(r0, total, data)
            }
        };
        let rg = idx.iter().any(|&i| self.needs(i));
        self.checked("concat", value, Op::Concat { parts: idx, axis }, rg)
    }

    /// Sum of several equally shaped variables.
    pub fn add_all<'t>(&'t self, terms: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let mut it = terms.iter();
        let mut acc = *it.next().ok_or(DiffError::Arity {
            op: "add_all",
            expected: 1,
            got: 0,
        })?;
        for t in it {
            acc = acc.add(*t)?;
        }
        Ok(acc)
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// Every registered slot receives exactly one gradient; slots the loss
    /// does not depend on get zeros.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let root = self.own(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(DiffError::NotScalar(nodes[root].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(nodes[root].value.shape(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (input, contrib) in vjp(&nodes, i, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }

        let mut slots = BTreeMap::new();
        for (name, idx) in self.slots.borrow().iter() {
            let g = grads
                .get(*idx)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(nodes[*idx].value.shape()));
            slots.insert(name.clone(), g);
        }
        grads.resize(nodes.len(), None);
        Ok(Gradients {
            slots,
            nodes: grads,
        })
    }
}

/// Vector-Jacobian products of node `i` given its output gradient `g`.
fn vjp<T: Scalar>(nodes: &[Node<T>], i: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |j: usize| &nodes[j].value;
    let with_shape = |data: Vec<T>, like: &Tensor<T>| {
        Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
    };
    let elementwise = |a: usize, f: &dyn Fn(T, T) -> T| {
        let x = val(a);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &x)| f(g, x))
            .collect();
        vec![(a, with_shape(data, x))]
    };
    let by_output = |a: usize, f: &dyn Fn(T, T) -> T| {
        let y = &nodes[i].value;
        let data = g
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &y)| f(g, y))
            .collect();
        vec![(a, with_shape(data, val(a)))]
    };
    let two = T::lit(2.0);

    match &nodes[i].op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => {
            let ga = g.zip_map(val(*b), |g, y| g * y).expect("mul grad");
            let gb = g.zip_map(val(*a), |g, x| g * x).expect("mul grad");
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
        Op::Shift(a) => vec![(*a, g.clone())],
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = av.dims2();
            let n = g.len() / m.max(1);
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                // dA = G B^T (or G B when B was transposed)
                let ga = if *trans_b {
                    matmul_raw(g.data(), (m, n), bv.data(), bv.dims2(), false)
                } else {
                    matmul_raw(g.data(), (m, n), bv.data(), bv.dims2(), true)
                };
                out.push((*a, with_shape(ga, av)));
            }
            if nodes[*b].requires_grad {
                let at = av.transpose();
                let gb = if *trans_b {
                    // dB = G^T A, shape n x k
                    let gt = Tensor::new(vec![m, n], g.data().to_vec())
                        .expect("grad")
                        .transpose();
                    matmul_raw(gt.data(), (n, m), av.data(), (m, k), false)
                } else {
                    matmul_raw(at.data(), (k, m), g.data(), (m, n), false)
                };
                out.push((*b, with_shape(gb, bv)));
            }
            out
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[i].value.dims2();
            let gt = Tensor::matrix(r, c, g.data().to_vec()).transpose();
            vec![(*a, with_shape(gt.into_data(), val(*a)))]
        }
        Op::Tanh(a) => by_output(*a, &|g, y| g * (T::one() - y * y)),
        Op::Sigmoid(a) => by_output(*a, &|g, y| g * y * (T::one() - y)),
        Op::Exp(a) => by_output(*a, &|g, y| g * y),
        Op::Relu(a) => elementwise(*a, &|g, x| if x > T::zero() { g } else { T::zero() }),
        Op::Sin(a) => elementwise(*a, &|g, x| g * x.cos()),
        Op::Cos(a) => elementwise(*a, &|g, x| -g * x.sin()),
        Op::Asin(a) => elementwise(*a, &|g, x| g / (T::one() - x * x).sqrt()),
        Op::Log(a) => elementwise(*a, &|g, x| g / x),
        Op::Square(a) => elementwise(*a, &|g, x| g * two * x),
        Op::Softplus(a) => elementwise(*a, &|g, x| g * sigmoid(x)),
        Op::Clamp { a, lo, hi } => elementwise(*a, &|g, x| {
            if x >= *lo && x <= *hi {
                g
            } else {
                T::zero()
            }
        }),
        Op::Sum(a) => {
            let g0 = g.data()[0];
            vec![(*a, val(*a).map(|_| g0))]
        }
        Op::Mean(a) => {
            let n = T::from_usize(val(*a).len()).unwrap();
            let g0 = g.data()[0] / n;
            vec![(*a, val(*a).map(|_| g0))]
        }
        Op::SumRows(a) => {
            let x = val(*a);
            let (r, c) = x.dims2();
            let data = (0..r * c).map(|k| g.data()[k % c]).collect();
            vec![(*a, with_shape(data, x))]
        }
        Op::SumCols(a) => {
            let x = val(*a);
            let (r, c) = x.dims2();
            let data = (0..r * c).map(|k| g.data()[k / c]).collect();
            vec![(*a, with_shape(data, x))]
        }
        Op::Concat { parts, axis } => {
            let (r_out, c_out) = nodes[i].value.dims2();
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let (r, c) = pv.dims2();
                let data = if *axis == 0 {
                    g.data()[offset * c_out..(offset + r) * c_out].to_vec()
                } else {
                    let mut d = Vec::with_capacity(r * c);
                    for row in 0..r_out {
                        d.extend_from_slice(
                            &g.data()[row * c_out + offset..row * c_out + offset + c],
                        );
                    }
                    d
                };
                offset += if *axis == 0 { r } else { c };
                out.push((p, with_shape(data, pv)));
            }
            out
        }
        Op::Slice { a, axis, start } => {
            let x = val(*a);
            let (_, c) = x.dims2();
            let (gr, gc) = nodes[i].value.dims2();
            let mut data = vec![T::zero(); x.len()];
            for row in 0..gr {
                for col in 0..gc {
                    let (sr, sc) = if *axis == 0 {
                        (row + start, col)
                    } else {
                        (row, col + start)
                    };
                    data[sr * c + sc] = g.data()[row * gc + col];
                }
            }
            vec![(*a, with_shape(data, x))]
        }
        Op::Broadcast(a) => {
            let x = val(*a);
            let (r, c) = nodes[i].value.dims2();
            let is_row = (x.rank() == 1 && x.len() == c) || x.shape() == [1, c].as_slice();
            let is_col = x.shape() == [r, 1].as_slice();
            let data = if x.len() == 1 {
                vec![g.sum()]
            } else if is_row {
                let mut d = vec![T::zero(); c];
                for row in 0..r {
                    for col in 0..c {
                        d[col] = d[col] + g.data()[row * c + col];
                    }
                }
                d
            } else if is_col {
                let mut d = vec![T::zero(); r];
                for row in 0..r {
                    for col in 0..c {
                        d[row] = d[row] + g.data()[row * c + col];
                    }
                }
                d
            } else {
                g.data().to_vec()
            };
            vec![(*a, with_shape(data, x))]
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrowed view of the forward value.
    pub fn value_ref(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].value)
    }

    pub fn value(&self) -> Tensor<T> {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.value_ref().dims2()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> T {
        self.value_ref().data()[0]
    }

    fn other(&self, rhs: Var<'t, T>) -> Result<usize> {
        self.tape.own(rhs)
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Self> {
        let b = self.other(rhs)?;
        self.tape
            .binary("add", self.idx, b, |x, y| x + y, Op::Add(self.idx, b))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Self> {
        let b = self.other(rhs)?;
        self.tape
            .binary("sub", self.idx, b, |x, y| x - y, Op::Sub(self.idx, b))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Self> {
        let b = self.other(rhs)?;
        self.tape
            .binary("mul", self.idx, b, |x, y| x * y, Op::Mul(self.idx, b))
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: T) -> Result<Self> {
        self.tape
            .unary("scale", self.idx, |x| x * c, Op::Scale(self.idx, c))
    }

    /// Addition of a constant.
    pub fn shift(self, c: T) -> Result<Self> {
        self.tape
            .unary("shift", self.idx, |x| x + c, Op::Shift(self.idx))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-T::one())
    }

    fn matmul_impl(self, rhs: Var<'t, T>, trans_b: bool) -> Result<Self> {
        let b = self.other(rhs)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, y) = (&nodes[self.idx].value, &nodes[b].value);
            let (m, k) = x.dims2();
            let (br, bc) = y.dims2();
            let inner = if trans_b { bc } else { br };
            if x.rank() > 2 || y.rank() > 2 || k != inner || (x.rank() == 1 && k != 1) {
                return Err(mismatch("matmul", x, y));
            }
            let n = if trans_b { br } else { bc };
            let data = matmul_raw(x.data(), (m, k), y.data(), (br, bc), trans_b);
            if y.rank() == 1 && !trans_b {
                Tensor::vector(data)
            } else {
                Tensor::matrix(m, n, data)
            }
        };
        let rg = self.tape.needs(self.idx) || self.tape.needs(b);
        self.tape.checked(
            "matmul",
            value,
            Op::MatMul {
                a: self.idx,
                b,
                trans_b,
            },
            rg,
        )
    }

    /// Matrix product `self * rhs`; a rank-1 `rhs` acts as a column vector.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Self> {
        self.matmul_impl(rhs, false)
    }

    /// Matrix product with the transposed right operand, `self * rhs^T`.
    pub fn matmul_t(self, rhs: Var<'t, T>) -> Result<Self> {
        self.matmul_impl(rhs, true)
    }

    pub fn transpose(self) -> Result<Self> {
        let value = self.value_ref().transpose();
        let rg = self.tape.needs(self.idx);
        self.tape
            .checked("transpose", value, Op::Transpose(self.idx), rg)
    }

    pub fn tanh(self) -> Result<Self> {
        self.tape
            .unary("tanh", self.idx, |x| x.tanh(), Op::Tanh(self.idx))
    }

    pub fn relu(self) -> Result<Self> {
        self.tape
            .unary("relu", self.idx, |x| x.max(T::zero()), Op::Relu(self.idx))
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.tape
            .unary("sigmoid", self.idx, sigmoid, Op::Sigmoid(self.idx))
    }

    pub fn softplus(self) -> Result<Self> {
        self.tape
            .unary("softplus", self.idx, softplus, Op::Softplus(self.idx))
    }

    pub fn sin(self) -> Result<Self> {
        self.tape
            .unary("sin", self.idx, |x| x.sin(), Op::Sin(self.idx))
    }

    pub fn cos(self) -> Result<Self> {
        self.tape
            .unary("cos", self.idx, |x| x.cos(), Op::Cos(self.idx))
    }

    /// Inverse sine; errors for inputs outside `[-1, 1]`.
    pub fn asin(self) -> Result<Self> {
        if let Some(bad) = self.value_ref().data().iter().find(|x| x.abs() > T::one()) {
            return Err(DiffError::Domain {
                op: "asin",
                detail: format!("{bad} not in [-1, 1]"),
            });
        }
        self.tape
            .unary("asin", self.idx, |x| x.asin(), Op::Asin(self.idx))
    }

    pub fn exp(self) -> Result<Self> {
        self.tape
            .unary("exp", self.idx, |x| x.exp(), Op::Exp(self.idx))
    }

    pub fn log(self) -> Result<Self> {
        if let Some(bad) = self.value_ref().data().iter().find(|x| **x <= T::zero()) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("{bad} is not positive"),
            });
        }
        self.tape
            .unary("log", self.idx, |x| x.ln(), Op::Log(self.idx))
    }

    pub fn square(self) -> Result<Self> {
        self.tape
            .unary("square", self.idx, |x| x * x, Op::Square(self.idx))
    }

    /// Elementwise clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(self, lo: T, hi: T) -> Result<Self> {
        self.tape.unary(
            "clamp",
            self.idx,
            |x| x.max(lo).min(hi),
            Op::Clamp {
                a: self.idx,
                lo,
                hi,
            },
        )
    }

    pub fn sum(self) -> Result<Self> {
        let value = Tensor::scalar(self.value_ref().sum());
        let rg = self.tape.needs(self.idx);
        self.tape.checked("sum", value, Op::Sum(self.idx), rg)
    }

    pub fn mean(self) -> Result<Self> {
        let value = {
            let v = self.value_ref();
            if v.is_empty() {
                return Err(DiffError::Domain {
                    op: "mean",
                    detail: "empty tensor".into(),
                });
            }
            Tensor::scalar(v.sum() / T::from_usize(v.len()).unwrap())
        };
        let rg = self.tape.needs(self.idx);
        self.tape.checked("mean", value, Op::Mean(self.idx), rg)
    }

    /// Column sums: `(r, c) -> (1, c)`.
    pub fn sum_rows(self) -> Result<Self> {
        let value = {
            let v = self.value_ref();
            let (r, c) = v.dims2();
            let mut d = vec![T::zero(); c];
            for row in 0..r {
                for col in 0..c {
                    d[col] = d[col] + v.data()[row * c + col];
                }
            }
            Tensor::matrix(1, c, d)
        };
        let rg = self.tape.needs(self.idx);
        self.tape
            .checked("sum_rows", value, Op::SumRows(self.idx), rg)
    }

    /// Row sums: `(r, c) -> (r, 1)`.
    pub fn sum_cols(self) -> Result<Self> {
        let value = {
            let v = self.value_ref();
            let (r, c) = v.dims2();
            let d = (0..r)
                .map(|row| v.data()[row * c..(row + 1) * c].iter().copied().sum())
                .collect();
            Tensor::matrix(r, 1, d)
        };
        let rg = self.tape.needs(self.idx);
        self.tape
            .checked("sum_cols", value, Op::SumCols(self.idx), rg)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let value = {
            let v = self.value_ref();
            let (r, c) = v.dims2();
            let extent = if axis == 0 { r } else { c };
            if axis > 1 || v.rank() > 2 || start + len > extent {
                return Err(DiffError::ShapeMismatch {
                    op: "slice",
                    lhs: v.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            if axis == 0 {
                let data = v.data()[start * c..(start + len) * c].to_vec();
                if v.rank() == 1 {
                    Tensor::vector(data)
                } else {
                    Tensor::matrix(len, c, data)
                }
            } else {
                let mut data = Vec::with_capacity(r * len);
                for row in 0..r {
                    data.extend_from_slice(&v.data()[row * c + start..row * c + start + len]);
                }
                Tensor::matrix(r, len, data)
            }
        };
        let rg = self.tape.needs(self.idx);
        self.tape.checked(
            "slice",
            value,
            Op::Slice {
                a: self.idx,
                axis,
                start,
            },
            rg,
        )
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn cols(self, start: usize, len: usize) -> Result<Self> {
        self.slice(1, start, len)
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn rows(self, start: usize, len: usize) -> Result<Self> {
        self.slice(0, start, len)
    }

    /// Replicates a scalar, a row `(1, c)`/`(c)` or a column `(r, 1)` to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        let value = {
            let v = self.value_ref();
            if v.len() == 1 {
                Tensor::full(shape, v.data()[0])
            } else if shape.len() == 2 {
                let (r, c) = (shape[0], shape[1]);
                let is_row = (v.rank() == 1 && v.len() == c) || v.shape() == [1, c].as_slice();
                let is_col = v.shape() == [r, 1].as_slice();
                if is_row {
                    Tensor::from_fn(shape, |k| v.data()[k % c])
                } else if is_col {
                    Tensor::from_fn(shape, |k| v.data()[k / c])
                } else if v.shape() == shape {
                    v.clone()
                } else {
                    return Err(DiffError::ShapeMismatch {
                        op: "broadcast",
                        lhs: v.shape().to_vec(),
                        rhs: shape.to_vec(),
                    });
                }
            } else if v.shape() == shape {
                v.clone()
            } else {
                return Err(DiffError::ShapeMismatch {
                    op: "broadcast",
                    lhs: v.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        };
        let rg = self.tape.needs(self.idx);
        self.tape
            .checked("broadcast", value, Op::Broadcast(self.idx), rg)
    }

    /// Adds a row vector (bias) to every row of a matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                lhs: shape,
                rhs: row.shape(),
            });
        }
        self.add(row.broadcast_to(&shape)?)
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Self> {
        let shape = self.shape();
        self.mul(row.broadcast_to(&shape)?)
    }
}
