use std::cell::RefCell;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    L1Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
    },
    GradReverse(Var, T),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ColumnKurtosis(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    // Leaf gradients persist across backward calls until `zero_grad`.
    grad: Option<Vec<T>>,
}

/// Elementwise primitives with one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Exp,
    Log,
    Abs,
}

/// Whole-tensor reductions to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Mean of absolute values over every element.
    L1Mean,
}

/// Columns whose variance falls below this are skipped by the kurtosis op.
pub const KURTOSIS_MIN_VARIANCE: f64 = 1e-12;
/// Lower bound on the standard deviation used for normalization.
pub const KURTOSIS_STD_GUARD: f64 = 1e-8;

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep. The tape uses
/// interior mutability so that nested calls such as
/// `g.tanh(g.add_row(g.matmul(x, w)?, b)?)` compile; it is not `Sync`.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

// Value at position i of an operand that is either full-size or a broadcast scalar.
#[inline]
fn at<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
        None => *slot = Some(contrib),
    }
}

// Reduces a full-size gradient onto an operand that may have been broadcast.
fn reduce_to<T: Scalar>(g: Vec<T>, len: usize) -> Vec<T> {
    if len == 1 && g.len() != 1 {
        vec![g.into_iter().sum()]
    } else {
        g
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

struct KurtosisColumn<T> {
    centered: Vec<T>,
    m2: T,
    m4: T,
}

fn kurtosis_columns<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<Option<KurtosisColumn<T>>> {
    let n = T::from_usize_lossy(rows);
    (0..cols)
        .map(|j| {
            let mean = (0..rows).map(|i| x[i * cols + j]).sum::<T>() / n;
            let centered: Vec<T> = (0..rows).map(|i| x[i * cols + j] - mean).collect();
            let m2 = centered.iter().map(|&c| c * c).sum::<T>() / n;
            if m2 < T::lit(KURTOSIS_MIN_VARIANCE) {
                return None;
            }
            let m4 = centered.iter().map(|&c| (c * c) * (c * c)).sum::<T>() / n;
            Some(KurtosisColumn { centered, m2, m4 })
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.len() {
            return Err(Error::arg(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it is differentiable iff the tensor requires grad.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Copies the value of `v` into a fresh tensor with no gradient.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well formed")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        match nodes[v.0].value.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::arg(format!("expected scalar, got shape {:?}", nodes[v.0].shape))),
        }
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<Vec<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (value, m, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k) = matrix_dims("matmul", &na.shape)?;
            let (k2, n) = matrix_dims("matmul", &nb.shape)?;
            if k != k2 {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = na.value[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &nb.value[p * n..(p + 1) * n];
                    row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
                }
            }
            (out, m, n)
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let shape = broadcast_shape(name, &na.shape, &nb.shape)?;
            let len: usize = shape.iter().product();
            let value = (0..len).map(|i| f(at(&na.value, i), at(&nb.value, i))).collect();
            (shape, value)
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            let (r, c) = matrix_dims("add_row", &nx.shape)?;
            if nb.value.len() != c {
                return Err(Error::Dimension {
                    op: "add_row",
                    lhs: nx.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let mut v = nx.value.clone();
            for i in 0..r {
                v[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&nb.value)
                    .for_each(|(o, &b)| *o += b);
            }
            (vec![r, c], v)
        };
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(shape, value, Op::AddRow(x, bias), rg))
    }

    fn map_unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn unary(&self, op: Unary, x: Var) -> Result<Var> {
        match op {
            Unary::Relu => self.map_unary(x, |v| v.max(T::zero()), Op::Relu(x)),
            Unary::Tanh => self.map_unary(x, T::tanh, Op::Tanh(x)),
            Unary::Exp => self.map_unary(x, T::exp, Op::Exp(x)),
            Unary::Abs => self.map_unary(x, T::abs, Op::Abs(x)),
            Unary::Log => {
                self.check(x)?;
                if let Some(bad) = self.nodes.borrow()[x.0].value.iter().find(|&&v| v <= T::zero()) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                self.map_unary(x, T::ln, Op::Log(x))
            }
        }
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn reduce(&self, op: Reduction, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            if v.is_empty() {
                return Err(Error::arg("reduction of an empty tensor"));
            }
            let n = T::from_usize_lossy(v.len());
            match op {
                Reduction::Sum => v.iter().copied().sum(),
                Reduction::Mean => v.iter().copied().sum::<T>() / n,
                Reduction::L1Mean => v.iter().map(|x| x.abs()).sum::<T>() / n,
            }
        };
        let node_op = match op {
            Reduction::Sum => Op::Sum(x),
            Reduction::Mean => Op::Mean(x),
            Reduction::L1Mean => Op::L1Mean(x),
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(vec![1], vec![value], node_op, rg))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, x)
    }

    pub fn l1_mean(&self, x: Var) -> Result<Var> {
        self.reduce(Reduction::L1Mean, x)
    }

    /// Row-wise softmax of an `n×c` matrix.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (r, c) = matrix_dims("softmax_rows", &n.shape)?;
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                softmax_into(&n.value[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
            }
            (n.shape.clone(), out)
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(shape, value, Op::SoftmaxRows(x), rg))
    }

    /// Mean (or weighted mean) of `-log softmax(logits)[label]` over rows.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize], weights: Option<&[T]>) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[logits.0];
            let (r, c) = matrix_dims("softmax_cross_entropy", &n.shape)?;
            if labels.len() != r {
                return Err(Error::Dimension {
                    op: "softmax_cross_entropy",
                    lhs: n.shape.clone(),
                    rhs: vec![labels.len()],
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
            }
            let total_w = match weights {
                Some(w) => {
                    if w.len() != r {
                        return Err(Error::Dimension {
                            op: "softmax_cross_entropy",
                            lhs: n.shape.clone(),
                            rhs: vec![w.len()],
                        });
                    }
                    if w.iter().any(|&v| v < T::zero() || !v.is_finite()) {
                        return Err(Error::arg("sample weights must be finite and nonnegative"));
                    }
                    let s: T = w.iter().copied().sum();
                    if s <= T::zero() {
                        return Err(Error::arg("sample weights sum to zero"));
                    }
                    s
                }
                None => T::from_usize_lossy(r),
            };
            let mut probs = vec![T::zero(); r * c];
            let mut loss = T::zero();
            for i in 0..r {
                let row = &n.value[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                let wi = weights.map_or(T::one(), |w| w[i]);
                loss += wi * (lse - row[labels[i]]);
                softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            }
            (loss / total_w, probs)
        };
        let rg = self.needs_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            weights: weights.map(<[T]>::to_vec),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    /// Identity forward; backward scales the incoming gradient by `-lambda`.
    ///
    /// `lambda = -1` makes the node a transparent identity, which is how the
    /// finite-difference checks see through it.
    pub fn grad_reverse(&self, x: Var, lambda: T) -> Result<Var> {
        if !lambda.is_finite() {
            return Err(Error::arg("gradient reversal coefficient must be finite"));
        }
        self.map_unary(x, |v| v, Op::GradReverse(x, lambda))
    }

    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.tensor(x).select_rows(idx)?;
        let rg = self.needs_grad(&[x]);
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::SelectRows(x, idx.to_vec()), rg))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.tensor(p)).collect();
        let refs: Vec<&Tensor<T>> = tensors.iter().collect();
        let t = Tensor::concat_rows(&refs)?;
        let rg = self.needs_grad(parts);
        let shape = vec![t.rows(), t.cols()];
        Ok(self.push(shape, t.into_data(), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Excess kurtosis per column of an `n×d` matrix, averaged over the
    /// columns whose variance is at least [`KURTOSIS_MIN_VARIANCE`].
    pub fn column_kurtosis(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (r, c) = matrix_dims("column_kurtosis", &n.shape)?;
            if r < 4 {
                return Err(Error::Degenerate(format!("kurtosis needs at least 4 rows, got {r}")));
            }
            let cols = kurtosis_columns(&n.value, r, c);
            let valid: Vec<T> = cols
                .iter()
                .flatten()
                .map(|k| {
                    let s2 = k.m2.max(T::lit(KURTOSIS_STD_GUARD * KURTOSIS_STD_GUARD));
                    let second = k.m2 / s2;
                    k.m4 / (s2 * s2) - T::lit(3.0) * second * second
                })
                .collect();
            if valid.is_empty() {
                return Err(Error::Degenerate("every column has zero variance".into()));
            }
            valid.iter().copied().sum::<T>() / T::from_usize_lossy(valid.len())
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(vec![1], vec![value], Op::ColumnKurtosis(x), rg))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                accumulate(&mut nodes[id].grad, gout);
                continue;
            }
            let node = &nodes[id];
            let mut send = |v: Var, g: Vec<T>| {
                if nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], g);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                    let (m, k) = (na.shape[0], na.shape[1]);
                    let n = nb.shape[1];
                    if na.requires_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![T::zero(); m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    s += gout[i * n + j] * nb.value[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        send(*a, da);
                    }
                    if nb.requires_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![T::zero(); k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = na.value[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += aip * gout[i * n + j];
                                }
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, reduce_to(gout.clone(), nodes[a.0].value.len()));
                    send(*b, reduce_to(gout, nodes[b.0].value.len()));
                }
                Op::Sub(a, b) => {
                    let neg = gout.iter().map(|&g| -g).collect();
                    send(*a, reduce_to(gout, nodes[a.0].value.len()));
                    send(*b, reduce_to(neg, nodes[b.0].value.len()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = gout.iter().enumerate().map(|(i, &g)| g * at(vb, i)).collect();
                    let gb = gout.iter().enumerate().map(|(i, &g)| g * at(va, i)).collect();
                    send(*a, reduce_to(ga, va.len()));
                    send(*b, reduce_to(gb, vb.len()));
                }
                Op::AddRow(x, bias) => {
                    let c = nodes[bias.0].value.len();
                    let mut gb = vec![T::zero(); c];
                    for row in gout.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
                    }
                    send(*x, gout);
                    send(*bias, gb);
                }
                Op::Scale(x, c) => send(*x, gout.iter().map(|&g| g * *c).collect()),
                Op::Relu(x) => {
                    let v = &nodes[x.0].value;
                    let g = gout
                        .iter()
                        .zip(v)
                        .map(|(&g, &xv)| if xv > T::zero() { g } else { T::zero() })
                        .collect();
                    send(*x, g);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let g = gout.iter().zip(y).map(|(&g, &yv)| g * (T::one() - yv * yv)).collect();
                    send(*x, g);
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    send(*x, gout.iter().zip(y).map(|(&g, &yv)| g * yv).collect());
                }
                Op::Log(x) => {
                    let v = &nodes[x.0].value;
                    send(*x, gout.iter().zip(v).map(|(&g, &xv)| g / xv).collect());
                }
                Op::Abs(x) => {
                    let v = &nodes[x.0].value;
                    let g = gout.iter().zip(v).map(|(&g, &xv)| g * sign(xv)).collect();
                    send(*x, g);
                }
                Op::Sum(x) => send(*x, vec![gout[0]; nodes[x.0].value.len()]),
                Op::Mean(x) => {
                    let len = nodes[x.0].value.len();
                    send(*x, vec![gout[0] / T::from_usize_lossy(len); len]);
                }
                Op::L1Mean(x) => {
                    let v = &nodes[x.0].value;
                    let scale = gout[0] / T::from_usize_lossy(v.len());
                    send(*x, v.iter().map(|&xv| scale * sign(xv)).collect());
                }
                Op::SoftmaxRows(x) => {
                    let c = node.shape[1];
                    let y = &node.value;
                    let mut g = vec![T::zero(); y.len()];
                    for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gr[j] = yr[j] * (dr[j] - dot);
                        }
                    }
                    send(*x, g);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let c = nodes[logits.0].shape[1];
                    let total_w = match weights {
                        Some(w) => w.iter().copied().sum(),
                        None => T::from_usize_lossy(labels.len()),
                    };
                    let mut g = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        g[i * c + label] -= T::one();
                        let wi = weights.as_ref().map_or(T::one(), |w| w[i]);
                        let s = gout[0] * wi / total_w;
                        g[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s);
                    }
                    send(*logits, g);
                }
                Op::GradReverse(x, lambda) => {
                    send(*x, gout.iter().map(|&g| -*lambda * g).collect());
                }
                Op::SelectRows(x, idx) => {
                    let nx = &nodes[x.0];
                    let c = nx.value.len() / nx.shape[0];
                    let mut g = vec![T::zero(); nx.value.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[src * c + j] += gout[r * c + j];
                        }
                    }
                    send(*x, g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        send(*p, gout[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::ColumnKurtosis(x) => {
                    let nx = &nodes[x.0];
                    let (r, c) = (nx.shape[0], nx.shape[1]);
                    let cols = kurtosis_columns(&nx.value, r, c);
                    let valid = cols.iter().flatten().count();
                    let n = T::from_usize_lossy(r);
                    let scale = gout[0] / T::from_usize_lossy(valid);
                    let mut g = vec![T::zero(); r * c];
                    let guard = T::lit(KURTOSIS_STD_GUARD * KURTOSIS_STD_GUARD);
                    for (j, col) in cols.iter().enumerate() {
                        let Some(k) = col else { continue };
                        // Included columns have variance far above the guard, so the
                        // normalized second moment is identically 1 and carries no
                        // gradient; only m4 / m2² contributes.
                        let s2 = k.m2.max(guard);
                        let dk_dm4 = T::one() / (s2 * s2);
                        let dk_dm2 = -T::lit(2.0) * k.m4 / (s2 * s2 * s2);
                        let mean_c3 = k.centered.iter().map(|&v| v * v * v).sum::<T>() / n;
                        let four = T::lit(4.0) / n;
                        let two = T::lit(2.0) / n;
                        for i in 0..r {
                            let ci = k.centered[i];
                            let dm4 = four * (ci * ci * ci - mean_c3);
                            let dm2 = two * ci;
                            g[i * c + j] = scale * (dk_dm4 * dm4 + dk_dm2 * dm2);
                        }
                    }
                    send(*x, g);
                }
            }
        }
        Ok(())
    }
}

// Subgradient of |x| and the relu kink both resolve to 0 at exactly 0.
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
