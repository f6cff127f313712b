//! Define-by-run tape. Every forward pass builds a fresh tape; nodes are
//! appended in execution order, so node order is a topological order.

use std::collections::{BTreeMap, HashMap};

use super::kernels as k;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Constant,
    Variable,
    Param(ParamId),
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Powf(Var, T),
    Reshape(Var),
    Concat(Vec<Var>),
    SumAll(Var),
    SumAxis(Var),
    Conv1d { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    AvgPoolGlobal(Var),
    NormalizeRows { x: Var, norms: Vec<T> },
    StandardizeRows { x: Var, inv_std: Vec<T> },
    Upsample(Var),
    Bce { p: Var, target: Tensor<T>, eps: T },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape on which parameters do not require gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Variable, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let rg = self.grad_enabled;
        self.push(value, Op::Param(id), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = k::matmul(self.value(a), self.value(b))?;
        self.push_checked("matmul", v, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = k::transpose(self.value(a))?;
        self.push_checked("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = k::add(self.value(a), self.value(b))?;
        self.push_checked("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = k::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        self.push_checked("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = k::mul(self.value(a), self.value(b))?;
        self.push_checked("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push_checked("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = k::relu(self.value(a));
        self.push_checked("relu", v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = k::sigmoid(self.value(a));
        self.push_checked("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    /// Elementwise power; inputs must be positive where the result is used.
    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(p));
        self.push_checked("powf", v, Op::Powf(a, p), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push_checked("reshape", v, Op::Reshape(a), &[a])
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = k::concat0(&tensors)?;
        self.push_checked("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_checked("sum_all", v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = k::sum_axis(self.value(a), axis)?;
        self.push_checked("sum_axis", v, Op::SumAxis(a), &[a])
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = k::conv1d(self.value(x), self.value(w), self.value(b))?;
        self.push_checked("conv1d", v, Op::Conv1d { x, w, b }, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let v = k::conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        self.push_checked("conv2d", v, Op::Conv2d { x, w, b, stride }, &[x, w, b])
    }

    pub fn avg_pool_global(&mut self, a: Var) -> Result<Var> {
        let v = k::avg_pool_global(self.value(a))?;
        self.push_checked("avg_pool_global", v, Op::AvgPoolGlobal(a), &[a])
    }

    /// Unit-normalize rows of a matrix; zero rows map to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (v, norms) = k::normalize_rows(self.value(a))?;
        self.push_checked("normalize_rows", v, Op::NormalizeRows { x: a, norms }, &[a])
    }

    /// Per-row zero mean / unit variance.
    pub fn standardize_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let (v, inv_std) = k::standardize_rows(self.value(a), eps)?;
        self.push_checked("standardize_rows", v, Op::StandardizeRows { x: a, inv_std }, &[a])
    }

    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = k::upsample_bilinear(self.value(a), out_h, out_w)?;
        self.push_checked("upsample_bilinear", v, Op::Upsample(a), &[a])
    }

    /// Mean binary cross-entropy of probabilities `p` against a 0/1 target,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(Error::shapes("bce", pv.shape(), target.shape()));
        }
        let n = T::of(pv.len() as f64);
        let one = T::one();
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &m)| {
                let q = q.max(eps).min(one - eps);
                -(m * q.ln() + (one - m) * (one - q).ln())
            })
            .sum();
        let v = Tensor::scalar(total / n);
        self.push_checked(
            "bce",
            v,
            Op::Bce {
                p,
                target: target.clone(),
                eps,
            },
            &[p],
        )
    }

    /// Reverse sweep from the scalar `output`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if !self.value(output).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.shape(output), vec![T::one()])?);
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            match node.op {
                Op::Param(id) => {
                    accumulate(result.params.entry(id), g)?;
                }
                Op::Variable => {
                    result.vars.insert(idx, g);
                }
                _ => {}
            }
            for (var, cg) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => *acc = k::add(acc, &cg)?,
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(result)
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => vec![],
            Op::Matmul(a, b) => {
                let ga = k::matmul(g, &k::transpose(val(*b))?)?;
                let gb = k::matmul(&k::transpose(val(*a))?, g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, k::transpose(g)?)],
            Op::Add(a, b) => vec![
                (*a, k::reduce_to_shape(g, val(*a).shape())?),
                (*b, k::reduce_to_shape(g, val(*b).shape())?),
            ],
            Op::Sub(a, b) => vec![
                (*a, k::reduce_to_shape(g, val(*a).shape())?),
                (*b, k::reduce_to_shape(&g.map(|x| -x), val(*b).shape())?),
            ],
            Op::Mul(a, b) => {
                let ga = k::mul(g, val(*b))?;
                let gb = k::mul(g, val(*a))?;
                vec![
                    (*a, k::reduce_to_shape(&ga, val(*a).shape())?),
                    (*b, k::reduce_to_shape(&gb, val(*b).shape())?),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::Relu(a) => {
                let ga = k::broadcast_binary(g, val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                vec![(*a, ga)]
            }
            Op::Sigmoid(a) => {
                let ga = k::broadcast_binary(g, &node.value, |gv, y| gv * y * (T::one() - y))?;
                vec![(*a, ga)]
            }
            Op::Powf(a, p) => {
                let pm1 = *p - T::one();
                let ga = k::broadcast_binary(g, val(*a), |gv, x| gv * *p * x.powf(pm1))?;
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    out.push((p, Tensor::new(val(p).shape(), slice)?));
                    offset += n;
                }
                out
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::SumAxis(a) => {
                let ga = k::broadcast_binary(&Tensor::zeros(val(*a).shape()), g, |_, gv| gv)?;
                vec![(*a, ga)]
            }
            Op::Conv1d { x, w, b } => {
                let (gx, gw, gb) = k::conv1d_backward(val(*x), val(*w), g)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Conv2d { x, w, b, stride } => {
                let (gx, gw, gb) = k::conv2d_backward(val(*x), val(*w), g, *stride)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::AvgPoolGlobal(a) => {
                let xs = val(*a).shape();
                let c = xs[0];
                let n = val(*a).len() / c;
                let inv = T::one() / T::of(n as f64);
                let mut ga = Vec::with_capacity(c * n);
                for ch in 0..c {
                    ga.extend(std::iter::repeat_n(g.data()[ch] * inv, n));
                }
                vec![(*a, Tensor::new(xs, ga)?)]
            }
            Op::NormalizeRows { x, norms } => {
                vec![(*x, k::normalize_rows_backward(&node.value, norms, g))]
            }
            Op::StandardizeRows { x, inv_std } => {
                vec![(*x, k::standardize_rows_backward(&node.value, inv_std, g))]
            }
            Op::Upsample(a) => vec![(*a, k::upsample_bilinear_backward(val(*a).shape(), g)?)],
            Op::Bce { p, target, eps } => {
                let pv = val(*p);
                let n = T::of(pv.len() as f64);
                let one = T::one();
                let scale = g.data()[0] / n;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&q, &m)| {
                        if q < *eps || q > one - *eps {
                            T::zero()
                        } else {
                            scale * (-m / q + (one - m) / (one - q))
                        }
                    })
                    .collect();
                vec![(*p, Tensor::new(pv.shape(), data)?)]
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Scalar>(
    entry: std::collections::btree_map::Entry<'_, ParamId, Tensor<T>>,
    g: Tensor<T>,
) -> Result<()> {
    use std::collections::btree_map::Entry;
    match entry {
        Entry::Vacant(e) => {
            e.insert(g);
        }
        Entry::Occupied(mut e) => {
            let sum = k::add(e.get(), &g)?;
            *e.get_mut() = sum;
        }
    }
    Ok(())
}

/// Result of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar> {
    params: BTreeMap<ParamId, Tensor<T>>,
    vars: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter, `None` if the output does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient for a leaf created with [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }

    /// `grad += scale * g` for every parameter reached by this pass.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) {
        for (&id, g) in &self.params {
            let p = store.get_mut(id);
            for (acc, &gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc = *acc + scale * gv;
            }
        }
    }
}
