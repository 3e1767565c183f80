//! Elementwise, reduction and structural ops on [`Graph`].

use super::graph::{Backward, Graph, Var};
use super::{strides, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.is_scalar() {
        Ok(Broadcast::LhsScalar)
    } else if b.is_scalar() {
        Ok(Broadcast::RhsScalar)
    } else {
        Err(Error::ShapeMismatch(format!("{:?} vs {:?} (only scalar broadcasting)", a.shape(), b.shape())))
    }
}

fn binary_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    match kind {
        Broadcast::Same => a.zip_map(b, f).expect("same shape"),
        Broadcast::LhsScalar => {
            let s = a.item();
            b.map(|v| f(s, v))
        }
        Broadcast::RhsScalar => {
            let s = b.item();
            a.map(|v| f(v, s))
        }
    }
}

/// Reduces a full-size gradient to the shape of an operand that was broadcast.
fn fold_to<T: Real>(g: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::new(target.shape(), vec![g.sum()]).expect("scalar target")
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    kind: BinaryKind,
    broadcast: Broadcast,
}

impl<T: Real> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            let g = match self.kind {
                BinaryKind::Add | BinaryKind::Sub => grad.clone(),
                BinaryKind::Mul => binary_forward(grad, b, broadcast_for_grad(self.broadcast, false), |g, y| g * y),
            };
            fold_to(g, a)
        });
        let gb = needs[1].then(|| {
            let g = match self.kind {
                BinaryKind::Add => grad.clone(),
                BinaryKind::Sub => grad.map(|g| -g),
                BinaryKind::Mul => binary_forward(grad, a, broadcast_for_grad(self.broadcast, true), |g, x| g * x),
            };
            fold_to(g, b)
        });
        Ok(vec![ga, gb])
    }
}

/// `grad` always has the full output shape; the other operand may be scalar.
fn broadcast_for_grad(kind: Broadcast, grad_for_rhs: bool) -> Broadcast {
    match (kind, grad_for_rhs) {
        (Broadcast::Same, _) => Broadcast::Same,
        // d/da of a*b where b is scalar: grad * b(scalar)
        (Broadcast::RhsScalar, false) => Broadcast::RhsScalar,
        // d/db where b is scalar: grad * a(full), summed later
        (Broadcast::RhsScalar, true) => Broadcast::Same,
        (Broadcast::LhsScalar, false) => Broadcast::Same,
        (Broadcast::LhsScalar, true) => Broadcast::RhsScalar,
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Scale(f64),
}

struct UnaryOp {
    kind: UnaryKind,
}

impl<T: Real> Backward<T> for UnaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Scale(_) => "scale",
        }
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = match self.kind {
            UnaryKind::Tanh => grad.zip_map(out, |g, y| g * (T::one() - y * y))?,
            UnaryKind::Sigmoid => grad.zip_map(out, |g, y| g * y * (T::one() - y))?,
            UnaryKind::Relu => grad.zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() })?,
            UnaryKind::Exp => grad.zip_map(out, |g, y| g * y)?,
            UnaryKind::Scale(c) => {
                let c = T::lit(c);
                grad.map(|g| g * c)
            }
        };
        Ok(vec![Some(g)])
    }
}

struct MatMulOp;

impl<T: Real> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = a.as_matrix()?;
        let (_, n) = b.as_matrix()?;
        // dA = dC·Bᵀ
        let ga = needs[0].then(|| {
            let mut out = vec![T::zero(); m * k];
            T::gemm(m, n, k, T::one(), grad.data(), (n, 1), b.data(), (1, n), T::zero(), &mut out, (k, 1));
            Tensor::new(&[m, k], out).expect("dA shape")
        });
        // dB = Aᵀ·dC
        let gb = needs[1].then(|| {
            let mut out = vec![T::zero(); k * n];
            T::gemm(k, m, n, T::one(), a.data(), (1, k), grad.data(), (n, 1), T::zero(), &mut out, (n, 1));
            Tensor::new(&[k, n], out).expect("dB shape")
        });
        Ok(vec![ga, gb])
    }
}

struct RowBiasOp;

impl<T: Real> Backward<T> for RowBiasOp {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let width = inputs[1].numel();
        let gb = needs[1].then(|| {
            let mut acc = vec![T::zero(); width];
            for row in grad.data().chunks(width) {
                for (a, &g) in acc.iter_mut().zip(row) {
                    *a += g;
                }
            }
            Tensor::new(inputs[1].shape(), acc).expect("bias shape")
        });
        Ok(vec![needs[0].then(|| grad.clone()), gb])
    }
}

struct LogSoftmaxOp;

impl<T: Real> Backward<T> for LogSoftmaxOp {
    fn name(&self) -> &'static str {
        "log_softmax"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let width = *out.shape().last().expect("log_softmax rank >= 1");
        let mut g = vec![T::zero(); out.numel()];
        for ((gi, yo), go) in g.chunks_mut(width).zip(out.data().chunks(width)).zip(grad.data().chunks(width)) {
            let total: T = go.iter().copied().sum();
            for ((dst, &y), &gy) in gi.iter_mut().zip(yo).zip(go) {
                *dst = gy - y.exp() * total;
            }
        }
        Ok(vec![Some(Tensor::new(out.shape(), g)?)])
    }
}

struct SumOp {
    scale: f64,
}

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.item() * T::lit(self.scale);
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g))])
    }
}

struct ReshapeOp;

impl<T: Real> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.reshape(inputs[0].shape())?)])
    }
}

fn permute_data<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    let data = x.data();
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl<T: Real> Backward<T> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(permute_data(grad, &self.inverse))])
    }
}

/// View of `shape` as (outer, axis, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct NarrowOp {
    axis: usize,
    start: usize,
}

impl<T: Real> Backward<T> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (outer, full, inner) = split_axis(inputs[0].shape(), self.axis);
        let len = out.shape()[self.axis];
        let mut g = vec![T::zero(); inputs[0].numel()];
        for o in 0..outer {
            let src = &grad.data()[o * len * inner..(o + 1) * len * inner];
            let dst = o * full * inner + self.start * inner;
            g[dst..dst + len * inner].copy_from_slice(src);
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), g)?)])
    }
}

struct ConcatOp {
    axis: usize,
}

impl<T: Real> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (outer, total, inner) = split_axis(out.shape(), self.axis);
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let len = x.shape()[self.axis];
            if need {
                let mut g = Vec::with_capacity(x.numel());
                for o in 0..outer {
                    let base = o * total * inner + start * inner;
                    g.extend_from_slice(&grad.data()[base..base + len * inner]);
                }
                grads.push(Some(Tensor::new(x.shape(), g)?));
            } else {
                grads.push(None);
            }
            start += len;
        }
        Ok(grads)
    }
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = broadcast_kind(va, vb)?;
        let out = match kind {
            BinaryKind::Add => binary_forward(va, vb, broadcast, |x, y| x + y),
            BinaryKind::Sub => binary_forward(va, vb, broadcast, |x, y| x - y),
            BinaryKind::Mul => binary_forward(va, vb, broadcast, |x, y| x * y),
        };
        self.apply(Box::new(BinaryOp { kind, broadcast }), &[a, b], out)
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// Elementwise (Hadamard) product; one side may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(x).map(f);
        self.apply(Box::new(UnaryOp { kind }), &[x], out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp, |v| v.exp())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::lit(c);
        self.unary(x, UnaryKind::Scale(c), |v| v * k)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.apply(Box::new(MatMulOp), &[a, b], out)
    }

    /// Adds a `[n]` bias to every length-`n` row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let width = vb.numel();
        if vb.ndim() != 1 || vx.shape().last() != Some(&width) {
            return Err(Error::ShapeMismatch(format!("row bias {:?} for {:?}", vb.shape(), vx.shape())));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(width) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        self.apply(Box::new(RowBiasOp), &[x, bias], out)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let width = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::ShapeMismatch("log_softmax on a rank-0 tensor".into()))?;
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.apply(Box::new(LogSoftmaxOp), &[x], out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.apply(Box::new(SumOp { scale: 1.0 }), &[x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.numel() as f64;
        let s = v.sum() / T::lit(n);
        self.apply(Box::new(SumOp { scale: 1.0 / n }), &[x], Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.apply(Box::new(ReshapeOp), &[x], out)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.ndim()];
        if axes.len() != vx.ndim() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch(format!("permutation {axes:?} for rank {}", vx.ndim())));
        }
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = permute_data(vx, axes);
        self.apply(Box::new(PermuteOp { inverse }), &[x], out)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || len == 0 || start + len > vx.shape()[axis] {
            return Err(Error::ShapeMismatch(format!(
                "narrow axis {axis} [{start}, {}) of {:?}",
                start + len,
                vx.shape()
            )));
        }
        let (outer, full, inner) = split_axis(vx.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        self.apply(Box::new(NarrowOp { axis, start }), &[x], out)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?);
        if axis >= first.ndim() {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} for rank {}", first.ndim())));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == shape.len() && s.iter().zip(&shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch(format!("concat {:?} onto {:?}", s, first.shape())));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.apply(Box::new(ConcatOp { axis }), xs, out)
    }

    /// `x[index]` along the leading axis, dropping that axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!("select on rank-{} tensor", shape.len())));
        }
        let row = self.narrow(x, 0, index, 1)?;
        self.reshape(row, &shape[1..])
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut shape = vec![1];
            shape.extend_from_slice(self.value(x).shape());
            lifted.push(self.reshape(x, &shape)?);
        }
        self.concat(&lifted, 0)
    }

    /// `Σ x ⊙ w` for a constant weight tensor; handy for projecting outputs
    /// to a scalar in gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let w = self.constant(weights);
        let prod = self.mul(x, w)?;
        self.sum(prod)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[11.]);

        assert!(matches!(g.matmul(a, a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor::<f64>(&[3, 4], 1.0, &mut rng);
        let b = random_tensor::<f64>(&[4, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((g.value(c).data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[0.5, -2., 7.]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[2., -1.]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4., -2.]);
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[0.3, -1.7, 2.2]), true);
        let y = g.tanh(x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().clone();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::DetachedGraph(_))));
        let mut other = Graph::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(g.backward(y), Err(Error::DetachedGraph(_))));
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::scalar(0.0), true);
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(th).item(), 0.0);
        let sg = g.sigmoid(z).unwrap();
        g.backward(sg).unwrap();
        assert_eq!(g.grad(z).unwrap().item(), 0.25);

        let x = g.constant(t(&[2], &[0., 0.]));
        let ls = g.log_softmax(x).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(g.value(ls).data().iter().all(|&v| (v + ln2).abs() < 1e-15));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[5, 7], 10.0, &mut rng));
        let ls = g.log_softmax(x).unwrap();
        for row in g.value(ls).data().chunks(7) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[800.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 2], &[1., 2., 3., 4.]), true);
        let s = g.leaf(Tensor::scalar(3.0), true);
        let p = g.mul(s, a).unwrap();
        assert_eq!(g.value(p).data(), &[3., 6., 9., 12.]);
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(s).unwrap().item(), 10.0);
        assert_eq!(g.grad(a).unwrap().data(), &[3.; 4]);
        let b = g.constant(t(&[2], &[1., 1.]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn structural_ops_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let a = g.narrow(x, 2, 0, 1).unwrap();
        let b = g.narrow(x, 2, 1, 3).unwrap();
        let joined = g.concat(&[a, b], 2).unwrap();
        assert_eq!(g.value(joined), g.value(x));
        let rows: Vec<Var> = (0..2).map(|i| g.select(x, i).unwrap()).collect();
        let stacked = g.stack(&rows).unwrap();
        assert_eq!(g.value(stacked), g.value(x));
    }

    #[test]
    fn composite_graph_gradient_check() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                random_tensor::<f64>(&[3, 4], 1.0, &mut rng),
                random_tensor::<f64>(&[4, 5], 1.0, &mut rng),
                random_tensor::<f64>(&[5], 1.0, &mut rng),
            ];
            let proj = random_tensor::<f64>(&[3, 5], 1.0, &mut rng);
            let report = check_gradients(&inputs, 1e-5, |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let b = g.add_row_bias(m, v[2])?;
                let t = g.tanh(b)?;
                let s = g.sigmoid(b)?;
                let r = g.relu(b)?;
                let ts = g.mul(t, s)?;
                let y = g.add(ts, r)?;
                let perm = g.permute(y, &[1, 0])?;
                let back = g.permute(perm, &[1, 0])?;
                let left = g.narrow(back, 1, 0, 2)?;
                let right = g.narrow(back, 1, 2, 3)?;
                let e = g.exp(right)?;
                let cat = g.concat(&[e, left], 1)?;
                let ls = g.log_softmax(cat)?;
                g.weighted_sum(ls, proj.clone())
            })
            .unwrap();
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }
}
