//! Reverse-mode automatic differentiation with higher-order support.
//!
//! Every vector-Jacobian product is expressed with the same differentiable
//! operations as the forward pass, so gradients computed with
//! `create_graph = true` are themselves graph nodes and can be differentiated
//! again. The gradient-inversion attack depends on this: its loss is a
//! function of parameter gradients and is minimized over the input images.
//!
//! Graphs are single-threaded (`Rc`). Parallel work runs one graph per job.

pub mod sparse;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use sparse::{Csr, CsrBuilder, SparsePair};

use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Sqrt(Var),
    SafeRecip(Var),
    Masked(Var, Rc<[f64]>),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Sparse { x: Var, map: Rc<SparsePair>, transposed: bool },
    Reshape(Var),
    SumAll(Var),
    Fill(Var),
    ReduceMid { x: Var, outer: usize, inner: usize },
    ExpandMid { x: Var, outer: usize, inner: usize },
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul { a, b, .. } => vec![a, b],
            Scale(a, _) | Offset(a) | Exp(a) | Log(a) | Powf(a, _) | Sqrt(a) | SafeRecip(a)
            | Masked(a, _) | Reshape(a) | SumAll(a) | Fill(a) => vec![a],
            Sparse { x, .. } | ReduceMid { x, .. } | ExpandMid { x, .. } => vec![x],
        }
    }

    fn into_parents(self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul { a, b, .. } => vec![a, b],
            Scale(a, _) | Offset(a) | Exp(a) | Log(a) | Powf(a, _) | Sqrt(a) | SafeRecip(a)
            | Masked(a, _) | Reshape(a) | SumAll(a) | Fill(a) => vec![a],
            Sparse { x, .. } | ReduceMid { x, .. } | ExpandMid { x, .. } => vec![x],
        }
    }
}

// Long graphs would otherwise drop recursively, one stack frame per node.
impl Drop for Node {
    fn drop(&mut self) {
        let mut stack = std::mem::replace(&mut self.op, Op::Leaf).into_parents();
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.extend(std::mem::replace(&mut node.op, Op::Leaf).into_parents());
            }
        }
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn record(value: Tensor, op: Op) -> Var {
    let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.0.requires_grad);
    Var(Rc::new(Node {
        value,
        op: if requires_grad { op } else { Op::Leaf },
        requires_grad,
    }))
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Var {
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, o: &Var) -> Var {
        let v = elementwise(self.value(), o.value(), |a, b| a + b);
        record(v, Op::Add(self.clone(), o.clone()))
    }

    pub fn sub(&self, o: &Var) -> Var {
        let v = elementwise(self.value(), o.value(), |a, b| a - b);
        record(v, Op::Sub(self.clone(), o.clone()))
    }

    pub fn mul(&self, o: &Var) -> Var {
        let v = elementwise(self.value(), o.value(), |a, b| a * b);
        record(v, Op::Mul(self.clone(), o.clone()))
    }

    pub fn div(&self, o: &Var) -> Var {
        let v = elementwise(self.value(), o.value(), |a, b| a / b);
        record(v, Op::Div(self.clone(), o.clone()))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        record(self.value().map(|v| v * c), Op::Scale(self.clone(), c))
    }

    pub fn offset(&self, c: f64) -> Var {
        record(self.value().map(|v| v + c), Op::Offset(self.clone()))
    }

    pub fn exp(&self) -> Var {
        record(self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        record(self.value().map(f64::ln), Op::Log(self.clone()))
    }

    pub fn powf(&self, p: f64) -> Var {
        record(self.value().map(|v| v.powf(p)), Op::Powf(self.clone(), p))
    }

    /// Square root whose derivative at 0 is taken as 0 (a subgradient of
    /// the norms built on it).
    pub fn sqrt(&self) -> Var {
        record(self.value().map(|v| v.max(0.0).sqrt()), Op::Sqrt(self.clone()))
    }

    /// `1/x`, defined as 0 at `x == 0`.
    fn safe_recip(&self) -> Var {
        let v = self.value().map(|v| if v == 0.0 { 0.0 } else { 1.0 / v });
        record(v, Op::SafeRecip(self.clone()))
    }

    /// Multiplies by a constant array that is not differentiated.
    pub fn masked(&self, mask: Rc<[f64]>) -> Var {
        assert_eq!(mask.len(), self.numel());
        let data = self.value().data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let v = Tensor::from_parts(self.shape().to_vec(), data);
        record(v, Op::Masked(self.clone(), mask))
    }

    pub fn relu(&self) -> Var {
        let mask: Rc<[f64]> = self
            .value()
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.masked(mask)
    }

    /// `ln(1 + e^x)`, evaluated as `relu(x) + ln(1 + e^-|x|)`.
    pub fn softplus(&self) -> Var {
        self.relu().add(&self.abs().neg().exp().offset(1.0).ln())
    }

    pub fn abs(&self) -> Var {
        let mask: Rc<[f64]> = self
            .value()
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
            .collect();
        self.masked(mask)
    }

    /// `op(self) · op(o)` for 2-D operands, `op` being an optional transpose.
    pub fn matmul_t(&self, o: &Var, ta: bool, tb: bool) -> Var {
        let v = matmul_values(self.value(), o.value(), ta, tb);
        record(
            v,
            Op::MatMul {
                a: self.clone(),
                b: o.clone(),
                ta,
                tb,
            },
        )
    }

    pub fn matmul(&self, o: &Var) -> Var {
        self.matmul_t(o, false, false)
    }

    pub fn sparse(&self, map: &Rc<SparsePair>, transposed: bool, shape: &[usize]) -> Var {
        let csr = map.get(transposed);
        assert_eq!(csr.in_len(), self.numel(), "sparse map input size");
        assert_eq!(csr.out_len(), shape.iter().product::<usize>(), "sparse map output size");
        let v = Tensor::from_parts(shape.to_vec(), csr.apply(self.value().data()));
        record(
            v,
            Op::Sparse {
                x: self.clone(),
                map: map.clone(),
                transposed,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.numel(), "reshape size");
        if shape == self.shape() {
            return self.clone();
        }
        let v = Tensor::from_parts(shape.to_vec(), self.value().data().to_vec());
        record(v, Op::Reshape(self.clone()))
    }

    pub fn sum(&self) -> Var {
        record(Tensor::scalar(self.value().sum()), Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Var {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_sq(&self) -> Var {
        self.mul(self).sum()
    }

    pub fn norm2(&self) -> Var {
        self.sum_sq().sqrt()
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn fill(&self, shape: &[usize]) -> Var {
        assert_eq!(self.numel(), 1, "fill needs a scalar");
        record(Tensor::full(shape, self.item()), Op::Fill(self.clone()))
    }

    /// Views `self` as `[outer, mid, inner]` and sums out the outer and inner
    /// axes, returning shape `[mid]`.
    pub fn reduce_mid(&self, outer: usize, mid: usize, inner: usize) -> Var {
        assert_eq!(outer * mid * inner, self.numel(), "reduce_mid size");
        let x = self.value().data();
        let mut out = vec![0.0; mid];
        for o in 0..outer {
            let base = o * mid * inner;
            for (m, acc) in out.iter_mut().enumerate() {
                let s = base + m * inner;
                *acc += x[s..s + inner].iter().sum::<f64>();
            }
        }
        record(
            Tensor::from_parts(vec![mid], out),
            Op::ReduceMid {
                x: self.clone(),
                outer,
                inner,
            },
        )
    }

    /// Adjoint of [`Var::reduce_mid`]: repeats a `[mid]` vector over outer and
    /// inner axes, producing `shape` (which must have `outer*mid*inner`
    /// elements).
    pub fn expand_mid(&self, outer: usize, inner: usize, shape: &[usize]) -> Var {
        let mid = self.numel();
        assert_eq!(outer * mid * inner, shape.iter().product::<usize>(), "expand_mid size");
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * mid * inner);
        for _ in 0..outer {
            for &v in x {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        record(
            Tensor::from_parts(shape.to_vec(), out),
            Op::ExpandMid {
                x: self.clone(),
                outer,
                inner,
            },
        )
    }

    fn backward(&self, g: &Var) -> Vec<(Var, Var)> {
        use Op::*;
        match &self.0.op {
            Leaf => vec![],
            Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
            Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
            Mul(a, b) => vec![(a.clone(), g.mul(b)), (b.clone(), g.mul(a))],
            Div(a, b) => {
                let ga = g.div(b);
                let gb = g.mul(self).div(b).neg();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Scale(a, c) => vec![(a.clone(), g.scale(*c))],
            Offset(a) => vec![(a.clone(), g.clone())],
            Exp(a) => vec![(a.clone(), g.mul(self))],
            Log(a) => vec![(a.clone(), g.div(a))],
            Powf(a, p) => vec![(a.clone(), g.mul(&a.powf(p - 1.0).scale(*p)))],
            Sqrt(a) => vec![(a.clone(), g.mul(&self.safe_recip()).scale(0.5))],
            SafeRecip(a) => vec![(a.clone(), g.mul(self).mul(self).neg())],
            Masked(a, m) => vec![(a.clone(), g.masked(m.clone()))],
            MatMul { a, b, ta, tb } => {
                // C = op(A) op(B)
                let ga = match (ta, tb) {
                    (false, false) => g.matmul_t(b, false, true),
                    (false, true) => g.matmul_t(b, false, false),
                    (true, false) => b.matmul_t(g, false, true),
                    (true, true) => b.matmul_t(g, true, true),
                };
                let gb = match (ta, tb) {
                    (false, false) => a.matmul_t(g, true, false),
                    (false, true) => g.matmul_t(a, true, false),
                    (true, false) => a.matmul_t(g, false, false),
                    (true, true) => g.matmul_t(a, true, true),
                };
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Sparse { x, map, transposed } => {
                vec![(x.clone(), g.sparse(map, !transposed, x.shape()))]
            }
            Reshape(a) => vec![(a.clone(), g.reshape(a.shape()))],
            SumAll(a) => vec![(a.clone(), g.fill(a.shape()))],
            Fill(a) => vec![(a.clone(), g.sum().reshape(a.shape()))],
            ReduceMid { x, outer, inner } => {
                vec![(x.clone(), g.expand_mid(*outer, *inner, x.shape()))]
            }
            ExpandMid { x, outer, inner } => {
                let mid = x.numel();
                vec![(x.clone(), g.reduce_mid(*outer, mid, *inner).reshape(x.shape()))]
            }
        }
    }
}

fn matmul_values(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
    assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension");
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the pointers cover `a`, `b` and `c`, whose extents match
        // the dimensions and strides passed here.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_parts(vec![m, n], c)
}

fn topo_order(output: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited: std::collections::HashSet<*const Node> = Default::default();
    let mut stack = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(Rc::as_ptr(&v.0)) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.0.op.parents() {
            if p.0.requires_grad && !visited.contains(&Rc::as_ptr(&p.0)) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// With `create_graph`, the returned gradients are differentiable functions
/// of every leaf the output depends on; otherwise they are constants.
/// Inputs the output does not depend on get zero gradients.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.numel(), 1, "grad needs a scalar output");
    let _guard = (!create_graph).then(no_grad);
    let order = topo_order(output);
    let index: HashMap<*const Node, usize> = order
        .iter()
        .enumerate()
        .map(|(i, v)| (Rc::as_ptr(&v.0), i))
        .collect();
    let mut grads: Vec<Option<Var>> = vec![None; order.len()];
    if output.requires_grad() {
        grads[order.len() - 1] = Some(Var::constant(Tensor::full(output.shape(), 1.0)));
    }
    let wanted: std::collections::HashSet<*const Node> =
        wrt.iter().map(|v| Rc::as_ptr(&v.0)).collect();
    for i in (0..order.len()).rev() {
        let node = &order[i];
        let Some(g) = (if wanted.contains(&Rc::as_ptr(&node.0)) {
            grads[i].clone()
        } else {
            grads[i].take()
        }) else {
            continue;
        };
        for (parent, pg) in node.backward(&g) {
            if !parent.requires_grad() {
                continue;
            }
            let j = index[&Rc::as_ptr(&parent.0)];
            grads[j] = Some(match grads[j].take() {
                Some(acc) => acc.add(&pg),
                None => pg,
            });
        }
    }
    wrt.iter()
        .map(|v| {
            index
                .get(&Rc::as_ptr(&v.0))
                .and_then(|&i| grads[i].clone())
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of a scalar function of one tensor.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn product_rule() {
        let x = Var::param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.mul(&x).mul(&x).sum();
        let g = grad(&y, &[x.clone()], false);
        assert_eq!(g[0].value().data(), &[3.0, 12.0, 27.0]);
    }

    #[test]
    fn second_order_of_cube() {
        // d/dx sum(x^3) = 3x^2; d/dx sum((3x^2)^2) = 36 x^3
        let x = Var::param(t(&[2], &[0.5, -2.0]));
        let y = x.powf(3.0).sum();
        let g = grad(&y, &[x.clone()], true).remove(0);
        let h = grad(&g.sum_sq(), &[x.clone()], false).remove(0);
        assert_close(h.value().data(), &[36.0 * 0.125, 36.0 * -8.0], 1e-12);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a0 = t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
            let b0 = t(&[3, 2], &[1.0, 0.5, -1.5, 2.0, 0.25, -0.75]);
            let (a_shape, b_shape) = (
                if ta { vec![3, 2] } else { vec![2, 3] },
                if tb { vec![2, 3] } else { vec![3, 2] },
            );
            let a0 = a0.reshape(&a_shape).unwrap();
            let b0 = b0.reshape(&b_shape).unwrap();
            let f = |a: &Tensor, b: &Tensor| {
                let _g = no_grad();
                let c = Var::constant(a.clone()).matmul_t(&Var::constant(b.clone()), ta, tb);
                c.powf(2.0).sum().item()
            };
            let a = Var::param(a0.clone());
            let b = Var::param(b0.clone());
            let loss = a.matmul_t(&b, ta, tb).powf(2.0).sum();
            let g = grad(&loss, &[a, b], false);
            let na = numeric_grad(&|x| f(x, &b0), &a0, 1e-6);
            let nb = numeric_grad(&|x| f(&a0, x), &b0, 1e-6);
            assert_close(g[0].value().data(), &na, 1e-7);
            assert_close(g[1].value().data(), &nb, 1e-7);
        }
    }

    #[test]
    fn double_backward_through_matmul_and_softmax() {
        // loss(x) = || d/dw CE(softmax(w x)) ||^2, differentiated w.r.t. x
        let w0 = t(&[2, 3], &[0.3, -0.1, 0.2, -0.4, 0.5, 0.1]);
        let target = t(&[2, 1], &[1.0, 0.0]);
        let build = |x: &Var, w: &Var| -> Var {
            let z = w.matmul(x);
            let e = z.exp();
            let s = e.reduce_mid(1, 1, 2).expand_mid(1, 2, &[2, 1]);
            let logp = z.sub(&s.ln());
            logp.mul(&Var::constant(target.clone())).sum().neg()
        };
        let f = |x: &Tensor| {
            let w = Var::param(w0.clone());
            let l = build(&Var::constant(x.clone()), &w);
            let gw = grad(&l, &[w], false).remove(0);
            gw.value().sum_sq()
        };
        let x0 = t(&[3, 1], &[0.7, -0.3, 1.1]);
        let x = Var::param(x0.clone());
        let w = Var::param(w0.clone());
        let l = build(&x, &w);
        let gw = grad(&l, &[w], true).remove(0);
        let gx = grad(&gw.sum_sq(), &[x], false).remove(0);
        let num = numeric_grad(&f, &x0, 1e-6);
        assert_close(gx.value().data(), &num, 1e-6);
    }

    #[test]
    fn reduce_and_expand_are_adjoint() {
        let x = Var::param(t(&[2, 3, 2], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]));
        let r = x.reduce_mid(2, 3, 2);
        assert_eq!(r.value().data(), &[1. + 2. + 7. + 8., 3. + 4. + 9. + 10., 5. + 6. + 11. + 12.]);
        let w = Var::constant(t(&[3], &[1.0, 10.0, 100.0]));
        let g = grad(&r.mul(&w).sum(), &[x], false).remove(0);
        assert_eq!(
            g.value().data(),
            &[1., 1., 10., 10., 100., 100., 1., 1., 10., 10., 100., 100.]
        );
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let x = Var::param(Tensor::zeros(&[3]));
        let g = grad(&x.norm2(), &[x.clone()], false).remove(0);
        assert!(g.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let x = Var::param(Tensor::full(&[2], 1.0));
        let y = Var::param(Tensor::full(&[2], 1.0));
        let g = grad(&x.sum(), &[y], false);
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Var::param(Tensor::full(&[2], 1.0));
        let _g = no_grad();
        assert!(!x.mul(&x).requires_grad());
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = Var::param(Tensor::full(&[1], 1.0));
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.offset(1e-9);
        }
        assert!(y.item() > 1.0);
        drop(y);
    }
}
