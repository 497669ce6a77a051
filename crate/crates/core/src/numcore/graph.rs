use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, View};
use super::{NumError, Parameter, ParamSet, Real, Result, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, k: usize, stride: usize },
    ChannelBias { x: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Square(usize),
    Abs(usize),
    Upsample2x(usize),
    UpsampleConv2d { x: usize, k: usize },
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    ConcatCols(usize, usize),
    Gather { x: usize, idx: Vec<usize> },
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, .. } | Op::UpsampleConv2d { x, k } => vec![x, k],
            Op::ChannelBias { x, b } => vec![x, b],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => vec![a, b],
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Upsample2x(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Clamp { x, .. } | Op::Gather { x, .. } => vec![x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A dynamically recorded computation. Ops append nodes in evaluation order,
/// so every node only reads nodes recorded before it.
///
/// Graphs built with [`Graph::inference`] record parameters as constants and
/// never need a backward pass.
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            track_params: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(NumError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Value of a recorded variable.
    ///
    /// # Panics
    /// If `v` was recorded by another graph.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.idx(v).expect("variable from another graph");
        &self.nodes[i].value
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Unnamed leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Records a parameter leaf. Repeated calls with the same name return the
    /// same variable, so shared weights accumulate a single gradient.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&(_, idx)) = self.params.iter().find(|(n, _)| n == p.name()) {
            return Var {
                graph: self.id,
                idx,
            };
        }
        let value = p.value.cast::<T>();
        let v = self.push_node(value, Op::Leaf, self.track_params);
        self.params.push((p.name().to_string(), v.idx));
        v
    }

    pub fn param_named(&mut self, set: &ParamSet, name: &str) -> Result<Var> {
        Ok(self.param(set.get(name)?))
    }

    /// 3×3 convolution with replicate padding. `stride` 2 yields exactly the
    /// even-indexed rows and columns of the stride-1 result.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let (xs, ks) = (self.nodes[xi].value.shape(), self.nodes[ki].value.shape());
        if xs.len() != 4
            || ks.len() != 4
            || ks[2] != 3
            || ks[3] != 3
            || ks[1] != xs[1]
            || xs[2] < 3
            || xs[3] < 3
            || stride == 0
        {
            return Err(mismatch("conv2d", xs, ks));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            c_out: ks[0],
            h: xs[2],
            w: xs[3],
            stride,
        };
        let out = kernels::conv2d_forward(
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            &geom,
        );
        let shape = [geom.n, geom.c_out, geom.h_out(), geom.w_out()];
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { x: xi, k: ki, stride }))
    }

    /// Same as `conv2d(upsample2x(x), kernel, 1)`, evaluated on the input
    /// grid with a folded kernel so no upsampled copy is materialized.
    pub fn upsample_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let (xs, ks) = (self.nodes[xi].value.shape(), self.nodes[ki].value.shape());
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != xs[1] || xs[2] < 3 || xs[3] < 3 {
            return Err(mismatch("upsample_conv2d", xs, ks));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            c_out: 4 * ks[0],
            h: xs[2],
            w: xs[3],
            stride: 1,
        };
        let folded = kernels::fold_upsample_kernel(self.nodes[ki].value.data(), ks[0], ks[1]);
        let phases = kernels::conv2d_forward(self.nodes[xi].value.data(), &folded, &geom);
        let out = kernels::interleave_phases(&phases, geom.n, ks[0], geom.h, geom.w);
        let value = Tensor::new(&[geom.n, ks[0], 2 * geom.h, 2 * geom.w], out)?;
        Ok(self.push(value, Op::UpsampleConv2d { x: xi, k: ki }))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[n, c, ...]` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let (xv, bv) = (&self.nodes[xi].value, &self.nodes[bi].value);
        if xv.rank() < 2 || bv.rank() != 1 || bv.len() != xv.shape()[1] {
            return Err(mismatch("channel_bias", xv.shape(), bv.shape()));
        }
        let c = xv.shape()[1];
        let plane = xv.len() / (xv.shape()[0] * c);
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::ChannelBias { x: xi, b: bi }))
    }

    /// `x @ w^T + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        );
        if xv.rank() != 2 || wv.rank() != 2 || wv.shape()[1] != xv.shape()[1] {
            return Err(mismatch("linear", xv.shape(), wv.shape()));
        }
        let (n, d_in, d_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        if bv.shape() != [d_out] {
            return Err(mismatch("linear bias", wv.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); n * d_out];
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(bv.data());
        }
        kernels::gemm(
            View::row_major(xv.data(), n, d_in),
            View::row_major(wv.data(), d_out, d_in).t(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(&[n, d_out], out)?;
        Ok(self.push(value, Op::Linear { x: xi, w: wi, b: bi }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl Fn(usize) -> Op) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(f);
        Ok(self.push(value, op(xi)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::tanh_fast, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::abs, Op::Abs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64(c);
        self.unary(x, |v| v * ct, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64(c);
        self.unary(x, |v| v + ct, Op::AddScalar)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(x, |v| v.max(l).min(h), |i| Op::Clamp { x: i, lo, hi })
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(mismatch("upsample2x", &xs, &[0, 0, 0, 0]));
        }
        let out = kernels::upsample2x(
            self.nodes[xi].value.data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
        );
        let value = Tensor::new(&[xs[0], xs[1], 2 * xs[2], 2 * xs[3]], out)?;
        Ok(self.push(value, Op::Upsample2x(xi)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(xi)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let value = zip_map(av, bv, f);
        Ok(self.push(value, op(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Concatenates `[n, da]` and `[n, db]` into `[n, da + db]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch("concat_cols", av.shape(), bv.shape()));
        }
        let (n, da, db) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&av.data()[r * da..][..da]);
            out.extend_from_slice(&bv.data()[r * db..][..db]);
        }
        let value = Tensor::new(&[n, da + db], out)?;
        Ok(self.push(value, Op::ConcatCols(ai, bi)))
    }

    /// Picks `x[r, idx[r]]` from each row of `x: [n, k]`, giving `[n]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 || xv.shape()[0] != idx.len() || idx.iter().any(|&i| i >= xv.shape()[1])
        {
            return Err(mismatch("gather", xv.shape(), &[idx.len()]));
        }
        let k = xv.shape()[1];
        let out = idx.iter().enumerate().map(|(r, &c)| xv[r * k + c]).collect();
        let value = Tensor::new(&[idx.len()], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x: xi,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Sum of all elements, accumulated in double precision.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: f64 = self.nodes[xi].value.data().iter().map(|v| v.as_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s: f64 = xv.data().iter().map(|v| v.as_f64()).sum();
        let m = s / xv.len() as f64;
        Ok(self.push(Tensor::scalar(T::from_f64(m)), Op::Mean(xi)))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(NumError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; li + 1];
        grads[li] = Some(Tensor::ones(lv.shape()));
        let mut leaves = HashMap::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let inputs = node.op.inputs();
            if let Some(&bad) = inputs.iter().find(|&&j| j >= i) {
                return Err(NumError::Cycle {
                    node: i,
                    input: bad,
                });
            }
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, g);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients {
            graph: self.id,
            leaves,
            params: self.params.clone(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Vector-Jacobian products of node `i` for each input needing a gradient.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let like = |j: usize, data: Vec<T>| Tensor::new(val(j).shape(), data).expect("grad shape");
        let mut out = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride } => {
                let (xs, ks) = (val(x).shape(), val(k).shape());
                let geom = ConvGeom {
                    n: xs[0],
                    c_in: xs[1],
                    c_out: ks[0],
                    h: xs[2],
                    w: xs[3],
                    stride,
                };
                let (dx, dk) = kernels::conv2d_backward(
                    val(x).data(),
                    val(k).data(),
                    g.data(),
                    &geom,
                    self.wants(x),
                    self.wants(k),
                );
                out.extend(dx.map(|d| (x, like(x, d))));
                out.extend(dk.map(|d| (k, like(k, d))));
            }
            Op::UpsampleConv2d { x, k } => {
                let (xs, ks) = (val(x).shape(), val(k).shape());
                let geom = ConvGeom {
                    n: xs[0],
                    c_in: xs[1],
                    c_out: 4 * ks[0],
                    h: xs[2],
                    w: xs[3],
                    stride: 1,
                };
                let folded = kernels::fold_upsample_kernel(val(k).data(), ks[0], ks[1]);
                let dphase = kernels::split_phases(g.data(), geom.n, ks[0], geom.h, geom.w);
                let (dx, dk) = kernels::conv2d_backward(
                    val(x).data(),
                    &folded,
                    &dphase,
                    &geom,
                    self.wants(x),
                    self.wants(k),
                );
                out.extend(dx.map(|d| (x, like(x, d))));
                out.extend(dk.map(|d| (k, like(k, kernels::unfold_upsample_kernel(&d, ks[0], ks[1])))));
            }
            Op::ChannelBias { x, b } => {
                out.push((x, g.clone()));
                if self.wants(b) {
                    let c = val(b).len();
                    let plane = g.len() / (val(x).shape()[0] * c);
                    let mut db = vec![0.0f64; c];
                    for (ci, chunk) in g.data().chunks(plane).enumerate() {
                        db[ci % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    out.push((b, like(b, db.into_iter().map(T::from_f64).collect())));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = (val(x).shape()[0], val(x).shape()[1]);
                let d_out = val(w).shape()[0];
                let gv = View::row_major(g.data(), n, d_out);
                if self.wants(x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    kernels::gemm(gv, View::row_major(val(w).data(), d_out, d_in), T::zero(), &mut dx);
                    out.push((x, like(x, dx)));
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    kernels::gemm(gv.t(), View::row_major(val(x).data(), n, d_in), T::zero(), &mut dw);
                    out.push((w, like(w, dw)));
                }
                if self.wants(b) {
                    let mut db = vec![0.0f64; d_out];
                    for row in g.data().chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v.as_f64());
                    }
                    out.push((b, like(b, db.into_iter().map(T::from_f64).collect())));
                }
            }
            Op::Tanh(x) => {
                let one = T::one();
                out.push((x, zip_map(g, &node.value, |gi, y| gi * (one - y * y))));
            }
            Op::Sigmoid(x) => {
                let one = T::one();
                out.push((x, zip_map(g, &node.value, |gi, y| gi * y * (one - y))));
            }
            Op::Exp(x) => out.push((x, zip_map(g, &node.value, |gi, y| gi * y))),
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                out.push((x, zip_map(g, val(x), |gi, v| gi * two * v)));
            }
            Op::Abs(x) => {
                let zero = T::zero();
                out.push((
                    x,
                    zip_map(g, val(x), |gi, v| {
                        if v > zero {
                            gi
                        } else if v < zero {
                            -gi
                        } else {
                            zero
                        }
                    }),
                ));
            }
            Op::Upsample2x(x) => {
                let s = val(x).shape();
                let dx = kernels::upsample2x_backward(g.data(), s[0] * s[1], s[2], s[3]);
                out.push((x, like(x, dx)));
            }
            Op::Reshape(x) => out.push((x, like(x, g.data().to_vec()))),
            Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                out.push((a, zip_map(g, val(b), |gi, v| gi * v)));
                out.push((b, zip_map(g, val(a), |gi, v| gi * v)));
            }
            Op::Scale(x, c) => {
                let ct = T::from_f64(c);
                out.push((x, g.map(|v| v * ct)));
            }
            Op::AddScalar(x) => out.push((x, g.clone())),
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::from_f64(lo), T::from_f64(hi));
                out.push((
                    x,
                    zip_map(g, val(x), |gi, v| if v > l && v < h { gi } else { T::zero() }),
                ));
            }
            Op::ConcatCols(a, b) => {
                let (n, da, db) = (val(a).shape()[0], val(a).shape()[1], val(b).shape()[1]);
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for row in g.data().chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                out.push((a, like(a, ga)));
                out.push((b, like(b, gb)));
            }
            Op::Gather { x, ref idx } => {
                let k = val(x).shape()[1];
                let mut dx = vec![T::zero(); val(x).len()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * k + c] += g[r];
                }
                out.push((x, like(x, dx)));
            }
            Op::Sum(x) => out.push((x, Tensor::full(val(x).shape(), g[0]))),
            Op::Mean(x) => {
                let n = T::from_f64(val(x).len() as f64);
                out.push((x, Tensor::full(val(x).shape(), g[0] / n)));
            }
        }
        out
    }
}

/// Result of [`Graph::backward`]: gradients of every leaf that needed one.
pub struct Gradients<T: Real = f32> {
    graph: u64,
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(String, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves.get(&v.idx)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        let (_, idx) = self.params.iter().find(|(n, _)| n == name)?;
        self.leaves.get(idx)
    }

    /// Accumulates gradients into every parameter of `set` recorded in the graph.
    pub fn apply_to(&self, set: &mut ParamSet) {
        for p in set.iter_mut() {
            if let Some(g) = self.param(p.name()) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &v)| *a += v.to_f32());
            }
        }
    }
}
