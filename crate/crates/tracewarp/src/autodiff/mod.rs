//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays the record once in reverse topological order and accumulates
//! vector-Jacobian products. Tapes are cheap and short-lived: one per
//! forward/backward phase, dropped afterwards.
//!
//! Gradients flow only into subgraphs reachable from leaves created with
//! `requires_grad = true`; a detached leaf never accumulates gradient.
//! There is no broadcasting beyond the convolution bias and scalar-tensor
//! ops, which keeps every backward rule auditable.

pub mod fd;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};
use kernels::{ConvDims, ParzenCfg};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    UpsampleNearest2x(Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Neg(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar {
        x: Var,
        c: T,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Crop {
        x: Var,
        dy: usize,
        dx: usize,
    },
    /// Bilinear sample of `m` at `p + disp(p)`.
    Warp {
        m: Var,
        disp: Var,
    },
    BatchSlice {
        x: Var,
        index: usize,
    },
    ChannelSlice {
        x: Var,
        index: usize,
    },
    ParzenWeights {
        x: Var,
        bins: usize,
        sigma: f64,
        lo: f64,
        hi: f64,
    },
    /// `out[i,j] = sum_p a[p,i] * b[p,j]`.
    MatmulTn(Var, Var),
    RowSum(Var),
    ColSum(Var),
    /// Negative control for the gradient checker: forward scales by `c`,
    /// backward deliberately reports a wrong rule.
    ScaleBugged {
        x: Var,
        c: T,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`, if any gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value recorded at `v`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register an input tensor. Gradient is accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    // ── convolution and spatial ops ─────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has {c_in} channels but weight expects {wc_in} (input {:?}, weight {:?})",
                self.shape(x),
                self.shape(w)
            )));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {c_out} output channels",
                self.shape(b)
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be >= 1".into()));
        }
        let oh = ConvDims::out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {kh} exceeds padded height")))?;
        let ow = ConvDims::out_extent(wd, kw, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {kw} exceeds padded width")))?;
        let dims = ConvDims {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            dims,
        );
        let value = Tensor::from_vec(vec![n, c_out, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Conv2d { x, w, b, dims }, value, needs))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for ni in 0..n {
            for ci in 0..c {
                for r in 0..h {
                    for cc in 0..w {
                        let v = xv.at4(ni, ci, r, cc);
                        for dy in 0..2 {
                            for dx in 0..2 {
                                out.set4(ni, ci, 2 * r + dy, 2 * cc + dx, v);
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::UpsampleNearest2x(x), out, needs))
    }

    pub fn crop(&mut self, x: Var, dy: usize, dx: usize, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if dy + oh > h || dx + ow > w {
            return Err(Error::Shape(format!(
                "crop: window {oh}x{ow} at offset ({dy},{dx}) exceeds {h}x{w}"
            )));
        }
        let xv = self.value(x);
        let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
            let wi = i % ow;
            let hi = (i / ow) % oh;
            let ci = (i / (ow * oh)) % c;
            let ni = i / (ow * oh * c);
            xv.at4(ni, ci, hi + dy, wi + dx)
        });
        let needs = self.needs(x);
        Ok(self.push(Op::Crop { x, dy, dx }, out, needs))
    }

    /// Bilinear warp: sample `m` at displaced positions `p + disp(p)`.
    /// Differentiable in both the image and the displacement.
    pub fn warp(&mut self, m: Var, disp: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(m).dims4()?;
        let (dn, dc, dh, dw) = self.value(disp).dims4()?;
        if dc != 2 || dn != n || dh != h || dw != w {
            return Err(Error::Shape(format!(
                "warp: displacement {:?} incompatible with image {:?} (want [{n},2,{h},{w}])",
                self.shape(disp),
                self.shape(m)
            )));
        }
        let out = kernels::warp_forward(self.value(m).data(), self.value(disp).data(), n, c, h, w);
        let value = Tensor::from_vec(vec![n, c, h, w], out)?;
        let needs = self.needs(m) || self.needs(disp);
        Ok(self.push(Op::Warp { m, disp }, value, needs))
    }

    pub fn batch_slice(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if index >= n {
            return Err(Error::Shape(format!(
                "batch_slice: index {index} out of range for batch {n}"
            )));
        }
        let xv = self.value(x);
        let hw = c * h * w;
        let out = Tensor::from_vec(
            vec![1, c, h, w],
            xv.data()[index * hw..(index + 1) * hw].to_vec(),
        )?;
        let needs = self.needs(x);
        Ok(self.push(Op::BatchSlice { x, index }, out, needs))
    }

    pub fn channel_slice(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if index >= c {
            return Err(Error::Shape(format!(
                "channel_slice: index {index} out of range for {c} channels"
            )));
        }
        let xv = self.value(x);
        let out = Tensor::from_fn(&[n, 1, h, w], |i| {
            let wi = i % w;
            let hi = (i / w) % h;
            let ni = i / (w * h);
            xv.at4(ni, index, hi, wi)
        });
        let needs = self.needs(x);
        Ok(self.push(Op::ChannelSlice { x, index }, out, needs))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(op, value, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = sc::<T>(slope);
        self.unary(x, Op::LeakyRelu { x, slope: s }, |v| {
            if v > T::zero() {
                v
            } else {
                s * v
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cv = sc::<T>(c);
        self.unary(x, Op::AddScalar(x), |v| v + cv)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let cv = sc::<T>(c);
        self.unary(x, Op::MulScalar { x, c: cv }, |v| v * cv)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::Shape(format!(
                "concat: ranks/axis incompatible ({sa:?}, {sb:?}, axis {axis})"
            )));
        }
        for (i, (&da, &db)) in sa.iter().zip(&sb).enumerate() {
            if i != axis && da != db {
                return Err(Error::Shape(format!(
                    "concat: off-axis dimension {i} differs ({sa:?} vs {sb:?})"
                )));
            }
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let a_span = sa[axis] * inner;
        let b_span = sb[axis] * inner;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity((a_span + b_span) * outer);
        for o in 0..outer {
            data.extend_from_slice(&av[o * a_span..(o + 1) * a_span]);
            data.extend_from_slice(&bv[o * b_span..(o + 1) * b_span]);
        }
        let value = Tensor::from_vec(shape, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat { a, b, axis }, value, needs))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(acc), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(
            Op::Mean(x),
            Tensor::scalar(acc / sc(n as f64)),
            needs,
        )
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("row_sum: expected rank 2, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let xv = self.value(x).data();
        let data: Vec<T> = (0..r)
            .map(|i| {
                let mut acc = T::zero();
                for &v in &xv[i * c..(i + 1) * c] {
                    acc = acc + v;
                }
                acc
            })
            .collect();
        let value = Tensor::from_vec(vec![r], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::RowSum(x), value, needs))
    }

    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("col_sum: expected rank 2, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (j, d) in data.iter_mut().enumerate() {
                *d = *d + xv[i * c + j];
            }
        }
        let value = Tensor::from_vec(vec![c], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::ColSum(x), value, needs))
    }

    // ── histogram building blocks ───────────────────────────────────

    /// Soft bin-assignment weights `[P, bins]` for the flattened input.
    pub fn parzen_weights(
        &mut self,
        x: Var,
        bins: usize,
        sigma: f64,
        lo: f64,
        hi: f64,
    ) -> Result<Var> {
        if bins < 2 {
            return Err(Error::Config(format!("parzen_weights: bins must be >= 2, got {bins}")));
        }
        if !(sigma > 0.0) || !(hi > lo) {
            return Err(Error::Config(
                "parzen_weights: sigma must be positive and value range nondegenerate".into(),
            ));
        }
        let cfg = ParzenCfg { bins, sigma, lo, hi };
        let p = self.value(x).numel();
        let out = kernels::parzen_forward(self.value(x).data(), &cfg);
        let value = Tensor::from_vec(vec![p, bins], out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::ParzenWeights { x, bins, sigma, lo, hi }, value, needs))
    }

    /// `a^T b` for `a: [P, I]`, `b: [P, J]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul_tn: want [P,I] x [P,J], got {sa:?} x {sb:?}"
            )));
        }
        let (p, i_, j_) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); i_ * j_];
        for pi in 0..p {
            let ar = &av[pi * i_..(pi + 1) * i_];
            let br = &bv[pi * j_..(pi + 1) * j_];
            for (i, &ai) in ar.iter().enumerate() {
                if ai == T::zero() {
                    continue;
                }
                let orow = &mut out[i * j_..(i + 1) * j_];
                for (o, &bj) in orow.iter_mut().zip(br) {
                    *o = *o + ai * bj;
                }
            }
        }
        let value = Tensor::from_vec(vec![i_, j_], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulTn(a, b), value, needs))
    }

    /// Forward pass scales by `c`; the backward rule is intentionally wrong.
    /// Exists so the gradient checker's failure path can be exercised.
    #[doc(hidden)]
    pub fn scale_with_bugged_backward(&mut self, x: Var, c: f64) -> Var {
        let cv = sc::<T>(c);
        self.unary(x, Op::ScaleBugged { x, c: cv }, |v| v * cv)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that requires them; leaves marked `requires_grad` that receive no
    /// flow report zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let gout = grads[id].take().unwrap();
            self.backward_node(id, &gout, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout); // keep leaf gradients readable
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match g {
                    Some(data) => Some(
                        Tensor::from_vec(node.value.shape().to_vec(), data)
                            .expect("gradient shape matches value"),
                    ),
                    None if matches!(node.op, Op::Leaf) && node.needs_grad => {
                        Some(Tensor::zeros(node.value.shape()))
                    }
                    None => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl Fn(usize) -> T) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        for (i, s) in slot.iter_mut().enumerate() {
            *s = *s + contrib(i);
        }
    }

    fn accumulate_slice(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]) {
        self.accumulate(grads, v, |i| contrib[i]);
    }

    fn backward_node(&self, id: usize, gout: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    let gx = kernels::conv2d_backward_input(gout, wv, *dims);
                    self.accumulate_slice(grads, *x, &gx);
                }
                if self.needs(*w) {
                    let gw = kernels::conv2d_backward_weight(gout, xv, *dims);
                    self.accumulate_slice(grads, *w, &gw);
                }
                if self.needs(*b) {
                    let gb = kernels::conv2d_backward_bias(gout, *dims);
                    self.accumulate_slice(grads, *b, &gb);
                }
            }
            Op::UpsampleNearest2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("recorded rank 4");
                let ow = 2 * w;
                self.accumulate(grads, *x, |i| {
                    let wi = i % w;
                    let hi = (i / w) % h;
                    let rest = i / (w * h); // n*c block
                    let base = rest * (2 * h) * ow;
                    let mut acc = T::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc = acc + gout[base + (2 * hi + dy) * ow + (2 * wi + dx)];
                        }
                    }
                    acc
                });
                let _ = (n, c);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let s = *slope;
                self.accumulate(grads, *x, |i| {
                    if xv[i] > T::zero() {
                        gout[i]
                    } else {
                        gout[i] * s
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |i| gout[i] * (T::one() - yv[i] * yv[i]));
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |i| gout[i] * yv[i]);
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| gout[i] / xv[i]);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| {
                    if xv[i] > T::zero() {
                        gout[i]
                    } else if xv[i] < T::zero() {
                        -gout[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| gout[i] * xv[i] * sc(2.0));
            }
            Op::Neg(x) => self.accumulate(grads, *x, |i| -gout[i]),
            Op::Add(a, b) => {
                self.accumulate_slice(grads, *a, gout);
                self.accumulate_slice(grads, *b, gout);
            }
            Op::Sub(a, b) => {
                self.accumulate_slice(grads, *a, gout);
                self.accumulate(grads, *b, |i| -gout[i]);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |i| gout[i] * bv[i]);
                self.accumulate(grads, *b, |i| gout[i] * av[i]);
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |i| gout[i] / bv[i]);
                self.accumulate(grads, *b, |i| -gout[i] * av[i] / (bv[i] * bv[i]));
            }
            Op::AddScalar(x) => self.accumulate_slice(grads, *x, gout),
            Op::MulScalar { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |i| gout[i] * c);
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let inner: usize = sa[axis + 1..].iter().product();
                let a_span = sa[*axis] * inner;
                let b_span = sb[*axis] * inner;
                let span = a_span + b_span;
                self.accumulate(grads, *a, |i| {
                    let o = i / a_span;
                    let r = i % a_span;
                    gout[o * span + r]
                });
                self.accumulate(grads, *b, |i| {
                    let o = i / b_span;
                    let r = i % b_span;
                    gout[o * span + a_span + r]
                });
            }
            Op::Sum(x) => {
                let g = gout[0];
                self.accumulate(grads, *x, |_| g);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = gout[0] / sc(n as f64);
                self.accumulate(grads, *x, |_| g);
            }
            Op::Crop { x, dy, dx } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("recorded rank 4");
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                self.accumulate(grads, *x, |i| {
                    let wi = i % w;
                    let hi = (i / w) % h;
                    let rest = i / (w * h);
                    if hi >= *dy && hi < dy + oh && wi >= *dx && wi < dx + ow {
                        gout[(rest * oh + (hi - dy)) * ow + (wi - dx)]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Warp { m, disp } => {
                let (n, c, h, w) = self.value(*m).dims4().expect("recorded rank 4");
                let (gm, gd) = kernels::warp_backward(
                    gout,
                    self.value(*m).data(),
                    self.value(*disp).data(),
                    n,
                    c,
                    h,
                    w,
                    self.needs(*m),
                    self.needs(*disp),
                );
                if let Some(gm) = gm {
                    self.accumulate_slice(grads, *m, &gm);
                }
                if let Some(gd) = gd {
                    self.accumulate_slice(grads, *disp, &gd);
                }
            }
            Op::BatchSlice { x, index } => {
                let span = node.value.numel();
                let start = index * span;
                self.accumulate(grads, *x, |i| {
                    if i >= start && i < start + span {
                        gout[i - start]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::ChannelSlice { x, index } => {
                let (_, c, h, w) = self.value(*x).dims4().expect("recorded rank 4");
                let hw = h * w;
                self.accumulate(grads, *x, |i| {
                    let ci = (i / hw) % c;
                    if ci == *index {
                        let ni = i / (hw * c);
                        gout[ni * hw + i % hw]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::ParzenWeights { x, bins, sigma, lo, hi } => {
                let cfg = ParzenCfg {
                    bins: *bins,
                    sigma: *sigma,
                    lo: *lo,
                    hi: *hi,
                };
                let gx = kernels::parzen_backward(gout, self.value(*x).data(), &cfg);
                self.accumulate_slice(grads, *x, &gx);
            }
            Op::MatmulTn(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (i_, j_) = (sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |idx| {
                    let p = idx / i_;
                    let i = idx % i_;
                    let mut acc = T::zero();
                    for j in 0..j_ {
                        acc = acc + gout[i * j_ + j] * bv[p * j_ + j];
                    }
                    acc
                });
                self.accumulate(grads, *b, |idx| {
                    let p = idx / j_;
                    let j = idx % j_;
                    let mut acc = T::zero();
                    for i in 0..i_ {
                        acc = acc + gout[i * j_ + j] * av[p * i_ + i];
                    }
                    acc
                });
            }
            Op::RowSum(x) => {
                let c = self.shape(*x)[1];
                self.accumulate(grads, *x, |i| gout[i / c]);
            }
            Op::ColSum(x) => {
                let c = self.shape(*x)[1];
                self.accumulate(grads, *x, |i| gout[i % c]);
            }
            Op::ScaleBugged { x, c } => {
                // Wrong on purpose; see `scale_with_bugged_backward`.
                let c = *c + sc(0.5);
                self.accumulate(grads, *x, |i| gout[i] * c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: Vec<f64>) -> Tensor<f64> {
        let n = data.len();
        Tensor::from_vec(vec![n], data).unwrap()
    }

    #[test]
    fn backward_of_weighted_sum_returns_weights() {
        // loss = sum(w * x), w = [1,2], x = [3,4] => dloss/dw = [3,4]
        let mut tape = Tape::new();
        let w = tape.leaf(t1(vec![1.0, 2.0]), true);
        let x = tape.leaf(t1(vec![3.0, 4.0]), false);
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod);
        assert_eq!(tape.value(loss).item(), 11.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[3.0, 4.0]);
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn backward_of_mean_squared_error() {
        // loss = mean((w-1)^2), w = [0,2] => grad = [-1, 1]
        let mut tape = Tape::new();
        let w = tape.leaf(t1(vec![0.0, 2.0]), true);
        let shifted = tape.add_scalar(w, -1.0);
        let sq = tape.square(shifted);
        let loss = tape.mean(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn mean_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(vec![1.0, 2.0, 3.0, 4.0]), true);
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn leaky_relu_and_tanh_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(vec![-2.0, 0.0, 3.0]), false);
        let lr = tape.leaky_relu(x, 0.2);
        let data = tape.value(lr).data();
        assert!((data[0] + 0.4).abs() < 1e-15);
        assert_eq!(data[1], 0.0);
        assert_eq!(data[2], 3.0);
        let th = tape.tanh(x);
        assert_eq!(tape.value(th).data()[1], 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn concat_off_axis_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 3, 5, 4]), false);
        assert!(matches!(tape.concat(a, b, 1), Err(Error::Shape(_))));
        let c = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]), false);
        let cat = tape.concat(a, c, 1).unwrap();
        assert_eq!(tape.shape(cat), &[1, 5, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_rejected_with_diagnostic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[3, 4, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        match tape.conv2d(x, w, b, 1, 1) {
            Err(Error::Shape(msg)) => assert!(msg.contains("channels"), "got: {msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn upsample_replicates_2x2_blocks() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let up = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(
            tape.value(up).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        // All-ones upstream gradient collapses each 2x2 block to 4.
        let s = tape.sum(up);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn batch_slice_routes_gradient_to_its_slot() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64), true);
        let s1 = tape.batch_slice(x, 1).unwrap();
        let loss = tape.sum(s1);
        let g = tape.backward(loss).unwrap();
        assert_eq!(
            g.wrt(x).unwrap().data(),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn linearity_of_backward() {
        // backward(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let build = |tape: &mut Tape<f64>, x: Var| -> (Var, Var) {
            let sq = tape.square(x);
            let l1 = tape.mean(sq);
            let ab = tape.abs(x);
            let l2 = tape.sum(ab);
            (l1, l2)
        };
        let data = t1(vec![0.7, -1.3, 2.1, -0.4]);
        let (a, b) = (0.35, -1.7);

        let mut tape = Tape::new();
        let x = tape.leaf(data.clone(), true);
        let (l1, l2) = build(&mut tape, x);
        let l1s = tape.mul_scalar(l1, a);
        let l2s = tape.mul_scalar(l2, b);
        let combined = tape.add(l1s, l2s).unwrap();
        let g_combined = tape.backward(combined).unwrap().wrt(x).unwrap().clone();

        let mut tape1 = Tape::new();
        let x1 = tape1.leaf(data.clone(), true);
        let (l1, _) = build(&mut tape1, x1);
        let g1 = tape1.backward(l1).unwrap().wrt(x1).unwrap().clone();

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(data, true);
        let (_, l2) = build(&mut tape2, x2);
        let g2 = tape2.backward(l2).unwrap().wrt(x2).unwrap().clone();

        for i in 0..4 {
            let want = a * g1.data()[i] + b * g2.data()[i];
            assert!((g_combined.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn requires_grad_false_leaf_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(vec![1.0, 2.0]), false);
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn marked_leaf_without_flow_reports_zeros() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(vec![1.0, 2.0]), true);
        let unused = tape.leaf(t1(vec![5.0]), true);
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.0]);
    }
}
