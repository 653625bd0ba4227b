//! Wengert-tape autodiff.
//!
//! Every operation appends a node holding its value and a description of how
//! to route gradients back to its inputs. Nodes whose inputs are all untracked
//! (data, frozen parameters, detached values) are untracked themselves and are
//! skipped entirely during [`Graph::backward`].

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, ResizeMode};
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, E),
    Sigmoid(usize),
    LeakyRelu(usize, E),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumPerSample(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        in_channels: usize,
    },
    GlobalAvgPool(usize),
    Resize {
        x: usize,
        from: (usize, usize),
        to: (usize, usize),
        mode: ResizeMode,
    },
    InstanceNorm {
        x: usize,
        inv_std: Vec<E>,
    },
    ConcatChannels(usize, usize),
    Linear {
        x: usize,
        w: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

struct Node<E> {
    value: Rc<Tensor<E>>,
    op: Op<E>,
    tracked: bool,
}

/// A recording of one differentiable computation.
pub struct Graph<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, E: Element = f32> {
    graph: &'g Graph<E>,
    id: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<E> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var<'_, E>) -> Option<&[E]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&[E]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant input; it never receives gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that gradients flow into.
    pub fn variable(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, true)
    }

    pub(crate) fn leaf(&self, value: Tensor<E>, tracked: bool) -> Var<'_, E> {
        self.push(value, Op::Leaf, tracked)
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, tracked: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<E>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.id + 1];
        if !root.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![E::one()]);

        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let want = |i: usize| nodes[i].tracked;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -E::one()
                    } else {
                        E::one()
                    };
                    let out = node.value.shape();
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let mut ga = want(*a).then(|| vec![E::zero(); val(*a).numel()]);
                    let mut gb = want(*b).then(|| vec![E::zero(); val(*b).numel()]);
                    kernels::for_each_broadcast(sa, sb, out, |o, ia, ib| {
                        if let Some(g) = ga.as_mut() {
                            g[ia] += gy[o];
                        }
                        if let Some(g) = gb.as_mut() {
                            g[ib] += sign * gy[o];
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let out = node.value.shape();
                    let (va, vb) = (val(*a), val(*b));
                    let (da, db) = (va.data(), vb.data());
                    let mut ga = want(*a).then(|| vec![E::zero(); va.numel()]);
                    let mut gb = want(*b).then(|| vec![E::zero(); vb.numel()]);
                    kernels::for_each_broadcast(va.shape(), vb.shape(), out, |o, ia, ib| {
                        if let Some(g) = ga.as_mut() {
                            g[ia] += gy[o] * db[ib];
                        }
                        if let Some(g) = gb.as_mut() {
                            g[ib] += gy[o] * da[ia];
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine(x, scale) => {
                    let g = gy.iter().map(|&v| v * *scale).collect();
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let g = gy
                        .iter()
                        .zip(y)
                        .map(|(&g, &s)| g * s * (E::one() - s))
                        .collect();
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::LeakyRelu(x, slope) => {
                    let xs = val(*x).data();
                    let g = gy
                        .iter()
                        .zip(xs)
                        .map(|(&g, &v)| if v > E::zero() { g } else { g * *slope })
                        .collect();
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Square(x) => {
                    let two = E::one() + E::one();
                    let g = gy
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&g, &v)| g * two * v)
                        .collect();
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Sqrt(x) => {
                    let two = E::one() + E::one();
                    // d√s/ds is unbounded at 0; treat the subgradient there as 0.
                    let g = gy
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &r)| if r > E::zero() { g / (two * r) } else { E::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Sum(x) => {
                    let g = vec![gy[0]; val(*x).numel()];
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    let g = vec![gy[0] / E::from_usize(n).unwrap(); n];
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::SumPerSample(x) => {
                    let n = val(*x).shape()[0];
                    let per = val(*x).numel() / n;
                    let g = (0..n * per).map(|i| gy[i / per]).collect();
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, Some(gy)),
                Op::Conv2d {
                    x,
                    w,
                    geom,
                    out_channels,
                } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (dx, dw) = kernels::conv2d_backward(
                        vx.data(),
                        vx.shape()[0],
                        geom,
                        vw.data(),
                        *out_channels,
                        &gy,
                        want(*x),
                        want(*w),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    geom,
                    in_channels,
                } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (dx, dw) = kernels::conv_transpose2d_backward(
                        vx.data(),
                        vx.shape()[0],
                        geom,
                        vw.data(),
                        *in_channels,
                        &gy,
                        want(*x),
                        want(*w),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::GlobalAvgPool(x) => {
                    let s = val(*x).shape();
                    let hw = s[2] * s[3];
                    let inv = E::one() / E::from_usize(hw).unwrap();
                    let g = (0..val(*x).numel()).map(|i| gy[i / hw] * inv).collect();
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Resize { x, from, to, mode } => {
                    let s = val(*x).shape();
                    let g = kernels::resize_backward(&gy, s[0] * s[1], *from, *to, *mode);
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = node.value.data();
                    let s = node.value.shape();
                    let hw = s[2] * s[3];
                    let inv_hw = E::one() / E::from_usize(hw).unwrap();
                    let mut g = vec![E::zero(); y.len()];
                    for (p, &istd) in inv_std.iter().enumerate() {
                        let r = p * hw..(p + 1) * hw;
                        let (yp, gp) = (&y[r.clone()], &gy[r.clone()]);
                        let mean_g = gp.iter().copied().sum::<E>() * inv_hw;
                        let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<E>() * inv_hw;
                        for ((o, &gv), &yv) in g[r].iter_mut().zip(gp).zip(yp) {
                            *o = istd * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::ConcatChannels(a, b) => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let (pa, pb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                    let n = sa[0];
                    let mut ga = Vec::with_capacity(n * pa);
                    let mut gb = Vec::with_capacity(n * pb);
                    for i in 0..n {
                        let row = &gy[i * (pa + pb)..(i + 1) * (pa + pb)];
                        ga.extend_from_slice(&row[..pa]);
                        gb.extend_from_slice(&row[pa..]);
                    }
                    accumulate(&mut grads, *a, want(*a).then_some(ga));
                    accumulate(&mut grads, *b, want(*b).then_some(gb));
                }
                Op::Linear { x, w } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (n, k) = (vx.shape()[0], vx.shape()[1]);
                    let m = vw.shape()[0];
                    if want(*x) {
                        let mut dx = vec![E::zero(); n * k];
                        kernels::gemm(n, m, k, &gy, false, vw.data(), false, &mut dx, false);
                        accumulate(&mut grads, *x, Some(dx));
                    }
                    if want(*w) {
                        let mut dw = vec![E::zero(); m * k];
                        kernels::gemm(m, n, k, &gy, true, vx.data(), false, &mut dw, false);
                        accumulate(&mut grads, *w, Some(dw));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = gy[0] / E::from_usize(n).unwrap();
                    let mut g: Vec<E> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * k + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, Some(g));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], id: usize, delta: Option<Vec<E>>) {
    let Some(delta) = delta else { return };
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn require_rank<E: Element>(op: &'static str, t: &Tensor<E>, rank: usize) -> Result<()> {
    if t.dims() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl<'g, E: Element> Var<'g, E> {
    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<E>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> E {
        self.value().item()
    }

    fn unary(self, value: Tensor<E>, op: Op<E>) -> Var<'g, E> {
        let tracked = self.is_tracked();
        self.graph.push(value, op, tracked)
    }

    fn binary(
        self,
        other: Var<'g, E>,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::dim(
                name,
                format!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()),
            )
        })?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![E::zero(); n];
        let (da, db) = (a.data(), b.data());
        kernels::for_each_broadcast(a.shape(), b.shape(), &out_shape, |o, ia, ib| {
            out[o] = f(da[ia], db[ib]);
        });
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self
            .graph
            .push(Tensor::from_parts(out_shape, out), op, tracked))
    }

    /// Elementwise sum; operands of equal rank broadcast along size-1 axes.
    pub fn add(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// `scale · x + shift`.
    pub fn affine(self, scale: E, shift: E) -> Var<'g, E> {
        let v = self.value().map(|x| x * scale + shift);
        self.unary(v, Op::Affine(self.id, scale))
    }

    pub fn scale(self, s: E) -> Var<'g, E> {
        self.affine(s, E::zero())
    }

    pub fn neg(self) -> Var<'g, E> {
        self.affine(-E::one(), E::zero())
    }

    /// `1 − x`.
    pub fn one_minus(self) -> Var<'g, E> {
        self.affine(-E::one(), E::one())
    }

    pub fn sigmoid(self) -> Var<'g, E> {
        let v = self.value().map(|x| E::one() / (E::one() + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn leaky_relu(self, slope: E) -> Var<'g, E> {
        let v = self
            .value()
            .map(|x| if x > E::zero() { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(self) -> Var<'g, E> {
        self.leaky_relu(E::zero())
    }

    pub fn square(self) -> Var<'g, E> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    /// Square root; inputs must be non-negative. The gradient at 0 is taken as 0.
    pub fn sqrt(self) -> Var<'g, E> {
        let v = self.value().map(|x| x.max(E::zero()).sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn sum(self) -> Var<'g, E> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, E> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<E>() / E::from_usize(v.numel()).unwrap();
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Reduces every axis but the first: `(N, …) → (N)`.
    pub fn sum_per_sample(self) -> Var<'g, E> {
        let v = self.value();
        let n = v.shape()[0];
        let per = v.numel() / n;
        let data = v
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().sum())
            .collect();
        self.unary(Tensor::from_parts(vec![n], data), Op::SumPerSample(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, E>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Cuts the gradient path: same value, untracked.
    pub fn detach(self) -> Var<'g, E> {
        let v = (*self.value()).clone();
        self.graph.constant(v)
    }

    /// `(N,C,H,W) ⊛ (O,C,K,K)` with square kernels.
    pub fn conv2d(self, kernel: Var<'g, E>, stride: usize, padding: usize) -> Result<Var<'g, E>> {
        let (x, w) = (self.value(), kernel.value());
        require_rank("conv2d", &x, 4)?;
        require_rank("conv2d", &w, 4)?;
        let (xs, ws) = (x.shape(), w.shape());
        if xs[1] != ws[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input channels (axis 1) = {} but kernel input channels (axis 1) = {}", xs[1], ws[1]),
            ));
        }
        if ws[2] != ws[3] {
            return Err(Error::dim("conv2d", format!("kernel axes 2,3 must be square, got {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, padding).ok_or_else(|| {
            Error::dim(
                "conv2d",
                format!("kernel {} larger than padded input {}×{} (axes 2,3)", ws[2], xs[2], xs[3]),
            )
        })?;
        let out = kernels::conv2d_forward(x.data(), xs[0], &geom, w.data(), ws[0]);
        let shape = vec![xs[0], ws[0], geom.out_h, geom.out_w];
        let tracked = self.is_tracked() || kernel.is_tracked();
        Ok(self.graph.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                geom,
                out_channels: ws[0],
            },
            tracked,
        ))
    }

    /// Adjoint of [`Var::conv2d`] w.r.t. its input: `(N,O,H,W) → (N,C,Ho,Wo)` for an
    /// `(O,C,K,K)` kernel, `Ho = (H−1)·stride − 2·padding + K`.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'g, E>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, E>> {
        let (x, w) = (self.value(), kernel.value());
        require_rank("conv_transpose2d", &x, 4)?;
        require_rank("conv_transpose2d", &w, 4)?;
        let (xs, ws) = (x.shape(), w.shape());
        if xs[1] != ws[0] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input channels (axis 1) = {} but kernel axis 0 = {}", xs[1], ws[0]),
            ));
        }
        if stride == 0 || ws[2] != ws[3] {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose2d needs stride ≥ 1 and a square kernel, got stride {stride}, kernel {ws:?}"
            )));
        }
        let k = ws[2];
        let oh = kernels::conv_transpose_out_dim(xs[2], k, stride, padding);
        let ow = kernels::conv_transpose_out_dim(xs[3], k, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim("conv_transpose2d", "padding leaves an empty output"));
        };
        let geom = ConvGeom::new(ws[1], oh, ow, k, stride, padding)
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(|| Error::dim("conv_transpose2d", "inconsistent stride/padding geometry"))?;
        let out = kernels::conv_transpose2d_forward(x.data(), xs[0], &geom, w.data(), ws[0]);
        let tracked = self.is_tracked() || kernel.is_tracked();
        Ok(self.graph.push(
            Tensor::from_parts(vec![xs[0], ws[1], oh, ow], out),
            Op::ConvTranspose2d {
                x: self.id,
                w: kernel.id,
                geom,
                in_channels: ws[0],
            },
            tracked,
        ))
    }

    /// Mean over the spatial plane: `(N,C,H,W) → (N,C)`.
    pub fn global_average_pool(self) -> Result<Var<'g, E>> {
        let x = self.value();
        require_rank("global_average_pool", &x, 4)?;
        let s = x.shape();
        let hw = s[2] * s[3];
        let inv = E::one() / E::from_usize(hw).unwrap();
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<E>() * inv)
            .collect();
        Ok(self.unary(
            Tensor::from_parts(vec![s[0], s[1]], data),
            Op::GlobalAvgPool(self.id),
        ))
    }

    /// Resizes `(N,C,h,w)` up to `(N,C,target_h,target_w)`. Downscaling is rejected.
    pub fn upsample(self, target_h: usize, target_w: usize, mode: ResizeMode) -> Result<Var<'g, E>> {
        let x = self.value();
        require_rank("upsample", &x, 4)?;
        let s = x.shape();
        if target_h < s[2] || target_w < s[3] {
            return Err(Error::InvalidArgument(format!(
                "upsample cannot shrink {}×{} to {target_h}×{target_w}",
                s[2], s[3]
            )));
        }
        let (from, to) = ((s[2], s[3]), (target_h, target_w));
        let data = kernels::resize_forward(x.data(), s[0] * s[1], from, to, mode);
        Ok(self.unary(
            Tensor::from_parts(vec![s[0], s[1], target_h, target_w], data),
            Op::Resize {
                x: self.id,
                from,
                to,
                mode,
            },
        ))
    }

    pub fn upsample_bilinear(self, target_h: usize, target_w: usize) -> Result<Var<'g, E>> {
        self.upsample(target_h, target_w, ResizeMode::Bilinear)
    }

    /// Per-sample, per-channel normalization over the spatial plane (no affine terms).
    pub fn instance_norm(self, eps: E) -> Result<Var<'g, E>> {
        let x = self.value();
        require_rank("instance_norm", &x, 4)?;
        let s = x.shape();
        let hw = s[2] * s[3];
        let inv_hw = E::one() / E::from_usize(hw).unwrap();
        let mut out = vec![E::zero(); x.numel()];
        let mut inv_std = Vec::with_capacity(s[0] * s[1]);
        for (p, plane) in x.data().chunks(hw).enumerate() {
            let mean = plane.iter().copied().sum::<E>() * inv_hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_hw;
            let istd = E::one() / (var + eps).sqrt();
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                *o = (v - mean) * istd;
            }
            inv_std.push(istd);
        }
        Ok(self.unary(
            Tensor::from_parts(s.to_vec(), out),
            Op::InstanceNorm {
                x: self.id,
                inv_std,
            },
        ))
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        require_rank("concat_channels", &a, 4)?;
        require_rank("concat_channels", &b, 4)?;
        let (sa, sb) = (a.shape(), b.shape());
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::dim(
                "concat_channels",
                format!("axes 0,2,3 differ: {sa:?} vs {sb:?}"),
            ));
        }
        let (pa, pb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for i in 0..sa[0] {
            data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
        }
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.graph.push(
            Tensor::from_parts(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], data),
            Op::ConcatChannels(self.id, other.id),
            tracked,
        ))
    }

    /// `(N,K) · (M,K)ᵀ → (N,M)`.
    pub fn linear(self, weight: Var<'g, E>) -> Result<Var<'g, E>> {
        let (x, w) = (self.value(), weight.value());
        require_rank("linear", &x, 2)?;
        require_rank("linear", &w, 2)?;
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let (m, kw) = (w.shape()[0], w.shape()[1]);
        if k != kw {
            return Err(Error::dim(
                "linear",
                format!("input features (axis 1) = {k} but weight axis 1 = {kw}"),
            ));
        }
        let mut out = vec![E::zero(); n * m];
        kernels::gemm(n, k, m, x.data(), false, w.data(), true, &mut out, false);
        let tracked = self.is_tracked() || weight.is_tracked();
        Ok(self.graph.push(
            Tensor::from_parts(vec![n, m], out),
            Op::Linear {
                x: self.id,
                w: weight.id,
            },
            tracked,
        ))
    }

    /// Mean softmax cross-entropy of `(N,K)` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, E>> {
        let x = self.value();
        require_rank("cross_entropy", &x, 2)?;
        let (n, k) = (x.shape()[0], x.shape()[1]);
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside the {k} known categories"
            )));
        }
        let mut probs = vec![E::zero(); n * k];
        let mut total = E::zero();
        for (i, row) in x.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let z: E = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total += lse - row[labels[i]];
        }
        let loss = total / E::from_usize(n).unwrap();
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}
