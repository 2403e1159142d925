//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly and records its inputs, so node order is a topological order and
//! [`Graph::backward`] simply walks it in reverse. Graphs are rebuilt for
//! every forward pass; nothing is mutated in place.
//!
//! Only nodes that (transitively) depend on a `requires_grad` leaf take part
//! in the backward pass. Attacks mark the perturbation as the sole such leaf,
//! so weight gradients are never computed while crafting.
//!
//! Reductions and gradient buffers accumulate in `f64`. Convolutions run as
//! im2col + GEMM in the storage type, so `Graph<f64>` gives a fully double
//! precision path for gradient checking.

use crate::error::{numerics_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Div(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat(Vec<Var>),
    MeanAll(Var),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Upsample2x,
    Relu,
    Elu,
    Sigmoid,
    Abs,
    Add,
    Sub,
    Div,
    MulScalar,
    AddScalar,
    Clamp,
    Concat,
    MeanAll,
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const ELU_ALPHA: f64 = 1.0;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Non-finite data is rejected.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(numerics_err!(
                "non-finite value in graph input of shape {:?}",
                value.shape()
            ));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Adds a constant (non-differentiable) input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::Relu(_) => OpKind::Relu,
            Op::Elu(_) => OpKind::Elu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Abs(_) => OpKind::Abs,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Div(..) => OpKind::Div,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Concat(_) => OpKind::Concat,
            Op::MeanAll(_) => OpKind::MeanAll,
        }
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to
    /// `v`, if `v` took part in the backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(
                node.value.shape().to_vec(),
                g.iter().map(|&x| T::from_f64(x)).collect(),
            )
            .expect("gradient length matches value")
        })
    }

    /// Gradient in `f64`, without rounding to the storage type.
    pub fn grad_f64(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| T::from_f64(f(v.to_f64())));
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, |x, y| {
                T::from_f64(f(x.to_f64(), y.to_f64()))
            })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), |v| {
            if v > 0.0 {
                v
            } else {
                ELU_ALPHA * v.exp_m1()
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise `a / b`. A non-finite quotient (e.g. a zero divisor) is a numerics error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, Op::Div(a, b), |x, y| x / y)?;
        if !self.nodes[out.0].value.all_finite() {
            return Err(numerics_err!("division produced a non-finite value"));
        }
        Ok(out)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = t.len().max(1) as f64;
        let s: f64 = t.data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64(s / n)), Op::MeanAll(x), rg)
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of zero tensors"));
        }
        let (_, h, w) = self.nodes[parts[0].0].value.chw()?;
        let mut total_c = 0;
        for p in parts {
            let (c, ph, pw) = self.nodes[p.0].value.chw()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!(
                    "concat spatial mismatch: {}x{} vs {}x{}",
                    h,
                    w,
                    ph,
                    pw
                ));
            }
            total_c += c;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = self.rg(parts);
        let value = Tensor::new(vec![total_c, h, w], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (c, h, w) = t.chw()?;
        let (h2, w2) = (2 * h, 2 * w);
        let src = t.data();
        let mut out = vec![T::default(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let srow = &src[ch * h * w + (y / 2) * w..][..w];
                let orow = &mut out[ch * h2 * w2 + y * w2..][..w2];
                for (x2, o) in orow.iter_mut().enumerate() {
                    *o = srow[x2 / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, h2, w2], out)?, Op::Upsample2x(x), rg))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[Ci, H, W]`, `weight` is `[Co, Ci, K, K]`, `bias` is `[Co]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 || stride > 2 {
            return Err(shape_err!("conv2d stride must be 1 or 2, got {stride}"));
        }
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let geo = ConvGeometry::new(x.shape(), wt.shape(), stride, pad)?;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [geo.co] {
                return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", bs, geo.co));
            }
        }
        let bias_vals: Vec<f64> = match bias {
            Some(b) => self.nodes[b.0].value.data().iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; geo.co],
        };
        let out = conv_forward(&geo, x.data(), wt.data(), &bias_vals);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new(vec![geo.co, geo.ho, geo.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Afterwards every node that depends on a `requires_grad` leaf holds
    /// `d loss / d node`; leaves created without `requires_grad` have none.
    /// Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            ));
        }
        if !lt.all_finite() {
            return Err(numerics_err!("loss is not finite"));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_node(idx, &op, &gy);
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: impl FnOnce(&Self) -> Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let contrib = g(self);
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn backward_node(&mut self, idx: usize, op: &Op, gy: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Relu(x) => self.accumulate(x, |g| {
                zip_grad(&g.nodes[x.0].value, gy, |v, d| if v > 0.0 { d } else { 0.0 })
            }),
            // both derivatives are recovered from the stored output
            Op::Elu(x) => self.accumulate(x, |g| {
                zip_grad(&g.nodes[idx].value, gy, |y, d| {
                    if y > 0.0 {
                        d
                    } else {
                        d * (y + ELU_ALPHA)
                    }
                })
            }),
            Op::Sigmoid(x) => self.accumulate(x, |g| {
                zip_grad(&g.nodes[idx].value, gy, |s, d| d * s * (1.0 - s))
            }),
            Op::Abs(x) => self.accumulate(x, |g| {
                zip_grad(&g.nodes[x.0].value, gy, |v, d| {
                    if v > 0.0 {
                        d
                    } else if v < 0.0 {
                        -d
                    } else {
                        0.0
                    }
                })
            }),
            Op::MulScalar(x, s) => self.accumulate(x, |_| gy.iter().map(|d| d * s).collect()),
            Op::AddScalar(x) => self.accumulate(x, |_| gy.to_vec()),
            Op::Clamp { x, lo, hi } => self.accumulate(x, |g| {
                zip_grad(&g.nodes[x.0].value, gy, |v, d| {
                    if v >= lo && v <= hi {
                        d
                    } else {
                        0.0
                    }
                })
            }),
            Op::Add(a, b) => {
                self.accumulate(a, |_| gy.to_vec());
                self.accumulate(b, |_| gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |_| gy.to_vec());
                self.accumulate(b, |_| gy.iter().map(|d| -d).collect());
            }
            Op::Div(a, b) => {
                self.accumulate(a, |g| {
                    zip_grad(&g.nodes[b.0].value, gy, |bv, d| d / bv)
                });
                self.accumulate(b, |g| {
                    let av = g.nodes[a.0].value.data();
                    let bv = g.nodes[b.0].value.data();
                    av.iter()
                        .zip(bv)
                        .zip(gy)
                        .map(|((x, y), d)| {
                            let (x, y) = (x.to_f64(), y.to_f64());
                            -d * x / (y * y)
                        })
                        .collect()
                });
            }
            Op::MeanAll(x) => self.accumulate(x, |g| {
                let n = g.nodes[x.0].value.len();
                vec![gy[0] / n.max(1) as f64; n]
            }),
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let slice = &gy[off..off + n];
                    self.accumulate(p, |_| slice.to_vec());
                    off += n;
                }
            }
            Op::Upsample2x(x) => self.accumulate(x, |g| {
                let (c, h, w) = g.nodes[x.0].value.chw().expect("checked in forward");
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        let grow = &gy[ch * h2 * w2 + y * w2..][..w2];
                        let drow = &mut dx[ch * h * w + (y / 2) * w..][..w];
                        for (x2, d) in grow.iter().enumerate() {
                            drow[x2 / 2] += d;
                        }
                    }
                }
                dx
            }),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let geo = ConvGeometry::new(
                    self.nodes[input.0].value.shape(),
                    self.nodes[weight.0].value.shape(),
                    stride,
                    pad,
                )
                .expect("checked in forward");
                self.accumulate(input, |g| {
                    conv_backward_input(&geo, g.nodes[weight.0].value.data(), gy)
                });
                self.accumulate(weight, |g| {
                    conv_backward_weight(&geo, g.nodes[input.0].value.data(), gy)
                });
                if let Some(b) = bias {
                    self.accumulate(b, |_| {
                        gy.chunks_exact(geo.ho * geo.wo)
                            .map(|plane| plane.iter().sum())
                            .collect()
                    });
                }
            }
        }
    }
}

fn zip_grad<T: Element>(x: &Tensor<T>, gy: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    x.data()
        .iter()
        .zip(gy)
        .map(|(v, &d)| f(v.to_f64(), d))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (ci, h, w) = match *xs {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err!("conv2d input must be [C,H,W], got {:?}", xs)),
        };
        let (co, wci, k) = match *ws {
            [co, c, k1, k2] if k1 == k2 => (co, c, k1),
            _ => return Err(shape_err!("conv2d weight must be [Co,Ci,K,K], got {:?}", ws)),
        };
        if wci != ci {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {ci}, weight expects {wci}"
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("conv2d kernel {k} larger than padded input {h}x{w}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Output column range `[lo, hi)` whose input column `ox*s + kx - pad` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        let last = self.w - 1 + self.pad;
        if last < kx {
            return (0, 0);
        }
        let hi = ((last - kx) / s + 1).min(self.wo);
        (lo.min(hi), hi)
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

/// Target element count of one im2col tile; keeps a tile resident in L2.
const TILE_ELEMS: usize = 32 * 1024;

impl ConvGeometry {
    fn kdim(&self) -> usize {
        self.ci * self.k * self.k
    }

    /// Output-row bands `[oy0, oy1)` processed one im2col tile at a time.
    fn row_bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = (TILE_ELEMS / (self.kdim() * self.wo)).clamp(1, self.ho);
        let ho = self.ho;
        (0..ho).step_by(rows).map(move |r| (r, (r + rows).min(ho)))
    }
}

/// Unrolls the receptive fields of output rows `[oy0, oy1)` into a
/// `[Ci*K*K, (oy1-oy0)*Wo]` matrix. Every element of `cols` is written.
fn im2col<T: Element>(g: &ConvGeometry, x: &[T], (oy0, oy1): (usize, usize), cols: &mut Vec<T>) {
    let t = (oy1 - oy0) * g.wo;
    cols.resize(g.kdim() * t, T::default());
    for ic in 0..g.ci {
        let xplane = &x[ic * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.col_range(kx);
                let row = &mut cols[((ic * g.k + ky) * g.k + kx) * t..][..t];
                for oy in oy0..oy1 {
                    let dst = &mut row[(oy - oy0) * g.wo..][..g.wo];
                    let iy = match g.in_row(oy, ky) {
                        Some(iy) if lo < hi => iy,
                        _ => {
                            dst.fill(T::default());
                            continue;
                        }
                    };
                    dst[..lo].fill(T::default());
                    dst[hi..].fill(T::default());
                    let xrow = &xplane[iy * g.w..][..g.w];
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&xrow[start..start + hi - lo]);
                    } else {
                        for (d, v) in dst[lo..hi].iter_mut().zip(xrow[start..].iter().step_by(g.stride)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column tile for output rows `[oy0, oy1)` onto the input grid.
fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], (oy0, oy1): (usize, usize), dx: &mut [f64]) {
    let t = (oy1 - oy0) * g.wo;
    for ic in 0..g.ci {
        let dplane = &mut dx[ic * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                let row = &cols[((ic * g.k + ky) * g.k + kx) * t..][..t];
                for oy in oy0..oy1 {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let drow = &mut dplane[iy * g.w..][..g.w];
                    let start = lo * g.stride + kx - g.pad;
                    let base = (oy - oy0) * g.wo;
                    let src = &row[base + lo..base + hi];
                    if g.stride == 1 {
                        for (d, v) in drow[start..].iter_mut().zip(src) {
                            *d += v.to_f64();
                        }
                    } else {
                        for (d, v) in drow[start..].iter_mut().step_by(g.stride).zip(src) {
                            *d += v.to_f64();
                        }
                    }
                }
            }
        }
    }
}

/// A strided matrix view: element `(i, j)` lives at `data[i * rs + j * cs]`.
struct MatRef<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

fn mat<T>(data: &[T], rs: usize, cs: usize) -> MatRef<'_, T> {
    MatRef { data, rs, cs }
}

/// `c = beta * c + a * b` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: f64,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    assert!(k == 0 || b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds cover every element gemm reads or writes.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            T::from_f64(beta),
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn conv_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], bias: &[f64]) -> Vec<T> {
    let p = g.ho * g.wo;
    let kdim = g.kdim();
    // gemm with beta = 0 never reads `out`
    let mut out = vec![T::default(); g.co * p];
    let mut cols = Vec::new();
    for band in g.row_bands() {
        im2col(g, x, band, &mut cols);
        let t = (band.1 - band.0) * g.wo;
        let off = band.0 * g.wo;
        gemm(g.co, kdim, t, mat(w, kdim, 1), mat(&cols, t, 1), 0.0, &mut out[off..], (p, 1));
    }
    for (plane, &b) in out.chunks_exact_mut(p).zip(bias) {
        for v in plane {
            *v = T::from_f64(v.to_f64() + b);
        }
    }
    out
}

fn conv_backward_input<T: Element>(g: &ConvGeometry, w: &[T], gy: &[f64]) -> Vec<f64> {
    let p = g.ho * g.wo;
    let kdim = g.kdim();
    let gy_t: Vec<T> = gy.iter().map(|&v| T::from_f64(v)).collect();
    let mut dx = vec![0.0f64; g.ci * g.h * g.w];
    let mut dcols = Vec::new();
    for band in g.row_bands() {
        let t = (band.1 - band.0) * g.wo;
        let off = band.0 * g.wo;
        dcols.resize(kdim * t, T::default());
        // dcols = w^T * gy[:, band]
        gemm(kdim, g.co, t, mat(w, 1, kdim), mat(&gy_t[off..], p, 1), 0.0, &mut dcols, (t, 1));
        col2im(g, &dcols, band, &mut dx);
    }
    dx
}

fn conv_backward_weight<T: Element>(g: &ConvGeometry, x: &[T], gy: &[f64]) -> Vec<f64> {
    let p = g.ho * g.wo;
    let kdim = g.kdim();
    let gy_t: Vec<T> = gy.iter().map(|&v| T::from_f64(v)).collect();
    let mut dw = vec![T::default(); g.co * kdim];
    let mut cols = Vec::new();
    for band in g.row_bands() {
        im2col(g, x, band, &mut cols);
        let t = (band.1 - band.0) * g.wo;
        let off = band.0 * g.wo;
        // dw += gy[:, band] * cols^T
        gemm(g.co, t, kdim, mat(&gy_t[off..], p, 1), mat(&cols, 1, t), 1.0, &mut dw, (kdim, 1));
    }
    dw.iter().map(|v| v.to_f64()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[1], &[0.0]), true).unwrap();
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]), false).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]), true).unwrap();
        let m = g.mean_all(x);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let img: Vec<f32> = (0..3 * 5 * 7).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut w = vec![0.0f32; 3 * 3 * 9];
        for c in 0..3 {
            w[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[3, 5, 7], &img), false).unwrap();
        let wv = g.leaf(t(&[3, 3, 3, 3], &w), false).unwrap();
        let y = g.conv2d(x, wv, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &img[..]);
    }

    #[test]
    fn stride_two_output_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![3, 64, 128]), false).unwrap();
        let w = g.leaf(Tensor::zeros(vec![8, 3, 3, 3]), false).unwrap();
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 32, 64]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(vec![2]), false).unwrap();
        let b = g.leaf(Tensor::zeros(vec![3]), false).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let x = g.leaf(Tensor::zeros(vec![2, 4, 4]), false).unwrap();
        let w = g.leaf(Tensor::zeros(vec![1, 3, 3, 3]), false).unwrap();
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
        let c = g.leaf(Tensor::zeros(vec![1, 4, 5]), false).unwrap();
        assert!(matches!(g.concat_channels(&[x, c]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![3]), true).unwrap();
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::<f32>::new();
        let r = g.leaf(t(&[2], &[1.0, f32::NAN]), false);
        assert!(matches!(r, Err(Error::Numerics(_))));
        let r = g.leaf(t(&[1], &[f32::INFINITY]), false);
        assert!(matches!(r, Err(Error::Numerics(_))));
    }

    #[test]
    fn division_by_zero_is_numerics_error() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(t(&[2], &[1.0, 1.0]), false).unwrap();
        let b = g.leaf(t(&[2], &[1.0, 0.0]), false).unwrap();
        assert!(matches!(g.div(a, b), Err(Error::Numerics(_))));
    }

    #[test]
    fn non_grad_leaves_untouched() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let b = g.leaf(t(&[2], &[3.0, 4.0]), false).unwrap();
        let s = g.sub(a, b).unwrap();
        let m = g.mean_all(s);
        g.backward(m).unwrap();
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad(a).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn upsample_and_concat() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(t(&[1, 1, 2], &[1.0, 2.0]), true).unwrap();
        let u = g.upsample2x(a).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 2, 4]);
        assert_eq!(g.value(u).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let b = g.leaf(Tensor::full(vec![2, 2, 4], 0.5), false).unwrap();
        let c = g.concat_channels(&[u, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2, 4]);
        let m = g.mean_all(c);
        g.backward(m).unwrap();
        let gr = g.grad(a).unwrap();
        assert!((gr.data()[0] - 4.0 / 24.0).abs() < 1e-7);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g
                .leaf(Tensor::from_fn(vec![2, 8, 8], |i| (i as f32 * 0.1).cos()), false)
                .unwrap();
            let w = g
                .leaf(Tensor::from_fn(vec![4, 2, 3, 3], |i| (i as f32 * 0.7).sin()), false)
                .unwrap();
            let y = g.conv2d(x, w, None, 2, 1).unwrap();
            let y = g.elu(y);
            g.value(y).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
