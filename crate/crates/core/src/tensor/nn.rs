//! Structured ops: matmul family, 3x3 convolution, resampling, normalization,
//! softmax, dropout, concat/reshape and broadcast bias adds.
//!
//! Convolution is fixed to 3x3 / stride 1 / padding 1; resolution changes go
//! through the explicit pool/upsample ops.

use rand::Rng;

use super::graph::{Backward, BackwardCtx, Graph, Node};
use super::{fmt_shape, Tensor};
use crate::{Error, Real, Result};

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    let list: Vec<String> = shapes.iter().map(|s| fmt_shape(s)).collect();
    Error::shape(op, list.join(" vs "))
}

// ── matmul ──────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
fn matmul_accum(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// C[m,n] += A[k,m]^T · B[k,n]
fn matmul_ta_accum(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]^T
fn matmul_tb_accum(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

struct MatmulRule {
    a: Node,
    b: Node,
    m: usize,
    k: usize,
    n: usize,
    /// Number of batch matrices; 1 for plain 2-D matmul. rhs is shared
    /// across the batch when `rhs_broadcast` is set.
    batch: usize,
    rhs_broadcast: bool,
}

impl Backward for MatmulRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = ctx.value(self.a).clone();
        let bv = ctx.value(self.b).clone();
        if ctx.needs(self.a) {
            // dA = dC · B^T, per batch
            let mut da = Tensor::zeros(av.shape().to_vec());
            for bi in 0..self.batch {
                let g_sl = &g.data()[bi * m * n..(bi + 1) * m * n];
                let b_sl = if self.rhs_broadcast {
                    bv.data()
                } else {
                    &bv.data()[bi * k * n..(bi + 1) * k * n]
                };
                matmul_tb_accum(g_sl, b_sl, &mut da.data_mut()[bi * m * k..(bi + 1) * m * k], m, n, k);
            }
            ctx.accumulate(self.a, da);
        }
        if ctx.needs(self.b) {
            // dB = A^T · dC, summed over the batch when broadcast
            let mut db = Tensor::zeros(bv.shape().to_vec());
            for bi in 0..self.batch {
                let g_sl = &g.data()[bi * m * n..(bi + 1) * m * n];
                let a_sl = &av.data()[bi * m * k..(bi + 1) * m * k];
                let db_sl = if self.rhs_broadcast {
                    &mut db.data_mut()[..]
                } else {
                    &mut db.data_mut()[bi * k * n..(bi + 1) * k * n]
                };
                // dB[k,n] = A[m,k]^T . G[m,n]
                matmul_ta_accum(a_sl, g_sl, db_sl, k, m, n);
            }
            ctx.accumulate(self.b, db);
        }
    }
}

struct Transpose12Rule {
    x: Node,
}

impl Backward for Transpose12Rule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        // g: [B, Y, X] -> dx: [B, X, Y]
        let gs = g.shape();
        let (b, y, x) = (gs[0], gs[1], gs[2]);
        let mut dx = Tensor::zeros(vec![b, x, y]);
        transpose_12_into(g.data(), dx.data_mut(), b, y, x);
        ctx.accumulate(self.x, dx);
    }
}

fn transpose_12_into(src: &[Real], dst: &mut [Real], b: usize, rows: usize, cols: usize) {
    for bi in 0..b {
        let s = &src[bi * rows * cols..(bi + 1) * rows * cols];
        let d = &mut dst[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}

impl Graph {
    /// `[m,k] @ [k,n]`, or batched `[B,m,k] @ [B,k,n]`, or batched with a
    /// shared rhs `[B,m,k] @ [k,n]`.
    pub fn matmul(&self, a: Node, b: Node) -> Result<Node> {
        let (value, m, k, n, batch, rhs_broadcast) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (ashape, bshape) = (av.shape(), bv.shape());
            let (batch, m, k, n, rhs_broadcast) = match (ashape.len(), bshape.len()) {
                (2, 2) => {
                    if ashape[1] != bshape[0] {
                        return Err(shape_err("matmul", &[ashape, bshape]));
                    }
                    (1, ashape[0], ashape[1], bshape[1], false)
                }
                (3, 2) => {
                    if ashape[2] != bshape[0] {
                        return Err(shape_err("matmul", &[ashape, bshape]));
                    }
                    (ashape[0], ashape[1], ashape[2], bshape[1], true)
                }
                (3, 3) => {
                    if ashape[0] != bshape[0] || ashape[2] != bshape[1] {
                        return Err(shape_err("matmul", &[ashape, bshape]));
                    }
                    (ashape[0], ashape[1], ashape[2], bshape[2], false)
                }
                _ => return Err(shape_err("matmul", &[ashape, bshape])),
            };
            let out_shape = if ashape.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
            let mut out = Tensor::zeros(out_shape);
            for bi in 0..batch {
                let a_sl = &av.data()[bi * m * k..(bi + 1) * m * k];
                let b_sl = if rhs_broadcast { bv.data() } else { &bv.data()[bi * k * n..(bi + 1) * k * n] };
                matmul_accum(a_sl, b_sl, &mut out.data_mut()[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
            (out, m, k, n, batch, rhs_broadcast)
        };
        self.push("matmul", value, &[a, b], Box::new(MatmulRule { a, b, m, k, n, batch, rhs_broadcast }))
    }

    /// Swap the last two axes of a 3-D tensor.
    pub fn transpose_12(&self, x: Node) -> Result<Node> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.ndim() != 3 {
                return Err(shape_err("transpose_12", &[xv.shape()]));
            }
            let (b, r, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let mut out = Tensor::zeros(vec![b, c, r]);
            transpose_12_into(xv.data(), out.data_mut(), b, r, c);
            out
        };
        self.push("transpose_12", value, &[x], Box::new(Transpose12Rule { x }))
    }
}

// ── conv2d 3x3 / stride 1 / pad 1 ───────────────────────────────────

struct Conv2dRule {
    x: Node,
    w: Node,
    dims: ConvDims,
}

#[derive(Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

fn conv2d_forward(x: &[Real], weight: &[Real], d: ConvDims) -> Vec<Real> {
    let ConvDims { b, cin, cout, h, w } = d;
    let mut out = vec![0.0; b * cout * h * w];
    for bi in 0..b {
        for oc in 0..cout {
            let out_base = (bi * cout + oc) * h * w;
            for ic in 0..cin {
                let in_base = (bi * cin + ic) * h * w;
                let w_base = (oc * cin + ic) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = weight[w_base + ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // y + ky - 1 in [0, h) limits the y range
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        for y in y_lo..y_hi {
                            let src_row = in_base + (y + ky - 1) * w;
                            let dst_row = out_base + y * w;
                            for xx in x_lo..x_hi {
                                out[dst_row + xx] += wv * x[src_row + xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl Backward for Conv2dRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let ConvDims { b, cin, cout, h, w } = self.dims;
        let xv = ctx.value(self.x).clone();
        let wv = ctx.value(self.w).clone();
        if ctx.needs(self.x) {
            // dX[b,ic,yy,xx] += W[oc,ic,ky,kx] * G[b,oc,yy-ky+1,xx-kx+1]
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            let dxd = dx.data_mut();
            for bi in 0..b {
                for oc in 0..cout {
                    let g_base = (bi * cout + oc) * h * w;
                    for ic in 0..cin {
                        let dx_base = (bi * cin + ic) * h * w;
                        let w_base = (oc * cin + ic) * 9;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let wval = wv.data()[w_base + ky * 3 + kx];
                                if wval == 0.0 {
                                    continue;
                                }
                                let y_lo = 1usize.saturating_sub(ky);
                                let y_hi = (h + 1 - ky).min(h);
                                let x_lo = 1usize.saturating_sub(kx);
                                let x_hi = (w + 1 - kx).min(w);
                                for y in y_lo..y_hi {
                                    let g_row = g_base + y * w;
                                    let dx_row = dx_base + (y + ky - 1) * w;
                                    for xx in x_lo..x_hi {
                                        dxd[dx_row + xx + kx - 1] += wval * g.data()[g_row + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            ctx.accumulate(self.x, dx);
        }
        if ctx.needs(self.w) {
            let mut dw = Tensor::zeros(wv.shape().to_vec());
            let dwd = dw.data_mut();
            for bi in 0..b {
                for oc in 0..cout {
                    let g_base = (bi * cout + oc) * h * w;
                    for ic in 0..cin {
                        let in_base = (bi * cin + ic) * h * w;
                        let w_base = (oc * cin + ic) * 9;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let y_lo = 1usize.saturating_sub(ky);
                                let y_hi = (h + 1 - ky).min(h);
                                let x_lo = 1usize.saturating_sub(kx);
                                let x_hi = (w + 1 - kx).min(w);
                                let mut acc = 0.0;
                                for y in y_lo..y_hi {
                                    let g_row = g_base + y * w;
                                    let in_row = in_base + (y + ky - 1) * w;
                                    for xx in x_lo..x_hi {
                                        acc += g.data()[g_row + xx] * xv.data()[in_row + xx + kx - 1];
                                    }
                                }
                                dwd[w_base + ky * 3 + kx] += acc;
                            }
                        }
                    }
                }
            }
            ctx.accumulate(self.w, dw);
        }
    }
}

// ── pooling / upsampling ────────────────────────────────────────────

struct AvgPool2Rule {
    x: Node,
}

impl Backward for AvgPool2Rule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let xs = ctx.value(self.x).shape().to_vec();
        let (n, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(xs.clone());
        let dxd = dx.data_mut();
        for c in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let gv = 0.25 * g.data()[(c * oh + y) * ow + x];
                    let base = c * h * w + 2 * y * w + 2 * x;
                    dxd[base] += gv;
                    dxd[base + 1] += gv;
                    dxd[base + w] += gv;
                    dxd[base + w + 1] += gv;
                }
            }
        }
        ctx.accumulate(self.x, dx);
    }
}

struct Upsample2Rule {
    x: Node,
}

impl Backward for Upsample2Rule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let xs = ctx.value(self.x).shape().to_vec();
        let (n, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * 2, w * 2);
        let mut dx = Tensor::zeros(xs.clone());
        let dxd = dx.data_mut();
        for c in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let base = (c * oh + 2 * y) * ow + 2 * x;
                    dxd[c * h * w + y * w + x] +=
                        g.data()[base] + g.data()[base + 1] + g.data()[base + ow] + g.data()[base + ow + 1];
                }
            }
        }
        ctx.accumulate(self.x, dx);
    }
}

// ── normalization ───────────────────────────────────────────────────

struct NormRule {
    x: Node,
    out: Node,
    /// (start, len) spans of each normalization group in the flat buffer.
    groups: Vec<(usize, usize)>,
    inv_std: Vec<Real>,
}

impl Backward for NormRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)) per group
        let y = ctx.value(self.out).clone();
        let mut dx = Tensor::zeros(ctx.value(self.x).shape().to_vec());
        let dxd = dx.data_mut();
        for (gi, &(start, len)) in self.groups.iter().enumerate() {
            let n = len as Real;
            let g_sl = &g.data()[start..start + len];
            let y_sl = &y.data()[start..start + len];
            let mean_g: Real = g_sl.iter().sum::<Real>() / n;
            let mean_gy: Real = g_sl.iter().zip(y_sl).map(|(&a, &b)| a * b).sum::<Real>() / n;
            let istd = self.inv_std[gi];
            for i in 0..len {
                dxd[start + i] = istd * (g_sl[i] - mean_g - y_sl[i] * mean_gy);
            }
        }
        ctx.accumulate(self.x, dx);
    }
}

fn normalize_groups(x: &Tensor, groups: Vec<(usize, usize)>, eps: Real) -> (Tensor, Vec<Real>) {
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(groups.len());
    for &(start, len) in &groups {
        let n = len as Real;
        let sl = &x.data()[start..start + len];
        let mean: Real = sl.iter().sum::<Real>() / n;
        let var: Real = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for (o, &v) in out.data_mut()[start..start + len].iter_mut().zip(sl) {
            *o = (v - mean) * istd;
        }
    }
    (out, inv_std)
}

// ── softmax ─────────────────────────────────────────────────────────

struct SoftmaxRule {
    x: Node,
    out: Node,
    row: usize,
}

impl Backward for SoftmaxRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let y = ctx.value(self.out).clone();
        let mut dx = Tensor::zeros(y.shape().to_vec());
        let dxd = dx.data_mut();
        let rows = y.numel() / self.row;
        for r in 0..rows {
            let s = r * self.row;
            let g_sl = &g.data()[s..s + self.row];
            let y_sl = &y.data()[s..s + self.row];
            let dot: Real = g_sl.iter().zip(y_sl).map(|(&a, &b)| a * b).sum();
            for i in 0..self.row {
                dxd[s + i] = y_sl[i] * (g_sl[i] - dot);
            }
        }
        ctx.accumulate(self.x, dx);
    }
}

// ── dropout ─────────────────────────────────────────────────────────

struct MaskRule {
    x: Node,
    mask: Vec<Real>,
}

impl Backward for MaskRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let dx = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * self.mask[i]);
        ctx.accumulate(self.x, dx);
    }
}

// ── concat / reshape ────────────────────────────────────────────────

struct ConcatRule {
    a: Node,
    b: Node,
    axis: usize,
}

impl Backward for ConcatRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let a_shape = ctx.value(self.a).shape().to_vec();
        let b_shape = ctx.value(self.b).shape().to_vec();
        let outer: usize = a_shape[..self.axis].iter().product();
        let a_block: usize = a_shape[self.axis..].iter().product();
        let b_block: usize = b_shape[self.axis..].iter().product();
        let mut da = Tensor::zeros(a_shape.clone());
        let mut db = Tensor::zeros(b_shape.clone());
        for o in 0..outer {
            let g_base = o * (a_block + b_block);
            da.data_mut()[o * a_block..(o + 1) * a_block]
                .copy_from_slice(&g.data()[g_base..g_base + a_block]);
            db.data_mut()[o * b_block..(o + 1) * b_block]
                .copy_from_slice(&g.data()[g_base + a_block..g_base + a_block + b_block]);
        }
        ctx.accumulate(self.a, da);
        ctx.accumulate(self.b, db);
    }
}

struct ReshapeRule {
    x: Node,
}

impl Backward for ReshapeRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let shape = ctx.value(self.x).shape().to_vec();
        let dx = Tensor::new(shape, g.data().to_vec()).expect("reshape grad");
        ctx.accumulate(self.x, dx);
    }
}

// ── broadcast bias ops ──────────────────────────────────────────────

/// How a small tensor is broadcast against a big one.
#[derive(Clone, Copy)]
enum BiasLayout {
    /// bias[F] over rows of [B, F]
    Row,
    /// bias[C] over [B, C, H, W]
    Channel,
    /// map[B, C] over [B, C, H, W]
    ChannelMap,
}

struct BiasRule {
    x: Node,
    bias: Node,
    layout: BiasLayout,
    multiplicative: bool,
}

fn bias_spans(shape: &[usize], layout: BiasLayout) -> (usize, usize, usize) {
    // Returns (outer, bias_len, inner): flat index = (o * bias_len + c) * inner + i
    match layout {
        BiasLayout::Row => (shape[0], shape[1], 1),
        BiasLayout::Channel => (shape[0], shape[1], shape[2] * shape[3]),
        BiasLayout::ChannelMap => (1, shape[0] * shape[1], shape[2] * shape[3]),
    }
}

impl Backward for BiasRule {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, g: &Tensor) {
        let xv = ctx.value(self.x).clone();
        let bv = ctx.value(self.bias).clone();
        let (outer, blen, inner) = bias_spans(xv.shape(), self.layout);
        let bias_numel = bv.numel();
        if ctx.needs(self.x) {
            let dx = if self.multiplicative {
                Tensor::from_fn(xv.shape().to_vec(), |idx| {
                    let c = (idx / inner) % blen;
                    let b = match self.layout {
                        BiasLayout::ChannelMap => c, // blen == B*C here
                        _ => c,
                    };
                    g.data()[idx] * bv.data()[b % bias_numel]
                })
            } else {
                g.clone()
            };
            ctx.accumulate(self.x, dx);
        }
        if ctx.needs(self.bias) {
            let mut db = Tensor::zeros(bv.shape().to_vec());
            let dbd = db.data_mut();
            for o in 0..outer {
                for c in 0..blen {
                    let base = (o * blen + c) * inner;
                    let mut acc = 0.0;
                    if self.multiplicative {
                        for i in 0..inner {
                            acc += g.data()[base + i] * xv.data()[base + i];
                        }
                    } else {
                        for i in 0..inner {
                            acc += g.data()[base + i];
                        }
                    }
                    dbd[c % bias_numel] += acc;
                }
            }
            ctx.accumulate(self.bias, db);
        }
    }
}

impl Graph {
    /// 3x3 / stride 1 / pad 1 convolution. `x: [B,Cin,H,W]`, `w: [Cout,Cin,3,3]`.
    pub fn conv2d(&self, x: Node, w: Node) -> Result<Node> {
        let (value, dims) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || xs[1] != ws[1] {
                return Err(shape_err("conv2d", &[xs, ws]));
            }
            let dims = ConvDims { b: xs[0], cin: xs[1], cout: ws[0], h: xs[2], w: xs[3] };
            let out = conv2d_forward(xv.data(), wv.data(), dims);
            (Tensor::new(vec![dims.b, dims.cout, dims.h, dims.w], out)?, dims)
        };
        self.push("conv2d", value, &[x, w], Box::new(Conv2dRule { x, w, dims }))
    }

    /// 2x2 average pooling; spatial extents must be even.
    pub fn avg_pool2(&self, x: Node) -> Result<Node> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let xs = xv.shape();
            if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
                return Err(shape_err("avg_pool2", &[xs]));
            }
            let (n, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Tensor::zeros(vec![xs[0], xs[1], oh, ow]);
            let od = out.data_mut();
            for c in 0..n {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = c * h * w + 2 * y * w + 2 * xx;
                        od[(c * oh + y) * ow + xx] = 0.25
                            * (xv.data()[base]
                                + xv.data()[base + 1]
                                + xv.data()[base + w]
                                + xv.data()[base + w + 1]);
                    }
                }
            }
            out
        };
        self.push("avg_pool2", value, &[x], Box::new(AvgPool2Rule { x }))
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample_nearest2(&self, x: Node) -> Result<Node> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let xs = xv.shape();
            if xs.len() != 4 {
                return Err(shape_err("upsample_nearest2", &[xs]));
            }
            let (n, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (oh, ow) = (h * 2, w * 2);
            let mut out = Tensor::zeros(vec![xs[0], xs[1], oh, ow]);
            let od = out.data_mut();
            for c in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xv.data()[c * h * w + y * w + xx];
                        let base = (c * oh + 2 * y) * ow + 2 * xx;
                        od[base] = v;
                        od[base + 1] = v;
                        od[base + ow] = v;
                        od[base + ow + 1] = v;
                    }
                }
            }
            out
        };
        self.push("upsample_nearest2", value, &[x], Box::new(Upsample2Rule { x }))
    }

    /// Group normalization over `[B,C,H,W]` without affine parameters;
    /// compose with `mul_channel_bias`/`add_channel_bias` for scale and shift.
    pub fn group_norm(&self, x: Node, num_groups: usize, eps: Real) -> Result<Node> {
        let (value, groups, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let xs = xv.shape();
            if xs.len() != 4 || num_groups == 0 || xs[1] % num_groups != 0 {
                return Err(Error::shape(
                    "group_norm",
                    format!("{} with {} groups", fmt_shape(xs), num_groups),
                ));
            }
            let group_ch = xs[1] / num_groups;
            let span = group_ch * xs[2] * xs[3];
            let mut groups = Vec::with_capacity(xs[0] * num_groups);
            for b in 0..xs[0] {
                for g in 0..num_groups {
                    groups.push((b * xs[1] * xs[2] * xs[3] + g * span, span));
                }
            }
            let (out, inv_std) = normalize_groups(xv, groups.clone(), eps);
            (out, groups, inv_std)
        };
        let out = Node(self.len());
        self.push("group_norm", value, &[x], Box::new(NormRule { x, out, groups, inv_std }))
    }

    /// Layer normalization over the last axis of a 2-D tensor, no affine.
    pub fn layer_norm(&self, x: Node, eps: Real) -> Result<Node> {
        let (value, groups, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let xs = xv.shape();
            if xs.len() != 2 {
                return Err(shape_err("layer_norm", &[xs]));
            }
            let groups: Vec<(usize, usize)> = (0..xs[0]).map(|r| (r * xs[1], xs[1])).collect();
            let (out, inv_std) = normalize_groups(xv, groups.clone(), eps);
            (out, groups, inv_std)
        };
        let out = Node(self.len());
        self.push("layer_norm", value, &[x], Box::new(NormRule { x, out, groups, inv_std }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Node) -> Result<Node> {
        let (value, row) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.ndim() == 0 {
                return Err(shape_err("softmax", &[xv.shape()]));
            }
            let row = *xv.shape().last().unwrap();
            let mut out = xv.clone();
            let od = out.data_mut();
            for r in 0..xv.numel() / row {
                let sl = &mut od[r * row..(r + 1) * row];
                let max = sl.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let mut sum = 0.0;
                for v in sl.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in sl.iter_mut() {
                    *v /= sum;
                }
            }
            (out, row)
        };
        let out = Node(self.len());
        self.push("softmax", value, &[x], Box::new(SoftmaxRule { x, out, row }))
    }

    /// Inverted dropout: in train mode kept activations are scaled by
    /// `1/(1-p)` so eval mode is the identity (and is a no-op node-wise).
    pub fn dropout(&self, x: Node, p: Real, train: bool, rng: &mut impl Rng) -> Result<Node> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::param(format!("dropout probability {p} not in [0,1)")));
        }
        let keep = 1.0 - p;
        let numel = self.nodes.borrow()[x.0].value.numel();
        let mask: Vec<Real> = (0..numel)
            .map(|_| if rng.random::<f64>() < p as f64 { 0.0 } else { 1.0 / keep })
            .collect();
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::from_fn(nodes[x.0].value.shape().to_vec(), |i| nodes[x.0].value.data()[i] * mask[i])
        };
        self.push("dropout", value, &[x], Box::new(MaskRule { x, mask }))
    }

    /// Concatenate two tensors along `axis` (all other extents equal).
    pub fn concat(&self, a: Node, b: Node, axis: usize) -> Result<Node> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (ash, bsh) = (av.shape(), bv.shape());
            let compatible = ash.len() == bsh.len()
                && axis < ash.len()
                && ash.iter().zip(bsh).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &[ash, bsh]));
            }
            let mut shape = ash.to_vec();
            shape[axis] += bsh[axis];
            let outer: usize = ash[..axis].iter().product();
            let a_block: usize = ash[axis..].iter().product();
            let b_block: usize = bsh[axis..].iter().product();
            let mut out = Tensor::zeros(shape);
            for o in 0..outer {
                let base = o * (a_block + b_block);
                out.data_mut()[base..base + a_block]
                    .copy_from_slice(&av.data()[o * a_block..(o + 1) * a_block]);
                out.data_mut()[base + a_block..base + a_block + b_block]
                    .copy_from_slice(&bv.data()[o * b_block..(o + 1) * b_block]);
            }
            out
        };
        self.push("concat", value, &[a, b], Box::new(ConcatRule { a, b, axis }))
    }

    pub fn reshape(&self, x: Node, shape: impl Into<Vec<usize>>) -> Result<Node> {
        let value = self.nodes.borrow()[x.0].value.reshaped(shape)?;
        self.push("reshape", value, &[x], Box::new(ReshapeRule { x }))
    }

    fn bias_op(
        &self,
        op: &'static str,
        x: Node,
        bias: Node,
        layout: BiasLayout,
        multiplicative: bool,
    ) -> Result<Node> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let xs = xv.shape();
            let ok = match layout {
                BiasLayout::Row => xs.len() == 2 && bv.shape() == [xs[1]],
                BiasLayout::Channel => xs.len() == 4 && bv.shape() == [xs[1]],
                BiasLayout::ChannelMap => xs.len() == 4 && bv.shape() == [xs[0], xs[1]],
            };
            if !ok {
                return Err(shape_err(op, &[xs, bv.shape()]));
            }
            let (_, blen, inner) = bias_spans(xs, layout);
            let bias_numel = bv.numel();
            Tensor::from_fn(xs.to_vec(), |idx| {
                let c = ((idx / inner) % blen) % bias_numel;
                if multiplicative {
                    xv.data()[idx] * bv.data()[c]
                } else {
                    xv.data()[idx] + bv.data()[c]
                }
            })
        };
        self.push(op, value, &[x, bias], Box::new(BiasRule { x, bias, layout, multiplicative }))
    }

    /// `[B,F] + bias[F]`
    pub fn add_row_bias(&self, x: Node, bias: Node) -> Result<Node> {
        self.bias_op("add_row_bias", x, bias, BiasLayout::Row, false)
    }

    /// `[B,F] * scale[F]`
    pub fn mul_row_bias(&self, x: Node, bias: Node) -> Result<Node> {
        self.bias_op("mul_row_bias", x, bias, BiasLayout::Row, true)
    }

    /// `[B,C,H,W] + bias[C]`
    pub fn add_channel_bias(&self, x: Node, bias: Node) -> Result<Node> {
        self.bias_op("add_channel_bias", x, bias, BiasLayout::Channel, false)
    }

    /// `[B,C,H,W] * scale[C]`
    pub fn mul_channel_bias(&self, x: Node, bias: Node) -> Result<Node> {
        self.bias_op("mul_channel_bias", x, bias, BiasLayout::Channel, true)
    }

    /// `[B,C,H,W] + map[B,C]` broadcast over the spatial extent.
    pub fn add_channel_map(&self, x: Node, map: Node) -> Result<Node> {
        self.bias_op("add_channel_map", x, map, BiasLayout::ChannelMap, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let eye = g.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a = g.constant(Tensor::from_fn(vec![3, 3], |i| i as Real - 4.0));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn conv2d_constant_image_scales_by_kernel_sum() {
        // interior pixels of a constant image come out multiplied by sum(kernel)
        let g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 1, 5, 5], 2.0));
        let kernel: Vec<Real> = (0..9).map(|i| 0.1 * (i as Real + 1.0)).collect();
        let ksum: Real = kernel.iter().sum();
        let w = g.constant(Tensor::new(vec![1, 1, 3, 3], kernel).unwrap());
        let out = g.conv2d(x, w).unwrap();
        let v = g.value(out);
        // interior pixel (2,2)
        assert!((v.data()[2 * 5 + 2] - 2.0 * ksum).abs() < 1e-12);
        // direct-convolution oracle over every pixel
        let xv = g.value(x);
        let wv = g.value(w);
        for y in 0..5i64 {
            for xx in 0..5i64 {
                let mut acc = 0.0;
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (sy, sx) = (y + ky - 1, xx + kx - 1);
                        if sy >= 0 && sy < 5 && sx >= 0 && sx < 5 {
                            acc += wv.data()[(ky * 3 + kx) as usize] * xv.data()[(sy * 5 + sx) as usize];
                        }
                    }
                }
                assert!((v.data()[(y * 5 + xx) as usize] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4, 4], |i| i as Real));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape_of(p), vec![2, 3, 2, 2]);
        let u = g.upsample_nearest2(p).unwrap();
        assert_eq!(g.shape_of(u), vec![2, 3, 4, 4]);
    }

    #[test]
    fn group_norm_zero_mean_unit_var() {
        let mut rng = crate::rng_from_seed(11);
        let g = Graph::new();
        let x = g.constant(Tensor::randn(vec![2, 8, 4, 4], &mut rng));
        let y = g.group_norm(x, 4, 1e-5).unwrap();
        let v = g.value(y);
        // per (batch, group) statistics
        let span = 2 * 4 * 4;
        for b in 0..2 {
            for gi in 0..4 {
                let start = b * 8 * 16 + gi * span;
                let sl = &v.data()[start..start + span];
                let mean: Real = sl.iter().sum::<Real>() / span as Real;
                let var: Real = sl.iter().map(|&u| (u - mean) * (u - mean)).sum::<Real>() / span as Real;
                assert!(mean.abs() < 1e-5, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "group var {var}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![3, 5], |i| (i as Real) * 0.3 - 2.0));
        let y = g.softmax(x).unwrap();
        let v = g.value(y);
        for r in 0..3 {
            let s: Real = v.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_eval_is_identity() {
        let g = Graph::new();
        let mut rng = crate::rng_from_seed(3);
        let x = g.constant(Tensor::from_fn(vec![4], |i| i as Real));
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn concat_axis1() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_fn(vec![2, 2], |i| i as Real));
        let b = g.constant(Tensor::from_fn(vec![2, 3], |i| 10.0 + i as Real));
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.shape_of(c), vec![2, 5]);
        assert_eq!(g.value(c).data(), &[0., 1., 10., 11., 12., 2., 3., 13., 14., 15.]);
    }

    #[test]
    fn transpose_round_trip() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as Real));
        let t = g.transpose_12(x).unwrap();
        assert_eq!(g.shape_of(t), vec![2, 4, 3]);
        let back = g.transpose_12(t).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }
}
