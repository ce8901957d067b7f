//! Reverse-mode autodiff over a per-forward-pass operation tape.
//!
//! Nodes are appended in creation order, which is already a topological
//! order, so [`Graph::backward`] is a single reverse sweep that visits each
//! node exactly once. Matrix products go through `matrixmultiply::dgemm`;
//! everything else is plain loops.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

static NAN_GUARD: AtomicBool = AtomicBool::new(cfg!(debug_assertions));

/// Toggles the per-op finiteness check. On by default in debug builds.
pub fn set_nan_guard(enabled: bool) {
    NAN_GUARD.store(enabled, Ordering::Relaxed);
}

pub fn nan_guard_enabled() -> bool {
    NAN_GUARD.load(Ordering::Relaxed)
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    AddRowBias { x: usize, b: usize },
    AddChanBias { x: usize, b: usize },
    AddConst { x: usize },
    Affine { x: usize, mul: f64 },
    Mul { a: usize, b: usize },
    MulConst { x: usize, c: Vec<f64> },
    Ln { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Gelu { x: usize },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, k: usize, stride: usize, pad: usize },
    Embedding { table: usize, ids: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    Reshape { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    /// Saved forward-pass intermediates (tanh values, per-row mean/rstd).
    aux: Vec<f64>,
}

/// Dynamic computation graph, rebuilt per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

fn mm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Copies a node's value out as a standalone [`Tensor`].
    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape consistent")
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by [`Graph::backward`], if any reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        self.push(t.shape().to_vec(), t.into_data(), requires_grad, Op::Leaf, Vec::new())
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        aux: Vec<f64>,
    ) -> TensorId {
        if nan_guard_enabled() {
            assert!(
                data.iter().all(|v| v.is_finite()),
                "non-finite value produced by {:?}",
                op_name(&op)
            );
        }
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
            aux,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── elementwise and broadcast ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rq = self.req(&[a.0, b.0]);
        Ok(self.push(shape, data, rq, Op::Add { a: a.0, b: b.0 }, Vec::new()))
    }

    /// `x[n,d] + bias[d]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::dim(format!("add_row_bias: {xs:?} vs {bs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let mut data = self.data(x).to_vec();
        let bias = self.data(b);
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += bias[c];
            }
        }
        let rq = self.req(&[x.0, b.0]);
        Ok(self.push(xs, data, rq, Op::AddRowBias { x: x.0, b: b.0 }, Vec::new()))
    }

    /// `x[c,h,w] + bias[c]`, broadcast over the spatial extent.
    pub fn add_chan_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || bs != [xs[0]] {
            return Err(Error::dim(format!("add_chan_bias: {xs:?} vs {bs:?}")));
        }
        let hw = xs[1] * xs[2];
        let mut data = self.data(x).to_vec();
        let bias = self.data(b);
        for c in 0..xs[0] {
            for i in 0..hw {
                data[c * hw + i] += bias[c];
            }
        }
        let rq = self.req(&[x.0, b.0]);
        Ok(self.push(xs, data, rq, Op::AddChanBias { x: x.0, b: b.0 }, Vec::new()))
    }

    /// Adds a constant (non-differentiated) tensor, e.g. a positional encoding.
    pub fn add_const(&mut self, x: TensorId, c: &Tensor) -> Result<TensorId> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim(format!(
                "add_const: {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.shape(x).to_vec();
        let rq = self.req(&[x.0]);
        Ok(self.push(shape, data, rq, Op::AddConst { x: x.0 }, Vec::new()))
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let rq = self.req(&[x.0]);
        self.push(shape, data, rq, Op::Affine { x: x.0, mul }, Vec::new())
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rq = self.req(&[a.0, b.0]);
        Ok(self.push(shape, data, rq, Op::Mul { a: a.0, b: b.0 }, Vec::new()))
    }

    /// Elementwise product with a constant tensor (kept for the backward pass).
    pub fn mul_const(&mut self, x: TensorId, c: &Tensor) -> Result<TensorId> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim(format!(
                "mul_const: {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        let rq = self.req(&[x.0]);
        Ok(self.push(
            shape,
            data,
            rq,
            Op::MulConst {
                x: x.0,
                c: c.data().to_vec(),
            },
            Vec::new(),
        ))
    }

    /// Natural log; caller guarantees positive inputs (clamp first).
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rq = self.req(&[x.0]);
        self.push(shape, data, rq, Op::Ln { x: x.0 }, Vec::new())
    }

    /// Clamps to `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let rq = self.req(&[x.0]);
        self.push(shape, data, rq, Op::Clamp { x: x.0, lo, hi }, Vec::new())
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let xs = self.data(x);
        let mut data = Vec::with_capacity(xs.len());
        let mut aux = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = (GELU_C1 * (v + GELU_C2 * v * v * v)).tanh();
            aux.push(t);
            data.push(0.5 * v * (1.0 + t));
        }
        let shape = self.shape(x).to_vec();
        let rq = self.req(&[x.0]);
        self.push(shape, data, rq, Op::Gelu { x: x.0 }, aux)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        mm(m, k, n, self.data(a), false, self.data(b), false, &mut data);
        let rq = self.req(&[a.0, b.0]);
        Ok(self.push(vec![m, n], data, rq, Op::Matmul { a: a.0, b: b.0 }, Vec::new()))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose: rank-{} tensor", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.data(x);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = xd[r * n + c];
            }
        }
        let rq = self.req(&[x.0]);
        Ok(self.push(vec![n, m], data, rq, Op::Transpose { x: x.0 }, Vec::new()))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("nonempty shape");
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        for row in 0..xd.len() / d {
            let xs = &xd[row * d..(row + 1) * d];
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[row * d..(row + 1) * d];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(xs) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let rq = self.req(&[x.0]);
        self.push(shape, data, rq, Op::Softmax { x: x.0 }, Vec::new())
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("nonempty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                shape,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.data(x).len() / d;
        let mut data = vec![0.0; rows * d];
        let mut aux = Vec::with_capacity(2 * rows);
        {
            let xd = self.data(x);
            let g = self.data(gamma);
            let b = self.data(beta);
            for row in 0..rows {
                let xs = &xd[row * d..(row + 1) * d];
                let mean = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                aux.push(mean);
                aux.push(rstd);
                let out = &mut data[row * d..(row + 1) * d];
                for i in 0..d {
                    out[i] = (xs[i] - mean) * rstd * g[i] + b[i];
                }
            }
        }
        let rq = self.req(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            shape,
            data,
            rq,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            aux,
        ))
    }

    // ── convolutions ────────────────────────────────────────────────────

    /// Cross-correlation of `x[c,h,w]` with `kernels[o,c,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernels: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::dim(format!("conv2d: input {xs:?} vs kernels {ks:?}")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be positive".to_string()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        let fits = |extent: usize, kext: usize| -> Result<usize> {
            let padded = extent + 2 * pad;
            if padded < kext || (padded - kext) % stride != 0 {
                return Err(Error::dim(format!(
                    "conv2d: input {xs:?} incompatible with kernels {ks:?}, stride {stride}, pad {pad}"
                )));
            }
            Ok((padded - kext) / stride + 1)
        };
        let oh = fits(h, kh)?;
        let ow = fits(w, kw)?;
        let mut data = vec![0.0; o * oh * ow];
        if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            // 1x1 convolution is a plain matrix product K[o,c] * X[c,h*w].
            mm(o, c, h * w, self.data(kernels), false, self.data(x), false, &mut data);
            let rq = self.req(&[x.0, kernels.0]);
            return Ok(self.push(
                vec![o, oh, ow],
                data,
                rq,
                Op::Conv2d {
                    x: x.0,
                    k: kernels.0,
                    stride,
                    pad,
                },
                Vec::new(),
            ));
        }
        {
            let xd = self.data(x);
            let kd = self.data(kernels);
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[(ic * h + iy as usize) * w + ix as usize]
                                        * kd[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        data[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rq = self.req(&[x.0, kernels.0]);
        Ok(self.push(
            vec![o, oh, ow],
            data,
            rq,
            Op::Conv2d {
                x: x.0,
                k: kernels.0,
                stride,
                pad,
            },
            Vec::new(),
        ))
    }

    /// Transposed convolution of `x[c,h,w]` with `kernels[c,o,kh,kw]`,
    /// output `[o, (h-1)*stride+kh-2*pad, (w-1)*stride+kw-2*pad]`.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        kernels: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] {
            return Err(Error::dim(format!(
                "conv_transpose2d: input {xs:?} vs kernels {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv_transpose2d: stride must be positive"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ks[1], ks[2], ks[3]);
        if (h - 1) * stride + kh < 2 * pad + 1 {
            return Err(Error::dim(format!(
                "conv_transpose2d: padding {pad} too large for input {xs:?} kernels {ks:?}"
            )));
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w - 1) * stride + kw - 2 * pad;
        let mut data = vec![0.0; o * oh * ow];
        {
            let xd = self.data(x);
            let kd = self.data(kernels);
            for ic in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = xd[(ic * h + iy) * w + ix];
                        for oc in 0..o {
                            for ky in 0..kh {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ox = (ix * stride + kx) as isize - pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    data[(oc * oh + oy as usize) * ow + ox as usize] +=
                                        xv * kd[((ic * o + oc) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rq = self.req(&[x.0, kernels.0]);
        Ok(self.push(
            vec![o, oh, ow],
            data,
            rq,
            Op::ConvTranspose2d {
                x: x.0,
                k: kernels.0,
                stride,
                pad,
            },
            Vec::new(),
        ))
    }

    // ── lookup and reshaping ────────────────────────────────────────────

    /// Gathers rows of `table[v,d]` at `ids`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim(format!("embedding: table {ts:?}")));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding: empty id list"));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::lookup(format!(
                "embedding: id {bad} out of range for table with {v} rows"
            )));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rq = self.req(&[table.0]);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            rq,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            Vec::new(),
        ))
    }

    /// Concatenates 2-D tensors along rows.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no parts"));
        }
        let d = self.shape(parts[0]).get(1).copied().ok_or_else(|| {
            Error::dim(format!("concat_rows: rank-{} part", self.shape(parts[0]).len()))
        })?;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim(format!("concat_rows: part {s:?}, want [_, {d}]")));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rq = self.req(&ids);
        Ok(self.push(vec![rows, d], data, rq, Op::ConcatRows { parts: ids }, Vec::new()))
    }

    /// Selects `len` rows of a 2-D tensor starting at `start`.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::dim(format!(
                "slice_rows: rows {start}..{} of {s:?}",
                start + len
            )));
        }
        let d = s[1];
        let data = self.data(x)[start * d..(start + len) * d].to_vec();
        let rq = self.req(&[x.0]);
        Ok(self.push(
            vec![len, d],
            data,
            rq,
            Op::SliceRows { x: x.0, start },
            Vec::new(),
        ))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no parts"));
        }
        let n = self.shape(parts[0]).first().copied().unwrap_or(0);
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(Error::dim(format!("concat_cols: part {s:?}, want [{n}, _]")));
            }
            width += s[1];
        }
        let mut data = vec![0.0; n * width];
        let mut at = 0;
        for &p in parts {
            let pw = self.shape(p)[1];
            let pd = self.data(p);
            for r in 0..n {
                data[r * width + at..r * width + at + pw]
                    .copy_from_slice(&pd[r * pw..(r + 1) * pw]);
            }
            at += pw;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rq = self.req(&ids);
        Ok(self.push(vec![n, width], data, rq, Op::ConcatCols { parts: ids }, Vec::new()))
    }

    /// Selects `len` columns of a 2-D tensor starting at `start`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dim(format!(
                "slice_cols: cols {start}..{} of {s:?}",
                start + len
            )));
        }
        let (n, d) = (s[0], s[1]);
        let xd = self.data(x);
        let mut data = vec![0.0; n * len];
        for r in 0..n {
            data[r * len..(r + 1) * len].copy_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let rq = self.req(&[x.0]);
        Ok(self.push(
            vec![n, len],
            data,
            rq,
            Op::SliceCols { x: x.0, start },
            Vec::new(),
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::dim(format!(
                "reshape: {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        let rq = self.req(&[x.0]);
        Ok(self.push(shape, data, rq, Op::Reshape { x: x.0 }, Vec::new()))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let rq = self.req(&[x.0]);
        self.push(vec![1], vec![s], rq, Op::SumAll { x: x.0 }, Vec::new())
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len();
        let s: f64 = self.data(x).iter().sum();
        let rq = self.req(&[x.0]);
        self.push(
            vec![1],
            vec![s / n as f64],
            rq,
            Op::MeanAll { x: x.0 },
            Vec::new(),
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `dLoss/dNode` into every `requires_grad` node reachable
    /// from `loss`. Each call propagates its own pass-local gradients and
    /// adds them to what is already stored, so repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            local[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accum(&self, local: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), self.nodes[id].data.len());
        match &mut local[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        // Ops are matched by value-copied indices so `self` stays free for
        // reads and the final accum calls.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(local, a, g.to_vec());
                self.accum(local, b, g.to_vec());
            }
            Op::AddConst { x } | Op::Reshape { x } => {
                let x = *x;
                self.accum(local, x, g.to_vec());
            }
            Op::AddRowBias { x, b } => {
                let (x, b) = (*x, *b);
                let d = *self.nodes[i].shape.last().unwrap();
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    for (dbj, gj) in db.iter_mut().zip(row) {
                        *dbj += gj;
                    }
                }
                self.accum(local, x, g.to_vec());
                self.accum(local, b, db);
            }
            Op::AddChanBias { x, b } => {
                let (x, b) = (*x, *b);
                let s = &self.nodes[i].shape;
                let (c, hw) = (s[0], s[1] * s[2]);
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    db[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                }
                self.accum(local, x, g.to_vec());
                self.accum(local, b, db);
            }
            Op::Affine { x, mul } => {
                let (x, mul) = (*x, *mul);
                self.accum(local, x, g.iter().map(|v| mul * v).collect());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b].data)
                    .map(|(gi, bi)| gi * bi)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(gi, ai)| gi * ai)
                    .collect();
                self.accum(local, a, da);
                self.accum(local, b, db);
            }
            Op::MulConst { x, c } => {
                let x = *x;
                let dx: Vec<f64> = g.iter().zip(c).map(|(gi, ci)| gi * ci).collect();
                self.accum(local, x, dx);
            }
            Op::Ln { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].data)
                    .map(|(gi, xi)| gi / xi)
                    .collect();
                self.accum(local, x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].data)
                    .map(|(gi, &xi)| if xi > lo && xi < hi { *gi } else { 0.0 })
                    .collect();
                self.accum(local, x, dx);
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].data)
                    .zip(&self.nodes[i].aux)
                    .map(|((gi, &xi), &t)| {
                        let du = GELU_C1 * (1.0 + 3.0 * GELU_C2 * xi * xi);
                        gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accum(local, x, dx);
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a].shape[0];
                let k = self.nodes[a].shape[1];
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    mm(m, n, k, g, false, &self.nodes[b].data, true, &mut da);
                    self.accum(local, a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    mm(k, m, n, &self.nodes[a].data, true, g, false, &mut db);
                    self.accum(local, b, db);
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        dx[c * n + r] = g[r * m + c];
                    }
                }
                self.accum(local, x, dx);
            }
            Op::Softmax { x } => {
                let x = *x;
                let d = *self.nodes[i].shape.last().unwrap();
                let y = &self.nodes[i].data;
                let mut dx = vec![0.0; y.len()];
                for row in 0..y.len() / d {
                    let ys = &y[row * d..(row + 1) * d];
                    let gs = &g[row * d..(row + 1) * d];
                    let s: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    let out = &mut dx[row * d..(row + 1) * d];
                    for j in 0..d {
                        out[j] = ys[j] * (gs[j] - s);
                    }
                }
                self.accum(local, x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].data.len() / d;
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                {
                    let xd = &self.nodes[x].data;
                    let gd = &self.nodes[gamma].data;
                    let aux = &self.nodes[i].aux;
                    for row in 0..rows {
                        let (mean, rstd) = (aux[2 * row], aux[2 * row + 1]);
                        let xs = &xd[row * d..(row + 1) * d];
                        let gs = &g[row * d..(row + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * rstd;
                            let dxhat = gs[j] * gd[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                            dgamma[j] += gs[j] * xhat;
                            dbeta[j] += gs[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let out = &mut dx[row * d..(row + 1) * d];
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * rstd;
                            out[j] = rstd * (gs[j] * gd[j] - m1 - xhat * m2);
                        }
                    }
                }
                self.accum(local, x, dx);
                self.accum(local, gamma, dgamma);
                self.accum(local, beta, dbeta);
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = self.nodes[x].shape.clone();
                let ks = self.nodes[k].shape.clone();
                let os = self.nodes[i].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (o, kh, kw) = (ks[0], ks[2], ks[3]);
                let (oh, ow) = (os[1], os[2]);
                let mut dx = vec![0.0; c * h * w];
                let mut dk = vec![0.0; o * c * kh * kw];
                {
                    let xd = &self.nodes[x].data;
                    let kd = &self.nodes[k].data;
                    for oc in 0..o {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(oc * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ic in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = (ic * h + iy as usize) * w + ix as usize;
                                            let ki = ((oc * c + ic) * kh + ky) * kw + kx;
                                            dx[xi] += gv * kd[ki];
                                            dk[ki] += gv * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(local, x, dx);
                self.accum(local, k, dk);
            }
            Op::ConvTranspose2d { x, k, stride, pad } => {
                let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                let xs = self.nodes[x].shape.clone();
                let ks = self.nodes[k].shape.clone();
                let os = self.nodes[i].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (o, kh, kw) = (ks[1], ks[2], ks[3]);
                let (oh, ow) = (os[1], os[2]);
                let mut dx = vec![0.0; c * h * w];
                let mut dk = vec![0.0; c * o * kh * kw];
                {
                    let xd = &self.nodes[x].data;
                    let kd = &self.nodes[k].data;
                    for ic in 0..c {
                        for iy in 0..h {
                            for ix in 0..w {
                                let xi = (ic * h + iy) * w + ix;
                                let xv = xd[xi];
                                let mut acc = 0.0;
                                for oc in 0..o {
                                    for ky in 0..kh {
                                        let oy = (iy * stride + ky) as isize - pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox =
                                                (ix * stride + kx) as isize - pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            let gi =
                                                (oc * oh + oy as usize) * ow + ox as usize;
                                            let ki = ((ic * o + oc) * kh + ky) * kw + kx;
                                            acc += g[gi] * kd[ki];
                                            dk[ki] += xv * g[gi];
                                        }
                                    }
                                }
                                dx[xi] = acc;
                            }
                        }
                    }
                }
                self.accum(local, x, dx);
                self.accum(local, k, dk);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[i].shape[1];
                let v = self.nodes[table].shape[0];
                let mut dt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                self.accum(local, table, dt);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let d = self.nodes[i].shape[1];
                let mut at = 0;
                for p in parts {
                    let rows = self.nodes[p].shape[0];
                    let chunk = g[at * d..(at + rows) * d].to_vec();
                    self.accum(local, p, chunk);
                    at += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let d = self.nodes[i].shape[1];
                let len = self.nodes[i].shape[0];
                let total = self.nodes[x].data.len();
                let mut dx = vec![0.0; total];
                dx[start * d..(start + len) * d].copy_from_slice(g);
                self.accum(local, x, dx);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let n = self.nodes[i].shape[0];
                let width = self.nodes[i].shape[1];
                let mut at = 0;
                for p in parts {
                    let pw = self.nodes[p].shape[1];
                    let mut dp = vec![0.0; n * pw];
                    for r in 0..n {
                        dp[r * pw..(r + 1) * pw]
                            .copy_from_slice(&g[r * width + at..r * width + at + pw]);
                    }
                    self.accum(local, p, dp);
                    at += pw;
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let n = self.nodes[i].shape[0];
                let len = self.nodes[i].shape[1];
                let d = self.nodes[x].shape[1];
                let mut dx = vec![0.0; self.nodes[x].data.len()];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum(local, x, dx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let n = self.nodes[x].data.len();
                self.accum(local, x, vec![g[0]; n]);
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = self.nodes[x].data.len();
                self.accum(local, x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::AddChanBias { .. } => "add_chan_bias",
        Op::AddConst { .. } => "add_const",
        Op::Affine { .. } => "affine",
        Op::Mul { .. } => "mul",
        Op::MulConst { .. } => "mul_const",
        Op::Ln { .. } => "ln",
        Op::Clamp { .. } => "clamp",
        Op::Gelu { .. } => "gelu",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::Embedding { .. } => "embedding",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape { .. } => "reshape",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
    }
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}
