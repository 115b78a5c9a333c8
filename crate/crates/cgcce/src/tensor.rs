//! Dense row-major f64 tensors and the forward/backward kernels the
//! network is built from.
//!
//! Data is shared through `Arc`, so cloning a tensor is cheap; kernels
//! always allocate fresh output buffers. Everything here is plain
//! deterministic single-threaded math — the autodiff layer wires these
//! kernels together with their adjoints.

use std::sync::Arc;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; n]) }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Same data viewed under a new shape (must preserve element count).
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.numel(), "reshape changes element count");
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(&self.shape, self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch {:?} vs {:?}", self.shape, other.shape);
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(&self.shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data().iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Add `other` into this tensor in place (copy-on-write if shared).
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = Arc::make_mut(&mut self.data);
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    /// Mutable access to the underlying buffer (copy-on-write if shared).
    pub fn data_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
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

/// `a [m,k] · b [k,n] -> [m,n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs must be rank 2");
    assert_eq!(b.rank(), 2, "matmul rhs must be rank 2");
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    dgemm_rm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out);
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` where `a` is stored as `[k,m]`: result `[m,n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    assert_eq!(k, k2, "matmul_tn inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    dgemm_rm(m, k, n, a.data(), (1, m as isize), b.data(), (n as isize, 1), &mut out);
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` where `b` is stored as `[n,k]`: result `[m,n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dim(0), a.dim(1));
    let (n, k2) = (b.dim(0), b.dim(1));
    assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    dgemm_rm(m, k, n, a.data(), (k as isize, 1), b.data(), (1, k as isize), &mut out);
    Tensor::new(&[m, n], out)
}

pub fn transpose2(a: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2);
    let (m, n) = (a.dim(0), a.dim(1));
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

// ---------------------------------------------------------------------------
// conv2d (im2col + gemm), with grouped support
// ---------------------------------------------------------------------------

pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "conv kernel {k} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - k) / stride + 1
}

/// Lay out `[cg·k·k, ho·wo]` patches of channels `[c0, c0+cg)` of `x`.
fn im2col(x: &Tensor, c0: usize, cg: usize, k: usize, stride: usize, pad: usize) -> Tensor {
    let (h, w) = (x.dim(1), x.dim(2));
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let src = x.data();
    let mut col = vec![0.0; cg * k * k * ho * wo];
    let plane = h * w;
    for c in 0..cg {
        let base = (c0 + c) * plane;
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = base + iy as usize * w;
                    let dst_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst_row + ox] = src[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cg * k * k, ho * wo], col)
}

/// Adjoint of `im2col`: scatter-add column gradients back into an image.
fn col2im_add(
    gx: &mut [f64],
    col: &Tensor,
    c0: usize,
    cg: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let src = col.data();
    let plane = h * w;
    for c in 0..cg {
        let base = (c0 + c) * plane;
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = base + iy as usize * w;
                    let src_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[dst_row + ix as usize] += src[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution: `x [c,h,w]`, `w [o, c/groups, k, k]`, optional bias `[o]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    assert_eq!(x.rank(), 3, "conv input must be [c,h,w]");
    assert_eq!(weight.rank(), 4, "conv weight must be [o,cg,k,k]");
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (o, cg, k, k2) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    assert_eq!(k, k2, "conv kernels must be square");
    let g = spec.groups;
    assert_eq!(c, cg * g, "conv channels {c} != groups {g} * {cg}");
    assert_eq!(o % g, 0, "out channels {o} not divisible by groups {g}");
    let og = o / g;
    let ho = conv_out_size(h, k, spec.stride, spec.pad);
    let wo = conv_out_size(w, k, spec.stride, spec.pad);
    let mut out = vec![0.0; o * ho * wo];
    for gi in 0..g {
        let col = im2col(x, gi * cg, cg, k, spec.stride, spec.pad);
        let wg = Tensor::new(
            &[og, cg * k * k],
            weight.data()[gi * og * cg * k * k..(gi + 1) * og * cg * k * k].to_vec(),
        );
        let og_out = matmul(&wg, &col);
        out[gi * og * ho * wo..(gi + 1) * og * ho * wo].copy_from_slice(og_out.data());
    }
    if let Some(b) = bias {
        assert_eq!(b.numel(), o, "bias length {} != out channels {o}", b.numel());
        let bd = b.data();
        for (ch, bv) in bd.iter().enumerate() {
            for v in &mut out[ch * ho * wo..(ch + 1) * ho * wo] {
                *v += bv;
            }
        }
    }
    Tensor::new(&[o, ho, wo], out)
}

/// Gradients of `conv2d` w.r.t. input, weight, and bias.
pub fn conv2d_grads(
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    spec: &ConvSpec,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (o, cg, k, _) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    let g = spec.groups;
    let og = o / g;
    let (ho, wo) = (gout.dim(1), gout.dim(2));
    let mut gx = vec![0.0; c * h * w];
    let mut gw = vec![0.0; weight.numel()];
    let mut gb = vec![0.0; o];
    for (ch, gbv) in gb.iter_mut().enumerate() {
        *gbv = gout.data()[ch * ho * wo..(ch + 1) * ho * wo].iter().sum();
    }
    for gi in 0..g {
        let col = im2col(x, gi * cg, cg, k, spec.stride, spec.pad);
        let go_g = Tensor::new(
            &[og, ho * wo],
            gout.data()[gi * og * ho * wo..(gi + 1) * og * ho * wo].to_vec(),
        );
        // dW_g = gO_g · colᵀ
        let gwg = matmul_nt(&go_g, &col);
        gw[gi * og * cg * k * k..(gi + 1) * og * cg * k * k].copy_from_slice(gwg.data());
        // dcol = W_gᵀ · gO_g, scattered back
        let wg = Tensor::new(
            &[og, cg * k * k],
            weight.data()[gi * og * cg * k * k..(gi + 1) * og * cg * k * k].to_vec(),
        );
        let gcol = matmul_tn(&wg, &go_g);
        col2im_add(&mut gx, &gcol, gi * cg, cg, h, w, k, spec.stride, spec.pad);
    }
    (
        Tensor::new(&[c, h, w], gx),
        Tensor::new(weight.shape(), gw),
        Tensor::new(&[o], gb),
    )
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Non-overlapping k×k average pooling; spatial dims must divide by `k`.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    assert!(h % k == 0 && w % k == 0, "avg_pool2d size {h}x{w} not divisible by {k}");
    let (ho, wo) = (h / k, w / k);
    let src = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = ch * h * w + (oy * k + dy) * w + ox * k;
                    for dx in 0..k {
                        acc += src[row + dx];
                    }
                }
                out[ch * ho * wo + oy * wo + ox] = acc * inv;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub fn avg_pool2d_back(gout: &Tensor, k: usize, h: usize, w: usize) -> Tensor {
    let (c, ho, wo) = (gout.dim(0), gout.dim(1), gout.dim(2));
    let src = gout.data();
    let inv = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = src[ch * ho * wo + oy * wo + ox] * inv;
                for dy in 0..k {
                    let row = ch * h * w + (oy * k + dy) * w + ox * k;
                    for dx in 0..k {
                        gx[row + dx] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}

/// Mean over the spatial plane: `[c,h,w] -> [c]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let plane = h * w;
    let src = x.data();
    let out = (0..c)
        .map(|ch| src[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(&[c], out)
}

/// Max over the spatial plane: `[c,h,w] -> ([c], argmax)`. First max wins.
pub fn global_max_pool(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let plane = h * w;
    let src = x.data();
    let mut out = Vec::with_capacity(c);
    let mut arg = Vec::with_capacity(c);
    for ch in 0..c {
        let sl = &src[ch * plane..(ch + 1) * plane];
        let (mut bi, mut bv) = (0usize, sl[0]);
        for (i, &v) in sl.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        out.push(bv);
        arg.push(ch * plane + bi);
    }
    (Tensor::new(&[c], out), arg)
}

/// Per-pixel mean across channels: `[c,h,w] -> [1,h,w]`.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    let inv = 1.0 / c as f64;
    for o in &mut out {
        *o *= inv;
    }
    Tensor::new(&[1, h, w], out)
}

/// Per-pixel max across channels: `[c,h,w] -> ([1,h,w], argmax channel)`.
pub fn channel_max(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let plane = h * w;
    let src = x.data();
    let mut out = vec![f64::NEG_INFINITY; plane];
    let mut arg = vec![0usize; plane];
    for ch in 0..c {
        for i in 0..plane {
            let v = src[ch * plane + i];
            if v > out[i] {
                out[i] = v;
                arg[i] = ch;
            }
        }
    }
    (Tensor::new(&[1, h, w], out), arg)
}

// ---------------------------------------------------------------------------
// bilinear resize (integer upscale, half-pixel centers)
// ---------------------------------------------------------------------------

struct LerpAxis {
    i0: Vec<usize>,
    i1: Vec<usize>,
    w1: Vec<f64>,
}

fn lerp_axis(n_in: usize, n_out: usize) -> LerpAxis {
    let scale = n_in as f64 / n_out as f64;
    let mut i0 = Vec::with_capacity(n_out);
    let mut i1 = Vec::with_capacity(n_out);
    let mut w1 = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let f = src.floor();
        let a = (f as usize).min(n_in - 1);
        let b = (a + 1).min(n_in - 1);
        i0.push(a);
        i1.push(b);
        w1.push((src - f).clamp(0.0, 1.0));
    }
    LerpAxis { i0, i1, w1 }
}

/// Bilinear upsampling by an integer factor with half-pixel alignment.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (ho, wo) = (h * factor, w * factor);
    let ay = lerp_axis(h, ho);
    let ax = lerp_axis(w, wo);
    let src = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let base = ch * h * w;
        let obase = ch * ho * wo;
        for oy in 0..ho {
            let (y0, y1, wy) = (ay.i0[oy], ay.i1[oy], ay.w1[oy]);
            for ox in 0..wo {
                let (x0, x1, wx) = (ax.i0[ox], ax.i1[ox], ax.w1[ox]);
                let v00 = src[base + y0 * w + x0];
                let v01 = src[base + y0 * w + x1];
                let v10 = src[base + y1 * w + x0];
                let v11 = src[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out[obase + oy * wo + ox] = top + (bot - top) * wy;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Adjoint of `upsample_bilinear`.
pub fn upsample_bilinear_back(gout: &Tensor, factor: usize, h: usize, w: usize) -> Tensor {
    let (c, ho, wo) = (gout.dim(0), gout.dim(1), gout.dim(2));
    debug_assert_eq!(ho, h * factor);
    let ay = lerp_axis(h, ho);
    let ax = lerp_axis(w, wo);
    let src = gout.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        let obase = ch * ho * wo;
        for oy in 0..ho {
            let (y0, y1, wy) = (ay.i0[oy], ay.i1[oy], ay.w1[oy]);
            for ox in 0..wo {
                let (x0, x1, wx) = (ax.i0[ox], ax.i1[ox], ax.w1[ox]);
                let g = src[obase + oy * wo + ox];
                gx[base + y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                gx[base + y0 * w + x1] += g * (1.0 - wy) * wx;
                gx[base + y1 * w + x0] += g * wy * (1.0 - wx);
                gx[base + y1 * w + x1] += g * wy * wx;
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}

// ---------------------------------------------------------------------------
// softmax / norms
// ---------------------------------------------------------------------------

/// Row-wise softmax of a `[n,m]` matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, m) = (x.dim(0), x.dim(1));
    let src = x.data();
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &src[r * m..(r + 1) * m];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * m..(r + 1) * m].iter_mut().zip(row.iter()) {
            *o = (v - mx).exp();
            z += *o;
        }
        let inv = 1.0 / z;
        for o in &mut out[r * m..(r + 1) * m] {
            *o *= inv;
        }
    }
    Tensor::new(&[n, m], out)
}

/// Per-row statistics used by layer norm: (mean, 1/std).
pub fn row_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (x.dim(0), x.dim(1));
    let src = x.data();
    let mut means = Vec::with_capacity(n);
    let mut rstds = Vec::with_capacity(n);
    for r in 0..n {
        let row = &src[r * m..(r + 1) * m];
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        means.push(mean);
        rstds.push(1.0 / (var + eps).sqrt());
    }
    (means, rstds)
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

/// `[c,h,w] -> [h·w, c]` token matrix.
pub fn map_to_tokens(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; plane * c];
    for ch in 0..c {
        for p in 0..plane {
            out[p * c + ch] = src[ch * plane + p];
        }
    }
    Tensor::new(&[plane, c], out)
}

/// `[h·w, c] -> [c,h,w]` feature map.
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (plane, c) = (x.dim(0), x.dim(1));
    assert_eq!(plane, h * w, "token count {plane} != {h}x{w}");
    let src = x.data();
    let mut out = vec![0.0; plane * c];
    for ch in 0..c {
        for p in 0..plane {
            out[ch * plane + p] = src[p * c + ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Channel concatenation of two `[c,h,w]` maps.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape()[1..], b.shape()[1..], "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[a.dim(0) + b.dim(0), a.dim(1), a.dim(2)], data)
}

/// Column slice of a `[n,m]` matrix: columns `[from, to)`.
pub fn slice_cols(x: &Tensor, from: usize, to: usize) -> Tensor {
    let (n, m) = (x.dim(0), x.dim(1));
    assert!(from < to && to <= m, "bad column slice {from}..{to} of {m}");
    let src = x.data();
    let width = to - from;
    let mut out = vec![0.0; n * width];
    for r in 0..n {
        out[r * width..(r + 1) * width].copy_from_slice(&src[r * m + from..r * m + to]);
    }
    Tensor::new(&[n, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.range_f64(-1.0, 1.0))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.dim(0), a.dim(1));
        let n = b.dim(1);
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
        })
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = Rng::new(10);
        let a = rand_tensor(&[7, 5], &mut rng);
        let b = rand_tensor(&[5, 9], &mut rng);
        let got = matmul(&a, &b);
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let got_tn = matmul_tn(&transpose2(&a), &b);
        assert!(got_tn.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let got_nt = matmul_nt(&a, &transpose2(&b));
        assert!(got_nt.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
        let (c, h, wi) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, cg, k, _) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let g = spec.groups;
        let og = o / g;
        let ho = conv_out_size(h, k, spec.stride, spec.pad);
        let wo = conv_out_size(wi, k, spec.stride, spec.pad);
        let _ = c;
        Tensor::from_fn(&[o, ho, wo], |idx| {
            let oc = idx / (ho * wo);
            let oy = (idx / wo) % ho;
            let ox = idx % wo;
            let gi = oc / og;
            let mut acc = b.map_or(0.0, |bb| bb.data()[oc]);
            for ci in 0..cg {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wi {
                            let xv = x.data()[(gi * cg + ci) * h * wi + iy as usize * wi + ix as usize];
                            let wv = w.data()[((oc * cg + ci) * k + ki) * k + kj];
                            acc += xv * wv;
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = Rng::new(11);
        for &(c, o, k, s, p, g) in &[
            (3usize, 8usize, 3usize, 1usize, 1usize, 1usize),
            (4, 6, 3, 2, 1, 2),
            (3, 5, 7, 4, 3, 1),
            (6, 6, 5, 1, 2, 6), // depthwise
            (4, 4, 1, 1, 0, 1),
        ] {
            let x = rand_tensor(&[c, 12, 10], &mut rng);
            let w = rand_tensor(&[o, c / g, k, k], &mut rng);
            let b = rand_tensor(&[o], &mut rng);
            let spec = ConvSpec { stride: s, pad: p, groups: g };
            let got = conv2d(&x, &w, Some(&b), &spec);
            let want = naive_conv(&x, &w, Some(&b), &spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "conv mismatch c={c} o={o} k={k} s={s} p={p} g={g}");
        }
    }

    /// Adjoint identity: ⟨conv(x), y⟩ == ⟨x, conv_back(y)⟩ (and same for w).
    #[test]
    fn conv2d_grads_are_adjoint() {
        let mut rng = Rng::new(12);
        let spec = ConvSpec { stride: 2, pad: 1, groups: 2 };
        let x = rand_tensor(&[4, 9, 7], &mut rng);
        let w = rand_tensor(&[6, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &w, None, &spec);
        let cot = rand_tensor(y.shape(), &mut rng);
        let (gx, gw, _gb) = conv2d_grads(&x, &w, &cot, &spec);
        let lhs: f64 = y.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum();
        // directional checks: ⟨gx, x⟩ + ⟨gw, w⟩ == ⟨cot, conv(x,w)⟩ for a bilinear map
        let rhs: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() / 2.0
            + gw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / 2.0;
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn pooling_and_resize_shapes() {
        let mut rng = Rng::new(13);
        let x = rand_tensor(&[3, 8, 8], &mut rng);
        assert_eq!(avg_pool2d(&x, 4).shape(), &[3, 2, 2]);
        assert_eq!(upsample_bilinear(&x, 2).shape(), &[3, 16, 16]);
        let g = global_avg_pool(&x);
        assert_eq!(g.shape(), &[3]);
        assert!((g.data()[0] - x.data()[0..64].iter().sum::<f64>() / 64.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_constant_preserved() {
        let x = Tensor::full(&[2, 3, 3], 2.5);
        let up = upsample_bilinear(&x, 4);
        for &v in up.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    /// ⟨up(x), y⟩ == ⟨x, upᵀ(y)⟩ for the linear resize map.
    #[test]
    fn bilinear_adjoint_identity() {
        let mut rng = Rng::new(14);
        let x = rand_tensor(&[2, 5, 4], &mut rng);
        let up = upsample_bilinear(&x, 2);
        let y = rand_tensor(up.shape(), &mut rng);
        let back = upsample_bilinear_back(&y, 2, 5, 4);
        let lhs: f64 = up.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut rng = Rng::new(15);
        let x = rand_tensor(&[6, 11], &mut rng).scale(4.0);
        let y = softmax_rows(&x);
        for r in 0..6 {
            let s: f64 = y.data()[r * 11..(r + 1) * 11].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tokens_roundtrip() {
        let mut rng = Rng::new(16);
        let x = rand_tensor(&[5, 4, 3], &mut rng);
        let back = tokens_to_map(&map_to_tokens(&x), 4, 3);
        assert_eq!(x, back);
    }

    #[test]
    fn channel_reductions() {
        let x = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 5.0, -1.0]);
        let m = channel_mean(&x);
        assert_eq!(m.data(), &[3.0, 1.0]);
        let (mx, arg) = channel_max(&x);
        assert_eq!(mx.data(), &[5.0, 3.0]);
        assert_eq!(arg, vec![1, 0]);
    }
}
