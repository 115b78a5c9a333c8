//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass; each recorded op owns a closure
//! that maps the output cotangent to the input cotangents. `Var`s carry
//! their value, so an inference-mode tape stores nothing and behaves
//! like plain eager evaluation.
//!
//! Node ids grow monotonically, which makes the reverse sweep a single
//! backward scan — every op's inputs were recorded before its output.

use std::cell::RefCell;

use crate::tensor::{self, ConvSpec, Tensor};

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

/// A value on the tape. Cloning is cheap (tensors share storage).
#[derive(Clone)]
pub struct Var {
    pub id: usize,
    pub value: Tensor,
}

impl Var {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

pub struct Tape {
    recording: bool,
    backs: RefCell<Vec<Option<BackFn>>>,
}

/// Cotangents produced by [`Tape::backward`], indexed by node id.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.0.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Tape {
        Tape { recording: true, backs: RefCell::new(Vec::new()) }
    }

    /// A tape that evaluates forward only; `backward` is unavailable.
    pub fn inference() -> Tape {
        Tape { recording: false, backs: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        let mut backs = self.backs.borrow_mut();
        let id = backs.len();
        backs.push(if self.recording { back } else { None });
        Var { id, value }
    }

    /// Register an input (parameter, image, target) on the tape.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar root. Returns cotangents for leaves
    /// (and any interior node still holding one when visited).
    pub fn backward(&self, root: &Var) -> Grads {
        assert!(self.recording, "backward on an inference tape");
        assert_eq!(root.value.numel(), 1, "backward root must be scalar");
        let backs = self.backs.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; backs.len()];
        grads[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..=root.id).rev() {
            if backs[id].is_none() {
                continue; // leaf: keep its gradient for the caller
            }
            let Some(g) = grads[id].take() else { continue };
            let back = backs[id].as_ref().unwrap();
            for (pid, pg) in back(&g) {
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads(grads)
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let (ia, ib) = (a.id, b.id);
        self.push(
            a.value.add(&b.value),
            Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.clone())])),
        )
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let (ia, ib) = (a.id, b.id);
        self.push(
            a.value.sub(&b.value),
            Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.scale(-1.0))])),
        )
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let (ia, ib) = (a.id, b.id);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.push(
            av.mul(&bv),
            Some(Box::new(move |g| vec![(ia, g.mul(&bv)), (ib, g.mul(&av))])),
        )
    }

    pub fn scale(&self, a: &Var, s: f64) -> Var {
        let ia = a.id;
        self.push(a.value.scale(s), Some(Box::new(move |g| vec![(ia, g.scale(s))])))
    }

    pub fn add_scalar(&self, a: &Var, s: f64) -> Var {
        let ia = a.id;
        self.push(a.value.map(|v| v + s), Some(Box::new(move |g| vec![(ia, g.clone())])))
    }

    /// View under a new shape; gradient flows back under the old one.
    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Var {
        let ia = a.id;
        let old = a.value.shape().to_vec();
        self.push(
            a.value.reshape(shape),
            Some(Box::new(move |g| vec![(ia, g.reshape(&old))])),
        )
    }

    pub fn abs(&self, a: &Var) -> Var {
        let ia = a.id;
        let av = a.value.clone();
        self.push(
            a.value.map(f64::abs),
            Some(Box::new(move |g| vec![(ia, g.zip(&av, |gv, xv| gv * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 }))])),
        )
    }

    pub fn relu(&self, a: &Var) -> Var {
        let ia = a.id;
        let av = a.value.clone();
        self.push(
            a.value.map(|v| v.max(0.0)),
            Some(Box::new(move |g| vec![(ia, g.zip(&av, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))])),
        )
    }

    pub fn gelu(&self, a: &Var) -> Var {
        // tanh-form gelu; backward differentiates the same approximation
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let ia = a.id;
        let av = a.value.clone();
        let out = a.value.map(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        self.push(
            out,
            Some(Box::new(move |g| {
                let gx = g.zip(&av, |gv, x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    gv * (0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x))
                });
                vec![(ia, gx)]
            })),
        )
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let ia = a.id;
        let y = a.value.map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g| vec![(ia, g.zip(&yc, |gv, yv| gv * yv * (1.0 - yv)))])),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&self, a: &Var, lo: f64, hi: f64) -> Var {
        let ia = a.id;
        let av = a.value.clone();
        self.push(
            a.value.map(|v| v.clamp(lo, hi)),
            Some(Box::new(move |g| {
                vec![(ia, g.zip(&av, |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 }))]
            })),
        )
    }

    pub fn ln(&self, a: &Var) -> Var {
        let ia = a.id;
        let av = a.value.clone();
        self.push(
            a.value.map(f64::ln),
            Some(Box::new(move |g| vec![(ia, g.zip(&av, |gv, xv| gv / xv))])),
        )
    }

    pub fn mean_all(&self, a: &Var) -> Var {
        let ia = a.id;
        let shape = a.value.shape().to_vec();
        let n = a.value.numel() as f64;
        self.push(
            Tensor::scalar(a.value.mean()),
            Some(Box::new(move |g| {
                let gv = g.data()[0] / n;
                vec![(ia, Tensor::full(&shape, gv))]
            })),
        )
    }

    pub fn sum_all(&self, a: &Var) -> Var {
        let ia = a.id;
        let shape = a.value.shape().to_vec();
        self.push(
            Tensor::scalar(a.value.sum()),
            Some(Box::new(move |g| {
                vec![(ia, Tensor::full(&shape, g.data()[0]))]
            })),
        )
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        let (ia, ib) = (a.id, b.id);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.push(
            tensor::matmul(&av, &bv),
            Some(Box::new(move |g| {
                vec![(ia, tensor::matmul_nt(g, &bv)), (ib, tensor::matmul_tn(&av, g))]
            })),
        )
    }

    pub fn transpose2(&self, a: &Var) -> Var {
        let ia = a.id;
        self.push(
            tensor::transpose2(&a.value),
            Some(Box::new(move |g| vec![(ia, tensor::transpose2(g))])),
        )
    }

    /// Add a bias row vector `[c]` to every row of `[n,c]`.
    pub fn add_bias_rows(&self, x: &Var, b: &Var) -> Var {
        let (ix, ib) = (x.id, b.id);
        let (n, c) = (x.value.dim(0), x.value.dim(1));
        assert_eq!(b.value.numel(), c, "bias width mismatch");
        let bv = b.value.clone();
        let out = Tensor::from_fn(&[n, c], |i| x.value.data()[i] + bv.data()[i % c]);
        self.push(
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gb = vec![0.0; c];
                for r in 0..n {
                    for (j, gbj) in gb.iter_mut().enumerate() {
                        *gbj += gd[r * c + j];
                    }
                }
                vec![(ix, g.clone()), (ib, Tensor::new(&[c], gb))]
            })),
        )
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let spec = ConvSpec { stride, pad, groups };
        let out = tensor::conv2d(&x.value, &w.value, b.map(|bb| &bb.value), &spec);
        let (ix, iw) = (x.id, w.id);
        let ib = b.map(|bb| bb.id);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        self.push(
            out,
            Some(Box::new(move |g| {
                let spec = ConvSpec { stride, pad, groups };
                let (gx, gw, gb) = tensor::conv2d_grads(&xv, &wv, g, &spec);
                let mut grads = vec![(ix, gx), (iw, gw)];
                if let Some(ib) = ib {
                    grads.push((ib, gb));
                }
                grads
            })),
        )
    }

    // -- softmax / norms ----------------------------------------------------

    pub fn softmax_rows(&self, x: &Var) -> Var {
        let ix = x.id;
        let y = tensor::softmax_rows(&x.value);
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g| {
                let (n, m) = (yc.dim(0), yc.dim(1));
                let (gd, yd) = (g.data(), yc.data());
                let mut gx = vec![0.0; n * m];
                for r in 0..n {
                    let dot: f64 = (0..m).map(|j| gd[r * m + j] * yd[r * m + j]).sum();
                    for j in 0..m {
                        gx[r * m + j] = yd[r * m + j] * (gd[r * m + j] - dot);
                    }
                }
                vec![(ix, Tensor::new(&[n, m], gx))]
            })),
        )
    }

    /// Layer norm over the last dim of `[n,c]` tokens with affine `[c]`.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let (n, c) = (x.value.dim(0), x.value.dim(1));
        let (means, rstds) = tensor::row_stats(&x.value, eps);
        let xd = x.value.data();
        let (gd, bd) = (gamma.value.data(), beta.value.data());
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (xd[r * c + j] - means[r]) * rstds[r];
                xhat[r * c + j] = h;
                out[r * c + j] = gd[j] * h + bd[j];
            }
        }
        let xhat = Tensor::new(&[n, c], xhat);
        let (ix, ig, ib) = (x.id, gamma.id, beta.id);
        let gammav = gamma.value.clone();
        self.push(
            Tensor::new(&[n, c], out),
            Some(Box::new(move |g| {
                let gd = g.data();
                let hd = xhat.data();
                let gm = gammav.data();
                let mut gx = vec![0.0; n * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..n {
                    let mut sum_dy = 0.0;
                    let mut sum_dyh = 0.0;
                    for j in 0..c {
                        let dy = gd[r * c + j] * gm[j];
                        sum_dy += dy;
                        sum_dyh += dy * hd[r * c + j];
                        ggamma[j] += gd[r * c + j] * hd[r * c + j];
                        gbeta[j] += gd[r * c + j];
                    }
                    let m = c as f64;
                    for j in 0..c {
                        let dy = gd[r * c + j] * gm[j];
                        gx[r * c + j] = rstds[r] * (dy - sum_dy / m - hd[r * c + j] * sum_dyh / m);
                    }
                }
                vec![
                    (ix, Tensor::new(&[n, c], gx)),
                    (ig, Tensor::new(&[c], ggamma)),
                    (ib, Tensor::new(&[c], gbeta)),
                ]
            })),
        )
    }

    /// Group norm over `[c,h,w]` maps with per-channel affine.
    pub fn group_norm(&self, x: &Var, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Var {
        let (c, h, w) = (x.value.dim(0), x.value.dim(1), x.value.dim(2));
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let gsz = (c / groups) * h * w;
        let xd = x.value.data();
        let mut means = vec![0.0; groups];
        let mut rstds = vec![0.0; groups];
        let mut xhat = vec![0.0; c * h * w];
        for gi in 0..groups {
            let sl = &xd[gi * gsz..(gi + 1) * gsz];
            let mean = sl.iter().sum::<f64>() / gsz as f64;
            let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsz as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[gi] = mean;
            rstds[gi] = rstd;
            for (o, &v) in xhat[gi * gsz..(gi + 1) * gsz].iter_mut().zip(sl) {
                *o = (v - mean) * rstd;
            }
        }
        let plane = h * w;
        let (gd, bd) = (gamma.value.data(), beta.value.data());
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                out[ch * plane + p] = gd[ch] * xhat[ch * plane + p] + bd[ch];
            }
        }
        let xhat = Tensor::new(&[c, h, w], xhat);
        let (ix, ig, ib) = (x.id, gamma.id, beta.id);
        let gammav = gamma.value.clone();
        self.push(
            Tensor::new(&[c, h, w], out),
            Some(Box::new(move |g| {
                let gdat = g.data();
                let hd = xhat.data();
                let gm = gammav.data();
                let mut gx = vec![0.0; c * plane];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..plane {
                        let gv = gdat[ch * plane + p];
                        ggamma[ch] += gv * hd[ch * plane + p];
                        gbeta[ch] += gv;
                    }
                }
                let cg = c / groups;
                for gi in 0..groups {
                    let mut sum_dy = 0.0;
                    let mut sum_dyh = 0.0;
                    for ch in gi * cg..(gi + 1) * cg {
                        for p in 0..plane {
                            let dy = gdat[ch * plane + p] * gm[ch];
                            sum_dy += dy;
                            sum_dyh += dy * hd[ch * plane + p];
                        }
                    }
                    let m = gsz as f64;
                    for ch in gi * cg..(gi + 1) * cg {
                        for p in 0..plane {
                            let dy = gdat[ch * plane + p] * gm[ch];
                            gx[ch * plane + p] =
                                rstds[gi] * (dy - sum_dy / m - hd[ch * plane + p] * sum_dyh / m);
                        }
                    }
                }
                vec![
                    (ix, Tensor::new(&[c, h, w], gx)),
                    (ig, Tensor::new(&[c], ggamma)),
                    (ib, Tensor::new(&[c], gbeta)),
                ]
            })),
        )
    }

    // -- layout -------------------------------------------------------------

    pub fn map_to_tokens(&self, x: &Var) -> Var {
        let ix = x.id;
        let (h, w) = (x.value.dim(1), x.value.dim(2));
        self.push(
            tensor::map_to_tokens(&x.value),
            Some(Box::new(move |g| vec![(ix, tensor::tokens_to_map(g, h, w))])),
        )
    }

    pub fn tokens_to_map(&self, x: &Var, h: usize, w: usize) -> Var {
        let ix = x.id;
        self.push(
            tensor::tokens_to_map(&x.value, h, w),
            Some(Box::new(move |g| vec![(ix, tensor::map_to_tokens(g))])),
        )
    }

    pub fn concat_channels(&self, a: &Var, b: &Var) -> Var {
        let (ia, ib) = (a.id, b.id);
        let ca = a.value.dim(0);
        let (h, w) = (a.value.dim(1), a.value.dim(2));
        let cb = b.value.dim(0);
        self.push(
            tensor::concat_channels(&a.value, &b.value),
            Some(Box::new(move |g| {
                let gd = g.data();
                let ga = Tensor::new(&[ca, h, w], gd[..ca * h * w].to_vec());
                let gb = Tensor::new(&[cb, h, w], gd[ca * h * w..].to_vec());
                vec![(ia, ga), (ib, gb)]
            })),
        )
    }

    pub fn slice_cols(&self, x: &Var, from: usize, to: usize) -> Var {
        let ix = x.id;
        let (n, m) = (x.value.dim(0), x.value.dim(1));
        self.push(
            tensor::slice_cols(&x.value, from, to),
            Some(Box::new(move |g| {
                let width = to - from;
                let gd = g.data();
                let mut gx = vec![0.0; n * m];
                for r in 0..n {
                    gx[r * m + from..r * m + to].copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                vec![(ix, Tensor::new(&[n, m], gx))]
            })),
        )
    }

    /// Concatenate `[n, d_i]` matrices along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = parts[0].value.dim(0);
        let widths: Vec<usize> = parts.iter().map(|p| p.value.dim(1)).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for p in parts {
            let w = p.value.dim(1);
            let pd = p.value.data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(
            Tensor::new(&[n, total], out),
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut grads = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    let mut part = vec![0.0; n * w];
                    for r in 0..n {
                        part[r * w..(r + 1) * w].copy_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    grads.push((id, Tensor::new(&[n, w], part)));
                    off += w;
                }
                grads
            })),
        )
    }

    // -- broadcast products / reductions -------------------------------------

    /// Multiply a `[c,h,w]` map by a per-channel gate `[c]`.
    pub fn mul_channels(&self, x: &Var, gate: &Var) -> Var {
        let (ix, ig) = (x.id, gate.id);
        let (c, h, w) = (x.value.dim(0), x.value.dim(1), x.value.dim(2));
        assert_eq!(gate.value.numel(), c, "gate width mismatch");
        let plane = h * w;
        let (xv, gv) = (x.value.clone(), gate.value.clone());
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let gch = gv.data()[ch];
            for p in 0..plane {
                out[ch * plane + p] = xv.data()[ch * plane + p] * gch;
            }
        }
        self.push(
            Tensor::new(&[c, h, w], out),
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; c * plane];
                let mut ggate = vec![0.0; c];
                for ch in 0..c {
                    let gch = gv.data()[ch];
                    for p in 0..plane {
                        gx[ch * plane + p] = gd[ch * plane + p] * gch;
                        ggate[ch] += gd[ch * plane + p] * xv.data()[ch * plane + p];
                    }
                }
                vec![(ix, Tensor::new(&[c, h, w], gx)), (ig, Tensor::new(&[c], ggate))]
            })),
        )
    }

    /// Multiply a `[c,h,w]` map by a single-channel spatial gate `[1,h,w]`.
    pub fn mul_spatial(&self, x: &Var, gate: &Var) -> Var {
        let (ix, ig) = (x.id, gate.id);
        let (c, h, w) = (x.value.dim(0), x.value.dim(1), x.value.dim(2));
        assert_eq!(gate.value.shape(), &[1, h, w], "spatial gate shape mismatch");
        let plane = h * w;
        let (xv, gv) = (x.value.clone(), gate.value.clone());
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                out[ch * plane + p] = xv.data()[ch * plane + p] * gv.data()[p];
            }
        }
        self.push(
            Tensor::new(&[c, h, w], out),
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; c * plane];
                let mut ggate = vec![0.0; plane];
                for ch in 0..c {
                    for p in 0..plane {
                        gx[ch * plane + p] = gd[ch * plane + p] * gv.data()[p];
                        ggate[p] += gd[ch * plane + p] * xv.data()[ch * plane + p];
                    }
                }
                vec![(ix, Tensor::new(&[c, h, w], gx)), (ig, Tensor::new(&[1, h, w], ggate))]
            })),
        )
    }

    pub fn global_avg_pool(&self, x: &Var) -> Var {
        let ix = x.id;
        let (c, h, w) = (x.value.dim(0), x.value.dim(1), x.value.dim(2));
        let plane = (h * w) as f64;
        self.push(
            tensor::global_avg_pool(&x.value),
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gv = gd[ch] / plane;
                    for v in &mut gx[ch * h * w..(ch + 1) * h * w] {
                        *v = gv;
                    }
                }
                vec![(ix, Tensor::new(&[c, h, w], gx))]
            })),
        )
    }

    pub fn global_max_pool(&self, x: &Var) -> Var {
        let ix = x.id;
        let shape = x.value.shape().to_vec();
        let (out, arg) = tensor::global_max_pool(&x.value);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; shape.iter().product()];
                for (ch, &idx) in arg.iter().enumerate() {
                    gx[idx] += g.data()[ch];
                }
                vec![(ix, Tensor::new(&shape, gx))]
            })),
        )
    }

    pub fn channel_mean(&self, x: &Var) -> Var {
        let ix = x.id;
        let (c, h, w) = (x.value.dim(0), x.value.dim(1), x.value.dim(2));
        self.push(
            tensor::channel_mean(&x.value),
            Some(Box::new(move |g| {
                let gd = g.data();
                let inv = 1.0 / c as f64;
                let plane = h * w;
                let mut gx = vec![0.0; c * plane];
                for ch in 0..c {
                    for p in 0..plane {
                        gx[ch * plane + p] = gd[p] * inv;
                    }
                }
                vec![(ix, Tensor::new(&[c, h, w], gx))]
            })),
        )
    }

    pub fn channel_max(&self, x: &Var) -> Var {
        let ix = x.id;
        let (c, h, w) = (x.value.dim(0), x.value.dim(1), x.value.dim(2));
        let (out, arg) = tensor::channel_max(&x.value);
        self.push(
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let plane = h * w;
                let mut gx = vec![0.0; c * plane];
                for (p, &ch) in arg.iter().enumerate() {
                    gx[ch * plane + p] += gd[p];
                }
                vec![(ix, Tensor::new(&[c, h, w], gx))]
            })),
        )
    }

    pub fn avg_pool2d(&self, x: &Var, k: usize) -> Var {
        let ix = x.id;
        let (h, w) = (x.value.dim(1), x.value.dim(2));
        self.push(
            tensor::avg_pool2d(&x.value, k),
            Some(Box::new(move |g| vec![(ix, tensor::avg_pool2d_back(g, k, h, w))])),
        )
    }

    pub fn upsample_bilinear(&self, x: &Var, factor: usize) -> Var {
        let ix = x.id;
        let (h, w) = (x.value.dim(1), x.value.dim(2));
        self.push(
            tensor::upsample_bilinear(&x.value, factor),
            Some(Box::new(move |g| {
                vec![(ix, tensor::upsample_bilinear_back(g, factor, h, w))]
            })),
        )
    }
}

pub mod check {
    //! Finite-difference oracles for gradient checks. These only use
    //! forward evaluations, so they are independent of the backward
    //! closures they verify.

    use super::*;

    /// Central finite-difference gradient of `f` at `x`, step `h`.
    pub fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = vec![0.0; x.numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = fd_grad_at(f, x, i, h);
        }
        Tensor::new(x.shape(), g)
    }

    /// Central difference of a single coordinate.
    pub fn fd_grad_at(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::new(x.shape(), plus));
        let fm = f(&Tensor::new(x.shape(), minus));
        (fp - fm) / (2.0 * h)
    }

    /// Max relative error between analytic and FD gradients.
    pub fn max_rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
        analytic
            .data()
            .iter()
            .zip(fd.data().iter())
            .map(|(&a, &f)| rel_err(a, f))
            .fold(0.0, f64::max)
    }

    /// Relative error of one gradient coordinate pair.
    pub fn rel_err(analytic: f64, fd: f64) -> f64 {
        (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-6)
    }

    /// Check d(scalar out)/d(input) for a tape computation, all coords.
    pub fn check_input_grad(
        build: &dyn Fn(&Tape, &Var) -> Var,
        x0: &Tensor,
        tol: f64,
    ) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = build(&tape, &x);
        assert_eq!(out.value.numel(), 1, "check target must be scalar");
        let grads = tape.backward(&out);
        let analytic = grads.get(&x).expect("input grad missing").clone();
        let f = |t: &Tensor| -> f64 {
            let tape = Tape::inference();
            let x = tape.leaf(t.clone());
            build(&tape, &x).value.data()[0]
        };
        let fd = fd_grad(&f, x0, 1e-3);
        let err = max_rel_err(&analytic, &fd);
        assert!(err <= tol, "gradient mismatch: rel err {err} > {tol}");
    }
}

#[cfg(test)]
mod tests {
    use super::check::*;
    use super::*;
    use crate::rng::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.range_f64(-1.0, 1.0))
    }

    #[test]
    fn grad_elementwise_chain() {
        let x0 = rand_t(&[3, 4], 21);
        check_input_grad(
            &|t, x| {
                let a = t.sigmoid(x);
                let b = t.gelu(&a);
                let c = t.mul(&b, &a);
                t.mean_all(&c)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn grad_abs_away_from_kink() {
        let x0 = rand_t(&[10], 22).map(|v| v + 0.5 * v.signum() + if v == 0.0 { 0.5 } else { 0.0 });
        check_input_grad(&|t, x| t.mean_all(&t.abs(x)), &x0, 1e-6);
    }

    #[test]
    fn grad_matmul() {
        let x0 = rand_t(&[4, 5], 23);
        let w = rand_t(&[5, 3], 24);
        check_input_grad(
            &|t, x| {
                let wv = t.leaf(w.clone());
                let y = t.matmul(x, &wv);
                t.mean_all(&t.mul(&y, &y))
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d_all_inputs() {
        let x0 = rand_t(&[4, 6, 5], 25);
        let w0 = rand_t(&[6, 2, 3, 3], 26);
        let b0 = rand_t(&[6], 27);
        // input gradient
        check_input_grad(
            &|t, x| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                let y = t.conv2d(x, &w, Some(&b), 2, 1, 2);
                t.mean_all(&t.mul(&y, &y))
            },
            &x0,
            1e-5,
        );
        // weight gradient via the same scalar function seen as f(w)
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.conv2d(&x, &w, Some(&b), 2, 1, 2);
        let out = tape.mean_all(&tape.mul(&y, &y));
        let grads = tape.backward(&out);
        let f = |wt: &Tensor| {
            let t = Tape::inference();
            let x = t.leaf(x0.clone());
            let w = t.leaf(wt.clone());
            let b = t.leaf(b0.clone());
            let y = t.conv2d(&x, &w, Some(&b), 2, 1, 2);
            t.mean_all(&t.mul(&y, &y)).value.data()[0]
        };
        let fd = fd_grad(&f, &w0, 1e-3);
        assert!(max_rel_err(grads.get(&w).unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn grad_softmax_norms() {
        let x0 = rand_t(&[5, 7], 28);
        check_input_grad(
            &|t, x| {
                let y = t.softmax_rows(x);
                let c = t.leaf(rand_t(&[5, 7], 29));
                t.mean_all(&t.mul(&y, &c))
            },
            &x0,
            1e-5,
        );
        let x1 = rand_t(&[6, 4], 30);
        check_input_grad(
            &|t, x| {
                let g = t.leaf(rand_t(&[4], 31));
                let b = t.leaf(rand_t(&[4], 32));
                let y = t.layer_norm(x, &g, &b, 1e-6);
                t.mean_all(&t.mul(&y, &y))
            },
            &x1,
            1e-5,
        );
        let x2 = rand_t(&[4, 3, 5], 33);
        check_input_grad(
            &|t, x| {
                let g = t.leaf(rand_t(&[4], 34));
                let b = t.leaf(rand_t(&[4], 35));
                let y = t.group_norm(x, &g, &b, 2, 1e-6);
                t.mean_all(&t.mul(&y, &y))
            },
            &x2,
            1e-5,
        );
    }

    #[test]
    fn grad_layout_and_broadcast() {
        let x0 = rand_t(&[3, 4, 2], 36);
        check_input_grad(
            &|t, x| {
                let tok = t.map_to_tokens(x);
                let back = t.tokens_to_map(&tok, 4, 2);
                let gate = t.leaf(rand_t(&[3], 37));
                let gated = t.mul_channels(&back, &gate);
                let sgate = t.leaf(rand_t(&[1, 4, 2], 38));
                let gated = t.mul_spatial(&gated, &sgate);
                t.mean_all(&t.mul(&gated, &gated))
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_pooling_resize() {
        let x0 = rand_t(&[2, 4, 4], 39);
        check_input_grad(
            &|t, x| {
                let p = t.avg_pool2d(x, 2);
                let u = t.upsample_bilinear(&p, 2);
                let ga = t.global_avg_pool(&u);
                let gm = t.global_max_pool(x);
                let joined = t.add(&ga, &gm);
                t.mean_all(&t.mul(&joined, &joined))
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_channel_reductions() {
        let x0 = rand_t(&[3, 3, 3], 40);
        check_input_grad(
            &|t, x| {
                let m = t.channel_mean(x);
                let mx = t.channel_max(x);
                let cat = t.concat_channels(&m, &mx);
                t.mean_all(&t.mul(&cat, &cat))
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_slices() {
        let x0 = rand_t(&[4, 6], 41);
        check_input_grad(
            &|t, x| {
                let a = t.slice_cols(x, 0, 3);
                let b = t.slice_cols(x, 3, 6);
                let joined = t.concat_cols(&[a.clone(), b.clone(), a]);
                t.mean_all(&t.mul(&joined, &joined))
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn accumulates_reused_vars() {
        // y = x + x should have gradient 2 everywhere
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let y = tape.add(&x, &x);
        let s = tape.sum_all(&y);
        let grads = tape.backward(&s);
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
