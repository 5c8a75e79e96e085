//! Differentiable operations recorded on a [`Tape`].
//!
//! Each method builds the output value eagerly and registers a closure that
//! scatters the output gradient back to the operands. Closures capture
//! `Arc` clones of whatever forward values they need.

use super::tape::{GradBuf, Tape, Var};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix4, IxDyn};
use std::sync::Arc;

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

fn view4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 array")
}

/// Lowers `x` [B, Cin, H, W] into patch rows [B*Hout*Wout, Cin*kh*kw].
fn im2col(
    x: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (b, cin, h, w) = x.dim();
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (w + 2 * pad - kw) / stride + 1;
    let mut col = Array2::<f64>::zeros((b * hout * wout, cin * kh * kw));
    for bi in 0..b {
        for oh in 0..hout {
            for ow in 0..wout {
                let r = (bi * hout + oh) * wout + ow;
                let mut row = col.row_mut(r);
                for ci in 0..cin {
                    for i in 0..kh {
                        let iy = (oh * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ow * stride + j) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[(ci * kh + i) * kw + j] = x[(bi, ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    (col, hout, wout)
}

/// Adjoint of [`im2col`]: scatters patch-row gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (w + 2 * pad - kw) / stride + 1;
    let mut dx = Array4::<f64>::zeros((b, cin, h, w));
    for bi in 0..b {
        for oh in 0..hout {
            for ow in 0..wout {
                let r = (bi * hout + oh) * wout + ow;
                let row = dcol.row(r);
                for ci in 0..cin {
                    for i in 0..kh {
                        let iy = (oh * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ow * stride + j) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(bi, ci, iy as usize, ix as usize)] += row[(ci * kh + i) * kw + j];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    fn binary(
        &self,
        a: Var,
        b: Var,
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>, &mut GradBuf, usize, usize) + 'static,
    ) -> Var {
        self.check(a);
        self.check(b);
        let req = self.requires_grad(a) || self.requires_grad(b);
        let (ai, bi) = (a.idx as usize, b.idx as usize);
        let f: Option<super::tape::BackwardFn> = if req {
            Some(Box::new(move |g, buf| backward(g, buf, ai, bi)))
        } else {
            None
        };
        self.push(value, req, f)
    }

    fn unary(
        &self,
        a: Var,
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>, &mut GradBuf, usize) + 'static,
    ) -> Var {
        self.check(a);
        let req = self.requires_grad(a);
        let ai = a.idx as usize;
        let f: Option<super::tape::BackwardFn> = if req {
            Some(Box::new(move |g, buf| backward(g, buf, ai)))
        } else {
            None
        };
        self.push(value, req, f)
    }

    /// Elementwise sum of same-shape arrays.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.binary(a, b, out, move |g, buf, ai, bi| {
            buf.accumulate(ai, g.clone());
            buf.accumulate(bi, g.clone());
        })
    }

    /// Elementwise difference.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.binary(a, b, out, move |g, buf, ai, bi| {
            buf.accumulate(ai, g.clone());
            buf.accumulate(bi, g.mapv(|v| -v));
        })
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        let (ca, cb) = (Arc::clone(&va), Arc::clone(&vb));
        self.binary(a, b, out, move |g, buf, ai, bi| {
            buf.accumulate(ai, g * &*cb);
            buf.accumulate(bi, g * &*ca);
        })
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| v * c);
        self.unary(a, out, move |g, buf, ai| {
            buf.accumulate(ai, g.mapv(|v| v * c));
        })
    }

    /// Elementwise exponential.
    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f64::exp);
        let cache = Arc::new(out.clone());
        self.unary(a, out, move |g, buf, ai| {
            buf.accumulate(ai, g * &*cache);
        })
    }

    /// Rectified linear unit.
    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| v.max(0.0));
        let cache = Arc::clone(&va);
        self.unary(a, out, move |g, buf, ai| {
            let mut dg = g.clone();
            dg.zip_mut_with(&cache, |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            buf.accumulate(ai, dg);
        })
    }

    /// Sum of all elements, as a `[1]` node.
    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = ArrayD::from_elem(vec![1], va.sum());
        self.unary(a, out, move |g, buf, ai| {
            let s = g[[0]];
            buf.accumulate(ai, ArrayD::from_elem(shape.clone(), s));
        })
    }

    /// Mean of all elements, as a `[1]` node.
    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `a · b` for `[N,K] × [K,M]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = view2(&va).dot(&view2(&vb));
        let (ca, cb) = (Arc::clone(&va), Arc::clone(&vb));
        self.binary(a, b, out.into_dyn(), move |g, buf, ai, bi| {
            let g2 = view2(g);
            buf.accumulate(ai, g2.dot(&view2(&cb).t()).into_dyn());
            buf.accumulate(bi, view2(&ca).t().dot(&g2).into_dyn());
        })
    }

    /// `a · bᵀ` for `[N,K] × [M,K]`, yielding `[N,M]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = view2(&va).dot(&view2(&vb).t());
        let (ca, cb) = (Arc::clone(&va), Arc::clone(&vb));
        self.binary(a, b, out.into_dyn(), move |g, buf, ai, bi| {
            let g2 = view2(g);
            buf.accumulate(ai, g2.dot(&view2(&cb)).into_dyn());
            buf.accumulate(bi, g2.t().dot(&view2(&ca)).into_dyn());
        })
    }

    /// Adds a `[M]` bias to every row of `[N,M]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let x2 = view2(&vx);
        assert_eq!(x2.ncols(), vb.len(), "add_bias: width mismatch");
        let out = &x2 + &vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        self.binary(x, bias, out.into_dyn(), move |g, buf, xi, bi| {
            buf.accumulate(xi, g.clone());
            buf.accumulate(bi, view2(g).sum_axis(Axis(0)).into_dyn());
        })
    }

    /// 2-D convolution with zero padding.
    ///
    /// `x`: [B, Cin, H, W], `w`: [Cout, Cin, kh, kw], `bias`: [Cout].
    pub fn conv2d(&self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(bias));
        let x4 = view4(&vx);
        let w4 = view4(&vw);
        let (b, cin, h, wdt) = x4.dim();
        let (cout, cin_w, kh, kw) = w4.dim();
        assert_eq!(cin, cin_w, "conv2d: channel mismatch");
        let (col, hout, wout) = im2col(&x4, kh, kw, stride, pad);
        let w_mat = w4
            .to_shape((cout, cin * kh * kw))
            .expect("weight reshape")
            .to_owned();
        // [R, Cout] with R = B*Hout*Wout
        let mut out_mat = col.dot(&w_mat.t());
        let bias1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        out_mat += &bias1;
        let out = out_mat
            .into_shape_with_order((b, hout, wout, cout))
            .expect("conv output reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();

        let (cx, cw) = (Arc::clone(&vx), Arc::clone(&vw));
        self.check(bias);
        let req = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(bias);
        let (xi, wi, bi) = (x.idx as usize, w.idx as usize, bias.idx as usize);
        let f: Option<super::tape::BackwardFn> = if req {
            Some(Box::new(move |g, buf| {
                let g4 = view4(g);
                let g_mat = g4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((b * hout * wout, cout))
                    .expect("grad reshape");
                let x4 = view4(&cx);
                let (col, _, _) = im2col(&x4, kh, kw, stride, pad);
                let w_mat = view4(&cw)
                    .to_shape((cout, cin * kh * kw))
                    .expect("weight reshape")
                    .to_owned();
                // dW = gᵀ · col
                let dw = g_mat.t().dot(&col);
                buf.accumulate(
                    wi,
                    dw.into_shape_with_order((cout, cin, kh, kw))
                        .expect("dw reshape")
                        .into_dyn(),
                );
                buf.accumulate(bi, g_mat.sum_axis(Axis(0)).into_dyn());
                let dcol = g_mat.dot(&w_mat);
                let dx = col2im(&dcol, b, cin, h, wdt, kh, kw, stride, pad);
                buf.accumulate(xi, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), req, f)
    }

    /// 2×2 average pooling with stride 2. H and W must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = view4(&vx);
        let (b, c, h, w) = x4.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial dims");
        let mut out = Array4::<f64>::zeros((b, c, h / 2, w / 2));
        for bi in 0..b {
            for ci in 0..c {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        out[(bi, ci, oh, ow)] = (x4[(bi, ci, 2 * oh, 2 * ow)]
                            + x4[(bi, ci, 2 * oh, 2 * ow + 1)]
                            + x4[(bi, ci, 2 * oh + 1, 2 * ow)]
                            + x4[(bi, ci, 2 * oh + 1, 2 * ow + 1)])
                            / 4.0;
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |g, buf, xi| {
            let g4 = view4(g);
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for oh in 0..h / 2 {
                        for ow in 0..w / 2 {
                            let v = g4[(bi, ci, oh, ow)] / 4.0;
                            dx[(bi, ci, 2 * oh, 2 * ow)] = v;
                            dx[(bi, ci, 2 * oh, 2 * ow + 1)] = v;
                            dx[(bi, ci, 2 * oh + 1, 2 * ow)] = v;
                            dx[(bi, ci, 2 * oh + 1, 2 * ow + 1)] = v;
                        }
                    }
                }
            }
            buf.accumulate(xi, dx.into_dyn());
        })
    }

    /// Spatial mean, [B,C,H,W] → [B,C].
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = view4(&vx);
        let (b, c, h, w) = x4.dim();
        let out = x4.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64;
        self.unary(x, out.into_dyn(), move |g, buf, xi| {
            let g2 = view2(g);
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            let inv = 1.0 / (h * w) as f64;
            for bi in 0..b {
                for ci in 0..c {
                    let v = g2[(bi, ci)] * inv;
                    dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(v);
                }
            }
            buf.accumulate(xi, dx.into_dyn());
        })
    }

    /// Batch normalization over (B,H,W) per channel using batch statistics.
    ///
    /// Returns the normalized output plus the batch mean and unbiased batch
    /// variance for running-statistics updates (plain arrays, not tracked).
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let x4 = view4(&vx);
        let (b, c, h, w) = x4.dim();
        let n = (b * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let ch = x4.index_axis(Axis(1), ci);
            let m = ch.sum() / n;
            mean[ci] = m;
            var[ci] = ch.mapv(|v| (v - m) * (v - m)).sum() / n;
        }
        let g1 = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut xhat = Array4::<f64>::zeros((b, c, h, w));
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let inv_sigma = 1.0 / (var[ci] + eps).sqrt();
            let (m, ga, be) = (mean[ci], g1[ci], b1[ci]);
            for bi in 0..b {
                for y in 0..h {
                    for z in 0..w {
                        let xh = (x4[(bi, ci, y, z)] - m) * inv_sigma;
                        xhat[(bi, ci, y, z)] = xh;
                        out[(bi, ci, y, z)] = ga * xh + be;
                    }
                }
            }
        }
        let var_unbiased = if n > 1.0 {
            var.mapv(|v| v * n / (n - 1.0))
        } else {
            var.clone()
        };

        let xhat = Arc::new(xhat);
        let cg = Arc::clone(&vg);
        let var_c = var.clone();
        let req =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let (xi, gi, bi_idx) = (x.idx as usize, gamma.idx as usize, beta.idx as usize);
        let f: Option<super::tape::BackwardFn> = if req {
            Some(Box::new(move |g, buf| {
                let g4 = view4(g);
                let gamma1 = cg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for ci in 0..c {
                    let gch = g4.index_axis(Axis(1), ci);
                    let xch = xhat.index_axis(Axis(1), ci);
                    let sum_g = gch.sum();
                    let sum_gx = (&gch * &xch).sum();
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let inv_sigma = 1.0 / (var_c[ci] + eps).sqrt();
                    let coef = gamma1[ci] * inv_sigma;
                    let mg = sum_g / n;
                    let mgx = sum_gx / n;
                    for bi in 0..b {
                        for y in 0..h {
                            for z in 0..w {
                                dx[(bi, ci, y, z)] = coef
                                    * (g4[(bi, ci, y, z)] - mg - xhat[(bi, ci, y, z)] * mgx);
                            }
                        }
                    }
                }
                buf.accumulate(xi, dx.into_dyn());
                buf.accumulate(gi, dgamma.into_dyn());
                buf.accumulate(bi_idx, dbeta.into_dyn());
            }))
        } else {
            None
        };
        let out_var = self.push(out.into_dyn(), req, f);
        (out_var, mean, var_unbiased)
    }

    /// Batch normalization using fixed (running) statistics. Differentiable
    /// with respect to `x`, `gamma` and `beta`; the statistics are constants.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let x4 = view4(&vx);
        let (b, c, h, w) = x4.dim();
        let g1 = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut xhat = Array4::<f64>::zeros((b, c, h, w));
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for ci in 0..c {
            let inv_sigma = 1.0 / (running_var[ci] + eps).sqrt();
            let m = running_mean[ci];
            for bi in 0..b {
                for y in 0..h {
                    for z in 0..w {
                        let xh = (x4[(bi, ci, y, z)] - m) * inv_sigma;
                        xhat[(bi, ci, y, z)] = xh;
                        out[(bi, ci, y, z)] = g1[ci] * xh + b1[ci];
                    }
                }
            }
        }
        let xhat = Arc::new(xhat);
        let cg = Arc::clone(&vg);
        let inv_sigmas: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let req =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let (xi, gi, bi_idx) = (x.idx as usize, gamma.idx as usize, beta.idx as usize);
        let f: Option<super::tape::BackwardFn> = if req {
            Some(Box::new(move |g, buf| {
                let g4 = view4(g);
                let gamma1 = cg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for ci in 0..c {
                    let gch = g4.index_axis(Axis(1), ci);
                    let xch = xhat.index_axis(Axis(1), ci);
                    dbeta[ci] = gch.sum();
                    dgamma[ci] = (&gch * &xch).sum();
                    let coef = gamma1[ci] * inv_sigmas[ci];
                    for bi in 0..b {
                        for y in 0..h {
                            for z in 0..w {
                                dx[(bi, ci, y, z)] = coef * g4[(bi, ci, y, z)];
                            }
                        }
                    }
                }
                buf.accumulate(xi, dx.into_dyn());
                buf.accumulate(gi, dgamma.into_dyn());
                buf.accumulate(bi_idx, dbeta.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), req, f)
    }

    /// Row-wise ℓ2 normalization of `[N,D]` with a 1e-12 guard on the norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        const GUARD: f64 = 1e-12;
        let vx = self.value(x);
        let x2 = view2(&vx);
        let (n, d) = x2.dim();
        let mut out = Array2::<f64>::zeros((n, d));
        let mut norms = Array1::<f64>::zeros(n);
        for i in 0..n {
            let norm = x2.row(i).mapv(|v| v * v).sum().sqrt().max(GUARD);
            norms[i] = norm;
            out.row_mut(i).assign(&(&x2.row(i) / norm));
        }
        let cache = Arc::new(out.clone());
        self.unary(x, out.into_dyn(), move |g, buf, xi| {
            let g2 = view2(g);
            let mut dx = Array2::<f64>::zeros((n, d));
            for i in 0..n {
                let y = cache.row(i);
                let gi = g2.row(i);
                let dot: f64 = y.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                let inv = 1.0 / norms[i];
                for j in 0..d {
                    dx[(i, j)] = (gi[j] - y[j] * dot) * inv;
                }
            }
            buf.accumulate(xi, dx.into_dyn());
        })
    }

    /// Row-wise log-softmax of `[N,K]`.
    pub fn log_softmax_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x2 = view2(&vx);
        let (n, k) = x2.dim();
        let mut out = Array2::<f64>::zeros((n, k));
        for i in 0..n {
            let row = x2.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            out.row_mut(i).assign(&row.mapv(|v| v - lse));
        }
        let cache = Arc::new(out.clone());
        self.unary(x, out.into_dyn(), move |g, buf, xi| {
            let g2 = view2(g);
            let mut dx = Array2::<f64>::zeros((n, k));
            for i in 0..n {
                let gsum = g2.row(i).sum();
                for j in 0..k {
                    dx[(i, j)] = g2[(i, j)] - cache[(i, j)].exp() * gsum;
                }
            }
            buf.accumulate(xi, dx.into_dyn());
        })
    }

    /// Per-row log-sum-exp of `[N,N]` excluding the diagonal entry.
    pub fn row_lse_excl_self(&self, a: Var) -> Var {
        let va = self.value(a);
        let a2 = view2(&va);
        let n = a2.nrows();
        assert_eq!(n, a2.ncols(), "row_lse_excl_self: square matrix required");
        let mut out = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                if k != i {
                    m = m.max(a2[(i, k)]);
                }
            }
            let mut s = 0.0;
            for k in 0..n {
                if k != i {
                    s += (a2[(i, k)] - m).exp();
                }
            }
            out[i] = m + s.ln();
        }
        let ca = Arc::clone(&va);
        let lse = Arc::new(out.clone());
        self.unary(a, out.into_dyn(), move |g, buf, ai| {
            let a2 = view2(&ca);
            let mut da = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let gi = g[[i]];
                for k in 0..n {
                    if k != i {
                        da[(i, k)] = gi * (a2[(i, k)] - lse[i]).exp();
                    }
                }
            }
            buf.accumulate(ai, da.into_dyn());
        })
    }

    /// Gathers `a[i,j]` for each listed pair, yielding `[P]`.
    pub fn gather_pairs(&self, a: Var, pairs: Vec<(usize, usize)>) -> Var {
        let va = self.value(a);
        let a2 = view2(&va);
        let shape = (a2.nrows(), a2.ncols());
        let out = Array1::from_iter(pairs.iter().map(|&(i, j)| a2[(i, j)]));
        self.unary(a, out.into_dyn(), move |g, buf, ai| {
            let mut da = Array2::<f64>::zeros(shape);
            for (p, &(i, j)) in pairs.iter().enumerate() {
                da[(i, j)] += g[[p]];
            }
            buf.accumulate(ai, da.into_dyn());
        })
    }

    /// Flattens `[B, …]` into `[B, prod]`.
    pub fn flatten_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let b = shape[0];
        let cols: usize = shape[1..].iter().product();
        let out = vx
            .to_shape((b, cols))
            .expect("flatten reshape")
            .to_owned()
            .into_dyn();
        self.unary(x, out, move |g, buf, xi| {
            let dg = g
                .to_shape(IxDyn(&shape))
                .expect("flatten grad reshape")
                .to_owned();
            buf.accumulate(xi, dg);
        })
    }

    /// Concatenates `[nᵢ,D]` blocks along the row axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let d = view2(&values[0]).ncols();
        let rows: Vec<usize> = values.iter().map(|v| view2(v).nrows()).collect();
        let total: usize = rows.iter().sum();
        let mut out = Array2::<f64>::zeros((total, d));
        let mut offset = 0;
        for v in &values {
            let v2 = view2(v);
            out.slice_mut(ndarray::s![offset..offset + v2.nrows(), ..])
                .assign(&v2);
            offset += v2.nrows();
        }
        let req = parts.iter().any(|&p| self.requires_grad(p));
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx as usize).collect();
        let f: Option<super::tape::BackwardFn> = if req {
            Some(Box::new(move |g, buf| {
                let g2 = view2(g);
                let mut offset = 0;
                for (&pi, &nr) in idxs.iter().zip(rows.iter()) {
                    let block = g2.slice(ndarray::s![offset..offset + nr, ..]).to_owned();
                    buf.accumulate(pi, block.into_dyn());
                    offset += nr;
                }
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), req, f)
    }
}
