use super::linalg::gemm;
use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], geo: &ConvGeom, col: &mut [T]) {
    let ConvGeom {
        ci,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    } = *geo;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], geo: &ConvGeom, dx: &mut [T]) {
    let ConvGeom {
        ci,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    } = *geo;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-D cross-correlation on NCHW input with OIHW weights.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let wt = weight.value();
        let (xs, ws) = (x.shape().to_vec(), wt.shape().to_vec());
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d: {xs:?} * {ws:?}");
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, wci, "conv2d channel mismatch: {xs:?} * {ws:?}");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than input");
        let geo = ConvGeom {
            ci,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (k, hwo) = (geo.k(), geo.hw_out());
        let in_sz = ci * h * w;
        let mut out = vec![T::zero(); n * co * hwo];
        let mut col = if geo.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * hwo]
        };
        for b in 0..n {
            let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
            let src: &[T] = if geo.pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut col);
                &col
            };
            gemm(
                co,
                k,
                hwo,
                wt.data(),
                false,
                src,
                false,
                &mut out[b * co * hwo..(b + 1) * co * hwo],
                false,
            );
        }
        let bias_val = bias.map(|b| b.value());
        if let Some(bv) = &bias_val {
            assert_eq!(bv.shape(), &[co], "conv2d bias shape");
            for b in 0..n {
                for c in 0..co {
                    let bc = bv.data()[c];
                    out[(b * co + c) * hwo..(b * co + c + 1) * hwo]
                        .iter_mut()
                        .for_each(|v| *v = *v + bc);
                }
            }
        }
        let value = Tensor::new(&[n, co, geo.ho, geo.wo], out);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.graph.record(value, &parents, move |g, needs| {
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![T::zero(); n * in_sz]);
            let mut gw = needs[1].then(|| vec![T::zero(); co * k]);
            let mut col = vec![T::zero(); if geo.pointwise() { 0 } else { k * hwo }];
            let mut dcol = vec![T::zero(); if geo.pointwise() { 0 } else { k * hwo }];
            for b in 0..n {
                let gb = &gd[b * co * hwo..(b + 1) * co * hwo];
                if let Some(gw) = gw.as_mut() {
                    let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
                    let src: &[T] = if geo.pointwise() {
                        xb
                    } else {
                        im2col(xb, &geo, &mut col);
                        &col
                    };
                    gemm(co, hwo, k, gb, false, src, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[b * in_sz..(b + 1) * in_sz];
                    if geo.pointwise() {
                        gemm(k, co, hwo, wt.data(), true, gb, false, dst, false);
                    } else {
                        gemm(k, co, hwo, wt.data(), true, gb, false, &mut dcol, false);
                        col2im(&dcol, &geo, dst);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::new(&xs, d)),
                gw.map(|d| Tensor::new(&ws, d)),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); co];
                    for b in 0..n {
                        for (c, dv) in d.iter_mut().enumerate() {
                            let s: T = gd[(b * co + c) * hwo..(b * co + c + 1) * hwo]
                                .iter()
                                .copied()
                                .sum();
                            *dv = *dv + s;
                        }
                    }
                    Tensor::new(&[co], d)
                }));
            }
            grads
        })
    }

    /// Non-overlapping `k×k` average pooling on NCHW input.
    pub fn avg_pool2d(self, k: usize) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % k == 0 && w % k == 0, "avg_pool2d: {s:?} by {k}");
        let (ho, wo) = (h / k, w / k);
        let inv = T::lit(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); nc * ho * wo];
        let xd = x.data();
        for p in 0..nc {
            for y in 0..h {
                for xx in 0..w {
                    let o = (p * ho + y / k) * wo + xx / k;
                    out[o] = out[o] + xd[(p * h + y) * w + xx] * inv;
                }
            }
        }
        self.graph
            .record(Tensor::new(&[s[0], s[1], ho, wo], out), &[self], move |g, _| {
                let gd = g.data();
                let mut d = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(p * h + y) * w + xx] = gd[(p * ho + y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(&s, d))]
            })
    }

    /// Nearest-neighbour upsampling by an integer factor on NCHW input.
    pub fn upsample_nearest2d(self, f: usize) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * f, w * f);
        let xd = x.data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            for y in 0..ho {
                let row = &xd[(p * h + y / f) * w..(p * h + y / f + 1) * w];
                for xx in 0..wo {
                    out.push(row[xx / f]);
                }
            }
        }
        self.graph
            .record(Tensor::new(&[s[0], s[1], ho, wo], out), &[self], move |g, _| {
                let gd = g.data();
                let mut d = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let t = &mut d[(p * h + y / f) * w + xx / f];
                            *t = *t + gd[(p * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(&s, d))]
            })
    }
}
