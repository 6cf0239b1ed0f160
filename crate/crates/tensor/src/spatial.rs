//! Spatial operators on `C×H×W` tensors.

use crate::backward::GradSink;
use crate::gemm::{gemm, Layout};
use crate::ops::{Op, ZERO_INDEX};
use crate::tensor::Tensor;

fn chw(t: &Tensor, what: &str) -> (usize, usize, usize) {
    match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("{what} expects a C×H×W tensor, got shape {s:?}"),
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let p = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * p];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let src = ci * h * w + (oy * stride + ky) * w + kx;
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        d.copy_from_slice(&x[src..src + wo]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = x[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f64],
    dx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let base = ci * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..wo {
                        dx[base + ox * stride] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    (kh, kw): (usize, usize),
    cols: Option<&[f64]>,
    out_shape: &[usize],
    grad: &[f64],
    sink: &mut GradSink,
) {
    let (c, h, w) = chw(input, "conv2d");
    let o = weight.shape()[0];
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let p = ho * wo;
    let ck = c * kh * kw;
    if let Some(b) = bias {
        if let Some(gb) = sink.slot(b) {
            for (oi, g) in gb.iter_mut().enumerate() {
                *g += grad[oi * p..(oi + 1) * p].iter().sum::<f64>();
            }
        }
    }
    if weight.requires_grad() {
        let owned;
        let cols = match cols {
            Some(c) => c,
            None if kh == 1 && kw == 1 && stride == 1 => input.data(),
            None => {
                owned = im2col(input.data(), c, h, w, kh, kw, stride).0;
                &owned
            }
        };
        if let Some(gw) = sink.slot(weight) {
            gemm(
                o,
                p,
                ck,
                grad,
                Layout::row_major(p),
                cols,
                Layout::row_major(p).t(),
                1.0,
                gw,
                Layout::row_major(ck),
            );
        }
    }
    if let Some(gx) = sink.slot(input) {
        if kh == 1 && kw == 1 && stride == 1 {
            gemm(
                ck,
                o,
                p,
                weight.data(),
                Layout::row_major(ck).t(),
                grad,
                Layout::row_major(p),
                1.0,
                gx,
                Layout::row_major(p),
            );
        } else {
            let mut dcols = vec![0.0; ck * p];
            gemm(
                ck,
                o,
                p,
                weight.data(),
                Layout::row_major(ck).t(),
                grad,
                Layout::row_major(p),
                0.0,
                &mut dcols,
                Layout::row_major(p),
            );
            col2im_add(&dcols, gx, c, h, w, kh, kw, stride, ho, wo);
        }
    }
}

impl Tensor {
    /// Unpadded 2-D convolution of a `C×H×W` input with an `O×C×kh×kw`
    /// kernel and optional length-`O` bias.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Tensor {
        let (c, h, w) = chw(self, "conv2d");
        let [o, wc, kh, kw] = weight.shape() else {
            panic!("conv2d kernel must be O×C×kh×kw, got {:?}", weight.shape());
        };
        let (o, kh, kw) = (*o, *kh, *kw);
        assert_eq!(*wc, c, "conv2d channel mismatch: input {c}, kernel {wc}");
        assert!(h >= kh && w >= kw, "conv2d kernel {kh}×{kw} larger than input {h}×{w}");
        assert!(stride >= 1);
        if let Some(b) = bias {
            assert_eq!(b.shape(), [o], "conv2d bias shape");
        }
        let pointwise = kh == 1 && kw == 1 && stride == 1;
        let (cols, ho, wo) = if pointwise {
            (None, h, w)
        } else {
            let (cols, ho, wo) = im2col(self.data(), c, h, w, kh, kw, stride);
            (Some(cols), ho, wo)
        };
        let p = ho * wo;
        let ck = c * kh * kw;
        let mut out = vec![0.0; o * p];
        if let Some(b) = bias {
            for (oi, bv) in b.data().iter().enumerate() {
                out[oi * p..(oi + 1) * p].iter_mut().for_each(|v| *v = *bv);
            }
        }
        gemm(
            o,
            ck,
            p,
            weight.data(),
            Layout::row_major(ck),
            cols.as_deref().unwrap_or(self.data()),
            Layout::row_major(p),
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out,
            Layout::row_major(p),
        );
        let needs_cols = weight.requires_grad();
        Tensor::from_op(
            out,
            vec![o, ho, wo],
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                kernel: (kh, kw),
                cols: if needs_cols { cols } else { None },
            },
        )
    }

    fn spatial_gather(&self, ho: usize, wo: usize, map: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Tensor {
        let (c, h, w) = chw(self, "spatial op");
        let mut plane = Vec::with_capacity(ho * wo);
        for y in 0..ho {
            for x in 0..wo {
                plane.push(map(y, x).map(|(sy, sx)| sy * w + sx));
            }
        }
        let mut index = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            let base = ci * h * w;
            index.extend(plane.iter().map(|p| p.map_or(ZERO_INDEX, |i| base + i)));
        }
        self.gather(index, vec![c, ho, wo])
    }

    /// Reflection padding by `pad` pixels on every side (edge not repeated).
    pub fn pad_reflect(&self, pad: usize) -> Tensor {
        let (_, h, w) = chw(self, "pad_reflect");
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}×{w}");
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
            r as usize
        };
        self.spatial_gather(h + 2 * pad, w + 2 * pad, |y, x| {
            Some((reflect(y as isize - pad as isize, h), reflect(x as isize - pad as isize, w)))
        })
    }

    pub fn pad_zero(&self, pad: usize) -> Tensor {
        let (_, h, w) = chw(self, "pad_zero");
        self.spatial_gather(h + 2 * pad, w + 2 * pad, |y, x| {
            let (sy, sx) = (y.checked_sub(pad)?, x.checked_sub(pad)?);
            (sy < h && sx < w).then_some((sy, sx))
        })
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&self) -> Tensor {
        let (c, h, w) = chw(self, "max_pool2");
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut index = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = ci * h * w + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ci * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(index, vec![c, ho, wo])
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&self, k: usize) -> Tensor {
        let (c, h, w) = chw(self, "avg_pool");
        let (ho, wo) = (h / k, w / k);
        let weight = 1.0 / (k * k) as f64;
        let mut taps = Vec::with_capacity(c * ho * wo * k * k);
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    for dy in 0..k {
                        for dx in 0..k {
                            taps.push((ci * h * w + (y * k + dy) * w + x * k + dx, weight));
                        }
                    }
                }
            }
        }
        self.weighted_gather(taps, k * k, vec![c, ho, wo])
    }

    /// Nearest-neighbour resampling to `ho×wo`.
    pub fn resize_nearest(&self, ho: usize, wo: usize) -> Tensor {
        let (_, h, w) = chw(self, "resize_nearest");
        if (h, w) == (ho, wo) {
            return self.clone();
        }
        self.spatial_gather(ho, wo, |y, x| Some((y * h / ho, x * w / wo)))
    }

    /// Bilinear resampling to `ho×wo` with half-pixel centres.
    pub fn resize_bilinear(&self, ho: usize, wo: usize) -> Tensor {
        let (c, h, w) = chw(self, "resize_bilinear");
        if (h, w) == (ho, wo) {
            return self.clone();
        }
        let axis = |out: usize, n: usize| -> Vec<(usize, usize, f64)> {
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = axis(ho, h);
        let xs = axis(wo, w);
        let mut taps = Vec::with_capacity(c * ho * wo * 4);
        for ci in 0..c {
            let base = ci * h * w;
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    taps.push((base + y0 * w + x0, (1.0 - fy) * (1.0 - fx)));
                    taps.push((base + y0 * w + x1, (1.0 - fy) * fx));
                    taps.push((base + y1 * w + x0, fy * (1.0 - fx)));
                    taps.push((base + y1 * w + x1, fy * fx));
                }
            }
        }
        self.weighted_gather(taps, 4, vec![c, ho, wo])
    }
}
