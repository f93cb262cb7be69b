//! 2-D convolution (stride 1, "same" zero padding, optional dilation) and pooling.
//!
//! Tensors are `[N, C, H, W]`. Convolution lowers each image to a column
//! matrix and runs one GEMM per image.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

use super::graph::{Graph, Var};
use super::ops_linalg::mm;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub dh: usize,
    pub dw: usize,
}

impl ConvGeom {
    fn pad_h(&self) -> usize {
        self.dh * (self.kh - 1) / 2
    }

    fn pad_w(&self) -> usize {
        self.dw * (self.kw - 1) / 2
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Lowers one `[C, H, W]` image into `[C*kh*kw, H*W]` columns.
fn im2col<T: Scalar>(img: &[T], geo: &ConvGeom) -> Array2<T> {
    let (h, w) = (geo.h, geo.w);
    let (ph, pw) = (geo.pad_h() as isize, geo.pad_w() as isize);
    let mut cols = Array2::zeros((geo.rows(), h * w));
    let out = cols.as_slice_mut().unwrap();
    let mut row = 0;
    for c in 0..geo.cin {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            let oy = (ki * geo.dh) as isize - ph;
            for kj in 0..geo.kw {
                let ox = (kj * geo.dw) as isize - pw;
                let dst = &mut out[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let d = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = ((w as isize) - ox).min(w as isize).max(0) as usize;
                    if x0 < x1 {
                        let s0 = (x0 as isize + ox) as usize;
                        d[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto an image.
fn col2im<T: Scalar>(cols: ArrayView2<T>, geo: &ConvGeom, img: &mut [T]) {
    let (h, w) = (geo.h, geo.w);
    let (ph, pw) = (geo.pad_h() as isize, geo.pad_w() as isize);
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().unwrap();
    let mut row = 0;
    for c in 0..geo.cin {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            let oy = (ki * geo.dh) as isize - ph;
            for kj in 0..geo.kw {
                let ox = (kj * geo.dw) as isize - pw;
                let src = &src_all[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox).max(0) as usize;
                    let x1 = ((w as isize) - ox).min(w as isize).max(0) as usize;
                    let s = &src[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x0..x1 {
                        dst[(x as isize + ox) as usize] += s[x];
                    }
                }
                row += 1;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `x: [N, Cin, H, W]`, `weight: [Cout, Cin, kh, kw]`, `bias: [Cout]`;
    /// stride 1, zero padding `dilation*(k-1)/2` (kernel sizes must be odd).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, dilation: (usize, usize)) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be [N,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [Cout,Cin,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        assert!(ws[2] % 2 == 1 && ws[3] % 2 == 1, "conv2d: odd kernels only");
        let (n, cout) = (xs[0], ws[0]);
        let geo = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            dh: dilation.0,
            dw: dilation.1,
        };
        let hw = geo.h * geo.w;
        let img_len = geo.cin * hw;
        let wmat = self
            .value(weight)
            .view()
            .into_shape_with_order((cout, geo.rows()))
            .unwrap()
            .to_owned();
        let mut out = vec![T::zero(); n * cout * hw];
        {
            let xin = self.value(x).as_slice().unwrap();
            for i in 0..n {
                let cols = im2col(&xin[i * img_len..(i + 1) * img_len], &geo);
                let y = mm(wmat.view(), cols.view());
                out[i * cout * hw..(i + 1) * cout * hw].copy_from_slice(y.as_slice().unwrap());
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, cout, geo.h, geo.w]), out).unwrap();
        let conv = self.op(
            value,
            &[x, weight],
            Box::new(move |g, inp, needs| {
                let xin = inp[0].as_slice().unwrap();
                let wmat = inp[1].view().into_shape_with_order((cout, geo.rows())).unwrap();
                let gs = g.as_slice().unwrap();
                let mut gw = Array2::<T>::zeros((cout, geo.rows()));
                let mut gx = needs[0].then(|| vec![T::zero(); xin.len()]);
                for i in 0..n {
                    let gy = ArrayView2::from_shape((cout, hw), &gs[i * cout * hw..(i + 1) * cout * hw]).unwrap();
                    if needs[1] {
                        let cols = im2col(&xin[i * img_len..(i + 1) * img_len], &geo);
                        ndarray::linalg::general_mat_mul(T::one(), &gy, &cols.t(), T::one(), &mut gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gcols = mm(wmat.t(), gy);
                        col2im(gcols.view(), &geo, &mut gx[i * img_len..(i + 1) * img_len]);
                    }
                }
                vec![
                    gx.map(|v| ArrayD::from_shape_vec(IxDyn(&[n, geo.cin, geo.h, geo.w]), v).unwrap()),
                    needs[1].then(|| gw.into_shape_with_order(IxDyn(&[cout, geo.cin, geo.kh, geo.kw])).unwrap()),
                ]
            }),
        );
        match bias {
            Some(b) => self.add_channel_bias_nchw(conv, b),
            None => conv,
        }
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel_bias_nchw(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert_eq!(self.shape(b), &[c]);
        let inner: usize = xs[2..].iter().product();
        let mut value = self.value(x).clone();
        {
            let bias = self.value(b).as_slice().unwrap().to_vec();
            let s = value.as_slice_mut().unwrap();
            for i in 0..n {
                for (ch, &bv) in bias.iter().enumerate() {
                    for v in &mut s[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                        *v += bv;
                    }
                }
            }
        }
        self.op(
            value,
            &[x, b],
            Box::new(move |g, _, needs| {
                let gb = needs[1].then(|| {
                    let gs = g.as_slice().unwrap();
                    let mut acc = vec![T::zero(); c];
                    for i in 0..n {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += gs[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().copied().sum::<T>();
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[c]), acc).unwrap()
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        )
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]` (H, W even).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: even spatial size required");
        let (oh, ow) = (h / 2, w / 2);
        let xin = self.value(x).as_slice().unwrap();
        let mut out = vec![T::zero(); planes * oh * ow];
        let mut arg = vec![0usize; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = p * h * w + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if xin[idx] > xin[best] {
                            best = idx;
                        }
                    }
                    let o = p * oh * ow + y * ow + xx;
                    out[o] = xin[best];
                    arg[o] = best;
                }
            }
        }
        let total = planes * h * w;
        let value = ArrayD::from_shape_vec(IxDyn(&[xs[0], xs[1], oh, ow]), out).unwrap();
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); total];
                for (&a, &gv) in arg.iter().zip(g.iter()) {
                    gx[a] += gv;
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&xs), gx).unwrap())]
            }),
        )
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let inner: usize = xs[2..].iter().product();
        let inv = T::one() / T::lit(inner as f64);
        let value = self
            .value(x)
            .view()
            .into_shape_with_order((xs[0] * xs[1], inner))
            .unwrap()
            .sum_axis(Axis(1))
            .mapv(|v| v * inv)
            .into_shape_with_order(IxDyn(&xs[..2]))
            .unwrap();
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(xs.iter().product());
                for &gv in g.iter() {
                    gx.extend(std::iter::repeat(gv * inv).take(inner));
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&xs), gx).unwrap())]
            }),
        )
    }
}
