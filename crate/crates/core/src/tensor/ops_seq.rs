//! Sequence operations: recurrent cells, sliding-window unfold/fold, attention.

use ndarray::{linalg::general_mat_mul, s, Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};

use super::graph::{Graph, Var};
use super::ops_linalg::{as2, mm};
use crate::scalar::Scalar;

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Padded length and window count for a sliding window of size `win`, stride `stride`.
pub fn unfold_len(len: usize, win: usize, stride: usize) -> (usize, usize) {
    let padded = if len <= win {
        win
    } else {
        len + (stride - (len - win) % stride) % stride
    };
    (padded, (padded - win) / stride + 1)
}

/// `x: [B, L, C] -> [B, L', win*C]`, zero-padding on the right.
pub fn unfold_seq_raw<T: Scalar>(x: &[T], b: usize, len: usize, c: usize, win: usize, stride: usize) -> Vec<T> {
    let (_, windows) = unfold_len(len, win, stride);
    let mut out = vec![T::zero(); b * windows * win * c];
    for bi in 0..b {
        for j in 0..windows {
            for i in 0..win {
                let pos = j * stride + i;
                if pos >= len {
                    continue;
                }
                let src = &x[(bi * len + pos) * c..(bi * len + pos + 1) * c];
                let o = ((bi * windows + j) * win + i) * c;
                out[o..o + c].copy_from_slice(src);
            }
        }
    }
    out
}

/// Overlap-add of `[B, L', win*C]` windows into `[B, out_len, C]`; positions
/// past `out_len` are dropped.
pub fn fold_seq_raw<T: Scalar>(
    y: &[T],
    b: usize,
    windows: usize,
    c: usize,
    win: usize,
    stride: usize,
    out_len: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); b * out_len * c];
    for bi in 0..b {
        for j in 0..windows {
            for i in 0..win {
                let pos = j * stride + i;
                if pos >= out_len {
                    continue;
                }
                let src = &y[((bi * windows + j) * win + i) * c..((bi * windows + j) * win + i + 1) * c];
                let dst = &mut out[(bi * out_len + pos) * c..(bi * out_len + pos + 1) * c];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Sliding windows along axis 1 of `[B, L, C]`, window contents merged into
    /// the feature axis as `i*C + c`.
    pub fn unfold_seq(&mut self, x: Var, win: usize, stride: usize) -> Var {
        assert!(win >= 1 && stride >= 1);
        let xs = self.shape(x).to_vec();
        let (b, len, c) = (xs[0], xs[1], xs[2]);
        let (_, windows) = unfold_len(len, win, stride);
        let out = unfold_seq_raw(self.value(x).as_slice().unwrap(), b, len, c, win, stride);
        let value = ArrayD::from_shape_vec(IxDyn(&[b, windows, win * c]), out).unwrap();
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let gx = fold_seq_raw(g.as_slice().unwrap(), b, windows, c, win, stride, len);
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, len, c]), gx).unwrap())]
            }),
        )
    }

    /// Transposed-convolution style overlap-add: `[B, L', win*C] -> [B, out_len, C]`.
    pub fn fold_seq(&mut self, y: Var, win: usize, stride: usize, out_len: usize) -> Var {
        let ys = self.shape(y).to_vec();
        let (b, windows) = (ys[0], ys[1]);
        assert_eq!(ys[2] % win, 0);
        let c = ys[2] / win;
        let out = fold_seq_raw(self.value(y).as_slice().unwrap(), b, windows, c, win, stride, out_len);
        let value = ArrayD::from_shape_vec(IxDyn(&[b, out_len, c]), out).unwrap();
        self.op(
            value,
            &[y],
            Box::new(move |g, _, _| {
                let gs = g.as_slice().unwrap();
                let mut gy = vec![T::zero(); b * windows * win * c];
                for bi in 0..b {
                    for j in 0..windows {
                        for i in 0..win {
                            let pos = j * stride + i;
                            if pos >= out_len {
                                continue;
                            }
                            let o = ((bi * windows + j) * win + i) * c;
                            gy[o..o + c].copy_from_slice(&gs[(bi * out_len + pos) * c..(bi * out_len + pos + 1) * c]);
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, windows, win * c]), gy).unwrap())]
            }),
        )
    }

    /// Single-direction LSTM over `x: [B, L, D]` with gate order (i, f, g, o).
    /// `w_ih: [D, 4H]`, `w_hh: [H, 4H]`, `bias: [4H]`; zero initial state.
    /// Returns `[B, L, H]`; `reverse` runs from the last step to the first.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, len, d) = (xs[0], xs[1], xs[2]);
        let h4 = self.shape(w_ih)[1];
        let h = h4 / 4;
        assert_eq!(self.shape(w_ih), &[d, h4]);
        assert_eq!(self.shape(w_hh), &[h, h4]);
        assert_eq!(self.shape(bias), &[h4]);

        // time-major input projection: rows t*B + b
        let xt = self
            .value(x)
            .view()
            .into_shape_with_order((b, len, d))
            .unwrap()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((len * b, d))
            .unwrap();
        let mut gates_all = mm(xt.view(), as2(self.value(w_ih)));
        let bvec = self.value(bias).as_slice().unwrap().to_vec();
        let whh = as2(self.value(w_hh)).to_owned();

        let mut cells = Array3::<T>::zeros((len, b, h));
        let mut hs = Array3::<T>::zeros((len, b, h));
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        let mut h_prev = Array2::<T>::zeros((b, h));
        let mut c_prev = Array2::<T>::zeros((b, h));
        for &t in &order {
            let mut gates = gates_all.slice_mut(s![t * b..(t + 1) * b, ..]);
            general_mat_mul(T::one(), &h_prev, &whh, T::one(), &mut gates);
            let mut c_new = Array2::<T>::zeros((b, h));
            let mut h_new = Array2::<T>::zeros((b, h));
            for bi in 0..b {
                let mut row = gates.row_mut(bi);
                let row = row.as_slice_mut().unwrap();
                for (v, &bv) in row.iter_mut().zip(&bvec) {
                    *v += bv;
                }
                for k in 0..h {
                    let ig = sigmoid(row[k]);
                    let fg = sigmoid(row[h + k]);
                    let gg = row[2 * h + k].tanh();
                    let og = sigmoid(row[3 * h + k]);
                    row[k] = ig;
                    row[h + k] = fg;
                    row[2 * h + k] = gg;
                    row[3 * h + k] = og;
                    let c = fg * c_prev[[bi, k]] + ig * gg;
                    c_new[[bi, k]] = c;
                    h_new[[bi, k]] = og * c.tanh();
                }
            }
            cells.slice_mut(s![t, .., ..]).assign(&c_new);
            hs.slice_mut(s![t, .., ..]).assign(&h_new);
            h_prev = h_new;
            c_prev = c_new;
        }
        let value = hs
            .view()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let acts = gates_all;
        self.op(
            value,
            &[x, w_ih, w_hh, bias],
            Box::new(move |g, inp, needs| {
                let gy = g
                    .view()
                    .into_shape_with_order((b, len, h))
                    .unwrap()
                    .permuted_axes([1, 0, 2])
                    .as_standard_layout()
                    .into_owned();
                let w_ih = as2(inp[1]);
                let w_hh = as2(inp[2]);
                let mut dgates_all = Array2::<T>::zeros((len * b, h4));
                let mut dw_hh = Array2::<T>::zeros((h, h4));
                let mut dh_next = Array2::<T>::zeros((b, h));
                let mut dc_next = Array2::<T>::zeros((b, h));
                let zeros = Array2::<T>::zeros((b, h));
                for (step, &t) in order.iter().enumerate().rev() {
                    let prev_t = (step > 0).then(|| order[step - 1]);
                    let c_prev = prev_t.map(|p| cells.slice(s![p, .., ..])).unwrap_or(zeros.view());
                    let h_prev = prev_t.map(|p| hs.slice(s![p, .., ..])).unwrap_or(zeros.view());
                    let gate = acts.slice(s![t * b..(t + 1) * b, ..]);
                    let mut dgates = dgates_all.slice_mut(s![t * b..(t + 1) * b, ..]);
                    for bi in 0..b {
                        for k in 0..h {
                            let ig = gate[[bi, k]];
                            let fg = gate[[bi, h + k]];
                            let gg = gate[[bi, 2 * h + k]];
                            let og = gate[[bi, 3 * h + k]];
                            let tc = cells[[t, bi, k]].tanh();
                            let dh = gy[[t, bi, k]] + dh_next[[bi, k]];
                            let dc = dh * og * (T::one() - tc * tc) + dc_next[[bi, k]];
                            dgates[[bi, k]] = dc * gg * ig * (T::one() - ig);
                            dgates[[bi, h + k]] = dc * c_prev[[bi, k]] * fg * (T::one() - fg);
                            dgates[[bi, 2 * h + k]] = dc * ig * (T::one() - gg * gg);
                            dgates[[bi, 3 * h + k]] = dh * tc * og * (T::one() - og);
                            dc_next[[bi, k]] = dc * fg;
                        }
                    }
                    if needs[2] {
                        general_mat_mul(T::one(), &h_prev.t(), &dgates, T::one(), &mut dw_hh);
                    }
                    dh_next = mm(dgates.view(), w_hh.t());
                }
                let gx = needs[0].then(|| {
                    mm(dgates_all.view(), w_ih.t())
                        .into_shape_with_order((len, b, d))
                        .unwrap()
                        .permuted_axes([1, 0, 2])
                        .as_standard_layout()
                        .into_owned()
                        .into_dyn()
                });
                let gw_ih = needs[1].then(|| {
                    let xt = inp[0]
                        .view()
                        .into_shape_with_order((b, len, d))
                        .unwrap()
                        .permuted_axes([1, 0, 2])
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((len * b, d))
                        .unwrap();
                    mm(xt.t(), dgates_all.view()).into_dyn()
                });
                let gb = needs[3].then(|| dgates_all.sum_axis(Axis(0)).into_dyn());
                vec![gx, gw_ih, needs[2].then(|| dw_hh.into_dyn()), gb]
            }),
        )
    }

    /// Scaled dot-product attention per head: `q, k: [N, T, D]`, `v: [N, T, Dv]`.
    /// Returns the output node and the `[N, T, T]` attention weights.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> (Var, Array3<T>) {
        let qs = self.shape(q).to_vec();
        let vs = self.shape(v).to_vec();
        let (heads, t, dq) = (qs[0], qs[1], qs[2]);
        let dv = vs[2];
        assert_eq!(self.shape(k), &qs[..]);
        assert_eq!(vs[..2], qs[..2]);
        let scale = T::one() / T::lit(dq as f64).sqrt();
        let view3 = |a: &ArrayD<T>, last: usize| a.view().into_shape_with_order((heads, t, last)).unwrap().to_owned();
        let (qa, ka, va) = (view3(self.value(q), dq), view3(self.value(k), dq), view3(self.value(v), dv));
        let mut weights = Array3::<T>::zeros((heads, t, t));
        let mut out = Array3::<T>::zeros((heads, t, dv));
        for n in 0..heads {
            let mut sc = mm(qa.slice(s![n, .., ..]), ka.slice(s![n, .., ..]).t());
            for mut row in sc.rows_mut() {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|x| ((x - m) * scale).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            out.slice_mut(s![n, .., ..]).assign(&mm(sc.view(), va.slice(s![n, .., ..])));
            weights.slice_mut(s![n, .., ..]).assign(&sc);
        }
        let w_saved = weights.clone();
        let node = self.op(
            out.into_dyn(),
            &[q, k, v],
            Box::new(move |g, inp, needs| {
                let g3 = g.view().into_shape_with_order((heads, t, dv)).unwrap();
                let qa = inp[0].view().into_shape_with_order((heads, t, dq)).unwrap();
                let ka = inp[1].view().into_shape_with_order((heads, t, dq)).unwrap();
                let va = inp[2].view().into_shape_with_order((heads, t, dv)).unwrap();
                let mut gq = Array3::<T>::zeros((heads, t, dq));
                let mut gk = Array3::<T>::zeros((heads, t, dq));
                let mut gv = Array3::<T>::zeros((heads, t, dv));
                for n in 0..heads {
                    let a = w_saved.slice(s![n, .., ..]);
                    let go: ArrayView2<T> = g3.slice(s![n, .., ..]);
                    gv.slice_mut(s![n, .., ..]).assign(&mm(a.t(), go));
                    let mut ds = mm(go, va.slice(s![n, .., ..]).t());
                    for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                        let dot: T = drow.iter().zip(arow.iter()).map(|(&x, &y)| x * y).sum();
                        drow.zip_mut_with(&arow, |x, &y| *x = y * (*x - dot) * scale);
                    }
                    gq.slice_mut(s![n, .., ..]).assign(&mm(ds.view(), ka.slice(s![n, .., ..])));
                    gk.slice_mut(s![n, .., ..]).assign(&mm(ds.t(), qa.slice(s![n, .., ..])));
                }
                vec![
                    needs[0].then(|| gq.into_dyn()),
                    needs[1].then(|| gk.into_dyn()),
                    needs[2].then(|| gv.into_dyn()),
                ]
            }),
        );
        (node, weights)
    }
}
