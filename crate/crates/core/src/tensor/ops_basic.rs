//! Elementwise, broadcasting and shape operations.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::graph::{Graph, Var};
use crate::scalar::Scalar;

fn std_layout<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.op(
            value,
            &[a, b],
            Box::new(|g, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            }),
        )
    }

    /// Sum of any number of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut value = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(self.shape(x), value.shape(), "add_n: shape mismatch");
            value += self.value(x);
        }
        self.op(
            value,
            xs,
            Box::new(|g, inputs, needs| {
                (0..inputs.len()).map(|i| needs[i].then(|| g.clone())).collect()
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.op(
            value,
            &[a, b],
            Box::new(|g, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.mapv(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.op(
            value,
            &[a, b],
            Box::new(|g, x, needs| {
                vec![
                    needs[0].then(|| g * x[1]),
                    needs[1].then(|| g * x[0]),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a) * c;
        self.op(value, &[a], Box::new(move |g, _, _| vec![Some(g * c)]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let shape = self.shape(a).to_vec();
        self.op(
            ArrayD::from_elem(IxDyn(&[]), s),
            &[a],
            Box::new(move |g, _, _| {
                let gv = g.iter().copied().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).len() as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// `sum(a * w)` for a constant weight tensor; the usual probe in gradient checks.
    pub fn dot_const(&mut self, a: Var, w: &ArrayD<T>) -> Var {
        assert_eq!(self.shape(a), w.shape());
        let s = (self.value(a) * w).sum();
        let w = w.clone();
        self.op(
            ArrayD::from_elem(IxDyn(&[]), s),
            &[a],
            Box::new(move |g, _, _| {
                let gv = g.iter().copied().next().unwrap();
                vec![Some(&w * gv)]
            }),
        )
    }

    /// `x[c, ...] + b[c]` for a bias indexed by the leading axis.
    pub fn add_bias_leading(&mut self, x: Var, b: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.shape(b), &[c], "add_bias_leading: bias shape");
        let mut value = self.value(x).clone();
        let bias = self.value(b);
        for (mut row, &bv) in value.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        self.op(
            value,
            &[x, b],
            Box::new(move |g, _, needs| {
                let gb = needs[1].then(|| {
                    let v: Vec<T> = g.axis_iter(Axis(0)).map(|r| r.sum()).collect();
                    ArrayD::from_shape_vec(IxDyn(&[c]), v).unwrap()
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        )
    }

    /// `x[..., n] + b[n]` for a bias indexed by the trailing axis.
    pub fn add_bias_trailing(&mut self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(b), &[n], "add_bias_trailing: bias shape");
        let mut value = self.value(x).clone();
        {
            let bias = self.value(b).as_slice().unwrap();
            for chunk in value.as_slice_mut().unwrap().chunks_mut(n) {
                for (v, &bv) in chunk.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        self.op(
            value,
            &[x, b],
            Box::new(move |g, _, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for chunk in g.as_slice().unwrap().chunks(n) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[n]), acc).unwrap()
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        )
    }

    /// `x[..., k] + y[...]`: `y` is broadcast along the trailing axis of `x`.
    pub fn add_broadcast_trailing(&mut self, x: Var, y: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().unwrap();
        assert_eq!(self.shape(y), &xs[..xs.len() - 1], "add_broadcast_trailing: shape");
        let mut value = self.value(x).clone();
        {
            let yv = self.value(y).as_slice().unwrap();
            for (chunk, &yv) in value.as_slice_mut().unwrap().chunks_mut(k).zip(yv) {
                for v in chunk {
                    *v += yv;
                }
            }
        }
        let yshape = xs[..xs.len() - 1].to_vec();
        self.op(
            value,
            &[x, y],
            Box::new(move |g, _, needs| {
                let gy = needs[1].then(|| {
                    let v: Vec<T> = g.as_slice().unwrap().chunks(k).map(|c| c.iter().copied().sum()).collect();
                    ArrayD::from_shape_vec(IxDyn(&yshape), v).unwrap()
                });
                vec![needs[0].then(|| g.clone()), gy]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old = self.shape(x).to_vec();
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                vec![Some(g.clone().into_shape_with_order(IxDyn(&old)).unwrap())]
            }),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = std_layout(self.value(x).clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                vec![Some(std_layout(g.clone().permuted_axes(IxDyn(&inverse))))]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let value = std_layout(ndarray::concatenate(Axis(axis), &views).expect("concat: shapes"));
        let sizes: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        self.op(
            value,
            xs,
            Box::new(move |g, _, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let s = start;
                        start += len;
                        need.then(|| {
                            std_layout(g.slice_axis(Axis(axis), Slice::from(s..s + len)).to_owned())
                        })
                    })
                    .collect()
            }),
        )
    }

    /// `x[start..start+len]` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[axis], "narrow: out of range");
        let value = std_layout(
            self.value(x)
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned(),
        );
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(full)]
            }),
        )
    }

    /// Parametric ReLU with a single learned slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        assert_eq!(self.value(slope).len(), 1, "prelu: scalar slope expected");
        let a = self.scalar(slope);
        let value = self.value(x).mapv(|v| if v >= T::zero() { v } else { a * v });
        let sshape = self.shape(slope).to_vec();
        self.op(
            value,
            &[x, slope],
            Box::new(move |g, inp, needs| {
                let x = inp[0];
                let a = inp[1].iter().copied().next().unwrap();
                let gx = needs[0].then(|| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(x, |gv, &xv| {
                        if xv < T::zero() {
                            *gv *= a
                        }
                    });
                    gx
                });
                let ga = needs[1].then(|| {
                    let s: T = g
                        .iter()
                        .zip(x.iter())
                        .filter(|(_, &xv)| xv < T::zero())
                        .map(|(&gv, &xv)| gv * xv)
                        .sum();
                    ArrayD::from_elem(IxDyn(&sshape), s)
                });
                vec![gx, ga]
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.tanh());
        let y = value.clone();
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(&y, |gv, &yv| *gv *= T::one() - yv * yv);
                vec![Some(gx)]
            }),
        )
    }
}
