//! Normalisation layers over a `[A, C, P]` view of a tensor.
//!
//! * channel layer norm: statistics over `C` for each `(a, p)`
//! * group norm: statistics over `(C/G channels, P)` for each `(a, group)`
//! * batch norm: statistics over `(A, P)` for each channel
//! * global layer norm: statistics over `(C, P)` for each `a`
//!
//! The affine transform is always per channel.

use ndarray::{ArrayD, IxDyn};

use super::graph::{Graph, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Channel,
    Group(usize),
    Batch,
    Global,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    a: usize,
    c: usize,
    p: usize,
    kind: NormKind,
}

impl Layout {
    fn groups(&self) -> usize {
        match self.kind {
            NormKind::Channel => self.a * self.p,
            NormKind::Group(g) => self.a * g,
            NormKind::Batch => self.c,
            NormKind::Global => self.a,
        }
    }

    #[inline]
    fn group_of(&self, a: usize, c: usize, p: usize) -> usize {
        match self.kind {
            NormKind::Channel => a * self.p + p,
            NormKind::Group(g) => a * g + c / (self.c / g),
            NormKind::Batch => c,
            NormKind::Global => a,
        }
    }

    fn group_size(&self) -> usize {
        match self.kind {
            NormKind::Channel => self.c,
            NormKind::Group(g) => self.c / g * self.p,
            NormKind::Batch => self.a * self.p,
            NormKind::Global => self.c * self.p,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut idx = 0;
        for a in 0..self.a {
            for c in 0..self.c {
                let base = self.group_of(a, c, 0);
                match self.kind {
                    NormKind::Channel => {
                        for p in 0..self.p {
                            f(idx, c, base + p);
                            idx += 1;
                        }
                    }
                    _ => {
                        for _ in 0..self.p {
                            f(idx, c, base);
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Normalises `x` viewed as `[a, c, p]` (`shape.product() == a*c*p`), then
    /// applies `gamma[c] * xhat + beta[c]`.
    pub fn normalize(
        &mut self,
        x: Var,
        (a, c, p): (usize, usize, usize),
        kind: NormKind,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Var {
        assert_eq!(self.value(x).len(), a * c * p, "normalize: layout mismatch");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        if let NormKind::Group(g) = kind {
            assert!(g > 0 && c % g == 0, "group count {g} must divide {c}");
        }
        let lay = Layout { a, c, p, kind };
        let ng = lay.groups();
        let n = T::lit(lay.group_size() as f64);
        let eps = T::lit(eps);
        let xs = self.value(x).as_slice().unwrap();
        let mut mean = vec![T::zero(); ng];
        lay.for_each(|i, _, gi| mean[gi] += xs[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); ng];
        lay.for_each(|i, _, gi| {
            let d = xs[i] - mean[gi];
            var[gi] += d * d;
        });
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v / n + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xs.len()];
        lay.for_each(|i, _, gi| xhat[i] = (xs[i] - mean[gi]) * inv_std[gi]);
        let gm = self.value(gamma).as_slice().unwrap();
        let bt = self.value(beta).as_slice().unwrap();
        let mut out = vec![T::zero(); xs.len()];
        lay.for_each(|i, ch, _| out[i] = gm[ch] * xhat[i] + bt[ch]);
        let shape = self.shape(x).to_vec();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.op(
            value,
            &[x, gamma, beta],
            Box::new(move |g, inp, needs| {
                let gs = g.as_slice().unwrap();
                let gm = inp[1].as_slice().unwrap();
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                lay.for_each(|i, ch, _| {
                    ggamma[ch] += gs[i] * xhat[i];
                    gbeta[ch] += gs[i];
                });
                let gx = needs[0].then(|| {
                    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut m1 = vec![T::zero(); ng];
                    let mut m2 = vec![T::zero(); ng];
                    lay.for_each(|i, ch, gi| {
                        let d = gs[i] * gm[ch];
                        m1[gi] += d;
                        m2[gi] += d * xhat[i];
                    });
                    let mut gx = vec![T::zero(); gs.len()];
                    lay.for_each(|i, ch, gi| {
                        let d = gs[i] * gm[ch];
                        gx[i] = inv_std[gi] * (d - m1[gi] / n - xhat[i] * m2[gi] / n);
                    });
                    ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap()
                });
                vec![
                    gx,
                    needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap()),
                    needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap()),
                ]
            }),
        )
    }
}
