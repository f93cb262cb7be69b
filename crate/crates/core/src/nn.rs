//! Parameterised layers. Each layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] so that one store can be checkpointed, frozen by prefix and
//! updated by an optimiser independently of the layer structs.
//!
//! Weights are drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;
use crate::tensor::{Graph, Init, NormKind, ParamId, ParamStore, Var};

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Affine map over the last axis: `x[..., in] -> x[..., out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let b = bound(d_in);
        let weight = init.uniform("weight", &[d_in, d_out], b);
        let bias = bias.then(|| init.uniform("bias", &[d_out], b));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.d_in, "linear: input width");
        let rows = shape.iter().product::<usize>() / self.d_in;
        let x2 = g.reshape(x, &[rows, self.d_in]);
        let w = g.param(store, self.weight);
        let mut y = g.matmul(x2, w);
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add_bias_trailing(y, b);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = self.d_out;
        g.reshape(y, &out)
    }
}

/// 2-D convolution over `[N, C, H, W]` with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        bias: bool,
    ) -> Self {
        let b = bound(c_in * kernel.0 * kernel.1);
        let weight = init.uniform("weight", &[c_out, c_in, kernel.0, kernel.1], b);
        let bias = bias.then(|| init.uniform("bias", &[c_out], b));
        Self { weight, bias, dilation }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.dilation)
    }
}

/// Normalisation, optionally followed by a per-channel affine transform.
#[derive(Debug, Clone)]
pub struct Norm {
    /// `(gamma, beta)`; `None` for the parameter-free variant.
    pub affine: Option<(ParamId, ParamId)>,
    pub kind: NormKind,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, kind: NormKind) -> Self {
        Self {
            affine: Some((init.ones("gamma", &[channels]), init.zeros("beta", &[channels]))),
            kind,
            channels,
        }
    }

    pub fn plain(channels: usize, kind: NormKind) -> Self {
        Self {
            affine: None,
            kind,
            channels,
        }
    }

    /// Normalises a channel-first tensor `[A, C, ...]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = g.shape(x);
        assert_eq!(shape[1], self.channels, "norm: channel count");
        let a = shape[0];
        let p = shape[2..].iter().product();
        self.forward_layout(g, store, x, (a, self.channels, p))
    }

    /// Normalises a channel-last tensor `[..., C]`.
    pub fn forward_last<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = g.shape(x);
        assert_eq!(*shape.last().unwrap(), self.channels, "norm: channel count");
        let a = shape.iter().product::<usize>() / self.channels;
        self.forward_layout(g, store, x, (a, self.channels, 1))
    }

    fn forward_layout<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: (usize, usize, usize),
    ) -> Var {
        let (gamma, beta) = match self.affine {
            Some((gm, bt)) => (g.param(store, gm), g.param(store, bt)),
            None => (
                g.constant(ArrayD::ones(IxDyn(&[self.channels]))),
                g.constant(ArrayD::zeros(IxDyn(&[self.channels]))),
            ),
        };
        g.normalize(x, layout, self.kind, gamma, beta, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>) -> Self {
        Self {
            slope: init.constant("slope", &[1], 0.25),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let a = g.param(store, self.slope);
        g.prelu(x, a)
    }
}

/// Bidirectional LSTM over `[B, L, D]`, returning `[B, L, 2H]` (forward then backward).
#[derive(Debug, Clone)]
pub struct BiLstm {
    dirs: [(ParamId, ParamId, ParamId); 2],
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d_in: usize, hidden: usize) -> Self {
        let b = bound(hidden);
        let mut dir = |name: &str| {
            let mut s = init.sub(name);
            (
                s.uniform("w_ih", &[d_in, 4 * hidden], b),
                s.uniform("w_hh", &[hidden, 4 * hidden], b),
                s.uniform("bias", &[4 * hidden], b),
            )
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        Self {
            dirs: [fwd, bwd],
            hidden,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let outs: Vec<Var> = self
            .dirs
            .iter()
            .enumerate()
            .map(|(i, &(w_ih, w_hh, bias))| {
                let (a, b, c) = (g.param(store, w_ih), g.param(store, w_hh), g.param(store, bias));
                g.lstm(x, a, b, c, i == 1)
            })
            .collect();
        g.concat(&outs, 2)
    }
}
