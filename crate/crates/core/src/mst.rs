//! Multi-range spectro-temporal separator and decoder head.
//!
//! A block runs three stages on a `[B, C, T, F]` map:
//!
//! * intra-frame spectral (IFS): parallel branch modules along frequency,
//!   summed, then global layer norm
//! * sub-band temporal (SBT): the same along time
//! * full-band self-attention (FBS) over frames, with each frame embedded
//!   as the concatenation of its per-bin features
//!
//! A branch module with window `I` and stride `J` is
//! `x + bias + fold(W_out BiLSTM(W_in unfold(LN(x))))`, where `fold` is the
//! overlap-add adjoint of `unfold`, i.e. a 1-D transposed convolution with
//! kernel `I` and stride `J`.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{BiLstm, Conv2d, Linear, Norm, PRelu};
use crate::scalar::Scalar;
use crate::tensor::{unfold_len, unfold_seq_raw, Graph, Init, NormKind, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Time,
    Frequency,
}

/// One sliding-window branch: window `I`, stride `J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub window: usize,
    pub stride: usize,
}

impl BranchSpec {
    pub const GLOBAL: Self = Self { window: 1, stride: 1 };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MstConfig {
    pub channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Query/key width per head and frequency bin.
    pub qk_dim: usize,
    pub branches: Vec<BranchSpec>,
}

impl Default for MstConfig {
    fn default() -> Self {
        Self {
            channels: 192,
            hidden: 96,
            blocks: 6,
            heads: 4,
            qk_dim: 4,
            branches: vec![
                BranchSpec::GLOBAL,
                BranchSpec { window: 4, stride: 1 },
                BranchSpec { window: 8, stride: 1 },
            ],
        }
    }
}

impl MstConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.hidden == 0 || self.blocks == 0 || self.heads == 0 || self.qk_dim == 0 {
            return bad(format!("all separator sizes must be positive: {self:?}"));
        }
        if self.channels % self.heads != 0 {
            return bad(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        if !self.branches.contains(&BranchSpec::GLOBAL) {
            return bad("branch list must include the global (1, 1) branch".into());
        }
        if self.branches.iter().any(|b| b.window == 0 || b.stride == 0) {
            return bad("branch window and stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Sliding windows along one axis of a `[C, T, F]` map, merged into channels.
/// The result is `[C*I, T', F]` (time) or `[C*I, T, F']` (frequency), with
/// output channel `i*C + c` holding input channel `c` at window offset `i`.
/// The axis is zero-padded on the right so that `(len - I) % J == 0`.
pub fn unfold_axis<T: Scalar>(x: &Array3<T>, axis: Axis, window: usize, stride: usize) -> Result<Array3<T>> {
    if window == 0 || stride == 0 {
        return invalid(format!("unfold window {window} and stride {stride} must be >= 1"));
    }
    let (c, t, f) = x.dim();
    // [other, len, C]
    let (seq, other, len) = match axis {
        Axis::Time => (x.view().permuted_axes([2, 1, 0]), f, t),
        Axis::Frequency => (x.view().permuted_axes([1, 2, 0]), t, f),
    };
    let seq = seq.as_standard_layout();
    let raw = unfold_seq_raw(seq.as_slice().unwrap(), other, len, c, window, stride);
    let (_, windows) = unfold_len(len, window, stride);
    let u = Array3::from_shape_vec((other, windows, window * c), raw).unwrap();
    let out = match axis {
        Axis::Time => u.permuted_axes([2, 1, 0]),
        Axis::Frequency => u.permuted_axes([2, 0, 1]),
    };
    Ok(out.as_standard_layout().to_owned())
}

/// `[B, C, T, F]` -> `[B*other, len, C]`.
fn to_seq<T: Scalar>(g: &mut Graph<T>, x: Var, axis: Axis) -> Var {
    let s = g.shape(x).to_vec();
    let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
    match axis {
        Axis::Frequency => {
            let p = g.permute(x, &[0, 2, 3, 1]);
            g.reshape(p, &[b * t, f, c])
        }
        Axis::Time => {
            let p = g.permute(x, &[0, 3, 2, 1]);
            g.reshape(p, &[b * f, t, c])
        }
    }
}

fn from_seq<T: Scalar>(g: &mut Graph<T>, y: Var, axis: Axis, shape: &[usize]) -> Var {
    let (b, c, t, f) = (shape[0], shape[1], shape[2], shape[3]);
    match axis {
        Axis::Frequency => {
            let r = g.reshape(y, &[b, t, f, c]);
            g.permute(r, &[0, 3, 1, 2])
        }
        Axis::Time => {
            let r = g.reshape(y, &[b, f, t, c]);
            g.permute(r, &[0, 3, 2, 1])
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchModule {
    norm: Norm,
    lin_in: Linear,
    rnn: BiLstm,
    lin_out: Linear,
    bias: ParamId,
    pub spec: BranchSpec,
    pub channels: usize,
}

impl BranchModule {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, hidden: usize, spec: BranchSpec) -> Self {
        let width = channels * spec.window;
        Self {
            norm: Norm::new(&mut init.sub("norm"), channels, NormKind::Channel),
            lin_in: Linear::new(&mut init.sub("lin_in"), width, hidden, true),
            rnn: BiLstm::new(&mut init.sub("rnn"), hidden, hidden),
            lin_out: Linear::new(&mut init.sub("lin_out"), 2 * hidden, width, false),
            bias: init.zeros("out_bias", &[channels]),
            spec,
            channels,
        }
    }

    /// Sequence layout `[N, L, C]` in and out, residual included.
    pub fn forward_seq<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let len = g.shape(x)[1];
        let h = self.norm.forward_last(g, store, x);
        let h = g.unfold_seq(h, self.spec.window, self.spec.stride);
        let h = self.lin_in.forward(g, store, h);
        let h = self.rnn.forward(g, store, h);
        let h = self.lin_out.forward(g, store, h);
        let h = g.fold_seq(h, self.spec.window, self.spec.stride, len);
        let b = g.param(store, self.bias);
        let h = g.add_bias_trailing(h, b);
        g.add(x, h)
    }

    /// Feature-map layout `[B, C, T, F]` along `axis`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, axis: Axis) -> Var {
        let shape = g.shape(x).to_vec();
        let s = to_seq(g, x, axis);
        let y = self.forward_seq(g, store, s);
        from_seq(g, y, axis, &shape)
    }
}

/// Parallel branches along one axis, summed and globally normalised.
#[derive(Debug, Clone)]
pub struct MultiBranchStage {
    pub branches: Vec<BranchModule>,
    norm: Norm,
    pub axis: Axis,
}

impl MultiBranchStage {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &MstConfig, axis: Axis) -> Self {
        let branches = cfg
            .branches
            .iter()
            .map(|&spec| {
                let name = format!("branch_i{}_j{}", spec.window, spec.stride);
                BranchModule::new(&mut init.sub(&name), cfg.channels, cfg.hidden, spec)
            })
            .collect();
        Self {
            branches,
            norm: Norm::plain(cfg.channels, NormKind::Global),
            axis,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let s = to_seq(g, x, self.axis);
        let outs: Vec<Var> = self.branches.iter().map(|b| b.forward_seq(g, store, s)).collect();
        let sum = g.add_n(&outs);
        let y = from_seq(g, sum, self.axis, &shape);
        self.norm.forward(g, store, y)
    }
}

/// Multi-head self-attention over frames with full-band frame embeddings.
#[derive(Debug, Clone)]
pub struct FullBandAttention {
    norm: Norm,
    q: (Conv2d, PRelu),
    k: (Conv2d, PRelu),
    v: (Conv2d, PRelu),
    proj: (Conv2d, PRelu),
    heads: usize,
    qk_dim: usize,
}

impl FullBandAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &MstConfig) -> Self {
        let c = cfg.channels;
        let qk = cfg.heads * cfg.qk_dim;
        let mut pw = |name: &str, c_out: usize| {
            let mut s = init.sub(name);
            (
                Conv2d::new(&mut s.sub("conv"), c, c_out, (1, 1), (1, 1), true),
                PRelu::new(&mut s.sub("act")),
            )
        };
        let (q, k, v, proj) = (pw("query", qk), pw("key", qk), pw("value", c), pw("proj", c));
        Self {
            norm: Norm::new(&mut init.sub("norm"), c, NormKind::Channel),
            q,
            k,
            v,
            proj,
            heads: cfg.heads,
            qk_dim: cfg.qk_dim,
        }
    }

    fn heads_first<T: Scalar>(&self, g: &mut Graph<T>, x: Var, per_head: usize) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t, f) = (s[0], s[2], s[3]);
        let r = g.reshape(x, &[b, self.heads, per_head, t, f]);
        let p = g.permute(r, &[0, 1, 3, 2, 4]);
        g.reshape(p, &[b * self.heads, t, per_head * f])
    }

    /// Returns the output and the `[B*N, T, T]` attention weights.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Array3<T>) {
        let s = g.shape(x).to_vec();
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let h = self.norm.forward(g, store, x);
        let pw = |g: &mut Graph<T>, (conv, act): &(Conv2d, PRelu)| {
            let y = conv.forward(g, store, h);
            act.forward(g, store, y)
        };
        let (q, k, v) = (pw(g, &self.q), pw(g, &self.k), pw(g, &self.v));
        let q = self.heads_first(g, q, self.qk_dim);
        let k = self.heads_first(g, k, self.qk_dim);
        let v = self.heads_first(g, v, c / self.heads);
        let (o, weights) = g.attention(q, k, v);
        let o = g.reshape(o, &[b, self.heads, t, c / self.heads, f]);
        let o = g.permute(o, &[0, 1, 3, 2, 4]);
        let o = g.reshape(o, &[b, c, t, f]);
        let o = self.proj.0.forward(g, store, o);
        let o = self.proj.1.forward(g, store, o);
        (g.add(x, o), weights)
    }
}

#[derive(Debug, Clone)]
pub struct MstBlock {
    pub ifs: MultiBranchStage,
    pub sbt: MultiBranchStage,
    pub fbs: FullBandAttention,
}

impl MstBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &MstConfig) -> Self {
        Self {
            ifs: MultiBranchStage::new(&mut init.sub("ifs"), cfg, Axis::Frequency),
            sbt: MultiBranchStage::new(&mut init.sub("sbt"), cfg, Axis::Time),
            fbs: FullBandAttention::new(&mut init.sub("fbs"), cfg),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Array3<T>) {
        let y = self.ifs.forward(g, store, x);
        let y = self.sbt.forward(g, store, y);
        self.fbs.forward(g, store, y)
    }
}

/// `B` stacked blocks.
#[derive(Debug, Clone)]
pub struct Separator {
    pub blocks: Vec<MstBlock>,
    pub cfg: MstConfig,
}

impl Separator {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &MstConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| MstBlock::new(&mut init.sub(&format!("block{i}")), cfg))
            .collect();
        Ok(Self { blocks, cfg: cfg.clone() })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_probed(g, store, x)?.0)
    }

    /// Also returns each block's attention weights.
    pub fn forward_probed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Vec<Array3<T>>)> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.cfg.channels {
            return invalid(format!("separator input {s:?} is not [B, {}, T, F]", self.cfg.channels));
        }
        let mut y = x;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, w) = b.forward(g, store, y);
            y = out;
            weights.push(w);
        }
        Ok((y, weights))
    }
}

/// 1x1 convolution `C -> 2S`; channel `2s` is the real and `2s+1` the
/// imaginary part of speaker `s`.
#[derive(Debug, Clone)]
pub struct Decoder {
    conv: Conv2d,
    pub speakers: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, speakers: usize) -> Result<Self> {
        if speakers < 1 {
            return invalid("decoder needs at least one speaker");
        }
        Ok(Self {
            conv: Conv2d::new(&mut init.sub("conv"), channels, 2 * speakers, (1, 1), (1, 1), true),
            speakers,
        })
    }

    /// `[B, C, T, F]` -> `[B, 2S, T, F]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.conv.forward(g, store, x)
    }

    /// Splits a `[2S, T, F]` decoder output into per-speaker `[2, T, F]` spectra.
    pub fn split<T: Scalar>(out: &Array3<T>) -> Vec<Array3<T>> {
        let s = out.shape()[0] / 2;
        (0..s)
            .map(|i| out.slice(ndarray::s![2 * i..2 * i + 2, .., ..]).to_owned())
            .collect()
    }
}

/// Helper for tests and probes: a `[1, C, T, F]` array from a `[C, T, F]` one.
pub fn batch1<T: Scalar>(x: &Array3<T>) -> Array4<T> {
    x.clone().insert_axis(ndarray::Axis(0))
}
