//! Speaker-wise fusion of the audio feature map with per-speaker semantic
//! streams.
//!
//! Each stream `[T1, Cv]` is projected to `C` channels, linearly interpolated
//! (align-corners) to `T` frames and broadcast along frequency. Aligned
//! streams are kept compact as `[B, C, T]` and only broadcast when added to a
//! `[B, C, T, F]` map.
//!
//! For `S` speakers the fusion forms `S` pairwise maps `f(Y, L_i)` with one
//! shared pointwise MLP, one joint map `g(Y, sum_i L_i)` with a second MLP,
//! and reduces `[Y, f(Y,L_1), .., f(Y,L_S), g]` (`(S+2)C` channels) with a
//! 1x1 convolution, group norm and PReLU.

use ndarray::{Array2, Array3};

use crate::audio_encoder::groups_for;
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Linear, Norm, PRelu};
use crate::scalar::Scalar;
use crate::semantics::SemanticStream;
use crate::tensor::{Graph, Init, NormKind, ParamStore, Var};

/// A speaker stream aligned to the feature-map grid. Stored as `[C, T]`;
/// the value at every frequency bin is the same.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSemantics<T> {
    pub data: Array2<T>,
    pub bins: usize,
}

impl<T: Scalar> AlignedSemantics<T> {
    /// Explicit `[C, T, F]` tensor.
    pub fn expand(&self) -> Array3<T> {
        let (c, t) = self.data.dim();
        Array3::from_shape_fn((c, t, self.bins), |(i, j, _)| self.data[[i, j]])
    }
}

/// Linear interpolation matrix `[t, t1]` with aligned end points.
pub fn interp_matrix<T: Scalar>(t1: usize, t: usize) -> Result<Array2<T>> {
    if t1 < 2 {
        return invalid(format!("need at least 2 semantic frames to interpolate, got {t1}"));
    }
    if t < t1 {
        return invalid(format!("cannot interpolate {t1} frames down to {t}"));
    }
    let mut m = Array2::zeros((t, t1));
    for j in 0..t {
        let pos = if t == 1 { 0.0 } else { j as f64 * (t1 - 1) as f64 / (t - 1) as f64 };
        let lo = (pos.floor() as usize).min(t1 - 1);
        let frac = pos - lo as f64;
        m[[j, lo]] = T::lit(1.0 - frac);
        if frac > 0.0 {
            m[[j, lo + 1]] = T::lit(frac);
        }
    }
    Ok(m)
}

/// Projection `Cv -> C` followed by temporal interpolation.
#[derive(Debug, Clone)]
pub struct SemanticAligner {
    proj: Linear,
    pub channels: usize,
}

impl SemanticAligner {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cv: usize, channels: usize) -> Self {
        Self {
            proj: Linear::new(&mut init.sub("proj"), cv, channels, true),
            channels,
        }
    }

    /// `stream: [T1, Cv]` -> `[C, T]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, stream: Var, frames: usize) -> Result<Var> {
        let t1 = g.shape(stream)[0];
        let m = g.constant(interp_matrix::<T>(t1, frames)?.into_dyn());
        let p = self.proj.forward(g, store, stream);
        let y = g.matmul(m, p);
        Ok(g.permute(y, &[1, 0]))
    }

    pub fn align<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        l: &SemanticStream<T>,
        frames: usize,
        bins: usize,
    ) -> Result<AlignedSemantics<T>> {
        let mut g = Graph::inference();
        let x = g.input(l.features.clone().into_dyn());
        let y = self.forward(&mut g, store, x, frames)?;
        Ok(AlignedSemantics {
            data: g.value(y).clone().into_dimensionality().unwrap(),
            bins,
        })
    }
}

/// Two-layer pointwise MLP over `[Y; L]`. The `L` half of the first layer
/// runs on the compact `[B, C, T]` stream and is broadcast along frequency.
#[derive(Debug, Clone)]
struct PairMlp {
    w_y: Conv2d,
    w_l: Linear,
    act: PRelu,
    out: Conv2d,
}

impl PairMlp {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize) -> Self {
        Self {
            w_y: Conv2d::new(&mut init.sub("in_y"), c, c, (1, 1), (1, 1), true),
            w_l: Linear::new(&mut init.sub("in_l"), c, c, false),
            act: PRelu::new(&mut init.sub("act")),
            out: Conv2d::new(&mut init.sub("out"), c, c, (1, 1), (1, 1), true),
        }
    }

    /// `yh`: the precomputed `W_y Y + b` term; `l: [B, C, T]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, yh: Var, l: Var) -> Var {
        let lt = g.permute(l, &[0, 2, 1]);
        let lh = self.w_l.forward(g, store, lt);
        let lh = g.permute(lh, &[0, 2, 1]);
        let h = g.add_broadcast_trailing(yh, lh);
        let h = self.act.forward(g, store, h);
        self.out.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct SpFusion {
    pair: PairMlp,
    joint: PairMlp,
    reduce: Conv2d,
    norm: Norm,
    act: PRelu,
    pub channels: usize,
    pub speakers: usize,
}

impl SpFusion {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, speakers: usize) -> Result<Self> {
        if !(1..=4).contains(&speakers) {
            return invalid(format!("speaker count {speakers} outside 1..=4"));
        }
        let groups = groups_for(channels)?;
        Ok(Self {
            pair: PairMlp::new(&mut init.sub("pair"), channels),
            joint: PairMlp::new(&mut init.sub("joint"), channels),
            reduce: Conv2d::new(&mut init.sub("reduce"), (speakers + 2) * channels, channels, (1, 1), (1, 1), true),
            norm: Norm::new(&mut init.sub("norm"), channels, NormKind::Group(groups)),
            act: PRelu::new(&mut init.sub("act")),
            channels,
            speakers,
        })
    }

    /// The `(S+2)C`-channel tensor fed to the reduction convolution.
    /// `y: [B, C, T, F]`, `aligned[i]: [B, C, T]`.
    pub fn pre_reduction<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, y: Var, aligned: &[Var]) -> Result<Var> {
        if aligned.len() != self.speakers {
            return invalid(format!("fusion built for {} speakers, got {} streams", self.speakers, aligned.len()));
        }
        let ys = g.shape(y).to_vec();
        if ys.len() != 4 || ys[1] != self.channels {
            return invalid(format!("feature map {ys:?} does not have {} channels", self.channels));
        }
        for &l in aligned {
            if g.shape(l) != &ys[..3] {
                return invalid(format!("aligned stream {:?} does not match feature map {ys:?}", g.shape(l)));
            }
        }
        let yh_pair = self.pair.w_y.forward(g, store, y);
        let mut parts = vec![y];
        for &l in aligned {
            parts.push(self.pair.forward(g, store, yh_pair, l));
        }
        let sum = g.add_n(aligned);
        let yh_joint = self.joint.w_y.forward(g, store, y);
        parts.push(self.joint.forward(g, store, yh_joint, sum));
        Ok(g.concat(&parts, 1))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, y: Var, aligned: &[Var]) -> Result<Var> {
        let cat = self.pre_reduction(g, store, y, aligned)?;
        let r = self.reduce.forward(g, store, cat);
        let r = self.norm.forward(g, store, r);
        Ok(self.act.forward(g, store, r))
    }
}
