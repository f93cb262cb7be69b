//! Multi-scale dilated convolutional encoder: complex spectrogram `[B, 2, T, F]`
//! to latent feature map `[B, C, T, F]`.
//!
//! Four parallel branches (1x1, and 3x3 at dilations 1, 2, 3) each produce
//! `C/4` channels; the concatenation passes through group norm and PReLU.

use ndarray::Array3;

use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Norm, PRelu};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Init, NormKind, ParamStore, Var};

pub const GROUP_NORM_GROUPS: usize = 8;

/// Latent map `[C, T, F]` for a single utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Group count used for a `c`-channel group norm.
pub fn groups_for(c: usize) -> Result<usize> {
    if c % GROUP_NORM_GROUPS != 0 {
        return Err(Error::Config(format!(
            "channel count {c} is not divisible by the group-norm group count {GROUP_NORM_GROUPS}"
        )));
    }
    Ok(GROUP_NORM_GROUPS)
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    branches: Vec<Conv2d>,
    norm: Norm,
    act: PRelu,
    pub channels: usize,
}

impl AudioEncoder {
    pub const DILATIONS: [(usize, usize); 4] = [(1, 1), (1, 1), (2, 2), (3, 3)];

    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!("encoder channels {channels} must be a positive multiple of 4")));
        }
        let groups = groups_for(channels)?;
        let branches = Self::DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let k = if i == 0 { (1, 1) } else { (3, 3) };
                Conv2d::new(&mut init.sub(&format!("branch{i}")), 2, channels / 4, k, d, true)
            })
            .collect();
        Ok(Self {
            branches,
            norm: Norm::new(&mut init.sub("norm"), channels, NormKind::Group(groups)),
            act: PRelu::new(&mut init.sub("act")),
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, spec: Var) -> Result<Var> {
        let s = g.shape(spec);
        if s.len() != 4 || s[1] != 2 {
            return invalid(format!("encoder input must be [B, 2, T, F], got {s:?}"));
        }
        let outs: Vec<Var> = self.branches.iter().map(|b| b.forward(g, store, spec)).collect();
        let y = g.concat(&outs, 1);
        let y = self.norm.forward(g, store, y);
        Ok(self.act.forward(g, store, y))
    }
}
