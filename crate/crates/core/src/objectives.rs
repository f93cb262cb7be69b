//! Training objectives and evaluation metrics.
//!
//! All reductions accumulate in `f64` regardless of the sample type. SI-SDR
//! uses the scale-invariant numerator `|alpha s|^2` with `alpha = <s, s_hat> / <s, s>`,
//! and both SI-SDR and SDR carry a relative floor of `1e-12`, which bounds
//! them to roughly `[-120, 120]` dB.

use ndarray::Array3;

use crate::dsp::Stft;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Relative floor on every log-ratio denominator.
pub const EPS_REL: f64 = 1e-12;
/// Value reported for an all-zero estimate.
pub const SI_SDR_FLOOR_DB: f64 = -120.0;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap()).sum()
}

fn check_pair<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    if est.len() != reference.len() {
        return invalid(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        ));
    }
    let ss = dot(reference, reference);
    if ss == 0.0 {
        return invalid("reference is all zeros");
    }
    Ok(ss)
}

/// Scale-invariant SDR in dB.
pub fn si_sdr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    Ok(si_sdr_with_grad(est, reference, false)?.0)
}

/// SI-SDR and, optionally, its gradient with respect to `est`.
pub fn si_sdr_with_grad<T: Scalar>(est: &[T], reference: &[T], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let ss = check_pair(est, reference)?;
    let pp = dot(est, est);
    if pp == 0.0 {
        let grad = want_grad.then(|| vec![0.0; est.len()]);
        return Ok((SI_SDR_FLOOR_DB, grad));
    }
    let d = dot(reference, est);
    let alpha = d / ss;
    let num = alpha * alpha * ss;
    let den: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, s)| {
            let r = e.to_f64().unwrap() - alpha * s.to_f64().unwrap();
            r * r
        })
        .sum();
    let eps = EPS_REL * pp;
    let value = DB * ((num + eps).ln() - (den + eps).ln());
    let grad = want_grad.then(|| {
        let (a, b) = (1.0 / (num + eps), 1.0 / (den + eps));
        est.iter()
            .zip(reference)
            .map(|(e, s)| {
                let (e, s) = (e.to_f64().unwrap(), s.to_f64().unwrap());
                let dnum = 2.0 * alpha * s;
                let deps = 2.0 * EPS_REL * e;
                let dden = 2.0 * e - 2.0 * alpha * s;
                DB * ((dnum + deps) * a - (dden + deps) * b)
            })
            .collect()
    });
    Ok((value, grad))
}

/// SI-SDR with the reference energy `|s|^2` in the numerator instead of
/// `|alpha s|^2`. Not scale-invariant in the estimate; kept for comparison.
pub fn si_sdr_reference_numerator<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    let ss = check_pair(est, reference)?;
    let alpha = dot(reference, est) / ss;
    let den: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, s)| (e.to_f64().unwrap() - alpha * s.to_f64().unwrap()).powi(2))
        .sum();
    Ok(10.0 * (ss / (den + EPS_REL * ss)).log10())
}

/// Plain SDR `10 log10(|s|^2 / |s - s_hat|^2)` without distortion filtering.
pub fn sdr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    let ss = check_pair(est, reference)?;
    let err: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, s)| (s.to_f64().unwrap() - e.to_f64().unwrap()).powi(2))
        .sum();
    Ok(10.0 * (ss / (err + EPS_REL * ss)).log10())
}

pub fn si_sdri<T: Scalar>(est: &[T], reference: &[T], mixture: &[T]) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mixture, reference)?)
}

pub fn sdri<T: Scalar>(est: &[T], reference: &[T], mixture: &[T]) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mixture, reference)?)
}

/// Magnitude loss: `| |STFT(est)| - |STFT(ref)| |_1 / | |STFT(ref)| |_1`.
pub fn l_mag<T: Scalar>(est: &[T], reference: &[T], plan: &Stft<T>) -> Result<f64> {
    Ok(l_mag_with_grad(est, reference, plan, false)?.0)
}

pub fn l_mag_with_grad<T: Scalar>(
    est: &[T],
    reference: &[T],
    plan: &Stft<T>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_pair(est, reference)?;
    let se = plan.forward(est)?;
    let sr = plan.forward(reference)?;
    let (frames, bins) = (se.shape()[1], se.shape()[2]);
    let mut norm = 0.0;
    let mut total = 0.0;
    let mut gspec = want_grad.then(|| Array3::<T>::zeros((2, frames, bins)));
    let mut signs = Vec::with_capacity(if want_grad { frames * bins } else { 0 });
    for t in 0..frames {
        for k in 0..bins {
            let (er, ei) = (se[[0, t, k]].to_f64().unwrap(), se[[1, t, k]].to_f64().unwrap());
            let (rr, ri) = (sr[[0, t, k]].to_f64().unwrap(), sr[[1, t, k]].to_f64().unwrap());
            let me = (er * er + ei * ei).sqrt();
            let mr = (rr * rr + ri * ri).sqrt();
            norm += mr;
            total += (me - mr).abs();
            if want_grad {
                signs.push((me - mr).signum() * if me > 0.0 { 1.0 / me } else { 0.0 });
            }
        }
    }
    if norm == 0.0 {
        return invalid("reference magnitude spectrum is all zeros");
    }
    let value = total / norm;
    let grad = gspec.as_mut().map(|gs| {
        for t in 0..frames {
            for k in 0..bins {
                let w = signs[t * bins + k] / norm;
                gs[[0, t, k]] = T::lit(w * se[[0, t, k]].to_f64().unwrap());
                gs[[1, t, k]] = T::lit(w * se[[1, t, k]].to_f64().unwrap());
            }
        }
        plan.forward_adjoint(gs, est.len())
            .into_iter()
            .map(|v| v.to_f64().unwrap())
            .collect()
    });
    Ok((value, grad))
}

/// `L = L_mag + L_sisdr` with `L_sisdr = -si_sdr`.
pub fn total_loss<T: Scalar>(est: &[T], reference: &[T], plan: &Stft<T>) -> Result<f64> {
    Ok(total_loss_with_grad(est, reference, plan, false)?.0)
}

pub fn total_loss_with_grad<T: Scalar>(
    est: &[T],
    reference: &[T],
    plan: &Stft<T>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (mag, gm) = l_mag_with_grad(est, reference, plan, want_grad)?;
    let (sisdr, gs) = si_sdr_with_grad(est, reference, want_grad)?;
    let grad = gm.zip(gs).map(|(a, b)| a.iter().zip(&b).map(|(x, y)| x - y).collect());
    Ok((mag - sisdr, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    pub loss: f64,
    /// `permutation[i]` is the reference assigned to estimate `i`.
    pub permutation: Vec<usize>,
    /// `per_pair[i][j]` is the loss of estimate `i` against reference `j`.
    pub per_pair: Vec<Vec<f64>>,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Selects the permutation minimising the mean pairwise loss from a
/// precomputed `S x S` loss matrix; ties go to the lexicographically first.
pub fn pit_from_matrix(per_pair: Vec<Vec<f64>>) -> PitResult {
    let s = per_pair.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(s) {
        let loss = perm.iter().enumerate().map(|(i, &j)| per_pair[i][j]).sum::<f64>() / s as f64;
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, perm));
        }
    }
    let (loss, permutation) = best.expect("at least one permutation");
    PitResult {
        loss,
        permutation,
        per_pair,
    }
}

/// Permutation-invariant loss by exhaustive search over all `S!` assignments.
pub fn pit<W, F>(ests: &[W], refs: &[W], mut loss_fn: F) -> Result<PitResult>
where
    F: FnMut(&W, &W) -> Result<f64>,
{
    if ests.len() != refs.len() {
        return invalid(format!("{} estimates for {} references", ests.len(), refs.len()));
    }
    if ests.is_empty() {
        return invalid("no signals to align");
    }
    let mut per_pair = Vec::with_capacity(ests.len());
    for e in ests {
        per_pair.push(refs.iter().map(|r| loss_fn(e, r)).collect::<Result<Vec<f64>>>()?);
    }
    Ok(pit_from_matrix(per_pair))
}

/// PIT over [`total_loss`], returning the gradient of the selected mean loss
/// with respect to every estimate.
pub fn pit_total_loss_with_grad<T: Scalar>(
    ests: &[&[T]],
    refs: &[&[T]],
    plan: &Stft<T>,
) -> Result<(PitResult, Vec<Vec<f64>>)> {
    let result = pit(ests, refs, |e, r| total_loss(e, r, plan))?;
    let s = ests.len() as f64;
    let grads = result
        .permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let (_, g) = total_loss_with_grad(ests[i], refs[j], plan, true)?;
            Ok(g.unwrap().into_iter().map(|v| v / s).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((result, grads))
}
