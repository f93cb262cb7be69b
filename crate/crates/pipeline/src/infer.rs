//! Separation, evaluation and the missing-frame sweep.
//!
//! Metric records are tab-separated lines
//! `utterance_id  S  si_sdri  sdri  permutation` with comma-joined
//! per-speaker values in reference order; `permutation[i]` is the reference
//! matched to estimate `i`. SDR is the plain, unfiltered ratio.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use avsep_core::dsp::{read_wav, write_wav, WavFormat, Waveform};
use avsep_core::model::Model;
use avsep_core::objectives::{pit, sdr, si_sdr};
use avsep_core::semantics::{occlude, read_mouths, MouthFrames};
use avsep_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{usage, PipelineError, Result};

/// Missing-frame counts of the occlusion sweep.
pub const SWEEP_LEVELS: [usize; 7] = [0, 5, 10, 20, 30, 40, 50];

/// `spk<i>:<n>`: hide `n` consecutive frames of speaker `i`'s mouth stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcclusionSpec {
    pub speaker: usize,
    pub n_missing: usize,
}

impl FromStr for OcclusionSpec {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || PipelineError::Usage(format!("occlusion {s:?} is not spk<i>:<frames>"));
        let (spk, n) = s.split_once(':').ok_or_else(bad)?;
        let speaker = spk.strip_prefix("spk").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let n_missing = n.parse().map_err(|_| bad())?;
        Ok(Self { speaker, n_missing })
    }
}

/// Seed used to occlude speaker `speaker` of a run seeded with `seed`.
pub fn occlusion_seed(seed: u64, speaker: usize) -> u64 {
    seed ^ (speaker as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn apply_occlusions(mouths: &[MouthFrames], specs: &[OcclusionSpec], seed: u64) -> Result<Vec<MouthFrames>> {
    let mut out = mouths.to_vec();
    for sp in specs {
        let m = out
            .get(sp.speaker)
            .ok_or_else(|| PipelineError::Usage(format!("no mouth stream for speaker {}", sp.speaker)))?;
        out[sp.speaker] = occlude(m, sp.n_missing, occlusion_seed(seed, sp.speaker))?;
    }
    Ok(out)
}

/// Runs `model` on files and writes `spk{i}.wav` into `out_dir`.
pub fn separate_files<T: Scalar>(
    model: &Model<T>,
    mixture: &Path,
    mouths: &[PathBuf],
    speakers: usize,
    occlusions: &[OcclusionSpec],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !(2..=4).contains(&speakers) {
        return Err(avsep_core::Error::InvalidInput(format!("{speakers} speakers, expected 2 to 4")).into());
    }
    if speakers != model.cfg.speakers {
        return Err(avsep_core::Error::InvalidInput(format!(
            "model separates {} speakers, {speakers} requested",
            model.cfg.speakers
        ))
        .into());
    }
    if !model.cfg.audio_only && mouths.len() != speakers {
        return Err(avsep_core::Error::InvalidInput(format!("{} mouth streams for {speakers} speakers", mouths.len())).into());
    }
    let mix: Waveform<T> = read_wav(mixture)?;
    let frames = mouths.iter().map(read_mouths).collect::<avsep_core::Result<Vec<_>>>()?;
    let frames = apply_occlusions(&frames, occlusions, seed)?;
    let sep = model.separate(&mix, &frames)?;
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (i, w) in sep.estimates.iter().enumerate() {
        let p = out_dir.join(format!("spk{i}.wav"));
        write_wav(&p, w, WavFormat::Float32)?;
        paths.push(p);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttMetrics {
    pub utterance_id: String,
    pub speakers: usize,
    pub si_sdri: Vec<f64>,
    pub sdri: Vec<f64>,
    pub permutation: Vec<usize>,
}

impl UttMetrics {
    pub fn mean_si_sdri(&self) -> f64 {
        mean(&self.si_sdri)
    }

    pub fn mean_sdri(&self) -> f64 {
        mean(&self.sdri)
    }

    pub fn line(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
        let perm = self.permutation.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.utterance_id,
            self.speakers,
            join(&self.si_sdri),
            join(&self.sdri),
            perm
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// PIT-aligned improvements of `ests` over the mixture of `ex`.
pub fn score(ests: &[Vec<f64>], ex: &Example) -> Result<UttMetrics> {
    let refs: Vec<&[f64]> = ex.targets.iter().map(|t| t.samples.as_slice()).collect();
    let est_refs: Vec<&[f64]> = ests.iter().map(Vec::as_slice).collect();
    let p = pit(&est_refs, &refs, |e, r| Ok(-si_sdr(e, r)?))?;
    let mix = &ex.mixture.samples;
    let mut si_sdri = vec![0.0; refs.len()];
    let mut sdri = vec![0.0; refs.len()];
    for (i, &j) in p.permutation.iter().enumerate() {
        si_sdri[j] = si_sdr(est_refs[i], refs[j])? - si_sdr(mix, refs[j])?;
        sdri[j] = sdr(est_refs[i], refs[j])? - sdr(mix, refs[j])?;
    }
    Ok(UttMetrics {
        utterance_id: ex.id.clone(),
        speakers: refs.len(),
        si_sdri,
        sdri,
        permutation: p.permutation,
    })
}

/// Model estimates for one utterance with the given mouth streams.
pub fn estimate<T: Scalar>(model: &Model<T>, ex: &Example, mouths: &[MouthFrames]) -> Result<Vec<Vec<f64>>> {
    let mix: Waveform<T> = ex.mixture.cast();
    let sep = model.separate(&mix, mouths)?;
    Ok(sep.estimates.iter().map(|w| w.to_f64_vec()).collect())
}

/// Where estimates come from.
pub enum Estimates<'a, T: Scalar> {
    Model(&'a Model<T>),
    /// `<dir>/<utterance_id>/s{i}.wav`, the layout of a materialised dataset.
    Dir(&'a Path),
}

/// Which mouth streams the sweep occludes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepTarget {
    Speaker(usize),
    Both,
}

impl FromStr for SweepTarget {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "both" || s == "all" {
            return Ok(Self::Both);
        }
        s.strip_prefix("spk")
            .and_then(|i| i.parse().ok())
            .map(Self::Speaker)
            .ok_or_else(|| PipelineError::Usage(format!("sweep target {s:?} is not spk<i> or both")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_missing: usize,
    pub mean_si_sdri: f64,
    pub mean_sdri: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub utterances: usize,
    pub mean_si_sdri: f64,
    pub mean_sdri: f64,
    pub sdr: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub occlusion: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<UttMetrics>,
    pub summary: Summary,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub sweep: Option<SweepTarget>,
    pub seed: u64,
    /// Write PIT-aligned estimates as `<dir>/<id>/s{i}.wav`.
    pub export: Option<PathBuf>,
}

fn sweep_mouths(ex: &Example, index: usize, target: SweepTarget, n: usize, seed: u64) -> Result<Vec<MouthFrames>> {
    let speakers: Vec<usize> = match target {
        SweepTarget::Both => (0..ex.speakers()).collect(),
        SweepTarget::Speaker(s) if s < ex.speakers() => vec![s],
        SweepTarget::Speaker(s) => return usage(format!("{} has no speaker {s}", ex.id)),
    };
    let specs: Vec<OcclusionSpec> = speakers.into_iter().map(|speaker| OcclusionSpec { speaker, n_missing: n }).collect();
    apply_occlusions(&ex.mouths, &specs, seed ^ (index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))
}

fn summarise(rows: &[UttMetrics]) -> (f64, f64) {
    let si: Vec<f64> = rows.iter().map(UttMetrics::mean_si_sdri).collect();
    let sd: Vec<f64> = rows.iter().map(UttMetrics::mean_sdri).collect();
    (mean(&si), mean(&sd))
}

pub fn evaluate<T: Scalar>(source: &Estimates<'_, T>, data: &[Example], opts: &EvalOptions) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(data.len());
    for ex in data {
        let ests = match source {
            Estimates::Model(m) => estimate(m, ex, &ex.mouths)?,
            Estimates::Dir(d) => (0..ex.speakers())
                .map(|i| Ok(read_wav::<f64>(d.join(&ex.id).join(format!("s{i}.wav")))?.samples))
                .collect::<Result<Vec<_>>>()?,
        };
        let m = score(&ests, ex)?;
        if let Some(dir) = &opts.export {
            let d = dir.join(&ex.id);
            fs::create_dir_all(&d)?;
            for (i, &j) in m.permutation.iter().enumerate() {
                let w = Waveform {
                    samples: ests[i].clone(),
                    sample_rate: ex.mixture.sample_rate,
                };
                write_wav(d.join(format!("s{j}.wav")), &w, WavFormat::Float32)?;
            }
        }
        rows.push(m);
    }
    let (mean_si_sdri, mean_sdri) = summarise(&rows);
    let mut occlusion = Vec::new();
    if let Some(target) = opts.sweep {
        let Estimates::Model(model) = source else {
            return usage("the occlusion sweep needs a model");
        };
        for n in SWEEP_LEVELS {
            let mut level = Vec::with_capacity(data.len());
            for (i, ex) in data.iter().enumerate() {
                let mouths = sweep_mouths(ex, i, target, n, opts.seed)?;
                level.push(score(&estimate(model, ex, &mouths)?, ex)?);
            }
            let (si, sd) = summarise(&level);
            occlusion.push(SweepRow {
                n_missing: n,
                mean_si_sdri: si,
                mean_sdri: sd,
            });
        }
    }
    Ok(EvalReport {
        summary: Summary {
            utterances: rows.len(),
            mean_si_sdri,
            mean_sdri,
            sdr: "unfiltered".into(),
            occlusion,
        },
        rows,
    })
}

/// `metrics.tsv`, `summary.json` and, after a sweep, `occlusion.tsv`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = String::from("# sdr=unfiltered\n# utterance_id\tS\tsi_sdri\tsdri\tpermutation\n");
    for r in &report.rows {
        lines.push_str(&r.line());
        lines.push('\n');
    }
    fs::write(dir.join("metrics.tsv"), lines)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary)?)?;
    if !report.summary.occlusion.is_empty() {
        fs::write(dir.join("occlusion.tsv"), occlusion_table(&report.summary.occlusion))?;
    }
    Ok(())
}

pub fn occlusion_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("n_missing\tsi_sdri\tsdri\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}", r.n_missing, r.mean_si_sdri, r.mean_sdri);
    }
    s
}
