//! Mixture materialisation and loading.
//!
//! `build_mix_dataset` writes one directory per utterance (`mix.wav`,
//! `s{i}.wav`, `mouth{i}.mroi`, optional `noise.wav`) plus a `dataset.jsonl`
//! index holding one metadata or error record per manifest entry.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use avsep_core::dsp::{mix_sources, read_wav, write_wav, WavFormat, Waveform};
use avsep_core::semantics::{read_mouths, write_mroi, MouthFrames, VIDEO_FPS};
use ndarray::s;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, PipelineError, Result};
use crate::manifest::MixManifestEntry;

pub const INDEX_FILE: &str = "dataset.jsonl";

/// Clean relative-level range (dB).
pub const CLEAN_SNR_RANGE: (f64, f64) = (-5.0, 5.0);
/// Noise level range for the noisy variant (dB below the clean mixture).
pub const NOISE_SNR_RANGE: (f64, f64) = (-5.0, 20.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixOptions {
    pub snr_range: (f64, f64),
    pub noise_snr_range: (f64, f64),
    pub seed: u64,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self {
            snr_range: CLEAN_SNR_RANGE,
            noise_snr_range: NOISE_SNR_RANGE,
            seed: 0,
        }
    }
}

fn check_range(r: (f64, f64), what: &str) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1) {
        return usage(format!("{what} range [{}, {}] is not an interval", r.0, r.1));
    }
    Ok(())
}

/// Generator for entry `index`; independent of how many entries precede it.
pub fn entry_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Gains for `speakers` sources: 0 dB for the first, uniform in `range` for the rest.
pub fn draw_gains<R: Rng>(rng: &mut R, speakers: usize, range: (f64, f64)) -> Vec<f64> {
    let mut g = vec![0.0; speakers];
    for v in g.iter_mut().skip(1) {
        *v = draw(rng, range);
    }
    g
}

pub fn draw<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub utterance_id: String,
    pub speakers: usize,
    pub gains_db: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<f64>,
    /// Peak-normalisation factor applied to every component.
    pub normalization: f64,
    pub samples: usize,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum IndexRecord {
    Ok(MixRecord),
    Error { utterance_id: String, error: String },
}

#[derive(Debug, Clone, Default)]
pub struct MixReport {
    pub written: Vec<MixRecord>,
    pub failed: Vec<(String, String)>,
}

fn crop(w: Waveform<f64>, len: usize, what: &str) -> std::result::Result<Waveform<f64>, String> {
    if w.len() < len {
        return Err(format!("{what} has {} samples, needs {len}", w.len()));
    }
    Ok(Waveform {
        samples: w.samples[..len].to_vec(),
        sample_rate: w.sample_rate,
    })
}

fn crop_mouths(m: MouthFrames, n: usize, what: &str) -> std::result::Result<MouthFrames, String> {
    if m.len() < n {
        return Err(format!("{what} has {} frames, needs {n}", m.len()));
    }
    MouthFrames::new(m.frames.slice(s![..n, .., ..]).to_owned()).map_err(|e| e.to_string())
}

fn build_entry(
    e: &MixManifestEntry,
    index: usize,
    out_dir: &Path,
    opts: &MixOptions,
) -> std::result::Result<MixRecord, String> {
    e.validate()?;
    let mut rng = entry_rng(opts.seed, index as u64);
    let first = read_wav::<f64>(&e.sources[0]).map_err(|err| err.to_string())?;
    let sr = first.sample_rate;
    let len = (e.duration * sr as f64).round() as usize;
    let frames = (e.duration * VIDEO_FPS as f64).round() as usize;
    let mut sources = vec![crop(first, len, "source 0")?];
    for (i, p) in e.sources.iter().enumerate().skip(1) {
        let w = read_wav::<f64>(p).map_err(|err| err.to_string())?;
        sources.push(crop(w, len, &format!("source {i}"))?);
    }
    let mouths = e
        .mouths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let m = read_mouths(p).map_err(|err| err.to_string())?;
            crop_mouths(m, frames, &format!("mouth stream {i}"))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    let gains = match &e.gains_db {
        Some(g) => g.clone(),
        None => draw_gains(&mut rng, sources.len(), opts.snr_range),
    };
    let noise = match &e.noise {
        Some(p) => {
            let w = crop(read_wav::<f64>(p).map_err(|err| err.to_string())?, len, "noise")?;
            let snr = e.noise_snr_db.unwrap_or_else(|| draw(&mut rng, opts.noise_snr_range));
            Some((w, snr))
        }
        None => None,
    };
    let mix = mix_sources(&sources, &gains, noise.as_ref().map(|(w, s)| (w, *s))).map_err(|err| err.to_string())?;
    let dir = out_dir.join(&e.utterance_id);
    let io = |r: avsep_core::Result<()>| r.map_err(|err| err.to_string());
    fs::create_dir_all(&dir).map_err(|err| err.to_string())?;
    io(write_wav(dir.join("mix.wav"), &mix.mixture, WavFormat::Float32))?;
    for (i, s) in mix.sources.iter().enumerate() {
        io(write_wav(dir.join(format!("s{i}.wav")), s, WavFormat::Float32))?;
    }
    for (i, m) in mouths.iter().enumerate() {
        io(write_mroi(dir.join(format!("mouth{i}.mroi")), m))?;
    }
    if let Some(n) = &mix.noise {
        io(write_wav(dir.join("noise.wav"), n, WavFormat::Float32))?;
    }
    Ok(MixRecord {
        utterance_id: e.utterance_id.clone(),
        speakers: sources.len(),
        gains_db: gains,
        noise_snr_db: noise.map(|(_, s)| s),
        normalization: mix.normalization,
        samples: len,
        sample_rate: sr,
    })
}

/// Materialises every manifest entry under `out_dir`. Entries that fail are
/// recorded in the index and skipped; the call fails only if all of them do.
pub fn build_mix_dataset(entries: &[MixManifestEntry], out_dir: impl AsRef<Path>, opts: &MixOptions) -> Result<MixReport> {
    check_range(opts.snr_range, "snr")?;
    check_range(opts.noise_snr_range, "noise snr")?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut index = fs::File::create(out_dir.join(INDEX_FILE))?;
    let mut report = MixReport::default();
    for (i, e) in entries.iter().enumerate() {
        let rec = match build_entry(e, i, out_dir, opts) {
            Ok(r) => {
                report.written.push(r.clone());
                IndexRecord::Ok(r)
            }
            Err(msg) => {
                log::warn!("{}: {msg}", e.utterance_id);
                report.failed.push((e.utterance_id.clone(), msg.clone()));
                IndexRecord::Error {
                    utterance_id: e.utterance_id.clone(),
                    error: msg,
                }
            }
        };
        writeln!(index, "{}", serde_json::to_string(&rec)?)?;
    }
    if report.written.is_empty() && !entries.is_empty() {
        return Err(PipelineError::AllEntriesFailed(entries.len()));
    }
    Ok(report)
}

/// One materialised utterance held in memory.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub mixture: Waveform<f64>,
    /// Scaled sources as mixed; they sum (with `noise`) to `mixture`.
    pub targets: Vec<Waveform<f64>>,
    pub noise: Option<Waveform<f64>>,
    pub mouths: Vec<MouthFrames>,
    pub record: MixRecord,
}

impl Example {
    pub fn speakers(&self) -> usize {
        self.targets.len()
    }

    /// Fresh gain offsets over the same targets (dynamic mixing); the noise
    /// level relative to the clean mixture is kept.
    pub fn remix<R: Rng>(&self, rng: &mut R, snr_range: (f64, f64)) -> Result<Example> {
        let gains = draw_gains(rng, self.speakers(), snr_range);
        let noise = self.noise.as_ref().zip(self.record.noise_snr_db);
        let mix = mix_sources(&self.targets, &gains, noise.map(|(w, s)| (w, s)))?;
        let mut record = self.record.clone();
        record.gains_db = gains;
        record.normalization = mix.normalization;
        Ok(Example {
            id: self.id.clone(),
            mixture: mix.mixture,
            targets: mix.sources,
            noise: mix.noise,
            mouths: self.mouths.clone(),
            record,
        })
    }
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<Vec<IndexRecord>> {
    let f = fs::File::open(dir.as_ref().join(INDEX_FILE))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PipelineError::Manifest { line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

pub fn utterance_dir(dir: impl AsRef<Path>, id: &str) -> PathBuf {
    dir.as_ref().join(id)
}

pub fn load_example(dir: impl AsRef<Path>, rec: &MixRecord) -> Result<Example> {
    let d = utterance_dir(dir, &rec.utterance_id);
    let noise_path = d.join("noise.wav");
    Ok(Example {
        id: rec.utterance_id.clone(),
        mixture: read_wav(d.join("mix.wav"))?,
        targets: (0..rec.speakers)
            .map(|i| read_wav(d.join(format!("s{i}.wav"))))
            .collect::<avsep_core::Result<_>>()?,
        noise: if noise_path.exists() { Some(read_wav(noise_path)?) } else { None },
        mouths: (0..rec.speakers)
            .map(|i| read_mouths(d.join(format!("mouth{i}.mroi"))))
            .collect::<avsep_core::Result<_>>()?,
        record: rec.clone(),
    })
}

/// Loads every successfully materialised utterance, in index order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Example>> {
    let dir = dir.as_ref();
    read_index(dir)?
        .iter()
        .filter_map(|r| match r {
            IndexRecord::Ok(m) => Some(m),
            IndexRecord::Error { .. } => None,
        })
        .map(|m| load_example(dir, m))
        .collect()
}
