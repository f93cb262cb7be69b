//! Procedural corpus of tone/chirp "speakers" with matching mouth streams.
//!
//! Speaker 0 of each utterance is a harmonic tone, speaker 1 a linear chirp;
//! both are gated by a syllable-rate envelope, and the mouth opening drawn in
//! each 88x88 frame follows that envelope.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use avsep_core::dsp::{write_wav, WavFormat, Waveform, DEFAULT_SAMPLE_RATE};
use avsep_core::semantics::{write_mroi, MouthFrames, MOUTH_SIZE, VIDEO_FPS};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::entry_rng;
use crate::error::Result;
use crate::manifest::{write_manifest, MixManifestEntry, DEFAULT_DURATION_SECS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy)]
struct Envelope {
    rate: f64,
    phase: f64,
    floor: f64,
}

impl Envelope {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            rate: rng.gen_range(2.5..5.0),
            phase: rng.gen_range(0.0..2.0 * PI),
            floor: rng.gen_range(0.05..0.2),
        }
    }

    fn at(&self, t: f64) -> f64 {
        let c = 0.5 * (1.0 - (2.0 * PI * self.rate * t + self.phase).cos());
        self.floor + (1.0 - self.floor) * c * c
    }
}

fn harmonic(len: usize, sr: f64, rng: &mut ChaCha8Rng, env: &Envelope) -> Vec<f64> {
    let f0 = rng.gen_range(110.0..200.0);
    let vib = rng.gen_range(0.0..3.0);
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            phase += 2.0 * PI * (f0 + vib * (2.0 * PI * 5.0 * t).sin()) / sr;
            let v: f64 = (1..=5).map(|k| (k as f64 * phase).sin() / k as f64).sum();
            0.2 * env.at(t) * v
        })
        .collect()
}

fn chirp(len: usize, sr: f64, rng: &mut ChaCha8Rng, env: &Envelope) -> Vec<f64> {
    let f_start = rng.gen_range(400.0..800.0);
    let f_end = rng.gen_range(1200.0..2400.0);
    let dur = len as f64 / sr;
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            phase += 2.0 * PI * (f_start + (f_end - f_start) * t / dur) / sr;
            0.3 * env.at(t) * phase.sin()
        })
        .collect()
}

/// Mouth frames whose opening follows `env`; `speaker` changes the lip width.
pub fn draw_mouths(frames: usize, env: impl Fn(f64) -> f64, speaker: usize, rng: &mut ChaCha8Rng) -> MouthFrames {
    let n = MOUTH_SIZE;
    let mut out = Array3::<u8>::zeros((frames, n, n));
    let texture: Vec<i32> = (0..n * n).map(|_| rng.gen_range(-8..=8)).collect();
    let (cx, cy) = (n as f64 / 2.0, n as f64 * 0.55);
    let rx = 22.0 + 6.0 * speaker as f64;
    for t in 0..frames {
        let open = env((t as f64 + 0.5) / VIDEO_FPS as f64);
        let ry = 2.0 + 16.0 * open;
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inner = dx * dx + dy * dy;
                let lip = dx * dx + (y as f64 - cy).powi(2) / (ry + 5.0).powi(2);
                let base = if inner <= 1.0 {
                    30
                } else if lip <= 1.2 {
                    115
                } else {
                    170
                };
                out[[t, y, x]] = (base + texture[y * n + x]).clamp(0, 255) as u8;
            }
        }
    }
    MouthFrames::new(out).expect("square frames")
}

/// Writes `utterances` two-speaker utterances (sources and mouth files) and a
/// manifest under `out_dir`; returns the manifest path.
pub fn synth_corpus(out_dir: impl AsRef<Path>, utterances: usize, seed: u64) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let sr = DEFAULT_SAMPLE_RATE;
    let len = (DEFAULT_DURATION_SECS * sr as f64) as usize;
    let frames = (DEFAULT_DURATION_SECS * VIDEO_FPS as f64) as usize;
    let mut entries = Vec::with_capacity(utterances);
    for u in 0..utterances {
        let mut rng = entry_rng(seed, u as u64);
        let id = format!("utt{u:03}");
        let mut sources = Vec::new();
        let mut mouths = Vec::new();
        for spk in 0..2 {
            let env = Envelope::random(&mut rng);
            let samples = if spk == 0 {
                harmonic(len, sr as f64, &mut rng, &env)
            } else {
                chirp(len, sr as f64, &mut rng, &env)
            };
            let wav = out_dir.join(format!("{id}_s{spk}.wav"));
            write_wav(&wav, &Waveform::new(samples, sr)?, WavFormat::Float32)?;
            let mroi = out_dir.join(format!("{id}_s{spk}.mroi"));
            write_mroi(&mroi, &draw_mouths(frames, |t| env.at(t), spk, &mut rng))?;
            sources.push(PathBuf::from(wav.file_name().unwrap()));
            mouths.push(PathBuf::from(mroi.file_name().unwrap()));
        }
        entries.push(MixManifestEntry {
            utterance_id: id,
            sources,
            mouths,
            gains_db: None,
            noise: None,
            noise_snr_db: None,
            duration: DEFAULT_DURATION_SECS,
        });
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
