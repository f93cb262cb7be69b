#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use avsep::dataset::{build_mix_dataset, load_dataset, Example, MixOptions};
use avsep::manifest::{write_manifest, MixManifestEntry};
use avsep::synth::draw_mouths;
use avsep_core::dsp::{write_wav, StftConfig, WavFormat, Waveform};
use avsep_core::model::ModelConfig;
use avsep_core::semantics::write_mroi;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SR: u32 = 16_000;

/// Writes `n` utterances of `dur` seconds (tone pairs with noise) plus a manifest.
pub fn small_sources(dir: &Path, n: usize, dur: f64, speakers: usize, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let len = (dur * SR as f64).round() as usize;
    let frames = (dur * 25.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for u in 0..n {
        let id = format!("u{u}");
        let (mut sources, mut mouths) = (Vec::new(), Vec::new());
        for s in 0..speakers {
            let f = rng.gen_range(200.0..2000.0);
            let x: Vec<f64> = (0..len)
                .map(|k| 0.3 * (2.0 * PI * f * k as f64 / SR as f64).sin() + 0.01 * rng.gen_range(-1.0..1.0))
                .collect();
            let w = format!("{id}_{s}.wav");
            write_wav(dir.join(&w), &Waveform::new(x, SR).unwrap(), WavFormat::Float32).unwrap();
            let m = format!("{id}_{s}.mroi");
            let rate = rng.gen_range(2.0..5.0);
            write_mroi(dir.join(&m), &draw_mouths(frames, |t| (rate * t).sin().abs(), s, &mut rng)).unwrap();
            sources.push(PathBuf::from(w));
            mouths.push(PathBuf::from(m));
        }
        entries.push(MixManifestEntry {
            utterance_id: id,
            sources,
            mouths,
            gains_db: None,
            noise: None,
            noise_snr_db: None,
            duration: dur,
        });
    }
    let p = dir.join("manifest.jsonl");
    write_manifest(&p, &entries).unwrap();
    p
}

/// Materialised small dataset, loaded.
pub fn small_dataset(root: &Path, n: usize, dur: f64, speakers: usize, seed: u64) -> Vec<Example> {
    let m = small_sources(&root.join("src"), n, dur, speakers, seed);
    let entries = avsep::manifest::read_manifest(&m).unwrap();
    let data = root.join("data");
    build_mix_dataset(&entries, &data, &MixOptions { seed, ..MixOptions::default() }).unwrap();
    load_dataset(&data).unwrap()
}

/// Tiny network with a coarse STFT so short clips stay cheap.
pub fn small_model(speakers: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.speakers = speakers;
    cfg.stft = StftConfig {
        window_ms: 8.0,
        hop_ms: 2.0,
        ..StftConfig::default()
    };
    cfg
}
