use avsep_core::dsp::*;
use avsep_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tone(len: usize, hz: f64) -> Waveform<f64> {
    let s = (0..len)
        .map(|n| (2.0 * std::f64::consts::PI * hz * n as f64 / 16000.0).sin())
        .collect();
    Waveform::new(s, 16000).unwrap()
}

fn power_db(a: &Waveform<f64>, b: &Waveform<f64>) -> f64 {
    10.0 * (a.power() / b.power()).log10()
}

/// Direct DFT of each reflection-padded, windowed frame.
fn dft_oracle(x: &[f64], win: usize, hop: usize) -> Vec<Vec<(f64, f64)>> {
    let pad = win / 2;
    let n = x.len() as isize;
    let refl = |i: isize| -> f64 {
        let j = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
        x[j as usize]
    };
    let w: Vec<f64> = (0..win)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()).sqrt())
        .collect();
    (0..x.len() / hop + 1)
        .map(|t| {
            (0..win / 2 + 1)
                .map(|k| {
                    let mut acc = (0.0, 0.0);
                    for (i, wi) in w.iter().enumerate() {
                        let v = refl((t * hop + i) as isize - pad as isize) * wi;
                        let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / win as f64;
                        acc.0 += v * ph.cos();
                        acc.1 += v * ph.sin();
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[test]
fn default_config_shapes() {
    let cfg = StftConfig::default();
    assert_eq!(cfg.win_length(), 512);
    assert_eq!(cfg.hop_length(), 128);
    assert_eq!(cfg.fft_bins(), 257);
    let w = Waveform::new(noise(32000, 1), 16000).unwrap();
    let s = stft(&w, &cfg).unwrap();
    assert_eq!(s.data.shape(), &[2, 251, 257]);
    assert_eq!((s.frames(), s.bins()), (251, 257));
}

#[test]
fn matches_frame_by_frame_dft() {
    let x = noise(1000, 2);
    let cfg = StftConfig::default();
    let plan = Stft::<f64>::new(&cfg).unwrap();
    let s = plan.forward(&x).unwrap();
    let oracle = dft_oracle(&x, 512, 128);
    assert_eq!(oracle.len(), s.shape()[1]);
    let mut worst: f64 = 0.0;
    for (t, row) in oracle.iter().enumerate() {
        for (k, &(re, im)) in row.iter().enumerate() {
            worst = worst.max((s[[0, t, k]] - re).abs()).max((s[[1, t, k]] - im).abs());
        }
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn zero_in_zero_out() {
    let cfg = StftConfig::default();
    let w = Waveform::<f64>::zeros(4000, 16000);
    let s = stft(&w, &cfg).unwrap();
    assert!(s.data.iter().all(|&v| v == 0.0));
    let back = istft(&s, &cfg, 4000).unwrap();
    assert!(back.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn round_trip_and_chirp() {
    let cfg = StftConfig::default();
    let w = Waveform::new(noise(32000, 3), 16000).unwrap();
    let back = istft(&stft(&w, &cfg).unwrap(), &cfg, w.len()).unwrap();
    let err = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");

    // linear chirp 0 -> 4 kHz over one second
    let chirp: Vec<f64> = (0..16000)
        .map(|n| {
            let t = n as f64 / 16000.0;
            (2.0 * std::f64::consts::PI * 2000.0 * t * t).sin()
        })
        .collect();
    let w = Waveform::new(chirp, 16000).unwrap();
    let back = istft(&stft(&w, &cfg).unwrap(), &cfg, w.len()).unwrap();
    let num: f64 = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = w.samples.iter().map(|a| a * a).sum();
    assert!((num / den).sqrt() < 1e-6);
}

#[test]
fn istft_length_and_config_errors() {
    let cfg = StftConfig::default();
    let w = Waveform::new(noise(3000, 4), 16000).unwrap();
    let s = stft(&w, &cfg).unwrap();
    // shorter output is a truncation of the full reconstruction
    let full = istft(&s, &cfg, 3000).unwrap();
    let short = istft(&s, &cfg, 2000).unwrap();
    assert_eq!(&full.samples[..2000], &short.samples[..]);
    let other = StftConfig {
        window_ms: 64.0,
        hop_ms: 16.0,
        ..cfg.clone()
    };
    assert!(matches!(istft(&s, &other, 3000), Err(Error::ConfigMismatch(_))));
    assert!(matches!(istft(&s, &cfg, 1_000_000), Err(Error::InvalidInput(_))));
    let empty = Waveform::<f64>::new(vec![], 16000);
    assert!(empty.is_err() || stft(&empty.unwrap(), &cfg).is_err());
    let bad = StftConfig {
        hop_ms: 16.0,
        ..cfg
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn waveform_validation() {
    assert!(Waveform::new(vec![0.0, f64::NAN], 16000).is_err());
    assert!(Waveform::new(vec![0.0], 0).is_err());
    let w = Waveform::new(vec![0.5, -1.0], 8000).unwrap();
    assert_eq!(w.peak(), 1.0);
    assert!((w.duration_secs() - 0.00025).abs() < 1e-15);
}

#[test]
fn equal_power_tones_double_mixture_power() {
    // 500 Hz and 1 kHz complete an integer number of periods in 2 s
    let a = tone(32000, 500.0);
    let b = tone(32000, 1000.0);
    let m = mix_sources(&[a.scaled(0.3), b.scaled(0.3)], &[0.0, 0.0], None).unwrap();
    let ratio = m.mixture.power() / m.sources[0].power();
    assert!((ratio - 2.0).abs() < 1e-9, "{ratio}");
}

#[test]
fn mixing_hits_requested_offsets() {
    let a = Waveform::new(noise(16000, 5), 16000).unwrap();
    let b = Waveform::new(noise(16000, 6), 16000).unwrap();
    let n = Waveform::new(noise(16000, 7), 16000).unwrap();
    let m = mix_sources(&[a, b], &[0.0, -5.0], Some((&n, 20.0))).unwrap();
    assert!((power_db(&m.sources[0], &m.sources[1]) - 5.0).abs() < 1e-6);
    let clean: Vec<f64> = m.sources[0].samples.iter().zip(&m.sources[1].samples).map(|(x, y)| x + y).collect();
    let clean = Waveform::new(clean, 16000).unwrap();
    assert!((power_db(&clean, m.noise.as_ref().unwrap()) - 20.0).abs() < 1e-6);
}

#[test]
fn peak_normalisation_scales_everything() {
    let a = Waveform::new(noise(8000, 8), 16000).unwrap().scaled(3.0);
    let b = Waveform::new(noise(8000, 9), 16000).unwrap();
    let m = mix_sources(&[a, b], &[0.0, 3.0], None).unwrap();
    assert!(m.normalization < 1.0);
    assert!(m.mixture.peak() <= 1.0 + 1e-12);
    assert!((power_db(&m.sources[1], &m.sources[0]) - 3.0).abs() < 1e-6);
}

#[test]
fn mixing_errors() {
    let a = Waveform::new(noise(100, 10), 16000).unwrap();
    let short = Waveform::new(noise(99, 11), 16000).unwrap();
    let other_rate = Waveform::new(noise(100, 12), 8000).unwrap();
    let silent = Waveform::<f64>::zeros(100, 16000);
    assert!(matches!(mix_sources(&[a.clone(), short], &[0.0, 0.0], None), Err(Error::InvalidInput(_))));
    assert!(matches!(mix_sources(&[a.clone(), other_rate], &[0.0, 0.0], None), Err(Error::InvalidInput(_))));
    assert!(matches!(mix_sources(&[a.clone(), silent], &[0.0, 0.0], None), Err(Error::DegenerateSource(_))));
    assert!(matches!(mix_sources(&[a.clone()], &[0.0], None), Err(Error::InvalidInput(_))));
    assert!(matches!(mix_sources(&[a.clone(), a.clone()], &[1.0, 0.0], None), Err(Error::InvalidInput(_))));
}

#[test]
fn wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = Waveform::new(noise(500, 13).iter().map(|v| v * 0.5).collect::<Vec<f64>>(), 16000).unwrap();
    let p = dir.path().join("a.wav");
    write_wav(&p, &w, WavFormat::Float32).unwrap();
    let back: Waveform<f64> = read_wav(&p).unwrap();
    for (a, b) in w.samples.iter().zip(&back.samples) {
        assert_eq!(*a as f32, *b as f32);
    }
    let p16 = dir.path().join("b.wav");
    write_wav(&p16, &back, WavFormat::Pcm16).unwrap();
    let back16: Waveform<f64> = read_wav(&p16).unwrap();
    for (a, b) in w.samples.iter().zip(&back16.samples) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
    assert_eq!(back16.sample_rate, 16000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_hop_multiples(hops in 4usize..40, seed in any::<u64>(), amp in 0.01f64..100.0) {
        let cfg = StftConfig::default();
        let x: Vec<f64> = noise(hops * 128, seed).iter().map(|v| v * amp).collect();
        let w = Waveform::new(x, 16000).unwrap();
        let back = istft(&stft(&w, &cfg).unwrap(), &cfg, w.len()).unwrap();
        let err = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6 * w.peak());
    }

    #[test]
    fn stft_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let plan = Stft::<f64>::new(&StftConfig::default()).unwrap();
        let x1 = noise(2048, seed);
        let x2 = noise(2048, seed.wrapping_add(1));
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let s = plan.forward(&mix).unwrap();
        let s1 = plan.forward(&x1).unwrap();
        let s2 = plan.forward(&x2).unwrap();
        let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for ((v, p), q) in s.iter().zip(s1.iter()).zip(s2.iter()) {
            prop_assert!((v - (a * p + b * q)).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn mixture_is_exact_sum(seed in any::<u64>(), g in -5.0f64..5.0, snr in -5.0f64..20.0, big in any::<bool>()) {
        let amp = if big { 4.0 } else { 0.1 };
        let a = Waveform::new(noise(1600, seed).iter().map(|v| v * amp).collect::<Vec<f64>>(), 16000).unwrap();
        let b = Waveform::new(noise(1600, seed ^ 1), 16000).unwrap();
        let n = Waveform::new(noise(1600, seed ^ 2), 16000).unwrap();
        let m = mix_sources(&[a, b], &[0.0, g], Some((&n, snr))).unwrap();
        for i in 0..1600 {
            let s = m.sources[0].samples[i] + m.sources[1].samples[i] + m.noise.as_ref().unwrap().samples[i];
            prop_assert_eq!(m.mixture.samples[i], s);
        }
        prop_assert!((power_db(&m.sources[1], &m.sources[0]) - g).abs() < 1e-6);
    }
}
