//! Signal front-end: waveforms, STFT/iSTFT with a square-root Hann window,
//! SNR-controlled mixing and WAV input/output.
//!
//! Framing is centred: the signal is reflection-padded by half a window on
//! both ends, giving `T = len / hop + 1` frames. The FFT size equals the
//! window length, so a 32 ms window at 16 kHz yields 257 bins.
//!
//! Both transforms expose their adjoints so they can sit inside a
//! differentiable graph.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array3;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite sample at index {i}"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![T::zero(); len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples
            .iter()
            .map(|v| v.to_f64().unwrap().abs())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let f = T::lit(factor);
        Self {
            samples: self.samples.iter().map(|&v| v * f).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|v| U::lit(v.to_f64().unwrap())).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.samples.iter().map(|v| v.to_f64().unwrap()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    #[default]
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub window: WindowKind,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 32.0,
            hop_ms: 8.0,
            window: WindowKind::SqrtHann,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl StftConfig {
    pub fn win_length(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frequency bins `F`.
    pub fn fft_bins(&self) -> usize {
        self.win_length() / 2 + 1
    }

    /// Frame count `T` for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop_length() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (win, hop) = (self.win_length(), self.hop_length());
        if self.sample_rate == 0 || hop == 0 {
            return Err(Error::Config("hop length must be positive".into()));
        }
        if win % 2 != 0 {
            return Err(Error::Config(format!("window length {win} must be even")));
        }
        if win < 4 * hop {
            return Err(Error::Config(format!(
                "window length {win} must be at least 4x the hop length {hop}"
            )));
        }
        Ok(())
    }
}

/// Real/imaginary time-frequency tensor of shape `[2, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub data: Array3<T>,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.shape()[0] != 2 {
            return invalid(format!("spectrogram needs 2 channels, got {}", data.shape()[0]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite spectrogram entry");
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    /// `|X|` as `[T, F]`.
    pub fn magnitude(&self) -> ndarray::Array2<T> {
        let re = self.data.index_axis(ndarray::Axis(0), 0);
        let im = self.data.index_axis(ndarray::Axis(0), 1);
        ndarray::Zip::from(&re).and(&im).map_collect(|&r, &i| (r * r + i * i).sqrt())
    }
}

/// Planned STFT for one configuration.
pub struct Stft<T: Scalar> {
    win: usize,
    hop: usize,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    ifft: Arc<dyn Fft<T>>,
}

fn reflect(idx: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

impl<T: Scalar> Stft<T> {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let (win, hop) = (cfg.win_length(), cfg.hop_length());
        // periodic Hann, square-rooted
        let window = (0..win)
            .map(|n| {
                let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos();
                T::lit(hann.sqrt())
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            win,
            hop,
            window,
            fft: planner.plan_fft_forward(win),
            ifft: planner.plan_fft_inverse(win),
        })
    }

    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    fn pad(&self) -> usize {
        self.win / 2
    }

    /// `[2, T, F]` spectrum of `x`.
    pub fn forward(&self, x: &[T]) -> Result<Array3<T>> {
        if x.is_empty() {
            return invalid("empty waveform");
        }
        let pad = self.pad();
        if x.len() <= pad {
            return invalid(format!(
                "waveform of {} samples is too short for reflection padding of {pad}",
                x.len()
            ));
        }
        let frames = self.frames(x.len());
        let bins = self.bins();
        let mut out = Array3::zeros((2, frames, bins));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.win];
        for t in 0..frames {
            for (n, b) in buf.iter_mut().enumerate() {
                let src = reflect((t * self.hop + n) as isize - pad as isize, x.len());
                *b = Complex::new(x[src] * self.window[n], T::zero());
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                out[[0, t, k]] = buf[k].re;
                out[[1, t, k]] = buf[k].im;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::forward`] for a signal of `len` samples.
    pub fn forward_adjoint(&self, grad: &Array3<T>, len: usize) -> Vec<T> {
        let pad = self.pad();
        let (frames, bins) = (grad.shape()[1], grad.shape()[2]);
        let mut out = vec![T::zero(); len];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.win];
        for t in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
            for k in 0..bins {
                buf[k] = Complex::new(grad[[0, t, k]], grad[[1, t, k]]);
            }
            self.ifft.process(&mut buf);
            for n in 0..self.win {
                let src = reflect((t * self.hop + n) as isize - pad as isize, len);
                out[src] += self.window[n] * buf[n].re;
            }
        }
        out
    }

    /// Squared-window overlap-add envelope over the padded signal.
    fn envelope(&self, frames: usize) -> Vec<T> {
        let mut env = vec![T::zero(); (frames - 1) * self.hop + self.win];
        for t in 0..frames {
            for n in 0..self.win {
                env[t * self.hop + n] += self.window[n] * self.window[n];
            }
        }
        env
    }

    /// Longest signal an `frames`-frame spectrum can reproduce.
    pub fn max_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.win - self.pad()
    }

    /// Weighted overlap-add synthesis, cropped to `out_len` samples.
    pub fn inverse(&self, spec: &Array3<T>, out_len: usize) -> Result<Vec<T>> {
        let (frames, bins) = (spec.shape()[1], spec.shape()[2]);
        if bins != self.bins() {
            return Err(Error::ConfigMismatch(format!(
                "spectrogram has {bins} bins, configuration expects {}",
                self.bins()
            )));
        }
        if frames == 0 {
            return invalid("spectrogram has no frames");
        }
        if out_len > self.max_len(frames) {
            return invalid(format!(
                "requested {out_len} samples but {frames} frames reconstruct at most {}",
                self.max_len(frames)
            ));
        }
        let pad = self.pad();
        let env = self.envelope(frames);
        let mut acc = vec![T::zero(); env.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.win];
        let inv_n = T::one() / T::lit(self.win as f64);
        let half = self.win / 2;
        for t in 0..frames {
            for k in 0..bins {
                let im = if k == 0 || k == half { T::zero() } else { spec[[1, t, k]] };
                buf[k] = Complex::new(spec[[0, t, k]], im);
                if k > 0 && k < half {
                    buf[self.win - k] = Complex::new(spec[[0, t, k]], -im);
                }
            }
            self.ifft.process(&mut buf);
            for n in 0..self.win {
                acc[t * self.hop + n] += self.window[n] * buf[n].re * inv_n;
            }
        }
        Ok((0..out_len).map(|j| acc[j + pad] / env[j + pad]).collect())
    }

    /// Adjoint of [`Stft::inverse`]: maps a waveform gradient to a `[2, T, F]` gradient.
    pub fn inverse_adjoint(&self, grad: &[T], frames: usize) -> Array3<T> {
        let pad = self.pad();
        let env = self.envelope(frames);
        let mut gp = vec![T::zero(); env.len()];
        for (j, &g) in grad.iter().enumerate() {
            gp[j + pad] = g / env[j + pad];
        }
        let bins = self.bins();
        let half = self.win / 2;
        let inv_n = T::one() / T::lit(self.win as f64);
        let two = T::lit(2.0);
        let mut out = Array3::zeros((2, frames, bins));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.win];
        for t in 0..frames {
            for n in 0..self.win {
                buf[n] = Complex::new(self.window[n] * gp[t * self.hop + n], T::zero());
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                if k == 0 || k == half {
                    out[[0, t, k]] = buf[k].re * inv_n;
                } else {
                    out[[0, t, k]] = two * buf[k].re * inv_n;
                    out[[1, t, k]] = two * buf[k].im * inv_n;
                }
            }
        }
        out
    }
}

pub fn stft<T: Scalar>(w: &Waveform<T>, cfg: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    let plan = Stft::new(cfg)?;
    Ok(ComplexSpectrogram {
        data: plan.forward(&w.samples)?,
    })
}

pub fn istft<T: Scalar>(s: &ComplexSpectrogram<T>, cfg: &StftConfig, out_len: usize) -> Result<Waveform<T>> {
    let plan = Stft::new(cfg)?;
    Ok(Waveform {
        samples: plan.inverse(&s.data, out_len)?,
        sample_rate: cfg.sample_rate,
    })
}

/// Output of [`mix_sources`]. `mixture` is the sample-wise sum of `sources`
/// (and `noise`, when present), accumulated in that order.
#[derive(Debug, Clone)]
pub struct Mixture<T> {
    pub mixture: Waveform<T>,
    pub sources: Vec<Waveform<T>>,
    pub noise: Option<Waveform<T>>,
    /// Peak-normalisation factor applied to every component (1.0 if none).
    pub normalization: f64,
}

/// Mixes `sources` so that source `i` sits `gains_db[i]` dB relative to the
/// first source (`gains_db[0]` must be 0), optionally adding `noise` at
/// `noise_snr_db` below the clean mixture. If the mixture peak exceeds 1.0,
/// every component is rescaled by the same factor.
pub fn mix_sources<T: Scalar>(
    sources: &[Waveform<T>],
    gains_db: &[f64],
    noise: Option<(&Waveform<T>, f64)>,
) -> Result<Mixture<T>> {
    if !(2..=4).contains(&sources.len()) {
        return invalid(format!("expected 2 to 4 sources, got {}", sources.len()));
    }
    if gains_db.len() != sources.len() {
        return invalid(format!("{} gains for {} sources", gains_db.len(), sources.len()));
    }
    if gains_db[0] != 0.0 {
        return invalid("the reference source gain (gains_db[0]) must be 0 dB");
    }
    let (len, sr) = (sources[0].len(), sources[0].sample_rate);
    let check = |w: &Waveform<T>, what: &str| -> Result<()> {
        if w.len() != len || w.sample_rate != sr {
            return invalid(format!(
                "{what}: {} samples @ {} Hz, expected {len} @ {sr} Hz",
                w.len(),
                w.sample_rate
            ));
        }
        Ok(())
    };
    for (i, s) in sources.iter().enumerate() {
        check(s, &format!("source {i}"))?;
        if s.power() == 0.0 {
            return Err(Error::DegenerateSource(format!("source {i} is silent")));
        }
    }
    let p_ref = sources[0].power();
    let mut scaled: Vec<Vec<f64>> = sources
        .iter()
        .zip(gains_db)
        .map(|(s, &g)| {
            let factor = (p_ref * 10f64.powf(g / 10.0) / s.power()).sqrt();
            s.samples.iter().map(|v| v.to_f64().unwrap() * factor).collect()
        })
        .collect();
    let mut clean = vec![0.0; len];
    for s in &scaled {
        clean.iter_mut().zip(s).for_each(|(c, v)| *c += v);
    }
    let mut scaled_noise = match noise {
        Some((n, snr_db)) => {
            check(n, "noise")?;
            if n.power() == 0.0 {
                return Err(Error::DegenerateSource("noise is silent".into()));
            }
            let p_clean = clean.iter().map(|v| v * v).sum::<f64>() / len as f64;
            let factor = (p_clean / (n.power() * 10f64.powf(snr_db / 10.0))).sqrt();
            Some(n.samples.iter().map(|v| v.to_f64().unwrap() * factor).collect::<Vec<f64>>())
        }
        None => None,
    };
    let mut mix = clean;
    if let Some(n) = &scaled_noise {
        mix.iter_mut().zip(n).for_each(|(m, v)| *m += v);
    }
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let normalization = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if normalization != 1.0 {
        for s in scaled.iter_mut().chain(scaled_noise.iter_mut()) {
            s.iter_mut().for_each(|v| *v *= normalization);
        }
    }
    let to_wave = |v: &[f64]| Waveform {
        samples: v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>(),
        sample_rate: sr,
    };
    let sources: Vec<Waveform<T>> = scaled.iter().map(|s| to_wave(s)).collect();
    let noise = scaled_noise.as_deref().map(to_wave);
    let mut mixture = vec![T::zero(); len];
    for s in sources.iter().chain(noise.iter()) {
        mixture.iter_mut().zip(&s.samples).for_each(|(m, &v)| *m += v);
    }
    Ok(Mixture {
        mixture: Waveform {
            samples: mixture,
            sample_rate: sr,
        },
        sources,
        noise,
        normalization,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    #[default]
    Float32,
    Pcm16,
}

pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono audio, found {} channels",
            path.as_ref().display(),
            spec.channels
        )));
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format(format!("unsupported sample format {fmt:?}/{bits} bit")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, w: &Waveform<T>, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for v in &w.samples {
        let v = v.to_f64().unwrap();
        match format {
            WavFormat::Float32 => writer.write_sample(v as f32)?,
            WavFormat::Pcm16 => writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?,
        }
    }
    writer.finalize()?;
    Ok(())
}
