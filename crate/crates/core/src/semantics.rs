//! Semantic encoders: a lip-reading frontend over mouth crops, an audio
//! frontend over log-magnitude spectra, and the audio-visual fusion MLP.
//! Also the mouth-frame container formats and the occlusion simulator.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Stft;
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Linear, Norm, PRelu};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Init, NormKind, ParamStore, Var};

pub const MOUTH_SIZE: usize = 88;
pub const VIDEO_FPS: u32 = 25;

/// Grayscale mouth crops, `[T_v, 88, 88]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MouthFrames {
    pub frames: Array3<u8>,
    pub fps: u32,
}

impl MouthFrames {
    pub fn new(frames: Array3<u8>) -> Result<Self> {
        let s = frames.shape();
        if s[1] != MOUTH_SIZE || s[2] != MOUTH_SIZE {
            return invalid(format!(
                "mouth frames must be {MOUTH_SIZE}x{MOUTH_SIZE}, got {}x{}",
                s[1], s[2]
            ));
        }
        if s[0] == 0 {
            return invalid("mouth sequence has no frames");
        }
        Ok(Self { frames, fps: VIDEO_FPS })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            frames: Array3::zeros((n, MOUTH_SIZE, MOUTH_SIZE)),
            fps: VIDEO_FPS,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel values scaled to `[0, 1]`, shaped `[T_v, 1, 88, 88]`.
    pub fn to_input<T: Scalar>(&self) -> ArrayD<T> {
        let inv = 1.0 / 255.0;
        self.frames
            .mapv(|p| T::lit(p as f64 * inv))
            .into_shape_with_order(IxDyn(&[self.len(), 1, MOUTH_SIZE, MOUTH_SIZE]))
            .unwrap()
    }
}

/// Number of video frames covering `samples` audio samples.
pub fn frames_for_samples(samples: usize, sample_rate: u32) -> usize {
    (samples as f64 * VIDEO_FPS as f64 / sample_rate as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamSource {
    VideoOnly,
    AudioVisual,
}

/// Per-speaker semantic features, `[T1, Cv]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticStream<T> {
    pub features: Array2<T>,
    pub source: StreamSource,
}

impl<T: Scalar> SemanticStream<T> {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn zeros(frames: usize, dim: usize, source: StreamSource) -> Self {
        Self {
            features: Array2::zeros((frames, dim)),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VsrConfig {
    /// Output widths of the three residual blocks.
    pub channels: [usize; 3],
    pub tcn_dilations: [usize; 3],
    pub tcn_kernel: usize,
}

impl Default for VsrConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            tcn_dilations: [1, 2, 4],
            tcn_kernel: 3,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: Norm,
    act1: PRelu,
    conv2: Conv2d,
    bn2: Norm,
    skip: Option<Conv2d>,
    act_out: PRelu,
}

impl ResBlock {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv2d::new(&mut init.sub("conv1"), c_in, c_out, (3, 3), (1, 1), true),
            bn1: Norm::new(&mut init.sub("bn1"), c_out, NormKind::Batch),
            act1: PRelu::new(&mut init.sub("act1")),
            conv2: Conv2d::new(&mut init.sub("conv2"), c_out, c_out, (3, 3), (1, 1), true),
            bn2: Norm::new(&mut init.sub("bn2"), c_out, NormKind::Batch),
            skip: (c_in != c_out).then(|| Conv2d::new(&mut init.sub("skip"), c_in, c_out, (1, 1), (1, 1), false)),
            act_out: PRelu::new(&mut init.sub("act_out")),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.bn1.forward(g, store, h);
        let h = self.act1.forward(g, store, h);
        let h = self.conv2.forward(g, store, h);
        let h = self.bn2.forward(g, store, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, store, x),
            None => x,
        };
        let y = g.add(h, skip);
        let y = self.act_out.forward(g, store, y);
        g.max_pool2(y)
    }
}

/// Temporal convolution over `[1, C, T, 1]` with a residual connection.
#[derive(Debug, Clone)]
struct TcnLayer {
    conv: Conv2d,
    act: PRelu,
}

/// Lip-reading frontend: three residual conv blocks with 2x2 pooling,
/// spatial average, a dilated temporal convolution stack and a projection
/// to `Cv`. Batch normalisation always uses the statistics of the clip.
#[derive(Debug, Clone)]
pub struct VsrEncoder {
    blocks: Vec<ResBlock>,
    tcn: Vec<TcnLayer>,
    proj: Linear,
    pub cv: usize,
}

impl VsrEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &VsrConfig, cv: usize) -> Result<Self> {
        if cfg.tcn_kernel % 2 == 0 || cfg.channels.contains(&0) || cv == 0 {
            return Err(Error::Config(format!("invalid lip encoder config {cfg:?} / Cv {cv}")));
        }
        let mut c_in = 1;
        let mut blocks = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            blocks.push(ResBlock::new(&mut init.sub(&format!("block{i}")), c_in, c));
            c_in = c;
        }
        let tcn = cfg
            .tcn_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut s = init.sub(&format!("tcn{i}"));
                TcnLayer {
                    conv: Conv2d::new(&mut s.sub("conv"), c_in, c_in, (cfg.tcn_kernel, 1), (d, 1), true),
                    act: PRelu::new(&mut s.sub("act")),
                }
            })
            .collect();
        let proj = Linear::new(&mut init.sub("proj"), c_in, cv, true);
        Ok(Self { blocks, tcn, proj, cv })
    }

    /// `frames: [T_v, 1, 88, 88]` -> `[T_v, Cv]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Var {
        let mut x = frames;
        for b in &self.blocks {
            x = b.forward(g, store, x);
        }
        let pooled = g.mean_spatial(x);
        let (tv, c) = (g.shape(pooled)[0], g.shape(pooled)[1]);
        let t = g.permute(pooled, &[1, 0]);
        let mut h = g.reshape(t, &[1, c, tv, 1]);
        for layer in &self.tcn {
            let y = layer.conv.forward(g, store, h);
            let y = layer.act.forward(g, store, y);
            h = g.add(h, y);
        }
        let h = g.reshape(h, &[c, tv]);
        let h = g.permute(h, &[1, 0]);
        self.proj.forward(g, store, h)
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, m: &MouthFrames) -> SemanticStream<T> {
        let mut g = Graph::inference();
        let x = g.input(m.to_input());
        let y = self.forward(&mut g, store, x);
        SemanticStream {
            features: to_array2(g.value(y)),
            source: StreamSource::VideoOnly,
        }
    }
}

pub(crate) fn to_array2<T: Scalar>(x: &ArrayD<T>) -> Array2<T> {
    x.clone().into_dimensionality().expect("2-D tensor")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrConfig {
    pub hidden: usize,
    pub kernel: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self { hidden: 64, kernel: 3 }
    }
}

/// Log-magnitude spectrum `log(1 + |STFT|)` as `[F, T]`.
pub fn log_magnitude<T: Scalar>(samples: &[T], plan: &Stft<T>) -> Result<Array2<T>> {
    let spec = plan.forward(samples)?;
    let (t, f) = (spec.shape()[1], spec.shape()[2]);
    Ok(Array2::from_shape_fn((f, t), |(k, j)| {
        let (re, im) = (spec[[0, j, k]], spec[[1, j, k]]);
        (re * re + im * im).sqrt().ln_1p()
    }))
}

/// Averaging matrix `[out, len]` pooling `len` steps to `out` bins, with bin
/// `i` covering `[floor(i*len/out), ceil((i+1)*len/out))`.
pub fn adaptive_pool_matrix<T: Scalar>(len: usize, out: usize) -> Array2<T> {
    let mut m = Array2::zeros((out, len));
    for i in 0..out {
        let start = i * len / out;
        let end = ((i + 1) * len).div_ceil(out);
        let w = T::lit(1.0 / (end - start) as f64);
        for j in start..end {
            m[[i, j]] = w;
        }
    }
    m
}

/// Audio frontend: two temporal convolutions over the log spectrum, adaptive
/// average pooling to the video frame rate, and a projection to `Cv`.
#[derive(Debug, Clone)]
pub struct AsrEncoder {
    conv1: Conv2d,
    act1: PRelu,
    conv2: Conv2d,
    act2: PRelu,
    proj: Linear,
    pub bins: usize,
    pub cv: usize,
}

impl AsrEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &AsrConfig, bins: usize, cv: usize) -> Result<Self> {
        if cfg.kernel % 2 == 0 || cfg.hidden == 0 || cv == 0 {
            return Err(Error::Config(format!("invalid audio encoder config {cfg:?} / Cv {cv}")));
        }
        let k = (cfg.kernel, 1);
        Ok(Self {
            conv1: Conv2d::new(&mut init.sub("conv1"), bins, cfg.hidden, k, (1, 1), true),
            act1: PRelu::new(&mut init.sub("act1")),
            conv2: Conv2d::new(&mut init.sub("conv2"), cfg.hidden, cfg.hidden, k, (1, 1), true),
            act2: PRelu::new(&mut init.sub("act2")),
            proj: Linear::new(&mut init.sub("proj"), cfg.hidden, cv, true),
            bins,
            cv,
        })
    }

    /// `logmag: [F, T]` constant input -> `[T1, Cv]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, logmag: &Array2<T>, t1: usize) -> Var {
        let (f, t) = logmag.dim();
        assert_eq!(f, self.bins, "asr: bin count");
        let x = g.constant(logmag.clone().into_shape_with_order(IxDyn(&[1, f, t, 1])).unwrap());
        let h = self.conv1.forward(g, store, x);
        let h = self.act1.forward(g, store, h);
        let h = self.conv2.forward(g, store, h);
        let h = self.act2.forward(g, store, h);
        let hidden = g.shape(h)[1];
        let h = g.reshape(h, &[hidden, t]);
        let h = g.permute(h, &[1, 0]);
        let pool = g.constant(adaptive_pool_matrix::<T>(t, t1).into_dyn());
        let pooled = g.matmul(pool, h);
        self.proj.forward(g, store, pooled)
    }

    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        samples: &[T],
        sample_rate: u32,
        plan: &Stft<T>,
        t1: usize,
    ) -> Result<SemanticStream<T>> {
        let lm = self.prepare(samples, sample_rate, plan, t1)?;
        let mut g = Graph::inference();
        let y = self.forward(&mut g, store, &lm, t1);
        Ok(SemanticStream {
            features: to_array2(g.value(y)),
            source: StreamSource::AudioVisual,
        })
    }

    /// Validates the clip duration and computes the log spectrum.
    pub fn prepare<T: Scalar>(&self, samples: &[T], sample_rate: u32, plan: &Stft<T>, t1: usize) -> Result<Array2<T>> {
        let expected = frames_for_samples(samples.len(), sample_rate);
        if expected != t1 {
            return invalid(format!(
                "audio of {} samples spans {expected} video frames, expected {t1}",
                samples.len()
            ));
        }
        log_magnitude(samples, plan)
    }
}

/// Audio-visual fusion: `v + MLP([v; a])` with a PReLU hidden layer of width `Cv`.
#[derive(Debug, Clone)]
pub struct AvFusion {
    l1: Linear,
    act: PRelu,
    pub l2: Linear,
    pub cv: usize,
}

impl AvFusion {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cv: usize) -> Self {
        Self {
            l1: Linear::new(&mut init.sub("l1"), 2 * cv, cv, true),
            act: PRelu::new(&mut init.sub("act")),
            l2: Linear::new(&mut init.sub("l2"), cv, cv, true),
            cv,
        }
    }

    /// Zeroes the output layer so the fusion starts as the identity on `v`.
    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.l2.weight).fill(T::zero());
        if let Some(b) = self.l2.bias {
            store.value_mut(b).fill(T::zero());
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v: Var, a: Var) -> Result<Var> {
        let (vs, as_) = (g.shape(v).to_vec(), g.shape(a).to_vec());
        if vs != as_ || vs.len() != 2 || vs[1] != self.cv {
            return invalid(format!("fusion inputs {vs:?} and {as_:?} must both be [T1, {}]", self.cv));
        }
        let x = g.concat(&[v, a], 1);
        let h = self.l1.forward(g, store, x);
        let h = self.act.forward(g, store, h);
        let d = self.l2.forward(g, store, h);
        Ok(g.add(v, d))
    }

    pub fn fuse<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        v: &SemanticStream<T>,
        a: &SemanticStream<T>,
    ) -> Result<SemanticStream<T>> {
        if v.frames() != a.frames() {
            return invalid(format!("stream lengths differ: {} vs {}", v.frames(), a.frames()));
        }
        let mut g = Graph::inference();
        let vv = g.input(v.features.clone().into_dyn());
        let av = g.input(a.features.clone().into_dyn());
        let y = self.forward(&mut g, store, vv, av)?;
        Ok(SemanticStream {
            features: to_array2(g.value(y)),
            source: StreamSource::AudioVisual,
        })
    }
}

/// Zeroes `n_missing` consecutive frames starting at a uniformly drawn index.
pub fn occlude(m: &MouthFrames, n_missing: usize, rng_seed: u64) -> Result<MouthFrames> {
    let tv = m.len();
    if n_missing > tv {
        return invalid(format!("cannot occlude {n_missing} of {tv} frames"));
    }
    let start = occlusion_start(tv, n_missing, rng_seed);
    Ok(occlude_at(m, start, n_missing))
}

/// Start index [`occlude`] uses for the given seed.
pub fn occlusion_start(tv: usize, n_missing: usize, rng_seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.gen_range(0..=tv - n_missing)
}

pub fn occlude_at(m: &MouthFrames, start: usize, n: usize) -> MouthFrames {
    let mut out = m.clone();
    for t in start..start + n {
        out.frames.index_axis_mut(ndarray::Axis(0), t).fill(0);
    }
    out
}

const MROI_MAGIC: &[u8; 4] = b"MROI";

pub fn write_mroi(path: impl AsRef<Path>, m: &MouthFrames) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let s = m.frames.shape();
    f.write_all(MROI_MAGIC)?;
    for v in [s[0], s[1], s[2]] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    f.write_all(m.frames.as_standard_layout().as_slice().unwrap())?;
    Ok(())
}

pub fn read_mroi(path: impl AsRef<Path>) -> Result<MouthFrames> {
    let mut buf = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..4] != MROI_MAGIC {
        return Err(Error::Format(format!("{}: not an MROI container", path.as_ref().display())));
    }
    let u = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (tv, h, w) = (u(4), u(8), u(12));
    if buf.len() != 16 + tv * h * w {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header says {tv}x{h}x{w}",
            path.as_ref().display(),
            buf.len() - 16
        )));
    }
    MouthFrames::new(Array3::from_shape_vec((tv, h, w), buf[16..].to_vec()).unwrap())
}

pub fn pgm_frame_name(i: usize) -> String {
    format!("frame_{i:05}.pgm")
}

pub fn write_pgm_dir(dir: impl AsRef<Path>, m: &MouthFrames) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, frame) in m.frames.outer_iter().enumerate() {
        let img = image::GrayImage::from_raw(MOUTH_SIZE as u32, MOUTH_SIZE as u32, frame.iter().copied().collect())
            .expect("frame size");
        let mut out = fs::File::create(dir.join(pgm_frame_name(i)))?;
        image::codecs::pnm::PnmEncoder::new(&mut out)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary))
            .encode(img.as_raw().as_slice(), MOUTH_SIZE as u32, MOUTH_SIZE as u32, image::ExtendedColorType::L8)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn read_pgm_dir(dir: impl AsRef<Path>) -> Result<MouthFrames> {
    let dir = dir.as_ref();
    let mut frames = Vec::new();
    let mut i = 0;
    loop {
        let p = dir.join(pgm_frame_name(i));
        if !p.exists() {
            break;
        }
        let img = image::ImageReader::open(&p)?
            .with_guessed_format()?
            .decode()
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
            .into_luma8();
        if img.width() as usize != MOUTH_SIZE || img.height() as usize != MOUTH_SIZE {
            return invalid(format!("{}: frame is {}x{}", p.display(), img.width(), img.height()));
        }
        frames.extend_from_slice(img.as_raw());
        i += 1;
    }
    if i == 0 {
        return Err(Error::Format(format!("{}: no frame_00000.pgm", dir.display())));
    }
    MouthFrames::new(Array3::from_shape_vec((i, MOUTH_SIZE, MOUTH_SIZE), frames).unwrap())
}

/// Reads either an MROI container file or a directory of PGM frames.
pub fn read_mouths(path: impl AsRef<Path>) -> Result<MouthFrames> {
    let path = path.as_ref();
    if path.is_dir() {
        read_pgm_dir(path)
    } else {
        read_mroi(path)
    }
}
