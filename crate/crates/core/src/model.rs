//! End-to-end separation model and the coarse/fine stage wiring.
//!
//! Parameter namespaces: `vsr.` (lip encoder), `enc.`, `align.`, `fusion.`,
//! `mst.`, `dec.` (separation network), and in fine models additionally
//! `asr.`, `avfuse.` and `coarse.*`, a frozen copy of the coarse network used
//! for the first pass.
//!
//! The mixture is divided by its RMS before the STFT and the estimates are
//! multiplied back, so separation is equivariant to the input level.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_encoder::AudioEncoder;
use crate::dsp::{Stft, StftConfig, Waveform};
use crate::error::{invalid, Error, Result};
use crate::mst::{BranchSpec, Decoder, MstConfig, Separator};
use crate::scalar::Scalar;
use crate::semantics::{
    frames_for_samples, to_array2, AsrConfig, AsrEncoder, AvFusion, MouthFrames, SemanticStream, StreamSource,
    VsrConfig, VsrEncoder,
};
use crate::sp_fusion::{SemanticAligner, SpFusion};
use crate::tensor::{Graph, Init, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub speakers: usize,
    /// Semantic stream width.
    pub cv: usize,
    pub vsr: VsrConfig,
    pub asr: AsrConfig,
    pub mst: MstConfig,
    /// Drop the semantic path entirely (no lip encoder, no fusion).
    pub audio_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            speakers: 2,
            cv: 64,
            vsr: VsrConfig::default(),
            asr: AsrConfig::default(),
            mst: MstConfig::default(),
            audio_only: false,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration (C=192, H=96, B=6, N=4).
    pub fn paper() -> Self {
        Self::default()
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            cv: 16,
            vsr: VsrConfig {
                channels: [4, 8, 8],
                ..VsrConfig::default()
            },
            asr: AsrConfig { hidden: 16, kernel: 3 },
            mst: MstConfig {
                channels: 8,
                hidden: 8,
                blocks: 1,
                heads: 2,
                qk_dim: 2,
                ..MstConfig::default()
            },
            ..Self::default()
        }
    }

    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            cv: 4,
            vsr: VsrConfig {
                channels: [2, 2, 4],
                ..VsrConfig::default()
            },
            asr: AsrConfig { hidden: 4, kernel: 3 },
            mst: MstConfig {
                channels: 8,
                hidden: 4,
                blocks: 1,
                heads: 2,
                qk_dim: 2,
                branches: vec![
                    BranchSpec::GLOBAL,
                    BranchSpec { window: 4, stride: 1 },
                    BranchSpec { window: 8, stride: 1 },
                ],
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.mst.validate()?;
        if !(1..=4).contains(&self.speakers) {
            return Err(Error::Config(format!("speaker count {} outside 1..=4", self.speakers)));
        }
        Ok(())
    }
}

/// Encoder, fusion, separator and decoder.
#[derive(Debug, Clone)]
pub struct SeparationNet {
    pub encoder: AudioEncoder,
    pub aligner: Option<SemanticAligner>,
    pub fusion: Option<SpFusion>,
    pub separator: Separator,
    pub decoder: Decoder,
    pub speakers: usize,
}

/// Root-mean-square level used to normalise a mixture (1 for silence).
pub fn input_scale<T: Scalar>(x: &[T]) -> f64 {
    let p = x.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / x.len().max(1) as f64;
    if p > 0.0 {
        p.sqrt()
    } else {
        1.0
    }
}

impl SeparationNet {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.mst.channels;
        let (aligner, fusion) = if cfg.audio_only {
            (None, None)
        } else {
            (
                Some(SemanticAligner::new(&mut init.sub("align"), cfg.cv, c)),
                Some(SpFusion::new(&mut init.sub("fusion"), c, cfg.speakers)?),
            )
        };
        Ok(Self {
            encoder: AudioEncoder::new(&mut init.sub("enc"), c)?,
            aligner,
            fusion,
            separator: Separator::new(&mut init.sub("mst"), &cfg.mst)?,
            decoder: Decoder::new(&mut init.sub("dec"), c, cfg.speakers)?,
            speakers: cfg.speakers,
        })
    }

    /// `mixtures[b]`: samples of item `b` (all the same length);
    /// `streams[b][s]`: `[T1, Cv]` semantic node for speaker `s` of item `b`
    /// (ignored in audio-only mode). Returns estimates `[B, S, len]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        plan: &Rc<Stft<T>>,
        mixtures: &[&[T]],
        streams: &[Vec<Var>],
    ) -> Result<Var> {
        if mixtures.is_empty() {
            return invalid("empty batch");
        }
        let len = mixtures[0].len();
        if mixtures.iter().any(|m| m.len() != len) {
            return invalid("batch items differ in length");
        }
        let frames = plan.frames(len);
        let bins = plan.bins();
        let bsz = mixtures.len();
        let scales: Vec<f64> = mixtures.iter().map(|m| input_scale(m)).collect();
        let mut specs = Vec::with_capacity(bsz);
        for (m, &sc) in mixtures.iter().zip(&scales) {
            let inv = T::lit(1.0 / sc);
            let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[len]), m.iter().map(|&v| v * inv).collect()).unwrap());
            let s = g.stft(x, plan.clone())?;
            specs.push(g.reshape(s, &[1, 2, frames, bins]));
        }
        let spec = g.concat(&specs, 0);
        let mut y = self.encoder.forward(g, store, spec)?;
        if let (Some(aligner), Some(fusion)) = (&self.aligner, &self.fusion) {
            if streams.len() != bsz || streams.iter().any(|s| s.len() != self.speakers) {
                return invalid(format!("expected {} semantic streams for each of {bsz} items", self.speakers));
            }
            let c = aligner.channels;
            let mut aligned = Vec::with_capacity(self.speakers);
            for s in 0..self.speakers {
                let mut per_item = Vec::with_capacity(bsz);
                for item in streams {
                    let a = aligner.forward(g, store, item[s], frames)?;
                    per_item.push(g.reshape(a, &[1, c, frames]));
                }
                aligned.push(g.concat(&per_item, 0));
            }
            y = fusion.forward(g, store, y, &aligned)?;
        }
        let y = self.separator.forward(g, store, y)?;
        let d = self.decoder.forward(g, store, y);
        let sp = self.speakers;
        let mut waves = Vec::with_capacity(bsz * sp);
        for (b, &sc) in scales.iter().enumerate() {
            let item = g.narrow(d, 0, b, 1);
            for s in 0..sp {
                let ch = g.narrow(item, 1, 2 * s, 2);
                let ch = g.reshape(ch, &[2, frames, bins]);
                let w = g.istft(ch, plan.clone(), len)?;
                let w = g.scale(w, T::lit(sc));
                waves.push(g.reshape(w, &[1, 1, len]));
            }
        }
        let flat = g.concat(&waves, 1);
        Ok(g.reshape(flat, &[bsz, sp, len]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        })
    }
}

/// Second-pass components of a fine model.
#[derive(Debug, Clone)]
pub struct FineParts {
    pub asr: AsrEncoder,
    pub av: AvFusion,
    /// Frozen first-pass network under the `coarse.` prefix.
    pub coarse: SeparationNet,
}

/// Output of [`Model::separate`].
#[derive(Debug, Clone)]
pub struct Separation<T> {
    pub coarse: Vec<Waveform<T>>,
    /// Final estimates (the coarse ones for a coarse model).
    pub estimates: Vec<Waveform<T>>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub store: ParamStore<T>,
    pub vsr: Option<VsrEncoder>,
    pub net: SeparationNet,
    pub fine: Option<FineParts>,
    pub plan: Rc<Stft<T>>,
}

const NET_PREFIXES: [&str; 5] = ["enc.", "align.", "fusion.", "mst.", "dec."];

impl<T: Scalar> Model<T> {
    pub fn new_coarse(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, Stage::Coarse, seed)
    }

    /// Builds the structure for `stage` with freshly initialised parameters.
    pub fn build(cfg: &ModelConfig, stage: Stage, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let vsr = if cfg.audio_only {
            None
        } else {
            Some(VsrEncoder::new(&mut init.sub("vsr"), &cfg.vsr, cfg.cv)?)
        };
        let net = SeparationNet::new(&mut init, cfg)?;
        let fine = match stage {
            Stage::Coarse => None,
            Stage::Fine => {
                if cfg.audio_only {
                    return Err(Error::Config("the fine stage needs the semantic path".into()));
                }
                Some(FineParts {
                    asr: AsrEncoder::new(&mut init.sub("asr"), &cfg.asr, cfg.stft.fft_bins(), cfg.cv)?,
                    av: AvFusion::new(&mut init.sub("avfuse"), cfg.cv),
                    coarse: SeparationNet::new(&mut init.sub("coarse"), cfg)?,
                })
            }
        };
        let plan = Rc::new(Stft::new(&cfg.stft)?);
        let mut model = Self {
            cfg: cfg.clone(),
            stage,
            store,
            vsr,
            net,
            fine,
            plan,
        };
        if stage == Stage::Fine {
            model.store.set_frozen("vsr.", true);
            model.store.set_frozen("coarse.", true);
        }
        Ok(model)
    }

    /// Fine model initialised from a coarse one: the separation network and
    /// the lip encoder are copied, the frozen first-pass copy is filled in,
    /// and the fusion output layer is zeroed so that the fine forward pass
    /// initially equals the coarse one.
    pub fn fine_from_coarse(coarse: &Model<T>, seed: u64) -> Result<Self> {
        if coarse.stage != Stage::Coarse {
            return invalid("fine initialisation needs a coarse model");
        }
        let mut fine = Self::build(&coarse.cfg, Stage::Fine, seed)?;
        fine.store.copy_matching(&coarse.store, "vsr.");
        for p in NET_PREFIXES {
            fine.store.copy_matching(&coarse.store, p);
        }
        let names: Vec<(String, crate::tensor::ParamId)> = coarse
            .store
            .iter()
            .filter(|(_, p)| NET_PREFIXES.iter().any(|n| p.name.starts_with(n)))
            .map(|(id, p)| (p.name.clone(), id))
            .collect();
        for (name, src) in names {
            let dst = fine
                .store
                .id(&format!("coarse.{name}"))
                .ok_or_else(|| Error::ConfigMismatch(format!("no coarse copy of {name}")))?;
            let v = coarse.store.value(src).clone();
            fine.store.value_mut(dst).assign(&v);
        }
        let av = fine.fine.as_ref().unwrap().av.clone();
        av.zero_output(&mut fine.store);
        Ok(fine)
    }

    /// The network that produces the first-pass estimates.
    pub fn first_pass(&self) -> &SeparationNet {
        match &self.fine {
            Some(f) => &f.coarse,
            None => &self.net,
        }
    }

    pub fn video_frames(&self, samples: usize) -> usize {
        frames_for_samples(samples, self.cfg.stft.sample_rate)
    }

    /// Lip-encoder streams, one per mouth sequence.
    pub fn video_streams(&self, mouths: &[MouthFrames]) -> Vec<SemanticStream<T>> {
        match &self.vsr {
            Some(v) => mouths.iter().map(|m| v.encode(&self.store, m)).collect(),
            None => Vec::new(),
        }
    }

    fn check_inputs(&self, mixture: &Waveform<T>, mouths: &[MouthFrames]) -> Result<usize> {
        if mixture.sample_rate != self.cfg.stft.sample_rate {
            return invalid(format!(
                "mixture is {} Hz, model expects {} Hz",
                mixture.sample_rate, self.cfg.stft.sample_rate
            ));
        }
        let t1 = self.video_frames(mixture.len());
        if self.cfg.audio_only {
            return Ok(t1);
        }
        if mouths.len() != self.cfg.speakers {
            return invalid(format!("{} mouth streams for {} speakers", mouths.len(), self.cfg.speakers));
        }
        for m in mouths {
            if m.len() != t1 {
                return invalid(format!("mouth stream has {} frames, audio spans {t1}", m.len()));
            }
        }
        Ok(t1)
    }

    /// Runs one network on precomputed `[T1, Cv]` streams (inference only).
    pub fn run_net(&self, net: &SeparationNet, mixture: &[T], streams: &[Array2<T>]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::inference();
        let vars = vec![streams.iter().map(|s| g.input(s.clone().into_dyn())).collect::<Vec<_>>()];
        let out = net.forward(&mut g, &self.store, &self.plan, &[mixture], &vars)?;
        let v = g.value(out);
        let len = mixture.len();
        Ok(v.as_slice()
            .unwrap()
            .chunks(len)
            .map(|c| c.to_vec())
            .collect())
    }

    /// Second-pass streams: `av(video, asr(coarse estimate))`, paired by position.
    pub fn refined_streams(
        &self,
        video: &[SemanticStream<T>],
        coarse: &[Vec<T>],
    ) -> Result<Vec<SemanticStream<T>>> {
        let fine = self.fine.as_ref().ok_or_else(|| Error::InvalidInput("not a fine model".into()))?;
        let sr = self.cfg.stft.sample_rate;
        video
            .iter()
            .zip(coarse)
            .map(|(v, c)| {
                let a = fine.asr.encode(&self.store, c, sr, &self.plan, v.frames())?;
                fine.av.fuse(&self.store, v, &a)
            })
            .collect()
    }

    /// Full inference path: first pass, and for fine models the recursive
    /// second pass.
    pub fn separate(&self, mixture: &Waveform<T>, mouths: &[MouthFrames]) -> Result<Separation<T>> {
        self.check_inputs(mixture, mouths)?;
        let video = self.video_streams(mouths);
        let feats: Vec<Array2<T>> = video.iter().map(|s| s.features.clone()).collect();
        let coarse = self.run_net(self.first_pass(), &mixture.samples, &feats)?;
        let estimates = match self.stage {
            Stage::Coarse => coarse.clone(),
            Stage::Fine => {
                let refined = self.refined_streams(&video, &coarse)?;
                let feats: Vec<Array2<T>> = refined.into_iter().map(|s| s.features).collect();
                self.run_net(&self.net, &mixture.samples, &feats)?
            }
        };
        let wrap = |v: Vec<Vec<T>>| {
            v.into_iter()
                .map(|s| Waveform {
                    samples: s,
                    sample_rate: mixture.sample_rate,
                })
                .collect()
        };
        Ok(Separation {
            coarse: wrap(coarse),
            estimates: wrap(estimates),
        })
    }

    /// Graph streams from the lip encoder for training (gradients flow into `vsr.`).
    pub fn video_stream_vars(&self, g: &mut Graph<T>, mouths: &[MouthFrames]) -> Vec<Var> {
        match &self.vsr {
            Some(v) => mouths
                .iter()
                .map(|m| {
                    let x = g.constant(m.to_input());
                    v.forward(g, &self.store, x)
                })
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn param_report(&self) -> String {
        self.store.report()
    }

    /// Trainable parameter count excluding frozen tensors.
    pub fn trainable_count(&self) -> usize {
        self.store.iter().filter(|(_, p)| !p.frozen).map(|(_, p)| p.value.len()).sum()
    }
}

/// Converts a graph stream value to a tagged [`SemanticStream`].
pub fn stream_from<T: Scalar>(x: &ArrayD<T>, source: StreamSource) -> SemanticStream<T> {
    SemanticStream {
        features: to_array2(x),
        source,
    }
}
