//! The two training stages.
//!
//! Both stages minimise the PIT total loss (magnitude L1 minus SI-SDR) over
//! mini-batches, clip the global gradient norm, step Adam, and evaluate a
//! validation loss per epoch that drives the plateau schedule and the choice
//! of the best checkpoint. `train_log.jsonl` in the output directory gets one
//! record per step and per epoch.
//!
//! The fine stage runs the frozen coarse network first, pairs every mouth
//! stream with the coarse estimate that PIT assigned to its speaker, and
//! trains on `av(video, asr(coarse audio))` streams.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use avsep_core::dsp::Waveform;
use avsep_core::model::{Model, ModelConfig, Stage};
use avsep_core::objectives::{pit_total_loss_with_grad, PitResult};
use avsep_core::tensor::{Graph, ParamId, Var};
use avsep_core::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, save, StageCheckpoint};
use crate::config::TrainConfig;
use crate::dataset::{entry_rng, Example};
use crate::error::{usage, PipelineError, Result};
use crate::optim::clip_global_norm;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.ckpt";
pub const LAST_FILE: &str = "last.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub steps: usize,
    pub max_clipped_norm: f64,
    pub best: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Diverged { epoch: usize, step: usize, loss: f64, utterances: Vec<String> },
}

pub struct StageOutcome<T: Scalar> {
    pub best: PathBuf,
    pub last: PathBuf,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// State after the final epoch.
    pub last_state: StageCheckpoint<T>,
}

/// Seed-stable split into (train, validation) indices. With no held-out
/// utterances the validation set is the training set.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5011));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all);
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn to_t<T: Scalar>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::lit(v)).collect()
}

/// Mouth-stream-aligned inputs for the second pass of one utterance.
#[derive(Debug, Clone)]
pub struct FineInputs<T> {
    /// Lip-encoder features per mouth stream.
    pub video: Vec<Array2<T>>,
    /// Coarse estimate assigned to each mouth stream's speaker.
    pub coarse: Vec<Vec<T>>,
    pub coarse_pit: PitResult,
}

/// Runs the frozen first pass on `ex` and pairs its outputs with the mouth
/// streams through the PIT permutation against the targets.
pub fn fine_inputs<T: Scalar>(model: &Model<T>, ex: &Example) -> Result<FineInputs<T>> {
    let video: Vec<Array2<T>> = model.video_streams(&ex.mouths).into_iter().map(|s| s.features).collect();
    let mix = to_t::<T>(&ex.mixture.samples);
    let coarse = model.run_net(model.first_pass(), &mix, &video)?;
    let refs: Vec<Vec<T>> = ex.targets.iter().map(|t| to_t(&t.samples)).collect();
    let est_refs: Vec<&[T]> = coarse.iter().map(Vec::as_slice).collect();
    let ref_refs: Vec<&[T]> = refs.iter().map(Vec::as_slice).collect();
    let pit = avsep_core::objectives::pit(&est_refs, &ref_refs, |e, r| {
        avsep_core::objectives::total_loss(e, r, &model.plan)
    })?;
    let mut paired = vec![Vec::new(); coarse.len()];
    for (i, &j) in pit.permutation.iter().enumerate() {
        paired[j] = coarse[i].clone();
    }
    Ok(FineInputs {
        video,
        coarse: paired,
        coarse_pit: pit,
    })
}

fn semantic_vars<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    ex: &Example,
    fine: Option<&FineInputs<T>>,
) -> Result<Vec<Var>> {
    match (model.stage, fine) {
        (Stage::Coarse, _) => Ok(model.video_stream_vars(g, &ex.mouths)),
        (Stage::Fine, Some(inp)) => {
            let parts = model.fine.as_ref().expect("fine model");
            let sr = model.cfg.stft.sample_rate;
            inp.video
                .iter()
                .zip(&inp.coarse)
                .map(|(v, c)| {
                    let t1 = v.nrows();
                    let lm = parts.asr.prepare(c, sr, &model.plan, t1)?;
                    let vv = g.constant(v.clone().into_dyn());
                    let a = parts.asr.forward(g, &model.store, &lm, t1);
                    Ok(parts.av.forward(g, &model.store, vv, a)?)
                })
                .collect()
        }
        (Stage::Fine, None) => usage("fine stage needs first-pass inputs"),
    }
}

/// Forward pass and PIT loss for a batch; gradients when `train` is set.
/// Returns the mean loss, the parameter gradients and the per-item PIT results.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[&Example],
    fine: &[Option<&FineInputs<T>>],
    train: bool,
) -> Result<(f64, HashMap<ParamId, ArrayD<T>>, Vec<PitResult>)> {
    let mut g = if train { Graph::new() } else { Graph::inference() };
    let mixes: Vec<Vec<T>> = batch.iter().map(|e| to_t(&e.mixture.samples)).collect();
    let mut streams = Vec::with_capacity(batch.len());
    for (ex, f) in batch.iter().zip(fine) {
        streams.push(semantic_vars(&mut g, model, ex, *f)?);
    }
    let mix_refs: Vec<&[T]> = mixes.iter().map(Vec::as_slice).collect();
    let out = model.net.forward(&mut g, &model.store, &model.plan, &mix_refs, &streams)?;
    let (bsz, sp, len) = {
        let s = g.shape(out);
        (s[0], s[1], s[2])
    };
    let values = g.value(out).as_standard_layout().into_owned();
    let flat = values.as_slice().unwrap();
    let mut grad = vec![T::zero(); flat.len()];
    let mut total = 0.0;
    let mut pits = Vec::with_capacity(bsz);
    for (b, ex) in batch.iter().enumerate() {
        let ests: Vec<&[T]> = (0..sp).map(|s| &flat[(b * sp + s) * len..(b * sp + s + 1) * len]).collect();
        let refs: Vec<Vec<T>> = ex.targets.iter().map(|t| to_t(&t.samples)).collect();
        let ref_refs: Vec<&[T]> = refs.iter().map(Vec::as_slice).collect();
        let (pit, grads) = pit_total_loss_with_grad(&ests, &ref_refs, &model.plan)?;
        total += pit.loss;
        for (s, gs) in grads.iter().enumerate() {
            let base = (b * sp + s) * len;
            for (k, v) in gs.iter().enumerate() {
                grad[base + k] = T::lit(v / bsz as f64);
            }
        }
        pits.push(pit);
    }
    let loss = total / bsz as f64;
    let grads = if train && loss.is_finite() {
        let w = ArrayD::from_shape_vec(IxDyn(&[bsz, sp, len]), grad).unwrap();
        let l = g.dot_const(out, &w);
        g.backward(l).into_param_grads()
    } else {
        HashMap::new()
    };
    Ok((loss, grads, pits))
}

fn append(log: &mut fs::File, rec: &LogRecord) -> Result<()> {
    writeln!(log, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

/// Swaps speaker slots `1..S` between utterances of equal shape; mouths move
/// with their audio.
fn repair_speakers(examples: &mut [Example], rng: &mut ChaCha8Rng) {
    let n = examples.len();
    if n < 2 {
        return;
    }
    let slots = examples.iter().map(Example::speakers).min().unwrap_or(0);
    for s in 1..slots {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let taken: Vec<(Waveform<f64>, avsep_core::semantics::MouthFrames)> =
            order.iter().map(|&i| (examples[i].targets[s].clone(), examples[i].mouths[s].clone())).collect();
        for (ex, (t, m)) in examples.iter_mut().zip(taken) {
            if t.len() == ex.targets[s].len() {
                ex.targets[s] = t;
                ex.mouths[s] = m;
            }
        }
    }
}

fn epoch_data(data: &[Example], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Example>> {
    if !cfg.dynamic_mixing {
        return Ok(data.to_vec());
    }
    let mut rng = entry_rng(cfg.seed ^ 0xd1_a11c, epoch as u64);
    let mut out = data.to_vec();
    if cfg.remix_speakers {
        repair_speakers(&mut out, &mut rng);
    }
    out.iter()
        .map(|e| e.remix(&mut rng, cfg.snr_range))
        .collect::<Result<Vec<_>>>()
}

fn fine_cache<T: Scalar>(model: &Model<T>, data: &[Example]) -> Result<Vec<Option<FineInputs<T>>>> {
    match model.stage {
        Stage::Coarse => Ok(vec![None; data.len()]),
        Stage::Fine => data.iter().map(|e| fine_inputs(model, e).map(Some)).collect(),
    }
}

/// Mean PIT loss over `idx` without gradients.
pub fn validation_loss<T: Scalar>(
    model: &Model<T>,
    data: &[Example],
    cache: &[Option<FineInputs<T>>],
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let (l, _, _) = batch_loss(model, &[&data[i]], &[cache[i].as_ref()], false)?;
        total += l;
    }
    Ok(total / idx.len().max(1) as f64)
}

fn train_loop<T: Scalar>(mut state: StageCheckpoint<T>, data: &[Example], out_dir: &Path) -> Result<StageOutcome<T>> {
    let cfg = state.meta.train.clone();
    cfg.validate()?;
    if data.is_empty() {
        return usage("no training data");
    }
    let speakers = state.model.cfg.speakers;
    if let Some(e) = data.iter().find(|e| e.speakers() != speakers) {
        return usage(format!("{} has {} speakers, the model separates {speakers}", e.id, e.speakers()));
    }
    fs::create_dir_all(out_dir)?;
    let mut log = fs::File::create(out_dir.join(LOG_FILE))?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    log::info!(
        "{} stage: {} train / {} validation utterances, {} trainable parameters",
        state.model.stage,
        train_idx.len(),
        val_idx.len(),
        state.model.trainable_count()
    );
    let best_path = out_dir.join(BEST_FILE);
    let last_path = out_dir.join(LAST_FILE);
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bde_u64);
    let mut cache = fine_cache(&state.model, data)?;
    let mut step = 0usize;
    let start_epoch = state.meta.epoch;
    if start_epoch == 0 {
        // the starting point competes for best checkpoint like any epoch
        let t0 = Instant::now();
        let val = validation_loss(&state.model, data, &cache, &val_idx)?;
        if !val.is_finite() {
            append(&mut log, &LogRecord::Diverged { epoch: 0, step: 0, loss: val, utterances: vec![] })?;
            return Err(PipelineError::Diverged { epoch: 0, step: 0, loss: val });
        }
        state.meta.scheduler.observe(val);
        state.meta.best_val = Some(val);
        let rec = EpochRecord {
            epoch: 0,
            train_loss: val,
            val_loss: val,
            lr: state.meta.scheduler.lr,
            steps: 0,
            max_clipped_norm: 0.0,
            best: true,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!("epoch 0: val {val:.4}");
        append(&mut log, &LogRecord::Epoch(rec.clone()))?;
        history.push(rec);
        save(&mut state, &best_path)?;
    }
    for epoch in start_epoch + 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let epoch_examples = if cfg.dynamic_mixing {
            let d = epoch_data(data, &cfg, epoch)?;
            cache = fine_cache(&state.model, &d)?;
            d
        } else {
            data.to_vec()
        };
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let lr = state.meta.scheduler.lr;
        let (mut sum, mut count, mut max_clipped) = (0.0, 0usize, 0.0f64);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &epoch_examples[i]).collect();
            let fine: Vec<Option<&FineInputs<T>>> = chunk.iter().map(|&i| cache[i].as_ref()).collect();
            let (loss, mut grads, _) = batch_loss(&state.model, &batch, &fine, true)?;
            let (pre, post) = clip_global_norm(&mut grads, cfg.clip_norm);
            if !loss.is_finite() || !pre.is_finite() {
                let rec = LogRecord::Diverged {
                    epoch,
                    step,
                    loss,
                    utterances: batch.iter().map(|e| e.id.clone()).collect(),
                };
                append(&mut log, &rec)?;
                log::error!("non-finite loss at epoch {epoch}, step {step}");
                return Err(PipelineError::Diverged { epoch, step, loss });
            }
            state.adam.update(&mut state.model.store, &grads, lr);
            let rec = StepRecord {
                epoch,
                step,
                loss,
                grad_norm: pre,
                clipped_norm: post,
                lr,
            };
            append(&mut log, &LogRecord::Step(rec.clone()))?;
            steps.push(rec);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
            max_clipped = max_clipped.max(post);
        }
        let val = validation_loss(&state.model, &epoch_examples, &cache, &val_idx)?;
        if !val.is_finite() {
            append(&mut log, &LogRecord::Diverged { epoch, step, loss: val, utterances: vec![] })?;
            return Err(PipelineError::Diverged { epoch, step, loss: val });
        }
        let best = state.meta.scheduler.observe(val);
        state.meta.epoch = epoch;
        if best {
            state.meta.best_val = Some(val);
        }
        let rec = EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss: val,
            lr,
            steps: count.div_ceil(cfg.batch_size),
            max_clipped_norm: max_clipped,
            best,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} lr {:.2e}{} ({:.1}s)",
            rec.train_loss,
            val,
            lr,
            if best { " *" } else { "" },
            rec.seconds
        );
        append(&mut log, &LogRecord::Epoch(rec.clone()))?;
        history.push(rec);
        if best {
            save(&mut state, &best_path)?;
        }
        save(&mut state, &last_path)?;
    }
    Ok(StageOutcome {
        best: best_path,
        last: last_path,
        history,
        steps,
        last_state: state,
    })
}

/// Trains encoder, fusion, separator, decoder and the lip encoder jointly
/// from scratch, using video-only semantic streams.
pub fn run_coarse_stage<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[Example],
    out_dir: impl AsRef<Path>,
) -> Result<StageOutcome<T>> {
    if cfg.stage != Stage::Coarse {
        return usage("coarse stage needs a coarse training configuration");
    }
    let model = Model::<T>::new_coarse(model_cfg, cfg.seed)?;
    train_loop(StageCheckpoint::new(model, cfg.clone(), None), data, out_dir.as_ref())
}

/// Fine model initialised from a coarse checkpoint, before any training.
pub fn init_fine<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    coarse: &StageCheckpoint<T>,
) -> Result<StageCheckpoint<T>> {
    if cfg.stage != Stage::Fine {
        return usage("fine stage needs a fine training configuration");
    }
    if coarse.meta.stage != Stage::Coarse {
        return usage(format!("checkpoint {} is not a coarse checkpoint", coarse.meta.id));
    }
    let found = fingerprint(model_cfg);
    if found != coarse.meta.fingerprint {
        return Err(PipelineError::FingerprintMismatch {
            expected: coarse.meta.fingerprint.clone(),
            found,
        });
    }
    let mut model = Model::fine_from_coarse(&coarse.model, cfg.seed)?;
    if !cfg.finetune_audio_encoder {
        model.store.set_frozen("enc.", true);
    }
    Ok(StageCheckpoint::new(model, cfg.clone(), Some(coarse.meta.id.clone())))
}

/// Finetunes the separation network, the audio semantic encoder and the
/// audio-visual fusion on second-pass streams; the lip encoder and the
/// first-pass copy stay frozen.
pub fn run_fine_stage<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    coarse: &StageCheckpoint<T>,
    data: &[Example],
    out_dir: impl AsRef<Path>,
) -> Result<StageOutcome<T>> {
    train_loop(init_fine(model_cfg, cfg, coarse)?, data, out_dir.as_ref())
}
