use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avsep::checkpoint::{load, read_meta, StageCheckpoint};
use avsep::config::{Precision, Preset, RunConfig};
use avsep::dataset::{build_mix_dataset, load_dataset, MixOptions};
use avsep::error::{usage, Result};
use avsep::infer::{evaluate, occlusion_table, separate_files, write_report, EvalOptions, Estimates, OcclusionSpec, SweepTarget};
use avsep::manifest::read_manifest;
use avsep::synth::synth_corpus;
use avsep::train::{run_coarse_stage, run_fine_stage};
use avsep_core::model::{Model, Stage};
use avsep_core::semantics::{occlude, read_mouths, write_mroi, write_pgm_dir};
use avsep_core::{DType, Scalar};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avsep", version, about = "Coarse-to-fine audio-visual speech separation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper, desk or tiny
    #[arg(long)]
    preset: Option<String>,
    /// Override, e.g. `--set model.mst.hidden=16` or `--set train.lr=3e-4`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, stage: Stage) -> Result<RunConfig> {
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let mut sets = self.overrides.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("train.{k}={v}"));
            }
        };
        push("max_epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| format!("{v:e}")));
        push("seed", self.seed.map(|v| v.to_string()));
        RunConfig::load(self.config.as_deref(), preset, stage, &sets)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialise mixtures from a manifest
    Mix {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Relative speaker level range in dB, `lo,hi`
        #[arg(long, default_value = "-5,5", value_parser = parse_range)]
        snr_range: (f64, f64),
        #[arg(long, default_value = "-5,20", value_parser = parse_range)]
        noise_snr_range: (f64, f64),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic tone/chirp corpus and its manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        utterances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the coarse stage
    TrainCoarse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finetune the fine stage from a coarse checkpoint
    TrainFine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Separate one mixture
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        /// Mouth streams (MROI files or PGM directories), one per speaker
        #[arg(long, num_args = 1..)]
        mouths: Vec<PathBuf>,
        #[arg(long)]
        speakers: Option<usize>,
        /// `spk<i>:<frames>`, repeatable
        #[arg(long)]
        occlude: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or a directory of estimates) on a dataset
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "estimates")]
        ckpt: Option<PathBuf>,
        /// `<dir>/<utterance_id>/s{i}.wav`
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Missing-frame sweep over spk<i> or both
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        export: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hide a random run of mouth frames
    Occlude {
        #[arg(long)]
        mouths: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output `.mroi` file, or a directory of PGM frames
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-tensor parameter report
    Params {
        #[arg(long, default_value = "coarse")]
        stage: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "coarse" => Ok(Stage::Coarse),
        "fine" => Ok(Stage::Fine),
        _ => usage(format!("unknown stage {s:?}")),
    }
}

fn print_history<T: Scalar>(out: &avsep::train::StageOutcome<T>) {
    if let Some(best) = out.history.iter().filter(|r| r.best).last() {
        println!("best epoch {} val {:.4} -> {}", best.epoch, best.val_loss, out.best.display());
    }
}

fn train_coarse<T: Scalar>(data: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let examples = load_dataset(data)?;
    let o = run_coarse_stage::<T>(&cfg.model, &cfg.train, &examples, out)?;
    print_history(&o);
    Ok(())
}

fn train_fine<T: Scalar>(data: &Path, coarse: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let examples = load_dataset(data)?;
    let ck = load::<T>(coarse)?;
    let o = run_fine_stage::<T>(&cfg.model, &cfg.train, &ck, &examples, out)?;
    print_history(&o);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn separate<T: Scalar>(
    ckpt: &Path,
    mixture: &Path,
    mouths: &[PathBuf],
    speakers: usize,
    occl: &[OcclusionSpec],
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ck: StageCheckpoint<T> = load(ckpt)?;
    for p in separate_files(&ck.model, mixture, mouths, speakers, occl, seed, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn evaluate_with<T: Scalar>(data: &Path, source: Estimates<'_, T>, opts: &EvalOptions, out: &Path) -> Result<()> {
    let examples = load_dataset(data)?;
    let report = evaluate(&source, &examples, opts)?;
    write_report(out, &report)?;
    for r in &report.rows {
        println!("{}", r.line());
    }
    println!("{}", serde_json::to_string(&report.summary)?);
    if !report.summary.occlusion.is_empty() {
        print!("{}", occlusion_table(&report.summary.occlusion));
    }
    Ok(())
}

fn evaluate_ckpt<T: Scalar>(data: &Path, ckpt: &Path, opts: &EvalOptions, out: &Path) -> Result<()> {
    let ck: StageCheckpoint<T> = load(ckpt)?;
    evaluate_with(data, Estimates::Model(&ck.model), opts, out)
}

fn params(cfg: &RunConfig, stage: Stage) -> Result<()> {
    let model = Model::<f32>::build(&cfg.model, stage, cfg.train.seed)?;
    print!("{}", model.param_report());
    println!("trainable\t{}", model.trainable_count());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Mix {
            manifest,
            out,
            snr_range,
            noise_snr_range,
            seed,
        } => {
            let entries = read_manifest(&manifest)?;
            let opts = MixOptions {
                snr_range,
                noise_snr_range,
                seed,
            };
            let report = build_mix_dataset(&entries, &out, &opts)?;
            println!("{} written, {} failed", report.written.len(), report.failed.len());
            for (id, err) in &report.failed {
                eprintln!("{id}: {err}");
            }
        }
        Cmd::Synth { out, utterances, seed } => {
            println!("{}", synth_corpus(&out, utterances, seed)?.display());
        }
        Cmd::TrainCoarse { data, out, cfg } => {
            let cfg = cfg.load(Stage::Coarse)?;
            match cfg.train.precision {
                Precision::F32 => train_coarse::<f32>(&data, &out, &cfg)?,
                Precision::F64 => train_coarse::<f64>(&data, &out, &cfg)?,
            }
        }
        Cmd::TrainFine { data, coarse, out, cfg } => {
            let cfg = cfg.load(Stage::Fine)?;
            match cfg.train.precision {
                Precision::F32 => train_fine::<f32>(&data, &coarse, &out, &cfg)?,
                Precision::F64 => train_fine::<f64>(&data, &coarse, &out, &cfg)?,
            }
        }
        Cmd::Separate {
            ckpt,
            mixture,
            mouths,
            speakers,
            occlude,
            seed,
            out,
        } => {
            let occl = occlude.iter().map(|s| s.parse()).collect::<Result<Vec<OcclusionSpec>>>()?;
            let s = speakers.unwrap_or(mouths.len());
            match read_meta(&ckpt)?.dtype {
                DType::F32 => separate::<f32>(&ckpt, &mixture, &mouths, s, &occl, seed, &out)?,
                DType::F64 => separate::<f64>(&ckpt, &mixture, &mouths, s, &occl, seed, &out)?,
            }
        }
        Cmd::Evaluate {
            data,
            ckpt,
            estimates,
            sweep,
            export,
            seed,
            out,
        } => {
            let opts = EvalOptions {
                sweep: sweep.as_deref().map(str::parse::<SweepTarget>).transpose()?,
                seed,
                export,
            };
            match (ckpt, estimates) {
                (Some(c), _) => match read_meta(&c)?.dtype {
                    DType::F32 => evaluate_ckpt::<f32>(&data, &c, &opts, &out)?,
                    DType::F64 => evaluate_ckpt::<f64>(&data, &c, &opts, &out)?,
                },
                (None, Some(d)) => evaluate_with::<f64>(&data, Estimates::Dir(&d), &opts, &out)?,
                (None, None) => return usage("evaluate needs --ckpt or --estimates"),
            }
        }
        Cmd::Occlude { mouths, n, seed, out } => {
            let m = occlude(&read_mouths(&mouths)?, n, seed)?;
            if out.extension().is_some_and(|e| e == "mroi") {
                write_mroi(&out, &m)?;
            } else {
                write_pgm_dir(&out, &m)?;
            }
        }
        Cmd::Params { stage, cfg } => {
            let stage = parse_stage(&stage)?;
            params(&cfg.load(stage)?, stage)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
