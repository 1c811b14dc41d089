use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use serde::Deserialize;

use ctxvc::bitstream::codec::{decode_sequence, encode_sequence_gop};
use ctxvc::bitstream::container::BitstreamContainer;
use ctxvc::bitstream::intra::{IntraCodec, IntraRegistry, LosslessDeflate};
use ctxvc::contextual_codec::{CodecConfig, ConditionMode};
use ctxvc::entropy_model::EntropyMode;
use ctxvc::harness::{bd_rate_table, curves_from_rows, evaluate, read_rd_csv, QualityMetric};
use ctxvc::metrics::{entropy_gap, entropy_sweep, JointPmf};
use ctxvc::model::{CodecModel, ModelConfig};
use ctxvc::training::{load_checkpoint, save_checkpoint, train_intra, train_progressive, TrainSchedule, TrainState, TrainingData};
use ctxvc::video_io::{load_image_sequence, load_manifest, load_yuv420, FrameSequence};
use ctxvc::{Error, Result};

#[derive(Parser)]
#[command(name = "ctxvc", version, about = "Contextual neural video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a raw YUV 4:2:0 file or a directory of PNG frames.
    Encode {
        #[arg(long)]
        input: PathBuf,
        /// WxH, required for YUV input.
        #[arg(long)]
        size: Option<String>,
        /// Defaults to 10 for YUV input and 12 for image sequences.
        #[arg(long)]
        gop: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        entropy_mode: Option<EntropyMode>,
        #[arg(long)]
        condition_mode: Option<ConditionMode>,
        #[arg(long)]
        context_dim: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Use the checkpoint's learned intra codec.
        #[arg(long)]
        learned_intra: bool,
        /// Per-frame rate report, one JSON object per line.
        #[arg(long)]
        rate_report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a container to PNG frames.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Progressive training from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// 1, 2, 3, 4 or auto (all remaining stages).
        #[arg(long, default_value = "auto")]
        stage: String,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Quality of reconstructed PNG frames against a reference.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// WxH, required for a YUV reference.
        #[arg(long)]
        size: Option<String>,
        #[arg(long, default_value = "psnr")]
        metrics: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// BD-rate between two RD CSV files.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "psnr")]
        metric: String,
    },
    /// Residue versus conditional entropy on random joint pmfs.
    DemoEntropy {
        #[arg(long, default_value_t = 4)]
        alphabet: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| Error::Argument(format!("size {s} is not WxH")))?;
    let p = |v: &str| v.parse::<usize>().map_err(|_| Error::Argument(format!("size {s} is not WxH")));
    Ok((p(w)?, p(h)?))
}

/// Returns the sequence and its default GOP size.
fn load_input(path: &Path, size: Option<&str>, frames: Option<usize>) -> Result<(FrameSequence, usize)> {
    if path.is_dir() {
        let seq = load_image_sequence(path, "*.png")?;
        let seq = match frames {
            Some(n) if n < seq.len() => FrameSequence::new(seq.frames()[..n].to_vec(), seq.frame_rate)?,
            _ => seq,
        };
        return Ok((seq, 12));
    }
    let (w, h) = parse_size(size.ok_or_else(|| Error::Argument("--size is required for YUV input".into()))?)?;
    Ok((load_yuv420(path, w, h, frames.unwrap_or(usize::MAX))?, 10))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let dev = Device::Cpu;
    match cli.cmd {
        Cmd::Encode {
            input,
            size,
            gop,
            checkpoint,
            entropy_mode,
            condition_mode,
            context_dim,
            frames,
            learned_intra,
            rate_report,
            out,
        } => {
            let (seq, default_gop) = load_input(&input, size.as_deref(), frames)?;
            let model = load_checkpoint(&checkpoint, DType::F32, &dev)?.model;
            let base = *model.codec();
            let config = CodecConfig {
                entropy_mode: entropy_mode.unwrap_or(base.entropy_mode),
                condition_mode: condition_mode.unwrap_or(base.condition_mode),
                context_dim: context_dim.unwrap_or(base.context_dim),
                ..base
            };
            let lossless = LosslessDeflate;
            let intra: &dyn IntraCodec = match (&model.intra, learned_intra) {
                (Some(t), true) => t,
                (None, true) => return Err(Error::Config("checkpoint has no learned intra codec".into())),
                _ => &lossless,
            };
            let enc = encode_sequence_gop(&seq, gop.unwrap_or(default_gop), &model, &config, intra)?;
            write_file(&out, &enc.container.to_bytes()?)?;
            if let Some(p) = rate_report {
                let mut text = String::new();
                for r in &enc.rates {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                write_file(&p, text.as_bytes())?;
            }
            println!("{} frames, {:.4} bpp", seq.len(), enc.bpp()?);
        }
        Cmd::Decode { input, checkpoint, out } => {
            let bytes = fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let container = BitstreamContainer::from_bytes(&bytes)?;
            let model = load_checkpoint(&checkpoint, DType::F32, &dev)?.model;
            let lossless = LosslessDeflate;
            let mut reg = IntraRegistry::new();
            reg.register(&lossless);
            if let Some(t) = &model.intra {
                reg.register(t);
            }
            let seq = decode_sequence(&container, &model, &reg)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, f) in seq.frames().iter().enumerate() {
                f.save_png(&out.join(format!("frame_{i:05}.png")))?;
            }
            println!("{} frames written to {}", seq.len(), out.display());
        }
        Cmd::Train { config, stage, resume } => train(&config, &stage, resume.as_deref(), &dev)?,
        Cmd::Eval { recon, reference, size, metrics, report } => {
            let metrics = metrics.split(',').map(|m| m.trim().parse()).collect::<Result<Vec<QualityMetric>>>()?;
            let rec = load_image_sequence(&recon, "*.png")?;
            let (refs, _) = load_input(&reference, size.as_deref(), Some(rec.len()))?;
            let q = evaluate(&rec, &refs, &metrics)?;
            write_file(&report, &serde_json::to_vec_pretty(&q)?)?;
            if let Some(p) = q.mean_psnr {
                println!("PSNR {p:.3} dB");
            }
            if let Some(m) = q.mean_msssim {
                println!("MS-SSIM {m:.5}");
            }
        }
        Cmd::Bdrate { anchor, test, metric } => {
            let metric: QualityMetric = metric.parse()?;
            let a = curves_from_rows(&read_rd_csv(&anchor)?, metric)?;
            let t = curves_from_rows(&read_rd_csv(&test)?, metric)?;
            let (per, mean) = bd_rate_table(&a, &t)?;
            for (s, v) in per {
                println!("{s}: {v:+.2}%");
            }
            println!("average: {mean:+.2}%");
        }
        Cmd::DemoEntropy { alphabet, trials, seed } => {
            if alphabet < 2 {
                return Err(Error::Argument("alphabet must be at least 2".into()));
            }
            let (hr, hc) = entropy_gap(&JointPmf::independent_uniform(alphabet));
            println!("independent uniform on {{0..{}}}: H(x - x~) = {hr:.4} bits, H(x | x~) = {hc:.4} bits", alphabet - 1);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (violations, min_gap) = entropy_sweep(alphabet, trials, &mut rng);
            println!("{trials} random joint pmfs: {violations} violations, minimum gap {min_gap:.6} bits");
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    schedule: TrainSchedule,
    /// Dataset manifest (JSON list of entries).
    manifest: PathBuf,
    /// Final checkpoint path.
    out: PathBuf,
    #[serde(default)]
    log: Option<PathBuf>,
    #[serde(default)]
    intra_steps: usize,
}

fn train(config: &Path, stage: &str, resume: Option<&Path>, dev: &Device) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let only = match stage {
        "auto" => None,
        s => Some(s.parse::<u8>().ok().filter(|v| (1..=4).contains(v)).ok_or_else(|| Error::Argument(format!("invalid stage {s}")))?),
    };
    let (mut model, mut schedule, state) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p, DType::F32, dev)?;
            let state = only.map(|s| TrainState { stage: s, step_in_stage: 0 }).or(ck.state);
            (ck.model, ck.schedule.unwrap_or(cfg.schedule), state)
        }
        None => (CodecModel::new(cfg.model, DType::F32, dev)?, cfg.schedule, only.map(|s| TrainState { stage: s, step_in_stage: 0 })),
    };
    schedule.validate()?;
    if state.is_some_and(|s| s.stage > 4) {
        println!("training already complete");
        return Ok(());
    }
    if schedule.checkpoint_dir.is_none() {
        schedule.checkpoint_dir = cfg.out.parent().map(Path::to_path_buf);
    }
    let clips = load_manifest(&cfg.manifest)?.iter().map(|e| e.load()).collect::<Result<Vec<_>>>()?;
    let data = TrainingData::new(clips)?;
    let mut sink: Box<dyn Write> = match &cfg.log {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::sink()),
    };
    if cfg.intra_steps > 0 && model.intra.is_some() {
        let loss = train_intra(&model, &data, cfg.intra_steps, schedule.learning_rate, schedule.lambda, schedule.crop, schedule.seed)?;
        println!("intra: final loss {loss:.5}");
    }
    let reports = train_progressive(&mut model, &data, &schedule, state, only, sink.as_mut())?;
    for r in &reports {
        println!("stage {}: {} steps, final loss {:.5}", r.stage, r.steps, r.losses.last().copied().unwrap_or(f64::NAN));
    }
    let done = reports.last().map(|r| r.stage + 1).unwrap_or(1);
    save_checkpoint(&cfg.out, &model, Some((&schedule, TrainState { stage: done, step_in_stage: 0 })))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
