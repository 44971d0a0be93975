//! Command-line front end. Exit codes: 0 success, 1 configuration error,
//! 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use omni_icm::artifacts;
use omni_icm::coder::{coder_for, CoderBackend};
use omni_icm::config::{ExperimentConfig, Overrides};
use omni_icm::data::{prepare, read_rgb, write_rgb, Normalization};
use omni_icm::entropy_models::QuantMode;
use omni_icm::evalkit::probe::{probe_quality, train_probe_decoder, FeatureSource};
use omni_icm::evalkit::{bd_rate, bit_allocation_map, rd_plot_svg, read_rd_csv, save_bit_map_png, write_rd_csv};
use omni_icm::feature_codec::Bitstream;
use omni_icm::nn::checkpoint::Checkpoint;
use omni_icm::pipeline;
use omni_icm::tasks::{evaluate, read_results_csv, write_results_csv, CodecChannel, FrozenFrontEnd, IdentityChannel, TaskKind, TaskResult};
use omni_icm::FeatureMap;

#[derive(Parser, Debug)]
#[command(name = "omni-icm", version, about = "Omnipotent features for image coding for machines")]
struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Entropy coder backend.
    #[arg(long, global = true)]
    coder: Option<CoderBackend>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive training of head, information filter and tail.
    TrainStage1 {
        #[arg(long)]
        alpha: Option<f64>,
        /// Stop after this many steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the feature codec on a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lambda_coef: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tunes tail and task head on uncompressed features.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image to bitstream.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bitstream to reconstructed features.
    Decompress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task metric and mean bpp on the validation set through the codec.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Skip the codec (features passed through, 0 bpp).
        #[arg(long)]
        identity: bool,
        /// Appends a `task,lambda_coef,bpp,metric` row.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BD-rate of a test curve against an anchor, both `label,bpp,metric` CSVs.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// SVG plot of RD curves.
    PlotRd {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "metric")]
        metric_name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grayscale map of estimated bits per latent position.
    VisBits {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        upscale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains pixel decoders on features before and after the filter and
    /// reconstructs the given images with both.
    ProbeRecon {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    match s {
        "linear_probe" | "linear_probe_classification" => Ok(TaskKind::LinearProbeClassification),
        "toy_segmentation" | "segmentation" => Ok(TaskKind::ToySegmentation),
        other => Err(format!("unknown task `{other}` (linear_probe | toy_segmentation)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = matches!(e.downcast_ref::<omni_icm::Error>(), Some(omni_icm::Error::Config(_)));
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}

fn config(cli: &Cli, extra: Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        coder: cli.coder,
        ..extra
    })?;
    Ok(cfg)
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn frontend_of(ck: &Checkpoint) -> anyhow::Result<FrozenFrontEnd> {
    Ok(FrozenFrontEnd::from_encoder(&artifacts::get_encoder(ck)?.1))
}

/// Normalized, padded image batch of one plus its original size.
fn image_features(frontend: &FrozenFrontEnd, path: &Path) -> anyhow::Result<(FeatureMap, (usize, usize))> {
    let (img, dims) = prepare(&read_rgb(path)?, &Normalization::default());
    let f = frontend.features_of(&[img], 1)?.remove(0);
    Ok((f, dims))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    // a broken config file is an error for every command, even ones that ignore it
    config(&cli, Overrides::default())?;
    match &cli.command {
        Command::TrainStage1 { alpha, steps, out } => {
            let mut cfg = config(&cli, Overrides { alpha: *alpha, ..Default::default() })?;
            if let Some(s) = steps {
                cfg.stage1.max_steps = *s;
            }
            let dir = cfg.create_run_dir("train-stage1")?;
            let data = pipeline::load_data(&cfg)?;
            let mut log = std::fs::File::create(dir.join("metrics.jsonl"))?;
            let (enc, metrics) = pipeline::run_stage1(&cfg, &data.raw, Some(&mut log))?;
            let mut ck = Checkpoint::default();
            artifacts::put_encoder(&mut ck, &cfg.model, &enc);
            let out = out.clone().unwrap_or_else(|| dir.join("stage1.ckpt"));
            ck.save(&out)?;
            let tail = &metrics[metrics.len().saturating_sub(100)..];
            let mean = |f: fn(&omni_icm::contrastive::StepMetrics) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "{} steps; final-window L_q {:.4} L_e {:.4}; checkpoint {}; run dir {}",
                metrics.len(),
                mean(|m| m.l_q),
                mean(|m| m.l_e),
                out.display(),
                dir.display()
            );
        }
        Command::TrainStage2 { checkpoint, lambda_coef, iterations, out } => {
            let mut cfg = config(&cli, Overrides { lambda_coef: *lambda_coef, ..Default::default() })?;
            if let Some(n) = iterations {
                cfg.stage2.iterations = *n;
            }
            let dir = cfg.create_run_dir("train-stage2")?;
            let mut ck = load(checkpoint)?;
            let (_, enc) = artifacts::get_encoder(&ck)?;
            let data = pipeline::load_data(&cfg)?;
            let mut log = std::fs::File::create(dir.join("stage2.jsonl"))?;
            let (codec, records) = pipeline::run_stage2(&cfg, &enc, &data.train, Some(&mut log))?;
            artifacts::put_codec(&mut ck, &codec);
            let out = out.clone().unwrap_or_else(|| dir.join("stage2.ckpt"));
            ck.save(&out)?;
            if let Some(r) = records.last() {
                println!("step {} loss {:.4} rate {:.4} mse {:.5}; checkpoint {}", r.step, r.total, r.rate, r.mse, out.display());
            }
        }
        Command::Finetune { checkpoint, task, steps, out } => {
            let mut cfg = config(&cli, Overrides::default())?;
            if let Some(t) = task {
                cfg.task.kind = *t;
            }
            if let Some(s) = steps {
                cfg.finetune.steps = *s;
            }
            let dir = cfg.create_run_dir("finetune")?;
            let mut ck = load(checkpoint)?;
            let (model_cfg, enc) = artifacts::get_encoder(&ck)?;
            let data = pipeline::load_data(&cfg)?;
            let (model, log) = pipeline::run_finetune(&cfg, &enc, &data.train)?;
            std::fs::write(dir.join("finetune.json"), serde_json::to_string(&log)?)?;
            artifacts::put_task(&mut ck, &model_cfg, &model);
            let out = out.clone().unwrap_or_else(|| dir.join("task.ckpt"));
            ck.save(&out)?;
            let last = log.last().map(|l| l.loss).unwrap_or(f64::NAN);
            println!("{} steps, final loss {last:.4}; checkpoint {}", log.len(), out.display());
        }
        Command::Compress { checkpoint, input, out } => {
            let cfg = config(&cli, Overrides::default())?;
            let ck = load(checkpoint)?;
            let frontend = frontend_of(&ck)?;
            let codec = artifacts::get_codec(&ck)?;
            let coder = coder_for(cfg.coder)?;
            let (f, dims) = image_features(&frontend, input)?;
            let stream = codec.compress(&f, dims, coder.as_ref())?;
            std::fs::write(out, stream.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            println!("{} bytes ({} payload), {:.6} bpp", stream.len(), stream.payload_len(), stream.bpp());
        }
        Command::Decompress { checkpoint, input, out } => {
            let cfg = config(&cli, Overrides::default())?;
            let ck = load(checkpoint)?;
            let codec = artifacts::get_codec(&ck)?;
            let coder = coder_for(cfg.coder)?;
            let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
            let stream = Bitstream::from_bytes(&bytes)?;
            let f = codec.decompress(&stream, coder.as_ref())?;
            pipeline::save_features(out, &f)?;
            println!("features {:?} written to {}", f.dims(), out.display());
        }
        Command::Eval { checkpoint, identity, out } => {
            let cfg = config(&cli, Overrides::default())?;
            let ck = load(checkpoint)?;
            let frontend = frontend_of(&ck)?;
            let model = artifacts::get_task(&ck)?;
            let data = pipeline::load_data(&cfg)?;
            let coder = coder_for(cfg.coder)?;
            let (metric, bpp) = if *identity {
                evaluate(&model, &frontend, &IdentityChannel, &data.val)?
            } else {
                let codec = artifacts::get_codec(&ck)?;
                let channel = CodecChannel {
                    codec: &codec,
                    coder: coder.as_ref(),
                };
                evaluate(&model, &frontend, &channel, &data.val)?
            };
            println!("{} {:?} {metric:.6} at {bpp:.6} bpp", model.spec.name(), model.spec.metric());
            if let Some(path) = out {
                let mut rows = if path.exists() { read_results_csv(path)? } else { Vec::new() };
                rows.push(TaskResult {
                    task: model.spec.name().to_string(),
                    lambda_coef: cfg.stage2.lambda_coef,
                    bpp,
                    metric,
                });
                write_results_csv(path, &rows)?;
            }
        }
        Command::Bdrate { anchor, test } => {
            let read = |p: &Path| -> anyhow::Result<_> {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let mut curves = read_rd_csv(&text)?;
                if curves.len() != 1 {
                    bail!("{} holds {} curves, expected one", p.display(), curves.len());
                }
                Ok(curves.remove(0))
            };
            let v = bd_rate(&read(anchor)?, &read(test)?)?;
            println!("{v:.4}");
        }
        Command::PlotRd { input, metric_name, out } => {
            let mut curves = Vec::new();
            for p in input {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                curves.extend(read_rd_csv(&text)?);
            }
            std::fs::write(out, rd_plot_svg(&curves, metric_name))?;
            std::fs::write(out.with_extension("csv"), write_rd_csv(&curves))?;
            println!("{} curves plotted to {}", curves.len(), out.display());
        }
        Command::VisBits { checkpoint, input, upscale, out } => {
            let ck = load(checkpoint)?;
            let frontend = frontend_of(&ck)?;
            let codec = artifacts::get_codec(&ck)?;
            let (f, _) = image_features(&frontend, input)?;
            let padded = FeatureMap::new(omni_icm::data::pad_edge(&f.data, omni_icm::feature_codec::HYPER_DOWNSAMPLE), f.downsample);
            let o = codec.forward(&padded.to_batch(), QuantMode::Round, &mut rand::rng())?;
            let bits = o.y_element_bits.index_axis(ndarray::Axis(0), 0).to_owned();
            let map = bit_allocation_map(&bits);
            save_bit_map_png(&map, *upscale, out)?;
            println!("{:.1} estimated latent bits; map {:?} written to {}", map.sum(), map.dim(), out.display());
        }
        Command::ProbeRecon { checkpoint, input, steps, out } => {
            let mut cfg = config(&cli, Overrides::default())?;
            if let Some(s) = steps {
                cfg.probe.steps = *s;
            }
            let dir = cfg.create_run_dir("probe-recon")?;
            let ck = load(checkpoint)?;
            let frontend = frontend_of(&ck)?;
            let data = pipeline::load_data(&cfg)?;
            let norm = Normalization::default();
            let images = input.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>, _>>()?;
            std::fs::create_dir_all(out)?;
            for source in [FeatureSource::BeforeIf, FeatureSource::AfterIf] {
                let (dec, losses) = train_probe_decoder(&frontend, source, &data.raw, &norm, &cfg.probe, cfg.seed)?;
                std::fs::write(dir.join(format!("probe-{source:?}.json")), serde_json::to_string(&losses)?)?;
                let tag = match source {
                    FeatureSource::BeforeIf => "before_if",
                    FeatureSource::AfterIf => "after_if",
                };
                for (p, (img, q)) in input.iter().zip(probe_quality(&dec, &frontend, &images, &norm)?) {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "image".into());
                    write_rgb(&out.join(format!("{stem}-{tag}.png")), &img)?;
                    println!("{stem} {tag}: {:.2} dB / {:.4} MS-SSIM", q.psnr.db, q.ms_ssim);
                }
            }
        }
    }
    Ok(())
}
