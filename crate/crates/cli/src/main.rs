use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use spast_core::ablation::{run_ablation, Variant};
use spast_core::eval_metrics::{benchmark_inference, evaluate};
use spast_core::feature_codec::{Encoder, EncoderWeights, ImageTensor};
use spast_core::style_prior::{train_prior, StylePrior};
use spast_core::trainer::{build_corpus, build_encoder, build_prior, Stylizer, Corpus, DataPipeline, InferenceModel, SpastNet, TrainConfig, TrainerState};
use spast_core::tensor::ParamSet;
use spast_core::{init, Result, SpastError};

mod cache;

#[derive(Parser)]
#[command(name = "spast", version, about = "Arbitrary style transfer: train, stylize, evaluate, benchmark, ablate")]
struct Cli {
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given: desk or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Training checkpoint. Without one an untrained model is built from
    /// the config and seed.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Train the style prior on the style corpus.
    TrainPrior {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stylization network.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the final checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stylize one content image with one style image.
    Stylize {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resize both inputs to SIZE×SIZE first.
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Content, style, gram and perceptual metrics over every pair.
    Eval {
        #[arg(long)]
        content_dir: PathBuf,
        #[arg(long)]
        style_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Directory for pairs.csv and aggregate.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Inference wall-clock timing.
    Bench {
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Retrain with components removed or settings swept and compare.
    Ablate {
        /// all, sp, adv, lwssm, gwssm or sd.
        #[arg(long, conflicts_with_all = ["timestep", "sweep"])]
        term: Option<String>,
        /// Comma-separated prior timesteps.
        #[arg(long, value_delimiter = ',', conflicts_with = "sweep")]
        timestep: Vec<usize>,
        /// KEY=V1,V2,... over any config key.
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated seeds; defaults to --seed or the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Holdout pairs as CONTENTSxSTYLES.
        #[arg(long, default_value = "4x3")]
        holdout: String,
        /// JSON file with every run.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::preset(&args.preset)?,
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SpastError::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Corpus from the config, with the procedural one cached on disk when
/// SPAST_CACHE_DIR is set.
fn corpus(cfg: &TrainConfig) -> Result<Corpus> {
    match (cfg.content_dir.is_none() && cfg.style_dir.is_none(), cache::dir()) {
        (true, Some(dir)) => cache::corpus(&dir, cfg),
        _ => build_corpus(cfg),
    }
}

fn encoder(cfg: &TrainConfig, corpus: &Corpus) -> Result<(Encoder, Option<ParamSet>)> {
    match cache::dir() {
        Some(dir) if cfg.encoder_weights.is_none() => cache::encoder(&dir, cfg, corpus),
        _ => build_encoder(cfg, corpus),
    }
}

fn model(args: &ModelArgs, seed: Option<u64>) -> Result<(InferenceModel, Encoder)> {
    if let Some(path) = &args.ckpt {
        if !path.exists() {
            return Err(SpastError::Config(format!("checkpoint {} does not exist", path.display())));
        }
        let state = TrainerState::load_checkpoint(path)?;
        return Ok((state.inference_model(), state.encoder.clone()));
    }
    let cfg = load_config(&args.cfg, seed)?;
    let weights = EncoderWeights::init(cfg.widths()?, cfg.seed, &format!("untrained-seed{}", cfg.seed));
    let encoder = Encoder::new(weights)?;
    let net = SpastNet::new(cfg.widths()?, cfg.levels.clone(), cfg.b, cfg.branches)?;
    let params = net.init(&mut init::rng_for(cfg.seed, "generator"));
    Ok((InferenceModel::new(encoder.clone(), net, &params), encoder))
}

fn open_log(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    Ok(match path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    })
}

fn run(cli: Cli) -> Result<Value> {
    let seed = cli.seed;
    match cli.command {
        Command::TrainPrior { cfg, out } => {
            let cfg = load_config(&cfg, seed)?;
            let corpus = corpus(&cfg)?;
            let (encoder, _) = encoder(&cfg, &corpus)?;
            let mut prior = StylePrior::new(cfg.prior_config(), encoder, &format!("seed{}", cfg.seed))?;
            let every = cfg.log_every.max(1);
            let losses = train_prior(&mut prior, &corpus.styles, |l| {
                if l.step % every == 0 {
                    eprintln!("{}", serde_json::to_string(&l).expect("plain log"));
                }
            })?;
            prior.save(&out)?;
            Ok(json!({
                "command": "train-prior",
                "out": out,
                "iterations": losses.len(),
                "final_loss": losses.last(),
                "prior_digest": prior.digest(),
            }))
        }
        Command::Train { cfg, out, log, resume } => {
            let (mut state, data) = match &resume {
                Some(path) => {
                    let mut state = TrainerState::load_checkpoint(path)?;
                    let c = load_config(&cfg, seed)?;
                    state.config.iterations = c.iterations;
                    let corpus = corpus(&state.config)?;
                    let data = DataPipeline::new(corpus, state.config.resize, state.config.crop)?;
                    (state, data)
                }
                None => {
                    let cfg = load_config(&cfg, seed)?;
                    let corpus = corpus(&cfg)?;
                    let (enc, dec) = encoder(&cfg, &corpus)?;
                    let prior = build_prior(&cfg, &enc, &corpus)?;
                    let mut state = TrainerState::new(cfg.clone(), enc, prior)?;
                    if cfg.decoder_warm_start {
                        if let Some(d) = &dec {
                            state.warm_start_decoder(d)?;
                        }
                    }
                    (state, DataPipeline::new(corpus, cfg.resize, cfg.crop)?)
                }
            };
            let mut writer = open_log(&log)?;
            let every = state.config.log_every.max(1) as u64;
            let mut last = None;
            let mut io_err = None;
            state.train(&data, |r| {
                if let Some(w) = writer.as_mut() {
                    if let Err(e) = writeln!(w, "{}", r.to_json_line()) {
                        io_err.get_or_insert(e);
                    }
                }
                if r.step % every == 0 {
                    eprintln!("{}", r.to_json_line());
                }
                last = Some(*r);
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            if let Some(mut w) = writer {
                w.flush()?;
            }
            state.save_checkpoint(&out)?;
            Ok(json!({
                "command": "train",
                "out": out,
                "steps": state.step,
                "final": last,
                "generator_digest": state.generator_digest(),
                "prior_digest": state.prior_digest(),
            }))
        }
        Command::Stylize {
            content,
            style,
            out,
            size,
            model: margs,
        } => {
            let (m, _) = model(&margs, seed)?;
            let load = |p: &Path| match size {
                Some(s) => ImageTensor::load_resized(p, s, s),
                None => ImageTensor::load(p),
            };
            let (c, s) = (load(&content)?, load(&style)?);
            let img = m.stylize(&c, &s)?;
            img.save(&out)?;
            Ok(json!({
                "command": "stylize",
                "out": out,
                "height": img.height(),
                "width": img.width(),
            }))
        }
        Command::Eval {
            content_dir,
            style_dir,
            resolution,
            out,
            model: margs,
        } => {
            let (m, enc) = model(&margs, seed)?;
            let report = evaluate(&m, &enc, &content_dir, &style_dir, resolution)?;
            if let Some(dir) = &out {
                report.write(dir)?;
            }
            Ok(json!({
                "command": "eval",
                "pairs": report.pairs,
                "resolution": report.resolution,
                "perceptual_levels": report.perceptual_levels,
                "aggregate": report.aggregate,
                "out": out,
            }))
        }
        Command::Bench {
            resolution,
            trials,
            model: margs,
        } => {
            let (m, _) = model(&margs, seed)?;
            let t = benchmark_inference(&m, resolution, trials)?;
            Ok(json!({
                "command": "bench",
                "trials": t.samples.len(),
                "mean_s": t.mean,
                "p50_s": t.p50,
                "p95_s": t.p95,
                "resolution": t.resolution,
                "device": t.device,
            }))
        }
        Command::Ablate {
            term,
            timestep,
            sweep,
            seeds,
            holdout,
            out,
            cfg,
        } => {
            let base = load_config(&cfg, seed)?;
            let variants = if !timestep.is_empty() {
                Variant::timestep_sweep(&timestep)
            } else if let Some(s) = sweep {
                let (k, vs) = s
                    .split_once('=')
                    .ok_or_else(|| SpastError::Config(format!("sweep `{s}` is not KEY=V1,V2")))?;
                Variant::sweep(k.trim(), &vs.split(',').map(|v| v.trim().to_string()).collect::<Vec<_>>())
            } else {
                Variant::for_term(term.as_deref().unwrap_or("all"))?
            };
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let (hc, hs) = holdout
                .split_once('x')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| SpastError::Config(format!("holdout `{holdout}` is not CONTENTSxSTYLES")))?;
            let table = run_ablation(&base, &variants, &seeds, (hc, hs), |r| {
                eprintln!("{} seed {}: style {:.4}", r.variant, r.seed, r.eval.aggregate.style_loss);
            })?;
            print!("{}", table.render());
            if let Some(p) = &out {
                std::fs::write(p, serde_json::to_string_pretty(&table)?)?;
            }
            Ok(json!({
                "command": "ablate",
                "variants": table.variants(),
                "seeds": seeds,
                "summary": table.summary(),
                "out": out,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(mut status) => {
            status["status"] = json!("ok");
            println!("{status}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("{}", json!({"status": "error", "message": e.to_string()}));
            ExitCode::from(2)
        }
    }
}
