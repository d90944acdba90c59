use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use unfoldse::data::toy::{self, ToyConfig};
use unfoldse::data::Dataset;
use unfoldse::frontend::wav::{read_wav, write_wav, WavEncoding};
use unfoldse::train::{enhance_waveform, evaluate_dataset, validate, Checkpoint, Trainer};
use unfoldse::{Error, FusionMode, Network, Overrides, RunConfig};

use crate::report::{self, AblationRow};
use crate::{Command, Failure, GlobalArgs};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    train_manifest: Option<PathBuf>,
    /// Defaults to the training manifest.
    #[arg(long, value_name = "PATH")]
    val_manifest: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Noisy 16 kHz mono WAV files.
    #[arg(required = true, value_name = "WAV")]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to the configured validation manifest.
    #[arg(value_name = "MANIFEST")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToygenArgs {
    #[arg(long, default_value_t = 20, value_name = "N")]
    pairs: usize,
    #[arg(long, default_value_t = 2.0, value_name = "SECONDS")]
    seconds: f64,
    #[arg(long, default_value_t = -5, allow_negative_numbers = true, value_name = "DB")]
    snr_min: i32,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true, value_name = "DB")]
    snr_max: i32,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated unfolding depths.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 3])]
    q_values: Vec<usize>,
    /// Comma-separated fusion modes.
    #[arg(long, value_delimiter = ',', default_values_t = [FusionMode::R, FusionMode::G, FusionMode::A])]
    modes: Vec<FusionMode>,
    /// Report parameter counts only, without training.
    #[arg(long)]
    params_only: bool,
    #[arg(long, value_name = "PATH")]
    train_manifest: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    val_manifest: Option<PathBuf>,
}

pub fn run(g: &GlobalArgs, cmd: &Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(a) => train(g, a),
        Command::Enhance(a) => enhance(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Toygen(a) => toygen(g, a),
        Command::Inspect => inspect(g),
        Command::Ablate(a) => ablate(g, a),
    }
}

/// Defaults, then the file, then flags.
fn run_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: g.seed,
        q: g.q,
        fusion: g.fusion,
    })?;
    Ok(cfg)
}

fn explicit_model(g: &GlobalArgs) -> bool {
    g.config.is_some() || g.q.is_some() || g.fusion.is_some()
}

/// Network and analysis settings from `--checkpoint`. An explicit configuration must
/// agree with the stored model.
fn load_checkpoint(g: &GlobalArgs) -> Result<(Network, Checkpoint), Failure> {
    let path = g
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::usage("this command needs --checkpoint PATH"))?;
    let ckpt = Checkpoint::load(path)?;
    if explicit_model(g) {
        ckpt.ensure_model(&run_config(g)?.model)?;
    }
    Ok((ckpt.network()?, ckpt))
}

fn out_dir(g: &GlobalArgs, default: &str) -> Result<PathBuf, Failure> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn manifest(explicit: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    explicit
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Failure::usage(format!("no {what} manifest: pass --{what}-manifest or set data.{what}_manifest")))
}

fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = run_config(g)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = m;
    }
    cfg.validate()?;
    let train_path = manifest(&a.train_manifest, &cfg.data.train_manifest, "train")?;
    let val_path = a
        .val_manifest
        .clone()
        .or_else(|| cfg.data.val_manifest.clone())
        .unwrap_or_else(|| train_path.clone());
    let train_set = Arc::new(Dataset::load_manifest(&train_path, cfg.data.segment_seconds)?);
    let val_set = Dataset::load_manifest(&val_path, cfg.data.segment_seconds)?;
    let out = out_dir(g, "runs/train")?;
    let mut trainer = match &g.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            ckpt.ensure_model(&cfg.model)?;
            log::info!("resuming from {} at step {}", p.display(), ckpt.progress.step);
            Trainer::resume(&Checkpoint { train: cfg.train.clone(), ..ckpt })?
        }
        None => Trainer::new(Network::new(cfg.model.clone(), cfg.seed)?, cfg.train.clone(), cfg.loss, cfg.stft)?,
    };
    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| Failure::usage(e.to_string()))?;
    write_text(&out.join("run_config.json"), &resolved)?;
    log::info!(
        "training q = {}, fusion {}, {} parameters on {} items",
        cfg.q,
        cfg.fusion,
        trainer.network().num_params(),
        train_set.len()
    );
    let outcome = trainer.fit(train_set, &val_set, &out)?;
    println!("best checkpoint: {}", outcome.best.display());
    println!("last checkpoint: {}", outcome.last.display());
    Ok(())
}

fn enhance(g: &GlobalArgs, a: &EnhanceArgs) -> Result<(), Failure> {
    let (net, ckpt) = load_checkpoint(g)?;
    let out = out_dir(g, ".")?;
    for input in &a.inputs {
        let noisy = read_wav(input)?;
        let clean = enhance_waveform(&net, &noisy, &ckpt.analysis)?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let dest = out.join(format!("{stem}_enhanced.wav"));
        write_wav(&dest, &clean, WavEncoding::Float32)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> Result<(), Failure> {
    let cfg = run_config(g)?;
    let (net, ckpt) = load_checkpoint(g)?;
    let path = manifest(&a.manifest, &cfg.data.val_manifest, "val")?;
    let set = Dataset::load_manifest(&path, cfg.data.segment_seconds)?;
    let rep = evaluate_dataset(&net, &set, &ckpt.analysis)?;
    print!("{}", rep.to_table());
    if g.out.is_some() {
        let dir = out_dir(g, ".")?;
        write_text(&dir.join("metrics.txt"), &rep.to_table())?;
        write_text(&dir.join("metrics.kv"), &rep.to_key_values())?;
    }
    Ok(())
}

fn toygen(g: &GlobalArgs, a: &ToygenArgs) -> Result<(), Failure> {
    let seed = match g.seed {
        Some(s) => s,
        None => run_config(g)?.seed,
    };
    let out = out_dir(g, "toy")?;
    let path = toy::generate(
        &ToyConfig {
            n_pairs: a.pairs,
            seed,
            seconds: a.seconds,
            snr_min_db: a.snr_min,
            snr_max_db: a.snr_max,
        },
        &out,
    )?;
    println!("{}", path.display());
    Ok(())
}

fn inspect(g: &GlobalArgs) -> Result<(), Failure> {
    let model = match &g.checkpoint {
        Some(_) => load_checkpoint(g)?.1.model,
        None => run_config(g)?.model,
    };
    print!("{}", report::inspect(&model)?);
    Ok(())
}

fn ablate(g: &GlobalArgs, a: &AblateArgs) -> Result<(), Failure> {
    let base = run_config(g)?;
    let out = out_dir(g, "runs/ablate")?;
    let sets = if a.params_only {
        None
    } else {
        let train_path = manifest(&a.train_manifest, &base.data.train_manifest, "train")?;
        let val_path = a
            .val_manifest
            .clone()
            .or_else(|| base.data.val_manifest.clone())
            .unwrap_or_else(|| train_path.clone());
        Some((
            Arc::new(Dataset::load_manifest(&train_path, base.data.segment_seconds)?),
            Dataset::load_manifest(&val_path, base.data.segment_seconds)?,
        ))
    };
    let mut rows = Vec::new();
    for &mode in &a.modes {
        for &q in &a.q_values {
            let mut cfg = base.clone();
            cfg.apply(&Overrides {
                q: Some(q),
                fusion: Some(mode),
                ..Default::default()
            })?;
            let net = Network::new(cfg.model.clone(), cfg.seed)?;
            let params = net.num_params();
            let scores = match &sets {
                None => None,
                Some((train_set, val_set)) => {
                    let dir = out.join(format!("q{q}_{mode}"));
                    let mut trainer = Trainer::new(net, cfg.train.clone(), cfg.loss, cfg.stft)?;
                    trainer.fit(train_set.clone(), val_set, &dir)?;
                    let best = Checkpoint::load(dir.join("best.safetensors"))?.network()?;
                    let v = validate(&best, val_set, &cfg.loss, &cfg.stft)?;
                    Some((v.report.mean_noisy(), v.report.mean_enhanced()))
                }
            };
            rows.push(AblationRow {
                q,
                mode,
                params,
                scores,
            });
        }
    }
    let table = report::ablation_table(&rows);
    print!("{table}");
    write_text(&out.join("ablation.txt"), &table)?;
    Ok(())
}
