//! `deepgesi` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deepgesi::audio::{ingest, AudioBuffer};
use deepgesi::config::RunConfig;
use deepgesi::evaluation::{bench, evaluate, write_report, BenchScope, EvalReport};
use deepgesi::labels::{load_manifest, select, synth_dataset, ManifestEntry, Split};
use deepgesi::model::{Activation, Model, PositionalEncoding};
use deepgesi::training::{prepare_examples, Checkpoint, EpochLog, Precision, Trainer};
use deepgesi::{write_atomic, Error, Scalar};

const CONFIG_FILE: &str = "config.ini";
const METRICS_FILE: &str = "metrics.csv";
const LAST_CKPT: &str = "last.ckpt";
const BEST_CKPT: &str = "best.ckpt";

#[derive(Parser)]
#[command(
    name = "deepgesi",
    version,
    about = "Non-intrusive GESI intelligibility prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus (WAVs plus manifest.csv).
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split, monitoring the val split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt` instead of starting afresh.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score WAV files; prints `path<TAB>score` per file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        wav: Vec<PathBuf>,
    },
    /// Score one manifest split and write report and scatter files.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-thread inference latency over randomly chosen utterances.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Restrict the pool to one split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = Scope::EndToEnd)]
        scope: Scope,
        /// Also write `bench.txt` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per activation or positional-encoding variant and
    /// compare them on a held-out split.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// INI file applied on top of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    pe: Option<String>,
    #[arg(long)]
    target_sr: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    EndToEnd,
    ForwardOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Activation,
    Pe,
}

/// A command-line mistake rather than bad data.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { n, seed, out } => {
            let entries = synth_dataset(n as usize, seed, &out)?;
            println!("wrote {} utterances to {}", entries.len(), out.display());
            Ok(())
        }
        Command::Train {
            manifest,
            out,
            resume,
            cfg,
        } => {
            let cfg = resolve_config(&cfg)?;
            let entries = load_manifest(&manifest)?;
            train(&cfg, &entries, &out, resume).map(|_| ())
        }
        Command::Predict { checkpoint, wav } => predict(&checkpoint, &wav),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let split = parse_split(&split)?;
            let out = out.unwrap_or_else(|| parent_dir(&checkpoint));
            let (cfg, model) = Checkpoint::<f32>::load_model(&checkpoint)?;
            let entries = split_entries(&load_manifest(&manifest)?, split, &manifest)?;
            let report = evaluate(
                &model,
                &entries,
                &cfg.ingest_options(),
                split.name(),
                env_threads()?,
            )?;
            echo_config(&out, &cfg)?;
            write_report(&report, &out)?;
            print_report(&report);
            Ok(())
        }
        Command::Bench {
            checkpoint,
            manifest,
            n,
            split,
            seed,
            repetitions,
            warmup,
            scope,
            out,
        } => {
            if n == 0 || repetitions == 0 {
                return Err(usage("--n and --repetitions must be positive"));
            }
            let (cfg, model) = Checkpoint::<f32>::load_model(&checkpoint)?;
            let mut pool = load_manifest(&manifest)?;
            if let Some(s) = split {
                pool = split_entries(&pool, parse_split(&s)?, &manifest)?;
            }
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            pool.truncate(n);
            let buffers = pool
                .iter()
                .map(|e| ingest(&e.audio_path, &cfg.ingest_options()))
                .collect::<deepgesi::Result<Vec<AudioBuffer>>>()?;
            let scope = match scope {
                Scope::EndToEnd => BenchScope::EndToEnd,
                Scope::ForwardOnly => BenchScope::ForwardOnly,
            };
            let stats = bench(&model, &buffers, repetitions, warmup, scope)?;
            let secs: f64 = buffers.iter().map(|b| b.duration_secs()).sum();
            let text = format!(
                "utterances = {}\naudio_seconds = {:.3}\nmeasurements = {}\nmean_s = {:.6}\n\
                 p50_s = {:.6}\np95_s = {:.6}\nthroughput_per_s = {:.3}\n",
                buffers.len(),
                secs,
                stats.count,
                stats.mean,
                stats.p50,
                stats.p95,
                stats.throughput
            );
            print!("{text}");
            if let Some(out) = out {
                echo_config(&out, &cfg)?;
                write_atomic(out.join("bench.txt"), text.as_bytes())?;
            }
            Ok(())
        }
        Command::Ablate {
            manifest,
            out,
            study,
            split,
            cfg,
        } => {
            let base = resolve_config(&cfg)?;
            let split = parse_split(&split)?;
            let entries = load_manifest(&manifest)?;
            let held_out = split_entries(&entries, split, &manifest)?;
            ablate(&base, &entries, &held_out, split, study, &out)
        }
    }
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Split::parse(s).map_err(|e| usage(e.to_string()))
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn split_entries(
    entries: &[ManifestEntry],
    split: Split,
    manifest: &Path,
) -> anyhow::Result<Vec<ManifestEntry>> {
    let sel = select(entries, split);
    if sel.is_empty() {
        bail!("split `{split}` of {} is empty", manifest.display());
    }
    Ok(sel)
}

fn env_threads() -> anyhow::Result<Option<usize>> {
    match std::env::var("DEEPGESI_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!(
                "DEEPGESI_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

/// Defaults, then the config file, then the dedicated flags, then `--set`.
fn resolve_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| usage(format!("{e:#}")))?;
        cfg.apply_ini(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(v) = &args.activation {
        overrides.push(("model.activation".into(), v.clone()));
    }
    if let Some(v) = &args.pe {
        overrides.push(("model.positional_encoding".into(), v.clone()));
    }
    if let Some(v) = args.target_sr {
        overrides.push(("sinc.sample_rate".into(), v.to_string()));
    }
    if let Some(v) = args.seed {
        overrides.push(("train.seed".into(), v.to_string()));
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in overrides {
        cfg.set(&k, &v).map_err(|e| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(dir.join(CONFIG_FILE), cfg.to_ini().as_bytes())?;
    Ok(())
}

struct TrainSummary {
    best_val_loss: f64,
    epochs: usize,
}

fn train(
    cfg: &RunConfig,
    entries: &[ManifestEntry],
    out: &Path,
    resume: bool,
) -> anyhow::Result<TrainSummary> {
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, entries, out, resume),
        Precision::F64 => train_as::<f64>(cfg, entries, out, resume),
    }
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    entries: &[ManifestEntry],
    out: &Path,
    resume: bool,
) -> anyhow::Result<TrainSummary> {
    let train_set = select(entries, Split::Train);
    if train_set.is_empty() {
        bail!("the manifest has no `train` entries");
    }
    let val_set = select(entries, Split::Val);
    let opts = cfg.ingest_options();
    let train_ex = prepare_examples::<T>(&train_set, cfg.stft, &opts)?;
    let val_ex = prepare_examples::<T>(&val_set, cfg.stft, &opts)?;

    let last = out.join(LAST_CKPT);
    let metrics = out.join(METRICS_FILE);
    let mut trainer = if resume {
        let ckpt = Checkpoint::<T>::load(&last)?;
        // Stopping rules may change on resume (to extend a run); nothing else.
        let mut expected = *cfg;
        let saved = ckpt.config.train;
        expected.train.max_epochs = saved.max_epochs;
        expected.train.patience = saved.patience;
        expected.train.max_steps = saved.max_steps;
        expected.train.stop_below = saved.stop_below;
        if ckpt.config != expected {
            return Err(usage(format!(
                "{} was written with a different configuration; rerun with the config echoed in {}",
                last.display(),
                out.join(CONFIG_FILE).display()
            )));
        }
        let mut tr = ckpt.into_trainer()?;
        tr.cfg = cfg.train;
        truncate_metrics(&metrics, tr.progress.epoch)?;
        tr
    } else {
        let model = Model::<T>::new(cfg.model, cfg.stft, cfg.sinc, cfg.train.seed)?;
        Trainer::new(model, cfg.train)?
    };
    echo_config(out, cfg)?;
    if !metrics.exists() {
        write_atomic(&metrics, format!("{}\n", EpochLog::CSV_HEADER).as_bytes())?;
    }
    eprintln!(
        "training on {} utterances, validating on {}",
        train_ex.len(),
        val_ex.len()
    );
    let reason = trainer.fit(&train_ex, &val_ex, |tr, log| {
        append_line(&metrics, &log.csv_row())?;
        Checkpoint::from_trainer(tr, opts).save(&last)?;
        if tr.progress.bad_epochs == 0 {
            Checkpoint::best_of(tr, opts).save(out.join(BEST_CKPT))?;
        }
        eprintln!(
            "epoch {:>3}  step {:>6}  train {:.6}  val {:.6}",
            log.epoch, log.steps, log.train_loss, log.val_loss
        );
        Ok(())
    })?;
    let best = out.join(BEST_CKPT);
    if !best.exists() {
        Checkpoint::best_of(&trainer, opts).save(&best)?;
    }
    eprintln!(
        "stopped ({reason:?}) after epoch {}; best monitored loss {:.6}",
        trainer.progress.epoch, trainer.progress.best_val_loss
    );
    Ok(TrainSummary {
        best_val_loss: trainer.progress.best_val_loss,
        epochs: trainer.progress.epoch,
    })
}

fn append_line(path: &Path, line: &str) -> deepgesi::Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(io)?;
    writeln!(f, "{line}").map_err(io)
}

/// Drops metric rows past `epoch`, so a resumed run's log has no duplicates.
fn truncate_metrics(path: &Path, epoch: usize) -> anyhow::Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())?;
    Ok(())
}

fn predict(checkpoint: &Path, wavs: &[PathBuf]) -> anyhow::Result<()> {
    let (cfg, model) = Checkpoint::<f32>::load_model(checkpoint)?;
    let stft = deepgesi::features::Stft::new(cfg.stft)?;
    let opts = cfg.ingest_options();
    let mut failed = 0;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for path in wavs {
        match ingest(path, &opts).and_then(|b| model.predict(&b, &stft)) {
            Ok(s) => writeln!(lock, "{}\t{}", path.display(), s.utterance)?,
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} files could not be scored", wavs.len());
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!(
        "{}: n = {}  mse = {:.6}  lcc = {:.4}  srcc = {:.4}  failures = {}",
        r.condition,
        r.pairs.len(),
        r.mse,
        r.lcc,
        r.srcc,
        r.failures.len()
    );
}

fn ablate(
    base: &RunConfig,
    entries: &[ManifestEntry],
    held_out: &[ManifestEntry],
    split: Split,
    study: Study,
    out: &Path,
) -> anyhow::Result<()> {
    let (key, variants): (&str, Vec<&str>) = match study {
        Study::Activation => (
            "model.activation",
            [
                Activation::Relu,
                Activation::LeakyRelu,
                Activation::Prelu,
                Activation::Maxout,
            ]
            .iter()
            .map(|a| a.name())
            .collect(),
        ),
        Study::Pe => (
            "model.positional_encoding",
            [
                PositionalEncoding::Sinusoidal,
                PositionalEncoding::Learned,
                PositionalEncoding::Rope,
            ]
            .iter()
            .map(|p| p.name())
            .collect(),
        ),
    };
    let mut table = format!("variant,epochs,best_val_loss,mse,lcc,srcc  # {key} on {split}\n");
    for v in variants {
        let mut cfg = *base;
        cfg.set(key, v)?;
        let dir = out.join(v);
        eprintln!("== {key} = {v}");
        let summary = train(&cfg, entries, &dir, false)?;
        let (_, model) = Checkpoint::<f32>::load_model(dir.join(BEST_CKPT))?;
        let report = evaluate(
            &model,
            held_out,
            &cfg.ingest_options(),
            split.name(),
            env_threads()?,
        )?;
        write_report(&report, &dir)?;
        print_report(&report);
        table.push_str(&format!(
            "{v},{},{},{},{},{}\n",
            summary.epochs, summary.best_val_loss, report.mse, report.lcc, report.srcc
        ));
    }
    echo_config(out, base)?;
    let name = match study {
        Study::Activation => "ablation_activation.csv",
        Study::Pe => "ablation_pe.csv",
    };
    write_atomic(out.join(name), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
