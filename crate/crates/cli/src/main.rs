mod report;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use tstcc::data::{import_csv, load_dataset, make_synthetic, read_tsd_header, save_dataset, write_tsd};
use tstcc::pipeline::checkpoint::checksum;
use tstcc::pipeline::{prepare, run_protocol, Ablation, Protocol, RunConfig};
use tstcc::rng::SeedStream;
use tstcc::Error;

const DEFAULTS_HELP: &str = "\
Training defaults (override in the config file or with flags):
  optimizer      Adam, lr 3e-4, weight decay 3e-4, beta1 0.9, beta2 0.99, eps 1e-8
  epochs         40, batch size 128 (shrunk to the training-set size)
  temperature    tau 0.2
  loss weights   lambda1 1.0, lambda2 0.7 (self-supervised); lambda3 0.01, lambda4 0.7 (class-aware)
  augmentation   weak: scale ratio 2 + jitter 0.05; strong: up to 10 segments + jitter 0.3
  model          encoder channels 32/64/128, kernel 8; transformer h 100, 4 layers, 4 heads, dropout 0.1
  horizon        predict 40% of the latent length

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
Set TSTCC_THREADS to cap worker threads.";

#[derive(Parser)]
#[command(name = "tstcc", version, about = "Contrastive time-series representation learning", after_help = DEFAULTS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a headerless CSV (C*T values, then a label; -1 = unlabeled) to TSD1.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        channels: usize,
        #[arg(long)]
        length: usize,
        #[arg(long)]
        classes: usize,
    },
    /// Write a synthetic train/test pair of noisy sinusoid classes.
    Synth(SynthArgs),
    /// Run a training protocol end to end.
    Run(RunArgs),
    /// Aggregate report.csv files into mean and std per protocol and label fraction.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Allow several protocols in one table, one row per group.
        #[arg(long)]
        group: bool,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the header of a TSD1 file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for train.tsd and test.tsd.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 128)]
    length: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// tstcc, catcc, supervised or random_init; overrides [run] protocol.
    protocol: Option<Protocol>,
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Run directory; overrides [output] dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    labels_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// full, tc_only, tc_xaug, weak_only or strong_only.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Validate config and data shapes without training.
    #[arg(long)]
    dry_run: bool,
}

/// Percentage with one decimal, ties to even.
pub fn percent(x: f64) -> String {
    format!("{:.1}", (x * 1000.0).round_ties_even() / 10.0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 1,
                Error::NonFinite { .. } | Error::NoPositivePairs => 3,
                Error::Format(_) | Error::Data(_) | Error::Shape(_) | Error::Io(_) => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TSTCC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("TSTCC_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("TSTCC_THREADS must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Convert {
            input,
            output,
            channels,
            length,
            classes,
        } => cmd_convert(&input, &output, channels, length, classes),
        Command::Synth(a) => cmd_synth(&a),
        Command::Run(a) => cmd_run(a),
        Command::Report { run_dirs, group, output } => report::cmd_report(&run_dirs, group, output.as_deref()),
        Command::Inspect { path } => cmd_inspect(&path),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_convert(input: &Path, output: &Path, channels: usize, length: usize, classes: usize) -> Result<()> {
    let f = File::open(input).map_err(Error::Io).with_context(|| format!("opening {}", input.display()))?;
    let name = input.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let d = import_csv(BufReader::new(f), channels, length, classes, name).with_context(|| format!("reading {}", input.display()))?;
    let mut bytes = Vec::new();
    write_tsd(&mut bytes, &d)?;
    std::fs::write(output, &bytes).map_err(Error::Io).with_context(|| format!("writing {}", output.display()))?;
    println!("rows {}  sha256 {}", d.len(), checksum(&bytes));
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir).map_err(Error::Io)?;
    let root = SeedStream::new(a.seed);
    for (file, per_class, tag) in [("train.tsd", a.train_per_class, "train"), ("test.tsd", a.test_per_class, "test")] {
        let mut d = make_synthetic(per_class, a.channels, a.length, a.classes, a.noise, root.named(tag).key())?;
        d.set_name(tag);
        let path = a.out_dir.join(file);
        save_dataset(&path, &d)?;
        println!("{}: {} samples, class counts {:?}", path.display(), d.len(), d.class_counts());
    }
    Ok(())
}

fn build_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.protocol {
        cfg.run.protocol = p;
    }
    if let Some(p) = &a.train {
        cfg.data.train = Some(p.clone());
    }
    if let Some(p) = &a.test {
        cfg.data.test = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.output.dir = Some(p.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(f) = a.labels_fraction {
        cfg.data.labels_fraction = f;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(ab) = a.ablation {
        ab.apply(&mut cfg.train.ablation);
    }
    cfg.run.dry_run |= a.dry_run;
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: Option<&PathBuf>, what: &str) -> Result<tstcc::data::Dataset> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} dataset given (--{what} or [data] {what})")))?;
    Ok(load_dataset(path).with_context(|| format!("loading {}", path.display()))?)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = build_config(&a)?;
    let train = load(cfg.data.train.as_ref(), "train")?;
    let test = load(cfg.data.test.as_ref(), "test")?;
    let prep = prepare(&cfg, &train, &test)?;
    if cfg.run.dry_run {
        println!(
            "dry run ok: protocol {}, {} train ({} labeled), {} test, {} channels x {}, latent {} x {}, horizon {}",
            cfg.run.protocol,
            prep.train.len(),
            prep.split.labeled.len(),
            prep.test.len(),
            prep.dims.in_channels,
            prep.dims.length,
            prep.dims.latent_dim,
            prep.dims.latent_len,
            prep.dims.horizon
        );
        return Ok(());
    }
    info!("protocol {} seed {} labels_fraction {}", cfg.run.protocol, cfg.train.seed, cfg.data.labels_fraction);
    let r = run_protocol(&cfg, &train, &test, cfg.output.dir.as_deref())?;
    for (file, id) in &r.checkpoints {
        println!("{file} {id}");
    }
    if let Some(a) = r.pseudo_agreement {
        println!("pseudo-label agreement {}%", percent(a));
    }
    println!("accuracy {}%  MF1 {}%", percent(r.metrics.accuracy), percent(r.metrics.mf1));
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let f = File::open(path).map_err(Error::Io).with_context(|| format!("opening {}", path.display()))?;
    let h = read_tsd_header(&mut BufReader::new(f))?;
    println!("format    TSD1 v{}", h.version);
    println!("samples   {}", h.samples);
    println!("channels  {}", h.channels);
    println!("length    {}", h.length);
    println!("classes   {}", h.num_classes);
    Ok(())
}
