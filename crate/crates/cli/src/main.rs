//! `mcfbc`: train, evaluate and audit the two-stream FBC anti-spoofing model.
//!
//! Exit codes: 0 success, 1 audit or oracle failure, 2 configuration error,
//! 3 data error, 4 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mcfbc::colorspace::{ColorSpace, ImageTensor};
use mcfbc::data::{
    generate_synthetic, load_dataset, load_manifest, make_splits, scan_directory, DatasetManifest, Split, SplitRatio,
    SplitStrategy, SynthConfig,
};
use mcfbc::metrics::MetricsReport;
use mcfbc::oracle;
use mcfbc::train::{audit, score_split, train, AuditSize, Checkpoint, GradCheckOptions, PreparedSplit, TrainConfig};
use mcfbc::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "mcfbc", version, about = "Multi-color-space FBC face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.fbc and train_log.jsonl to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Manifest CSV or dataset directory. Overrides the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory. Overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from an existing checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score one split; writes report.json and scores.csv to --out.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Decision threshold; defaults to the EER threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "tiny")]
        size: SizeArg,
        /// Deliberately perturb the backward pass.
        #[arg(long)]
        corrupt_backward: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run the reference oracles and print a pass/fail table.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Convert an image between color spaces (channels stored as 8-bit).
    Color {
        #[arg(long)]
        from: ColorSpace,
        #[arg(long)]
        to: ColorSpace,
        input: PathBuf,
        output: PathBuf,
    },
    /// Generate the synthetic two-class dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images per class.
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Distance between the class chroma centers.
        #[arg(long)]
        delta: Option<f64>,
        out_dir: PathBuf,
    },
    /// Assign train/valid/test splits by group; rewrites the manifest in place.
    Split {
        #[arg(long, default_value = "3:1:1")]
        ratio: SplitRatio,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "apportioned")]
        strategy: StrategyArg,
        /// Write here instead of rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    Tiny,
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Apportioned,
    HashBucket,
}

/// Training run description: hyperparameters plus where to read and write.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// A manifest file, or a directory holding `manifest.csv` or `<label>/` folders.
fn resolve_manifest(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        let inner = path.join("manifest.csv");
        if inner.is_file() {
            return Ok(load_manifest(&inner)?);
        }
        let manifest = scan_directory(path)?;
        let entries = make_splits(manifest.entries, SplitRatio::default(), 0, SplitStrategy::Apportioned)?;
        return Ok(DatasetManifest { entries, ..manifest });
    }
    Ok(load_manifest(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn cmd_train(config: &Path, data: Option<PathBuf>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let run: RunConfig =
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", config.display())))?;
    run.train.validate()?;
    let data = data.or(run.data).ok_or_else(|| config_error("no dataset given (--data or \"data\")"))?;
    let out = out.or(run.out).ok_or_else(|| config_error("no output directory given (--out or \"out\")"))?;
    let manifest = resolve_manifest(&data)?;
    let dataset = load_dataset(&manifest, run.train.model.backbone.input_size)?;
    create_dir(&out)?;
    let ckpt_path = out.join("model.fbc");
    let log_path = out.join("train_log.jsonl");
    let mut ckpt = if resume && ckpt_path.is_file() {
        let mut c = Checkpoint::load(&ckpt_path)?;
        if c.config.model != run.train.model {
            return Err(config_error("model configuration differs from the checkpoint being resumed"));
        }
        c.config.epochs = run.train.epochs;
        c
    } else {
        Checkpoint::new(run.train.clone())?
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let logs = train(&mut ckpt, &dataset, |entry, state| {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        state.save(&ckpt_path)
    })?;
    ckpt.save(&ckpt_path)?;
    if let Some(last) = logs.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, split: Split, out: &Path, threshold: Option<f64>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let model = ckpt.model();
    let manifest = resolve_manifest(data)?;
    let dataset = load_dataset(&manifest, model.config.backbone.input_size)?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("no samples in split {split}")).into());
    }
    let prepared = PreparedSplit::new(&model.config, &samples)?;
    let scores = score_split(&model, &prepared)?;
    let report = MetricsReport::compute(&scores, threshold)?;
    create_dir(out)?;
    scores.write_csv(&out.join("scores.csv"))?;
    let json = serde_json::to_string_pretty(&report)?;
    let report_path = out.join("report.json");
    fs::write(&report_path, &json).map_err(|e| Error::io(&report_path, e))?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, size: SizeArg, corrupt_backward: bool, json: bool) -> Result<bool> {
    let size = match size {
        SizeArg::Tiny => AuditSize::Tiny,
        SizeArg::Small => AuditSize::Small,
    };
    let opts = GradCheckOptions {
        corrupt_backward,
        ..Default::default()
    };
    let report = audit(size, seed, &opts)?;
    if json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!(
            "{} max_rel_err={:.3e} worst={} checked={} skipped_kinks={}",
            if report.passed { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.worst_coordinate,
            report.checked,
            report.skipped_kinks
        );
    }
    Ok(report.passed)
}

fn cmd_oracle(seed: u64, json: bool) -> Result<bool> {
    let results = oracle::run_all(seed)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!(
                "{:<4} {:<14} n={:<5} max_err={:.3e} tol={:.0e}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.instances,
                r.max_error,
                r.tolerance
            );
        }
    }
    Ok(results.iter().all(|r| r.passed))
}

fn cmd_color(from: ColorSpace, to: ColorSpace, input: &Path, output: &Path) -> Result<()> {
    if from == to {
        return Err(Error::InvalidColorPair { from, to }.into());
    }
    let raw = ImageTensor::load(input)?;
    let image = ImageTensor::new(from, raw.tensor().clone())?;
    image.convert(to)?.save(output)?;
    Ok(())
}

fn cmd_synth(seed: u64, n: usize, size: usize, delta: Option<f64>, out_dir: &Path) -> Result<()> {
    let mut config = SynthConfig {
        seed,
        n_per_class: n,
        size,
        ..SynthConfig::default()
    };
    if let Some(d) = delta {
        config.chroma_delta = d;
    }
    config.validate()?;
    let report = generate_synthetic(&config, out_dir)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_split(ratio: SplitRatio, seed: u64, strategy: StrategyArg, out: Option<PathBuf>, manifest: &Path) -> Result<()> {
    let strategy = match strategy {
        StrategyArg::Apportioned => SplitStrategy::Apportioned,
        StrategyArg::HashBucket => SplitStrategy::HashBucket,
    };
    let m = load_manifest(manifest)?;
    let entries = make_splits(m.entries, ratio, seed, strategy)?;
    let m = DatasetManifest { entries, ..m };
    m.write(out.as_deref().unwrap_or(manifest))?;
    println!(
        "train={} valid={} test={}",
        m.count(Split::Train),
        m.count(Split::Valid),
        m.count(Split::Test)
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FBC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| config_error(format!("FBC_THREADS must be a non-negative integer, got '{value}'")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(&config, data, out, resume).map(|_| true),
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            threshold,
        } => cmd_eval(&ckpt, &data, split.into(), &out, threshold).map(|_| true),
        Command::Gradcheck {
            seed,
            size,
            corrupt_backward,
            json,
        } => cmd_gradcheck(seed, size, corrupt_backward, json),
        Command::Oracle { seed, json } => cmd_oracle(seed, json),
        Command::Color {
            from,
            to,
            input,
            output,
        } => cmd_color(from, to, &input, &output).map(|_| true),
        Command::Synth {
            seed,
            n,
            size,
            delta,
            out_dir,
        } => cmd_synth(seed, n, size, delta, &out_dir).map(|_| true),
        Command::Split {
            ratio,
            seed,
            strategy,
            out,
            manifest,
        } => cmd_split(ratio, seed, strategy, out, &manifest).map(|_| true),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numeric) => 4,
        Some(ErrorKind::Data) | None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
