use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use oodkit::detectors::{
    fit_on_bundle, load_detector, save_detector, DetectorSpec, EnergyForm, Method,
};
use oodkit::eval::{render_report, run_benchmark, BenchConfig, ReportFormat, DEFAULT_TPR};
use oodkit::store::{load_bundle, read_npy, write_npy_f64, ArrayF64};
use oodkit::synth::{
    generate_adversarial_head, generate_bundle, generate_signal_noise, AdversarialSpec,
    SignalNoiseSpec, SynthSpec,
};

const THREADS_ENV: &str = "OODKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "oodkit", version, about = "Post-hoc OOD detection over exported embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic bundle.
    Synth(SynthArgs),
    /// Fit detectors on a bundle and write one directory per method.
    Fit(FitArgs),
    /// Benchmark detectors over one or more bundles and render a report.
    Eval(EvalArgs),
    /// Score an N×d float32 NPY array with a saved detector.
    Score(ScoreArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    Standard,
    Adversarial,
    SignalNoise,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(2..))]
    dim: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    n_per_class: u64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    n_test: u64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    n_ood: u64,
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    separation: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = SynthKind::Standard)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
}

/// Hyperparameters applied to every requested method that uses them.
#[derive(Debug, Args)]
struct HyperArgs {
    /// DICE sparsity percentage.
    #[arg(long, value_parser = percent)]
    p: Option<f64>,
    /// ASH pruning percentage.
    #[arg(long, value_parser = percent)]
    prune_percent: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pca_components: Option<u64>,
    /// L2-normalize embeddings for KNN.
    #[arg(long)]
    normalize: Option<bool>,
    #[arg(long, value_parser = fraction)]
    subsample_fraction: Option<f64>,
    /// Covariance ridge relative to trace(Σ)/m.
    #[arg(long, value_parser = non_negative)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    energy_form: Option<EnergyFormArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EnergyFormArg {
    Canonical,
    Printed,
}

impl HyperArgs {
    fn spec(&self, method: Method) -> DetectorSpec {
        DetectorSpec {
            method,
            p: self.p,
            prune_percent: self.prune_percent,
            k: self.k.map(|v| v as usize),
            pca_components: self.pca_components.map(|v| v as usize),
            normalize: self.normalize,
            subsample_fraction: self.subsample_fraction,
            epsilon: self.epsilon,
            energy_form: self.energy_form.map(|f| match f {
                EnergyFormArg::Canonical => EnergyForm::Canonical,
                EnergyFormArg::Printed => EnergyForm::Printed,
            }),
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "method", required = true, value_parser = method)]
    methods: Vec<Method>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parent directory; each method is written to `<out>/<method>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long = "manifest", required_unless_present = "config", conflicts_with = "config")]
    manifests: Vec<PathBuf>,
    #[arg(long = "method", required_unless_present = "config", conflicts_with = "config", value_parser = method)]
    methods: Vec<Method>,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Run configuration file; replaces the manifest, method and hyperparameter flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = fraction)]
    tpr: Option<f64>,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output float64 NPY vector.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FormatArg {
    Csv,
    Markdown,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

/// `--config` file contents; manifest paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    manifests: Vec<PathBuf>,
    detectors: Vec<DetectorSpec>,
    #[serde(default)]
    format: Option<FormatArg>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    tpr: Option<f64>,
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be > 0"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be ≥ 0"))
    }
}

fn percent(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..100.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} outside [0, 100)"))
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} outside (0, 1]"))
    }
}

fn method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

/// Exit 2: the request itself is malformed.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV}={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let base = SynthSpec {
        seed: args.seed,
        dim: args.dim as usize,
        num_classes: args.classes as usize,
        n_per_class: args.n_per_class as usize,
        n_test: args.n_test as usize,
        n_ood: args.n_ood as usize,
        separation: args.separation,
        noise: args.noise,
        ..SynthSpec::default()
    };
    let manifest = match args.kind {
        SynthKind::Standard => {
            base.validate().map_err(|e| usage(e.to_string()))?;
            generate_bundle(&base, &args.out)?
        }
        SynthKind::Adversarial => {
            if base.num_classes < 3 {
                return Err(usage("--kind adversarial needs --classes ≥ 3"));
            }
            let spec = AdversarialSpec {
                base: SynthSpec {
                    recipes: AdversarialSpec::default().base.recipes,
                    ..base
                },
                ..AdversarialSpec::default()
            };
            generate_adversarial_head(&spec, &args.out)?
        }
        SynthKind::SignalNoise => generate_signal_noise(
            &SignalNoiseSpec {
                seed: args.seed,
                noise_dims: args.dim as usize - 1,
                n_per_class: args.n_per_class as usize,
                n_test: args.n_test as usize,
                n_ood: args.n_ood as usize,
                ..SignalNoiseSpec::default()
            },
            &args.out,
        )?,
    };
    println!("{}", manifest.display());
    Ok(())
}

fn fit(args: &FitArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.manifest)
        .with_context(|| format!("loading {}", args.manifest.display()))?;
    for &m in &args.methods {
        let det = fit_on_bundle(&args.hyper.spec(m), &bundle, args.seed)
            .with_context(|| format!("fitting {m}"))?;
        let dir = args.out.join(m.name());
        save_detector(&det, &dir).with_context(|| format!("writing {}", dir.display()))?;
        log::info!("{} fitted on {} rows", det.label(), bundle.id_train.len());
        println!("{}", dir.display());
    }
    Ok(())
}

fn read_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for m in &mut cfg.manifests {
        if m.is_relative() {
            *m = base.join(&*m);
        }
    }
    if cfg.manifests.is_empty() || cfg.detectors.is_empty() {
        return Err(usage("config needs at least one manifest and one detector"));
    }
    if let Some(t) = cfg.tpr {
        fraction(&t.to_string()).map_err(usage)?;
    }
    Ok(cfg)
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (manifests, specs, cfg_format, cfg_seed, cfg_tpr) = match &args.config {
        Some(path) => {
            let c = read_config(path)?;
            (c.manifests, c.detectors, c.format, c.seed, c.tpr)
        }
        None => (
            args.manifests.clone(),
            args.methods.iter().map(|&m| args.hyper.spec(m)).collect(),
            None,
            None,
            None,
        ),
    };
    let format = args.format.or(cfg_format).unwrap_or(FormatArg::Markdown);
    let config = BenchConfig {
        tpr: args.tpr.or(cfg_tpr).unwrap_or(DEFAULT_TPR),
        seed: args.seed.or(cfg_seed).unwrap_or(0),
    };
    let bundles = manifests
        .iter()
        .map(|m| load_bundle(m).with_context(|| format!("loading {}", m.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = run_benchmark(&bundles, &specs, &config)?;
    let text = render_report(&report, format.into())?;
    match &args.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn score(args: &ScoreArgs) -> anyhow::Result<()> {
    let det = load_detector(&args.detector)
        .with_context(|| format!("loading detector {}", args.detector.display()))?;
    let rows = read_npy(&args.input)?;
    let scores = det.score_rows(&rows)?;
    write_npy_f64(&ArrayF64::vector(scores), &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
    }
}

/// The context chain, stopping at the first library error (its message already embeds its causes).
fn describe(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.is::<oodkit::Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            eprintln!("run `oodkit --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
