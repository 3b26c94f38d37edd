//! `ksoftmax` command-line driver.
//!
//! Every config key `section.key` also has a flag twin `--section.key VALUE`,
//! rewritten to `--set section.key=VALUE` before parsing. Exit codes: 0 on
//! success, 1 on validation or I/O errors, 2 when training diverges.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use ksoftmax::config::ExperimentConfig;
use ksoftmax::data::{generate_synthetic, SplitName, SynthConfig};
use ksoftmax::eval::{self, disambiguation_probe, emit_kernel_curves, render_probe_text, render_probe_tsv};
use ksoftmax::gradcheck::{audit_kernel, audit_output_layer, AuditReport, Tolerance};
use ksoftmax::kernels::{parse_kernel_list, KernelKind, KernelSpec};
use ksoftmax::training::{self, grid_search, load_run, parse_grid_axis, render_grid_table, run_experiment};

const CONFIG_SECTIONS: [&str; 4] = ["data", "synth", "model", "train"];

#[derive(Debug, Parser)]
#[command(name = "ksoftmax", version, about = "Kernelized mixture softmax language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write its artifacts under --out.
    Train(TrainArgs),
    /// Report the perplexity of a saved checkpoint on one split.
    Eval(EvalArgs),
    /// Train every point of a hyperparameter grid and rank by dev perplexity.
    Grid(GridArgs),
    /// Compare analytic kernel gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the one-dimensional profile and slope of each kernel as CSV.
    Curves(CurvesArgs),
    /// Show embedding neighbors of query words and how contexts separate them.
    Probe(ProbeArgs),
    /// Generate a synthetic Zipf corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; takes precedence over the config file and KSOFTMAX_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut exp = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{o}` must have the form section.key=value"))?;
            exp.set(k.trim(), v.trim())?;
        }
        exp.resolve_seed(self.seed)?;
        Ok(exp)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Output directory for config echo, metrics, log and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory, e.g. `<out>/best`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value_t = training::EVAL_BATCH)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// One grid axis `section.key=v1,v2,...`; use `|` between values that
    /// contain commas. Repeat for a Cartesian product.
    #[arg(long = "axis", required = true)]
    axes: Vec<String>,
    /// Points trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Comma-separated kernel specs, or `all`.
    #[arg(long = "kernel", default_value = "all")]
    kernels: String,
    #[arg(long, value_delimiter = ',', default_value = "2,8,32")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Tolerance::default().rel)]
    rel_tol: f64,
    #[arg(long, default_value_t = Tolerance::default().abs)]
    abs_tol: f64,
    /// Also audit full output-layer losses for K = 1, 2, 3 mixtures.
    #[arg(long)]
    pipeline: bool,
}

#[derive(Debug, Args)]
struct CurvesArgs {
    /// Comma-separated kernel specs.
    #[arg(long, default_value = "rbf,wav,log,pow")]
    kernels: String,
    #[arg(long, default_value_t = 10.0)]
    xmax: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Directory receiving one CSV per kernel.
    #[arg(long, default_value = "curves")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query word; repeatable.
    #[arg(long = "query", required = true)]
    queries: Vec<String>,
    /// Whitespace-separated context words; repeatable.
    #[arg(long = "context")]
    contexts: Vec<String>,
    /// Neighbors reported per query.
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    tsv: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    zipf_s: Option<f64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Invalid(anyhow::Error),
    Diverged,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Invalid(e.into())
    }
}

/// Rewrites `--section.key VALUE` and `--section.key=VALUE` into `--set`.
fn expand_flag_twins(args: Vec<String>) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--" {
            out.push(a);
            out.extend(it);
            break;
        }
        let twin = a.strip_prefix("--").and_then(|flag| {
            let (name, inline) = match flag.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (flag, None),
            };
            let (section, key) = name.split_once('.')?;
            CONFIG_SECTIONS
                .contains(&section)
                .then(|| (format!("{section}.{}", key.replace('-', "_")), inline))
        });
        match twin {
            Some((key, Some(v))) => {
                out.push("--set".into());
                out.push(format!("{key}={v}"));
            }
            Some((key, None)) => {
                let v = it.next().ok_or_else(|| anyhow!("flag `--{key}` needs a value"))?;
                out.push("--set".into());
                out.push(format!("{key}={v}"));
            }
            None => out.push(a),
        }
    }
    Ok(out)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let exp = args.experiment.load()?;
    let outcome = run_experiment(&exp, Some(&args.out))?;
    for m in &outcome.metrics {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  dev_ppl {:.3}",
            m.epoch, m.train_loss, m.dev_ppl
        );
    }
    if let Some(d) = outcome.divergence {
        eprintln!(
            "error: {d}; last finite state kept in {}",
            args.out.join("last").display()
        );
        return Err(Failure::Diverged);
    }
    println!(
        "best dev ppl {} at epoch {} (vocab {})",
        outcome.best_dev_ppl, outcome.best_epoch, outcome.vocab_size
    );
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let run =
        load_run(&args.checkpoint).with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let split = run.split()?;
    let ppl = eval::perplexity(&run.state.model, split.part(args.split), args.batch_size)?;
    println!("{} ppl {ppl}", format!("{:?}", args.split).to_lowercase());
    Ok(())
}

fn grid(args: GridArgs) -> Result<()> {
    let exp = args.experiment.load()?;
    let axes = args
        .axes
        .iter()
        .map(|a| parse_grid_axis(a))
        .collect::<Result<Vec<_>, _>>()?;
    let results = grid_search(&exp, &axes, args.jobs, Some(&args.out))?;
    print!("{}", render_grid_table(&results));
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let specs: Vec<KernelSpec<f64>> = if args.kernels == "all" {
        KernelKind::ALL.iter().map(|&k| KernelSpec::new(k)).collect()
    } else {
        parse_kernel_list(&args.kernels)?
    };
    let tol = Tolerance {
        rel: args.rel_tol,
        abs: args.abs_tol,
    };
    let mut reports: Vec<AuditReport> = Vec::new();
    for spec in &specs {
        for &d in &args.dims {
            reports.push(audit_kernel(spec, d, args.trials, args.seed, tol)?);
        }
    }
    if args.pipeline {
        for k in 1..=3 {
            for start in 0..specs.len() {
                let comps: Vec<_> = (0..k).map(|i| specs[(start + i) % specs.len()]).collect();
                reports.push(audit_output_layer(comps, 2, 5, 3, 0.1, args.seed, tol)?);
            }
        }
    }
    let mut ok = true;
    for r in &reports {
        println!("{}", r.summary());
        for f in r.failures.iter().take(3) {
            println!(
                "    trial {} {}: analytic {} numeric {}",
                f.trial, f.entry, f.analytic, f.numeric
            );
        }
        ok &= r.passed();
    }
    Ok(ok)
}

fn file_stem(spec: &str) -> String {
    spec.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn curves(args: CurvesArgs) -> Result<()> {
    let specs = parse_kernel_list::<f64>(&args.kernels)?;
    let curves = emit_kernel_curves(&specs, args.xmax, args.steps)?;
    fs::create_dir_all(&args.out)?;
    for (name, csv) in curves {
        let path = args.out.join(format!("{}.csv", file_stem(&name)));
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let run = load_run(&args.checkpoint)?;
    let vocab = &run.vocab;
    let lookup = |w: &str| {
        let w = if vocab.lowercase() {
            w.to_lowercase()
        } else {
            w.to_string()
        };
        vocab.get(&w).ok_or_else(|| anyhow!("unknown token `{w}`"))
    };
    let queries = args.queries.iter().map(|q| lookup(q)).collect::<Result<Vec<_>>>()?;
    let contexts: Vec<Vec<usize>> = args.contexts.iter().map(|c| vocab.encode_line(c)).collect();
    let reports = disambiguation_probe(&run.state.model, &queries, &contexts, args.top)?;
    let name = |id: usize| vocab.token(id).unwrap_or("?").to_string();
    if args.tsv {
        print!("{}", render_probe_tsv(&reports, name));
    } else {
        print!("{}", render_probe_text(&reports, name));
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        zipf_s: args.zipf_s.unwrap_or(d.zipf_s),
        vocab: args.vocab.unwrap_or(d.vocab),
        tokens: args.tokens.unwrap_or(d.tokens),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    let lines = generate_synthetic(&config)?;
    let mut text = lines.join("\n");
    text.push('\n');
    match &args.out {
        Some(p) => write_file(p, &text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train(a)?,
        Command::Eval(a) => evaluate(a)?,
        Command::Grid(a) => grid(a)?,
        Command::Gradcheck(a) => {
            if !gradcheck(a)? {
                return Err(Failure::Invalid(anyhow!("gradient check failed")));
            }
        }
        Command::Curves(a) => curves(a)?,
        Command::Probe(a) => probe(a)?,
        Command::Synth(a) => synth(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv = match expand_flag_twins(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Diverged) => ExitCode::from(2),
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
