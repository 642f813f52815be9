//! Command-line front end: pretraining, training, evaluation, corpus
//! perturbation and statistics, seed sweeps, sweep comparison, report
//! post-processing, and the gradient check suite.
//!
//! Exit codes: 0 success, 1 usage or parameter error, 2 data/format error,
//! 3 numerical failure. Errors go to standard error; results go to standard
//! output or the file named by `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use clap::{Args, Parser, Subcommand};

use arct::corpus::{
    corpus_negation_stats, default_negation_lexicon, load_arct_tsv, load_nli_tsv,
    load_word_vectors, make_half_split, make_unbalanced, save_arct_tsv,
};
use arct::diagnostics::{gradient_suite, DEFAULT_TOL};
use arct::encoder::save_encoder;
use arct::experiments::{
    histogram_bins, parse_report, pct_change, render_report, run_sweep, welch_t_test, AccField,
    SweepRow,
};
use arct::heads::{load_model, save_model, ModelKind};
use arct::tensor::Tensor;
use arct::training::{
    evaluate_model, pretrain_nli, train_model, ArctSplits, EncoderSource, NliSplits, TrainConfig,
};
use arct::{Error, Result};

#[derive(Parser)]
#[command(
    name = "arct",
    version,
    about = "Warrant-selection models: training, transfer, perturbations, and seed-sweep statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the sentence encoder on an inference corpus and save it
    PretrainNli(PretrainArgs),
    /// Train a warrant-selection model on a data directory
    Train(TrainArgs),
    /// Print a saved model's accuracy on a data file
    Eval(EvalArgs),
    /// Write a perturbed copy of a data file
    Perturb(PerturbArgs),
    /// Corpus statistics
    Stats(StatsArgs),
    /// Train one configuration across consecutive seeds
    Sweep(SweepArgs),
    /// Compare two sweep report files
    Compare(CompareArgs),
    /// Post-process report files
    Report(ReportArgs),
    /// Check every analytic gradient against finite differences
    Gradcheck(GradcheckArgs),
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "comp" => Ok(ModelKind::Comp),
        "corr" => Ok(ModelKind::Corr),
        "comp-rw" => Ok(ModelKind::CompRw),
        _ => Err(format!("unknown model {s:?}; choose comp, corr, or comp-rw")),
    }
}

fn parse_field(s: &str) -> std::result::Result<AccField, String> {
    match s {
        "train" => Ok(AccField::Train),
        "dev" => Ok(AccField::Dev),
        "test" => Ok(AccField::Test),
        _ => Err(format!("unknown accuracy field {s:?}; choose train, dev, or test")),
    }
}

/// Hyperparameters shared by `train` and `sweep`. Every value left unset
/// falls back through config file, then preset, then the built-in defaults
/// (d 512, h 512, input-dim 300, lr 0.002, frozen embeddings, batch 16,
/// dropout 0.1, 1000 epoch cap).
#[derive(Args, Clone)]
struct HyperFlags {
    /// Configuration preset: `submission` (d 2048, embeddings tuned at
    /// 0.0002) or `best` (d 512, frozen embeddings)
    #[arg(long)]
    preset: Option<String>,
    /// File of `key value` or `key=value` lines overriding the preset;
    /// `#` starts a comment
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder output width per direction [default: 512]
    #[arg(long)]
    d: Option<usize>,
    /// Scorer hidden width [default: 512]
    #[arg(long)]
    h: Option<usize>,
    /// Embedding width; word-vector files must match it [default: 300]
    #[arg(long)]
    input_dim: Option<usize>,
    /// Principal learning rate [default: 0.002]
    #[arg(long)]
    lr: Option<f64>,
    /// Embedding learning rate, or `frozen` to keep embeddings fixed
    /// [default: frozen]
    #[arg(long)]
    emb_lr: Option<String>,
    /// Instances per optimizer step [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Dropout probability on encoder inputs and outputs [default: 0.1]
    #[arg(long)]
    dropout: Option<f64>,
    /// Epoch cap; annealing usually stops a run much earlier [default: 1000]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Word-vector text file: token then input-dim floats per line
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model variant: comp, corr, or comp-rw
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    /// Directory holding train.tsv, dev.tsv, and test.tsv
    #[arg(long)]
    data: PathBuf,
    /// `random`, or a path to a saved encoder to start from
    #[arg(long, default_value = "random")]
    encoder: String,
    /// Run seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to save the trained checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperFlags,
}

#[derive(Args)]
struct PretrainArgs {
    /// Inference-pair training TSV
    #[arg(long)]
    train: PathBuf,
    /// Inference-pair development TSV
    #[arg(long)]
    dev: PathBuf,
    /// Where to save the pretrained encoder
    #[arg(long)]
    out: PathBuf,
    /// Run seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    hyper: HyperFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved checkpoint from `train --out`
    #[arg(long)]
    ckpt: PathBuf,
    /// Data TSV to score
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    /// `half` keeps a random half; `unbalanced` moves every negation-bearing
    /// correct warrant to slot 1 and rebalances
    which: String,
    /// Input data TSV
    #[arg(long = "in")]
    input: PathBuf,
    /// Output data TSV
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File with one negation token per line; default built-in lexicon
    #[arg(long)]
    negation_lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(subcommand)]
    which: StatsCommand,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Negation coverage and per-slot correctness fractions
    Negation {
        /// Data TSV to analyze
        #[arg(long = "in")]
        input: PathBuf,
        /// File with one negation token per line; default built-in lexicon
        #[arg(long)]
        negation_lexicon: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Model variant: comp, corr, or comp-rw
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    /// Directory holding train.tsv, dev.tsv, and test.tsv
    #[arg(long)]
    data: PathBuf,
    /// `random`, or a path to a saved encoder to start from
    #[arg(long, default_value = "random")]
    encoder: String,
    /// Number of runs; seeds are base-seed, base-seed+1, ...
    #[arg(long)]
    runs: usize,
    /// First seed
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Concurrent runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Sweep label recorded in the report
    #[arg(long, default_value = "sweep")]
    label: String,
    /// Report file; standard output when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperFlags,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline sweep report
    #[arg(long)]
    a: PathBuf,
    /// Treatment sweep report
    #[arg(long)]
    b: PathBuf,
    /// Accuracy column to compare: train, dev, or test
    #[arg(long, default_value = "test", value_parser = parse_field)]
    field: AccField,
}

#[derive(Args)]
struct ReportArgs {
    #[command(subcommand)]
    which: ReportCommand,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Equal-width histogram of one accuracy column
    Histogram {
        /// Sweep report to read
        #[arg(long = "in")]
        input: PathBuf,
        /// Number of bins
        #[arg(long)]
        bins: usize,
        /// Accuracy column: train, dev, or test
        #[arg(long, default_value = "test", value_parser = parse_field)]
        field: AccField,
        /// Output file; standard output when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    /// Pass bar on the worst relative error
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

fn apply_preset(config: &mut TrainConfig, preset: &str) -> Result<()> {
    match preset {
        "submission" => {
            config.d = 2048;
            config.freeze_embeddings = false;
            config.embedding_lr = Some(2e-4);
        }
        "best" => {
            config.d = 512;
            config.freeze_embeddings = true;
            config.embedding_lr = None;
        }
        _ => {
            return Err(Error::Parameter(format!(
                "unknown preset {preset:?}; choose submission or best"
            )));
        }
    }
    Ok(())
}

fn apply_emb_lr(config: &mut TrainConfig, value: &str) -> Result<()> {
    if value == "frozen" {
        config.freeze_embeddings = true;
        config.embedding_lr = None;
        return Ok(());
    }
    let rate: f64 = value
        .parse()
        .map_err(|_| Error::Parameter(format!("embedding rate {value:?} is not a number")))?;
    config.freeze_embeddings = false;
    config.embedding_lr = Some(rate);
    Ok(())
}

fn apply_key(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Parameter(format!("config value {value:?} for {key} is invalid")))
    }
    match key {
        "d" => config.d = num(key, value)?,
        "h" => config.h = num(key, value)?,
        "input-dim" => config.input_dim = num(key, value)?,
        "lr" => config.principal_lr = num(key, value)?,
        "emb-lr" => apply_emb_lr(config, value)?,
        "batch" => config.batch_size = num(key, value)?,
        "dropout" => config.dropout_p = num(key, value)?,
        "max-epochs" => config.max_epochs = num(key, value)?,
        "lr-floor" => config.lr_floor = num(key, value)?,
        "anneal-factor" => config.anneal_factor = num(key, value)?,
        "tune-encoder" => config.tune_encoder = num(key, value)?,
        _ => {
            return Err(Error::Parameter(format!("unknown config key {key:?}")));
        }
    }
    Ok(())
}

fn apply_config_file(config: &mut TrainConfig, path: &Path) -> Result<()> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(char::is_whitespace))
            .ok_or_else(|| {
                Error::Format(format!(
                    "{} line {}: expected `key value` or `key=value`",
                    path.display(),
                    i + 1
                ))
            })?;
        apply_key(config, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Defaults, then preset, then config file, then explicit flags.
fn resolve_config(hyper: &HyperFlags, seed: u64) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(preset) = &hyper.preset {
        apply_preset(&mut config, preset)?;
    }
    if let Some(path) = &hyper.config {
        apply_config_file(&mut config, path)?;
    }
    if let Some(d) = hyper.d {
        config.d = d;
    }
    if let Some(h) = hyper.h {
        config.h = h;
    }
    if let Some(input_dim) = hyper.input_dim {
        config.input_dim = input_dim;
    }
    if let Some(lr) = hyper.lr {
        config.principal_lr = lr;
    }
    if let Some(emb_lr) = &hyper.emb_lr {
        apply_emb_lr(&mut config, emb_lr)?;
    }
    if let Some(batch) = hyper.batch {
        config.batch_size = batch;
    }
    if let Some(dropout) = hyper.dropout {
        config.dropout_p = dropout;
    }
    if let Some(max_epochs) = hyper.max_epochs {
        config.max_epochs = max_epochs;
    }
    config.seed = seed;
    config.validate()?;
    Ok(config)
}

fn load_vectors(
    hyper: &HyperFlags,
    input_dim: usize,
) -> Result<Option<(Vec<String>, Tensor)>> {
    match &hyper.vectors {
        None => Ok(None),
        Some(path) => Ok(Some(load_word_vectors(path, input_dim)?)),
    }
}

fn encoder_source(spec: &str) -> EncoderSource {
    if spec == "random" {
        EncoderSource::Random
    } else {
        EncoderSource::Path(PathBuf::from(spec))
    }
}

fn load_splits(dir: &Path) -> Result<ArctSplits> {
    Ok(ArctSplits {
        train: load_arct_tsv(&dir.join("train.tsv"))?,
        dev: load_arct_tsv(&dir.join("dev.tsv"))?,
        test: load_arct_tsv(&dir.join("test.tsv"))?,
    })
}

fn load_lexicon(path: &Option<PathBuf>) -> Result<Vec<String>> {
    match path {
        None => Ok(default_negation_lexicon()),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            let words: Vec<String> = text
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect();
            if words.is_empty() {
                return Err(Error::Empty(format!(
                    "negation lexicon {} has no entries",
                    p.display()
                )));
            }
            Ok(words)
        }
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(path) => {
            fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
        }
    }
}

fn field_values(rows: &[SweepRow], field: AccField) -> Vec<f64> {
    rows.iter()
        .map(|r| match field {
            AccField::Train => r.train_acc,
            AccField::Dev => r.dev_acc,
            AccField::Test => r.test_acc,
        })
        .collect()
}

fn read_report_values(path: &Path, field: AccField) -> Result<Vec<f64>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let report = parse_report(&text)?;
    if report.sweeps.is_empty() {
        return Err(Error::Empty(format!("{} holds no sweep rows", path.display())));
    }
    Ok(field_values(&report.sweeps, field))
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = resolve_config(&args.hyper, args.seed)?;
    let splits = load_splits(&args.data)?;
    let vectors = load_vectors(&args.hyper, config.input_dim)?;
    let source = encoder_source(&args.encoder);
    let outcome = train_model(
        args.model,
        &splits,
        &config,
        &source,
        vectors.as_ref(),
        |log| eprintln!("{log}"),
    )?;
    let r = &outcome.result;
    println!("seed {}", r.seed);
    println!("epochs_run {}", r.epochs_run);
    println!("final_lr {}", r.final_lr);
    println!("train_acc {}", r.train_acc);
    println!("dev_acc {}", r.dev_acc);
    println!("test_acc {}", r.test_acc);
    if let Some(path) = &args.out {
        save_model(&outcome.model, path)?;
        eprintln!("saved checkpoint to {}", path.display());
    }
    Ok(())
}

fn run_pretrain(args: &PretrainArgs) -> Result<()> {
    let config = resolve_config(&args.hyper, args.seed)?;
    let splits = NliSplits {
        train: load_nli_tsv(&args.train)?,
        dev: load_nli_tsv(&args.dev)?,
    };
    let vectors = load_vectors(&args.hyper, config.input_dim)?;
    let outcome = pretrain_nli(&splits, &config, vectors.as_ref(), |log| eprintln!("{log}"))?;
    save_encoder(&outcome.model.encoder, &args.out)?;
    println!("dev_acc {}", outcome.dev_acc);
    println!("epochs_run {}", outcome.epochs_run);
    println!("final_lr {}", outcome.final_lr);
    eprintln!("saved encoder to {}", args.out.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let data = load_arct_tsv(&args.data)?;
    let acc = evaluate_model(&model, &data)?;
    println!("accuracy {acc}");
    Ok(())
}

fn run_perturb(args: &PerturbArgs) -> Result<()> {
    let instances = load_arct_tsv(&args.input)?;
    match args.which.as_str() {
        "half" => {
            let kept = make_half_split(&instances, args.seed);
            save_arct_tsv(&args.out, &kept)?;
            println!("kept {} of {}", kept.len(), instances.len());
        }
        "unbalanced" => {
            let lexicon = load_lexicon(&args.negation_lexicon)?;
            let outcome = make_unbalanced(&instances, &lexicon, args.seed);
            save_arct_tsv(&args.out, &outcome.instances)?;
            println!("negation_swaps {}", outcome.negation_swaps);
            println!("rebalance_swaps {}", outcome.rebalance_swaps);
            println!("shortfall {}", outcome.shortfall);
        }
        other => {
            return Err(Error::Parameter(format!(
                "unknown perturbation {other:?}; choose half or unbalanced"
            )));
        }
    }
    Ok(())
}

fn run_stats(args: &StatsArgs) -> Result<()> {
    match &args.which {
        StatsCommand::Negation { input, negation_lexicon } => {
            let instances = load_arct_tsv(input)?;
            let lexicon = load_lexicon(negation_lexicon)?;
            let stats = corpus_negation_stats(&instances, &lexicon)?;
            println!("instances {}", stats.total);
            println!("coverage {:.4}", stats.coverage());
            println!("p_correct_at_0 {:.4}", stats.p_correct_at_0());
            println!("p_correct_at_1 {:.4}", stats.p_correct_at_1());
        }
    }
    Ok(())
}

fn run_sweep_cmd(args: &SweepArgs) -> Result<()> {
    if args.runs == 0 {
        return Err(Error::Parameter("sweep needs at least one run".into()));
    }
    let config = resolve_config(&args.hyper, args.base_seed)?;
    let splits = load_splits(&args.data)?;
    let vectors = load_vectors(&args.hyper, config.input_dim)?;
    let source = encoder_source(&args.encoder);
    let seeds: Vec<u64> = (0..args.runs).map(|i| args.base_seed + i as u64).collect();
    let sweep = run_sweep(
        args.model,
        &args.label,
        &splits,
        &config,
        &source,
        vectors.as_ref(),
        &seeds,
        args.jobs,
    )?;
    write_or_print(&args.out, &render_report(&[sweep], &[]))?;
    if let Some(path) = &args.out {
        eprintln!("wrote {} runs to {}", args.runs, path.display());
    }
    Ok(())
}

fn run_compare(args: &CompareArgs) -> Result<()> {
    let a = read_report_values(&args.a, args.field)?;
    let b = read_report_values(&args.b, args.field)?;
    let mean_a = a.iter().sum::<f64>() / a.len() as f64;
    let mean_b = b.iter().sum::<f64>() / b.len() as f64;
    let test = welch_t_test(&a, &b)?;
    println!("n_a {}", a.len());
    println!("n_b {}", b.len());
    println!("mean_a {mean_a:.4}");
    println!("mean_b {mean_b:.4}");
    println!("pct_difference {:+.2}", pct_change(mean_a, mean_b)?);
    println!("t {:.4}", test.t);
    println!("df {:.2}", test.df);
    println!("p {:.6}", test.p);
    Ok(())
}

fn run_report(args: &ReportArgs) -> Result<()> {
    match &args.which {
        ReportCommand::Histogram { input, bins, field, out } => {
            let values = read_report_values(input, *field)?;
            let histogram = histogram_bins(&values, *bins)?;
            let mut text = String::from("lo,hi,count\n");
            for bin in &histogram {
                text.push_str(&format!("{},{},{}\n", bin.lo, bin.hi, bin.count));
            }
            write_or_print(out, &text)?;
        }
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if !(args.tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance {} must be positive", args.tol)));
    }
    let report = gradient_suite()?;
    for check in &report.checks {
        println!("{:28} {:.3e}", check.name, check.max_rel_err);
    }
    let worst = report.worst();
    println!("max_rel_err {worst:.3e}");
    if report.passes(args.tol) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "worst gradient error {worst:.3e} is not below {:.1e}",
            args.tol
        )))
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::PretrainNli(args) => run_pretrain(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Perturb(args) => run_perturb(args),
        Command::Stats(args) => run_stats(args),
        Command::Sweep(args) => run_sweep_cmd(args),
        Command::Compare(args) => run_compare(args),
        Command::Report(args) => run_report(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version reach here too; they keep exit code 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}
