use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dngpu::cells::CellKind;
use dngpu::config::{parse_list, Precision, TrainConfig};
use dngpu::model::forward;
use dngpu::trainer::{self, run_training, Budget, RunFiles, TrainState};
use dngpu::{checkpoint, tensor, viz, Error, Real, Result};

#[derive(Parser)]
#[command(name = "dngpu", version, about = "Train and inspect diagonal convolutional GRU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more models and write metrics and checkpoints
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint at one or several lengths
    Eval(EvalArgs),
    /// Write per-map execution trace images
    Trace(TraceArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// copy, reverse, add, sort, mul2, mul4 or mul10bin
    #[arg(long)]
    task: Option<String>,
    /// `key = value` file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    maps: Option<usize>,
    /// Comma-separated bin lengths
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    max_seconds: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to train, each in `<out>/seed-<k>`
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh
    #[arg(long, conflicts_with_all = ["seeds", "task", "config"])]
    resume: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_per_bin: Option<usize>,
    #[arg(long)]
    per_length: Option<usize>,
    #[arg(long)]
    eval_length: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// f32 or f64
    #[arg(long)]
    precision: Option<String>,
    /// Use smooth tanh/sigmoid instead of the hard variants
    #[arg(long)]
    soft: bool,
    /// Plain CGRU without diagonal gates
    #[arg(long)]
    no_diagonal: bool,
    #[arg(long)]
    no_saturation: bool,
    /// Extra `key=value` settings, applied after the other flags
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    count: usize,
    /// Comma-separated lengths; emits `length,bit_acc,whole_errors`
    #[arg(long)]
    curve: Option<String>,
    /// Write the curve CSV here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input in the task alphabet, e.g. `101*11`
    #[arg(long, conflicts_with = "random_length")]
    input: Option<String>,
    #[arg(long)]
    random_length: Option<usize>,
    #[arg(long, default_value = "trace")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    let mut task_given = a.task.is_some();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        task_given |= text
            .lines()
            .any(|l| l.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim() == "task");
        c.apply_text(&text)?;
    }
    if !task_given {
        return Err(usage("--task is required (or a config file with `task = ...`)"));
    }
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| c.set(k, &v));
    set("task", a.task.clone())?;
    set("maps", a.maps.map(|v| v.to_string()))?;
    set("bins", a.bins.clone())?;
    set("max_steps", a.steps.map(|v| v.to_string()))?;
    set("max_seconds", a.max_seconds.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("dropout", a.dropout.map(|v| v.to_string()))?;
    set("batch_per_bin", a.batch_per_bin.map(|v| v.to_string()))?;
    set("per_length", a.per_length.map(|v| v.to_string()))?;
    set("eval_length", a.eval_length.map(|v| v.to_string()))?;
    set("eval_count", a.eval_count.map(|v| v.to_string()))?;
    set("eval_interval", a.eval_interval.map(|v| v.to_string()))?;
    set("checkpoint_interval", a.checkpoint_interval.map(|v| v.to_string()))?;
    set("precision", a.precision.clone())?;
    if a.soft {
        c.set("nonlinearity", "soft")?;
    }
    if a.no_diagonal {
        c.cell = CellKind::Cgru;
    }
    if a.no_saturation {
        c.saturation = false;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn print_record(seed: u64, r: &trainer::MetricsRecord) {
    eprintln!(
        "seed {seed} step {:>6}  lr {:.3e}  error {:.4}  sat {:.3}  train {:.4}  eval {:.4}  wrong {}",
        r.step, r.lr, r.error_loss, r.sat_sum, r.train_bit_acc, r.eval_bit_acc, r.eval_whole_errors
    );
}

fn train_typed<T: Real>(config: TrainConfig, a: &TrainArgs) -> Result<()> {
    if let Some(ckpt) = &a.resume {
        let state = checkpoint::load::<T>(ckpt)?;
        let seed = state.config.seed;
        let mut budget = Budget::from_config(&state.config);
        if let Some(steps) = a.steps {
            budget.max_steps = steps;
        }
        let files = RunFiles::new(&a.out);
        let out = run_training(state, budget, Some(&files), |r| print_record(seed, r))?;
        eprintln!("stopped at step {} ({:?})", out.state.step, out.stop);
        return Ok(());
    }
    let count = a.seeds.unwrap_or(1);
    if count == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if a.seeds.is_some() {
        let outs = trainer::run_seeds::<T>(&config, config.seed, count, &a.out, print_record)?;
        for (k, o) in outs.iter().enumerate() {
            eprintln!(
                "seed {}: stopped at step {} ({:?})",
                config.seed + k as u64,
                o.state.step,
                o.stop
            );
        }
    } else {
        let files = RunFiles::new(&a.out);
        trainer::write_manifest(&files, &config)?;
        let seed = config.seed;
        let budget = Budget::from_config(&config);
        let out = run_training(TrainState::<T>::new(config)?, budget, Some(&files), |r| print_record(seed, r))?;
        eprintln!("stopped at step {} ({:?})", out.state.step, out.stop);
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = match &a.resume {
        Some(ckpt) => checkpoint::load_config(ckpt)?,
        None => build_config(a)?,
    };
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, a),
        Precision::F64 => train_typed::<f64>(config, a),
    }
}

fn eval_typed<T: Real>(a: &EvalArgs) -> Result<()> {
    let state = checkpoint::load::<T>(&a.ckpt)?;
    let mcfg = state.config.model_config();
    let spec = state.config.spec();
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    match (&a.curve, a.length) {
        (Some(curve), _) => {
            let lengths = parse_list("curve", curve)?;
            let mut csv = String::from("length,bit_acc,whole_errors\n");
            for len in lengths {
                check_length(state.config.task, len)?;
                let r = trainer::evaluate(&state.params, &mcfg, &spec, len, a.count, a.seed)?;
                csv.push_str(&format!(
                    "{len},{},{}\n",
                    trainer::format_sig6(r.bit_accuracy),
                    r.whole_output_errors
                ));
            }
            match &a.out {
                Some(p) => fs::write(p, csv).map_err(|e| Error::io(p, e))?,
                None => print!("{csv}"),
            }
        }
        (None, Some(len)) => {
            check_length(state.config.task, len)?;
            let r = trainer::evaluate(&state.params, &mcfg, &spec, len, a.count, a.seed)?;
            println!("bit_accuracy {}", trainer::format_sig6(r.bit_accuracy));
            println!("whole_output_errors {}", r.whole_output_errors);
        }
        (None, None) => return Err(usage("eval needs --length or --curve")),
    }
    Ok(())
}

fn check_length(task: dngpu::tasks::TaskKind, len: usize) -> Result<()> {
    if len == 0 || !task.is_achievable(len) {
        return Err(usage(format!("length {len} is not achievable for task {task}")));
    }
    Ok(())
}

fn trace_typed<T: Real>(a: &TraceArgs) -> Result<()> {
    let state = checkpoint::load::<T>(&a.ckpt)?;
    let mcfg = state.config.model_config();
    let spec = state.config.spec();
    let alphabet = spec.alphabet();
    let input = match (&a.input, a.random_length) {
        (Some(text), _) => alphabet.parse(text)?,
        (None, Some(len)) => {
            check_length(state.config.task, len)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            spec.generate(len, &mut rng)?.input
        }
        (None, None) => return Err(usage("trace needs --input or --random-length")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let out = forward(&input, &state.params, &mcfg, false, true, &mut rng)?;
    let v = out.logits.cols();
    let pred: Vec<usize> = out.logits.data().chunks(v).map(tensor::argmax).collect();
    let trace = out.trace.expect("trace requested");
    let paths = viz::write_trace(
        &a.out,
        &trace,
        &mcfg.diagonal_split(),
        &alphabet.render(&input),
        &alphabet.render(&pred),
    )?;
    println!("{}", alphabet.render(&pred));
    eprintln!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}

fn precision_of(ckpt: &Path) -> Result<Precision> {
    Ok(checkpoint::load_config(ckpt)?.precision)
}

fn dispatch(ckpt: &Path, f32_fn: impl FnOnce() -> Result<()>, f64_fn: impl FnOnce() -> Result<()>) -> Result<()> {
    match precision_of(ckpt)? {
        Precision::F32 => f32_fn(),
        Precision::F64 => f64_fn(),
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("DNGPU_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => dispatch(&a.ckpt, || eval_typed::<f32>(a), || eval_typed::<f64>(a)),
        Command::Trace(a) => dispatch(&a.ckpt, || trace_typed::<f32>(a), || trace_typed::<f64>(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

