//! Multi-bin training loop, evaluation at arbitrary lengths and the
//! metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{accumulate_gradients, predict_batch, total_loss, LossMetrics, ModelConfig, ModelParams};
use crate::optimizer::{adamax_apply, AdaMaxState, LrSchedule, OptimConfig};
use crate::tasks::{build_dataset, BinnedDataset, TaskSpec};
use crate::tensor::Real;

pub const METRICS_HEADER: &str =
    "step,seconds,lr,error_loss,sat_sum,sat_weight,train_bit_acc,eval_bit_acc,eval_whole_errors";

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub optim: AdaMaxState<T>,
    pub schedule: LrSchedule,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config.model_config(), &mut rng)?;
        let optim = AdaMaxState::new(params.params());
        let schedule = LrSchedule::new(config.effective_lr());
        Ok(TrainState {
            config,
            params,
            optim,
            schedule,
            step: 0,
            rng,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Learning rate used for this step's update.
    pub lr: f64,
    pub metrics: LossMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub seconds: f64,
    pub lr: f64,
    pub error_loss: f64,
    pub sat_sum: f64,
    pub sat_weight: f64,
    pub train_bit_acc: f64,
    pub eval_bit_acc: f64,
    pub eval_whole_errors: usize,
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-5..6).contains(&exp) {
        let s = format!("{x:.5e}");
        let (mant, e) = s.split_once('e').expect("scientific format");
        format!("{}e{}", trim(mant.to_string()), e)
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    }
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            format_sig6(self.seconds),
            format_sig6(self.lr),
            format_sig6(self.error_loss),
            format_sig6(self.sat_sum),
            format_sig6(self.sat_weight),
            format_sig6(self.train_bit_acc),
            format_sig6(self.eval_bit_acc),
            self.eval_whole_errors
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub bit_accuracy: f64,
    pub whole_output_errors: usize,
    pub count: usize,
    pub length: usize,
}

/// Number of sequences pushed through the network together at evaluation.
const EVAL_BATCH: usize = 32;

/// Evaluate any predictor on `count` fresh examples of exactly `length`.
///
/// `predict(tokens, batch)` receives `batch` concatenated inputs of length
/// `length` and returns one token per position.
pub fn evaluate_with<F>(spec: &TaskSpec, length: usize, count: usize, seed: u64, predict: F) -> Result<EvalResult>
where
    F: Fn(&[usize], usize) -> Result<Vec<usize>> + Sync,
{
    if count == 0 {
        return Err(Error::Usage("evaluation needs at least one example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|_| spec.generate(length, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let per_chunk = examples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<(usize, usize)> {
            let inputs: Vec<usize> = chunk.iter().flat_map(|e| e.input.iter().copied()).collect();
            let out = predict(&inputs, chunk.len())?;
            let mut correct = 0;
            let mut wrong_outputs = 0;
            for (ex, pred) in chunk.iter().zip(out.chunks(length)) {
                let ok = ex.target.iter().zip(pred).filter(|(a, b)| a == b).count();
                correct += ok;
                if ok != length {
                    wrong_outputs += 1;
                }
            }
            Ok((correct, wrong_outputs))
        })
        .collect::<Result<Vec<_>>>()?;
    let correct: usize = per_chunk.iter().map(|c| c.0).sum();
    let wrong: usize = per_chunk.iter().map(|c| c.1).sum();
    Ok(EvalResult {
        bit_accuracy: correct as f64 / (count * length) as f64,
        whole_output_errors: wrong,
        count,
        length,
    })
}

/// Bit accuracy and whole-output errors of a model unrolled to exactly
/// `length` steps.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    spec: &TaskSpec,
    length: usize,
    count: usize,
    seed: u64,
) -> Result<EvalResult> {
    evaluate_with(spec, length, count, seed, |tokens, batch| {
        predict_batch(tokens, batch, length, params, config)
    })
}

/// Seed of the evaluation set used at a given training step; independent of
/// the training stream so evaluating never perturbs training.
pub fn eval_seed(run_seed: u64, step: u64) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step)
        .rotate_left(17)
        ^ 0x5EED_E7A1
}

pub struct Trainer<T> {
    pub state: TrainState<T>,
    pub data: BinnedDataset,
    model_config: ModelConfig,
    optim_config: OptimConfig,
    spec: TaskSpec,
}

impl<T: Real> Trainer<T> {
    pub fn new(state: TrainState<T>) -> Result<Self> {
        let config = &state.config;
        config.validate()?;
        let model_config = config.model_config();
        state.params.check(&model_config)?;
        let spec = config.spec();
        let dataset = build_dataset(&spec, config.train_max_len(), config.per_length, config.seed)?;
        let data = BinnedDataset::new(&dataset, &config.bins)?;
        Ok(Trainer {
            optim_config: config.optim_config(),
            model_config,
            spec,
            data,
            state,
        })
    }

    pub fn from_config(config: TrainConfig) -> Result<Self> {
        Self::new(TrainState::new(config)?)
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// One optimizer step on the summed loss of a fresh batch from every bin.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let st = &mut self.state;
        let batches = self.data.sample(st.config.batch_per_bin, &mut st.rng);
        let mut g = Graph::new();
        let total = total_loss(&mut g, &batches, &st.params, &self.model_config, true, None, &mut st.rng)?;
        if !total.metrics.loss.is_finite() {
            let bins: Vec<(usize, f64)> = total.metrics.bins.iter().map(|b| (b.n, b.error)).collect();
            return Err(Error::NonFinite(format!(
                "loss at step {}: per-bin errors {bins:?}",
                st.step + 1
            )));
        }
        accumulate_gradients(&g, &total, &mut st.params)?;
        drop(g);
        let lr = st.schedule.lr;
        adamax_apply(&mut st.params.params_mut(), &mut st.optim, &self.optim_config, lr, &mut st.rng)?;
        st.params.clamp_embedding();
        for p in st.params.params_mut() {
            p.zero_grad();
        }
        st.step += 1;
        st.schedule.update(total.metrics.error, st.step, &self.optim_config);
        Ok(StepReport {
            step: st.step,
            lr,
            metrics: total.metrics,
        })
    }

    pub fn evaluate_now(&self) -> Result<EvalResult> {
        let c = &self.state.config;
        evaluate(
            &self.state.params,
            &self.model_config,
            &self.spec,
            c.eval_length,
            c.eval_count,
            eval_seed(c.seed, self.state.step),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    /// Train until the step counter reaches this value.
    pub max_steps: u64,
    pub max_seconds: Option<f64>,
}

impl Budget {
    pub fn from_config(c: &TrainConfig) -> Self {
        Budget {
            max_steps: c.max_steps,
            max_seconds: (c.max_seconds > 0).then_some(c.max_seconds as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    TargetReached,
    StepBudget,
    TimeBudget,
}

pub struct RunOutcome<T> {
    pub state: TrainState<T>,
    pub log: Vec<MetricsRecord>,
    pub stop: StopReason,
    /// First logged step whose evaluation met the target accuracy.
    pub target_step: Option<u64>,
}

/// Output locations of a run directory.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunFiles { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.txt")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{step:08}.dngpu"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.dngpu")
    }
}

struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Fresh runs truncate; resumed runs append to an existing log.
    fn open(path: PathBuf, resume: bool) -> Result<Self> {
        let append = resume && path.exists();
        let file = if append {
            OpenOptions::new().append(true).open(&path)
        } else {
            File::create(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut w = MetricsWriter {
            path,
            out: BufWriter::new(file),
        };
        if !append {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Train until the budget runs out or evaluation reaches the target,
/// logging one metrics row every `eval_interval` steps. With `files`, the
/// metrics CSV and checkpoints are written to the run directory.
pub fn run_training<T: Real>(
    state: TrainState<T>,
    budget: Budget,
    files: Option<&RunFiles>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<RunOutcome<T>> {
    let resume = state.step > 0;
    let mut trainer = Trainer::new(state)?;
    let mut writer = match files {
        Some(f) => {
            fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
            Some(MetricsWriter::open(f.metrics(), resume)?)
        }
        None => None,
    };
    if let Some(f) = files {
        checkpoint::save(&trainer.state, &f.checkpoint(trainer.state.step))?;
    }

    let mut log = Vec::new();
    let mut seconds = 0.0;
    let mut target_step = None;
    let interval = trainer.state.config.eval_interval;
    let ckpt_interval = trainer.state.config.checkpoint_interval;
    let target = trainer.state.config.target_accuracy;

    let stop = loop {
        if trainer.state.step >= budget.max_steps {
            break StopReason::StepBudget;
        }
        if budget.max_seconds.is_some_and(|m| seconds >= m) {
            break StopReason::TimeBudget;
        }
        let started = Instant::now();
        let report = trainer.train_step()?;
        seconds += started.elapsed().as_secs_f64();
        let step = report.step;

        if let Some(f) = files {
            if ckpt_interval > 0 && step % ckpt_interval == 0 {
                checkpoint::save(&trainer.state, &f.checkpoint(step))?;
            }
        }
        if step % interval == 0 {
            let eval = trainer.evaluate_now()?;
            let record = MetricsRecord {
                step,
                seconds,
                lr: report.lr,
                error_loss: report.metrics.error,
                sat_sum: report.metrics.saturation,
                sat_weight: report.metrics.saturation_weight,
                train_bit_acc: report.metrics.bit_accuracy(),
                eval_bit_acc: eval.bit_accuracy,
                eval_whole_errors: eval.whole_output_errors,
            };
            if let Some(w) = writer.as_mut() {
                w.line(&record.csv_row())?;
            }
            on_record(&record);
            log.push(record);
            if eval.bit_accuracy >= target {
                target_step = Some(step);
                break StopReason::TargetReached;
            }
        }
    };

    if let Some(f) = files {
        checkpoint::save(&trainer.state, &f.checkpoint(trainer.state.step))?;
        checkpoint::save(&trainer.state, &f.final_checkpoint())?;
    }
    Ok(RunOutcome {
        state: trainer.state,
        log,
        stop,
        target_step,
    })
}

/// Write the run manifest: configuration, seed, code version, output paths.
pub fn write_manifest(files: &RunFiles, config: &TrainConfig) -> Result<()> {
    fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
    let text = format!(
        "# dngpu run manifest\ncode_version = {}\nseed = {}\nmetrics = {}\ncheckpoints = {}\n\n[config]\n{}",
        env!("CARGO_PKG_VERSION"),
        config.seed,
        files.metrics().display(),
        files.dir.join("ckpt-*.dngpu").display(),
        config.to_text()
    );
    let path = files.manifest();
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Independent runs for seeds `first_seed .. first_seed + count`, each in
/// `root/seed-<k>`.
pub fn run_seeds<T: Real>(
    config: &TrainConfig,
    first_seed: u64,
    count: u64,
    root: &Path,
    mut on_record: impl FnMut(u64, &MetricsRecord),
) -> Result<Vec<RunOutcome<T>>> {
    let mut outcomes = Vec::new();
    for seed in first_seed..first_seed + count {
        let mut c = config.clone();
        c.seed = seed;
        let files = RunFiles::new(root.join(format!("seed-{seed}")));
        write_manifest(&files, &c)?;
        let budget = Budget::from_config(&c);
        outcomes.push(run_training(TrainState::<T>::new(c)?, budget, Some(&files), |r| {
            on_record(seed, r)
        })?);
    }
    Ok(outcomes)
}
