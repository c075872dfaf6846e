//! Embedding, `n` unrolled cell applications with one shared parameter set,
//! per-position readout, and the multi-bin training loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};

use crate::cells::{
    cgru_step, dcgru_step, CellKind, CellParams, CellVars, DiagonalSplit, DropoutSpec,
    Nonlinearity, SaturationAccumulator, StepOptions,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{self, Parameter, Real, Shift, Tensor};

/// Lower bound on the saturation sum when forming the adaptive weight.
pub const SATURATION_EPS: f64 = 1e-6;
/// The saturation term is scaled to this fraction of the error loss.
pub const SATURATION_RATIO: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub maps: usize,
    pub kernel_width: usize,
    pub cell: CellKind,
    pub nonlinearity: Nonlinearity,
    pub saturation: bool,
    pub s_limit: f64,
    pub dropout: f64,
    pub vocab_in: usize,
    pub vocab_out: usize,
    pub bins: Vec<usize>,
    /// Diagonal split; `None` means [`DiagonalSplit::even`].
    pub split: Option<DiagonalSplit>,
}

impl ModelConfig {
    pub fn new(maps: usize, vocab: usize, bins: Vec<usize>) -> Self {
        ModelConfig {
            maps,
            kernel_width: 3,
            cell: CellKind::Dcgru,
            nonlinearity: Nonlinearity::Hard,
            saturation: true,
            s_limit: 0.9,
            dropout: 0.1,
            vocab_in: vocab,
            vocab_out: vocab,
            bins,
            split: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.maps == 0 {
            return bad("maps must be positive".into());
        }
        if self.cell == CellKind::Dcgru && self.maps < 3 {
            return bad(format!("diagonal cell needs at least 3 maps, got {}", self.maps));
        }
        if self.kernel_width.is_multiple_of(2) {
            return bad(format!("kernel width {} must be odd", self.kernel_width));
        }
        if self.vocab_in < 2 || self.vocab_out < 2 {
            return bad("vocabularies need at least 2 symbols".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.s_limit > 0.0 && self.s_limit < 1.0) {
            return bad(format!("s_limit {} not in (0, 1)", self.s_limit));
        }
        if self.bins.is_empty() || self.bins[0] == 0 || self.bins.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("bins {:?} must be positive and strictly increasing", self.bins));
        }
        if let Some(s) = self.split {
            if s.maps() != self.maps {
                return bad(format!("split {s:?} does not cover {} maps", self.maps));
            }
        }
        Ok(())
    }

    pub fn diagonal_split(&self) -> DiagonalSplit {
        match self.cell {
            CellKind::Cgru => DiagonalSplit::all_stay(self.maps),
            CellKind::Dcgru => self.split.unwrap_or_else(|| DiagonalSplit::even(self.maps)),
        }
    }

    fn step_options(&self, training: bool) -> StepOptions {
        StepOptions {
            nonlinearity: self.nonlinearity,
            saturation_limit: self.saturation.then_some(self.s_limit),
            dropout: DropoutSpec {
                p: self.dropout,
                training,
            },
        }
    }

    /// Whether the saturation term participates in the loss at all.
    pub fn charges_saturation(&self) -> bool {
        self.saturation && self.nonlinearity == Nonlinearity::Hard
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `E: [v_in, m]`, entries kept in `[-1, 1]`.
    pub embedding: Parameter<T>,
    pub cell: CellParams<T>,
    /// `O: [m, v_out]`.
    pub output_weight: Parameter<T>,
    pub output_bias: Parameter<T>,
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], r: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-r..=r))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform kernels and projections, update-gate bias `+1`,
    /// other biases zero.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = config.maps;
        let w = config.kernel_width;
        let kr = (6.0 / (2 * w * m) as f64).sqrt();
        let kernel = |rng: &mut R, name: &str| Parameter::new(name, uniform(rng, &[w, m, m], kr));
        let embedding = Parameter::new(
            "embedding",
            uniform(rng, &[config.vocab_in, m], (6.0 / (config.vocab_in + m) as f64).sqrt())
                .map(|v: T| v.max(-T::one()).min(T::one())),
        );
        let cell = CellParams {
            candidate_kernel: kernel(rng, "cell.candidate_kernel"),
            update_kernel: kernel(rng, "cell.update_kernel"),
            reset_kernel: kernel(rng, "cell.reset_kernel"),
            candidate_bias: Parameter::new("cell.candidate_bias", Tensor::zeros(&[m])),
            update_bias: Parameter::new("cell.update_bias", Tensor::full(&[m], T::one())),
            reset_bias: Parameter::new("cell.reset_bias", Tensor::zeros(&[m])),
        };
        let output_weight = Parameter::new(
            "output.weight",
            uniform(rng, &[m, config.vocab_out], (6.0 / (m + config.vocab_out) as f64).sqrt()),
        );
        let output_bias = Parameter::new("output.bias", Tensor::zeros(&[config.vocab_out]));
        Ok(ModelParams {
            embedding,
            cell,
            output_weight,
            output_bias,
        })
    }

    pub fn params(&self) -> [&Parameter<T>; 9] {
        [
            &self.embedding,
            &self.cell.candidate_kernel,
            &self.cell.update_kernel,
            &self.cell.reset_kernel,
            &self.cell.candidate_bias,
            &self.cell.update_bias,
            &self.cell.reset_bias,
            &self.output_weight,
            &self.output_bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 9] {
        [
            &mut self.embedding,
            &mut self.cell.candidate_kernel,
            &mut self.cell.update_kernel,
            &mut self.cell.reset_kernel,
            &mut self.cell.candidate_bias,
            &mut self.cell.update_bias,
            &mut self.cell.reset_bias,
            &mut self.output_weight,
            &mut self.output_bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Keep every embedding entry in `[-1, 1]`.
    pub fn clamp_embedding(&mut self) {
        for v in self.embedding.value.data_mut() {
            *v = v.max(-T::one()).min(T::one());
        }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        self.cell.check()?;
        let m = config.maps;
        let expect = [
            (&self.embedding, vec![config.vocab_in, m]),
            (&self.output_weight, vec![m, config.vocab_out]),
            (&self.output_bias, vec![config.vocab_out]),
        ];
        for (p, shape) in expect {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    shape
                )));
            }
        }
        if self.cell.maps() != m || self.cell.candidate_kernel.value.shape()[0] != config.kernel_width {
            return Err(Error::Shape("cell parameters do not match the configuration".into()));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            embedding: g.leaf(self.embedding.value.clone()),
            cell: self.cell.register(g),
            output_weight: g.leaf(self.output_weight.value.clone()),
            output_bias: g.leaf(self.output_bias.value.clone()),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |p: &Parameter<T>| Parameter::new(p.name.clone(), p.value.cast());
        ModelParams {
            embedding: c(&self.embedding),
            cell: CellParams {
                candidate_kernel: c(&self.cell.candidate_kernel),
                update_kernel: c(&self.cell.update_kernel),
                reset_kernel: c(&self.cell.reset_kernel),
                candidate_bias: c(&self.cell.candidate_bias),
                update_bias: c(&self.cell.update_bias),
                reset_bias: c(&self.cell.reset_bias),
            },
            output_weight: c(&self.output_weight),
            output_bias: c(&self.output_bias),
        }
    }
}

/// Tape handles of [`ModelParams`], in the same order as
/// [`ModelParams::params`].
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub cell: CellVars,
    pub output_weight: Var,
    pub output_bias: Var,
}

impl ModelVars {
    pub fn all(&self) -> [Var; 9] {
        [
            self.embedding,
            self.cell.candidate_kernel,
            self.cell.update_kernel,
            self.cell.reset_kernel,
            self.cell.candidate_bias,
            self.cell.update_bias,
            self.cell.reset_bias,
            self.output_weight,
            self.output_bias,
        ]
    }
}

/// Row `i` of the result is `E[tokens[i]]`.
pub fn embed<T: Real>(tokens: &[usize], embedding: &Tensor<T>) -> Result<Tensor<T>> {
    tensor::embed_rows(embedding, tokens)
}

struct Unroll {
    kind: CellKind,
    directions: Arc<[Shift]>,
    opts: StepOptions,
}

impl Unroll {
    fn new(config: &ModelConfig, training: bool) -> Self {
        Unroll {
            kind: config.cell,
            directions: config.diagonal_split().directions(),
            opts: config.step_options(training),
        }
    }

    fn step<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        s: Var,
        cell: &CellVars,
        rng: &mut R,
        sat: &mut SaturationAccumulator,
    ) -> Result<Var> {
        match self.kind {
            CellKind::Cgru => cgru_step(g, s, cell, &self.opts, rng, sat),
            CellKind::Dcgru => dcgru_step(g, s, cell, &self.directions, &self.opts, rng, sat),
        }
    }
}

fn check_tokens(tokens: &[usize], batch: usize, n: usize) -> Result<()> {
    if n == 0 || batch == 0 || tokens.len() != batch * n {
        return Err(Error::Shape(format!(
            "{} tokens do not form a batch of {batch} sequences of length {n}",
            tokens.len()
        )));
    }
    Ok(())
}

pub struct ForwardResult<T> {
    /// `[batch, n, v_out]` (batch axis present even for one sequence).
    pub logits: Tensor<T>,
    /// Saturation cost summed over every step and every sequence.
    pub saturation_sum: f64,
    /// `n + 1` states of shape `[batch, n, m]` when requested.
    pub trace: Option<Vec<Tensor<T>>>,
}

/// Run `batch` sequences of length `n` through the unrolled network without
/// keeping a tape: the step's intermediates are dropped after each
/// application.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<T: Real, R: Rng + ?Sized>(
    tokens: &[usize],
    batch: usize,
    n: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
    training: bool,
    want_trace: bool,
    rng: &mut R,
) -> Result<ForwardResult<T>> {
    check_tokens(tokens, batch, n)?;
    let unroll = Unroll::new(config, training);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let mark = g.len();
    let s0 = g.embed(vars.embedding, tokens, &[batch, n])?;
    let mut state = g.value(s0).clone();
    let mut trace = want_trace.then(|| vec![state.clone()]);
    let mut saturation_sum = 0.0;
    for _ in 0..n {
        g.truncate(mark);
        let s = g.leaf(state);
        let mut sat = SaturationAccumulator::new();
        let next = unroll.step(&mut g, s, &vars.cell, rng, &mut sat)?;
        saturation_sum += sat.sum();
        state = g.value(next).clone();
        if let Some(t) = trace.as_mut() {
            t.push(state.clone());
        }
    }
    g.truncate(mark);
    let s = g.leaf(state);
    let logits = g.affine(s, vars.output_weight, vars.output_bias)?;
    Ok(ForwardResult {
        logits: g.value(logits).clone(),
        saturation_sum,
        trace,
    })
}

/// Forward pass of a single sequence; `n = tokens.len()`.
pub fn forward<T: Real, R: Rng + ?Sized>(
    tokens: &[usize],
    params: &ModelParams<T>,
    config: &ModelConfig,
    training: bool,
    want_trace: bool,
    rng: &mut R,
) -> Result<ForwardResult<T>> {
    forward_batch(tokens, 1, tokens.len(), params, config, training, want_trace, rng)
}

/// Per-position argmax (lowest index on ties) for a batch, dropout off.
pub fn predict_batch<T: Real>(
    tokens: &[usize],
    batch: usize,
    n: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Vec<usize>> {
    // dropout is inactive outside training, so this generator is never drawn from
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let out = forward_batch(tokens, batch, n, params, config, false, false, &mut rng)?;
    let v = out.logits.cols();
    Ok(out.logits.data().chunks(v).map(tensor::argmax).collect())
}

pub fn predict<T: Real>(tokens: &[usize], params: &ModelParams<T>, config: &ModelConfig) -> Result<Vec<usize>> {
    predict_batch(tokens, 1, tokens.len(), params, config)
}

/// Sequences padded to one bin length, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinBatch {
    pub n: usize,
    pub batch: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BinMetrics {
    pub n: usize,
    pub error: f64,
    pub saturation: f64,
    pub correct: usize,
    pub total: usize,
}

impl BinMetrics {
    pub fn bit_accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossMetrics {
    pub error: f64,
    pub saturation: f64,
    pub saturation_weight: f64,
    pub loss: f64,
    pub bins: Vec<BinMetrics>,
}

impl LossMetrics {
    /// Correct positions over all positions of all bins.
    pub fn bit_accuracy(&self) -> f64 {
        let c: usize = self.bins.iter().map(|b| b.correct).sum();
        let t: usize = self.bins.iter().map(|b| b.total).sum();
        c as f64 / t.max(1) as f64
    }
}

pub struct TotalLoss {
    pub loss: Var,
    pub vars: ModelVars,
    pub metrics: LossMetrics,
}

/// `w = error / (100 * max(sat, eps))`, so that `w * sat = error / 100`
/// whenever the saturation sum is non-negligible.
pub fn saturation_weight(error: f64, saturation: f64) -> f64 {
    SATURATION_RATIO * error / saturation.max(SATURATION_EPS)
}

/// Build the total training loss on `g`:
/// `sum_bins mean_xent + w * sum_bins mean_saturation`.
///
/// `w` is recomputed from the detached values unless `fixed_weight` is
/// given, and is a constant for differentiation either way.
pub fn total_loss<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    batches: &[BinBatch],
    params: &ModelParams<T>,
    config: &ModelConfig,
    training: bool,
    fixed_weight: Option<f64>,
    rng: &mut R,
) -> Result<TotalLoss> {
    if batches.iter().all(|b| b.batch == 0) {
        return Err(Error::Usage("total_loss needs at least one non-empty bin batch".into()));
    }
    let unroll = Unroll::new(config, training);
    let vars = params.register(g);
    let mut error_var: Option<Var> = None;
    let mut sat_var: Option<Var> = None;
    let mut metrics = LossMetrics::default();

    for b in batches.iter().filter(|b| b.batch > 0) {
        check_tokens(&b.inputs, b.batch, b.n)?;
        check_tokens(&b.targets, b.batch, b.n)?;
        let mut s = g.embed(vars.embedding, &b.inputs, &[b.batch, b.n])?;
        let mut sat = SaturationAccumulator::new();
        for _ in 0..b.n {
            s = unroll.step(g, s, &vars.cell, rng, &mut sat)?;
        }
        let logits = g.affine(s, vars.output_weight, vars.output_bias)?;
        let (xent, correct) = g.softmax_xent(logits, &b.targets)?;
        let err = g.scalar(xent).as_f64();
        error_var = Some(match error_var {
            Some(acc) => g.add(acc, xent)?,
            None => xent,
        });
        let mut bin_sat = 0.0;
        if let Some(total) = sat.total(g)? {
            let mean = g.scale(total, T::from_f64(1.0 / b.batch as f64));
            bin_sat = g.scalar(mean).as_f64();
            sat_var = Some(match sat_var {
                Some(acc) => g.add(acc, mean)?,
                None => mean,
            });
        }
        metrics.bins.push(BinMetrics {
            n: b.n,
            error: err,
            saturation: bin_sat,
            correct: correct.iter().filter(|&&c| c).count(),
            total: correct.len(),
        });
    }

    let error_var = error_var.expect("at least one bin");
    metrics.error = g.scalar(error_var).as_f64();
    let mut loss = error_var;
    if let Some(sv) = sat_var {
        metrics.saturation = g.scalar(sv).as_f64();
        if metrics.saturation > 0.0 {
            let w = fixed_weight.unwrap_or_else(|| saturation_weight(metrics.error, metrics.saturation));
            metrics.saturation_weight = w;
            let weighted = g.scale(sv, T::from_f64(w));
            loss = g.add(error_var, weighted)?;
        }
    }
    metrics.loss = g.scalar(loss).as_f64();
    Ok(TotalLoss { loss, vars, metrics })
}

/// Run backward from a [`TotalLoss`] and store the gradients into `params`.
pub fn accumulate_gradients<T: Real>(
    g: &Graph<T>,
    total: &TotalLoss,
    params: &mut ModelParams<T>,
) -> Result<()> {
    let mut grads = g.backward(total.loss)?;
    for (p, v) in params.params_mut().into_iter().zip(total.vars.all()) {
        match grads.take(v) {
            Some(gr) => p.set_grad(gr)?,
            None => p.zero_grad(),
        }
    }
    Ok(())
}
