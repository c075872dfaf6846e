#![allow(dead_code)]

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dngpu::cells::{CellKind, DiagonalSplit, Nonlinearity};
use dngpu::config::TrainConfig;
use dngpu::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, LossEval};
use dngpu::graph::Graph;
use dngpu::model::{accumulate_gradients, total_loss, BinBatch, ModelConfig, ModelParams};
use dngpu::tasks::TaskKind;
use dngpu::tensor::Shift;
use dngpu::Tensor;

// ---- big-integer task oracle ----

/// LSB-first digit string to a big integer.
pub fn big(digits: &[u32], base: u32) -> BigUint {
    digits
        .iter()
        .rev()
        .fold(BigUint::from(0u32), |acc, &d| acc * base + d)
}

pub fn plain_digits(s: &str, base: u32) -> Vec<u32> {
    s.chars().map(|c| c.to_digit(base).expect("digit glyph")).collect()
}

/// Groups of four glyphs: the first is the marked low bit (`o`/`i`), the
/// other three are the higher bits.
pub fn decimal_digits(s: &str) -> Vec<u32> {
    let chars: Vec<char> = s.chars().collect();
    assert_eq!(chars.len() % 4, 0, "decimal operand '{s}'");
    chars
        .chunks(4)
        .map(|g| {
            let low = match g[0] {
                'o' => 0,
                'i' => 1,
                c => panic!("unmarked group start '{c}' in '{s}'"),
            };
            let high: u32 = g[1..]
                .iter()
                .enumerate()
                .map(|(k, &c)| c.to_digit(2).expect("bit glyph") << (k + 1))
                .sum();
            let d = low + high;
            assert!(d < 10, "group decodes to {d}");
            d
        })
        .collect()
}

/// Check a rendered two-operand example against big-integer arithmetic.
pub fn verify_two_operand(kind: TaskKind, input: &str, target: &str) -> Result<(), String> {
    let alphabet = kind.alphabet();
    let op = alphabet.glyph(alphabet.len() - 1).unwrap();
    let (a, b) = input.split_once(op).ok_or("operator missing")?;
    if a.is_empty() || b.is_empty() {
        return Err(format!("empty operand in {input}"));
    }
    let (base, va, vb) = if kind == TaskKind::Mul10Bin {
        (10, big(&decimal_digits(a), 10), big(&decimal_digits(b), 10))
    } else {
        let base = kind.base();
        (base, big(&plain_digits(a, base), base), big(&plain_digits(b, base), base))
    };
    let expect = if kind == TaskKind::Addition { va + vb } else { va * vb };
    let got = if kind == TaskKind::Mul10Bin {
        let body = target.trim_end_matches('_');
        if target.len() - body.len() != 1 {
            return Err(format!("expected one trailing pad in {target}"));
        }
        big(&decimal_digits(body), 10)
    } else {
        if target.contains('_') {
            return Err(format!("unexpected pad in {target}"));
        }
        big(&plain_digits(target, base), base)
    };
    if got != expect {
        return Err(format!("{kind}: {input} -> {target}, expected {expect}"));
    }
    Ok(())
}

pub fn random_achievable_len(kind: TaskKind, rng: &mut ChaCha8Rng) -> usize {
    let lengths = kind.achievable_lengths(if kind == TaskKind::Mul10Bin { 81 } else { 41 });
    lengths[rng.random_range(0..lengths.len())]
}

// ---- scalar-loop cell oracle ----

/// Plain `Vec<f64>` copies of one cell's parameters, kernel `[w][m_in][m_out]`.
pub struct ScalarCell {
    pub w: usize,
    pub m: usize,
    pub u: Vec<f64>,
    pub ug: Vec<f64>,
    pub rg: Vec<f64>,
    pub b: Vec<f64>,
    pub bu: Vec<f64>,
    pub br: Vec<f64>,
}

impl ScalarCell {
    pub fn random(w: usize, m: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut v = |len: usize| (0..len).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
        ScalarCell {
            w,
            m,
            u: v(w * m * m),
            ug: v(w * m * m),
            rg: v(w * m * m),
            b: v(m),
            bu: v(m),
            br: v(m),
        }
    }

    fn conv(&self, k: &[f64], bias: &[f64], s: &[f64], n: usize) -> Vec<f64> {
        let (w, m) = (self.w, self.m);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for o in 0..m {
                let mut acc = bias[o];
                for t in 0..w {
                    let src = i as isize + t as isize - (w / 2) as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    for j in 0..m {
                        acc += s[src as usize * m + j] * k[(t * m + j) * m + o];
                    }
                }
                out[i * m + o] = acc;
            }
        }
        out
    }

    /// One step for a single sequence `s: [n][m]`. `dirs[j]` is the offset the
    /// update gate copies from (`-1` left neighbour, `0`, `+1`).
    pub fn step(&self, s: &[f64], n: usize, dirs: &[isize], hard: bool) -> Vec<f64> {
        let m = self.m;
        let sig = |x: f64| {
            if hard {
                ((x + 1.0) / 2.0).clamp(0.0, 1.0)
            } else {
                1.0 / (1.0 + (-x).exp())
            }
        };
        let th = |x: f64| if hard { x.clamp(-1.0, 1.0) } else { x.tanh() };
        let u: Vec<f64> = self.conv(&self.ug, &self.bu, s, n).into_iter().map(sig).collect();
        let r: Vec<f64> = self.conv(&self.rg, &self.br, s, n).into_iter().map(sig).collect();
        let rs: Vec<f64> = r.iter().zip(s).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = self.conv(&self.u, &self.b, &rs, n).into_iter().map(th).collect();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let src = i as isize + dirs[j];
                let carried = if src >= 0 && src < n as isize { s[src as usize * m + j] } else { 0.0 };
                let k = i * m + j;
                out[k] = u[k] * carried + (1.0 - u[k]) * c[k];
            }
        }
        out
    }

    pub fn to_params(&self) -> dngpu::cells::CellParams<f64> {
        use dngpu::tensor::Parameter;
        let (w, m) = (self.w, self.m);
        let t = |name: &str, shape: &[usize], v: &[f64]| Parameter::new(name, Tensor::from_f64(shape, v).unwrap());
        dngpu::cells::CellParams {
            candidate_kernel: t("cell.candidate_kernel", &[w, m, m], &self.u),
            update_kernel: t("cell.update_kernel", &[w, m, m], &self.ug),
            reset_kernel: t("cell.reset_kernel", &[w, m, m], &self.rg),
            candidate_bias: t("cell.candidate_bias", &[m], &self.b),
            update_bias: t("cell.update_bias", &[m], &self.bu),
            reset_bias: t("cell.reset_bias", &[m], &self.br),
        }
    }
}

/// Offsets as read by the scalar oracle: a right shift copies from `i - 1`.
pub fn oracle_offsets(split: &DiagonalSplit) -> Vec<isize> {
    (0..split.maps())
        .map(|j| match split.direction_of(j) {
            Shift::Stay => 0,
            Shift::Right => -1,
            Shift::Left => 1,
        })
        .collect()
}

// ---- model gradient check ----

pub fn tiny_model_config(cell: CellKind, nonlinearity: Nonlinearity, saturation: bool) -> ModelConfig {
    let mut c = ModelConfig::new(8, 4, vec![4, 8]);
    c.cell = cell;
    c.nonlinearity = nonlinearity;
    c.saturation = saturation;
    c
}

pub fn random_batches(config: &ModelConfig, per_bin: usize, rng: &mut ChaCha8Rng) -> Vec<BinBatch> {
    config
        .bins
        .iter()
        .map(|&n| BinBatch {
            n,
            batch: per_bin,
            inputs: (0..n * per_bin).map(|_| rng.random_range(0..config.vocab_in)).collect(),
            targets: (0..n * per_bin).map(|_| rng.random_range(0..config.vocab_out)).collect(),
        })
        .collect()
}

/// Finite-difference check of the full training loss, dropout masks frozen
/// by reseeding and the saturation weight held fixed.
pub fn model_grad_check(config: &ModelConfig, seed: u64, coords_per_param: Option<usize>) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(config, &mut rng).unwrap();
    // spread pre-activations over both linear and clamped regions
    for p in params.params_mut() {
        for v in p.value.data_mut() {
            *v *= 1.5;
        }
    }
    params.clamp_embedding();
    let batches = random_batches(config, 2, &mut rng);
    let dropout_seed = seed ^ 0xD0;
    let values: Vec<Tensor<f64>> = params.params().iter().map(|p| p.value.clone()).collect();

    let eval = |vals: &[Tensor<f64>], want: bool| -> dngpu::Result<LossEval> {
        let mut p = params.clone();
        for (dst, v) in p.params_mut().into_iter().zip(vals) {
            dst.value = v.clone();
        }
        let mut g = Graph::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let total = total_loss(&mut g, &batches, &p, config, true, Some(0.37), &mut drop_rng)?;
        let grads = if want {
            accumulate_gradients(&g, &total, &mut p)?;
            Some(p.params().iter().map(|q| q.grad.clone()).collect())
        } else {
            None
        };
        Ok(LossEval {
            loss: total.metrics.loss,
            grads,
            region: g.region_signature(),
        })
    };
    let cfg = GradCheckConfig {
        coords_per_param,
        seed,
        ..GradCheckConfig::default()
    };
    grad_check(eval, &values, &cfg).unwrap()
}

// ---- runs ----

pub fn small_train_config(task: TaskKind, maps: usize, bins: Vec<usize>, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.task = task;
    c.maps = maps;
    c.eval_length = *bins.last().unwrap();
    c.bins = bins;
    c.seed = seed;
    c.per_length = 50;
    c.batch_per_bin = 4;
    c.eval_count = 16;
    c.eval_interval = 5;
    c.max_steps = 20;
    c.checkpoint_interval = 0;
    c
}

/// Metrics CSV with the wall-clock column blanked.
pub fn mask_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            if f.len() > 1 && f[0] != "step" {
                f[1] = "-";
            }
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
