//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs the fast criteria. The training
//! criteria (7, 8, 9) take hours on one core and run with
//! `cargo test --release --test acceptance -- --full`; `--only N` limits
//! the run to one criterion.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use dngpu::cells::{
    cgru_step, dcgru_step, CellKind, DiagonalSplit, DropoutSpec, Nonlinearity, SaturationAccumulator, StepOptions,
};
use dngpu::checkpoint;
use dngpu::config::TrainConfig;
use dngpu::graph::Graph;
use dngpu::model::{forward, total_loss, ModelConfig, ModelParams};
use dngpu::optimizer::{adamax_apply, AdaMaxState, OptimConfig};
use dngpu::tasks::{decode_decimal_binary, encode_decimal_binary, two_operand_example, TaskKind, TaskSpec};
use dngpu::tensor::Parameter;
use dngpu::trainer::{evaluate, run_training, Budget, RunFiles, TrainState, Trainer};
use dngpu::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---- 1. gradient correctness ----

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for cell in [CellKind::Cgru, CellKind::Dcgru] {
        for nl in [Nonlinearity::Hard, Nonlinearity::Soft] {
            for sat in [true, false] {
                let config = tiny_model_config(cell, nl, sat);
                let r = model_grad_check(&config, 17, None);
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
                skipped += r.skipped_near_kink;
                if r.checked == 0 {
                    return outcome(false, format!("{cell:?}/{nl:?}/sat={sat}: no coordinate checked"));
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("max rel error {worst:.2e} over {checked} coordinates ({skipped} near a kink skipped), {secs:.1}s"),
    )
}

// ---- 2. cell oracle equivalence ----

fn graph_step(
    cell: &ScalarCell,
    s: &[f64],
    n: usize,
    kind: CellKind,
    split: &DiagonalSplit,
    nl: Nonlinearity,
) -> Tensor<f64> {
    let params = cell.to_params();
    let mut g = Graph::<f64>::new();
    let vars = params.register(&mut g);
    let x = g.leaf(Tensor::from_f64(&[n, cell.m], s).unwrap());
    let opts = StepOptions {
        nonlinearity: nl,
        saturation_limit: None,
        dropout: DropoutSpec::off(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sat = SaturationAccumulator::new();
    let out = match kind {
        CellKind::Cgru => cgru_step(&mut g, x, &vars, &opts, &mut rng, &mut sat).unwrap(),
        CellKind::Dcgru => dcgru_step(&mut g, x, &vars, &split.directions(), &opts, &mut rng, &mut sat).unwrap(),
    };
    g.value(out).clone()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=9);
        let n = rng.random_range(1..=10);
        let w = [1, 3, 5][rng.random_range(0..3)];
        let nl = if rng.random_bool(0.5) { Nonlinearity::Hard } else { Nonlinearity::Soft };
        let right = rng.random_range(0..=m);
        let left = rng.random_range(0..=m - right);
        let split = DiagonalSplit {
            stay: m - right - left,
            right,
            left,
        };
        let cell = ScalarCell::random(w, m, 1.0, &mut rng);
        let s: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hard = nl == Nonlinearity::Hard;

        let d = graph_step(&cell, &s, n, CellKind::Dcgru, &split, nl);
        let d_ref = cell.step(&s, n, &oracle_offsets(&split), hard);
        let c = graph_step(&cell, &s, n, CellKind::Cgru, &split, nl);
        let c_ref = cell.step(&s, n, &vec![0; m], hard);
        for (a, b) in d.data().iter().zip(&d_ref).chain(c.data().iter().zip(&c_ref)) {
            worst = worst.max((a - b).abs());
        }

        let stay = graph_step(&cell, &s, n, CellKind::Dcgru, &DiagonalSplit::all_stay(m), nl);
        if stay != c {
            return outcome(false, "DCGRU with all-stay split differs from CGRU");
        }
    }
    outcome(
        worst <= 1e-12,
        format!("100 instances, max |graph - scalar loop| = {worst:.1e}; all-stay DCGRU == CGRU bitwise"),
    )
}

// ---- 3. AdaMax step bound ----

fn criterion_3() -> Outcome {
    // hand-computed two steps, noise off
    let cfg = OptimConfig {
        noise_scale: 0.0,
        ..OptimConfig::for_maps(96)
    };
    let mut p = Parameter::new("theta", Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap());
    let mut state = AdaMaxState::new([&p]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut values = Vec::new();
    for g in [0.3, -0.6] {
        p.grad = Tensor::from_f64(&[1], &[g]).unwrap();
        adamax_apply(&mut [&mut p], &mut state, &cfg, 0.005, &mut rng).unwrap();
        values.push(p.value.data()[0]);
    }
    let expect: [f64; 2] = [0.995_000_000_166_666_7, 0.995_263_158_052_631_5];
    let hand_err = values
        .iter()
        .zip(expect)
        .map(|(a, b): (&f64, f64)| (a - b).abs())
        .fold(0.0, f64::max);

    // randomized steps with default clipping and noise
    let cfg = OptimConfig::for_maps(96);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut p = Parameter::new("theta", Tensor::<f64>::from_f64(&[64], &init).unwrap());
    let mut state = AdaMaxState::new([&p]);
    let mut worst_excess = f64::NEG_INFINITY;
    for t in 1..=1000u64 {
        let lr = 10f64.powf(rng.random_range(-4.0..-1.0));
        let scale = 10f64.powf(rng.random_range(-6.0..4.0));
        let g: Vec<f64> = (0..64).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        p.grad = Tensor::from_f64(&[64], &g).unwrap();
        let before = p.value.clone();
        adamax_apply(&mut [&mut p], &mut state, &cfg, lr, &mut rng).unwrap();
        let bound = lr / (1.0 - cfg.beta1.powi(t as i32));
        for (a, b) in p.value.data().iter().zip(before.data()) {
            worst_excess = worst_excess.max((a - b).abs() - bound);
        }
    }
    outcome(
        hand_err <= 1e-12 && worst_excess <= 1e-6,
        format!("hand example error {hand_err:.1e}; max(|update| - lr/(1-b1^t)) over 1000 steps = {worst_excess:.2e}"),
    )
}

// ---- 4. hard-mode state boundedness ----

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_abs = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(3..=16);
        let mut config = ModelConfig::new(m, 4, vec![rng.random_range(1..=20)]);
        config.cell = if rng.random_bool(0.5) { CellKind::Dcgru } else { CellKind::Cgru };
        config.dropout = 0.0;
        let mut params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let scale = rng.random_range(1.0..10.0);
        for p in params.params_mut() {
            for v in p.value.data_mut() {
                *v *= scale;
            }
        }
        params.clamp_embedding();
        let n = config.bins[0];
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let training = rng.random_bool(0.5);
        let out = forward(&tokens, &params, &config, training, true, &mut rng).unwrap();
        for s in out.trace.unwrap() {
            max_abs = max_abs.max(s.max_abs());
        }
    }
    outcome(max_abs <= 1.0, format!("max |state| over 100 random models = {max_abs}"))
}

// ---- 5. saturation mechanics ----

fn saturation_of(values: &[f64]) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[values.len()], values).unwrap());
    let s = g.saturation(x, 0.9);
    g.scalar(s)
}

fn criterion_5() -> Outcome {
    let inside = [0.0, 0.5, -0.5, 0.9, -0.9, 0.899];
    let zero_inside = saturation_of(&inside) == 0.0;
    let positive_outside = [0.95, -0.95, 2.0, -3.0]
        .iter()
        .all(|&v| saturation_of(&[0.1, v, -0.2]) > 0.0);

    // a model whose pre-activations all stay inside the limit
    let mut config = ModelConfig::new(6, 3, vec![5]);
    config.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
    for p in params.params_mut().into_iter().skip(1).take(6) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    params.cell.update_bias.value.data_mut().iter_mut().for_each(|v| *v = 0.5);
    let tokens = [0, 1, 2, 1, 0];
    let quiet = forward(&tokens, &params, &config, false, false, &mut rng).unwrap().saturation_sum;
    params.cell.update_bias.value.data_mut()[2] = 0.95;
    let loud = forward(&tokens, &params, &config, false, false, &mut rng).unwrap().saturation_sum;

    // adaptive weight: saturation contribution equals error / 100
    let mut ratio_err = 0.0f64;
    for seed in 0..10 {
        let config = tiny_model_config(CellKind::Dcgru, Nonlinearity::Hard, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batches = random_batches(&config, 4, &mut rng);
        let mut g = Graph::new();
        let t = total_loss(&mut g, &batches, &params, &config, true, None, &mut rng).unwrap();
        let m = &t.metrics;
        if m.saturation <= 1e-6 {
            return outcome(false, "constructed model did not saturate");
        }
        ratio_err = ratio_err.max(((m.loss - m.error) - m.error / 100.0).abs());
    }
    outcome(
        zero_inside && positive_outside && quiet == 0.0 && loud > 0.0 && ratio_err <= 1e-9,
        format!(
            "inside -> 0: {zero_inside}, outside -> >0: {positive_outside}, model {quiet} / {loud:.3}, |sat term - error/100| = {ratio_err:.1e}"
        ),
    )
}

// ---- 6. task oracles ----

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in TaskKind::ALL {
        let spec = TaskSpec::new(kind);
        let alphabet = spec.alphabet();
        for _ in 0..10_000 {
            let len = random_achievable_len(kind, &mut rng);
            let ex = spec.generate(len, &mut rng).unwrap();
            let input = alphabet.render(&ex.input);
            let target = alphabet.render(&ex.target);
            let verdict = if kind.is_two_operand() {
                verify_two_operand(kind, &input, &target)
            } else {
                let mut expect: Vec<char> = input.chars().collect();
                match kind {
                    TaskKind::Sort => expect.sort(),
                    TaskKind::Reverse => expect.reverse(),
                    _ => {}
                }
                if target.chars().eq(expect.iter().copied()) {
                    Ok(())
                } else {
                    Err(format!("{kind}: {input} -> {target}"))
                }
            };
            if let Err(e) = verdict {
                return outcome(false, e);
            }
        }
    }
    for _ in 0..10_000 {
        let n = rng.random_range(1..=20);
        let digits: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
        if decode_decimal_binary(&encode_decimal_binary(&digits).unwrap()).unwrap() != digits {
            return outcome(false, format!("decimal round trip failed for {digits:?}"));
        }
    }
    let len = two_operand_example(TaskKind::Mul10Bin, &[1, 2, 3, 4, 5], &[6, 7, 8, 9, 1])
        .unwrap()
        .input
        .len();
    outcome(
        len == 41,
        format!("7 tasks x 10^4 examples verified, 10^4 decimal round trips, 5x5-digit decimal input length {len}"),
    )
}

// ---- 10. determinism and persistence ----

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = small_train_config(TaskKind::Addition, 8, vec![5, 9], 10);
    let budget = Budget::from_config(&config);
    let mut csv = Vec::new();
    for k in 0..2 {
        let files = RunFiles::new(dir.path().join(format!("run{k}")));
        run_training(TrainState::<f32>::new(config.clone()).unwrap(), budget, Some(&files), |_| {}).unwrap();
        csv.push(mask_seconds(&std::fs::read_to_string(files.metrics()).unwrap()));
    }
    let same_csv = csv[0] == csv[1] && csv[0].lines().count() == 5;

    let mut trainer = Trainer::<f32>::from_config(config).unwrap();
    for _ in 0..10 {
        trainer.train_step().unwrap();
    }
    let path = dir.path().join("mid.dngpu");
    checkpoint::save(&trainer.state, &path).unwrap();
    for _ in 0..10 {
        trainer.train_step().unwrap();
    }
    let mut resumed = Trainer::new(checkpoint::load::<f32>(&path).unwrap()).unwrap();
    for _ in 0..10 {
        resumed.train_step().unwrap();
    }
    let same_state = resumed.state == trainer.state
        && checkpoint::to_bytes(&resumed.state) == checkpoint::to_bytes(&trainer.state);
    outcome(
        same_csv && same_state,
        format!("metrics CSV identical across runs: {same_csv}; resumed 10 steps equal uninterrupted: {same_state}"),
    )
}

// ---- training criteria ----

/// Step at which each addition seed first reached the target, shared
/// between criteria 7 and 9.
type HitSteps = Arc<Mutex<HashMap<u64, Option<u64>>>>;

fn addition_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.task = TaskKind::Addition;
    c.maps = 48;
    c.bins = vec![9, 17, 25, 33];
    c.batch_per_bin = 32;
    c.eval_length = 129;
    c.eval_count = 1024;
    c.eval_interval = 100;
    c.max_steps = 2000;
    c.seed = seed;
    c
}

fn train_logged(config: TrainConfig, label: &str) -> dngpu::trainer::RunOutcome<f32> {
    let budget = Budget::from_config(&config);
    let started = Instant::now();
    run_training(TrainState::<f32>::new(config).unwrap(), budget, None, |r| {
        eprintln!(
            "    [{label}] step {:>5} eval {:.4} train {:.4} error {:.4} ({:.0}s)",
            r.step,
            r.eval_bit_acc,
            r.train_bit_acc,
            r.error_loss,
            started.elapsed().as_secs_f64()
        )
    })
    .unwrap()
}

fn criterion_7(hits: &HitSteps) -> Outcome {
    let mut add_pass = 0;
    let mut notes = Vec::new();
    for seed in 1..=5 {
        let out = train_logged(addition_config(seed), &format!("add seed {seed}"));
        hits.lock().unwrap().insert(seed, out.target_step);
        if out.target_step.is_some() {
            add_pass += 1;
        }
        let last = out.log.last().map_or(0.0, |r| r.eval_bit_acc);
        notes.push(format!("s{seed}:{}", out.target_step.map_or(format!("miss({last:.4})"), |s| s.to_string())));
    }
    let mut copy_pass = 0;
    for seed in 1..=5 {
        let mut c = TrainConfig::default();
        c.task = TaskKind::Copy;
        c.maps = 24;
        c.bins = vec![5, 10, 20];
        c.eval_length = 80;
        c.eval_count = 1024;
        c.eval_interval = 50;
        c.max_steps = 500;
        c.seed = seed;
        let out = train_logged(c, &format!("copy seed {seed}"));
        if out.target_step.is_some() {
            copy_pass += 1;
        }
        notes.push(format!("copy s{seed}:{}", out.target_step.map_or("miss".into(), |s| s.to_string())));
    }
    outcome(
        add_pass >= 4 && copy_pass == 5,
        format!(
            "addition m=48 len 129: {add_pass}/5 seeds >= 0.99 within 2000 steps; copy m=24 len 80: {copy_pass}/5 within 500 [{}]",
            notes.join(" ")
        ),
    )
}

fn criterion_8() -> Outcome {
    // length-81 fallback; each passing run is also scored once at length 401
    let mut pass = 0;
    let mut fail = 0;
    let mut notes = Vec::new();
    for seed in 1..=5 {
        if pass >= 3 || fail > 2 {
            break;
        }
        let mut c = TrainConfig::default();
        c.task = TaskKind::Mul2;
        c.maps = 96;
        c.eval_length = 81;
        c.eval_count = 1024;
        c.max_steps = 4000;
        c.seed = seed;
        let out = train_logged(c.clone(), &format!("mul2 seed {seed}"));
        match out.target_step {
            Some(step) => {
                pass += 1;
                let long = evaluate(&out.state.params, &c.model_config(), &c.spec(), 401, 256, 401).unwrap();
                notes.push(format!("s{seed}:{step} (len401 {:.4})", long.bit_accuracy));
            }
            None => {
                fail += 1;
                let last = out.log.last().map_or(0.0, |r| r.eval_bit_acc);
                notes.push(format!("s{seed}:miss({last:.4})"));
            }
        }
    }
    outcome(
        pass >= 3,
        format!(
            "binary multiplication m=96, length-81 fallback: {pass} seeds >= 0.99 within 4000 steps [{}]",
            notes.join(" ")
        ),
    )
}

fn criterion_9(hits: &HitSteps) -> Outcome {
    let mut agree = 0;
    let mut notes = Vec::new();
    for seed in 1..=3 {
        let cached = hits.lock().unwrap().get(&seed).copied();
        let hit = match cached {
            Some(h) => h,
            None => train_logged(addition_config(seed), &format!("full seed {seed}")).target_step,
        };
        let Some(step) = hit else {
            notes.push(format!("s{seed}: full model never reached 0.99"));
            continue;
        };
        let mut accs = Vec::new();
        for (name, tweak) in [
            ("soft", (|c: &mut TrainConfig| c.nonlinearity = Nonlinearity::Soft) as fn(&mut TrainConfig)),
            ("no-diagonal", |c: &mut TrainConfig| c.cell = CellKind::Cgru),
        ] {
            let mut c = addition_config(seed);
            tweak(&mut c);
            c.max_steps = step;
            c.eval_interval = step;
            let out = train_logged(c, &format!("{name} seed {seed}"));
            let acc = out.log.last().map_or(0.0, |r| r.eval_bit_acc);
            accs.push((name, acc));
        }
        let lower = accs.iter().all(|&(_, a)| a < 0.99);
        let full_acc = 0.99;
        if lower {
            agree += 1;
        }
        notes.push(format!(
            "s{seed}@{step}: full>={full_acc} {}",
            accs.iter().map(|(n, a)| format!("{n} {a:.4}")).collect::<Vec<_>>().join(" ")
        ));
    }
    outcome(
        agree >= 2,
        format!("ablations strictly below the full model on {agree}/3 seeds [{}]", notes.join("; ")),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let full = args.iter().any(|a| a == "--full");
    let only: Option<u32> = args
        .iter()
        .position(|a| a == "--only")
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok());

    let hits: HitSteps = Arc::default();
    let h7 = hits.clone();
    let h9 = hits.clone();
    let criteria: Vec<(u32, &str, bool, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "gradient correctness", false, Box::new(criterion_1)),
        (2, "cell oracle equivalence", false, Box::new(criterion_2)),
        (3, "AdaMax step bound", false, Box::new(criterion_3)),
        (4, "hard-mode state bound", false, Box::new(criterion_4)),
        (5, "saturation mechanics", false, Box::new(criterion_5)),
        (6, "task oracles", false, Box::new(criterion_6)),
        (7, "desk-scale addition and copy", true, Box::new(move || criterion_7(&h7))),
        (8, "binary multiplication", true, Box::new(criterion_8)),
        (9, "ablation direction", true, Box::new(move || criterion_9(&h9))),
        (10, "determinism and persistence", false, Box::new(criterion_10)),
    ];

    let mut failed = 0;
    for (n, name, heavy, run) in &criteria {
        if only.is_some_and(|o| o != *n) {
            continue;
        }
        if *heavy && !full && only.is_none() {
            println!("criterion {n:>2} [{name}]: NOT RUN (training run; pass --full)");
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} [{name}]: {} ({:.1}s) {}",
            if result.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

