//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any check fails.
//!
//! Pass criterion numbers to run a subset:
//! `cargo test -p lcat-tests --test acceptance -- 1 2 9`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use lcat_cli::{
    cmd_audit, cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, AuditArgs, EvalArgs, GenDataArgs, SweepArgs, TrainArgs,
    CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE,
};
use lcat_core::attack::pgd_attack_counted;
use lcat_core::gradcheck::check_gradients;
use lcat_core::head::{fine_tune, fit_head, logits_from_embeddings, HeadState};
use lcat_core::model::{denoise_forward, Activation, BoundParams, Pooling};
use lcat_core::rng::{seeded, Rng};
use lcat_core::train::trades_loss;
use lcat_core::{
    format_metric, generate_synthetic, pgd_attack, run_training, sample_batch, AttackConfig, AttackObjective,
    EmbeddingNetConfig, Episode, EpochRecord, HeadConfig, HeadKind, MetricReport, ModelConfig, ModelParams,
    OptimizerConfig, SamplerConfig, ScheduleConfig, Split, SyntheticSpec, Tape, Tensor, TrainConfig, UpdateGranularity,
    Var,
};
use nalgebra::DMatrix;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Shared working directory: the desk dataset and trained desk runs, each
/// produced on first use.
struct Desk {
    root: PathBuf,
    data: Option<PathBuf>,
    runs: BTreeMap<String, PathBuf>,
    reports: BTreeMap<String, MetricReport>,
}

impl Desk {
    fn data(&mut self) -> Result<PathBuf, String> {
        if let Some(p) = &self.data {
            return Ok(p.clone());
        }
        let out = self.root.join("desk.fsb");
        cmd_gen_data(&GenDataArgs {
            out: out.clone(),
            seed: 0,
            classes: 20,
            images_per_class: 40,
            size: 16,
            channels: 1,
            noise: None,
            test_fraction: 0.25,
            val_fraction: 0.0,
            way: 5,
            force: false,
        })
        .map_err(|e| e.to_string())?;
        self.data = Some(out.clone());
        Ok(out)
    }

    fn train(&mut self, name: &str, args: TrainArgs) -> Result<PathBuf, String> {
        if let Some(p) = self.runs.get(name) {
            return Ok(p.clone());
        }
        let out = self.root.join(name);
        let args = TrainArgs {
            data: Some(self.data()?),
            out: out.clone(),
            ..args
        };
        let t = Instant::now();
        let msg = cmd_train(&args).map_err(|e| e.to_string())?;
        println!("    {name}: {msg} [{:.0} s]", t.elapsed().as_secs_f64());
        self.runs.insert(name.to_string(), out.clone());
        Ok(out)
    }

    /// A full desk run (E=50, 20 meta-batches) of a method preset.
    fn desk_run(&mut self, preset: &str) -> Result<PathBuf, String> {
        self.train(
            &format!("desk-{preset}"),
            TrainArgs {
                preset: Some(preset.to_string()),
                seed: Some(0),
                ..TrainArgs::default()
            },
        )
    }

    fn desk_report(&mut self, preset: &str) -> Result<MetricReport, String> {
        if let Some(r) = self.reports.get(preset) {
            return Ok(r.clone());
        }
        let run = self.desk_run(preset)?;
        let t = Instant::now();
        cmd_eval(&EvalArgs {
            target: run.clone(),
            ..EvalArgs::default()
        })
        .map_err(|e| e.to_string())?;
        let report: MetricReport = read_json(&run.join(REPORT_FILE))?;
        println!(
            "    {preset}: {} [{:.0} s]",
            report.table_line(),
            t.elapsed().as_secs_f64()
        );
        self.reports.insert(preset.to_string(), report.clone());
        Ok(report)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn metric_log(run: &Path) -> Result<Vec<EpochRecord>, String> {
    let text = fs::read_to_string(run.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn phase_string(log: &[EpochRecord]) -> String {
    log.iter().map(|r| r.phase.letter()).collect()
}

/// Cheap runs: one meta-batch per epoch.
fn stub_args(preset: &str, epochs: usize) -> TrainArgs {
    TrainArgs {
        preset: Some(preset.to_string()),
        seed: Some(0),
        epochs: Some(epochs),
        meta_batches: Some(1),
        ..TrainArgs::default()
    }
}

fn criterion_1(desk: &mut Desk) -> Outcome {
    let lcat = desk.train("stub-lcat-50", stub_args("lcat", 50))?;
    let scat = desk.train("stub-scat-50", stub_args("scat", 50))?;
    let expect_lcat = format!("{}{}", "C".repeat(5), "A".repeat(5)).repeat(5);
    let expect_scat = format!("{}A", "C".repeat(9)).repeat(5);
    let got_lcat = phase_string(&metric_log(&lcat)?);
    let got_scat = phase_string(&metric_log(&scat)?);
    ensure(got_lcat == expect_lcat, || format!("LCAT logged {got_lcat}"))?;
    ensure(got_scat == expect_scat, || format!("SCAT logged {got_scat}"))?;
    Ok(format!("LCAT {got_lcat}; SCAT {got_scat}"))
}

fn criterion_2(desk: &mut Desk) -> Outcome {
    let aq = desk.train("stub-aq-10", stub_args("aq", 10))?;
    let lcat = desk.train("stub-lcat-10", stub_args("lcat", 10))?;
    let out = cmd_audit(&AuditArgs { run_a: lcat, run_b: aq }).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let ratio = v["ratio"].as_f64().ok_or("audit reported no ratio")?;
    let shown = format!("{ratio:.4}");
    ensure(ratio == 0.5, || format!("ratio {ratio}"))?;
    Ok(format!(
        "adversarial batches LCAT {} / AQ {} = {shown}",
        v["adv_batches_A"], v["adv_batches_B"]
    ))
}

/// One 1x1 convolution with bias and no nonlinearity: ProtoNet logits are
/// `-w²·‖x_q - mean_k‖²` and the bias cancels.
fn two_param_model() -> ModelConfig {
    ModelConfig {
        net: EmbeddingNetConfig {
            in_channels: 1,
            height: 4,
            width: 4,
            channels: vec![1],
            kernel_size: 1,
            pooling: Pooling::None,
            activation: Activation::Identity,
            denoise: false,
        },
        head: HeadConfig::proto(),
    }
}

fn oracle_grad_w(w: f64, ep: &Episode<f32>) -> f64 {
    let d = 16;
    let s: Vec<f64> = ep.support_images.data().iter().map(|&v| v as f64).collect();
    let q: Vec<f64> = ep.query_images.data().iter().map(|&v| v as f64).collect();
    let means: Vec<Vec<f64>> = (0..ep.way)
        .map(|k| {
            (0..d)
                .map(|j| (0..ep.shot).map(|i| s[(k * ep.shot + i) * d + j]).sum::<f64>() / ep.shot as f64)
                .collect()
        })
        .collect();
    let mut g = 0.0;
    for (i, &y) in ep.query_labels.iter().enumerate() {
        let x = &q[i * d..(i + 1) * d];
        let dist: Vec<f64> = means
            .iter()
            .map(|m| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let logits: Vec<f64> = dist.iter().map(|v| -w * w * v).collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for k in 0..ep.way {
            let p = (logits[k] - max).exp() / z;
            g += (p - if k == y { 1.0 } else { 0.0 }) * (-2.0 * w * dist[k]);
        }
    }
    g / ep.query_labels.len() as f64
}

fn criterion_3(_: &mut Desk) -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        num_classes: 12,
        images_per_class: 10,
        height: 4,
        width: 4,
        noise_std: 0.2,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        sampler: SamplerConfig::new(3, 2, 2, Split::Train),
        model: two_param_model(),
        attack: AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::train_preset()
        },
        schedule: ScheduleConfig {
            meta_batches_per_epoch: 3,
            batch_size: 2,
            granularity: UpdateGranularity::PerBlock,
            ..ScheduleConfig::lcat(20)
        },
        optimizer: OptimizerConfig::sgd(0.05),
        record_wall_time: false,
    };
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let state = run_training::<f64>(&data, &cfg, seed, &mut ()).map_err(|e| e.to_string())?;
        let (w, b) = (state.params.tensors()[0].data()[0], state.params.tensors()[1].data()[0]);

        let mut rng = seeded(seed);
        let p0 = cfg.model.init_params(&mut rng).map_err(|e| e.to_string())?;
        let (mut ow, ob) = (p0.tensors()[0].data()[0] as f64, p0.tensors()[1].data()[0] as f64);
        let s = &cfg.schedule;
        let mut acc = 0.0;
        for epoch in 0..s.epochs {
            for _ in 0..s.meta_batches_per_epoch {
                for ep in sample_batch(&data, &cfg.sampler, s.batch_size, &mut rng).map_err(|e| e.to_string())? {
                    acc += oracle_grad_w(ow, &ep);
                }
            }
            if s.ends_block(epoch) {
                ow -= cfg.optimizer.lr / s.batch_size as f64 * acc;
                acc = 0.0;
            }
        }
        let err = (w - ow).abs().max((b - ob).abs());
        ensure(err < 1e-6, || format!("seed {seed}: ({w}, {b}) vs oracle ({ow}, {ob})"))?;
        worst = worst.max(err);
    }
    ensure(worst < 1e-12, || format!("64-bit run differs from oracle by {worst:e}"))?;
    Ok(format!("5 seeds x 20 epochs, max |θ - θ_oracle| = {worst:.1e}"))
}

const SEEDS: u64 = 20;
const H: f64 = 1e-6;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Magnitudes in [lo, hi) with random sign.
fn signed(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> lcat_core::Result<Var>>;
type OpCase = (&'static str, fn(&mut Rng) -> Vec<Tensor<f64>>, OpFn);

fn op_cases() -> Vec<OpCase> {
    fn two(r: &mut Rng) -> Vec<Tensor<f64>> {
        vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]
    }
    fn one(r: &mut Rng) -> Vec<Tensor<f64>> {
        vec![uniform(r, &[3, 4], -1.0, 1.0)]
    }
    fn logits(r: &mut Rng) -> Vec<Tensor<f64>> {
        vec![uniform(r, &[4, 3], -2.0, 2.0), uniform(r, &[4, 3], -2.0, 2.0)]
    }
    let labels = [0usize, 2, 1, 2];
    vec![
        ("add", two, Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", two, Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", two, Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", one, Box::new(|t, v| Ok(t.scale(v[0], -0.7)))),
        ("add_scalar", one, Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        (
            "scale_by",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1], 0.5, 2.0)],
            Box::new(|t, v| t.scale_by(v[0], v[1])),
        ),
        (
            "relu",
            |r| vec![signed(r, &[4, 4], 0.1, 1.0)],
            Box::new(|t, v| Ok(t.relu(v[0]))),
        ),
        (
            "clip",
            |r| vec![signed(r, &[12], 0.0, 0.4)],
            Box::new(|t, v| Ok(t.clip(v[0], -0.5, 0.5))),
        ),
        (
            "clip (saturated)",
            |r| vec![signed(r, &[12], 0.6, 1.0)],
            Box::new(|t, v| Ok(t.clip(v[0], -0.5, 0.5))),
        ),
        (
            "matmul",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        ("transpose", one, Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", one, Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        (
            "flatten",
            |r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
            Box::new(|t, v| t.flatten(v[0])),
        ),
        ("sum", one, Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", one, Box::new(|t, v| Ok(t.mean(v[0])))),
        (
            "neg_sq_dist",
            |r| vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            Box::new(|t, v| t.neg_sq_dist(v[0], v[1])),
        ),
        (
            "solve",
            |r| {
                let mut a = uniform(r, &[3, 3], -1.0, 1.0);
                for i in 0..3 {
                    a.data_mut()[i * 4] += 3.0;
                }
                vec![a, uniform(r, &[3, 2], -1.0, 1.0)]
            },
            Box::new(|t, v| t.solve(v[0], v[1])),
        ),
        (
            "conv2d s1 p1",
            |r| {
                vec![
                    uniform(r, &[2, 2, 5, 5], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                ]
            },
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
        ),
        (
            "conv2d s2 p0",
            |r| {
                vec![
                    uniform(r, &[2, 2, 5, 5], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                ]
            },
            Box::new(|t, v| t.conv2d(v[0], v[1], 2, 0)),
        ),
        (
            "bias_add",
            |r| vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            Box::new(|t, v| t.bias_add(v[0], v[1])),
        ),
        (
            "avg_pool",
            |r| vec![uniform(r, &[2, 2, 4, 4], -1.0, 1.0)],
            Box::new(|t, v| t.avg_pool(v[0], 2)),
        ),
        (
            "box_filter3",
            |r| vec![uniform(r, &[2, 2, 4, 5], -1.0, 1.0)],
            Box::new(|t, v| t.box_filter3(v[0])),
        ),
        (
            "denoise",
            |r| {
                vec![
                    uniform(r, &[2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, &[3, 3, 1, 1], -1.0, 1.0),
                ]
            },
            Box::new(|t, v| denoise_forward(t, v[0], v[1])),
        ),
        (
            "softmax_cross_entropy",
            |r| vec![uniform(r, &[4, 3], -2.0, 2.0)],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
        ),
        ("kl_divergence", logits, Box::new(|t, v| t.kl_divergence(v[0], v[1]))),
        (
            "trades_loss",
            logits,
            Box::new(move |t, v| trades_loss(t, v[0], v[1], &labels, 6.0)),
        ),
    ]
}

/// `sum(w ⊙ out)` with a fixed random `w` reduces any output to a scalar.
fn reduce(t: &mut Tape<f64>, out: Var, w: &[f64]) -> lcat_core::Result<Var> {
    if t.value(out).is_scalar() {
        return Ok(out);
    }
    let n = t.value(out).len();
    let w = t.constant(Tensor::from_fn(t.shape(out), |i| w[i % n]));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn tiny_model(head: HeadConfig) -> ModelConfig {
    ModelConfig {
        net: EmbeddingNetConfig {
            in_channels: 1,
            height: 4,
            width: 4,
            channels: vec![3, 3],
            kernel_size: 3,
            pooling: Pooling::Mean2,
            activation: Activation::Relu,
            denoise: true,
        },
        head,
    }
}

/// Smallest |ReLU input| of the tiny net on `x`.
fn min_relu_input(model: &ModelConfig, params: &ModelParams<f64>, x: &Tensor<f64>) -> f64 {
    let mut t = Tape::new();
    let b = params.bind(&mut t, false);
    let mut h = t.constant(x.clone());
    let mut min = f64::MAX;
    for blk in 0..model.net.channels.len() {
        h = t.conv2d(h, b.vars[3 * blk], 1, 1).unwrap();
        h = t.bias_add(h, b.vars[3 * blk + 1]).unwrap();
        h = denoise_forward(&mut t, h, b.vars[3 * blk + 2]).unwrap();
        min = t.value(h).data().iter().fold(min, |m, v| m.min(v.abs()));
        h = t.relu(h);
        h = t.avg_pool(h, 2).unwrap();
    }
    min
}

fn criterion_4(_: &mut Desk) -> Outcome {
    let cases = op_cases();
    let mut worst = 0.0f64;
    for (name, make, f) in &cases {
        for seed in 0..SEEDS {
            let mut rng = seeded(5000 + seed);
            let inputs = make(&mut rng);
            let w: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = check_gradients(&inputs, H, FLOOR, |t, v| {
                let out = f(t, v)?;
                reduce(t, out, &w)
            })
            .map_err(|e| format!("{name}: {e}"))?;
            ensure(r.max_rel_error < TOL, || {
                format!("{name} seed {seed}: rel error {:.2e}", r.max_rel_error)
            })?;
            worst = worst.max(r.max_rel_error);
        }
    }

    let mut learned = HeadConfig::ridge();
    learned.learn_scale = true;
    let mut episodic = 0;
    for head in [HeadConfig::proto(), HeadConfig::ridge(), learned] {
        let model = tiny_model(head);
        let mut checked = 0;
        let mut seed = 0;
        while checked < SEEDS {
            let mut rng = seeded(6000 + seed);
            seed += 1;
            let mut params = model.init_params(&mut rng).map_err(|e| e.to_string())?.cast::<f64>();
            for t in params.tensors_mut() {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            if let Some(s) = params.get_mut("head.scale") {
                s.data_mut()[0] = rng.random_range(0.5..2.0);
            }
            let support = uniform(&mut rng, &[4, 1, 4, 4], 0.0, 1.0);
            let query = uniform(&mut rng, &[4, 1, 4, 4], 0.0, 1.0);
            // Finite differences straddling a ReLU kink are meaningless.
            if min_relu_input(&model, &params, &support).min(min_relu_input(&model, &params, &query)) < 1e-4 {
                continue;
            }
            checked += 1;
            let ep = Episode::from_parts(support.clone(), query.clone(), 2, 2, 2).map_err(|e| e.to_string())?;
            let mut inputs = params.tensors().to_vec();
            inputs.push(support);
            inputs.push(query);
            let np = params.len();
            let r = check_gradients(&inputs, H, FLOOR, |t, v| {
                let bound = BoundParams { vars: v[..np].to_vec() };
                let state = model.fine_tune_on(t, &bound, v[np], &ep.support_labels, ep.way)?;
                let logits = model.head_logits_on(t, &bound, state, v[np + 1])?;
                t.softmax_cross_entropy(logits, &ep.query_labels)
            })
            .map_err(|e| e.to_string())?;
            ensure(r.max_rel_error < TOL, || {
                format!(
                    "episodic loss {:?} seed {seed}: rel error {:.2e}",
                    model.head.kind, r.max_rel_error
                )
            })?;
            worst = worst.max(r.max_rel_error);
            episodic += 1;
        }
    }
    Ok(format!(
        "{} ops and {episodic} episodic losses (proto, ridge, ridge+scale) over {SEEDS} seeds each, max rel error {worst:.1e}",
        cases.len()
    ))
}

fn attack_images(rng: &mut Rng, n: usize, h: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 1, h, h], |_| match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random_range(0.0..1.0),
    })
}

fn small_model(head: HeadConfig) -> ModelConfig {
    ModelConfig {
        net: EmbeddingNetConfig {
            in_channels: 1,
            height: 8,
            width: 8,
            channels: vec![4, 4],
            kernel_size: 3,
            pooling: Pooling::Mean2,
            activation: Activation::Relu,
            denoise: true,
        },
        head,
    }
}

fn criterion_5(_: &mut Desk) -> Outcome {
    let mut rng = seeded(41);
    let mut violations = 0usize;
    for i in 0..1000 {
        let model = small_model(if i % 2 == 0 {
            HeadConfig::proto()
        } else {
            HeadConfig::ridge()
        });
        let params = model.init_params(&mut rng).map_err(|e| e.to_string())?;
        let way = rng.random_range(2..5);
        let labels: Vec<usize> = (0..way).collect();
        let adapted =
            fine_tune(&model, &params, &attack_images(&mut rng, way, 8), &labels, way).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..7);
        let x = attack_images(&mut rng, n, 8);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..way)).collect();
        let eps = if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(0.0..0.3)
        };
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: rng.random_range(0.001..0.2),
            steps: rng.random_range(0..8),
            random_start: rng.random_bool(0.3),
            clip_lo: 0.0,
            clip_hi: 1.0,
            objective: if rng.random_bool(0.3) {
                AttackObjective::KlToClean
            } else {
                AttackObjective::CrossEntropy
            },
        };
        let adv = pgd_attack(&adapted, &x, &y, &cfg, &mut rng).map_err(|e| e.to_string())?;
        violations += x
            .data()
            .iter()
            .zip(adv.data())
            .filter(|(&a, &b)| (b as f64 - a as f64).abs() > eps + 1e-6 || !(0.0..=1.0).contains(&b))
            .count();
    }
    ensure(violations == 0, || {
        format!("{violations} coordinates left the ball or box")
    })?;

    // 2-way linear model: each image's loss is monotone in one margin.
    let linear = ModelConfig {
        net: EmbeddingNetConfig {
            in_channels: 1,
            height: 4,
            width: 4,
            channels: vec![2],
            kernel_size: 1,
            pooling: Pooling::None,
            activation: Activation::Identity,
            denoise: false,
        },
        head: HeadConfig::ridge(),
    };
    let mut iterates = 0;
    for _ in 0..50 {
        let params: ModelParams<f64> = linear.init_params(&mut rng).map_err(|e| e.to_string())?.cast();
        let support: Tensor<f64> = attack_images(&mut rng, 2, 4).cast();
        let adapted = fine_tune(&linear, &params, &support, &[0, 1], 2).map_err(|e| e.to_string())?;
        let x: Tensor<f64> = attack_images(&mut rng, 6, 4).cast();
        let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..2)).collect();
        let ce = |img: &Tensor<f64>| -> Result<Vec<f64>, String> {
            let l = adapted.logits(img).map_err(|e| e.to_string())?;
            Ok(y.iter()
                .enumerate()
                .map(|(i, &c)| {
                    let (a, b) = (l.data()[2 * i], l.data()[2 * i + 1]);
                    let m = a.max(b);
                    m + ((a - m).exp() + (b - m).exp()).ln() - l.data()[2 * i + c]
                })
                .collect())
        };
        let base = AttackConfig {
            epsilon: rng.random_range(0.01..0.3),
            step_size: rng.random_range(0.005..0.1),
            steps: 0,
            random_start: false,
            clip_lo: 0.0,
            clip_hi: 1.0,
            objective: AttackObjective::CrossEntropy,
        };
        let mut prev = ce(&x)?;
        for k in 1..=12 {
            let adv = pgd_attack(
                &adapted,
                &x,
                &y,
                &AttackConfig {
                    steps: k,
                    ..base.clone()
                },
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            let now = ce(&adv)?;
            for (a, b) in prev.iter().zip(&now) {
                ensure(*b >= a - 1e-12, || {
                    format!("loss fell along iterates: {a} -> {b} at step {k}")
                })?;
            }
            prev = now;
            iterates += 1;
        }
    }

    for i in 0..40 {
        let model = small_model(if i % 2 == 0 {
            HeadConfig::ridge()
        } else {
            HeadConfig::proto()
        });
        let params = model.init_params(&mut rng).map_err(|e| e.to_string())?;
        let adapted =
            fine_tune(&model, &params, &attack_images(&mut rng, 2, 8), &[0, 1], 2).map_err(|e| e.to_string())?;
        let x = attack_images(&mut rng, 5, 8);
        let y = [0, 1, 1, 0, 1];
        let zero_eps = AttackConfig {
            epsilon: 0.0,
            random_start: i % 3 == 0,
            ..AttackConfig::eval_preset()
        };
        let a = pgd_attack(&adapted, &x, &y, &zero_eps, &mut rng).map_err(|e| e.to_string())?;
        ensure(a.data() == x.data(), || "ε=0 attack moved the input".into())?;
        let zero_steps = AttackConfig {
            steps: 0,
            ..AttackConfig::eval_preset().scaled(0.2)
        };
        let (b, taken) = pgd_attack_counted(&adapted, &x, &y, &zero_steps, &mut rng).map_err(|e| e.to_string())?;
        ensure(b.data() == x.data() && taken == 0, || {
            "steps=0 attack moved the input".into()
        })?;
    }
    Ok(format!(
        "1000 invocations with 0 violations; {iterates} monotone iterates; 80 identity cases bit-exact"
    ))
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |i| m[(i / m.ncols(), i % m.ncols())])
}

fn max_diff(t: &Tensor<f64>, m: &DMatrix<f64>) -> f64 {
    t.data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - m[(i / m.ncols(), i % m.ncols())]).abs())
        .fold(0.0, f64::max)
}

fn criterion_6(_: &mut Desk) -> Outcome {
    let mut rng = seeded(606);
    let mut worst_ridge = 0.0f64;
    for case in 0..50 {
        let way = rng.random_range(2..6);
        let shot = rng.random_range(1..4);
        let s = way * shot;
        let d = if case % 2 == 0 {
            rng.random_range(s + 1..s + 20)
        } else {
            rng.random_range(1..s.max(2))
        };
        let lambda = rng.random_range(0.05..5.0);
        let head = HeadConfig {
            kind: HeadKind::Ridge,
            ridge_lambda: lambda,
            ridge_scale: 1.0,
            learn_scale: false,
        };
        let x = DMatrix::from_fn(s, d, |_, _| rng.random_range(-1.0..1.0));
        let q = DMatrix::from_fn(7, d, |_, _| rng.random_range(-1.0..1.0));
        let lab: Vec<usize> = (0..s).map(|i| i / shot).collect();
        let y = DMatrix::from_fn(s, way, |i, k| if lab[i] == k { 1.0 } else { 0.0 });
        let primal = (x.transpose() * &x + DMatrix::identity(d, d) * lambda)
            .lu()
            .solve(&(x.transpose() * &y))
            .ok_or("primal system singular")?;
        let mut tape = Tape::new();
        let xv = tape.constant(to_tensor(&x));
        let qv = tape.constant(to_tensor(&q));
        let state = fit_head(&mut tape, &head, xv, &lab, way).map_err(|e| e.to_string())?;
        let HeadState::RidgeWeights(w) = state else {
            return Err("ridge head produced prototypes".into());
        };
        let logits = logits_from_embeddings(&mut tape, &head, state, None, qv).map_err(|e| e.to_string())?;
        let err = max_diff(tape.value(w), &primal).max(max_diff(tape.value(logits), &(&q * &primal)));
        ensure(err < 1e-4, || format!("ridge case {case}: {err:e}"))?;
        worst_ridge = worst_ridge.max(err);
    }
    let mut worst_proto = 0.0f64;
    for case in 0..50 {
        let way = rng.random_range(2..6);
        let shot = rng.random_range(1..5);
        let d = rng.random_range(1..40);
        let x = DMatrix::from_fn(way * shot, d, |_, _| rng.random_range(-1.0..1.0));
        let q = DMatrix::from_fn(9, d, |_, _| rng.random_range(-1.0..1.0));
        let lab: Vec<usize> = (0..way * shot).map(|i| i / shot).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(to_tensor(&x));
        let qv = tape.constant(to_tensor(&q));
        let head = HeadConfig::proto();
        let state = fit_head(&mut tape, &head, xv, &lab, way).map_err(|e| e.to_string())?;
        let logits = logits_from_embeddings(&mut tape, &head, state, None, qv).map_err(|e| e.to_string())?;
        let expected = DMatrix::from_fn(9, way, |b, k| {
            -(0..d)
                .map(|j| {
                    let c = (0..shot).map(|i| x[(k * shot + i, j)]).sum::<f64>() / shot as f64;
                    (q[(b, j)] - c).powi(2)
                })
                .sum::<f64>()
        });
        let err = max_diff(tape.value(logits), &expected);
        ensure(err < 1e-5, || format!("proto case {case}: {err:e}"))?;
        worst_proto = worst_proto.max(err);
    }
    Ok(format!(
        "ridge dual vs primal max {worst_ridge:.1e} (50 systems); proto vs direct max {worst_proto:.1e} (50 cases)"
    ))
}

fn criterion_7(desk: &mut Desk) -> Outcome {
    let nat = desk.desk_report("nat")?;
    let lcat = desk.desk_report("lcat")?;
    let at = desk.desk_report("at")?;
    let trades = desk.desk_report("lcat_trades")?;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut failed = Vec::new();

    let gap = nat.acc_nat - nat.acc_adv;
    if gap < 0.20 {
        failed.push(format!("a: NAT nat-adv gap {} < 20 points", pct(gap)));
    }
    if lcat.acc_adv - nat.acc_adv <= lcat.ci_adv + nat.ci_adv {
        failed.push(format!(
            "b: LCAT adv {} vs NAT adv {}",
            pct(lcat.acc_adv),
            pct(nat.acc_adv)
        ));
    }
    let beats_at = lcat.acc_nat - at.acc_nat > lcat.ci_nat + at.ci_nat;
    let keeps_nat = lcat.acc_nat >= nat.acc_nat - 2.0 * nat.ci_nat;
    if !(beats_at || keeps_nat) {
        failed.push(format!(
            "c: LCAT nat {} vs AT nat {}, NAT nat {}",
            pct(lcat.acc_nat),
            pct(at.acc_nat),
            pct(nat.acc_nat)
        ));
    }
    if !(trades.acc_adv >= lcat.acc_adv - 2.0 * lcat.ci_adv && trades.acc_nat < lcat.acc_nat) {
        failed.push(format!(
            "d: LCAT+TRADES nat {} adv {} vs LCAT nat {} adv {} (CI {})",
            pct(trades.acc_nat),
            pct(trades.acc_adv),
            pct(lcat.acc_nat),
            pct(lcat.acc_adv),
            pct(lcat.ci_adv)
        ));
    }
    let summary = format!(
        "NAT {} | LCAT {} | AT {} | LCAT+TRADES {}",
        nat.table_line(),
        lcat.table_line(),
        at.table_line(),
        trades.table_line()
    );
    if failed.is_empty() {
        Ok(format!("a b c d hold; {summary}"))
    } else {
        Err(format!("{}; {summary}", failed.join("; ")))
    }
}

fn criterion_8(desk: &mut Desk) -> Outcome {
    let run = desk.desk_run("nat")?;
    let out = desk.root.join("sweep.csv");
    cmd_sweep(&SweepArgs {
        target: run.join(CHECKPOINT_FILE),
        steps: vec![0, 1, 5, 10, 20],
        episodes: Some(500),
        out: Some(out.clone()),
        ..SweepArgs::default()
    })
    .map_err(|e| e.to_string())?;
    let text = fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let rows: Vec<(usize, f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    ensure(rows.len() == 5, || format!("sweep wrote {} rows", rows.len()))?;
    for w in rows.windows(2) {
        ensure(w[1].1 <= w[0].1 + w[0].2 + w[1].2, || {
            format!("accuracy rose from {:?} to {:?}", w[0], w[1])
        })?;
    }
    let cells: Vec<String> = rows.iter().map(|(s, a, _)| format!("{s}:{:.2}", 100.0 * a)).collect();
    Ok(format!("NAT model, 500 episodes: {}", cells.join(" ")))
}

fn criterion_9(_: &mut Desk) -> Outcome {
    let cell = format_metric(0.3255, 0.0049);
    ensure(cell == "32.55 % (0.49 %)", || format!("got {cell:?}"))?;
    Ok(format!("(0.3255, 0.0049) -> {cell:?}"))
}

fn criterion_10(desk: &mut Desk) -> Outcome {
    let args = TrainArgs {
        preset: Some("lcat".into()),
        seed: Some(11),
        epochs: Some(10),
        meta_batches: Some(2),
        ..TrainArgs::default()
    };
    let a = desk.train("det-a", args.clone())?;
    let b = desk.train("det-b", args)?;
    for file in [CHECKPOINT_FILE, METRICS_FILE] {
        let x = fs::read(a.join(file)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(file)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{file} differs between runs"))?;
    }
    Ok("checkpoint.bin and metrics.jsonl byte-identical across two seeded runs".into())
}

type Criterion = fn(&mut Desk) -> Outcome;

fn main() -> ExitCode {
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "schedule exactness", criterion_1),
        (2, "compute-halving audit", criterion_2),
        (3, "meta-update exactness", criterion_3),
        (4, "gradient correctness", criterion_4),
        (5, "attack soundness", criterion_5),
        (6, "head oracles", criterion_6),
        (7, "desk-scale learning orderings", criterion_7),
        (8, "sweep monotonicity", criterion_8),
        (9, "reporting fidelity", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let work = tempfile::tempdir().expect("temporary directory");
    let mut desk = Desk {
        root: work.path().to_path_buf(),
        data: None,
        runs: BTreeMap::new(),
        reports: BTreeMap::new(),
    };
    let mut failures = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut desk)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1} s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
