//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p udn-cli --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use udn::checkpoint::{encode_checkpoint, save_checkpoint};
use udn::dataset::{load_split, make_dataset, ManifestConfig, Split, MANIFEST_FILE};
use udn::network::{
    forward_stages, network_forward, noise_estimate_trace, Architecture, InitConfig, NetworkParams,
    Variant,
};
use udn::pnm::write_image;
use udn::rbf::{clip_forward, ClipRange};
use udn::synth::{scene, scenes, SceneConfig};
use udn::training::{
    awgn, evaluate, greedy_train, joint_train, psnr_loss, EvalRow, TrainConfig,
    FEASIBILITY_TOL_F32,
};
use udn::verify::{self, CheckReport};
use udn::PlanarImage;

const GAIN_SIGMA_25_DB: f64 = 3.0;
const GAIN_SIGMA_10_DB: f64 = 2.0;
const DESK_TIME_LIMIT_S: f64 = 1800.0;
const JOINT_REGRESSION_DB: f64 = 0.05;
const STAGE_SLACK_DB: f64 = 0.1;
const NOISE_BALL_RANGE: (f64, f64) = (0.5, 1.0);
const PARAM_COUNT_TOL: f64 = 0.10;
const PAPER_GRAY_PARAMS: f64 = 48_000.0;
const PAPER_COLOR_PARAMS: f64 = 93_000.0;

const DESK_SOURCES: usize = 40;
const DESK_TRAIN: usize = 32;
const DESK_CROP: usize = 64;
const DESK_SEED: u64 = 2024;
const EVAL_SEED: u64 = 77;

struct Outcome {
    label: String,
    passed: bool,
}

fn report(out: &mut Vec<Outcome>, label: &str, passed: bool, detail: String, start: Instant) {
    println!(
        "{} criterion {:<3} {} ({:.1}s)",
        if passed { "PASS" } else { "FAIL" },
        label,
        detail,
        start.elapsed().as_secs_f64()
    );
    out.push(Outcome {
        label: label.into(),
        passed,
    });
}

fn summarize(reports: &[CheckReport]) -> (bool, String) {
    let passed = reports.iter().all(|r| r.passed);
    let detail = reports
        .iter()
        .map(|r| format!("{} [n={} err={:.1e} tol={:.0e}]", r.name, r.instances, r.max_error, r.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    (passed, detail)
}

fn criterion_gradients(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut reports = Vec::new();
    for m in ["weight-norm", "conv", "rbf", "clip", "group-weights", "projection", "loss", "network"] {
        reports.extend(verify::run_module(m).expect("module"));
    }
    let (mut passed, detail) = summarize(&reports);
    passed &= reports.iter().all(|r| r.instances >= 20) && start.elapsed().as_secs_f64() <= 120.0;
    report(out, "1", passed, format!("finite differences: {detail}"), start);
}

fn criterion_adjoints(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let reports = verify::run_module("adjoint").expect("module");
    let (mut passed, detail) = summarize(&reports);
    passed &= reports.iter().all(|r| r.instances >= 100) && start.elapsed().as_secs_f64() <= 60.0;
    report(out, "2", passed, format!("dot-product tests: {detail}"), start);
}

fn criterion_block_matching(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let reports = verify::run_module("block-matching").expect("module");
    let (mut passed, detail) = summarize(&reports);
    passed &= reports[0].instances >= 50 && start.elapsed().as_secs_f64() <= 60.0;
    report(out, "3", passed, format!("exhaustive oracle: {detail}"), start);
}

fn criterion_projection(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let reports = verify::run_module("projection-invariants").expect("module");
    let (mut passed, detail) = summarize(&reports);
    passed &= reports[0].instances >= 1000;
    report(out, "4", passed, format!("feasibility, idempotence, non-expansion: {detail}"), start);
}

fn desk_architecture() -> Architecture {
    Architecture {
        stages: 2,
        filters: 16,
        kernel: (5, 5),
        ..Architecture::grayscale(Variant::Local)
    }
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        greedy_epochs: 20,
        joint_epochs: 20,
        learning_rate: 1e-3,
        batch_size: 4,
        noise_grid: vec![5.0, 13.0, 21.0, 29.0],
        seed: DESK_SEED,
        ..TrainConfig::grayscale()
    }
}

/// Writes synthetic sources, crops them through the dataset pipeline and returns
/// the manifest path.
fn desk_dataset(root: &Path) -> PathBuf {
    let src = root.join("sources");
    fs::create_dir_all(&src).unwrap();
    let cfg = SceneConfig::new(96, 96, 1);
    for (i, img) in scenes::<f32>(&cfg, DESK_SOURCES, DESK_SEED).iter().enumerate() {
        write_image(src.join(format!("scene{i:03}.pgm")), img).unwrap();
    }
    let data = root.join("data");
    let manifest = ManifestConfig {
        crop: DESK_CROP,
        seed: DESK_SEED,
        train_count: Some(DESK_TRAIN),
    };
    make_dataset(&src, &data, &manifest).unwrap();
    data.join(MANIFEST_FILE)
}

fn row(rows: &[EvalRow], sigma: f64) -> &EvalRow {
    rows.iter().find(|r| r.sigma == sigma).unwrap()
}

/// Mean stage-`stage` training loss over a fixed set of noisy draws.
fn stage_loss(params: &NetworkParams<f32>, data: &[PlanarImage<f32>], grid: &[f64], stage: usize) -> f64 {
    let mut total = 0.0;
    for (i, clean) in data.iter().enumerate() {
        let sigma = grid[i % grid.len()];
        let noisy = awgn(clean, sigma, 9_000 + i as u64);
        let tape = forward_stages(&noisy, sigma, params, stage).unwrap();
        total += psnr_loss(tape.last_output(), clean).unwrap().0;
    }
    total / data.len() as f64
}

/// Criteria 5 and 7 share the desk-scale model.
fn criteria_desk(out: &mut Vec<Outcome>, root: &Path) {
    let start = Instant::now();
    let manifest = desk_dataset(root);
    let train: Vec<PlanarImage<f32>> = load_split(&manifest, Split::Train).unwrap();
    let val: Vec<PlanarImage<f32>> = load_split(&manifest, Split::Val).unwrap();
    assert_eq!((train.len(), val.len()), (DESK_TRAIN, DESK_SOURCES - DESK_TRAIN));

    let arch = desk_architecture();
    let init = NetworkParams::<f32>::init(arch.clone(), &InitConfig::for_architecture(&arch)).unwrap();
    let cfg = desk_config();
    let trained = greedy_train(init, &train, &cfg).and_then(|(greedy, _)| {
        let (joint, log) = joint_train(greedy.clone(), &train, &cfg)?;
        Ok((greedy, joint, log))
    });
    let (greedy, joint, joint_log) = match trained {
        Ok(v) => v,
        Err(e) => {
            report(out, "5", false, format!("training failed: {e}"), start);
            report(out, "7", false, format!("training failed: {e}"), start);
            return;
        }
    };
    let train_seconds = start.elapsed().as_secs_f64();

    let sigmas = [10.0, 25.0];
    let rows = evaluate(&joint, &val, &sigmas, EVAL_SEED).unwrap();
    let greedy_rows = evaluate(&greedy, &val, &sigmas, EVAL_SEED).unwrap();
    let gain = |s| row(&rows, s).denoised_psnr - row(&rows, s).noisy_psnr;
    let (g10, g25) = (gain(10.0), gain(25.0));
    report(
        out,
        "5",
        g25 >= GAIN_SIGMA_25_DB && g10 >= GAIN_SIGMA_10_DB && train_seconds <= DESK_TIME_LIMIT_S,
        format!(
            "single checkpoint: sigma=25 {:.2} -> {:.2} dB (+{g25:.2}, need +{GAIN_SIGMA_25_DB}); \
             sigma=10 {:.2} -> {:.2} dB (+{g10:.2}, need +{GAIN_SIGMA_10_DB}); training {train_seconds:.0}s",
            row(&rows, 25.0).noisy_psnr,
            row(&rows, 25.0).denoised_psnr,
            row(&rows, 10.0).noisy_psnr,
            row(&rows, 10.0).denoised_psnr,
        ),
        start,
    );

    let extra = Instant::now();
    let regress = sigmas
        .iter()
        .map(|&s| row(&rows, s).denoised_psnr - row(&greedy_rows, s).denoised_psnr)
        .fold(f64::INFINITY, f64::min);
    report(
        out,
        "5a",
        regress >= -JOINT_REGRESSION_DB,
        format!("joint minus greedy validation PSNR, worst over sigma: {regress:+.3} dB"),
        extra,
    );

    let l1 = stage_loss(&greedy, &train, &cfg.noise_grid, 1);
    let l2 = stage_loss(&greedy, &train, &cfg.noise_grid, 2);
    report(
        out,
        "5b",
        l2 <= l1 + STAGE_SLACK_DB,
        format!("greedy training loss (negative PSNR) after stage 1: {l1:.3} dB, stage 2: {l2:.3} dB"),
        extra,
    );

    let ratios: Vec<f64> = val
        .iter()
        .enumerate()
        .map(|(i, clean)| {
            let noisy = awgn(clean, 25.0, 5_000 + i as u64);
            let trace = noise_estimate_trace(&noisy, 25.0, &joint).unwrap();
            let last = trace.last().unwrap();
            last.norm / last.epsilon
        })
        .collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
    report(
        out,
        "5c",
        lo >= NOISE_BALL_RANGE.0 && hi <= NOISE_BALL_RANGE.1 + FEASIBILITY_TOL_F32,
        format!("‖n^S‖/ε at sigma=25 over validation crops: [{lo:.4}, {hi:.4}]"),
        extra,
    );
    let finite = joint_log.epochs.iter().all(|e| e.mean_loss.is_finite());
    report(
        out,
        "5d",
        finite,
        format!("{} joint epochs logged, all losses finite: {finite}", joint_log.epochs.len()),
        extra,
    );

    // Training already rejects any infeasible stage on every forward pass; this
    // re-checks the finished model over the full evaluation range.
    let start7 = Instant::now();
    let all_sigmas: Vec<f64> = (1..=11).map(|k| 5.0 * k as f64).collect();
    let full = evaluate(&joint, &val, &all_sigmas, EVAL_SEED).unwrap();
    let worst = full
        .iter()
        .chain(&greedy_rows)
        .map(|r| r.max_feasibility_ratio)
        .fold(0.0, f64::max);
    report(
        out,
        "7",
        worst <= 1.0 + FEASIBILITY_TOL_F32,
        format!("max ‖x_t − y‖/ε_t during training and at eval sigma 5..55: {worst:.8}"),
        start7,
    );

    save_checkpoint(root.join("desk.ckpt"), &joint).unwrap();
}

fn criterion_identity(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut cases = 0;
    let mut failures = Vec::new();
    for variant in [Variant::Local, Variant::NonLocal] {
        for (stages, channels) in [(1, 1), (2, 3), (3, 1), (5, 1)] {
            let arch = Architecture {
                variant,
                channels,
                filters: 6,
                kernel: (5, 5),
                stages,
                group: 4,
                window: (9, 9),
                ..Architecture::grayscale(variant)
            };
            let mut init = InitConfig::for_architecture(&arch);
            init.seed = stages as u64;
            let mut params = NetworkParams::<f64>::init(arch, &init).unwrap();
            for layer in &mut params.layers {
                layer.rbf.coeffs.iter_mut().for_each(|c| *c = 0.0);
                layer.alpha = -0.5;
            }
            let clean: PlanarImage<f64> = scene(&SceneConfig::new(20, 24, channels), 11);
            // Strong noise pushes values outside [0, 255] so the final clip matters.
            let noisy = awgn(&clean, 40.0, 3);
            let (out64, _) = network_forward(&noisy, 40.0, &params).unwrap();
            let noisy32 = noisy.cast::<f32>();
            let (out32, _) = network_forward(&noisy32, 40.0, &params.cast::<f32>()).unwrap();
            cases += 2;
            if out64 != clip_forward(&noisy, ClipRange::INTENSITY) {
                failures.push(format!("{variant:?} S={stages} f64"));
            }
            if out32 != clip_forward(&noisy32, ClipRange::INTENSITY) {
                failures.push(format!("{variant:?} S={stages} f32"));
            }
        }
    }
    report(
        out,
        "6",
        failures.is_empty(),
        format!(
            "all pi = 0 gives clip(y) bit-exactly in {}/{cases} cases {failures:?}",
            cases - failures.len()
        ),
        start,
    );
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udn"))
        .args(args)
        .output()
        .expect("run udn")
}

fn criterion_reproducibility(out: &mut Vec<Outcome>, root: &Path) {
    let start = Instant::now();
    let src = root.join("repro-src");
    fs::create_dir_all(&src).unwrap();
    for (i, img) in scenes::<f32>(&SceneConfig::new(40, 40, 1), 6, 5).iter().enumerate() {
        write_image(src.join(format!("s{i}.pgm")), img).unwrap();
    }
    let data = root.join("repro-data");
    let manifest = data.join(MANIFEST_FILE);
    let made = cli(&[
        "dataset", "make", "--src", src.to_str().unwrap(), "--crop", "32", "--seed", "1", "--train", "4",
        "--out", data.to_str().unwrap(),
    ]);
    let config = root.join("repro.toml");
    fs::write(
        &config,
        format!(
            "manifest = {:?}\ninit_seed = 3\n\n[architecture]\nstages = 2\nfilters = 4\nkernel = 3\ngroup = 3\nwindow = 7\n\n\
             [train]\ngreedy_epochs = 2\njoint_epochs = 2\nlearning_rate = 0.001\nbatch_size = 2\n\
             noise_grid = [5.0, 13.0, 21.0, 29.0]\nseed = 9\n",
            manifest.to_str().unwrap()
        ),
    )
    .unwrap();
    let mut ok = made.status.success();
    let mut detail = Vec::new();
    for variant in ["local", "nonlocal"] {
        let a = root.join(format!("a-{variant}.ckpt"));
        let b = root.join(format!("b-{variant}.ckpt"));
        for path in [&a, &b] {
            let run = cli(&[
                "train", "--config", config.to_str().unwrap(), "--variant", variant, "--channels", "gray",
                "--out", path.to_str().unwrap(),
            ]);
            ok &= run.status.success();
        }
        let same_ckpt = fs::read(&a).ok().is_some_and(|x| Some(x) == fs::read(&b).ok());
        let eval = || {
            cli(&[
                "eval", "--model", a.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--sigmas",
                "10,25", "--seed", "4",
            ])
        };
        let (e1, e2) = (eval(), eval());
        let same_csv = e1.status.success() && !e1.stdout.is_empty() && e1.stdout == e2.stdout;
        ok &= same_ckpt && same_csv;
        detail.push(format!("{variant}: checkpoints identical={same_ckpt}, eval CSV identical={same_csv}"));
    }

    let arch = Architecture {
        stages: 2,
        filters: 4,
        kernel: (3, 3),
        ..Architecture::grayscale(Variant::Local)
    };
    let images: Vec<PlanarImage<f32>> = scenes(&SceneConfig::new(24, 24, 1), 4, 8);
    let cfg = TrainConfig {
        greedy_epochs: 1,
        joint_epochs: 1,
        batch_size: 2,
        ..TrainConfig::grayscale()
    };
    let run = || {
        let p = NetworkParams::<f32>::init(arch.clone(), &InitConfig::for_architecture(&arch)).unwrap();
        let (g, _) = greedy_train(p, &images, &cfg).unwrap();
        let (j, _) = joint_train(g, &images, &cfg).unwrap();
        encode_checkpoint(&j)
    };
    let same_lib = run() == run();
    ok &= same_lib;
    detail.push(format!("in-process training identical={same_lib}"));
    report(out, "8", ok, detail.join("; "), start);
}

fn criterion_parameter_counts(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let archs = [
        Architecture::grayscale(Variant::Local),
        Architecture::grayscale(Variant::NonLocal),
        Architecture::color(Variant::Local),
        Architecture::color(Variant::NonLocal),
    ];
    let counts: Vec<usize> = archs
        .iter()
        .map(|a| {
            NetworkParams::<f32>::init(a.clone(), &InitConfig::for_architecture(a))
                .unwrap()
                .parameter_count()
        })
        .collect();
    let formula_ok = archs.iter().zip(&counts).all(|(a, &n)| a.parameter_count() == n);
    // The reported footprints cover the low-noise and the high-noise model together.
    let within = |n: usize, target: f64| ((2 * n) as f64 - target).abs() <= PARAM_COUNT_TOL * target;
    let ok = formula_ok
        && within(counts[0], PAPER_GRAY_PARAMS)
        && within(counts[1], PAPER_GRAY_PARAMS)
        && within(counts[2], PAPER_COLOR_PARAMS)
        && within(counts[3], PAPER_COLOR_PARAMS);
    report(
        out,
        "9",
        ok,
        format!(
            "per model: gray {} / {} non-local, color {} / {} non-local; \
             low+high-noise pair within {:.0}% of 48K and 93K",
            counts[0],
            counts[1],
            counts[2],
            counts[3],
            PARAM_COUNT_TOL * 100.0
        ),
        start,
    );
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let mut out = Vec::new();
    criterion_gradients(&mut out);
    criterion_adjoints(&mut out);
    criterion_block_matching(&mut out);
    criterion_projection(&mut out);
    criteria_desk(&mut out, root.path());
    criterion_identity(&mut out);
    criterion_reproducibility(&mut out, root.path());
    criterion_parameter_counts(&mut out);
    let failed: Vec<&str> = out.iter().filter(|o| !o.passed).map(|o| o.label.as_str()).collect();
    println!("acceptance: {} checks, {} failed {failed:?}", out.len(), failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
