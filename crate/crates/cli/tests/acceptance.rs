//! Acceptance gates, one PASS/FAIL line per criterion.
//!
//! Criterion 7 (desk-scale CIFAR-10 ordering run) only runs with
//! `--include-ignored` and CIFAR-10 binaries under `$VIEWCRAFT_DATA_DIR/cifar-10-batches-bin`.
//! Positional arguments select criteria by number.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::Rng;
use viewcraft::dataprep::io::{write_manifest, write_pnm, ManifestRecord, MANIFEST_FILE};
use viewcraft::dataprep::{sensor_window_to_spectrograms, waveform_to_logmel, PreprocessMode, SensorWindowSpec, SpectrogramSpec};
use viewcraft::encoder::{Encoder, EncoderConfig, EncoderVariant};
use viewcraft::nn::Mode;
use viewcraft::objectives::{instdisc_loss, nt_xent_loss, EmbeddingBatch, MemoryBank, MemoryBankConfig, Temperature};
use viewcraft::perturb::{dct2d, idct2d, project_to_budget, NormOrder, PerturbationBudget};
use viewcraft::rng::{seeded, SeededRng};
use viewcraft::trainer::{batch_loss, prepare_training_data, pretrain_step, step_rng, Batch, ExperimentConfig, StepControl, TrainState};
use viewcraft::viewmaker::{Viewmaker, ViewmakerConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dev() -> Device {
    Device::Cpu
}

fn uniform(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

fn tensor(v: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(v, dims, &dev()).unwrap()
}

fn host(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Explicit-loop NT-Xent: anchors `a[k]` and `b[k]` are each other's positive.
fn nt_xent_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let z: Vec<Vec<f64>> = a.iter().chain(b).map(|v| unit(v)).collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let j = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for (k, zk) in z.iter().enumerate() {
            if k != i {
                denom += (dot(&z[i], zk) / tau).exp();
            }
        }
        total -= ((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

fn rows(v: &[Vec<f64>]) -> Tensor {
    let d = v[0].len();
    tensor(v.concat(), &[v.len(), d])
}

fn nt_xent_of(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let batch = EmbeddingBatch::from_views(&rows(a), &rows(b)).unwrap();
    scalar(&nt_xent_loss(&batch, Temperature::new(tau).unwrap()).unwrap())
}

fn random_rows(rng: &mut SeededRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform(rng, d, -1.0, 1.0)).collect()
}

fn c1_nt_xent_oracle() -> Check {
    let mut rng = seeded(1);
    let mut worst = 0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(4..=32);
        let tau = [0.07, 0.5, 1.0][rng.random_range(0..3)];
        let (a, b) = (random_rows(&mut rng, n, d), random_rows(&mut rng, n, d));
        worst = worst.max((nt_xent_of(&a, &b, tau) - nt_xent_oracle(&a, &b, tau)).abs());
    }
    ensure(worst <= 1e-6, format!("200 batches, max |impl - oracle| = {worst:.2e} (tol 1e-6)"))
}

fn c2_analytic_cases() -> Check {
    let mut rng = seeded(2);
    let mut single_max = 0f64;
    for _ in 0..50 {
        let d = rng.random_range(4..=32);
        let (a, b) = (random_rows(&mut rng, 1, d), random_rows(&mut rng, 1, d));
        single_max = single_max.max(nt_xent_of(&a, &b, 0.07).abs());
    }
    let mut equal_err = 0f64;
    for n in 1..=8usize {
        for tau in [0.07, 0.5, 1.0] {
            let expect = ((2 * n - 1) as f64).ln();
            // all embeddings identical
            let v = uniform(&mut rng, 16, -1.0, 1.0);
            let same = vec![v; n];
            equal_err = equal_err.max((nt_xent_of(&same, &same, tau) - expect).abs());
            // 2N mutually orthogonal embeddings: every similarity is 0
            let basis = |k: usize| (0..2 * n).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
            let a: Vec<_> = (0..n).map(basis).collect();
            let b: Vec<_> = (n..2 * n).map(basis).collect();
            equal_err = equal_err.max((nt_xent_of(&a, &b, tau) - expect).abs());
        }
    }
    ensure(
        single_max == 0.0 && equal_err <= 1e-6,
        format!("N=1 max |L| = {single_max:e} (want exactly 0), equal-similarity max |L - log(2N-1)| = {equal_err:.2e} (tol 1e-6)"),
    )
}

fn oracle_norm(v: &[f64], p: NormOrder) -> f64 {
    match p {
        NormOrder::L1 => v.iter().map(|x| x.abs()).sum(),
        NormOrder::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormOrder::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

fn c3_projection_invariants() -> Check {
    let mut rng = seeded(3);
    let (mut sphere, mut idem, mut scale) = (0f64, 0f64, 0f64);
    let mut count = 0;
    for p in [NormOrder::L1, NormOrder::L2, NormOrder::LInf] {
        for trial in 0..1000 {
            let (c, h, w) = (rng.random_range(1..=3), [4, 8, 12][rng.random_range(0..3)], [4, 8][rng.random_range(0..2)]);
            let magnitude = match trial % 3 {
                0 => 1e-9,
                1 => 1e6,
                _ => 1.0,
            };
            let eps = [0.01, 0.05, 0.5, 1.0][rng.random_range(0..4)];
            let budget = PerturbationBudget::spectrogram(eps).with_order(p);
            let raw = tensor(uniform(&mut rng, c * h * w, -magnitude, magnitude), &[1, c, h, w]);
            let proj = project_to_budget(&raw, &budget).unwrap().into_inner();
            let radius = budget.radius(c, w, h);
            let values = host(&proj);
            sphere = sphere.max((oracle_norm(&values, p) - radius).abs() / radius);
            let again = host(&project_to_budget(&proj, &budget).unwrap().into_inner());
            idem = idem.max(values.iter().zip(&again).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
            let k = 10f64.powf(rng.random_range(-3.0..3.0));
            let scaled = host(&project_to_budget(&(&raw * k).unwrap(), &budget).unwrap().into_inner());
            scale = scale.max(values.iter().zip(&scaled).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
            count += 1;
        }
    }
    ensure(
        sphere <= 1e-4 && idem <= 1e-6 && scale <= 1e-6,
        format!("{count} perturbations over p in {{1,2,inf}}: sphere rel {sphere:.2e} (1e-4), idempotence {idem:.2e} (1e-6), scale {scale:.2e} (1e-6)"),
    )
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt()).max(1e-12);
    diff / scale
}

fn set_entry(var: &Var, i: usize, value: f64) {
    let mut v = host(var.as_tensor());
    v[i] = value;
    var.set(&tensor(v, var.dims())).unwrap();
}

/// Central differences of `f` at `entries` of `var`.
fn finite_diff(var: &Var, entries: &[usize], h: f64, f: &dyn Fn() -> f64) -> Vec<f64> {
    let base = host(var.as_tensor());
    entries
        .iter()
        .map(|&i| {
            set_entry(var, i, base[i] + h);
            let up = f();
            set_entry(var, i, base[i] - h);
            let down = f();
            set_entry(var, i, base[i]);
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn c4_gradient_checks() -> Check {
    let mut rng = seeded(4);
    let mut loss_worst = 0f64;
    for slice in 0..3 {
        let (n, d) = (3 + slice, 8 + 4 * slice);
        let var = Var::from_tensor(&rows(&random_rows(&mut rng, 2 * n, d))).unwrap();
        let tau = Temperature::new([0.07, 0.5, 1.0][slice]).unwrap();
        let loss = |v: &Tensor| nt_xent_loss(&EmbeddingBatch::from_raw(v).unwrap(), tau).unwrap();
        let grads = loss(var.as_tensor()).backward().unwrap();
        let analytic = host(grads.get(var.as_tensor()).unwrap());
        let entries: Vec<usize> = (0..analytic.len()).collect();
        let numeric = finite_diff(&var, &entries, 1e-6, &|| scalar(&loss(var.as_tensor())));
        loss_worst = loss_worst.max(relative(&analytic, &numeric));
    }

    let budget = PerturbationBudget::image(0.05);
    let vm_cfg = ViewmakerConfig { num_residual_blocks: 1, base_channels: 4, ..ViewmakerConfig::new(3, budget) };
    let vm = Viewmaker::build(vm_cfg, &mut seeded(40), DType::F64, &dev()).unwrap();
    let enc_cfg = EncoderConfig { width: 4, embedding_dim: 16, ..EncoderConfig::new(EncoderVariant::SmallResnet18, 3) };
    let enc = Encoder::build(enc_cfg, &mut seeded(41), DType::F64, &dev()).unwrap();
    let x = tensor(uniform(&mut rng, 4 * 3 * 16 * 16, 0.3, 0.7), &[4, 3, 16, 16]);
    let composite = || -> Tensor {
        let mut noise = seeded(42);
        let a = vm.generate_view(&x, &mut noise).unwrap().view;
        let b = vm.generate_view(&x, &mut noise).unwrap().view;
        let z = enc.encode(&Tensor::cat(&[&a, &b], 0).unwrap(), Mode::Train).unwrap().embedding;
        nt_xent_loss(&EmbeddingBatch::from_views(&z.narrow(0, 0, 4).unwrap(), &z.narrow(0, 4, 4).unwrap()).unwrap(), Temperature::new(0.5).unwrap()).unwrap()
    };
    let grads = composite().backward().unwrap();
    // biases feeding a normalization have an identically zero gradient; skip them
    let live = |params: Vec<(String, Var)>| -> Vec<(String, Var)> {
        params
            .into_iter()
            .filter(|(_, v)| host(grads.get(v.as_tensor()).unwrap()).iter().map(|g| g * g).sum::<f64>().sqrt() > 1e-8)
            .collect()
    };
    let vm_params = live(vm.params().trainable());
    let enc_params = live(enc.params().trainable());
    let slices = [
        vm_params[0].clone(),
        vm_params[vm_params.len() / 2].clone(),
        enc_params[0].clone(),
        enc_params[enc_params.len() - 1].clone(),
    ];
    let mut composite_worst = 0f64;
    let mut names = Vec::new();
    for (name, var) in &slices {
        let analytic_all = host(grads.get(var.as_tensor()).unwrap());
        let len = analytic_all.len();
        let entries: Vec<usize> = (0..6.min(len)).map(|_| rng.random_range(0..len)).collect();
        let analytic: Vec<f64> = entries.iter().map(|&i| analytic_all[i]).collect();
        let numeric = finite_diff(var, &entries, 1e-5, &|| scalar(&composite()));
        composite_worst = composite_worst.max(relative(&analytic, &numeric));
        names.push(name.clone());
    }
    ensure(
        loss_worst <= 1e-4 && composite_worst <= 1e-2,
        format!(
            "f64: nt_xent rel err {loss_worst:.2e} (1e-4) over 3 slices; view->encode->loss rel err {composite_worst:.2e} (1e-2) over {}",
            names.join(", ")
        ),
    )
}

fn view_bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect()
}

fn c5_stochastic_and_deterministic() -> Check {
    let cfg = ViewmakerConfig { base_channels: 8, ..ViewmakerConfig::new(3, PerturbationBudget::image(0.05)) };
    let vm = Viewmaker::build(cfg.clone(), &mut seeded(5), DType::F32, &dev()).unwrap();
    let mut data = seeded(50);
    let x = Tensor::from_vec((0..3 * 32 * 32).map(|_| data.random::<f32>()).collect::<Vec<_>>(), (1, 3, 32, 32), &dev()).unwrap();
    let mut noise = seeded(51);
    let distinct: HashSet<Vec<u32>> = (0..100).map(|_| view_bits(&vm.generate_view(&x, &mut noise).unwrap().view)).collect();
    let again = Viewmaker::build(cfg, &mut seeded(5), DType::F32, &dev()).unwrap();
    let first = view_bits(&vm.generate_view(&x, &mut seeded(52)).unwrap().view);
    let second = view_bits(&again.generate_view(&x, &mut seeded(52)).unwrap().view);
    ensure(
        distinct.len() == 100 && first == second,
        format!("{}/100 distinct views; fixed (seed, input) bit-identical: {}", distinct.len(), first == second),
    )
}

const TOY_CONFIG: &str = r#"
view_source = "viewmaker"
batch_size = 64
epochs = 1

[encoder]
variant = "small_resnet18"
input_channels = 3
width = 4
embedding_dim = 16

[viewmaker]
num_residual_blocks = 1
base_channels = 4

[viewmaker.budget]
epsilon = 0.05

[viewmaker_optimizer]
lr = 0.003
momentum = 0.9
weight_decay = 1e-4

[dataset]
kind = "synthetic"
train = 64
val = 8
"#;

fn c6_adversarial_direction() -> Check {
    let base = ExperimentConfig::from_toml_str(TOY_CONFIG).unwrap();
    let data = prepare_training_data(&base, None).unwrap();
    let indices: Vec<usize> = (0..64).collect();
    let batch = Batch::from_dataset(&data.train, &indices, 0, DType::F32, &dev()).unwrap();
    let loss_with = |state: &TrainState, config: &ExperimentConfig, step: u64| {
        scalar(&batch_loss(state, config, &batch, &data.stats, &mut step_rng(state.seed, step)).unwrap().0)
    };

    let mut ascents = 0;
    for trial in 0..100 {
        let config = ExperimentConfig { seed: trial, ..base.clone() };
        let mut state = TrainState::init(&config, 64, DType::F32, &dev()).unwrap();
        let control = StepControl { update_encoder: false, update_viewmaker: true };
        let before = pretrain_step(&mut state, &config, &batch, &data.stats, control).unwrap().loss;
        if loss_with(&state, &config, 0) >= before {
            ascents += 1;
        }
    }

    let config = ExperimentConfig { seed: 1000, ..base.clone() };
    let mut state = TrainState::init(&config, 64, DType::F32, &dev()).unwrap();
    let mut descents = 0;
    for step in 0..20 {
        let control = StepControl { update_encoder: true, update_viewmaker: false };
        let before = pretrain_step(&mut state, &config, &batch, &data.stats, control).unwrap().loss;
        if loss_with(&state, &config, step) < before {
            descents += 1;
        }
    }
    ensure(
        ascents >= 80 && descents >= 18,
        format!("viewmaker ascent kept L from decreasing in {ascents}/100 trials (>= 80); encoder descent lowered L in {descents}/20 steps (>= 18)"),
    )
}

fn run_cli(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_viewcraft")).args(args).env("RUST_LOG", "warn").output().expect("spawn viewcraft");
    if !out.status.success() {
        eprintln!("viewcraft {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout_line<'a>(out: &'a str, prefix: &str) -> Option<&'a str> {
    out.lines().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn transfer_accuracy(dir: &Path) -> f64 {
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("transfer.json")).unwrap()).unwrap();
    json["tasks"][0]["value"].as_f64().unwrap()
}

fn c7_desk_scale_ordering() -> Check {
    let Some(root) = std::env::var_os("VIEWCRAFT_DATA_DIR") else {
        return Err("VIEWCRAFT_DATA_DIR is not set (needs cifar-10-batches-bin)".into());
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut acc = Vec::new();
    for name in ["desk_cifar5k_viewmaker", "desk_cifar5k_gaussian_noise"] {
        let cfg = configs_dir().join(format!("pretrain/{name}.toml"));
        let runs = tmp.path().join("runs");
        let out = run_cli(&["--data-dir", s(Path::new(&root)), "pretrain", "--config", s(&cfg), "--out", s(&runs)]);
        if !out.status.success() {
            return Err(format!("pretrain {name} failed"));
        }
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        let ckpt = stdout_line(&text, "final_checkpoint:").ok_or("no final checkpoint")?.to_string();
        let eval = tmp.path().join(format!("eval-{name}"));
        let job = configs_dir().join("eval/desk_cifar5k_linear.toml");
        let out = run_cli(&["--data-dir", s(Path::new(&root)), "transfer", "--checkpoint", &ckpt, "--config", s(&job), "--out", s(&eval)]);
        if !out.status.success() {
            return Err(format!("transfer {name} failed"));
        }
        acc.push(transfer_accuracy(&eval));
    }
    ensure(acc[0] >= acc[1] + 5.0, format!("viewmaker {:.2}% vs gaussian noise {:.2}% (need a gap of >= 5 points)", acc[0], acc[1]))
}

fn c8_preprocessing_shapes() -> Check {
    let mut rng = seeded(8);
    let wave: Vec<f32> = (0..150_000).map(|i| (i as f32 * 0.05).sin() * 0.3 + 0.01 * rng.random::<f32>()).collect();
    let s64 = SpectrogramSpec::librispeech_64();
    let s112 = SpectrogramSpec::librispeech_112();
    let a = waveform_to_logmel(&wave, &s64, PreprocessMode::Eval, &mut rng).unwrap().dim();
    let b = waveform_to_logmel(&wave, &s112, PreprocessMode::Train, &mut rng).unwrap().dim();
    let spec = SensorWindowSpec::default();
    let recording = Array2::from_shape_fn((spec.window_len() + 37, 52), |_| rng.random::<f32>());
    let c = sensor_window_to_spectrograms(&recording.view(), 20, &spec).unwrap().dim();
    let params = (s64.hop, s64.fft_window, s112.hop, s112.fft_window) == (2360, 64, 672, 112);
    ensure(
        a == (1, 64, 64) && b == (1, 112, 112) && c == (52, 32, 32) && params,
        format!("hop 2360/window 64 -> {a:?}, hop 672/window 112 -> {b:?}, 10 s sensor window -> {c:?}"),
    )
}

fn c9_dct_round_trip() -> Check {
    let mut rng = seeded(9);
    let mut worst = 0f32;
    let shapes = [(3, 32, 32), (1, 64, 64), (1, 112, 112), (52, 32, 32)];
    for &(c, h, w) in &shapes {
        for _ in 0..100 {
            let x = Tensor::from_vec((0..c * h * w).map(|_| rng.random::<f32>()).collect::<Vec<_>>(), (1, c, h, w), &dev()).unwrap();
            let back = idct2d(&dct2d(&x).unwrap()).unwrap();
            let err = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            worst = worst.max(err);
        }
    }
    ensure(worst <= 1e-5, format!("100 f32 inputs at each of {shapes:?}: max |IDCT(DCT(x)) - x| = {worst:.2e} (tol 1e-5)"))
}

/// Full softmax over every bank slot, own slot as the positive.
fn instdisc_oracle(z: &[Vec<f64>], indices: &[usize], bank: &MemoryBank, tau: f64) -> f64 {
    let slots: Vec<Vec<f64>> = (0..bank.len()).map(|i| bank.slot(i).iter().map(|&v| v as f64).collect()).collect();
    let mut total = 0.0;
    for (zi, &own) in z.iter().zip(indices) {
        let zi = unit(zi);
        let denom: f64 = slots.iter().map(|m| (dot(&zi, m) / tau).exp()).sum();
        total -= ((dot(&zi, &slots[own]) / tau).exp() / denom).ln();
    }
    total / z.len() as f64
}

fn c10_memory_bank() -> Check {
    let mut rng = seeded(10);
    let cfg = MemoryBankConfig { update_rate: 0.5, num_negatives: 16 };
    let mut bank = MemoryBank::new(64, 12, cfg, &mut rng).unwrap();
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let indices: Vec<usize> = rand::seq::index::sample(&mut rng, 64, k).into_vec();
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let z = tensor(uniform(&mut rng, k * 12, -scale, scale), &[k, 12]);
        bank.update(&z, &indices).unwrap();
    }
    let norm_err = (0..bank.len())
        .map(|i| (bank.slot(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut oracle_err = 0f64;
    for _ in 0..50 {
        let slots = random_rows(&mut rng, 4, 6);
        let small = MemoryBank::from_slots(&slots, 0.5, 3).unwrap();
        let z = random_rows(&mut rng, 4, 6);
        let indices: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
        for tau in [0.07, 1.0] {
            let got = scalar(&instdisc_loss(&rows(&z), &indices, &small, Temperature::new(tau).unwrap(), &mut rng).unwrap());
            oracle_err = oracle_err.max((got - instdisc_oracle(&z, &indices, &small, tau)).abs());
        }
    }

    let e = |k: usize| (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let tau1 = Temperature::new(1.0).unwrap();
    let aligned = MemoryBank::from_slots(&[e(0), e(1), e(2)], 0.5, 2).unwrap();
    let a = scalar(&instdisc_loss(&rows(&[e(0)]), &[0], &aligned, tau1, &mut rng).unwrap());
    let a_expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
    let orthogonal = MemoryBank::from_slots(&[e(1), e(2), e(3)], 0.5, 2).unwrap();
    let b = scalar(&instdisc_loss(&rows(&[e(0)]), &[0], &orthogonal, tau1, &mut rng).unwrap());
    let analytic_err = (a - a_expect).abs().max((b - 3f64.ln()).abs());
    ensure(
        norm_err <= 1e-5 && oracle_err <= 1e-6 && analytic_err <= 1e-6,
        format!(
            "slot norm err {norm_err:.2e} after 1000 updates (1e-5); 4-slot full-softmax oracle err {oracle_err:.2e} (1e-6); analytic cases err {analytic_err:.2e} (0.5514 = {a:.4}, log 3 = {b:.4})"
        ),
    )
}

fn c11_corners_audit() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("source");
    let mut rng = seeded(11);
    let mut records = Vec::new();
    for i in 0..100 {
        let img = Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f32>());
        let rel = PathBuf::from(format!("images/{i:03}.ppm"));
        write_pnm(&src.join(&rel), &img).unwrap();
        records.push(ManifestRecord { path: rel, label: Some(i % 10), split: "train".into(), subject_id: None });
    }
    write_manifest(&src.join(MANIFEST_FILE), &records).unwrap();
    let derived = tmp.path().join("corners");
    if !run_cli(&["make-corners", "--input", s(&src), "--out", s(&derived), "--seed", "3"]).status.success() {
        return Err("make-corners failed".into());
    }
    let out = run_cli(&["audit-corners", "--source", s(&src), "--derived", s(&derived)]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let traced = stdout_line(&text, "quadrants traced to a source image:").unwrap_or("?").to_string();
    let original = stdout_line(&text, "quadrants from the image they replaced:").unwrap_or("?").to_string();
    ensure(
        out.status.success() && traced == "400/400" && original == "0/400",
        format!("100 images: traced {traced}, from the original {original}"),
    )
}

fn without_wall_time(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

fn copy_dir(from: &Path, to: &Path, skip: &str) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.file_name() == skip {
            continue;
        }
        if e.path().is_dir() {
            copy_dir(&e.path(), &to.join(e.file_name()), skip);
        } else {
            fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

fn c12_end_to_end() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let pretrain_cfg = configs_dir().join("pretrain/synthetic_smoke.toml");
    let eval_cfg = configs_dir().join("eval/synthetic_linear.toml");
    let runs = tmp.path().join("runs");
    let out = run_cli(&["pretrain", "--config", s(&pretrain_cfg), "--out", s(&runs)]);
    if !out.status.success() {
        return Err("pretrain failed".into());
    }
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let final_ckpt = PathBuf::from(stdout_line(&text, "final_checkpoint:").ok_or("pretrain printed no checkpoint")?);
    let run_dir = final_ckpt.parent().unwrap().to_path_buf();
    let final_name = final_ckpt.file_name().unwrap().to_str().unwrap().to_string();

    let transfer = tmp.path().join("transfer");
    let t = run_cli(&["transfer", "--checkpoint", s(&final_ckpt), "--config", s(&eval_cfg), "--out", s(&transfer)]);
    let robust = tmp.path().join("robustness");
    let probe = transfer.join("probe.safetensors");
    let r = run_cli(&["robustness", "--checkpoint", s(&final_ckpt), "--config", s(&eval_cfg), "--probe", s(&probe), "--out", s(&robust)]);
    let views = tmp.path().join("views");
    let v = run_cli(&["export-views", "--checkpoint", s(&final_ckpt), "--count", "2", "--out", s(&views)]);
    let exits = [&t, &r, &v].iter().all(|o| o.status.success());
    let diff = fs::read_to_string(robust.join("robustness.json"))
        .ok()
        .and_then(|j| serde_json::from_str::<serde_json::Value>(&j).ok())
        .and_then(|j| j["corruption"]["diff"].as_f64());
    let grids = views.join("grid-000.ppm").is_file() && views.join("grid-001.ppm").is_file();

    // resume a copy of the run from its first checkpoint
    let copy = tmp.path().join("resumed").join(run_dir.file_name().unwrap());
    copy_dir(&run_dir, &copy, &final_name);
    let mid = fs::read_dir(&copy)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.is_dir() && p.file_name().unwrap().to_str().unwrap().starts_with("step-"))
        .ok_or("no mid-run checkpoint")?;
    let resumed = run_cli(&["pretrain", "--resume", s(&mid)]).status.success();
    let files = ["encoder.safetensors", "viewmaker.safetensors", "optimizer.safetensors", "rng.json"];
    let identical = resumed
        && files.iter().all(|f| fs::read(final_ckpt.join(f)).ok() == fs::read(copy.join(&final_name).join(f)).ok())
        && without_wall_time(&run_dir.join("metrics.jsonl")) == without_wall_time(&copy.join("metrics.jsonl"));
    ensure(
        exits && diff == Some(0.0) && grids && identical,
        format!(
            "transfer/robustness/export-views exit 0: {exits}; identity diff = {diff:?}; grids written: {grids}; resume from {} bit-exact: {identical}",
            mid.file_name().unwrap().to_string_lossy()
        ),
    )
}

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Check,
    slow: bool,
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let include_slow = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only_slow = args.iter().any(|a| a == "--ignored");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "nt-xent oracle equivalence", run: c1_nt_xent_oracle, slow: false },
        Criterion { id: 2, name: "analytic loss cases", run: c2_analytic_cases, slow: false },
        Criterion { id: 3, name: "projection invariants", run: c3_projection_invariants, slow: false },
        Criterion { id: 4, name: "gradient checks", run: c4_gradient_checks, slow: false },
        Criterion { id: 5, name: "stochasticity and determinism", run: c5_stochastic_and_deterministic, slow: false },
        Criterion { id: 6, name: "adversarial direction", run: c6_adversarial_direction, slow: false },
        Criterion { id: 7, name: "desk-scale ordering", run: c7_desk_scale_ordering, slow: true },
        Criterion { id: 8, name: "preprocessing shapes", run: c8_preprocessing_shapes, slow: false },
        Criterion { id: 9, name: "dct round trip", run: c9_dct_round_trip, slow: false },
        Criterion { id: 10, name: "memory bank", run: c10_memory_bank, slow: false },
        Criterion { id: 11, name: "corners provenance audit", run: c11_corners_audit, slow: false },
        Criterion { id: 12, name: "end-to-end pipeline", run: c12_end_to_end, slow: false },
    ];
    let mut failed = 0;
    for c in &criteria {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        if c.slow && !include_slow {
            println!("criterion {:>2} {:<30} IGNORED slow; rerun with --include-ignored and VIEWCRAFT_DATA_DIR", c.id, c.name);
            continue;
        }
        if only_slow && !c.slow {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {:<30} PASS ({secs:.1}s) {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {:<30} FAIL ({secs:.1}s) {detail}", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
