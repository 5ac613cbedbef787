use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use ndarray::Array3;
use viewcraft::dataprep::io::{read_cifar10_batch, write_manifest, write_pnm, ManifestRecord, MANIFEST_FILE};
use viewcraft::dataprep::{
    audit_corners, compute_norm_stats, load_manifest_dir, make_corners_dataset, read_input_file, stack, Modality, NormStats,
};
use viewcraft::encoder::Encoder;
use viewcraft::eval::{corruption_eval, linear_eval, semi_supervised_compare, LinearProbe};
use viewcraft::export::{view_grid, GridStyle};
use viewcraft::rng::{derive, seeded};
use viewcraft::trainer::{self, load_checkpoint, ExperimentConfig, LoadedCheckpoint, NORM_FILE};
use viewcraft::Error;

use crate::jobs::{corrupted_variants, CorruptionSource, EvalJob};
use crate::manifest::{artifacts, now, sha256_hex, RunManifest, CODE_VERSION, RUN_MANIFEST_FILE};

pub const PROBE_FILE: &str = "probe.safetensors";
pub const JOB_FILE: &str = "job.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";

pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub dry_run: bool,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub dry_run: bool,
}

fn finish(dir: &Path, run_id: String, command: &str, config_text: &str, seed: u64, started_at: String) -> Result<()> {
    let manifest = RunManifest {
        run_id,
        command: command.into(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        code_version: CODE_VERSION.into(),
        seed,
        started_at,
        finished_at: now(),
        artifacts: artifacts(dir)?,
    };
    manifest.write(dir)?;
    Ok(())
}

/// Creates `out`, refusing a directory that already holds a finished run.
fn fresh_out_dir(out: &Path) -> Result<()> {
    if out.join(RUN_MANIFEST_FILE).exists() {
        bail!("output directory {} already holds a run ({RUN_MANIFEST_FILE}); choose another --out", out.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn open_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    if !dir.is_dir() {
        bail!("checkpoint directory {} does not exist", dir.display());
    }
    load_checkpoint(dir, DType::F32, &Device::Cpu).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn checkpoint_run_id(dir: &Path) -> String {
    let name = |p: Option<&Path>| p.and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{}/{}", name(dir.parent()), name(Some(dir)))
}

pub fn pretrain(args: PretrainArgs, data_root: Option<&Path>) -> Result<PathBuf> {
    let started = now();
    let config = match (&args.resume, &args.config) {
        (Some(ckpt), _) => {
            if args.seed.is_some() {
                bail!("--seed cannot change a resumed run");
            }
            if args.config.is_some() {
                log::warn!("--config is ignored when resuming; the checkpoint's config is used");
            }
            let path = ckpt.join(trainer::CONFIG_FILE);
            ExperimentConfig::load(&path).with_context(|| format!("reading {}", path.display()))?
        }
        (None, Some(path)) => {
            let mut cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            cfg
        }
        (None, None) => bail!("pretrain needs --config (or --resume)"),
    };
    let run_dir = match &args.resume {
        Some(ckpt) => ckpt.parent().map(Path::to_path_buf).unwrap_or_else(|| args.out.clone()),
        None => args.out.join(config.run_id()),
    };
    let resolved = config.to_toml_string();
    if args.dry_run {
        let encoder = Encoder::build(config.encoder.clone(), &mut seeded(0), DType::F32, &Device::Cpu)?;
        println!("run_id: {}", config.run_id());
        println!("run_dir: {}", run_dir.display());
        println!("resume: {}", args.resume.as_ref().map_or("no".into(), |p| p.display().to_string()));
        println!("encoder parameters: {}", encoder.params().param_count());
        println!("config_sha256: {}", sha256_hex(resolved.as_bytes()));
        println!("code_version: {CODE_VERSION}\n");
        print!("{resolved}");
        return Ok(run_dir);
    }
    if args.resume.is_none() && run_dir.exists() {
        bail!("run directory {} already exists; use --resume or another --out", run_dir.display());
    }
    let outcome = trainer::pretrain(&config, data_root, &args.out, args.resume.as_deref())?;
    fs::write(outcome.run_dir.join("config.resolved.toml"), &resolved).context("writing resolved config")?;
    finish(&outcome.run_dir, config.run_id(), "pretrain", &resolved, config.seed, started)?;
    println!("run_dir: {}", outcome.run_dir.display());
    println!("final_checkpoint: {}", outcome.final_checkpoint.display());
    if let Some(m) = outcome.metrics.last() {
        match m.perturbation_norm {
            Some(norm) => println!("step: {} loss: {:.4} perturbation_norm: {norm:.4}", m.step, m.loss),
            None => println!("step: {} loss: {:.4}", m.step, m.loss),
        }
    }
    Ok(outcome.run_dir)
}

fn eval_job(args: &EvalArgs) -> Result<EvalJob> {
    let mut job = match &args.config {
        Some(path) => EvalJob::load(path).with_context(|| format!("config {}", path.display()))?,
        None => EvalJob::default(),
    };
    if let Some(seed) = args.seed {
        job.linear.seed = seed;
    }
    Ok(job)
}

fn dry_run(kind: &str, args: &EvalArgs, job: &EvalJob) {
    let text = job.to_toml_string();
    println!("{kind} of checkpoint {}", args.checkpoint.display());
    println!("out: {}", args.out.display());
    println!("config_sha256: {}\n", sha256_hex(text.as_bytes()));
    print!("{text}");
}

pub fn transfer(args: EvalArgs, data_root: Option<&Path>) -> Result<PathBuf> {
    let started = now();
    let job = eval_job(&args)?;
    let ckpt = open_checkpoint(&args.checkpoint)?;
    if args.dry_run {
        dry_run("transfer", &args, &job);
        return Ok(args.out);
    }
    fresh_out_dir(&args.out)?;
    let splits = job.load_splits(&ckpt.config.dataset, data_root)?;
    let (mut report, probe) = linear_eval(&ckpt, &splits, &job.linear, &job.task)?;
    report.checkpoint = Some(checkpoint_run_id(&args.checkpoint));
    report.write(&args.out, "transfer")?;
    probe.save(&args.out.join(PROBE_FILE))?;
    let text = job.to_toml_string();
    fs::write(args.out.join(JOB_FILE), &text).context("writing job config")?;
    finish(&args.out, format!("transfer-{}", job.task), "transfer", &text, job.linear.seed, started)?;
    print!("{}", report.to_text());
    Ok(args.out)
}

pub fn robustness(args: EvalArgs, probe_path: &Path, data_root: Option<&Path>) -> Result<PathBuf> {
    let started = now();
    let mut job = eval_job(&args)?;
    let source = job.corruptions.get_or_insert(CorruptionSource::Synthetic {
        corruptions: viewcraft::eval::Corruption::ALL.to_vec(),
        severities: vec![1, 2, 3, 4, 5],
        seed: 0,
    });
    let source = source.clone();
    let ckpt = open_checkpoint(&args.checkpoint)?;
    if !probe_path.is_file() {
        bail!("probe file {} does not exist", probe_path.display());
    }
    let probe = LinearProbe::load(probe_path, DType::F32, &Device::Cpu).with_context(|| format!("loading probe {}", probe_path.display()))?;
    if args.dry_run {
        dry_run("robustness", &args, &job);
        return Ok(args.out);
    }
    fresh_out_dir(&args.out)?;
    let splits = job.load_splits(&ckpt.config.dataset, data_root)?;
    let variants = corrupted_variants(&source, &splits.val, data_root)?;
    let mut report = corruption_eval(&ckpt.encoder, &probe, &splits.val, &variants, job.linear.batch_size)?;
    report.checkpoint = Some(checkpoint_run_id(&args.checkpoint));
    report.write(&args.out, "robustness")?;
    let text = job.to_toml_string();
    fs::write(args.out.join(JOB_FILE), &text).context("writing job config")?;
    finish(&args.out, format!("robustness-{}", job.task), "robustness", &text, job.linear.seed, started)?;
    print!("{}", report.to_text());
    if let Some(c) = &report.corruption {
        println!("\ndiff (exact): {:?}", c.diff);
    }
    Ok(args.out)
}

pub fn semisup(args: EvalArgs, subjects: Vec<String>, data_root: Option<&Path>) -> Result<PathBuf> {
    let started = now();
    let mut job = eval_job(&args)?;
    if !subjects.is_empty() {
        job.labeled_subjects = subjects;
    }
    let ckpt = open_checkpoint(&args.checkpoint)?;
    if args.dry_run {
        dry_run("semisup", &args, &job);
        return Ok(args.out);
    }
    fresh_out_dir(&args.out)?;
    let splits = job.load_splits(&ckpt.config.dataset, data_root)?;
    let mut report = semi_supervised_compare(&ckpt, &splits, &job.labeled_subjects, &job.linear)?;
    report.checkpoint = Some(checkpoint_run_id(&args.checkpoint));
    report.write(&args.out, "semisup")?;
    let text = job.to_toml_string();
    fs::write(args.out.join(JOB_FILE), &text).context("writing job config")?;
    finish(&args.out, format!("semisup-{}", job.task), "semisup", &text, job.linear.seed, started)?;
    print!("{}", report.to_text());
    Ok(args.out)
}

pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub count: usize,
    pub channel: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Training statistics of the checkpoint's run: `norm.json` next to the
/// step directories, else recomputed from the pretraining split.
fn run_stats(ckpt_dir: &Path, config: &ExperimentConfig, data_root: Option<&Path>) -> Result<NormStats> {
    if let Some(path) = ckpt_dir.parent().map(|p| p.join(NORM_FILE)).filter(|p| p.is_file()) {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    let splits = config.dataset.load(data_root)?;
    Ok(compute_norm_stats(splits.train.inputs().take(10_000))?)
}

pub fn export_views(args: ExportArgs, data_root: Option<&Path>) -> Result<Vec<PathBuf>> {
    let started = now();
    let ckpt = open_checkpoint(&args.checkpoint)?;
    let viewmaker = ckpt
        .viewmaker
        .as_ref()
        .ok_or_else(|| Error::CheckpointMismatch(format!("{} has no viewmaker", args.checkpoint.display())))?;
    let modality = ckpt.config.modality();
    let mut inputs: Vec<Array3<f32>> = if args.inputs.is_empty() {
        let splits = ckpt.config.dataset.load(data_root)?;
        let pool = if splits.val.is_empty() { splits.train } else { splits.val };
        pool.examples.into_iter().take(args.count).map(|e| e.input).collect()
    } else {
        args.inputs.iter().map(|p| read_input_file(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<_>>()?
    };
    if inputs.is_empty() {
        bail!("no inputs to render");
    }
    let channels = viewmaker.config().in_channels;
    if let Some(x) = inputs.iter().find(|x| x.dim().0 != channels) {
        return Err(Error::CheckpointMismatch(format!("viewmaker expects {channels} channels, input has {}", x.dim().0)).into());
    }
    let style = if modality.normalize_before_views() {
        let stats = run_stats(&args.checkpoint, &ckpt.config, data_root)?;
        for x in &mut inputs {
            *x = stats.normalize(x)?;
        }
        GridStyle::SignedDiff { channel: args.channel }
    } else {
        GridStyle::Pixels
    };
    fresh_out_dir(&args.out)?;
    let mut written = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let t = stack(&[x], DType::F32, &Device::Cpu)?.squeeze(0)?;
        let grid = view_grid(viewmaker, &t, style, &mut derive(args.seed, i as u64))?;
        let path = args.out.join(format!("grid-{i:03}.ppm"));
        write_pnm(&path, &grid)?;
        written.push(path);
    }
    let desc = format!("checkpoint={}\nstyle={style:?}\ncount={}\n", checkpoint_run_id(&args.checkpoint), inputs.len());
    finish(&args.out, "export-views".into(), "export-views", &desc, args.seed, started)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

/// Source images of a corners dataset: a manifest directory (records of
/// `split`) or a directory of CIFAR-10 binary batches (training batches).
pub fn corner_sources(dir: &Path, split: &str) -> Result<Vec<Array3<f32>>> {
    if dir.join(MANIFEST_FILE).is_file() {
        let images: Vec<_> = load_manifest_dir(dir, Modality::Image, None, false)?
            .into_iter()
            .filter(|(s, _)| s == split)
            .map(|(_, e)| e.input)
            .collect();
        if images.is_empty() {
            bail!("{} has no records in split {split:?}", dir.join(MANIFEST_FILE).display());
        }
        return Ok(images);
    }
    let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.is_file()).collect();
    if batches.is_empty() {
        bail!("{} holds neither {MANIFEST_FILE} nor CIFAR-10 training batches", dir.display());
    }
    let mut out = Vec::new();
    for b in &batches {
        out.extend(read_cifar10_batch(b, None)?.into_iter().map(|(x, _)| x));
    }
    Ok(out)
}

pub fn make_corners(input: &Path, out: &Path, seed: u64, split: &str) -> Result<PathBuf> {
    let started = now();
    let sources = corner_sources(input, split)?;
    let (images, provenance) = make_corners_dataset(&sources, &mut seeded(seed))?;
    fresh_out_dir(out)?;
    let mut records = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("{i:05}.ppm"));
        write_pnm(&out.join(&rel), img)?;
        records.push(ManifestRecord { path: rel, label: None, split: "train".into(), subject_id: None });
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    let prov = serde_json::json!({ "seed": seed, "source_split": split, "donors": provenance.donors });
    fs::write(out.join(PROVENANCE_FILE), serde_json::to_string(&prov).expect("provenance serializes")).context("writing provenance")?;
    let desc = format!("input={}\nsplit={split}\nseed={seed}\n", input.display());
    finish(out, format!("corners-seed{seed}"), "make-corners", &desc, seed, started)?;
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(out.to_path_buf())
}

pub fn audit(source: &Path, derived: &Path, split: &str) -> Result<bool> {
    let sources = corner_sources(source, split)?;
    let outputs = corner_sources(derived, "train")?;
    let audit = audit_corners(&sources, &outputs)?;
    println!("quadrants traced to a source image: {}/{}", audit.traced, audit.quadrants);
    println!("quadrants from the image they replaced: {}/{}", audit.from_original, audit.quadrants);
    println!("{}", if audit.passed() { "audit passed" } else { "audit FAILED" });
    Ok(audit.passed())
}
