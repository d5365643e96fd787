use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cipa_core::bench::{bench_scan, LINEARITY_SLACK};
use cipa_core::checkpoint::Checkpoint;
use cipa_core::data::{read_manifest, read_split, split_patients, synth_generate, write_dataset, ModalityPair};
use cipa_core::metrics::Report;
use cipa_core::net::infer;
use cipa_core::tensor::{read_tsr, write_tsr};
use cipa_core::train::{evaluate_model, Trainer};
use cipa_core::verify::{run_all, Fault};
use cipa_core::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::overlay::{overlay_pixels, write_mask_png, write_rgb_png};
use crate::{Cli, Command, GlobalArgs, TrainArgs};

/// A self-check or benchmark assertion failed.
#[derive(Debug)]
pub struct SuiteFailure(pub String);

impl std::fmt::Display for SuiteFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "suite failure: {}", self.0)
    }
}

impl std::error::Error for SuiteFailure {}

/// 0 ok, 1 validation error, 2 suite failure, 3 numeric fault.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<SuiteFailure>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numeric_fault() => 3,
        _ => 1,
    }
}

pub const LOCK_NAME: &str = ".cipa.lock";
pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
pub const LOSS_LOG_NAME: &str = "loss.csv";
pub const LOSS_LOG_HEADER: &str = "step,lr,loss";

/// Exclusive ownership of a run directory for the life of the value.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_NAME);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another process ({})", dir.display(), path.display()))?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Creates `dir`, refusing a non-empty one unless forced, and locks it.
fn prepare_dir(dir: &Path, force: bool) -> Result<RunLock> {
    if dir.exists() {
        let busy = fs::read_dir(dir)?.next().is_some();
        if busy && !force {
            bail!(Error::Config(format!(
                "{} exists and is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    RunLock::acquire(dir)
}

fn out_dir(g: &GlobalArgs) -> Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| anyhow!(Error::Config("--out is required".into())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Synth { count } => synth(&g, count),
        Command::Train(args) => train(&g, &args),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(&g, &checkpoint, &data, &split),
        Command::Infer { checkpoint, pet, ct } => infer_one(&g, &checkpoint, &pet, &ct),
        Command::Verify { inject_fault } => verify(&g, inject_fault.as_deref()),
        Command::Bench { reps } => bench(&g, reps),
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    Ok(RunConfig::load(g.config.as_deref())?.with_seed(g.seed))
}

fn size_histogram(pairs: &[ModalityPair]) -> String {
    const EDGES: [usize; 5] = [0, 50, 100, 200, 500];
    let mut counts = [0usize; EDGES.len()];
    for p in pairs {
        let area = p.mask.as_ref().map_or(0, |m| m.data().iter().filter(|&&v| v == 1.0).count());
        let bin = EDGES.iter().rposition(|&e| area >= e).unwrap_or(0);
        counts[bin] += 1;
    }
    let mut out = String::from("tumour area per slice (px):\n");
    for (i, &c) in counts.iter().enumerate() {
        let label = match EDGES.get(i + 1) {
            Some(hi) => format!("{:>4}-{:<4}", EDGES[i], hi - 1),
            None => format!("{:>4}+    ", EDGES[i]),
        };
        let _ = writeln!(out, "  {label} {c:>5} {}", "#".repeat(c.min(60)));
    }
    out
}

fn synth(g: &GlobalArgs, count: Option<usize>) -> Result<()> {
    let mut cfg = load_config(g)?;
    if let Some(c) = count {
        cfg.synth.count = c;
    }
    cfg.validate()?;
    let dir = out_dir(g)?;
    let _lock = prepare_dir(dir, g.force)?;
    let pairs = synth_generate(&cfg.synth)?;
    let (train_ids, test_ids) = split_patients(&cfg.synth);
    let pick = |ids: &[String]| -> Vec<ModalityPair> {
        pairs.iter().filter(|p| ids.contains(&p.id)).cloned().collect()
    };
    let (train, test) = (pick(&train_ids), pick(&test_ids));
    write_dataset(dir, &[("train", &train), ("test", &test)], Some(&cfg.synth))?;
    println!(
        "wrote {} slices to {} ({} train, {} test)",
        pairs.len(),
        dir.display(),
        train.len(),
        test.len()
    );
    print!("{}", size_histogram(&pairs));
    Ok(())
}

fn format_row(step: u64, lr: f64, loss: f64) -> String {
    format!("{step},{lr:e},{loss:e}")
}

/// Keeps the log rows before `step`, so a resumed run rewrites exactly what
/// the interrupted one would have.
fn trimmed_log(path: &Path, step: u64) -> Result<String> {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let row_step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .with_context(|| format!("{}: malformed row {line:?}", path.display()))?;
            if row_step < step {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: u64,
    batch_ids: &'a [String],
}

#[derive(Serialize)]
struct TrainMetrics {
    step: u64,
    params: usize,
    train: Report,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<Report>,
}

fn train(g: &GlobalArgs, args: &TrainArgs) -> Result<()> {
    let dir = out_dir(g)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if let Some(steps) = args.steps {
                if steps != ck.train.steps {
                    bail!(Error::Config(format!(
                        "a resumed run keeps its schedule of {} steps",
                        ck.train.steps
                    )));
                }
            }
            ck.into_trainer()?
        }
        None => {
            let mut cfg = load_config(g)?;
            if let Some(s) = args.steps {
                cfg.train.steps = s;
            }
            if let Some(b) = args.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = args.lr {
                cfg.train.lr = lr;
            }
            cfg.train.augment &= !args.no_augment;
            cfg.model.enable_crm &= !args.ablate_crm;
            cfg.model.enable_dcim &= !args.ablate_dcim;
            cfg.model.validate()?;
            cfg.train.validate()?;
            Trainer::new(cfg.model, cfg.train)?
        }
    };
    let resuming = args.resume.is_some();
    let _lock = prepare_dir(dir, g.force || resuming)?;

    let manifest = read_manifest(&args.data)?;
    if manifest.resolution != trainer.model.resolution {
        bail!(Error::Config(format!(
            "dataset resolution {} differs from the model's {}",
            manifest.resolution, trainer.model.resolution
        )));
    }
    let data = read_split(&args.data, &manifest, "train")?;

    let echo = RunConfig {
        model: trainer.model.clone(),
        synth: manifest.generator.clone().unwrap_or_default(),
        train: trainer.cfg.clone(),
        checkpoint_every: load_config(g)?.checkpoint_every,
    };
    write_json(&dir.join("config.json"), &echo)?;

    let log_path = dir.join(LOSS_LOG_NAME);
    let mut log_text = trimmed_log(&log_path, if resuming { trainer.step } else { 0 })?;
    let ckpt_path = dir.join(CHECKPOINT_NAME);
    let stop = args.stop_after.unwrap_or(trainer.cfg.steps).min(trainer.cfg.steps);
    println!(
        "training {} parameters for {} steps (batch {}, lr {:e})",
        trainer.store.num_elements(),
        trainer.cfg.steps,
        trainer.cfg.batch_size,
        trainer.cfg.lr
    );

    while trainer.step < stop {
        let stats = match trainer.train_step(&data) {
            Ok(s) => s,
            Err(Error::Diverged { step, ids }) => {
                fs::write(&log_path, &log_text)?;
                write_json(&dir.join("diverged.json"), &Diagnostic { step, batch_ids: &ids })?;
                return Err(Error::Diverged { step, ids }.into());
            }
            Err(e) => return Err(e.into()),
        };
        log_text.push_str(&format_row(stats.step, stats.lr, stats.loss));
        log_text.push('\n');
        if stats.step == 0 || (stats.step + 1) % args.log_every.max(1) == 0 {
            println!("step {:>5} lr {:.4e} loss {:.6}", stats.step, stats.lr, stats.loss);
        }
        if echo.checkpoint_every > 0 && trainer.step % echo.checkpoint_every == 0 {
            Checkpoint::of(&trainer).save(&ckpt_path)?;
            fs::write(&log_path, &log_text)?;
        }
    }
    Checkpoint::of(&trainer).save(&ckpt_path)?;
    fs::write(&log_path, &log_text)?;

    if trainer.finished() {
        let test = match manifest.splits.get("test") {
            Some(ids) if !ids.is_empty() => Some(trainer.evaluate(&read_split(&args.data, &manifest, "test")?)?),
            _ => None,
        };
        let metrics = TrainMetrics {
            step: trainer.step,
            params: trainer.store.num_elements(),
            train: trainer.evaluate(&data)?,
            test,
        };
        println!(
            "train iou {:.4} f1 {:.4} acc {:.4} hd95 {:.3}",
            metrics.train.mean.iou, metrics.train.mean.f1, metrics.train.mean.acc, metrics.train.mean.hd95
        );
        if let Some(t) = &metrics.test {
            println!(
                "test  iou {:.4} f1 {:.4} acc {:.4} hd95 {:.3}",
                t.mean.iou, t.mean.f1, t.mean.acc, t.mean.hd95
            );
        }
        write_json(&dir.join("metrics.json"), &metrics)?;
    } else {
        println!("stopped at step {} of {}", trainer.step, trainer.cfg.steps);
    }
    Ok(())
}

fn eval(g: &GlobalArgs, checkpoint: &Path, data_dir: &Path, split: &str) -> Result<()> {
    let dir = out_dir(g)?;
    let trainer = Checkpoint::load(checkpoint)?.into_trainer()?;
    let manifest = read_manifest(data_dir)?;
    if manifest.resolution != trainer.model.resolution {
        bail!(Error::Config(format!(
            "dataset resolution {} differs from the checkpoint's {}",
            manifest.resolution, trainer.model.resolution
        )));
    }
    let data = read_split(data_dir, &manifest, split)?;
    let _lock = prepare_dir(dir, g.force)?;
    let report = evaluate_model(&trainer.net, &trainer.store, &data)?;
    write_json(&dir.join("report.json"), &report)?;
    let overlays = dir.join("overlays");
    fs::create_dir_all(&overlays)?;
    for pair in &data {
        let pred = infer(&trainer.net, &trainer.store, &pair.pet, &pair.ct)?;
        let truth = pair.mask.as_ref().context("evaluation needs masks")?;
        let (h, w) = pair.dims();
        let rgb = overlay_pixels(&pair.ct, &pred, truth)?;
        write_rgb_png(&overlays.join(format!("{}.png", pair.id)), w, h, &rgb)?;
    }
    println!(
        "{} images: iou {:.4} f1 {:.4} acc {:.4} hd95 {:.3}",
        report.count, report.mean.iou, report.mean.f1, report.mean.acc, report.mean.hd95
    );
    Ok(())
}

fn infer_one(g: &GlobalArgs, checkpoint: &Path, pet: &Path, ct: &Path) -> Result<()> {
    let out = g
        .out
        .as_deref()
        .ok_or_else(|| anyhow!(Error::Config("--out FILE is required".into())))?;
    if out.exists() && !g.force {
        bail!(Error::Config(format!("{} exists (use --force)", out.display())));
    }
    let trainer = Checkpoint::load(checkpoint)?.into_trainer()?;
    let (pet, ct) = (read_tsr(pet)?, read_tsr(ct)?);
    let mask = infer(&trainer.net, &trainer.store, &pet, &ct)?;
    write_tsr(&mask, out)?;
    write_mask_png(&out.with_extension("png"), &mask)?;
    let fg = mask.data().iter().filter(|&&v| v == 1.0).count();
    println!("{}: {fg} tumour pixels of {}", out.display(), mask.numel());
    Ok(())
}

fn verify(g: &GlobalArgs, fault: Option<&str>) -> Result<()> {
    let fault: Option<Fault> = fault.map(str::parse).transpose()?;
    let results = run_all(g.seed.unwrap_or(0), fault)?;
    println!("{:<16} {:<6} {:>11} {:>9} {:>7} {:>8}", "suite", "result", "max_error", "tolerance", "cases", "seconds");
    for r in &results {
        println!(
            "{:<16} {:<6} {:>11.3e} {:>9.1e} {:>7} {:>8.2} {}",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.max_error,
            r.tolerance,
            r.cases,
            r.seconds,
            r.detail
        );
    }
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("verify.json"), &results)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(SuiteFailure(failed.join(", ")).into());
    }
    Ok(())
}

fn bench(g: &GlobalArgs, reps: usize) -> Result<()> {
    let report = bench_scan(reps.max(1), g.seed.unwrap_or(0))?;
    print!("{}", report.table());
    println!("{}", serde_json::to_string(&report)?);
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("bench.json"), &report)?;
    }
    let mut problems = Vec::new();
    if !report.linear {
        problems.push(format!(
            "growth {:.2}x per 4x length exceeds {:.2}x",
            report.max_growth,
            4.0 * LINEARITY_SLACK
        ));
    }
    if report.max_chunk_diff > 1e-5 {
        problems.push(format!("chunked scan differs by {:.2e}", report.max_chunk_diff));
    }
    if !problems.is_empty() {
        return Err(SuiteFailure(problems.join("; ")).into());
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "scan scaling ok")?;
    Ok(())
}
