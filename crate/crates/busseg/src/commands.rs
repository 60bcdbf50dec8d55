//! The four commands behind the `busseg` binary.
//!
//! Run directories written by `train` (and by each `ablate` run):
//!
//! ```text
//! config.txt        effective run configuration
//! checkpoint.txt    trained student, see `checkpoint`
//! train_log.csv     per-interval means of the step metrics
//! curves.svg        loss curves from the log
//! ```
//!
//! `eval` adds `report.json`, `report.csv` and `vis/NNNN_pred.ppm` /
//! `vis/NNNN_truth.ppm`. `ablate` writes `seed<S>/<mode>/` run directories with
//! a report each, then `runs.csv` (one row per run) and `ablation.csv` (one row
//! per mode, mean and sample standard deviation over seeds).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use busseg_core::dataset::{build_benchmark, Benchmark};
use busseg_core::trainer::{Mode, StepMetrics, Trainer};

use crate::archive::{self, ArchiveError, Split};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::plot::{line_chart, Series};
use crate::report::{visualize, Report};

/// Failure of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    /// Exit code 1.
    #[error("usage: {0}")]
    Usage(String),
    /// Exit code 1.
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    /// Exit code 2.
    #[error("i/o: {0}")]
    Io(String),
    /// Exit code 3.
    #[error("validation: {0}")]
    Validation(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) | CmdError::Config(_) => 1,
            CmdError::Io(_) => 2,
            CmdError::Validation(_) => 3,
        }
    }
}

impl From<busseg_core::Error> for CmdError {
    fn from(e: busseg_core::Error) -> Self {
        CmdError::Validation(e.to_string())
    }
}

impl From<ArchiveError> for CmdError {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::Contents(inner) => inner.into(),
            other => CmdError::Io(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CmdError {
    fn from(e: CheckpointError) -> Self {
        CmdError::Io(e.to_string())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CmdError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CmdError::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CmdError::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CmdError> {
    fs::read_to_string(path).map_err(|e| CmdError::Io(format!("{}: {e}", path.display())))
}

/// Builds the effective configuration: file (or defaults), then `--mode`,
/// then `--seed` (data and trainer seed), then each `--override` in order.
pub fn load_config(
    path: Option<&Path>,
    mode: Option<&str>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<RunConfig, CmdError> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(m) = mode {
        cfg.set("trainer.mode", m)?;
    }
    if let Some(s) = seed {
        cfg.data_seed = s;
        cfg.trainer.seed = s;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Generates the benchmark into `out` and returns the archive checksum.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<String, CmdError> {
    let bench = build_benchmark(&cfg.scene, (cfg.source_count, cfg.target_count), cfg.data_seed)?;
    Ok(archive::write(&bench, out)?)
}

/// Interval means of the step metrics, one CSV row each.
#[derive(Debug, Default)]
struct TrainLog {
    rows: Vec<StepMetrics>,
    acc: StepMetrics,
    count: usize,
}

impl TrainLog {
    const HEADER: &'static str =
        "step,total,source_ce,target_ce,decon,mean_confidence,decon_skip_rate,unknown_rate,grad_norm";

    fn push(&mut self, m: &StepMetrics, flush: bool) {
        let a = &mut self.acc;
        a.step = m.step;
        a.total += m.total;
        a.source_ce += m.source_ce;
        a.target_ce += m.target_ce;
        a.decon += m.decon;
        a.mean_confidence += m.mean_confidence;
        a.decon_skip_rate += m.decon_skip_rate;
        a.unknown_rate += m.unknown_rate;
        a.grad_norm += m.grad_norm;
        self.count += 1;
        if flush {
            let n = self.count as f64;
            let a = std::mem::take(&mut self.acc);
            self.rows.push(StepMetrics {
                step: a.step,
                total: a.total / n,
                source_ce: a.source_ce / n,
                target_ce: a.target_ce / n,
                decon: a.decon / n,
                mean_confidence: a.mean_confidence / n,
                decon_skip_rate: a.decon_skip_rate / n,
                unknown_rate: a.unknown_rate / n,
                grad_norm: a.grad_norm / n,
            });
            self.count = 0;
        }
    }

    fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.total,
                r.source_ce,
                r.target_ce,
                r.decon,
                r.mean_confidence,
                r.decon_skip_rate,
                r.unknown_rate,
                r.grad_norm
            ));
        }
        out
    }

    fn svg(&self, title: &str) -> String {
        let series = |name: &str, f: fn(&StepMetrics) -> f64| Series {
            name: name.into(),
            points: self.rows.iter().map(|r| (r.step as f64, f(r))).collect(),
        };
        line_chart(
            title,
            &[
                series("total", |r| r.total),
                series("source_ce", |r| r.source_ce),
                series("target_ce", |r| r.target_ce),
                series("decon", |r| r.decon),
                series("q_t", |r| r.mean_confidence),
            ],
        )
    }
}

/// Trains on an in-memory benchmark and writes the run directory.
pub fn train_on(cfg: &RunConfig, bench: &Benchmark, out: &Path) -> Result<Checkpoint, CmdError> {
    let mut trainer = Trainer::new(cfg.trainer.clone(), bench.class_space, bench.thing_class_ids.clone())?;
    let mut log = TrainLog::default();
    let steps = cfg.trainer.steps;
    trainer.train(bench, |m| log.push(m, m.step % cfg.log_every == 0 || m.step == steps))?;
    let config = cfg.emit();
    let ck = Checkpoint {
        step: trainer.steps_done(),
        model: trainer.model(),
        known_names: bench.known_names.clone(),
        config: config.clone(),
    };
    write_file(&out.join("config.txt"), &config)?;
    write_file(&out.join("checkpoint.txt"), ck.encode())?;
    write_file(&out.join("train_log.csv"), log.csv())?;
    write_file(
        &out.join("curves.svg"),
        log.svg(&format!("{} training curves", cfg.trainer.mode.name())),
    )?;
    Ok(ck)
}

/// Trains from the archive at `archive_dir`, writing the run to `out`.
pub fn train(cfg: &RunConfig, archive_dir: &Path, out: &Path) -> Result<Checkpoint, CmdError> {
    let bench = archive::read(archive_dir, Split::Training)?;
    train_on(cfg, &bench, out)
}

/// Scores a model on held-out target labels.
pub fn evaluate_model(ck: &Checkpoint, bench: &Benchmark) -> Result<Report, CmdError> {
    let m = ck.model.evaluate(&bench.target_images, &bench.target_eval_labels)?;
    Ok(Report::new(ck.model.mode.name(), bench.target_images.len(), &bench.known_names, &m))
}

fn write_report(report: &Report, out: &Path) -> Result<(), CmdError> {
    write_file(&out.join("report.json"), report.to_json())?;
    write_file(&out.join("report.csv"), report.to_csv())
}

/// Evaluates a checkpoint on an archive, writing reports and `visualizations`
/// prediction images into `out`.
pub fn eval(checkpoint: &Path, archive_dir: &Path, out: &Path, visualizations: usize) -> Result<Report, CmdError> {
    let ck = Checkpoint::decode(&read_text(checkpoint)?)?;
    let manifest = archive::read_manifest(archive_dir)?;
    let cs = ck.model.class_space;
    if manifest.class_space != cs || manifest.known_names != ck.known_names {
        return Err(CmdError::Validation(format!(
            "class-space mismatch: checkpoint has C = {} ({}), archive has C = {} ({})",
            cs.num_known(),
            ck.known_names.join(","),
            manifest.class_space.num_known(),
            manifest.known_names.join(",")
        )));
    }
    let bench = archive::read(archive_dir, Split::Evaluation)?;
    let report = evaluate_model(&ck, &bench)?;
    write_report(&report, out)?;
    for (i, (img, truth)) in bench
        .target_images
        .iter()
        .zip(&bench.target_eval_labels)
        .take(visualizations)
        .enumerate()
    {
        let pred = ck.model.predict(img)?;
        write_file(&out.join(format!("vis/{i:04}_pred.ppm")), visualize(&pred, &cs))?;
        write_file(&out.join(format!("vis/{i:04}_truth.ppm")), visualize(truth, &cs))?;
    }
    Ok(report)
}

/// One finished ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub mode: Mode,
    pub report: Report,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from("seed,config,mode,common_miou,private_iou,h_score\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seed,
            r.mode.row_label(),
            r.mode.name(),
            r.report.common_miou,
            r.report.private_iou,
            r.report.h_score
        ));
    }
    out
}

/// One row per mode in table order, aggregating over every run of that mode.
pub fn summary_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from(
        "config,mode,unknown_head,decon,openremix,runs,common_mean,common_std,private_mean,private_std,h_mean,h_std\n",
    );
    for mode in Mode::ALL {
        let of: Vec<&Report> = runs.iter().filter(|r| r.mode == mode).map(|r| &r.report).collect();
        if of.is_empty() {
            continue;
        }
        let stat = |f: fn(&Report) -> f64| mean_std(&of.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (cm, cs) = stat(|r| r.common_miou);
        let (pm, ps) = stat(|r| r.private_iou);
        let (hm, hs) = stat(|r| r.h_score);
        out.push_str(&format!(
            "{},{},{},{},{},{},{cm},{cs},{pm},{ps},{hm},{hs}\n",
            mode.row_label(),
            mode.name(),
            mode.has_unknown_head() as u8,
            mode.uses_decon() as u8,
            mode.uses_remix() as u8,
            of.len(),
        ));
    }
    out
}

/// Runs every mode for every seed. Seed `s` builds the benchmark with
/// `data.seed + s` and trains with `trainer.seed + s`.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRun>, CmdError> {
    let benches: Vec<Benchmark> = cfg
        .seeds
        .iter()
        .map(|&s| {
            build_benchmark(
                &cfg.scene,
                (cfg.source_count, cfg.target_count),
                cfg.data_seed.wrapping_add(s),
            )
        })
        .collect::<busseg_core::Result<_>>()?;
    let jobs: Vec<(usize, Mode)> = (0..cfg.seeds.len())
        .flat_map(|i| Mode::ALL.map(|m| (i, m)))
        .collect();
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len());

    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<AblationRun, CmdError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let run = |(i, mode): (usize, Mode)| -> Result<AblationRun, CmdError> {
        let seed = cfg.seeds[i];
        let mut run_cfg = cfg.clone();
        run_cfg.trainer.mode = mode;
        run_cfg.trainer.seed = cfg.trainer.seed.wrapping_add(seed);
        run_cfg.data_seed = cfg.data_seed.wrapping_add(seed);
        let dir: PathBuf = out.join(format!("seed{seed}")).join(mode.name());
        let ck = train_on(&run_cfg, &benches[i], &dir)?;
        let report = evaluate_model(&ck, &benches[i])?;
        write_report(&report, &dir)?;
        eprintln!("seed {seed} {:<22} {}", mode.name(), report.summary_line());
        Ok(AblationRun { seed, mode, report })
    };
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let r = run(jobs[j]);
                *results[j].lock().expect("result slot") = Some(r);
            });
        }
    });
    let runs = results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;
    write_file(&out.join("runs.csv"), runs_csv(&runs))?;
    write_file(&out.join("ablation.csv"), summary_csv(&runs))?;
    write_file(&out.join("config.txt"), cfg.emit())?;
    Ok(runs)
}
