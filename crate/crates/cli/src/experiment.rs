//! Training runs, inference, evaluation and the lambda_ts sweep.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::Rng;
use semcons::checkpoint::Checkpoint;
use semcons::metrics::{delta_accuracy, histogram_divergence, rmse, to_8bit_scale, write_csv, MetricReport};
use semcons::model::{step_rng, stream, BranchMask, LossReport, TrainState};
use semcons::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Precision};
use crate::data::{self, classify, Dataset, DatasetSpec, Manifest};

pub const LOSS_LOG: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ARCHIVED_CONFIG: &str = "config.toml";

/// Generates the dataset unless a manifest is already present.
pub fn ensure_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    if dir.join("manifest.json").exists() {
        return Ok(Manifest::load(dir)?);
    }
    data::generate(spec, dir).with_context(|| format!("generating dataset in {}", dir.display()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub last: Option<LossReport>,
}

/// Trains for `cfg.steps` steps, resuming from `resume` when given.
pub fn train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, data_dir, out, resume),
        Precision::F64 => train_as::<f64>(cfg, data_dir, out, resume),
    }
}

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

fn train_as<S: Scalar>(cfg: &ExperimentConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    cfg.save(&out.join(ARCHIVED_CONFIG))?;

    let dataset = Dataset::load(data_dir)?;
    let source: Vec<Tensor<S>> = dataset.source.iter().map(Tensor::cast).collect();
    let target: Vec<Tensor<S>> = dataset.target.iter().map(Tensor::cast).collect();

    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            TrainState::<S>::from_checkpoint(cfg.train(), &ckpt)?
        }
        None => TrainState::<S>::new(cfg.train(), cfg.seed)?,
    };

    let log_path = out.join(LOSS_LOG);
    let mut log = open_log(&log_path, state.step)?;
    let started = Instant::now();
    let mut last = None;
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = step_rng(state.seed, step, stream::DATA);
        let (si, ti) = (rng.gen_range(0..source.len()), rng.gen_range(0..target.len()));
        let report = state.training_step(&source[si], &target[ti], BranchMask::BOTH)?;
        let mut row: Vec<String> = report.values().iter().map(|v| v.to_string()).collect();
        row[0] = report.step.to_string();
        row.push(format!("{:.3}", started.elapsed().as_secs_f64()));
        log.write_record(&row)?;
        last = Some(report);
        if state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            log.flush()?;
            state.to_checkpoint()?.save(&ckpt_dir.join(checkpoint_name(state.step)))?;
        }
    }
    log.flush()?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    let ckpt = state.to_checkpoint()?;
    ckpt.save(&ckpt_dir.join(checkpoint_name(state.step)))?;
    ckpt.save(&final_checkpoint)?;
    Ok(TrainOutcome { final_checkpoint, last })
}

/// Opens the loss log for appending, keeping only rows of steps before
/// `from_step` so a resumed run continues an unbroken log.
fn open_log(path: &Path, from_step: u64) -> Result<csv::Writer<fs::File>> {
    let mut kept = Vec::new();
    if from_step > 0 && path.exists() {
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let step: u64 = rec.get(0).unwrap_or_default().parse().context("malformed loss log")?;
            if step < from_step {
                kept.push(rec);
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = LossReport::COLUMNS.to_vec();
    header.push("wall_time");
    w.write_record(&header)?;
    for rec in &kept {
        w.write_record(rec)?;
    }
    Ok(w)
}

pub fn load_state(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<TrainState<f64>> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(TrainState::from_checkpoint(cfg.train(), &ckpt)?)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Translates every PNG of `input` into `out` under the same file name.
pub fn infer(cfg: &ExperimentConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let state = load_state(cfg, checkpoint)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    for path in png_files(input)? {
        let image = data::load_image(&path)?;
        let translated = state
            .full_image_inference(&image)
            .with_context(|| format!("translating {}", path.display()))?;
        let dest = out.join(path.file_name().expect("listed files have names"));
        data::save_image(&translated, &dest)?;
        written.push(dest);
    }
    if written.is_empty() {
        bail!("no PNG images in {}", input.display());
    }
    Ok(written)
}

pub const DELTAS: [f64; 2] = [5.0, 10.0];

/// Scores every PNG of `pred` against the same-named reference image in
/// `truth/images` (or `truth`) and, when present, the label map in
/// `truth/labels`. Writes `metrics.csv` and `metrics.json` into `out` and
/// returns the mean report.
pub fn eval(cfg: &ExperimentConfig, pred: &Path, truth: &Path, out: &Path) -> Result<MetricReport> {
    let spec = cfg.dataset();
    let prototypes = spec.target_prototypes();
    let target_freq = [1.0 - spec.target_freq[0] - spec.target_freq[1], spec.target_freq[0], spec.target_freq[1]];
    let images_dir = if truth.join("images").is_dir() { truth.join("images") } else { truth.to_path_buf() };
    let labels_dir = truth.join("labels");

    let mut rows = Vec::new();
    for path in png_files(pred)? {
        let name = path.file_name().expect("listed files have names");
        let p = data::load_image(&path)?;
        let mut report = MetricReport::new();
        let count = p.len() / 3;
        let reference = images_dir.join(name);
        if reference.exists() {
            let g = data::load_image(&reference)?;
            let (p8, g8) = (to_8bit_scale(&p), to_8bit_scale(&g));
            report.push("rmse", rmse(&p8, &g8)?, count)?;
            report.push("delta_5", delta_accuracy(&p8, &g8, DELTAS[0])?, count)?;
            report.push("delta_10", delta_accuracy(&p8, &g8, DELTAS[1])?, count)?;
        }
        let labels = labels_dir.join(name);
        if labels.exists() {
            let truth = data::load_labels(&labels)?;
            let predicted = classify(&p, &prototypes)?;
            let seg = semcons::metrics::seg_metrics(&predicted, &truth)?;
            report.push("pixel_acc", seg.pixel_acc, count)?;
            report.push("class_acc", seg.class_acc, count)?;
            report.push("mean_iou", seg.mean_iou, count)?;
            report.push("histogram_target", histogram_divergence(&predicted, &target_freq)?, count)?;
            report.push("histogram_source", histogram_divergence(&predicted, &truth.frequencies())?, count)?;
        }
        if report.metrics.is_empty() {
            bail!("no reference image or label map for {}", path.display());
        }
        rows.push((name.to_string_lossy().into_owned(), report));
    }
    if rows.is_empty() {
        bail!("no PNG images in {}", pred.display());
    }
    let mean = mean_report(&rows)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(fs::File::create(out.join("metrics.csv"))?, &rows)?;
    let json = EvalFile {
        images: rows.iter().map(|(n, r)| ImageReport { image: n.clone(), report: r.clone() }).collect(),
        mean: mean.clone(),
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    Ok(mean)
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageReport {
    image: String,
    report: MetricReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalFile {
    images: Vec<ImageReport>,
    mean: MetricReport,
}

fn mean_report(rows: &[(String, MetricReport)]) -> Result<MetricReport> {
    let mut mean = MetricReport::new();
    let first = &rows[0].1;
    for m in &first.metrics {
        let vals: Vec<f64> = rows.iter().filter_map(|(_, r)| r.get(&m.name)).collect();
        let total: usize = rows
            .iter()
            .flat_map(|(_, r)| r.metrics.iter().filter(|x| x.name == m.name).map(|x| x.count))
            .sum();
        mean.push(m.name.clone(), vals.iter().sum::<f64>() / vals.len() as f64, total)?;
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda_ts: f64,
    pub seed: u64,
    pub pixel_acc: f64,
    pub class_acc: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRow>,
    /// Per lambda_ts value, averaged over seeds.
    pub means: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_for(&self, lambda_ts: f64) -> Option<&AblationRow> {
        self.means.iter().find(|r| r.lambda_ts == lambda_ts)
    }

    /// Metrics as rows and lambda_ts values as columns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| metric |");
        for m in &self.means {
            s.push_str(&format!(" lambda_ts = {} |", m.lambda_ts));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.means.len()));
        s.push('\n');
        let metrics: [(&str, fn(&AblationRow) -> f64); 3] = [
            ("pixel acc", |r| r.pixel_acc),
            ("class acc", |r| r.class_acc),
            ("mean IoU", |r| r.mean_iou),
        ];
        for (name, get) in metrics {
            s.push_str(&format!("| {name} |"));
            for m in &self.means {
                let seeds: Vec<String> = self
                    .runs
                    .iter()
                    .filter(|r| r.lambda_ts == m.lambda_ts)
                    .map(|r| format!("{:.3}", get(r)))
                    .collect();
                s.push_str(&format!(" {:.3} ({}) |", get(m), seeds.join(", ")));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains one run per `(lambda_ts, seed)`, translates the held-out source
/// images with each, and tabulates their semantic-consistency scores.
pub fn ablate(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<AblationTable> {
    ensure_dataset(&cfg.dataset(), data_dir)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join(ARCHIVED_CONFIG))?;
    let mut runs = Vec::new();
    for &lambda_ts in &cfg.ablate_lambda_ts {
        for &seed in &cfg.ablate_seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.lambda_ts = lambda_ts;
            run_cfg.seed = seed;
            let dir = out.join(format!("lambda_ts_{lambda_ts}_seed_{seed}"));
            let trained = train(&run_cfg, data_dir, &dir, None)?;
            let translated = dir.join("translated");
            infer(&run_cfg, &trained.final_checkpoint, &data_dir.join("eval/images"), &translated)?;
            let report = eval(&run_cfg, &translated, &data_dir.join("eval"), &dir.join("eval"))?;
            let get = |n: &str| report.get(n).with_context(|| format!("missing metric {n}"));
            runs.push(AblationRow {
                lambda_ts,
                seed,
                pixel_acc: get("pixel_acc")?,
                class_acc: get("class_acc")?,
                mean_iou: get("mean_iou")?,
            });
        }
    }
    let means = cfg
        .ablate_lambda_ts
        .iter()
        .map(|&l| {
            let rs: Vec<&AblationRow> = runs.iter().filter(|r| r.lambda_ts == l).collect();
            let avg = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            AblationRow {
                lambda_ts: l,
                seed: 0,
                pixel_acc: avg(|r| r.pixel_acc),
                class_acc: avg(|r| r.class_acc),
                mean_iou: avg(|r| r.mean_iou),
            }
        })
        .collect();
    let table = AblationTable { runs, means };
    write_ablation(&table, out)?;
    Ok(table)
}

fn write_ablation(table: &AblationTable, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record(["lambda_ts", "seed", "pixel_acc", "class_acc", "mean_iou"])?;
    for r in &table.runs {
        w.write_record([r.lambda_ts.to_string(), r.seed.to_string(), r.pixel_acc.to_string(), r.class_acc.to_string(), r.mean_iou.to_string()])?;
    }
    for r in &table.means {
        w.write_record([r.lambda_ts.to_string(), "mean".into(), r.pixel_acc.to_string(), r.class_acc.to_string(), r.mean_iou.to_string()])?;
    }
    w.flush()?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(table)? + "\n")?;
    let mut md = fs::File::create(out.join("ablation.md"))?;
    md.write_all(table.to_markdown().as_bytes())?;
    Ok(())
}
