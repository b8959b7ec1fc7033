use std::fs;
use std::path::Path;

use semcons_cli::config::{ExperimentConfig, Precision};
use semcons_cli::experiment::{ablate, ensure_dataset, eval, infer, train, FINAL_CHECKPOINT, LOSS_LOG};

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        train_images: 4,
        eval_images: 2,
        widths: vec![4, 4],
        res_blocks: 1,
        embed_dim: 8,
        disc_width: 2,
        attention_hidden: 2,
        patch_count: 16,
        global_h: 8,
        global_w: 8,
        local_h: 8,
        local_w: 8,
        infer_stride: 4,
        steps: 6,
        checkpoint_every: 3,
        precision: Precision::F64,
        ablate_lambda_ts: vec![0.0],
        ablate_seeds: vec![3],
        ..ExperimentConfig::default()
    }
}

/// Loss log rows without the wall-time column.
fn losses(run: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(run.join(LOSS_LOG)).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            rec.iter().take(rec.len() - 1).map(str::to_string).collect()
        })
        .collect()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tiny();
    ensure_dataset(&cfg.dataset(), &data).unwrap();

    let full = tmp.path().join("full");
    train(&cfg, &data, &full, None).unwrap();
    let rows = losses(&full);
    assert_eq!(rows.len(), 6);
    assert!(full.join("checkpoints/step_000003.ckpt").exists());
    assert!(full.join(FINAL_CHECKPOINT).exists());
    assert_eq!(ExperimentConfig::load(&full.join("config.toml")).unwrap(), cfg);

    // stop after three steps, then resume from that checkpoint
    let part = tmp.path().join("part");
    train(&ExperimentConfig { steps: 3, ..cfg.clone() }, &data, &part, None).unwrap();
    assert_eq!(losses(&part), rows[..3]);
    train(&cfg, &data, &part, Some(&part.join("checkpoints/step_000003.ckpt"))).unwrap();
    assert_eq!(losses(&part), rows);
    assert_eq!(fs::read(part.join(FINAL_CHECKPOINT)).unwrap(), fs::read(full.join(FINAL_CHECKPOINT)).unwrap());
}

#[test]
fn infer_and_eval_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tiny();
    ensure_dataset(&cfg.dataset(), &data).unwrap();
    let run = tmp.path().join("run");
    let done = train(&cfg, &data, &run, None).unwrap();
    let translated = tmp.path().join("translated");
    let written = infer(&cfg, &done.final_checkpoint, &data.join("eval/images"), &translated).unwrap();
    assert_eq!(written.len(), 2);
    let again = tmp.path().join("again");
    infer(&cfg, &done.final_checkpoint, &data.join("eval/images"), &again).unwrap();
    for w in &written {
        let name = w.file_name().unwrap();
        assert_eq!(fs::read(w).unwrap(), fs::read(again.join(name)).unwrap());
    }

    let report = eval(&cfg, &translated, &data.join("eval"), &tmp.path().join("eval")).unwrap();
    for name in ["rmse", "delta_5", "delta_10", "pixel_acc", "class_acc", "mean_iou", "histogram_target", "histogram_source"] {
        assert!(report.get(name).is_some(), "{name}");
    }
    let csv = fs::read_to_string(tmp.path().join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    assert!(tmp.path().join("eval/metrics.json").exists());

    // references scored against themselves
    let perfect = eval(&cfg, &data.join("eval/images"), &data.join("eval"), &tmp.path().join("self")).unwrap();
    assert_eq!(perfect.get("rmse"), Some(0.0));
    assert_eq!(perfect.get("delta_5"), Some(1.0));
}

#[test]
fn single_run_ablation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tiny();
    let a = ablate(&cfg, &data, &tmp.path().join("a")).unwrap();
    let b = ablate(&cfg, &data, &tmp.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.runs.len(), a.means.len()), (1, 1));
    let csv = fs::read_to_string(tmp.path().join("a/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(tmp.path().join("a/ablation.md")).unwrap().contains("pixel acc"));
}

#[test]
fn f32_runs_train() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = ExperimentConfig {
        precision: Precision::F32,
        ..tiny()
    };
    ensure_dataset(&cfg.dataset(), &data).unwrap();
    let done = train(&cfg, &data, &tmp.path().join("run"), None).unwrap();
    assert_eq!(done.last.unwrap().step, 5);
}

#[test]
fn total_generator_loss_falls_over_200_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        image_size: 32,
        train_images: 8,
        eval_images: 1,
        widths: vec![8, 16],
        global_h: 16,
        global_w: 16,
        local_h: 16,
        local_w: 16,
        infer_stride: 8,
        steps: 200,
        checkpoint_every: 200,
        ..ExperimentConfig::default()
    };
    let data = tmp.path().join("data");
    ensure_dataset(&cfg.dataset(), &data).unwrap();
    let total = |rows: &[Vec<String>], i: usize| rows[i][10].parse::<f64>().unwrap();
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..3 {
        let run = tmp.path().join(format!("s{seed}"));
        train(&ExperimentConfig { seed, ..cfg.clone() }, &data, &run, None).unwrap();
        let rows = losses(&run);
        assert_eq!(rows.len(), 200);
        first += total(&rows, 0) / 3.0;
        last += total(&rows, 199) / 3.0;
    }
    assert!(last < first, "step 200 {last} vs step 1 {first}");
}
