//! Train, predict, evaluate: one run per (config, seed), and the tandem
//! switch ablation over several seeds.

use std::path::{Path, PathBuf};

use bea_core::detector::{
    generate_dataset, predict, save_checkpoint, train, Detector, HeadSelection, History,
    ImageResult, Sample,
};
use bea_core::metrics::{mean_ap, ImageGroundTruth};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Split};
use crate::dump::{dump_detections, load_detections, ImageRecord};
use crate::error::{io_err, HarnessError, Result};
use crate::evaluate::{evaluate, predictions, EvalInputs, Evaluation, MetricsRow};
use crate::plots;
use crate::report::{read_history, write_history, write_metrics};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const HEADS_FILE: &str = "heads.json";

pub fn dump_file(split: Split) -> String {
    format!("detections_{}.jsonl", split.name())
}

/// AP50 of each head used on its own, next to the aggregated output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub aggregated_ap50: f64,
    pub head_ap50: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub evaluation: Evaluation,
    pub heads: HeadAccuracy,
    pub history: History,
}

impl RunArtifacts {
    pub fn row(&self) -> &MetricsRow {
        &self.evaluation.row
    }
}

/// Creates `dir` and proves a file can be written there.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    let probe = dir.join(".write-probe");
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&probe, b""))
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|source| HarnessError::Unwritable {
            path: dir.to_path_buf(),
            source,
        })
}

pub fn dataset(cfg: &ExperimentConfig, seed: u64, split: Split) -> Vec<Sample> {
    let n = match split {
        Split::Train => cfg.data.n_train,
        Split::Test => cfg.data.n_test,
        Split::NearOod | Split::FarOod => cfg.n_ood(),
    };
    generate_dataset(
        &cfg.scene_for(split),
        n,
        ExperimentConfig::split_seed(seed, split),
    )
}

pub fn ground_truth(samples: &[Sample]) -> Vec<ImageGroundTruth> {
    samples
        .iter()
        .map(|s| ImageGroundTruth {
            image_id: s.image_id.clone(),
            objects: s.objects.clone(),
        })
        .collect()
}

fn records(results: &[ImageResult]) -> Vec<ImageRecord> {
    results.iter().map(ImageRecord::from).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Config with the run seed baked in, as stored next to the outputs.
pub fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c.seeds = vec![seed];
    c
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    let cfg = seeded(cfg, seed);
    let run_dir = cfg.run_dir(seed);
    ensure_writable(&run_dir)?;
    let config_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;

    let train_set = dataset(&cfg, seed, Split::Train);
    let mut tc = cfg.train.clone();
    tc.diagnostics_dir = Some(run_dir.clone());
    log::info!(
        "{} seed {seed}: training on {} images",
        cfg.config_id,
        train_set.len()
    );
    let trained = train(Detector::new(cfg.model.clone(), seed)?, &train_set, &tc)?;
    drop(train_set);
    let model = trained.model;
    write_history(&run_dir.join(HISTORY_FILE), &trained.history)?;
    let extra = serde_json::json!({ "config_id": cfg.config_id, "seed": seed });
    save_checkpoint(&run_dir.join(CHECKPOINT_FILE), &model, &extra)?;

    let e = &cfg.eval;
    let run = |samples: &[Sample], sel| {
        predict(
            &model,
            samples,
            sel,
            e.conf_floor,
            e.nms_thresh,
            e.batch_size,
        )
    };
    let test = dataset(&cfg, seed, Split::Test);
    let gts = ground_truth(&test);
    let test_rec = records(&run(&test, HeadSelection::Aggregate)?);
    let near_rec = records(&run(
        &dataset(&cfg, seed, Split::NearOod),
        HeadSelection::Aggregate,
    )?);
    let far_rec = records(&run(
        &dataset(&cfg, seed, Split::FarOod),
        HeadSelection::Aggregate,
    )?);
    for (split, recs) in [
        (Split::Test, &test_rec),
        (Split::NearOod, &near_rec),
        (Split::FarOod, &far_rec),
    ] {
        dump_detections(&run_dir.join(dump_file(split)), recs)?;
    }

    let k = cfg.model.grid.k;
    let mut head_ap50 = Vec::new();
    for h in 0..model.heads.len() {
        let recs = records(&run(&test, HeadSelection::Head(h))?);
        head_ap50.push(mean_ap(&predictions(&recs), &gts, k, &[0.5]).ap50);
    }
    let evaluation = finish_evaluation(&cfg, seed, &run_dir, &test_rec, &gts, &near_rec, &far_rec)?;
    let heads = HeadAccuracy {
        aggregated_ap50: evaluation.row.ap50_raw,
        head_ap50,
    };
    write_json(&run_dir.join(HEADS_FILE), &heads)?;
    plot_run(&run_dir, &cfg.config_id, &evaluation, &trained.history)?;
    Ok(RunArtifacts {
        run_dir,
        evaluation,
        heads,
        history: trained.history,
    })
}

fn finish_evaluation(
    cfg: &ExperimentConfig,
    seed: u64,
    run_dir: &Path,
    test: &[ImageRecord],
    gts: &[ImageGroundTruth],
    near: &[ImageRecord],
    far: &[ImageRecord],
) -> Result<Evaluation> {
    let evaluation = evaluate(
        &EvalInputs {
            config_id: &cfg.config_id,
            seed,
            num_classes: cfg.model.grid.k,
            test,
            ground_truth: gts,
            near_ood: near,
            far_ood: far,
        },
        &cfg.eval,
    )?;
    write_metrics(
        &run_dir.join(METRICS_FILE),
        std::slice::from_ref(&evaluation.row),
    )?;
    write_json(&run_dir.join(EVALUATION_FILE), &evaluation)?;
    Ok(evaluation)
}

fn plot_run(run_dir: &Path, label: &str, ev: &Evaluation, history: &History) -> Result<()> {
    plots::plot_retention(
        &run_dir.join("retention.svg"),
        &[(label.to_string(), &ev.retention)],
    )?;
    plots::plot_roc(
        &run_dir.join("roc_near.svg"),
        "near-OOD ROC",
        &[(label.to_string(), &ev.roc_near)],
    )?;
    plots::plot_roc(
        &run_dir.join("roc_far.svg"),
        "far-OOD ROC",
        &[(label.to_string(), &ev.roc_far)],
    )?;
    plots::plot_monitors(run_dir, "", &[(label.to_string(), history)])?;
    Ok(())
}

/// Recomputes a run's metrics from its detection dumps; ground truth is
/// regenerated from the config and seed.
pub fn eval_from_dumps(cfg: &ExperimentConfig, seed: u64) -> Result<Evaluation> {
    let cfg = seeded(cfg, seed);
    let run_dir = cfg.run_dir(seed);
    let load = |split| load_detections(&run_dir.join(dump_file(split)));
    let (test, near, far) = (
        load(Split::Test)?,
        load(Split::NearOod)?,
        load(Split::FarOod)?,
    );
    let gts = ground_truth(&dataset(&cfg, seed, Split::Test));
    let evaluation = finish_evaluation(&cfg, seed, &run_dir, &test, &gts, &near, &far)?;
    let history_path = run_dir.join(HISTORY_FILE);
    if history_path.exists() {
        plot_run(
            &run_dir,
            &cfg.config_id,
            &evaluation,
            &read_history(&history_path)?,
        )?;
    }
    Ok(evaluation)
}

pub fn load_heads(run_dir: &Path) -> Result<HeadAccuracy> {
    read_json(&run_dir.join(HEADS_FILE))
}

pub fn load_evaluation(run_dir: &Path) -> Result<Evaluation> {
    read_json(&run_dir.join(EVALUATION_FILE))
}

/// The four tandem switch settings: neither, aiding only, quelling only, both.
pub const SWITCH_GRID: [(bool, bool); 4] =
    [(false, false), (true, false), (false, true), (true, true)];

pub const ABLATION_FILE: &str = "ablation_metrics.csv";

/// Runs every switch setting for every seed and merges the metric rows into
/// `<output_dir>/ablation_metrics.csv`.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<RunArtifacts>> {
    ensure_writable(&cfg.output_dir)?;
    let mut runs = Vec::new();
    for (ta, tq) in SWITCH_GRID {
        let c = cfg.with_switches(ta, tq);
        for &seed in &cfg.seeds {
            runs.push(run_experiment(&c, seed)?);
        }
    }
    let rows: Vec<MetricsRow> = runs.iter().map(|r| r.row().clone()).collect();
    crate::report::upsert_metrics(&cfg.output_dir.join(ABLATION_FILE), &rows)?;
    Ok(runs)
}
