//! Experiment orchestration: the scenario matrix over datasets and seeds,
//! per-run artifacts, resumption and the aggregated report.
//!
//! Every run lives in `<out_dir>/runs/<dataset>/<scenario>/seed-<seed>/`
//! with the full [`RunConfig`] it was produced from (`config.json`), that
//! config's hash (`config.sha256`) and either `result.json` or `error.txt`.
//! A trained translator is cached under `<out_dir>/translators/` keyed by the
//! hash of its own inputs, so the `cyclegan` and `hgit` scenarios of one
//! dataset and seed share it.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{DatasetSpec, ExperimentConfig, PoisonConfig, Scenario, StyleSpec};
pub use report::{
    curation_montage_for, emit_plots, read_report_csv, CsvRow, Environment, ExperimentReport,
    FailedRun, ReportRow, ReportTable, RunArtifacts,
};

use crate::curation::{gate, CurationConfig, CurationReport};
use crate::error::{Error, Result};
use crate::imagecore::{write_split, DatasetSplit, GrayImage};
use crate::metrics::{confusion_all, RunResult};
use crate::segmodel::{predict, train_segmenter, SegTrainConfig};
use crate::synthgen::{generate_domain_pair, DomainPair};
use crate::translate::{
    apply_translator, fda_split, hist_match_split, train_translator, TranslationConfig,
    TranslatorModel,
};
use crate::util;

/// Everything that determines one run. Only the parts a scenario uses are set,
/// so runs of one cell differ in `seed` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub translation: Option<TranslationConfig>,
    pub curation: Option<CurationConfig>,
    pub segmentation: SegTrainConfig,
    pub poison: Option<PoisonConfig>,
    pub version: String,
}

impl RunConfig {
    pub fn new(
        scenario: Scenario,
        dataset: &DatasetSpec,
        cfg: &ExperimentConfig,
        seed: u64,
    ) -> Self {
        let translation = scenario.backend().map(|backend| TranslationConfig {
            backend,
            seed,
            ..cfg.translation.clone()
        });
        Self {
            scenario,
            dataset: dataset.clone(),
            seed,
            translation,
            curation: (scenario == Scenario::Hgit).then(|| cfg.curation.clone()),
            segmentation: SegTrainConfig {
                seed,
                ..cfg.segmentation.clone()
            },
            poison: if scenario.is_gan() {
                cfg.poison.clone()
            } else {
                None
            },
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn hash(&self) -> String {
        util::hash_json(self)
    }
}

/// `result.json` of a completed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub result: RunResult,
    pub train_count: usize,
    pub test_ids: Vec<String>,
    pub segmenter: PathBuf,
    pub translator: Option<PathBuf>,
    pub curation: Option<PathBuf>,
    pub threshold: f64,
}

pub fn run_dir(out_dir: &Path, dataset: &str, scenario: Scenario, seed: u64) -> PathBuf {
    out_dir
        .join("runs")
        .join(dataset)
        .join(scenario.as_str())
        .join(format!("seed-{seed}"))
}

/// Reads a run's `config.json` and checks it against the stored hash.
pub fn reconstruct_run_config(dir: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = util::read_json(&dir.join("config.json"))?;
    let stored = fs::read_to_string(dir.join("config.sha256"))
        .map_err(|e| Error::io(dir.join("config.sha256"), e))?;
    if cfg.hash() != stored.trim() {
        return Err(Error::Config(format!(
            "{}: config does not match its hash",
            dir.display()
        )));
    }
    Ok(cfg)
}

/// Degenerate images for stress-testing the gate: constant-intensity images
/// (paired with unrelated masks) and copies whose foreground is pushed to
/// near saturation. Drawn from the first images of `template`, which must
/// carry masks.
pub fn poison_set(template: &DatasetSplit, cfg: &PoisonConfig) -> Result<DatasetSplit> {
    let Some(masks) = template.masks() else {
        return Err(Error::arg("poison template needs masks"));
    };
    if template.is_empty() {
        return Err(Error::arg("poison template is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (template.images()[0].width(), template.images()[0].height());
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut out_masks = Vec::new();
    for k in 0..cfg.constant {
        let level = rng.random_range(0.05f32..0.95);
        ids.push(format!("poison-constant-{k}"));
        images.push(GrayImage::constant(w, h, level)?);
        out_masks.push(masks[rng.random_range(0..masks.len())].clone());
    }
    for k in 0..cfg.brightened {
        let i = k % template.len();
        let (img, mask) = (&template.images()[i], &masks[i]);
        let px = img
            .pixels()
            .iter()
            .zip(mask.labels())
            .map(|(&v, &l)| {
                if l == 1 {
                    (v + cfg.brighten_by).min(1.0)
                } else {
                    v
                }
            })
            .collect();
        ids.push(format!("poison-bright-{k}"));
        images.push(GrayImage::new(img.width(), img.height(), px)?);
        out_masks.push(mask.clone());
    }
    DatasetSplit::new(template.role(), ids, images, Some(out_masks))
}

/// Trains (or loads from the cache) the translator for one dataset and seed.
fn translator_for(
    pair: &DomainPair,
    run: &RunConfig,
    out_dir: &Path,
) -> Result<(TranslatorModel, PathBuf)> {
    let tcfg = run
        .translation
        .as_ref()
        .expect("GAN scenarios carry a translation config");
    let key = util::hash_json(&(&run.dataset, tcfg));
    let dir = out_dir
        .join("translators")
        .join(&run.dataset.name)
        .join(format!("seed-{}", run.seed));
    let path = dir.join(format!("{}.bin", &key[..16]));
    if path.exists() {
        return Ok((TranslatorModel::load(&path)?, path));
    }
    let model = train_translator(&pair.source_train, &pair.target_train, tcfg)?;
    // write then rename so a concurrent or interrupted run never sees half a file
    let tmp = dir.join(format!("{}.tmp", &key[..16]));
    model.save(&tmp)?;
    util::write_json(
        &dir.join(format!("{}.json", &key[..16])),
        &(&run.dataset, tcfg, &model.training_log),
    )?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok((model, path))
}

/// Runs one scenario on one dataset with one seed and writes its artifacts.
pub fn run_scenario(
    scenario: Scenario,
    pair: &DomainPair,
    run: &RunConfig,
    out_dir: &Path,
) -> Result<RunRecord> {
    let start = Instant::now();
    let dir = run_dir(out_dir, &run.dataset.name, scenario, run.seed);
    util::create_dir(&dir)?;
    let hash = run.hash();
    util::write_json(&dir.join("config.json"), run)?;
    util::write_text(&dir.join("config.sha256"), &format!("{hash}\n"))?;
    let _ = fs::remove_file(dir.join("error.txt"));

    let mut translator = None;
    let mut curation_path = None;
    let train: DatasetSplit = match scenario {
        Scenario::SourceOnly => pair.source_train.clone(),
        Scenario::Supervised => pair.target_train_labeled()?,
        Scenario::HistMatch => hist_match_split(&pair.source_train, &pair.target_train)?,
        Scenario::Fda => {
            let beta = run
                .translation
                .as_ref()
                .and_then(|t| t.fda_beta)
                .unwrap_or(0.05);
            fda_split(&pair.source_train, &pair.target_train, beta, run.seed)?
        }
        Scenario::Cyclegan | Scenario::Hgit => {
            let (model, path) = translator_for(pair, run, out_dir)?;
            translator = Some(path);
            let mut transformed = apply_translator(&pair.source_train, &model)?;
            if let Some(p) = &run.poison {
                transformed = transformed.concat(&poison_set(&transformed, p)?)?;
            }
            if scenario == Scenario::Hgit {
                let ccfg = run
                    .curation
                    .as_ref()
                    .expect("hgit carries a curation config");
                let (kept, report): (DatasetSplit, CurationReport) =
                    gate(&transformed, &pair.target_train, ccfg)?;
                write_split(&transformed, &dir.join("inspected"), "manifest.json", true)?;
                report.write_json(&dir.join("curation_report.json"))?;
                report.write_csv(&dir.join("curation_report.csv"))?;
                curation_path = Some(dir.join("curation_report.json"));
                kept
            } else {
                transformed
            }
        }
    };
    util::write_json(
        &dir.join("train_manifest.json"),
        &serde_json::json!({ "role": train.role(), "ids": train.ids() }),
    )?;

    let model = train_segmenter(&train, &run.segmentation)?;
    let seg_path = dir.join("segmenter.bin");
    model.save(&seg_path)?;
    let threshold = run.segmentation.threshold;
    let preds = predict(&pair.target_test, &model, threshold)?;
    let truth = pair
        .target_test
        .masks()
        .ok_or_else(|| Error::arg("target-test split has no masks to evaluate against"))?;
    let counts = confusion_all(&preds, truth)?;
    let result = RunResult::from_counts(
        scenario.as_str(),
        &run.dataset.name,
        run.seed,
        counts,
        start.elapsed().as_secs_f64(),
    )?;
    let record = RunRecord {
        config_hash: hash,
        result,
        train_count: train.len(),
        test_ids: pair.target_test.ids().to_vec(),
        segmenter: seg_path,
        translator,
        curation: curation_path,
        threshold,
    };
    util::write_json(&dir.join("result.json"), &record)?;
    Ok(record)
}

/// Loads a finished run when its stored config hash matches `hash`.
fn completed_run(dir: &Path, hash: &str) -> Option<RunRecord> {
    let record: RunRecord = util::read_json(&dir.join("result.json")).ok()?;
    (record.config_hash == hash).then_some(record)
}

#[derive(Clone, Copy, Debug)]
pub struct MatrixOptions {
    /// Skip runs whose `result.json` matches the current config hash.
    pub resume: bool,
    /// Worker threads; each takes whole (dataset, seed) units.
    pub jobs: usize,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self {
            resume: false,
            jobs: 1,
        }
    }
}

fn dataset_pair(spec: &DatasetSpec, out_dir: &Path) -> Result<DomainPair> {
    let pair = generate_domain_pair(
        &spec.source_style.resolve()?,
        &spec.target_style.resolve()?,
        spec.n_train,
        spec.n_test,
        &spec.layout(),
    )?;
    let dir = out_dir.join("data").join(&spec.name);
    let stamp = dir.join("dataset.sha256");
    let hash = util::hash_json(spec);
    if fs::read_to_string(&stamp)
        .map(|s| s.trim() != hash)
        .unwrap_or(true)
    {
        crate::imagecore::remove_dir_if_exists(&dir)?;
        pair.write(&dir)?;
        util::write_json(&dir.join("dataset.json"), spec)?;
        util::write_text(&stamp, &format!("{hash}\n"))?;
    }
    Ok(pair)
}

type Outcome = (usize, Scenario, u64, Result<RunRecord>);

/// Runs every scenario x dataset x seed, then aggregates and writes
/// `report.json`, `report.csv` and `plots/`. A failing run is recorded and
/// the rest of the matrix continues.
pub fn run_matrix(cfg: &ExperimentConfig, opts: MatrixOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    util::create_dir(&cfg.out_dir)?;
    util::write_json(&cfg.out_dir.join("experiment.json"), cfg)?;

    let pairs = cfg
        .datasets
        .iter()
        .map(|d| {
            dataset_pair(d, &cfg.out_dir).map_err(|e| e.context(format!("dataset {}", d.name)))
        })
        .collect::<Result<Vec<_>>>()?;

    let units: Vec<(usize, u64)> = (0..cfg.datasets.len())
        .flat_map(|d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Outcome>> = Mutex::new(Vec::new());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(d, seed)) = units.get(i) else {
            break;
        };
        let spec = &cfg.datasets[d];
        for &scenario in &cfg.scenarios {
            let run = RunConfig::new(scenario, spec, cfg, seed);
            let dir = run_dir(&cfg.out_dir, &spec.name, scenario, seed);
            let outcome = match opts
                .resume
                .then(|| completed_run(&dir, &run.hash()))
                .flatten()
            {
                Some(record) => Ok(record),
                None => run_scenario(scenario, &pairs[d], &run, &cfg.out_dir).map_err(|e| {
                    let e = e.context(format!(
                        "{} on {} (seed {seed})",
                        scenario.as_str(),
                        spec.name
                    ));
                    let _ = util::write_text(&dir.join("error.txt"), &format!("{e}\n"));
                    e
                }),
            };
            outcomes
                .lock()
                .expect("no worker panics while holding the lock")
                .push((d, scenario, seed, outcome));
        }
    };
    let jobs = opts.jobs.clamp(1, units.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }

    let mut outcomes = outcomes.into_inner().expect("workers finished");
    // deterministic order regardless of scheduling
    outcomes.sort_by_key(|(d, sc, seed, _)| (*d, *sc, *seed));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (d, scenario, seed, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(FailedRun {
                scenario,
                dataset: cfg.datasets[d].name.clone(),
                seed,
                error: e.to_string(),
            }),
        }
    }
    let report =
        ExperimentReport::build(cfg, &records, failures, jobs, start.elapsed().as_secs_f64())?;
    report.write(&cfg.out_dir)?;
    emit_plots(&report, &cfg.out_dir.join("plots"))?;
    Ok(report)
}
