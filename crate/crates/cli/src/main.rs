//! `hgit`: command-line access to each pipeline stage and to the full
//! experiment matrix.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hgit::curation::{gate, CurationConfig};
use hgit::harness::{run_matrix, ExperimentConfig, MatrixOptions};
use hgit::imagecore::{load_split, write_split, DatasetSplit};
use hgit::metrics::{confusion_all, RunResult};
use hgit::segmodel::{predict, train_segmenter, SegTrainConfig, SegmenterModel, UnetArch};
use hgit::synthgen::{generate_domain_pair, DomainStyle, LayoutSpec};
use hgit::translate::{translate_split, Backend, TranslationConfig};
use hgit::util::write_json;

#[derive(Parser)]
#[command(
    name = "hgit",
    version,
    about = "Histogram-gated image translation for segmentation domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Cyclegan,
    HistMatch,
    Fda,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Cyclegan => Backend::Cyclegan,
            BackendArg::HistMatch => Backend::HistMatch,
            BackendArg::Fda => Backend::Fda,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target domain pair.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Target style preset.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value = "source")]
        source_preset: String,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Translate a labeled source split toward an unlabeled target split.
    Translate {
        #[arg(long, value_enum)]
        backend: BackendArg,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda_cyc: Option<f64>,
        #[arg(long)]
        lambda_identity: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to save the trained translator (cyclegan only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Keep the translated images whose histograms best match the target.
    Gate {
        #[arg(long)]
        transformed: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 70.0)]
        keep_percent: f64,
        #[arg(long)]
        effective_n: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmenter on a labeled split.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Annotate a split with a trained segmenter.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Directory written by `predict`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "unspecified")]
        scenario: String,
        #[arg(long, default_value = "unspecified")]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every scenario x dataset x seed of an experiment config.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        /// Skip runs already completed with the same config.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a preset experiment config to edit or run.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetArg,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        path: PathBuf,
    },
}

fn load(path: &Path) -> Result<DatasetSplit> {
    load_split(path).with_context(|| format!("loading split {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            preset,
            source_preset,
            n_train,
            n_test,
            size,
            seed,
        } => {
            let src = DomainStyle::preset(&source_preset)?;
            let tgt = DomainStyle::preset(&preset)?;
            let pair = generate_domain_pair(
                &src,
                &tgt,
                n_train,
                n_test,
                &LayoutSpec::for_size(size, seed),
            )?;
            let paths = pair.write(&out)?;
            println!("source-train  {}", paths.source_train.display());
            println!("source-test   {}", paths.source_test.display());
            println!("target-train  {}", paths.target_train.display());
            println!("target-test   {}", paths.target_test.display());
        }
        Command::Translate {
            backend,
            source,
            target,
            out,
            epochs,
            lambda_cyc,
            lambda_identity,
            beta,
            seed,
            checkpoint,
        } => {
            let d = TranslationConfig::default();
            let cfg = TranslationConfig {
                backend: backend.into(),
                epochs: epochs.unwrap_or(d.epochs),
                lambda_cyc: lambda_cyc.unwrap_or(d.lambda_cyc),
                lambda_identity: lambda_identity.unwrap_or(d.lambda_identity),
                fda_beta: beta.or(d.fda_beta),
                seed,
                ..d
            };
            let t = translate_split(&load(&source)?, &load(&target)?, &cfg)?;
            let manifest = write_split(&t.transformed, &out, "manifest.json", true)?;
            write_json(&out.join("translation.json"), &cfg)?;
            match (t.model, checkpoint) {
                (Some(model), Some(path)) => {
                    model.save(&path)?;
                    println!("checkpoint {}", path.display());
                }
                (None, Some(_)) => bail!("--checkpoint only applies to the cyclegan backend"),
                _ => {}
            }
            println!("{}", manifest.display());
        }
        Command::Gate {
            transformed,
            target,
            keep_percent,
            effective_n,
            out,
        } => {
            let cfg = CurationConfig {
                keep_percent,
                effective_n,
            };
            let (kept, report) = gate(&load(&transformed)?, &load(&target)?, &cfg)?;
            let manifest = write_split(&kept, &out, "manifest.json", true)?;
            report.write_json(&out.join("curation_report.json"))?;
            report.write_csv(&out.join("curation_report.csv"))?;
            println!(
                "kept {} of {}: {}",
                kept.len(),
                report.records.len(),
                manifest.display()
            );
        }
        Command::TrainSeg {
            data,
            out,
            epochs,
            lr,
            batch_size,
            width,
            seed,
        } => {
            let d = SegTrainConfig::default();
            let cfg = SegTrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                learning_rate: lr.unwrap_or(d.learning_rate),
                batch_size: batch_size.unwrap_or(d.batch_size),
                arch: width.map_or(d.arch, |base_channels| UnetArch { base_channels }),
                seed,
                ..d
            };
            let model = train_segmenter(&load(&data)?, &cfg)?;
            for e in &model.training_log {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  train SA {:.4}",
                    e.epoch, e.loss, e.train_sa
                );
            }
            model.save(&out)?;
            println!("{}", out.display());
        }
        Command::Predict {
            data,
            model,
            out,
            threshold,
        } => {
            let split = load(&data)?;
            let model = SegmenterModel::load(&model)?;
            let masks = predict(&split, &model, threshold)?;
            let labeled = DatasetSplit::new(
                split.role(),
                split.ids().to_vec(),
                split.images().to_vec(),
                Some(masks),
            )?;
            println!(
                "{}",
                write_split(&labeled, &out, "manifest.json", true)?.display()
            );
        }
        Command::Eval {
            pred,
            truth,
            out,
            scenario,
            dataset,
            seed,
        } => {
            let pred = load(&pred.join("manifest.json"))?;
            let truth = load(&truth)?;
            if pred.ids() != truth.ids() {
                bail!("prediction and truth manifests list different ids");
            }
            let (Some(p), Some(t)) = (pred.masks(), truth.masks()) else {
                bail!("both prediction and truth need masks");
            };
            let result =
                RunResult::from_counts(&scenario, &dataset, seed, confusion_all(p, t)?, 0.0)?;
            write_json(&out, &result)?;
            println!("SA {:.4}  IoU {:.4}", result.sa, result.iou);
        }
        Command::RunExperiment {
            config,
            resume,
            jobs,
        } => {
            let cfg: ExperimentConfig = hgit::util::read_json(&config)?;
            let report = run_matrix(&cfg, MatrixOptions { resume, jobs })?;
            print!("{}", report.table.to_csv()?);
            for f in &report.failures {
                eprintln!(
                    "FAILED {} / {} / seed {}: {}",
                    f.scenario, f.dataset, f.seed, f.error
                );
            }
            eprintln!(
                "report written to {}",
                cfg.out_dir.join("report.json").display()
            );
            if !report.failures.is_empty() {
                bail!("{} run(s) failed", report.failures.len());
            }
        }
        Command::InitConfig {
            preset,
            out_dir,
            path,
        } => {
            let cfg = match preset {
                PresetArg::Desk => ExperimentConfig::desk(out_dir),
                PresetArg::Full => ExperimentConfig::full(out_dir),
            };
            write_json(&path, &cfg)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
