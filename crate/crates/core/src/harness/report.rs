use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scenario};
use super::{run_dir, RunRecord};
use crate::curation::CurationReport;
use crate::error::{Error, Result};
use crate::imagecore::{compute_histogram, load_split};
use crate::metrics::{aggregate, CellMean, RunResult};
use crate::plot::{bar_chart, curation_montage, Canvas, MontageRow, Series, BLUE, ORANGE};
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: Scenario,
    /// Aligned with [`ReportTable::datasets`]; `None` when every run failed.
    pub cells: Vec<Option<CellMean>>,
    pub averaged: Option<CellMean>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub datasets: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn row(&self, scenario: Scenario) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["scenario".to_string()];
        for d in self.datasets.iter().map(String::as_str).chain(["averaged"]) {
            h.push(format!("{d}_sa"));
            h.push(format!("{d}_iou"));
        }
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::arg(format!("csv: {e}"));
        w.write_record(self.header()).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.scenario.as_str().to_string()];
            for cell in row.cells.iter().chain([&row.averaged]) {
                match cell {
                    Some(c) => rec.extend([format!("{:.6}", c.sa), format!("{:.6}", c.iou)]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::arg(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv of ascii fields"))
    }
}

/// One parsed `report.csv` row: scenario name and its cells, empty as `None`.
pub type CsvRow = (String, Vec<Option<f64>>);

/// Parsed `report.csv`: header plus one row per scenario.
pub fn read_report_csv(path: &Path) -> Result<(Vec<String>, Vec<CsvRow>)> {
    let bad = |e: csv::Error| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(bad)?;
        let mut fields = rec.iter();
        let scenario = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| {
                if f.is_empty() {
                    return Ok(None);
                }
                f.parse::<f64>().map(Some).map_err(|e| Error::Format {
                    path: path.to_owned(),
                    reason: format!("{f:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push((scenario, values));
    }
    Ok((header, rows))
}

/// Where one run's artifacts live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub scenario: Scenario,
    pub dataset: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub config_hash: String,
    pub segmenter: PathBuf,
    pub translator: Option<PathBuf>,
    pub curation: Option<PathBuf>,
    pub train_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub scenario: Scenario,
    pub dataset: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub os: String,
    pub arch: String,
    pub available_cpus: usize,
    pub jobs: usize,
    /// Wall time of the whole matrix, including resumed (skipped) runs.
    pub wall_time: f64,
    /// Sum of the per-run wall times as recorded by each run.
    pub run_time_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub table: ReportTable,
    pub runs: Vec<RunResult>,
    pub artifacts: Vec<RunArtifacts>,
    pub failures: Vec<FailedRun>,
    pub environment: Environment,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub(super) fn build(
        cfg: &ExperimentConfig,
        records: &[RunRecord],
        failures: Vec<FailedRun>,
        jobs: usize,
        wall_time: f64,
    ) -> Result<Self> {
        let runs: Vec<RunResult> = records.iter().map(|r| r.result.clone()).collect();
        let datasets: Vec<String> = cfg.datasets.iter().map(|d| d.name.clone()).collect();
        let mut scenarios = cfg.scenarios.clone();
        scenarios.sort();
        let agg = if runs.is_empty() {
            None
        } else {
            Some(aggregate(&runs)?)
        };
        let rows = scenarios
            .into_iter()
            .map(|sc| {
                let by_dataset = agg.as_ref().and_then(|a| a.cells.get(sc.as_str()));
                let cells: Vec<Option<CellMean>> = datasets
                    .iter()
                    .map(|d| by_dataset.and_then(|m| m.get(d)).cloned())
                    .collect();
                // only average rows that are complete, so columns stay comparable
                let averaged = if cells.iter().all(Option::is_some) {
                    agg.as_ref()
                        .and_then(|a| a.averaged.get(sc.as_str()))
                        .cloned()
                } else {
                    None
                };
                ReportRow {
                    scenario: sc,
                    cells,
                    averaged,
                }
            })
            .collect();
        let artifacts = records
            .iter()
            .map(|r| {
                let scenario = r.result.scenario.parse()?;
                Ok(RunArtifacts {
                    scenario,
                    dataset: r.result.dataset.clone(),
                    seed: r.result.seed,
                    dir: run_dir(&cfg.out_dir, &r.result.dataset, scenario, r.result.seed),
                    config_hash: r.config_hash.clone(),
                    segmenter: r.segmenter.clone(),
                    translator: r.translator.clone(),
                    curation: r.curation.clone(),
                    train_count: r.train_count,
                })
            })
            .collect::<Result<_>>()?;
        let environment = Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            available_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            jobs,
            wall_time,
            run_time_total: runs.iter().map(|r| r.wall_time).sum(),
        };
        Ok(Self {
            table: ReportTable { datasets, rows },
            runs,
            artifacts,
            failures,
            environment,
            notes: vec![
                "SUIT is not compared: it has no specification precise enough to reimplement."
                    .into(),
                "Wall times are hardware-specific and are recorded, not asserted.".into(),
            ],
        })
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        util::write_json(&dir.join("report.json"), self)?;
        util::write_text(&dir.join("report.csv"), &self.table.to_csv()?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        util::read_json(&dir.join("report.json"))
    }
}

fn metric_chart(title: &str, labels: &[&str], cells: &[Option<CellMean>]) -> Result<Canvas> {
    let pick = |f: fn(&CellMean) -> f64| {
        cells
            .iter()
            .map(|c| c.as_ref().map_or(f64::NAN, f))
            .collect()
    };
    bar_chart(
        title,
        labels,
        &[
            Series {
                name: "SA",
                color: BLUE,
                values: pick(|c| c.sa),
            },
            Series {
                name: "IOU",
                color: ORANGE,
                values: pick(|c| c.iou),
            },
        ],
    )
}

/// Montage of every image the gate inspected in one `hgit` run, in rank order.
pub fn curation_montage_for(run_dir: &Path) -> Result<Canvas> {
    let report: CurationReport = util::read_json(&run_dir.join("curation_report.json"))?;
    let inspected = load_split(&run_dir.join("inspected").join("manifest.json"))?;
    let hists: Vec<_> = inspected.images().iter().map(compute_histogram).collect();
    let rows = report
        .records
        .iter()
        .map(|rec| {
            let i = inspected
                .ids()
                .iter()
                .position(|id| *id == rec.id)
                .ok_or_else(|| {
                    Error::arg(format!("curation record {} has no inspected image", rec.id))
                })?;
            Ok(MontageRow {
                id: &rec.id,
                image: &inspected.images()[i],
                histogram: &hists[i],
                ks_statistic: rec.ks_statistic,
                p_value: rec.p_value,
                selected: rec.selected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    curation_montage(&rows, &report.target_profile)
}

/// Writes `<dataset>.png` (SA/IoU per scenario) for every dataset,
/// `averaged.png`, and `curation-<dataset>-seed-<s>.png` for every `hgit`
/// run. Returns the written paths.
pub fn emit_plots(report: &ExperimentReport, out: &Path) -> Result<Vec<PathBuf>> {
    if report.runs.is_empty() {
        return Ok(Vec::new());
    }
    util::create_dir(out)?;
    let labels: Vec<&str> = report
        .table
        .rows
        .iter()
        .map(|r| r.scenario.as_str())
        .collect();
    let mut written = Vec::new();
    let mut columns: BTreeMap<usize, (&str, Vec<Option<CellMean>>)> = BTreeMap::new();
    for (k, d) in report.table.datasets.iter().enumerate() {
        columns.insert(
            k,
            (
                d,
                report
                    .table
                    .rows
                    .iter()
                    .map(|r| r.cells[k].clone())
                    .collect(),
            ),
        );
    }
    columns.insert(
        report.table.datasets.len(),
        (
            "averaged",
            report
                .table
                .rows
                .iter()
                .map(|r| r.averaged.clone())
                .collect(),
        ),
    );
    for (name, cells) in columns.values() {
        let path = out.join(format!("{name}.png"));
        metric_chart(&name.to_uppercase(), &labels, cells)?.save(&path)?;
        written.push(path);
    }
    for a in report.artifacts.iter().filter(|a| a.curation.is_some()) {
        let path = out.join(format!("curation-{}-seed-{}.png", a.dataset, a.seed));
        curation_montage_for(&a.dir)?.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
