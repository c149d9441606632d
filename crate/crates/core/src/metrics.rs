//! Pixel confusion counts, segmentation accuracy (SA), IoU and per-cell
//! aggregation over seeds.
//!
//! Counts are accumulated over a whole test set before SA/IoU are taken
//! (micro-averaging).

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// No predicted and no true foreground anywhere.
    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::arg(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Confusion accumulated over aligned lists of predictions and ground truths.
pub fn confusion_all(preds: &[BinaryMask], truths: &[BinaryMask]) -> Result<ConfusionCounts> {
    if preds.len() != truths.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} masks",
            preds.len(),
            truths.len()
        )));
    }
    preds.iter().zip(truths).map(|(p, t)| confusion(p, t)).sum()
}

/// `(TP + TN) / (TP + FP + TN + FN)`.
pub fn segmentation_accuracy(c: &ConfusionCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::arg("segmentation accuracy of zero pixels"));
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

/// `TP / (TP + FP + FN)`; an empty prediction of an empty truth scores 1.0
/// (check [`ConfusionCounts::both_empty`] to flag it).
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    c.tp as f64 / denom as f64
}

/// One scenario evaluated on one target dataset with one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: String,
    pub dataset: String,
    pub seed: u64,
    pub sa: f64,
    pub iou: f64,
    pub wall_time: f64,
    pub counts: ConfusionCounts,
    /// IoU defaulted to 1.0 because both prediction and truth were empty.
    #[serde(default)]
    pub iou_empty_convention: bool,
}

impl RunResult {
    pub fn from_counts(
        scenario: &str,
        dataset: &str,
        seed: u64,
        counts: ConfusionCounts,
        wall_time: f64,
    ) -> Result<Self> {
        Ok(Self {
            scenario: scenario.to_string(),
            dataset: dataset.to_string(),
            seed,
            sa: segmentation_accuracy(&counts)?,
            iou: iou(&counts),
            wall_time,
            counts,
            iou_empty_convention: counts.both_empty(),
        })
    }
}

/// Mean SA/IoU of one scenario on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub sa: f64,
    pub iou: f64,
    pub runs: usize,
}

/// Means per scenario x dataset plus the unweighted average over datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// scenario -> dataset -> mean
    pub cells: BTreeMap<String, BTreeMap<String, CellMean>>,
    /// scenario -> mean over its dataset means
    pub averaged: BTreeMap<String, CellMean>,
}

fn stable_mean(mut values: Vec<f64>) -> f64 {
    // summing in sorted order makes the result independent of input order
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn aggregate(results: &[RunResult]) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(Error::arg("aggregate of no results"));
    }
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<&RunResult>>> = BTreeMap::new();
    for r in results {
        groups
            .entry(r.scenario.clone())
            .or_default()
            .entry(r.dataset.clone())
            .or_default()
            .push(r);
    }
    let mut cells = BTreeMap::new();
    let mut averaged = BTreeMap::new();
    for (scenario, by_dataset) in groups {
        let mut row = BTreeMap::new();
        for (dataset, runs) in by_dataset {
            row.insert(
                dataset,
                CellMean {
                    sa: stable_mean(runs.iter().map(|r| r.sa).collect()),
                    iou: stable_mean(runs.iter().map(|r| r.iou).collect()),
                    runs: runs.len(),
                },
            );
        }
        averaged.insert(
            scenario.clone(),
            CellMean {
                sa: stable_mean(row.values().map(|c: &CellMean| c.sa).collect()),
                iou: stable_mean(row.values().map(|c: &CellMean| c.iou).collect()),
                runs: row.values().map(|c: &CellMean| c.runs).sum(),
            },
        );
        cells.insert(scenario, row);
    }
    Ok(Aggregate { cells, averaged })
}
