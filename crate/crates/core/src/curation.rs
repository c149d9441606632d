//! Histogram gating of translated images.
//!
//! Each translated image's intensity histogram is compared with the mean
//! histogram of the target training set by a two-sample Kolmogorov–Smirnov
//! test. Images are ranked by p-value and the top N% are kept.
//!
//! Histograms are treated as discrete distributions over the 256 bins; the
//! statistic is the sup-distance between their CDFs and both sample sizes are
//! the per-image pixel count (or an explicit override).

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{compute_histogram, mean_histogram, DatasetSplit, Histogram};
use crate::util;

/// Method note written into every report.
pub const METHOD_NOTE: &str = "two-sample asymptotic Kolmogorov-Smirnov on 256-bin histograms; \
     n1 = n2 = effective_n (per-image pixel count unless overridden); \
     ranked by p-value descending, ties by smaller D then id";

/// Sup-distance between the cumulative distributions of two normalized histograms.
pub fn ks_statistic(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    h1.check_normalized()?;
    h2.check_normalized()?;
    let mut c1 = 0.0;
    let mut c2 = 0.0;
    let mut d: f64 = 0.0;
    for (a, b) in h1.bins().iter().zip(h2.bins()) {
        c1 += a;
        c2 += b;
        d = d.max((c1 - c2).abs());
    }
    Ok(d.min(1.0))
}

const SERIES_TOL: f64 = 1e-12;

/// Kolmogorov survival function `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²λ²)`.
///
/// For `λ < 1` the alternating series converges slowly, so the equivalent
/// Jacobi-theta form `1 − (√(2π)/λ) Σ_{k≥1} exp(−(2k−1)²π²/(8λ²))` is summed
/// instead. Either series stops at the first term below `1e-12`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.0 {
        let mut sum = 0.0;
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        for k in 1.. {
            let m = (2 * k - 1) as f64;
            let term = (-m * m * c).exp();
            sum += term;
            if term < SERIES_TOL {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for k in 1.. {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += sign * term;
            if term < SERIES_TOL {
                break;
            }
            sign = -sign;
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

/// Asymptotic two-sample p-value `Q(D·sqrt(n1·n2/(n1+n2)))`.
pub fn ks_p_value(d: f64, n1: u64, n2: u64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let (n1, n2) = (n1.max(1) as f64, n2.max(1) as f64);
    let n_eff = n1 * n2 / (n1 + n2);
    kolmogorov_q(d * n_eff.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    /// Percentage of translated images kept, in (0, 100].
    pub keep_percent: f64,
    /// Sample size used for both sides of the p-value; `None` = per-image pixel count.
    #[serde(default)]
    pub effective_n: Option<u64>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            keep_percent: 70.0,
            effective_n: None,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_percent > 0.0 && self.keep_percent <= 100.0) {
            return Err(Error::arg(format!(
                "keep_percent {} outside (0, 100]",
                self.keep_percent
            )));
        }
        if self.effective_n == Some(0) {
            return Err(Error::arg("effective_n must be positive"));
        }
        Ok(())
    }

    /// `ceil(N/100 · total)`, computed without float drift at exact products.
    pub fn keep_count(&self, total: usize) -> usize {
        let exact = self.keep_percent * total as f64 / 100.0;
        ((exact - 1e-9).ceil().max(0.0) as usize).min(total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub ks_statistic: f64,
    pub p_value: f64,
    /// 1-based position in the ranking.
    pub rank: usize,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub method: String,
    pub keep_percent: f64,
    pub effective_n: Option<u64>,
    /// Records in rank order.
    pub records: Vec<CurationRecord>,
    pub target_profile: Histogram,
}

impl CurationReport {
    pub fn selected_count(&self) -> usize {
        self.records.iter().filter(|r| r.selected).count()
    }

    pub fn record(&self, id: &str) -> Option<&CurationRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }

    /// One row per image: `id,ks_statistic,p_value,rank,selected`, preceded by
    /// a `#` comment line carrying the method note.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\nid,ks_statistic,p_value,rank,selected\n", self.method);
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.12},{:.6e},{},{}\n",
                r.id, r.ks_statistic, r.p_value, r.rank, r.selected
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        util::write_text(path, &self.to_csv())
    }
}

/// Orders by p-value descending, then smaller D, then id.
fn rank_order(a: &CurationRecord, b: &CurationRecord) -> Ordering {
    b.p_value
        .total_cmp(&a.p_value)
        .then(a.ks_statistic.total_cmp(&b.ks_statistic))
        .then_with(|| a.id.cmp(&b.id))
}

/// Scores every image of `transformed` against the mean histogram of
/// `target` and keeps the best `ceil(N/100 · M)`, in rank order.
pub fn gate(
    transformed: &DatasetSplit,
    target: &DatasetSplit,
    cfg: &CurationConfig,
) -> Result<(DatasetSplit, CurationReport)> {
    cfg.validate()?;
    if transformed.is_empty() || target.is_empty() {
        return Err(Error::arg(
            "gate needs non-empty transformed and target splits",
        ));
    }
    if target.role().is_test() {
        return Err(Error::arg(format!(
            "refusing to build the target profile from a {} split",
            target.role().as_str()
        )));
    }
    let target_hists: Vec<Histogram> = target.images().iter().map(compute_histogram).collect();
    let profile = mean_histogram(&target_hists)?;
    let mut records = Vec::with_capacity(transformed.len());
    let mut index_of = std::collections::HashMap::new();
    for (i, (id, img)) in transformed
        .ids()
        .iter()
        .zip(transformed.images())
        .enumerate()
    {
        let h = compute_histogram(img);
        let d = ks_statistic(&h, &profile)?;
        let n = cfg.effective_n.unwrap_or(h.pixel_count());
        records.push(CurationRecord {
            id: id.clone(),
            ks_statistic: d,
            p_value: ks_p_value(d, n, n),
            rank: 0,
            selected: false,
        });
        index_of.insert(id.clone(), i);
    }
    records.sort_by(rank_order);
    let keep = cfg.keep_count(records.len());
    for (pos, r) in records.iter_mut().enumerate() {
        r.rank = pos + 1;
        r.selected = pos < keep;
    }
    let indices: Vec<usize> = records.iter().take(keep).map(|r| index_of[&r.id]).collect();
    let selected = transformed.select(&indices)?;
    let report = CurationReport {
        method: METHOD_NOTE.to_string(),
        keep_percent: cfg.keep_percent,
        effective_n: cfg.effective_n,
        records,
        target_profile: profile,
    };
    Ok((selected, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{GrayImage, SplitRole, BINS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_point(a: usize, wa: f64, b: usize, wb: f64) -> Histogram {
        let mut bins = vec![0.0; BINS];
        bins[a] += wa;
        bins[b] += wb;
        Histogram::from_bins(bins, 100).unwrap()
    }

    #[test]
    fn statistic_examples() {
        let h = two_point(10, 0.3, 200, 0.7);
        assert_eq!(ks_statistic(&h, &h).unwrap(), 0.0);
        assert_eq!(
            ks_statistic(&Histogram::delta(0, 1), &Histogram::delta(255, 1)).unwrap(),
            1.0
        );
        let d = ks_statistic(&two_point(0, 0.5, 255, 0.5), &Histogram::delta(0, 1)).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_histogram_is_rejected() {
        let bad: Histogram = serde_json::from_value(serde_json::json!({
            "bins": vec![0.01; BINS],
            "pixel_count": 4,
        }))
        .unwrap();
        assert!(matches!(
            ks_statistic(&bad, &Histogram::delta(0, 1)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn p_value_examples() {
        assert_eq!(ks_p_value(0.0, 10, 10), 1.0);
        assert!(ks_p_value(0.5, 128 * 128, 128 * 128) < 1e-10);
        // Q(1) from the alternating series evaluated by hand to 1e-12.
        let q1 = 2.0
            * ((-2.0f64).exp() - (-8.0f64).exp() + (-18.0f64).exp() - (-32.0f64).exp()
                + (-50.0f64).exp());
        assert!((kolmogorov_q(1.0) - q1).abs() < 1e-12);
    }

    #[test]
    fn both_series_agree_where_they_meet() {
        for lambda in [0.6, 0.8, 0.95, 0.999] {
            // direct alternating series to convergence
            let mut sum = 0.0;
            for k in 1..2000 {
                let kf = k as f64;
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sum += sign * (-2.0 * kf * kf * lambda * lambda).exp();
            }
            assert!(
                (kolmogorov_q(lambda) - 2.0 * sum).abs() < 1e-10,
                "lambda {lambda}"
            );
        }
    }

    #[test]
    fn p_value_decreases_with_d() {
        let mut prev = 1.0;
        for i in 0..100 {
            let d = 0.05 + 0.95 * i as f64 / 99.0;
            let p = ks_p_value(d, 40, 40);
            assert!(p < prev, "d {d}: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn keep_count_rounds_up_exactly() {
        let cfg = CurationConfig::default();
        assert_eq!(cfg.keep_count(10), 7);
        assert_eq!(cfg.keep_count(3), 3);
        assert_eq!(cfg.keep_count(137), 96);
        assert_eq!(cfg.keep_count(1), 1);
        let all = CurationConfig {
            keep_percent: 100.0,
            effective_n: None,
        };
        assert_eq!(all.keep_count(13), 13);
        assert!(CurationConfig {
            keep_percent: 0.0,
            effective_n: None
        }
        .validate()
        .is_err());
        assert!(CurationConfig {
            keep_percent: 100.5,
            effective_n: None
        }
        .validate()
        .is_err());
    }

    fn bimodal(seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(16, 16, |x, _| {
            let base = if (x / 4) % 2 == 0 { 0.2 } else { 0.8 };
            base + rng.random_range(-0.05f32..0.05)
        })
        .unwrap()
    }

    fn split(role: SplitRole, prefix: &str, images: Vec<GrayImage>) -> DatasetSplit {
        let ids = (0..images.len())
            .map(|i| format!("{prefix}{i:02}"))
            .collect();
        DatasetSplit::new(role, ids, images, None).unwrap()
    }

    #[test]
    fn blanks_rank_last_and_are_rejected() {
        let target = split(
            SplitRole::TargetTrain,
            "t",
            (0..8).map(|i| bimodal(100 + i)).collect(),
        );
        let mut imgs: Vec<GrayImage> = (0..7).map(bimodal).collect();
        for v in [0.0, 0.5, 1.0] {
            imgs.push(GrayImage::constant(16, 16, v).unwrap());
        }
        let transformed = split(SplitRole::SourceTrain, "x", imgs);
        let (selected, report) = gate(&transformed, &target, &CurationConfig::default()).unwrap();
        assert_eq!(selected.len(), 7);
        for id in ["x07", "x08", "x09"] {
            let r = report.record(id).unwrap();
            assert!(!r.selected && r.rank > 7, "{id} rank {}", r.rank);
        }
    }

    #[test]
    fn full_keep_orders_by_rank() {
        let target = split(
            SplitRole::TargetTrain,
            "t",
            (0..4).map(|i| bimodal(50 + i)).collect(),
        );
        let transformed = split(SplitRole::SourceTrain, "x", (0..6).map(bimodal).collect());
        let cfg = CurationConfig {
            keep_percent: 100.0,
            effective_n: None,
        };
        let (selected, report) = gate(&transformed, &target, &cfg).unwrap();
        assert_eq!(selected.len(), 6);
        let ranked: Vec<&str> = report.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(
            selected
                .ids()
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>(),
            ranked
        );
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 2 + 6);
    }

    #[test]
    fn gate_refuses_test_targets_and_empty_inputs() {
        let imgs: Vec<GrayImage> = (0..3).map(bimodal).collect();
        let t = split(SplitRole::TargetTest, "t", imgs.clone());
        let x = split(SplitRole::SourceTrain, "x", imgs);
        assert!(gate(&x, &t, &CurationConfig::default()).is_err());
        let empty = split(SplitRole::TargetTrain, "e", vec![]);
        assert!(gate(&x, &empty, &CurationConfig::default()).is_err());
    }

    fn random_hist(rng: &mut ChaCha8Rng) -> Histogram {
        let counts: Vec<u64> = (0..BINS)
            .map(|_| {
                if rng.random_bool(0.2) {
                    rng.random_range(0..20)
                } else {
                    0
                }
            })
            .collect();
        if counts.iter().sum::<u64>() == 0 {
            return Histogram::delta(rng.random_range(0..BINS), 1);
        }
        Histogram::from_counts(&counts).unwrap()
    }

    proptest! {
        #[test]
        fn statistic_is_a_metric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_hist(&mut rng), random_hist(&mut rng), random_hist(&mut rng));
            let ab = ks_statistic(&a, &b).unwrap();
            prop_assert_eq!(ab, ks_statistic(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            let ac = ks_statistic(&a, &c).unwrap();
            let cb = ks_statistic(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn gate_ignores_input_order(seed in any::<u64>(), rot in 0usize..9) {
            let target = split(SplitRole::TargetTrain, "t", (0..3).map(|i| bimodal(seed.wrapping_add(100 + i))).collect());
            let mut imgs: Vec<GrayImage> = (0..9).map(|i| bimodal(seed.wrapping_add(i))).collect();
            imgs.push(GrayImage::constant(16, 16, 0.5).unwrap());
            // duplicate to force exact ties resolved by id
            imgs.push(imgs[0].clone());
            let ids: Vec<String> = (0..imgs.len()).map(|i| format!("x{i:02}")).collect();
            let a = DatasetSplit::new(SplitRole::SourceTrain, ids.clone(), imgs.clone(), None).unwrap();
            let mut order: Vec<usize> = (0..imgs.len()).collect();
            order.rotate_left(rot);
            order.reverse();
            let b = a.select(&order).unwrap();
            let (sa, ra) = gate(&a, &target, &CurationConfig::default()).unwrap();
            let (sb, rb) = gate(&b, &target, &CurationConfig::default()).unwrap();
            prop_assert_eq!(sa.ids(), sb.ids());
            prop_assert_eq!(ra.records, rb.records.clone());
            let min_sel = rb.records.iter().filter(|r| r.selected).map(|r| r.p_value).fold(f64::INFINITY, f64::min);
            let max_rej = rb.records.iter().filter(|r| !r.selected).map(|r| r.p_value).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_sel >= max_rej);
        }
    }
}
