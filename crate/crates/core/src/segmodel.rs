//! Binary segmentation network: a three-level U-Net trained with pixel-wise
//! binary cross-entropy, and thresholded prediction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use hgit_nn::{sigmoid, Adam, Conv2d, Graph, ParamStore, Tensor, Var, BCE_EPS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{common_shape, images_to_tensor, masks_to_tensor};
use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, DatasetSplit, GrayImage};
use crate::util::replace_params;

const TAG_SEG: u32 = 10;
const INFER_BATCH: usize = 16;
const MAGIC: &[u8; 4] = b"HGSG";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetArch {
    /// Width of the first level; doubled at each of the two lower levels.
    pub base_channels: usize,
}

impl Default for UnetArch {
    fn default() -> Self {
        Self { base_channels: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Pixel accuracy of the predictions made during the epoch's updates.
    pub train_sa: f64,
    /// Pixel accuracy on the held-out part, when one was requested.
    pub validation_sa: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub seed: u64,
    pub arch: UnetArch,
    /// Fraction of the training pairs held out for per-epoch validation SA.
    pub validation_fraction: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            threshold: 0.5,
            seed: 0,
            arch: UnetArch::default(),
            validation_fraction: 0.0,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(0.0..0.9).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 0.9)",
                self.validation_fraction
            )));
        }
        if self.arch.base_channels == 0 {
            return Err(Error::Config("U-Net width must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel foreground probabilities for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn threshold(&self, t: f64) -> BinaryMask {
        let labels = self
            .values
            .iter()
            .map(|&p| u8::from(p as f64 >= t))
            .collect();
        BinaryMask::new(self.width, self.height, labels).expect("labels are binary and sized")
    }
}

#[derive(Clone, Debug)]
pub struct SegmenterModel {
    pub arch: UnetArch,
    store: ParamStore,
    enc1: [Conv2d; 2],
    enc2: [Conv2d; 2],
    mid: [Conv2d; 2],
    up2: Conv2d,
    dec2: Conv2d,
    up1: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
    pub training_log: Vec<SegEpoch>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: UnetArch,
    training_log: Vec<SegEpoch>,
}

impl SegmenterModel {
    pub fn new(arch: UnetArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = arch.base_channels;
        let mut s = ParamStore::new(TAG_SEG);
        let mut conv = |s: &mut ParamStore, name: &str, i, o, k| {
            let pad = k / 2;
            Conv2d::new(s, name, i, o, k, 1, pad, None, &mut rng)
        };
        let enc1 = [
            conv(&mut s, "enc1.a", 1, c, 3),
            conv(&mut s, "enc1.b", c, c, 3),
        ];
        let enc2 = [
            conv(&mut s, "enc2.a", c, 2 * c, 3),
            conv(&mut s, "enc2.b", 2 * c, 2 * c, 3),
        ];
        let mid = [
            conv(&mut s, "mid.a", 2 * c, 4 * c, 3),
            conv(&mut s, "mid.b", 4 * c, 4 * c, 3),
        ];
        let up2 = conv(&mut s, "up2", 4 * c, 2 * c, 3);
        let dec2 = conv(&mut s, "dec2", 4 * c, 2 * c, 3);
        let up1 = conv(&mut s, "up1", 2 * c, c, 3);
        let dec1 = conv(&mut s, "dec1", 2 * c, c, 3);
        let head = conv(&mut s, "head", c, 1, 1);
        Self {
            arch,
            store: s,
            enc1,
            enc2,
            mid,
            up2,
            dec2,
            up1,
            dec1,
            head,
            training_log: Vec::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
            return Err(Error::arg(format!(
                "segmenter input {h}x{w} must have sides divisible by 4"
            )));
        }
        Ok(())
    }

    /// Logits `[N, 1, H, W]`.
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = &self.store;
        let cr = |g: &mut Graph, conv: &Conv2d, x: Var| {
            let y = conv.forward(g, s, x);
            g.relu(y)
        };
        let e1 = cr(g, &self.enc1[0], x);
        let e1 = cr(g, &self.enc1[1], e1);
        let p1 = g.max_pool2(e1);
        let e2 = cr(g, &self.enc2[0], p1);
        let e2 = cr(g, &self.enc2[1], e2);
        let p2 = g.max_pool2(e2);
        let m = cr(g, &self.mid[0], p2);
        let m = cr(g, &self.mid[1], m);
        let u2 = g.upsample2(m);
        let u2 = cr(g, &self.up2, u2);
        let d2 = g.concat(u2, e2);
        let d2 = cr(g, &self.dec2, d2);
        let u1 = g.upsample2(d2);
        let u1 = cr(g, &self.up1, u1);
        let d1 = g.concat(u1, e1);
        let d1 = cr(g, &self.dec1, d1);
        self.head.forward(g, s, d1)
    }

    fn logits(&self, batch: Tensor) -> Tensor {
        let mut g = Graph::new();
        let x = g.input(batch);
        let z = self.forward(&mut g, x);
        g.take_value(z)
    }

    pub fn predict_probs(&self, images: &[GrayImage]) -> Result<Vec<ProbabilityMap>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (h, w) = common_shape(images)?;
        Self::check_input(h, w)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let refs: Vec<&GrayImage> = chunk.iter().collect();
            let z = self.logits(images_to_tensor(&refs));
            for n in 0..z.batch() {
                out.push(ProbabilityMap {
                    width: w,
                    height: h,
                    values: z.sample(n).iter().map(|&v| sigmoid(v)).collect(),
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            crate::util::create_dir(parent)?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| e.context(path.display().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            arch: self.arch,
            training_log: self.training_log.clone(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| Error::arg(format!("encode header: {e}")))?;
        let io = |e| Error::io("<segmenter>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&json).map_err(io)?;
        self.store
            .write_to(&mut w)
            .map_err(|e| Error::arg(format!("write parameters: {e}")))?;
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<segmenter>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::arg("not a segmenter checkpoint"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        if u32::from_le_bytes(word) != FORMAT_VERSION {
            return Err(Error::arg(format!(
                "unsupported segmenter format {}",
                u32::from_le_bytes(word)
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::arg("segmenter header too large"));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::arg(format!("segmenter header: {e}")))?;
        let mut model = Self::new(header.arch, 0);
        let store = ParamStore::read_from(&mut r)
            .map_err(|e| Error::arg(format!("read parameters: {e}")))?;
        replace_params(&mut model.store, store)?;
        model.training_log = header.training_log;
        Ok(model)
    }
}

fn check_pairs(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::arg("binary cross-entropy of zero pixels"));
    }
    Ok(())
}

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]` with `p` clipped to `[eps, 1 - eps]`.
pub fn bce_flat(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(probs, labels)?;
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Derivative of [`bce_flat`] with respect to each probability. Zero where
/// the clip is active.
pub fn bce_flat_grad(probs: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_pairs(probs, labels)?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                0.0
            } else if y == 1 {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect())
}

/// Mean binary cross-entropy over every pixel of a batch of probability maps.
pub fn bce_loss(probs: &[ProbabilityMap], masks: &[BinaryMask]) -> Result<f64> {
    if probs.len() != masks.len() {
        return Err(Error::arg(format!(
            "{} probability maps for {} masks",
            probs.len(),
            masks.len()
        )));
    }
    let mut p = Vec::new();
    let mut y = Vec::new();
    for (pm, m) in probs.iter().zip(masks) {
        if (pm.height, pm.width) != m.shape() || pm.values.len() != m.labels().len() {
            return Err(Error::arg("probability map and mask differ in shape"));
        }
        p.extend(pm.values.iter().map(|&v| v as f64));
        y.extend_from_slice(m.labels());
    }
    bce_flat(&p, &y)
}

fn correct_pixels(logits: &Tensor, labels: &Tensor, threshold: f64) -> u64 {
    logits
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(&z, &y)| (sigmoid(z) as f64 >= threshold) == (y > 0.5))
        .count() as u64
}

/// Trains a fresh segmenter on image/mask pairs.
pub fn train_segmenter(images: &DatasetSplit, cfg: &SegTrainConfig) -> Result<SegmenterModel> {
    cfg.validate()?;
    if images.role().is_test() {
        return Err(Error::arg(format!(
            "segmenter cannot train on the {} split",
            images.role().as_str()
        )));
    }
    let Some(masks) = images.masks() else {
        return Err(Error::arg(format!(
            "{} split has no masks to train on",
            images.role().as_str()
        )));
    };
    if images.is_empty() {
        return Err(Error::arg("no training pairs"));
    }
    let (h, w) = common_shape(images.images())?;
    SegmenterModel::check_input(h, w)?;

    let mut model = SegmenterModel::new(cfg.arch, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5e9d_0000_0001);
    let mut all: Vec<usize> = (0..images.len()).collect();
    let n_val = (images.len() as f64 * cfg.validation_fraction).floor() as usize;
    if n_val > 0 {
        all.shuffle(&mut rng);
    }
    let (val_idx, train_idx) = all.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() {
        return Err(Error::arg("validation split leaves no training pairs"));
    }

    let mut opt = Adam::new(model.store(), cfg.learning_rate as f32, 0.9, 0.999);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut pixels) = (0.0f64, 0u64, 0u64);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| &images.images()[i]).collect();
            let ms: Vec<&BinaryMask> = chunk.iter().map(|&i| &masks[i]).collect();
            let x = images_to_tensor(&imgs);
            let y = masks_to_tensor(&ms);
            let mut g = Graph::new();
            let vx = g.input(x);
            let z = model.forward(&mut g, vx);
            correct += correct_pixels(g.value(z), &y, cfg.threshold);
            pixels += y.len() as u64;
            let loss = g.bce_with_logits(z, y);
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("segmentation loss is {l}"),
                });
            }
            loss_sum += l * chunk.len() as f64;
            g.backward(loss);
            opt.step(&mut model.store, &g);
        }
        let validation_sa = if val_idx.is_empty() {
            None
        } else {
            let (mut ok, mut total) = (0u64, 0u64);
            for chunk in val_idx.chunks(INFER_BATCH) {
                let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| &images.images()[i]).collect();
                let ms: Vec<&BinaryMask> = chunk.iter().map(|&i| &masks[i]).collect();
                let y = masks_to_tensor(&ms);
                ok += correct_pixels(&model.logits(images_to_tensor(&imgs)), &y, cfg.threshold);
                total += y.len() as u64;
            }
            Some(ok as f64 / total as f64)
        };
        model.training_log.push(SegEpoch {
            epoch,
            loss: loss_sum / train_idx.len() as f64,
            train_sa: correct as f64 / pixels as f64,
            validation_sa,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(model)
}

/// Binarizes the model output: foreground where `probability >= threshold`.
pub fn predict(
    xt: &DatasetSplit,
    model: &SegmenterModel,
    threshold: f64,
) -> Result<Vec<BinaryMask>> {
    Ok(model
        .predict_probs(xt.images())?
        .iter()
        .map(|p| p.threshold(threshold))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::SplitRole;
    use rand::Rng;

    fn constant_model(p: f32) -> SegmenterModel {
        let mut m = SegmenterModel::new(UnetArch { base_channels: 2 }, 0);
        let n = m.store().len();
        // the head is registered last: weight then bias
        m.store_mut().get_mut(n - 2).data_mut().fill(0.0);
        m.store_mut()
            .get_mut(n - 1)
            .data_mut()
            .fill((p / (1.0 - p)).ln());
        m
    }

    fn split_of(
        images: Vec<GrayImage>,
        masks: Option<Vec<BinaryMask>>,
        role: SplitRole,
    ) -> DatasetSplit {
        let ids = (0..images.len()).map(|i| format!("x{i}")).collect();
        DatasetSplit::new(role, ids, images, masks).unwrap()
    }

    fn two_valued(n: usize, seed: u64) -> DatasetSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..n {
            let cx = rng.random_range(4usize..12);
            let cy = rng.random_range(4usize..12);
            let labels: Vec<u8> = (0usize..256)
                .map(|i| u8::from((i % 16).abs_diff(cx) <= 2 || (i / 16).abs_diff(cy) <= 1))
                .collect();
            images.push(
                GrayImage::new(
                    16,
                    16,
                    labels
                        .iter()
                        .map(|&l| if l == 1 { 0.8 } else { 0.2 })
                        .collect(),
                )
                .unwrap(),
            );
            masks.push(BinaryMask::new(16, 16, labels).unwrap());
        }
        split_of(images, Some(masks), SplitRole::SourceTrain)
    }

    #[test]
    fn bce_examples() {
        let y = [1u8, 0, 1, 0];
        let perfect = bce_flat(&[1.0, 0.0, 1.0, 0.0], &y).unwrap();
        assert!(perfect <= -(1.0 - BCE_EPS).ln() + 1e-15);
        let half = bce_flat(&[0.5; 4], &y).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let worst = bce_flat(&[0.0, 1.0, 0.0, 1.0], &y).unwrap();
        assert!((worst + BCE_EPS.ln()).abs() < 1e-9);
        assert!(bce_flat(&[0.5], &y).is_err());
    }

    #[test]
    fn bce_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let probs: Vec<f64> = (0..128).map(|_| rng.random_range(0.05..0.95)).collect();
            let labels: Vec<u8> = (0..128).map(|_| rng.random_range(0..2)).collect();
            let grad = bce_flat_grad(&probs, &labels).unwrap();
            let h = 1e-6;
            for i in 0..probs.len() {
                let mut up = probs.clone();
                let mut down = probs.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (bce_flat(&up, &labels).unwrap() - bce_flat(&down, &labels).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() <= 1e-4 * grad[i].abs(),
                    "pixel {i}: {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn constant_model_predictions() {
        let xt = split_of(
            vec![GrayImage::constant(16, 16, 0.3).unwrap(); 2],
            None,
            SplitRole::TargetTest,
        );
        let m = constant_model(0.9);
        let masks = predict(&xt, &m, 0.5).unwrap();
        assert!(masks.iter().all(|m| m.foreground() == 256));
        let none = predict(&xt, &m, 1.0 - 1e-7).unwrap();
        assert!(none.iter().all(|m| m.foreground() == 0));
        assert_eq!(predict(&xt, &m, 0.5).unwrap(), masks);
    }

    #[test]
    fn one_epoch_and_round_trip() {
        let data = two_valued(4, 1);
        let cfg = SegTrainConfig {
            epochs: 1,
            batch_size: 2,
            arch: UnetArch { base_channels: 4 },
            ..Default::default()
        };
        let m = train_segmenter(&data, &cfg).unwrap();
        assert_eq!(m.training_log.len(), 1);
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        let back = SegmenterModel::read_from(&bytes[..]).unwrap();
        assert_eq!(back.training_log, m.training_log);
        assert_eq!(
            back.predict_probs(data.images()).unwrap(),
            m.predict_probs(data.images()).unwrap()
        );
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn learns_a_two_valued_set() {
        let data = two_valued(16, 2);
        let cfg = SegTrainConfig {
            epochs: 20,
            batch_size: 4,
            arch: UnetArch { base_channels: 4 },
            ..Default::default()
        };
        let m = train_segmenter(&data, &cfg).unwrap();
        let log = &m.training_log;
        assert!(log.last().unwrap().loss < log[0].loss);
        let preds = predict(&data, &m, 0.5).unwrap();
        let counts = crate::metrics::confusion_all(&preds, data.masks().unwrap()).unwrap();
        assert!(crate::metrics::segmentation_accuracy(&counts).unwrap() > 0.95);
    }

    #[test]
    fn rejects_unlabeled_and_test_splits() {
        let data = two_valued(2, 1);
        let cfg = SegTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(train_segmenter(&data.without_masks(), &cfg).is_err());
        let test = split_of(
            data.images().to_vec(),
            data.masks().map(|m| m.to_vec()),
            SplitRole::TargetTest,
        );
        assert!(train_segmenter(&test, &cfg).is_err());
    }

    #[test]
    fn validation_fraction_is_logged() {
        let data = two_valued(10, 4);
        let cfg = SegTrainConfig {
            epochs: 1,
            validation_fraction: 0.2,
            arch: UnetArch { base_channels: 2 },
            ..Default::default()
        };
        let m = train_segmenter(&data, &cfg).unwrap();
        assert!(m.training_log[0].validation_sa.is_some());
    }

    #[test]
    fn default_width_is_about_a_hundred_thousand_parameters() {
        let n = SegmenterModel::new(UnetArch::default(), 0).num_params();
        assert!((80_000..150_000).contains(&n), "{n}");
    }
}
