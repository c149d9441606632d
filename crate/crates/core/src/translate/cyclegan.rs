//! Cycle-consistent adversarial translation between two unpaired domains.
//!
//! Training alternates a generator step on
//! `adv(G_s2t) + adv(G_t2s) + lambda_cyc * (|xs - G_t2s(G_s2t(xs))| + |xt - G_s2t(G_t2s(xt))|)`
//! plus an optional identity term
//! `lambda_cyc * lambda_identity * (|G_s2t(xt) - xt| + |G_t2s(xs) - xs|)`,
//! alternated with a discriminator step. Both adversarial losses are least squares.
//!
//! The identity term is on by default: without it the generators often settle
//! on an intensity-inverted mapping, which is exactly cycle-consistent.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use hgit_nn::{Adam, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::networks::{DiscriminatorArch, GeneratorArch, PatchDiscriminator, ResnetGenerator};
use super::TranslationConfig;
use crate::batch::{common_shape, images_to_tensor, tensor_to_images};
use crate::error::{Error, Result};
use crate::imagecore::{DatasetSplit, GrayImage};

const TAG_G_S2T: u32 = 1;
const TAG_G_T2S: u32 = 2;
const TAG_D_S: u32 = 3;
const TAG_D_T: u32 = 4;

/// Images per forward pass at inference.
const INFER_BATCH: usize = 16;

const MAGIC: &[u8; 4] = b"HGTR";
const FORMAT_VERSION: u32 = 1;

/// A map from a `[N, 1, H, W]` batch to a batch of the same shape.
pub trait ImageMap {
    fn map_batch(&self, batch: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Generator {
    Identity,
    Resnet(ResnetGenerator),
}

impl ImageMap for Generator {
    fn map_batch(&self, batch: &Tensor) -> Result<Tensor> {
        match self {
            Generator::Identity => Ok(batch.clone()),
            Generator::Resnet(net) => {
                ResnetGenerator::check_input(batch.height(), batch.width())?;
                let mut g = Graph::new();
                let x = g.input(batch.clone());
                let y = net.forward(&mut g, x);
                Ok(g.take_value(y))
            }
        }
    }
}

impl Generator {
    fn arch(&self) -> Option<GeneratorArch> {
        match self {
            Generator::Identity => None,
            Generator::Resnet(net) => Some(net.arch),
        }
    }

    fn store(&self) -> Option<&ParamStore> {
        match self {
            Generator::Identity => None,
            Generator::Resnet(net) => Some(net.store()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorEpoch {
    pub epoch: usize,
    /// Mean least-squares adversarial loss of both generators.
    pub generator_adv: f64,
    pub discriminator: f64,
    /// Mean cycle loss, unweighted.
    pub cycle: f64,
    /// Mean identity loss, unweighted; zero when disabled.
    #[serde(default)]
    pub identity: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TranslatorModel {
    pub g_s2t: Generator,
    pub g_t2s: Generator,
    pub d_s: Option<PatchDiscriminator>,
    pub d_t: Option<PatchDiscriminator>,
    pub training_log: Vec<TranslatorEpoch>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    generator: Option<GeneratorArch>,
    discriminator: Option<DiscriminatorArch>,
    training_log: Vec<TranslatorEpoch>,
}

impl TranslatorModel {
    /// Both generators are the identity; no discriminators.
    pub fn identity() -> Self {
        Self {
            g_s2t: Generator::Identity,
            g_t2s: Generator::Identity,
            d_s: None,
            d_t: None,
            training_log: Vec::new(),
        }
    }

    /// Freshly initialized networks.
    pub fn init(gen: GeneratorArch, disc: DiscriminatorArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            g_s2t: Generator::Resnet(ResnetGenerator::new(gen, TAG_G_S2T, &mut rng)),
            g_t2s: Generator::Resnet(ResnetGenerator::new(gen, TAG_G_T2S, &mut rng)),
            d_s: Some(PatchDiscriminator::new(disc, TAG_D_S, &mut rng)),
            d_t: Some(PatchDiscriminator::new(disc, TAG_D_T, &mut rng)),
            training_log: Vec::new(),
        }
    }

    pub fn cycle_loss(&self, xs: &[GrayImage], xt: &[GrayImage]) -> Result<f64> {
        cycle_loss(xs, xt, &self.g_s2t, &self.g_t2s)
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
            generator: self.g_s2t.arch(),
            discriminator: self.d_s.as_ref().map(|d| d.arch),
            training_log: self.training_log.clone(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| Error::arg(format!("encode header: {e}")))?;
        let io = |e| Error::io("<translator>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let stores = [
            self.g_s2t.store(),
            self.g_t2s.store(),
            self.d_s.as_ref().map(|d| d.store()),
            self.d_t.as_ref().map(|d| d.store()),
        ];
        for store in stores.into_iter().flatten() {
            store
                .write_to(&mut w)
                .map_err(|e| Error::arg(format!("write parameters: {e}")))?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<translator>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::arg("not a translator checkpoint"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        if u32::from_le_bytes(word) != FORMAT_VERSION {
            return Err(Error::arg(format!(
                "unsupported translator format {}",
                u32::from_le_bytes(word)
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::arg("translator header too large"));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::arg(format!("translator header: {e}")))?;

        let mut read_store = || {
            ParamStore::read_from(&mut r).map_err(|e| Error::arg(format!("read parameters: {e}")))
        };
        let mut model = match header.generator {
            None => Self::identity(),
            Some(gen) => {
                let disc = header.discriminator.unwrap_or_default();
                let mut m = Self::init(gen, disc, 0);
                for g in [&mut m.g_s2t, &mut m.g_t2s] {
                    if let Generator::Resnet(net) = g {
                        net.load_params(read_store()?)?;
                    }
                }
                if header.discriminator.is_some() {
                    for d in [m.d_s.as_mut(), m.d_t.as_mut()].into_iter().flatten() {
                        d.load_params(read_store()?)?;
                    }
                } else {
                    m.d_s = None;
                    m.d_t = None;
                }
                m
            }
        };
        model.training_log = header.training_log;
        Ok(model)
    }
}

fn refs(images: &[GrayImage]) -> Vec<&GrayImage> {
    images.iter().collect()
}

fn l1_per_sample(a: &Tensor, b: &Tensor) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum();
    sum / a.len() as f64
}

/// Cycle loss `E|xs - G_t2s(G_s2t(xs))| + E|xt - G_s2t(G_t2s(xt))|` with the
/// per-pixel L1 norm averaged over pixels and samples.
pub fn cycle_loss(
    xs: &[GrayImage],
    xt: &[GrayImage],
    g_s2t: &dyn ImageMap,
    g_t2s: &dyn ImageMap,
) -> Result<f64> {
    if xs.is_empty() || xt.is_empty() {
        return Err(Error::arg("cycle loss needs non-empty batches"));
    }
    let s_shape = common_shape(xs)?;
    let t_shape = common_shape(xt)?;
    if s_shape != t_shape {
        return Err(Error::arg(format!(
            "source {s_shape:?} and target {t_shape:?} batches differ in shape"
        )));
    }
    let term = |x: &[GrayImage], first: &dyn ImageMap, second: &dyn ImageMap| -> Result<f64> {
        let mut total = 0.0;
        for chunk in x.chunks(INFER_BATCH) {
            let input = images_to_tensor(&refs(chunk));
            let there = first.map_batch(&input)?;
            let back = second.map_batch(&there)?;
            if back.shape() != input.shape() {
                return Err(Error::arg("generator changed the image shape"));
            }
            total += l1_per_sample(&input, &back) * chunk.len() as f64;
        }
        Ok(total / x.len() as f64)
    };
    Ok(term(xs, g_s2t, g_t2s)? + term(xt, g_t2s, g_s2t)?)
}

/// Maps every source image through `G_s2t`. Ids and masks are carried over.
pub fn apply_translator(xs: &DatasetSplit, model: &TranslatorModel) -> Result<DatasetSplit> {
    if xs.is_empty() {
        return xs.with_images(Vec::new());
    }
    common_shape(xs.images())?;
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.images().chunks(INFER_BATCH) {
        let input = images_to_tensor(&refs(chunk));
        let mapped = model.g_s2t.map_batch(&input)?;
        if mapped.shape() != input.shape() {
            return Err(Error::arg("generator changed the image shape"));
        }
        out.extend(tensor_to_images(&mapped)?);
    }
    xs.with_images(out)
}

fn batch_of(images: &[GrayImage], order: &[usize]) -> Tensor {
    let picked: Vec<&GrayImage> = order.iter().map(|&i| &images[i]).collect();
    images_to_tensor(&picked)
}

/// Unpaired adversarial training of both generators and discriminators.
///
/// An epoch visits the larger split once in shuffled order; the smaller one is
/// cycled through its own shuffled order.
pub fn train_translator(
    source: &DatasetSplit,
    target: &DatasetSplit,
    cfg: &TranslationConfig,
) -> Result<TranslatorModel> {
    cfg.validate()?;
    for split in [source, target] {
        if split.role().is_test() {
            return Err(Error::arg(format!(
                "translator cannot train on the {} split",
                split.role().as_str()
            )));
        }
        if split.is_empty() {
            return Err(Error::arg(format!(
                "{} split is empty",
                split.role().as_str()
            )));
        }
    }
    let s_shape = common_shape(source.images())?;
    let t_shape = common_shape(target.images())?;
    if s_shape != t_shape {
        return Err(Error::arg(format!(
            "source {s_shape:?} and target {t_shape:?} images differ in shape"
        )));
    }
    ResnetGenerator::check_input(s_shape.0, s_shape.1)?;

    let mut model = TranslatorModel::init(cfg.generator, cfg.discriminator, cfg.seed);
    let (Generator::Resnet(mut g_s2t), Generator::Resnet(mut g_t2s)) =
        (model.g_s2t.clone(), model.g_t2s.clone())
    else {
        unreachable!("init builds residual generators")
    };
    let (mut d_s, mut d_t) = (model.d_s.take().unwrap(), model.d_t.take().unwrap());

    let lr = cfg.learning_rate as f32;
    let (b1, b2) = (0.5, 0.999);
    let mut opt_gs = Adam::new(g_s2t.store(), lr, b1, b2);
    let mut opt_gt = Adam::new(g_t2s.store(), lr, b1, b2);
    let mut opt_ds = Adam::new(d_s.store(), lr, b1, b2);
    let mut opt_dt = Adam::new(d_t.store(), lr, b1, b2);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let lambda = cfg.lambda_cyc as f32;
    let lambda_idt = cfg.lambda_identity as f32;
    let steps = source.len().max(target.len()).div_ceil(cfg.batch_size);
    let bs = cfg.batch_size;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut s_order: Vec<usize> = (0..source.len()).collect();
        let mut t_order: Vec<usize> = (0..target.len()).collect();
        s_order.shuffle(&mut rng);
        t_order.shuffle(&mut rng);
        let pick = |order: &[usize], step: usize| -> Vec<usize> {
            let n = bs.min(order.len());
            (0..n)
                .map(|k| order[(step * bs + k) % order.len()])
                .collect()
        };
        let (mut sum_adv, mut sum_d, mut sum_cyc, mut sum_idt) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);

        for step in 0..steps {
            let xs = batch_of(source.images(), &pick(&s_order, step));
            let xt = batch_of(target.images(), &pick(&t_order, step));

            // generator step
            let mut g = Graph::new();
            let vs = g.input(xs.clone());
            let vt = g.input(xt.clone());
            let fake_t = g_s2t.forward(&mut g, vs);
            let rec_s = g_t2s.forward(&mut g, fake_t);
            let fake_s = g_t2s.forward(&mut g, vt);
            let rec_t = g_s2t.forward(&mut g, fake_s);
            let score_t = d_t.forward(&mut g, fake_t);
            let score_s = d_s.forward(&mut g, fake_s);
            let adv_t = g.mse_const(score_t, 1.0);
            let adv_s = g.mse_const(score_s, 1.0);
            let cyc_s = g.l1(rec_s, vs);
            let cyc_t = g.l1(rec_t, vt);
            let adv = g.add(adv_t, adv_s);
            let cyc = g.add(cyc_s, cyc_t);
            let weighted = g.scale(cyc, lambda);
            let mut loss = g.add(adv, weighted);
            let mut idt_v = 0.0;
            if lambda_idt > 0.0 {
                let idt_t = g_s2t.forward(&mut g, vt);
                let idt_s = g_t2s.forward(&mut g, vs);
                let it = g.l1(idt_t, vt);
                let is = g.l1(idt_s, vs);
                let idt = g.add(it, is);
                idt_v = g.value(idt).item() as f64;
                let idt = g.scale(idt, lambda * lambda_idt);
                loss = g.add(loss, idt);
            }
            let (adv_v, cyc_v) = (g.value(adv).item() as f64, g.value(cyc).item() as f64);
            if !adv_v.is_finite() || !cyc_v.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("generator loss is {}", adv_v + cyc_v),
                });
            }
            g.backward(loss);
            opt_gs.step(g_s2t.store_mut(), &g);
            opt_gt.step(g_t2s.store_mut(), &g);
            let fake_t = g.take_value(fake_t);
            let fake_s = g.take_value(fake_s);
            drop(g);

            // discriminator step on detached fakes
            let mut g = Graph::new();
            let real_t = g.input(xt);
            let real_s = g.input(xs);
            let fake_t = g.input(fake_t);
            let fake_s = g.input(fake_s);
            let mut terms = Vec::with_capacity(4);
            for (d, real, fake) in [(&d_t, real_t, fake_t), (&d_s, real_s, fake_s)] {
                let r = d.forward(&mut g, real);
                let f = d.forward(&mut g, fake);
                terms.push(g.mse_const(r, 1.0));
                terms.push(g.mse_const(f, 0.0));
            }
            let mut d_loss = terms[0];
            for &t in &terms[1..] {
                d_loss = g.add(d_loss, t);
            }
            let d_loss = g.scale(d_loss, 0.5);
            let d_v = g.value(d_loss).item() as f64;
            if !d_v.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("discriminator loss is {d_v}"),
                });
            }
            g.backward(d_loss);
            opt_ds.step(d_s.store_mut(), &g);
            opt_dt.step(d_t.store_mut(), &g);

            sum_adv += adv_v / 2.0;
            sum_d += d_v / 2.0;
            sum_cyc += cyc_v;
            sum_idt += idt_v;
        }

        let n = steps as f64;
        model.training_log.push(TranslatorEpoch {
            epoch,
            generator_adv: sum_adv / n,
            discriminator: sum_d / n,
            cycle: sum_cyc / n,
            identity: sum_idt / n,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    model.g_s2t = Generator::Resnet(g_s2t);
    model.g_t2s = Generator::Resnet(g_t2s);
    model.d_s = Some(d_s);
    model.d_t = Some(d_t);
    Ok(model)
}
