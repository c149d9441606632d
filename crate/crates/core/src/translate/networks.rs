//! Residual encoder-decoder generator and patch discriminator.

use hgit_nn::{Conv2d, Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::replace_params;

/// GAN weights start from `N(0, 0.02^2)`.
const GAN_INIT_STD: f32 = 0.02;
const OUTER_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    /// Channels after the stem; doubled at each of the two downsamplings.
    pub base_channels: usize,
    pub res_blocks: usize,
    /// Kernel of the first and last convolution (odd).
    #[serde(default = "default_outer_kernel")]
    pub outer_kernel: usize,
}

fn default_outer_kernel() -> usize {
    OUTER_KERNEL
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            base_channels: 8,
            res_blocks: 2,
            outer_kernel: OUTER_KERNEL,
        }
    }
}

/// Reflect-padded `k x k` stem, two stride-2 downsamplings, residual blocks,
/// two nearest-upsample + conv stages, reflect-padded `k x k` conv and a
/// sigmoid head. Every hidden
/// conv is followed by instance normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ResnetGenerator {
    pub arch: GeneratorArch,
    store: ParamStore,
    stem: Conv2d,
    down: [Conv2d; 2],
    res: Vec<(Conv2d, Conv2d)>,
    up: [Conv2d; 2],
    head: Conv2d,
}

impl ResnetGenerator {
    pub fn new<R: Rng + ?Sized>(arch: GeneratorArch, tag: u32, rng: &mut R) -> Self {
        let c = arch.base_channels;
        let std = Some(GAN_INIT_STD);
        let mut s = ParamStore::new(tag);
        let k = arch.outer_kernel;
        let stem = Conv2d::new(&mut s, "stem", 1, c, k, 1, 0, std, rng);
        let down = [
            Conv2d::new(&mut s, "down1", c, 2 * c, 3, 2, 1, std, rng),
            Conv2d::new(&mut s, "down2", 2 * c, 4 * c, 3, 2, 1, std, rng),
        ];
        let res = (0..arch.res_blocks)
            .map(|i| {
                (
                    Conv2d::new(
                        &mut s,
                        &format!("res{i}.a"),
                        4 * c,
                        4 * c,
                        3,
                        1,
                        0,
                        std,
                        rng,
                    ),
                    Conv2d::new(
                        &mut s,
                        &format!("res{i}.b"),
                        4 * c,
                        4 * c,
                        3,
                        1,
                        0,
                        std,
                        rng,
                    ),
                )
            })
            .collect();
        let up = [
            Conv2d::new(&mut s, "up1", 4 * c, 2 * c, 3, 1, 1, std, rng),
            Conv2d::new(&mut s, "up2", 2 * c, c, 3, 1, 1, std, rng),
        ];
        let head = Conv2d::new(&mut s, "head", c, 1, k, 1, 0, std, rng);
        Self {
            arch,
            store: s,
            stem,
            down,
            res,
            up,
            head,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces the parameters after checking names and shapes against this architecture.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        replace_params(&mut self.store, store)
    }

    /// Spatial sides must be multiples of 4 and at least 8.
    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h < 8 || w < 8 {
            return Err(Error::arg(format!(
                "generator input {h}x{w} must have sides divisible by 4"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = &self.store;
        let block = |g: &mut Graph, conv: &Conv2d, x: Var| {
            let y = conv.forward(g, s, x);
            let y = g.instance_norm(y);
            g.relu(y)
        };
        let pad = self.arch.outer_kernel / 2;
        let mut h = g.reflect_pad(x, pad);
        h = block(g, &self.stem, h);
        for conv in &self.down {
            h = block(g, conv, h);
        }
        for (a, b) in &self.res {
            let p = g.reflect_pad(h, 1);
            let r = block(g, a, p);
            let p = g.reflect_pad(r, 1);
            let r = b.forward(g, s, p);
            let r = g.instance_norm(r);
            h = g.add(h, r);
        }
        for conv in &self.up {
            let u = g.upsample2(h);
            h = block(g, conv, u);
        }
        let p = g.reflect_pad(h, pad);
        let out = self.head.forward(g, s, p);
        g.sigmoid(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub base_channels: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self { base_channels: 8 }
    }
}

/// Fully convolutional real/fake scorer over overlapping patches:
/// two stride-2 4x4 convs with leaky ReLU, then a 3x3 conv to one logit map.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub arch: DiscriminatorArch,
    store: ParamStore,
    convs: [Conv2d; 3],
}

impl PatchDiscriminator {
    pub fn new<R: Rng + ?Sized>(arch: DiscriminatorArch, tag: u32, rng: &mut R) -> Self {
        let c = arch.base_channels;
        let std = Some(GAN_INIT_STD);
        let mut s = ParamStore::new(tag);
        let convs = [
            Conv2d::new(&mut s, "d1", 1, c, 4, 2, 1, std, rng),
            Conv2d::new(&mut s, "d2", c, 2 * c, 4, 2, 1, std, rng),
            Conv2d::new(&mut s, "d3", 2 * c, 1, 3, 1, 1, std, rng),
        ];
        Self {
            arch,
            store: s,
            convs,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        replace_params(&mut self.store, store)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = &self.store;
        let h = self.convs[0].forward(g, s, x);
        let h = g.leaky_relu(h, 0.2);
        let h = self.convs[1].forward(g, s, h);
        let h = g.instance_norm(h);
        let h = g.leaky_relu(h, 0.2);
        self.convs[2].forward(g, s, h)
    }
}
