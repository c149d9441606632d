//! Parameterized building blocks.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A square-kernel convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    weight: usize,
    bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `[out_c, in_c, kernel, kernel]` weights drawn from `N(0, std^2)`
    /// and zero biases. `std = None` selects He initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: Option<f32>,
        rng: &mut R,
    ) -> Self {
        let std = std.unwrap_or_else(|| (2.0 / (in_c * kernel * kernel) as f32).sqrt());
        let weight = store.add_normal(
            format!("{name}.weight"),
            [out_c, in_c, kernel, kernel],
            std,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}
