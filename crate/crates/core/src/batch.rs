//! Conversions between images/masks and NCHW tensors.

use hgit_nn::Tensor;

use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, GrayImage};

/// Checks that every image shares one shape and returns it as `(height, width)`.
pub(crate) fn common_shape<'a>(
    images: impl IntoIterator<Item = &'a GrayImage>,
) -> Result<(usize, usize)> {
    let mut shape = None;
    for img in images {
        match shape {
            None => shape = Some(img.shape()),
            Some(s) if s != img.shape() => {
                return Err(Error::arg(format!(
                    "mixed image shapes {s:?} and {:?}",
                    img.shape()
                )));
            }
            Some(_) => {}
        }
    }
    shape.ok_or_else(|| Error::arg("empty image batch"))
}

pub(crate) fn images_to_tensor(images: &[&GrayImage]) -> Tensor {
    let (h, w) = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend_from_slice(img.pixels());
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

pub(crate) fn masks_to_tensor(masks: &[&BinaryMask]) -> Tensor {
    let (h, w) = masks[0].shape();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        data.extend(m.labels().iter().map(|&v| v as f32));
    }
    Tensor::from_vec([masks.len(), 1, h, w], data)
}

/// Splits a `[N, 1, H, W]` tensor into images, clipping into `[0, 1]`.
pub(crate) fn tensor_to_images(t: &Tensor) -> Result<Vec<GrayImage>> {
    (0..t.batch())
        .map(|n| GrayImage::from_clipped(t.width(), t.height(), t.sample(n).to_vec()))
        .collect()
}
