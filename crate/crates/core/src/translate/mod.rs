//! Source→target image translation: a cycle-consistent GAN and two
//! training-free baselines (histogram matching, Fourier domain adaptation).
//!
//! Every backend preserves image shape, ids and masks.

mod cyclegan;
mod fda;
mod histmatch;
mod networks;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cyclegan::{
    apply_translator, cycle_loss, train_translator, Generator, ImageMap, TranslatorEpoch,
    TranslatorModel,
};
pub use fda::{
    fda_split, fda_translate, fda_unclipped, fft2d, in_window, spectrum, window_half_width,
};
pub use histmatch::{hist_match, hist_match_split, matching_lut};
pub use networks::{DiscriminatorArch, GeneratorArch, PatchDiscriminator, ResnetGenerator};

use crate::error::{Error, Result};
use crate::imagecore::DatasetSplit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Cyclegan,
    HistMatch,
    Fda,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Cyclegan => "cyclegan",
            Backend::HistMatch => "hist-match",
            Backend::Fda => "fda",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclegan" => Ok(Backend::Cyclegan),
            "hist-match" => Ok(Backend::HistMatch),
            "fda" => Ok(Backend::Fda),
            other => Err(Error::arg(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationConfig {
    pub backend: Backend,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the cycle loss; the cycle norm is L1.
    pub lambda_cyc: f64,
    /// Weight of `|G_s2t(xt) - xt| + |G_t2s(xs) - xs|`, relative to `lambda_cyc`.
    pub lambda_identity: f64,
    /// Side fraction of the swapped low-frequency window.
    pub fda_beta: Option<f64>,
    pub seed: u64,
    pub learning_rate: f64,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Cyclegan,
            epochs: 10,
            batch_size: 4,
            lambda_cyc: 10.0,
            lambda_identity: 0.5,
            fda_beta: Some(0.05),
            seed: 0,
            learning_rate: 2e-4,
            generator: GeneratorArch::default(),
            discriminator: DiscriminatorArch::default(),
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self.backend {
            Backend::Cyclegan => {
                if self.epochs == 0 {
                    return bad("cyclegan needs at least one epoch".into());
                }
                if self.batch_size == 0 {
                    return bad("batch_size must be positive".into());
                }
                if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
                    return bad(format!(
                        "lambda_cyc {} must be finite and non-negative",
                        self.lambda_cyc
                    ));
                }
                if !(self.lambda_identity >= 0.0 && self.lambda_identity.is_finite()) {
                    return bad(format!(
                        "lambda_identity {} must be finite and non-negative",
                        self.lambda_identity
                    ));
                }
                if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
                    return bad(format!(
                        "learning_rate {} must be positive",
                        self.learning_rate
                    ));
                }
                if self.generator.base_channels == 0 || self.discriminator.base_channels == 0 {
                    return bad("network widths must be positive".into());
                }
                if self.generator.outer_kernel.is_multiple_of(2) || self.generator.outer_kernel > 7
                {
                    return bad(format!(
                        "outer_kernel {} must be odd and at most 7",
                        self.generator.outer_kernel
                    ));
                }
            }
            Backend::Fda => match self.fda_beta {
                Some(b) if b > 0.0 && b <= 0.5 => {}
                Some(b) => return bad(format!("fda_beta {b} outside (0, 0.5]")),
                None => return bad("fda backend needs fda_beta".into()),
            },
            Backend::HistMatch => {}
        }
        Ok(())
    }
}

/// Output of [`translate_split`]: the transformed split and, for the GAN
/// backend, the trained model.
pub struct Translation {
    pub transformed: DatasetSplit,
    pub model: Option<TranslatorModel>,
}

/// Runs the configured backend on `source` using unlabeled `target` images.
pub fn translate_split(
    source: &DatasetSplit,
    target: &DatasetSplit,
    cfg: &TranslationConfig,
) -> Result<Translation> {
    cfg.validate()?;
    if target.role().is_test() {
        return Err(Error::arg("translation must not see the target test split"));
    }
    match cfg.backend {
        Backend::Cyclegan => {
            let model = train_translator(source, target, cfg)?;
            let transformed = apply_translator(source, &model)?;
            Ok(Translation {
                transformed,
                model: Some(model),
            })
        }
        Backend::HistMatch => Ok(Translation {
            transformed: hist_match_split(source, target)?,
            model: None,
        }),
        Backend::Fda => Ok(Translation {
            transformed: fda_split(source, target, cfg.fda_beta.unwrap_or(0.05), cfg.seed)?,
            model: None,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TranslationConfig::default().validate().is_ok());
        let zero = TranslationConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let fda = TranslationConfig {
            backend: Backend::Fda,
            fda_beta: None,
            ..Default::default()
        };
        assert!(fda.validate().is_err());
        let wide = TranslationConfig {
            backend: Backend::Fda,
            fda_beta: Some(0.7),
            ..Default::default()
        };
        assert!(wide.validate().is_err());
    }

    #[test]
    fn backend_names_round_trip() {
        for b in [Backend::Cyclegan, Backend::HistMatch, Backend::Fda] {
            assert_eq!(b.as_str().parse::<Backend>().unwrap(), b);
            assert_eq!(serde_json::to_string(&b).unwrap(), format!("\"{b}\""));
        }
        assert!("gan".parse::<Backend>().is_err());
    }
}
