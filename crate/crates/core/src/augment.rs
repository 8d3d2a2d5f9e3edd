//! SpecAugment: random time and frequency masking of feature matrices.
//!
//! Masked cells are set to zero (applied after normalization, so zero is
//! the corpus mean); every other cell passes through bit-identical. Time
//! warping is not implemented.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, NUM_MELS};

/// Mask counts and maximum widths. `time_width <= 1.0` is read as a
/// fraction of the utterance length (rounded down), larger values as an
/// absolute frame count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub time_width: f64,
    pub freq_masks: usize,
    pub freq_width: usize,
}

impl SpecAugmentConfig {
    /// The BLSTM setting `(T_n, T_w, F_n, F_w) = (1, 50, 1, 15)`.
    pub fn blstm() -> Self {
        SpecAugmentConfig {
            time_masks: 1,
            time_width: 50.0,
            freq_masks: 1,
            freq_width: 15,
        }
    }

    /// The Conformer setting `(10, 0.05 * T, 2, 27)`.
    pub fn conformer() -> Self {
        SpecAugmentConfig {
            time_masks: 10,
            time_width: 0.05,
            freq_masks: 2,
            freq_width: 27,
        }
    }

    pub fn disabled() -> Self {
        SpecAugmentConfig {
            time_masks: 0,
            time_width: 0.0,
            freq_masks: 0,
            freq_width: 0,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.time_masks == 0 && self.freq_masks == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_width < 0.0 {
            return Err(Error::Config("specaugment: negative time width".into()));
        }
        if self.freq_width > NUM_MELS {
            return Err(Error::Config(format!(
                "specaugment: freq width {} exceeds {NUM_MELS} bins",
                self.freq_width
            )));
        }
        Ok(())
    }

    /// Maximum time-mask width in frames for an utterance of length `t`.
    pub fn resolve_time_width(&self, t: usize) -> Result<usize> {
        if self.time_width <= 1.0 {
            if t == 0 && self.time_masks > 0 {
                return Err(Error::invalid(
                    "specaugment: fractional time width on empty utterance",
                ));
            }
            Ok((self.time_width * t as f64).floor() as usize)
        } else {
            Ok(self.time_width as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Time,
    Freq,
}

/// One sampled segment, for inspection by callers and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSegment {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Applies SpecAugment and reports the segments that were sampled.
pub fn augment_recorded(
    f: &FeatureMatrix,
    cfg: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Result<(FeatureMatrix, Vec<MaskSegment>)> {
    cfg.validate()?;
    let t = f.num_frames();
    let max_tw = cfg.resolve_time_width(t)?;
    let mut segments = Vec::with_capacity(cfg.time_masks + cfg.freq_masks);
    for _ in 0..cfg.time_masks {
        segments.push(sample_segment(MaskAxis::Time, max_tw, t, rng));
    }
    for _ in 0..cfg.freq_masks {
        segments.push(sample_segment(MaskAxis::Freq, cfg.freq_width, NUM_MELS, rng));
    }

    let mut data = f.data().to_vec();
    for seg in &segments {
        match seg.axis {
            MaskAxis::Time => {
                for ti in seg.start..seg.start + seg.width {
                    for v in &mut data[ti * NUM_MELS..(ti + 1) * NUM_MELS] {
                        *v = 0.0;
                    }
                }
            }
            MaskAxis::Freq => {
                for ti in 0..t {
                    for v in &mut data[ti * NUM_MELS + seg.start..ti * NUM_MELS + seg.start + seg.width]
                    {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok((FeatureMatrix::new(t, data)?, segments))
}

/// Applies SpecAugment; same seed gives the same output.
pub fn augment(
    f: &FeatureMatrix,
    cfg: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Result<FeatureMatrix> {
    augment_recorded(f, cfg, rng).map(|(out, _)| out)
}

/// Width uniform on `{0..=max_width}` (clamped to the axis length), start
/// uniform over the valid positions.
fn sample_segment(axis: MaskAxis, max_width: usize, len: usize, rng: &mut impl Rng) -> MaskSegment {
    let width = if max_width == 0 {
        0
    } else {
        rng.gen_range(0..=max_width).min(len)
    };
    let start = if len > width {
        rng.gen_range(0..=len - width)
    } else {
        0
    };
    MaskSegment { axis, start, width }
}
