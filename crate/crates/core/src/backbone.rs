//! Five-stage convolutional feature extractor producing the stride-8/16/32
//! feature pyramid.
//!
//! Each stage is `3×3 conv (pad 1, no bias) → batch norm → ReLU → 2×2 max
//! pool`; the outputs of stages 3, 4 and 5 are the pyramid levels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{BnStates, Bound, ParamStore};
use crate::tape::{BnMode, BnState, ConvGeometry, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};

pub const DEFAULT_WIDTHS: [usize; 5] = [16, 32, 64, 64, 96];

/// Pyramid level, named by its stride in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    S8,
    S16,
    S32,
}

impl Level {
    pub fn stride(self) -> usize {
        match self {
            Level::S8 => 8,
            Level::S16 => 16,
            Level::S32 => 32,
        }
    }

    pub fn from_stride(stride: usize) -> Option<Self> {
        match stride {
            8 => Some(Level::S8),
            16 => Some(Level::S16),
            32 => Some(Level::S32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub f8: T,
    pub f16: T,
    pub f32: T,
}

impl<T> FeaturePyramid<T> {
    pub fn level(&self, level: Level) -> &T {
        match level {
            Level::S8 => &self.f8,
            Level::S16 => &self.f16,
            Level::S32 => &self.f32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backbone {
    pub widths: [usize; 5],
}

impl Default for Backbone {
    fn default() -> Self {
        Self {
            widths: DEFAULT_WIDTHS,
        }
    }
}

impl Backbone {
    pub fn channels(&self, level: Level) -> usize {
        match level {
            Level::S8 => self.widths[2],
            Level::S16 => self.widths[3],
            Level::S32 => self.widths[4],
        }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamStore, bn: &mut BnStates, rng: &mut R) {
        let mut c_in = 3;
        for (i, &c_out) in self.widths.iter().enumerate() {
            let p = format!("backbone.s{}", i + 1);
            params.init_he(&format!("{p}.w"), &[c_out, c_in, 3, 3], c_in * 9, rng);
            params.init_const(&format!("{p}.bn.gamma"), &[c_out], 1.0);
            params.init_const(&format!("{p}.bn.beta"), &[c_out], 0.0);
            bn.insert(format!("{p}.bn"), BnState::new(c_out));
            c_in = c_out;
        }
    }

    /// Checks that an `H×W` input yields whole feature maps at stride 32.
    pub fn check_input(height: usize, width: usize) -> Result<()> {
        if height < 32 || width < 32 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(invalid(
                "backbone",
                format!("input {height}x{width} must have sides that are positive multiples of 32"),
            ));
        }
        Ok(())
    }

    /// Runs the backbone on an `N×3×H×W` batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        bn: &mut BnStates,
        images: Var,
        mode: BnMode,
    ) -> Result<FeaturePyramid<Var>> {
        let shape = tape.shape(images).to_vec();
        let [_, 3, h, w] = shape[..] else {
            return Err(invalid("backbone", format!("need N×3×H×W images, got {shape:?}")));
        };
        Self::check_input(h, w)?;
        let mut x = images;
        let mut taps = Vec::with_capacity(3);
        for i in 1..=5 {
            let p = format!("backbone.s{i}");
            let conv = tape.conv2d(x, bound.get(&format!("{p}.w"))?, None, ConvGeometry { stride: 1, pad: 1 })?;
            let normed = tape.batch_norm(
                conv,
                bound.get(&format!("{p}.bn.gamma"))?,
                bound.get(&format!("{p}.bn.beta"))?,
                bn.get_mut(&format!("{p}.bn"))?,
                mode,
            )?;
            let act = tape.relu(normed)?;
            x = tape.max_pool2d(act, 2)?;
            if i >= 3 {
                taps.push(x);
            }
        }
        Ok(FeaturePyramid {
            f8: taps[0],
            f16: taps[1],
            f32: taps[2],
        })
    }

    /// Eval-mode feature extraction for one `3×H×W` image.
    pub fn extract(&self, params: &ParamStore, bn: &BnStates, image: &Tensor) -> Result<FeaturePyramid<Tensor>> {
        let [3, h, w] = *image.shape() else {
            return Err(invalid("backbone", format!("need a 3×H×W image, got {:?}", image.shape())));
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(image.reshape(&[1, 3, h, w])?);
        let mut bn = bn.clone();
        let pyr = self.forward(&mut tape, &bound, &mut bn, x, BnMode::Eval)?;
        let squeeze = |v: Var| {
            let t = tape.value(v);
            t.reshape(&t.shape()[1..])
        };
        Ok(FeaturePyramid {
            f8: squeeze(pyr.f8)?,
            f16: squeeze(pyr.f16)?,
            f32: squeeze(pyr.f32)?,
        })
    }
}
