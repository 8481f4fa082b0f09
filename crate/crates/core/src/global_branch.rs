//! Global branch: spatial self-attention over the stride-32 features, a
//! shared per-position classifier with spatial max pooling, and the global
//! binary cross-entropy.

use rand::Rng;

use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalBranch {
    pub channels: usize,
    pub num_classes: usize,
    /// When false the backbone features go straight to the classifier.
    pub attention: bool,
}

/// Tape handles produced by [`GlobalBranch::self_attention`].
#[derive(Debug, Clone, Copy)]
pub struct GlobalAttention {
    /// `HW×HW` row-stochastic attention map; `None` with attention disabled.
    pub attn_map: Option<Var>,
    /// Attended features, `C×H×W`.
    pub attended: Var,
    /// Spatial max of the attended features, `C`.
    pub feature: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalPrediction {
    pub logits: Var,
    pub probs: Var,
}

/// `C×H×W → HW×C` token matrix.
pub(crate) fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let [c, h, w] = *tape.shape(x) else {
        return Err(invalid("tokens", format!("need C×H×W, got {:?}", tape.shape(x))));
    };
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

impl GlobalBranch {
    pub fn init<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) {
        let c = self.channels;
        for p in ["q", "k", "v"] {
            params.init_uniform(&format!("global.{p}.w"), &[c, c], (3.0 / c as f64).sqrt(), rng);
            params.init_const(&format!("global.{p}.b"), &[c], 0.0);
        }
        params.init_uniform("global.cls.w", &[self.num_classes, c], 1.0 / (c as f64).sqrt(), rng);
        params.init_const("global.cls.b", &[self.num_classes], 0.0);
    }

    /// Single-head attention over the `HW` spatial tokens of `f32`:
    /// `A = softmax(Q Kᵀ / √C)` and attended tokens `A · V`.
    pub fn self_attention(&self, tape: &mut Tape, bound: &Bound, f32: Var) -> Result<GlobalAttention> {
        let [c, h, w] = *tape.shape(f32) else {
            return Err(invalid("global_attention", format!("need C×H×W, got {:?}", tape.shape(f32))));
        };
        if c != self.channels {
            return Err(invalid("global_attention", format!("expected {} channels, got {c}", self.channels)));
        }
        let tokens = to_tokens(tape, f32)?;
        let (attn_map, attended_tokens) = if self.attention {
            let proj = |tape: &mut Tape, p: &str| -> Result<Var> {
                tape.linear(
                    tokens,
                    bound.get(&format!("global.{p}.w"))?,
                    Some(bound.get(&format!("global.{p}.b"))?),
                )
            };
            let q = proj(tape, "q")?;
            let k = proj(tape, "k")?;
            let v = proj(tape, "v")?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
            let a = tape.softmax_rows(scaled)?;
            (Some(a), tape.matmul(a, v)?)
        } else {
            (None, tokens)
        };
        let feature = tape.max_axis0(attended_tokens)?;
        let channel_major = tape.transpose(attended_tokens)?;
        let attended = tape.reshape(channel_major, &[c, h, w])?;
        Ok(GlobalAttention {
            attn_map,
            attended,
            feature,
        })
    }

    /// Shared `C→L` projection at every position, then the spatial max.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, attended: Var) -> Result<GlobalPrediction> {
        let tokens = to_tokens(tape, attended)?;
        let per_position = tape.linear(
            tokens,
            bound.get("global.cls.w")?,
            Some(bound.get("global.cls.b")?),
        )?;
        let logits = tape.max_axis0(per_position)?;
        let probs = tape.sigmoid(logits)?;
        Ok(GlobalPrediction { logits, probs })
    }

    /// Summed BCE between branch probabilities and a multi-hot target.
    pub fn loss(&self, tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
        tape.bce(probs, labels)
    }
}
