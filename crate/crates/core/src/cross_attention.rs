//! Local branch: embedding of pooled proposals, cross-granularity attention
//! over `[F_g; F_l]`, and the fused local prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamStore};
use crate::tape::{ConvGeometry, Tape, Var};
use crate::tensor::{invalid, Result};

/// How per-proposal logits are merged into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalBranch {
    /// Channels of the pooled `F_r` features.
    pub in_channels: usize,
    /// Token width, equal to the global feature width.
    pub channels: usize,
    pub num_classes: usize,
    /// Stacked attention layers; 0 sends the local features straight to the
    /// classifier.
    pub depth: usize,
    /// Divide attention scores by `√C`.
    pub scaled: bool,
    pub fusion: Fusion,
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    /// One `(k+1)×(k+1)` map per layer.
    pub attn_maps: Vec<Var>,
    /// Output tokens of the last layer, `(k+1)×C`.
    pub tokens: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalPrediction {
    /// `k×L` logits of the individual proposals.
    pub token_logits: Var,
    pub logits: Var,
    pub probs: Var,
}

impl LocalBranch {
    pub fn init<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) {
        let (c, ci) = (self.channels, self.in_channels);
        params.init_uniform("local.embed.w", &[c, ci, 1, 1], 1.0 / (ci as f64).sqrt(), rng);
        params.init_const("local.embed.b", &[c], 0.0);
        for d in 0..self.depth {
            for p in ["q", "k", "v"] {
                params.init_uniform(&format!("cross.{d}.{p}.w"), &[c, c], (3.0 / c as f64).sqrt(), rng);
                params.init_const(&format!("cross.{d}.{p}.b"), &[c], 0.0);
            }
        }
        params.init_uniform("local.cls.w", &[self.num_classes, c], 1.0 / (c as f64).sqrt(), rng);
        params.init_const("local.cls.b", &[self.num_classes], 0.0);
    }

    /// `k×C'×S×S → k×C`: shared `1×1` conv, ReLU, spatial max.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<Var> {
        let shape = tape.shape(pooled);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(invalid(
                "local_embed",
                format!("expected k×{}×S×S, got {shape:?}", self.in_channels),
            ));
        }
        let conv = tape.conv2d(
            pooled,
            bound.get("local.embed.w")?,
            Some(bound.get("local.embed.b")?),
            ConvGeometry::default(),
        )?;
        let act = tape.relu(conv)?;
        tape.spatial_max(act)
    }

    /// Token set with the global feature as row 0.
    pub fn tokens(&self, tape: &mut Tape, global_feature: Var, local: Var) -> Result<Var> {
        let c = self.channels;
        if tape.shape(global_feature) != [c] {
            return Err(invalid("tokens", format!("global feature {:?}, want [{c}]", tape.shape(global_feature))));
        }
        let g = tape.reshape(global_feature, &[1, c])?;
        tape.concat(&[g, local])
    }

    /// `depth` layers of `A = softmax(Q Kᵀ)`, `tokens ← A · V`.
    pub fn attend(&self, tape: &mut Tape, bound: &Bound, tokens: Var) -> Result<CrossAttention> {
        let c = self.channels;
        let mut x = tokens;
        let mut attn_maps = Vec::with_capacity(self.depth);
        for d in 0..self.depth {
            let mut proj = |p: &str| -> Result<Var> {
                tape.linear(
                    x,
                    bound.get(&format!("cross.{d}.{p}.w"))?,
                    Some(bound.get(&format!("cross.{d}.{p}.b"))?),
                )
            };
            let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
            let kt = tape.transpose(k)?;
            let mut scores = tape.matmul(q, kt)?;
            if self.scaled {
                scores = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
            }
            let a = tape.softmax_rows(scores)?;
            attn_maps.push(a);
            x = tape.matmul(a, v)?;
        }
        Ok(CrossAttention { attn_maps, tokens: x })
    }

    /// Shared `C→L` projection of each local token, fused across tokens.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, local_tokens: Var) -> Result<LocalPrediction> {
        let token_logits = tape.linear(
            local_tokens,
            bound.get("local.cls.w")?,
            Some(bound.get("local.cls.b")?),
        )?;
        let logits = match self.fusion {
            Fusion::Max => tape.max_axis0(token_logits)?,
            Fusion::Sum => tape.sum_axis0(token_logits)?,
        };
        let probs = tape.sigmoid(logits)?;
        Ok(LocalPrediction {
            token_logits,
            logits,
            probs,
        })
    }

    /// Full local path from pooled proposals to the local prediction.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        global_feature: Var,
        pooled: Var,
    ) -> Result<(Option<CrossAttention>, LocalPrediction)> {
        let local = self.embed(tape, bound, pooled)?;
        if self.depth == 0 {
            return Ok((None, self.predict(tape, bound, local)?));
        }
        let k = tape.shape(local)[0];
        let tokens = self.tokens(tape, global_feature, local)?;
        let cross = self.attend(tape, bound, tokens)?;
        let sliced = tape.slice(cross.tokens, 1, k + 1)?;
        let pred = self.predict(tape, bound, sliced)?;
        Ok((Some(cross), pred))
    }

    pub fn loss(&self, tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
        tape.bce(probs, labels)
    }
}
