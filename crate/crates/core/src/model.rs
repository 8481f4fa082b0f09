//! The assembled network: backbone, global branch, weak head, proposal
//! selection and the local branch, with the switches the ablations need.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Level, DEFAULT_WIDTHS};
use crate::cross_attention::{CrossAttention, Fusion, LocalBranch, LocalPrediction};
use crate::global_branch::{GlobalAttention, GlobalBranch, GlobalPrediction};
use crate::params::{BnStates, Bound, ParamStore};
use crate::roi::{pool_proposals, select_rois, RegionProposal, SelectionConfig};
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};
use crate::weak_head::{CategoryActivationMaps, WeakHead};

/// Which loss terms are trained. The local branch only runs when its loss
/// is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub global: bool,
    pub weak: bool,
    pub local: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            global: true,
            weak: true,
            local: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub widths: [usize; 5],
    /// Self-attention in the global branch.
    pub global_attention: bool,
    /// Cross-attention layers; 0 disables cross-attention.
    pub cross_depth: usize,
    pub cross_scaled: bool,
    pub fusion: Fusion,
    /// Level feeding the weak head (`F_w`).
    pub weak_level: Level,
    /// Level feeding ROI pooling (`F_r`).
    pub roi_level: Level,
    pub selection: SelectionConfig,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            widths: DEFAULT_WIDTHS,
            global_attention: true,
            cross_depth: 1,
            cross_scaled: false,
            fusion: Fusion::Max,
            weak_level: Level::S32,
            roi_level: Level::S16,
            selection: SelectionConfig::default(),
        }
    }
}

/// Per-image tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ImageOutput {
    pub attention: GlobalAttention,
    pub global: GlobalPrediction,
    /// `L×H_w×W_w` category activation maps.
    pub cam: Var,
    pub proposals: Vec<RegionProposal>,
    pub cross: Option<CrossAttention>,
    pub local: Option<LocalPrediction>,
}

/// Eval-mode results for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Vec<f64>,
    pub global_probs: Vec<f64>,
    pub global_logits: Vec<f64>,
    pub local_probs: Option<Vec<f64>>,
    pub cam: CategoryActivationMaps,
    pub proposals: Vec<RegionProposal>,
    /// Last cross-attention map, when the local branch ran with attention.
    pub cross_attention: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub global: GlobalBranch,
    pub weak: WeakHead,
    pub local: LocalBranch,
}

/// Final prediction: mean of the enabled branches' probabilities.
pub fn fuse_predictions(global: &[f64], local: Option<&[f64]>, switches: LossSwitches) -> Vec<f64> {
    match local {
        Some(l) if switches.local && switches.global => global.iter().zip(l).map(|(g, l)| (g + l) / 2.0).collect(),
        Some(l) if switches.local => l.to_vec(),
        _ => global.to_vec(),
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let l = config.num_classes;
        if l == 0 {
            return Err(invalid("model", "need at least one class"));
        }
        config.selection.validate()?;
        if config.selection.k_s > l {
            return Err(invalid("model", format!("k_s = {} exceeds {l} classes", config.selection.k_s)));
        }
        if config.weak_level.stride() < config.roi_level.stride() {
            return Err(invalid("model", "the weak-head level must not be finer than the ROI level"));
        }
        let backbone = Backbone { widths: config.widths };
        let global = GlobalBranch {
            channels: backbone.channels(Level::S32),
            num_classes: l,
            attention: config.global_attention,
        };
        let weak = WeakHead::new(backbone.channels(config.weak_level), l);
        let local = LocalBranch {
            in_channels: backbone.channels(config.roi_level),
            channels: global.channels,
            num_classes: l,
            depth: config.cross_depth,
            scaled: config.cross_scaled,
            fusion: config.fusion,
        };
        Ok(Self {
            config,
            backbone,
            global,
            weak,
            local,
        })
    }

    /// Fresh parameters and BN state drawn from `seed`.
    pub fn init(&self, seed: u64) -> (ParamStore, BnStates) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = BnStates::default();
        self.backbone.init(&mut params, &mut bn, &mut rng);
        self.global.init(&mut params, &mut rng);
        self.weak.init(&mut params, &mut bn, &mut rng);
        self.local.init(&mut params, &mut rng);
        (params, bn)
    }

    fn image_slice(tape: &mut Tape, batch: Var, n: usize) -> Result<Var> {
        let shape = tape.shape(batch)[1..].to_vec();
        let one = tape.slice(batch, n, n + 1)?;
        tape.reshape(one, &shape)
    }

    /// Forward pass over an `N×3×H×W` batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        bn: &mut BnStates,
        images: Var,
        mode: BnMode,
        switches: LossSwitches,
    ) -> Result<Vec<ImageOutput>> {
        let n = tape.shape(images).first().copied().unwrap_or(0);
        let pyr = self.backbone.forward(tape, bound, bn, images, mode)?;
        let f_w = *pyr.level(self.config.weak_level);
        let f_r = *pyr.level(self.config.roi_level);
        let cams = self.weak.project(tape, bound, bn, f_w, mode)?;
        let ratio = self.config.weak_level.stride() as f64 / self.config.roi_level.stride() as f64;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let f32_i = Self::image_slice(tape, pyr.f32, i)?;
            let attention = self.global.self_attention(tape, bound, f32_i)?;
            let global = self.global.predict(tape, bound, attention.attended)?;
            let cam = Self::image_slice(tape, cams, i)?;
            let (proposals, cross, local) = if switches.local {
                let maps = CategoryActivationMaps::new(tape.value(cam).clone(), self.config.weak_level.stride())?;
                let logits = tape.value(global.logits).data().to_vec();
                let proposals = select_rois(&maps, &logits, bn.get("weak.bn")?, &self.config.selection)?;
                let f_r_i = Self::image_slice(tape, f_r, i)?;
                let pooled = pool_proposals(tape, f_r_i, &proposals, ratio, self.config.selection.pool_size)?;
                let (cross, pred) = self.local.forward(tape, bound, attention.feature, pooled)?;
                (proposals, cross, Some(pred))
            } else {
                (Vec::new(), None, None)
            };
            out.push(ImageOutput {
                attention,
                global,
                cam,
                proposals,
                cross,
                local,
            });
        }
        Ok(out)
    }

    /// Eval-mode inference on one `3×H×W` image. Proposals are always
    /// computed; the local prediction only when `switches.local` is set.
    pub fn infer(&self, params: &ParamStore, bn: &BnStates, image: &Tensor, switches: LossSwitches) -> Result<Inference> {
        let [3, h, w] = *image.shape() else {
            return Err(invalid("infer", format!("need a 3×H×W image, got {:?}", image.shape())));
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(image.reshape(&[1, 3, h, w])?);
        let mut bn = bn.clone();
        let with_local = LossSwitches { local: true, ..switches };
        let out = self
            .forward(&mut tape, &bound, &mut bn, x, BnMode::Eval, with_local)?
            .pop()
            .ok_or_else(|| invalid("infer", "empty batch"))?;
        let global_probs = tape.value(out.global.probs).data().to_vec();
        let local_probs = out.local.map(|p| tape.value(p.probs).data().to_vec());
        let probs = fuse_predictions(&global_probs, local_probs.as_deref(), switches);
        Ok(Inference {
            probs,
            global_logits: tape.value(out.global.logits).data().to_vec(),
            global_probs,
            local_probs: if switches.local { local_probs } else { None },
            cam: CategoryActivationMaps::new(tape.value(out.cam).clone(), self.config.weak_level.stride())?,
            proposals: out.proposals,
            cross_attention: out.cross.and_then(|c| c.attn_maps.last().map(|&a| tape.value(a).clone())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> Model {
        let mut cfg = ModelConfig::new(5);
        cfg.widths = [4, 4, 6, 6, 8];
        Model::new(cfg).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn fusion_averages_enabled_branches() {
        let on = LossSwitches::default();
        assert_eq!(fuse_predictions(&[0.2], Some(&[0.8]), on), vec![0.5]);
        assert_eq!(fuse_predictions(&[0.3, 0.6], Some(&[0.3, 0.6]), on), vec![0.3, 0.6]);
        let global_only = LossSwitches { local: false, ..on };
        assert_eq!(fuse_predictions(&[0.2], Some(&[0.8]), global_only), vec![0.2]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ModelConfig::new(3);
        assert!(Model::new(cfg.clone()).is_err());
        cfg.num_classes = 4;
        assert!(Model::new(cfg.clone()).is_ok());
        cfg.weak_level = Level::S8;
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn inference_shapes_and_purity() {
        let m = small();
        let (params, bn) = m.init(1);
        let img = image(2);
        let a = m.infer(&params, &bn, &img, LossSwitches::default()).unwrap();
        assert_eq!(a.probs.len(), 5);
        assert!(a.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a.proposals.len(), 24);
        assert_eq!(a.cam.maps.shape(), &[5, 2, 2]);
        assert_eq!(a.cross_attention.as_ref().unwrap().shape(), &[25, 25]);
        let b = m.infer(&params, &bn, &img, LossSwitches::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_loss_reaches_first_layer() {
        let m = small();
        let (params, mut bn) = m.init(3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut batch = image(4).into_data();
        batch.extend(image(5).into_data());
        let x = tape.constant(Tensor::new(vec![2, 3, 64, 64], batch).unwrap());
        let out = m.forward(&mut tape, &bound, &mut bn, x, BnMode::Train, LossSwitches::default()).unwrap();
        let probs = out[0].local.unwrap().probs;
        let loss = m.local.loss(&mut tape, probs, &[1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        tape.backward(loss).unwrap();
        for name in ["backbone.s1.w", "local.cls.w", "cross.0.q.w", "local.embed.w"] {
            let g = tape.grad(bound.get(name).unwrap()).unwrap();
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} got no gradient");
        }
    }
}
