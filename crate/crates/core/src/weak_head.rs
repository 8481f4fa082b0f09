//! Category activation maps and the category-aware weak supervision loss.

use rand::Rng;

use crate::params::{BnStates, Bound, ParamStore};
use crate::tape::{BnMode, BnState, ConvGeometry, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};

/// Offset inside the suppression log.
pub const WEAK_DELTA: f64 = 1e-6;

/// Per-class maps after the `1×1 conv → BN` projection, one `H×W` plane per
/// class. `stride` is the number of input pixels per map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryActivationMaps {
    pub maps: Tensor,
    pub stride: usize,
}

impl CategoryActivationMaps {
    pub fn new(maps: Tensor, stride: usize) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(invalid("cam", format!("need L×H×W maps, got {:?}", maps.shape())));
        }
        Ok(Self { maps, stride })
    }

    pub fn num_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    /// Map of one class as an `H×W` tensor.
    pub fn class_map(&self, class: usize) -> Tensor {
        let plane = self.height() * self.width();
        Tensor::from_parts(
            vec![self.height(), self.width()],
            self.maps.data()[class * plane..(class + 1) * plane].to_vec(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakHead {
    pub in_channels: usize,
    pub num_classes: usize,
    pub delta: f64,
}

impl WeakHead {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            delta: WEAK_DELTA,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamStore, bn: &mut BnStates, rng: &mut R) {
        params.init_he("weak.conv.w", &[self.num_classes, self.in_channels, 1, 1], self.in_channels, rng);
        params.init_const("weak.bn.gamma", &[self.num_classes], 1.0);
        params.init_const("weak.bn.beta", &[self.num_classes], 0.0);
        bn.insert("weak.bn", BnState::new(self.num_classes));
    }

    /// `BN(conv1×1(F_w))` for an `N×C×H×W` batch; no activation.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, bn: &mut BnStates, f_w: Var, mode: BnMode) -> Result<Var> {
        let shape = tape.shape(f_w);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(invalid(
                "weak_head",
                format!("expected N×{}×H×W features, got {shape:?}", self.in_channels),
            ));
        }
        let conv = tape.conv2d(f_w, bound.get("weak.conv.w")?, None, ConvGeometry::default())?;
        tape.batch_norm(
            conv,
            bound.get("weak.bn.gamma")?,
            bound.get("weak.bn.beta")?,
            bn.get_mut("weak.bn")?,
            mode,
        )
    }

    /// Suppression loss for one image's `L×H×W` maps given the present
    /// classes.
    pub fn loss(&self, tape: &mut Tape, maps: Var, present: &[usize]) -> Result<Var> {
        let l = tape.shape(maps).first().copied().unwrap_or(0);
        if let Some(&bad) = present.iter().find(|&&k| k >= l) {
            return Err(invalid("weak_loss", format!("class {bad} outside 0..{l}")));
        }
        let mut absent = vec![true; l];
        for &k in present {
            absent[k] = false;
        }
        tape.weak_loss(maps, &absent, self.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> (WeakHead, ParamStore, BnStates) {
        let h = WeakHead::new(4, 3);
        let mut p = ParamStore::new();
        let mut bn = BnStates::default();
        h.init(&mut p, &mut bn, &mut ChaCha8Rng::seed_from_u64(0));
        (h, p, bn)
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let (h, mut p, mut bn) = head();
        p.init_const("weak.conv.w", &[3, 4, 1, 1], 0.0);
        p.init_const("weak.bn.gamma", &[3], 0.0);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[2, 4, 2, 2], 0.7));
        let m = h.project(&mut tape, &bound, &mut bn, x, BnMode::Train).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_stats_eval_is_passthrough() {
        let h = WeakHead::new(1, 1);
        let mut p = ParamStore::new();
        let mut bn = BnStates::default();
        h.init(&mut p, &mut bn, &mut ChaCha8Rng::seed_from_u64(0));
        p.init_const("weak.conv.w", &[1, 1, 1, 1], 1.0);
        let state = bn.get_mut("weak.bn").unwrap();
        state.running_var = vec![1.0 - state.eps];
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 0.37));
        let m = h.project(&mut tape, &bound, &mut bn, x, BnMode::Eval).unwrap();
        assert!((tape.value(m).item() - 0.37).abs() < 1e-12);
    }

    #[test]
    fn train_mode_maps_are_standardized() {
        let (h, p, mut bn) = head();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::new(vec![3, 4, 2, 2], (0..48).map(|_| rng.gen_range(-1.0..2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let vx = tape.constant(x);
        let m = h.project(&mut tape, &bound, &mut bn, vx, BnMode::Train).unwrap();
        let v = tape.value(m);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..3).flat_map(|n| v.data()[(n * 3 + ch) * 4..(n * 3 + ch + 1) * 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn loss_matches_four_loop_oracle() {
        let (h, _, _) = head();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let maps = Tensor::new(vec![3, 2, 2], (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let gt = [0usize];
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut inner = 0.0;
                for k in 0..3 {
                    if gt.contains(&k) {
                        continue;
                    }
                    inner += (1.0 - sigmoid(maps.at(&[k, i, j])) + WEAK_DELTA).ln();
                }
                oracle += inner / 2.0;
            }
        }
        oracle = -oracle / 4.0;
        let mut tape = Tape::new();
        let m = tape.constant(maps);
        let l = h.loss(&mut tape, m, &gt).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn all_present_gives_zero_and_bad_class_errors() {
        let (h, _, _) = head();
        let mut tape = Tape::new();
        let m = tape.param(Tensor::full(&[3, 2, 2], 1.5));
        let l = h.loss(&mut tape, m, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(m).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(h.loss(&mut tape, m, &[3]).is_err());
    }
}
