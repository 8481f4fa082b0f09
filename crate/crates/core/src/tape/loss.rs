use super::elementwise::sigmoid;
use super::{GradSink, Op, Tape, Var};
use crate::tensor::{invalid, Result, Tensor, TensorError};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl Tape {
    /// Summed binary cross-entropy `−Σ [y log p + (1−y) log(1−p)]`.
    pub fn bce(&mut self, probs: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: p.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        if target.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(invalid("bce", "targets must be 0 or 1"));
        }
        let loss: f64 = p
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let pc = clamp_prob(p);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                target: target.to_vec(),
            },
            "bce",
        )
    }

    /// Suppression loss over the maps of absent classes:
    /// `−1/(H·W) Σ_ij 1/N_abs Σ_{k absent} log(1 − σ(p̂ᵏᵢⱼ) + δ)`.
    ///
    /// `maps` is `L×H×W`; `absent[k]` marks classes missing from the image.
    /// Returns zero when no class is absent. Present-class maps receive an
    /// exactly zero gradient.
    pub fn weak_loss(&mut self, maps: Var, absent: &[bool], delta: f64) -> Result<Var> {
        let t = self.value(maps);
        let [l, h, w] = *t.shape() else {
            return Err(invalid("weak_loss", format!("need L×H×W maps, got {:?}", t.shape())));
        };
        if absent.len() != l {
            return Err(TensorError::ShapeMismatch {
                op: "weak_loss",
                lhs: t.shape().to_vec(),
                rhs: vec![absent.len()],
            });
        }
        let n_abs = absent.iter().filter(|&&a| a).count();
        let loss = if n_abs == 0 {
            0.0
        } else {
            let plane = h * w;
            let mut acc = 0.0;
            for (k, chunk) in t.data().chunks(plane).enumerate() {
                if absent[k] {
                    acc += chunk.iter().map(|&p| (1.0 - sigmoid(p) + delta).ln()).sum::<f64>();
                }
            }
            -acc / (plane as f64 * n_abs as f64)
        };
        self.push(
            Tensor::scalar(loss),
            Op::WeakLoss {
                maps,
                absent: absent.to_vec(),
                delta,
            },
            "weak_loss",
        )
    }
}

pub(super) fn bce_backward(
    probs: Var,
    tp: &Tensor,
    target: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    if let Some(s) = sink.slot(probs) {
        for ((s, &p), &y) in s.iter_mut().zip(tp.data()).zip(target) {
            let pc = clamp_prob(p);
            *s += g[0] * (-(y / pc) + (1.0 - y) / (1.0 - pc));
        }
    }
}

pub(super) fn weak_loss_backward(
    maps: Var,
    tm: &Tensor,
    absent: &[bool],
    delta: f64,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let n_abs = absent.iter().filter(|&&a| a).count();
    if n_abs == 0 {
        return;
    }
    let [_, h, w] = *tm.shape() else { unreachable!() };
    let plane = h * w;
    let scale = g[0] / (plane as f64 * n_abs as f64);
    if let Some(s) = sink.slot(maps) {
        for (k, (schunk, mchunk)) in s.chunks_mut(plane).zip(tm.data().chunks(plane)).enumerate() {
            if !absent[k] {
                continue;
            }
            for (s, &p) in schunk.iter_mut().zip(mchunk) {
                let sg = sigmoid(p);
                *s += scale * sg * (1.0 - sg) / (1.0 - sg + delta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_half_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5]).unwrap());
        let l = tape.bce(p, &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_optimum_is_near_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap());
        let l = tape.bce(p, &[1.0, 0.0, 1.0]).unwrap();
        assert!(tape.value(l).item() < 1e-9);
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.3, 0.4]).unwrap());
        assert!(tape.bce(p, &[1.0]).is_err());
        assert!(tape.bce(p, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn weak_loss_edge_values() {
        let delta = 1e-6;
        let mut tape = Tape::new();
        let zeros = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let l = tape.weak_loss(zeros, &[false, true, true], delta).unwrap();
        assert!((tape.value(l).item() - 0.693_146).abs() < 1e-6);
        let none = tape.weak_loss(zeros, &[false; 3], delta).unwrap();
        assert_eq!(tape.value(none).item(), 0.0);
        let very_negative = tape.constant(Tensor::full(&[2, 1, 1], -800.0));
        let l = tape.weak_loss(very_negative, &[true, true], delta).unwrap();
        assert!((tape.value(l).item() + (1.0 + delta).ln()).abs() < 1e-15);
    }
}
