use serde::{Deserialize, Serialize};

use super::{GradSink, Op, Tape, Var};
use crate::tensor::{invalid, Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

struct Layout {
    n: usize,
    c: usize,
    spatial: usize,
}

fn layout(shape: &[usize]) -> Result<Layout> {
    if shape.len() < 2 {
        return Err(invalid("batch_norm", format!("need [N, C, ...], got {shape:?}")));
    }
    Ok(Layout {
        n: shape[0],
        c: shape[1],
        spatial: shape[2..].iter().product(),
    })
}

impl Tape {
    /// Per-channel normalization over batch and spatial axes followed by the
    /// learnable affine `gamma·x̂ + beta`.
    ///
    /// In train mode the running mean and variance move toward the batch
    /// statistics by `momentum`; the running variance uses the unbiased batch
    /// estimate.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let Layout { n, c, spatial } = layout(&shape)?;
        if state.channels() != c || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![state.channels()],
            });
        }
        if state.eps <= 0.0 {
            return Err(invalid("batch_norm", "eps must be positive"));
        }
        let population = n * spatial;
        if mode == BnMode::Train && population < 2 {
            return Err(invalid("batch_norm", "train mode needs at least two values per channel"));
        }
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        mean[ch] += xd[off..off + spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= population as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        var[ch] += xd[off..off + spatial]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= population as f64);
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        if mode == BnMode::Train {
            let m = state.momentum;
            let correction = population as f64 / (population - 1) as f64;
            for ch in 0..c {
                state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
                state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch] * correction;
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            "batch_norm",
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward(
    x: Var,
    shape: &[usize],
    gamma: Var,
    tgamma: &Tensor,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    mode: BnMode,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let Layout { n, c, spatial } = layout(shape).expect("validated in forward");
    let population = (n * spatial) as f64;
    let gd = tgamma.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    if let Some(s) = sink.slot(gamma) {
        for ch in 0..c {
            s[ch] += sum_gx[ch];
        }
    }
    if let Some(s) = sink.slot(beta) {
        for ch in 0..c {
            s[ch] += sum_g[ch];
        }
    }
    if let Some(s) = sink.slot(x) {
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                let k = gd[ch] * inv_std[ch];
                for i in off..off + spatial {
                    s[i] += match mode {
                        BnMode::Train => {
                            k * (g[i] - sum_g[ch] / population - xhat[i] * sum_gx[ch] / population)
                        }
                        BnMode::Eval => k * g[i],
                    };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(x: Tensor, state: &mut BnState, mode: BnMode) -> Tensor {
        let c = state.channels();
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], 1.0));
        let b = tape.constant(Tensor::zeros(&[c]));
        let y = tape.batch_norm(vx, g, b, state, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        // per channel values {-1, 1} repeated: mean 0, biased variance 1
        let x = Tensor::new(vec![2, 1, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let y = run(x.clone(), &mut BnState::new(1), BnMode::Train);
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full(&[3, 2, 2, 2], 4.2);
        let y = run(x, &mut BnState::new(2), BnMode::Train);
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let x = Tensor::new(vec![2, 3, 4], data.clone()).unwrap();
        let mut state = BnState::new(3);
        state.running_mean = vec![0.5, -0.25, 1.0];
        state.running_var = vec![2.0, 1.0, 0.5];
        let before = state.clone();
        run(x, &mut state, BnMode::Train);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| (0..4).map(move |s| (b, s)))
                .map(|(b, s)| data[(b * 3 + ch) * 4 + s])
                .collect();
            let mu = vals.iter().sum::<f64>() / 8.0;
            let unbiased = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0;
            let want_mean = 0.9 * before.running_mean[ch] + 0.1 * mu;
            let want_var = 0.9 * before.running_var[ch] + 0.1 * unbiased;
            assert!((state.running_mean[ch] - want_mean).abs() < 1e-12);
            assert!((state.running_var[ch] - want_var).abs() < 1e-12);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..4 * 3 * 5 * 5).map(|_| rng.gen_range(-4.0..9.0)).collect();
        let y = run(Tensor::new(vec![4, 3, 5, 5], data).unwrap(), &mut BnState::new(3), BnMode::Train);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut state = BnState::new(1);
        state.running_mean = vec![2.0];
        state.running_var = vec![4.0 - BN_EPS];
        let y = run(Tensor::new(vec![1, 1, 2], vec![4.0, 0.0]).unwrap(), &mut state, BnMode::Eval);
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
        assert_eq!(state.running_mean, vec![2.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.batch_norm(x, g, b, &mut BnState::new(2), BnMode::Train).is_err());
        assert!(tape.batch_norm(x, g, b, &mut BnState::new(3), BnMode::Eval).is_err());
        let mut zero_eps = BnState::new(2);
        zero_eps.eps = 0.0;
        assert!(tape.batch_norm(x, g, b, &mut zero_eps, BnMode::Eval).is_err());
        assert!(tape.batch_norm(x, g, b, &mut BnState::new(2), BnMode::Eval).is_ok());
    }
}
