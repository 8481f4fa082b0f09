//! Central-difference gradient checks for tape computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::Backbone;
use crate::cross_attention::{Fusion, LocalBranch};
use crate::global_branch::GlobalBranch;
use crate::params::{BnStates, Bound, ParamStore};
use crate::tape::{BnMode, BnState, ConvGeometry, RoiBox, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};
use crate::weak_head::WEAK_DELTA;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub coordinates: usize,
    /// Coordinates whose one-sided differences disagree, meaning the step
    /// straddles a kink of a piecewise function; they are not scored.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.skipped * 10 <= self.coordinates
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences in every input coordinate.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(invalid("gradcheck", "function must return a scalar"));
        }
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    tape.backward(out)?;
    let mut report = CheckReport {
        name: name.to_string(),
        coordinates: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let grad = tape.grad(v).expect("params always have gradients");
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let fm = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            report.coordinates += 1;
            let (fwd, bwd) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1.0) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            report.max_rel_error = report.max_rel_error.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Fixed random weights folding a tensor into a scalar, so every output
/// coordinate carries a distinct gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn bind_inputs(names: &[String], vars: &[Var]) -> Bound {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

/// Runs every built-in suite with inputs drawn from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    reports.push(check("matmul", &[a, b], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        project(t, m, 1)
    })?);

    let x = random(&mut rng, &[5, 3], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3], -1.0, 1.0);
    let bias = random(&mut rng, &[4], -1.0, 1.0);
    reports.push(check("linear", &[x, w, bias], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 2)
    })?);

    let x = random(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = random(&mut rng, &[4], -0.5, 0.5);
    reports.push(check("conv2d", &[x, w, bias], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry { stride: 2, pad: 1 })?;
        project(t, y, 3)
    })?);

    let x = random(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
    let gamma = random(&mut rng, &[2], 0.5, 1.5);
    let beta = random(&mut rng, &[2], -0.5, 0.5);
    reports.push(check("batch_norm", &[x, gamma, beta], |t, v| {
        let mut state = BnState::new(2);
        let y = t.batch_norm(v[0], v[1], v[2], &mut state, BnMode::Train)?;
        project(t, y, 4)
    })?);

    let x = random(&mut rng, &[4, 6], -2.0, 2.0);
    reports.push(check("softmax_rows", &[x], |t, v| {
        let y = t.softmax_rows(v[0])?;
        project(t, y, 5)
    })?);

    let x = random(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    reports.push(check("relu_max_pool", &[x], |t, v| {
        let r = t.relu(v[0])?;
        let y = t.max_pool2d(r, 2)?;
        project(t, y, 6)
    })?);

    let x = random(&mut rng, &[3, 6, 6], -1.0, 1.0);
    let boxes = [
        RoiBox { x0: 0, y0: 0, x1: 5, y1: 5 },
        RoiBox { x0: 1, y0: 2, x1: 3, y1: 4 },
        RoiBox { x0: 4, y0: 4, x1: 4, y1: 4 },
    ];
    reports.push(check("roi_pool", &[x], |t, v| {
        let y = t.roi_pool(v[0], &boxes, 3)?;
        project(t, y, 7)
    })?);

    let logits = random(&mut rng, &[5], -3.0, 3.0);
    reports.push(check("bce", &[logits], |t, v| {
        let p = t.sigmoid(v[0])?;
        t.bce(p, &[1.0, 0.0, 0.0, 1.0, 0.0])
    })?);

    let maps = random(&mut rng, &[4, 3, 3], -3.0, 3.0);
    reports.push(check("weak_loss", &[maps], |t, v| {
        t.weak_loss(v[0], &[true, false, true, true], WEAK_DELTA)
    })?);

    // global branch: self-attention, pooled classifier and BCE
    let c = 4;
    let gb = GlobalBranch {
        channels: c,
        num_classes: 3,
        attention: true,
    };
    let mut gp = ParamStore::new();
    gb.init(&mut gp, &mut rng);
    let (names, mut values): (Vec<String>, Vec<Tensor>) = gp.iter().map(|(k, v)| (k.clone(), v.clone())).unzip();
    values.push(random(&mut rng, &[c, 2, 3], 0.0, 1.0));
    let n_params = names.len();
    reports.push(check("global_attention", &values, |t, v| {
        let bound = bind_inputs(&names, &v[..n_params]);
        let att = gb.self_attention(t, &bound, v[n_params])?;
        let map = att.attn_map.expect("attention enabled");
        let a = project(t, map, 8)?;
        let b = project(t, att.attended, 9)?;
        t.add(a, b)
    })?);
    reports.push(check("global_loss", &values, |t, v| {
        let bound = bind_inputs(&names, &v[..n_params]);
        let att = gb.self_attention(t, &bound, v[n_params])?;
        let pred = gb.predict(t, &bound, att.attended)?;
        gb.loss(t, pred.probs, &[1.0, 0.0, 1.0])
    })?);

    // local branch: embedding, cross-attention, fusion and BCE
    for (label, fusion, scaled) in [("local_loss", Fusion::Max, false), ("local_loss_sum_scaled", Fusion::Sum, true)] {
        let lb = LocalBranch {
            in_channels: 3,
            channels: c,
            num_classes: 3,
            depth: 1,
            scaled,
            fusion,
        };
        let mut lp = ParamStore::new();
        lb.init(&mut lp, &mut rng);
        let (names, mut values): (Vec<String>, Vec<Tensor>) = lp.iter().map(|(k, v)| (k.clone(), v.clone())).unzip();
        values.push(random(&mut rng, &[c], -1.0, 1.0));
        values.push(random(&mut rng, &[4, 3, 2, 2], -1.0, 1.0));
        let n_params = names.len();
        reports.push(check(label, &values, |t, v| {
            let bound = bind_inputs(&names, &v[..n_params]);
            let (_, pred) = lb.forward(t, &bound, v[n_params], v[n_params + 1])?;
            lb.loss(t, pred.probs, &[0.0, 1.0, 1.0])
        })?);
    }
    reports.push(check_cross_attention(&mut rng)?);
    reports.push(check_backbone(&mut rng)?);
    Ok(reports)
}

fn check_cross_attention(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let lb = LocalBranch {
        in_channels: 3,
        channels: 4,
        num_classes: 2,
        depth: 2,
        scaled: false,
        fusion: Fusion::Max,
    };
    let mut lp = ParamStore::new();
    lb.init(&mut lp, rng);
    let (names, mut values): (Vec<String>, Vec<Tensor>) = lp
        .iter()
        .filter(|(k, _)| k.starts_with("cross."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .unzip();
    values.push(random(rng, &[5, 4], -1.0, 1.0));
    let n_params = names.len();
    check("cross_attention", &values, |t, v| {
        let bound = bind_inputs(&names, &v[..n_params]);
        let out = lb.attend(t, &bound, v[n_params])?;
        let a = project(t, out.attn_maps[0], 10)?;
        let b = project(t, out.tokens, 11)?;
        t.add(a, b)
    })
}

fn check_backbone(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let bb = Backbone { widths: [2, 2, 2, 2, 3] };
    let mut p = ParamStore::new();
    let mut bn = BnStates::default();
    bb.init(&mut p, &mut bn, rng);
    let (names, values): (Vec<String>, Vec<Tensor>) = p
        .iter()
        .filter(|(k, _)| k.starts_with("backbone.s5") || k.starts_with("backbone.s4"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .unzip();
    let rest: Vec<(String, Tensor)> = p
        .iter()
        .filter(|(k, _)| !names.contains(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let image = random(rng, &[2, 3, 32, 32], 0.0, 1.0);
    check("backbone", &values, |t, v| {
        let fixed: Vec<(String, Var)> = rest.iter().map(|(k, val)| (k.clone(), t.constant(val.clone()))).collect();
        let bound: Bound = names.iter().cloned().zip(v.iter().copied()).chain(fixed).collect();
        let x = t.constant(image.clone());
        let mut bn = bn.clone();
        let pyr = bb.forward(t, &bound, &mut bn, x, BnMode::Train)?;
        project(t, pyr.f32, 12)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(0.0, 1e-7), 1e-7 / FLOOR);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu(x)·x has derivative 2x for x>0; a tape computing x·x with one
        // branch detached halves it
        let x = Tensor::vector(vec![0.7, 1.3]).unwrap();
        let good = check("square", std::slice::from_ref(&x), |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(good.passed());
        let bad = check("detached", &[x], |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let y = t.mul(v[0], c)?;
            t.sum(y)
        })
        .unwrap();
        assert!(!bad.passed());
    }
}
