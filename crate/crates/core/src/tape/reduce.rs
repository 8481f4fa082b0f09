use super::{GradSink, Op, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};

impl Tape {
    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| invalid("softmax_rows", "rank-0 input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Maximum over the leading axis: `[k, ...] → [...]`. Ties keep the
    /// lowest row.
    pub fn max_axis0(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(invalid("max_axis0", "rank-0 input"));
        }
        let rows = t.shape()[0];
        let inner = t.numel() / rows;
        let d = t.data();
        let mut out = d[..inner].to_vec();
        let mut argmax: Vec<usize> = (0..inner).collect();
        for r in 1..rows {
            for j in 0..inner {
                let idx = r * inner + j;
                if d[idx] > out[j] {
                    out[j] = d[idx];
                    argmax[j] = idx;
                }
            }
        }
        let shape = t.shape()[1..].to_vec();
        self.push(Tensor::from_parts(shape, out), Op::MaxAxis0 { x, argmax }, "max_axis0")
    }

    /// Sum over the leading axis: `[k, ...] → [...]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(invalid("sum_axis0", "rank-0 input"));
        }
        let inner = t.numel() / t.shape()[0];
        let mut out = vec![0.0; inner];
        for row in t.data().chunks(inner) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let shape = t.shape()[1..].to_vec();
        self.push(Tensor::from_parts(shape, out), Op::SumAxis0(x), "sum_axis0")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }
}

pub(super) fn softmax_rows_backward(x: Var, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let width = *out.shape().last().expect("validated");
    if let Some(s) = sink.slot(x) {
        for ((srow, yrow), grow) in s
            .chunks_mut(width)
            .zip(out.data().chunks(width))
            .zip(g.chunks(width))
        {
            let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
            for ((s, &y), &gv) in srow.iter_mut().zip(yrow).zip(grow) {
                *s += y * (gv - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn softmax_of(row: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, row.len()], row.to_vec()).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn uniform_softmax() {
        for v in softmax_of(&[0.0, 0.0, 0.0]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn max_and_sum_axis0() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.0, 3.0]).unwrap());
        let m = tape.max_axis0(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
        let s = tape.sum_axis0(x).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 2.0]);
        let mean = tape.mean(x).unwrap();
        assert_eq!(tape.value(mean).item(), 1.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(row in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let y = softmax_of(&row);
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn softmax_shift_invariance(x in -50.0f64..50.0, c in -5.0f64..5.0) {
            let a = softmax_of(&[x, x + c, x + 2.0 * c]);
            let b = softmax_of(&[0.0, c, 2.0 * c]);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
