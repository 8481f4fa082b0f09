use super::{GradSink, Op, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.numel() == 1 {
        Ok(Broadcast::LhsScalar)
    } else if b.numel() == 1 {
        Ok(Broadcast::RhsScalar)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

impl Tape {
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = match broadcast(name, ta, tb)? {
            Broadcast::Same => Tensor::from_parts(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::LhsScalar => {
                let x = ta.item();
                Tensor::from_parts(
                    tb.shape().to_vec(),
                    tb.data().iter().map(|&y| f(x, y)).collect(),
                )
            }
            Broadcast::RhsScalar => {
                let y = tb.item();
                Tensor::from_parts(
                    ta.shape().to_vec(),
                    ta.data().iter().map(|&x| f(x, y)).collect(),
                )
            }
        };
        self.push(out, Op::Binary { kind, a, b }, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale { a, factor }, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }
}

/// Sums `g` into a scalar slot or adds it elementwise into a full slot.
fn reduce_into(slot: &mut [f64], g: &[f64], mut f: impl FnMut(usize, f64) -> f64) {
    if slot.len() == 1 && g.len() != 1 {
        slot[0] += g.iter().enumerate().map(|(i, &v)| f(i, v)).sum::<f64>();
    } else {
        for (i, (s, &v)) in slot.iter_mut().zip(g).enumerate() {
            *s += f(i, v);
        }
    }
}

pub(super) fn binary_backward(
    kind: BinaryKind,
    a: Var,
    ta: &Tensor,
    b: Var,
    tb: &Tensor,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let at = |t: &Tensor, i: usize| if t.numel() == 1 { t.item() } else { t.data()[i] };
    match kind {
        BinaryKind::Add | BinaryKind::Sub => {
            if let Some(s) = sink.slot(a) {
                reduce_into(s, g, |_, v| v);
            }
            let sign = if kind == BinaryKind::Add { 1.0 } else { -1.0 };
            if let Some(s) = sink.slot(b) {
                reduce_into(s, g, |_, v| sign * v);
            }
        }
        BinaryKind::Mul => {
            if let Some(s) = sink.slot(a) {
                reduce_into(s, g, |i, v| v * at(tb, i));
            }
            if let Some(s) = sink.slot(b) {
                reduce_into(s, g, |i, v| v * at(ta, i));
            }
        }
    }
}

pub(super) fn relu_backward(a: Var, ta: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(s) = sink.slot(a) {
        for ((s, &x), &v) in s.iter_mut().zip(ta.data()).zip(g) {
            if x > 0.0 {
                *s += v;
            }
        }
    }
}

pub(super) fn sigmoid_backward(a: Var, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(s) = sink.slot(a) {
        for ((s, &y), &v) in s.iter_mut().zip(out.data()).zip(g) {
            *s += v * y * (1.0 - y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1/(1+e^50) evaluated with 40 significant digits
        let expected = 1.928_749_847_963_917_8e-22;
        let got = sigmoid(-50.0);
        assert!(got < 1e-20);
        assert!(((got - expected) / expected).abs() < 1e-14);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn scalar_broadcast_and_shape_errors() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::scalar(2.0));
        let v = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.add(v, w),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let p = tape.mul(s, v).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
        let d = tape.sub(p, s).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 2.0, 4.0]);
        let loss = tape.sum(d).unwrap();
        tape.backward(loss).unwrap();
        // d/ds sum(s*v - s) = sum(v) - 3
        assert_eq!(tape.grad(s).unwrap().item(), 3.0);
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e300));
        assert!(matches!(tape.mul(x, x), Err(TensorError::NonFinite("mul"))));
    }
}
