use super::{GradSink, Op, Tape, Var};
use crate::tensor::{gemm, invalid, Result, Tensor, TensorError};

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

impl ConvGeometry {
    /// `floor((input + 2·pad − kernel) / stride) + 1`, or `None` when the
    /// kernel does not fit.
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(invalid(op, format!("expected a matrix, got shape {:?}", t.shape()))),
    }
}

/// Unfolds one `C×H×W` image into `(C·KH·KW) × (OH·OW)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, geom: ConvGeometry) -> bool {
    kh == 1 && kw == 1 && geom.stride == 1 && geom.pad == 0
}

impl Tape {
    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), "transpose")
    }

    /// Affine map over rows: `x[n,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = dims2("linear", self.value(x))?;
        let (fout, fin2) = dims2("linear", self.value(w))?;
        if fin != fin2 {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: vec![n, fin],
                rhs: vec![fout, fin2],
            });
        }
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != fout {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![fout],
                    rhs: bias.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            n,
            fin,
            fout,
            1.0,
            self.value(x).data(),
            (fin as isize, 1),
            self.value(w).data(),
            (1, fin as isize),
            1.0,
            &mut out,
            (fout as isize, 1),
        );
        self.push(Tensor::from_parts(vec![n, fout], out), Op::Linear { x, w, b }, "linear")
    }

    /// Batched convolution: `x[N,C,H,W]`, `w[O,C,KH,KW]`, optional `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let ([n, c, h, wd], [o, c2, kh, kw]) = (xs, ws) else {
            return Err(invalid("conv2d", format!("need NCHW input and OCHW kernel, got {xs:?} and {ws:?}")));
        };
        let (n, c, h, wd, o, c2, kh, kw) = (*n, *c, *h, *wd, *o, *c2, *kh, *kw);
        if c != c2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (Some(oh), Some(ow)) = (geom.output_size(h, kh), geom.output_size(wd, kw)) else {
            return Err(invalid("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{wd} with {geom:?}")));
        };
        let plane = oh * ow;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; n * o * plane];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != o {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: bias.shape().to_vec(),
                });
            }
            for (chunk, &bv) in out.chunks_mut(plane).zip(bias.data().iter().cycle()) {
                chunk.fill(bv);
            }
        }
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let pointwise = is_pointwise(kh, kw, geom);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
        for img in 0..n {
            let xi = &xd[img * c * h * wd..(img + 1) * c * h * wd];
            let colref: &[f64] = if pointwise {
                xi
            } else {
                im2col(xi, c, h, wd, kh, kw, geom, oh, ow, &mut cols);
                &cols
            };
            gemm(
                o,
                ckk,
                plane,
                1.0,
                wdata,
                (ckk as isize, 1),
                colref,
                (plane as isize, 1),
                1.0,
                &mut out[img * o * plane..(img + 1) * o * plane],
                (plane as isize, 1),
            );
        }
        self.push(
            Tensor::from_parts(vec![n, o, oh, ow], out),
            Op::Conv2d { x, w, b, geom },
            "conv2d",
        )
    }

    /// Concatenation along the leading axis; trailing shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), "concat")
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        self.push(out, Op::Slice { x, start }, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }
}

pub(super) fn matmul_backward(
    a: Var,
    ta: &Tensor,
    b: Var,
    tb: &Tensor,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (m, k) = (ta.shape()[0], ta.shape()[1]);
    let n = tb.shape()[1];
    if let Some(s) = sink.slot(a) {
        // dA = G · Bᵀ
        gemm(m, n, k, 1.0, g, (n as isize, 1), tb.data(), (1, n as isize), 1.0, s, (k as isize, 1));
    }
    if let Some(s) = sink.slot(b) {
        // dB = Aᵀ · G
        gemm(k, m, n, 1.0, ta.data(), (1, k as isize), g, (n as isize, 1), 1.0, s, (n as isize, 1));
    }
}

pub(super) fn transpose_backward(a: Var, ta: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let (r, c) = (ta.shape()[0], ta.shape()[1]);
    if let Some(s) = sink.slot(a) {
        for i in 0..r {
            for j in 0..c {
                s[i * c + j] += g[j * r + i];
            }
        }
    }
}

pub(super) fn linear_backward(
    x: Var,
    tx: &Tensor,
    w: Var,
    tw: &Tensor,
    b: Option<Var>,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (n, fin) = (tx.shape()[0], tx.shape()[1]);
    let fout = tw.shape()[0];
    if let Some(s) = sink.slot(x) {
        // dX = G[n,out] · W[out,in]
        gemm(n, fout, fin, 1.0, g, (fout as isize, 1), tw.data(), (fin as isize, 1), 1.0, s, (fin as isize, 1));
    }
    if let Some(s) = sink.slot(w) {
        // dW = Gᵀ[out,n] · X[n,in]
        gemm(fout, n, fin, 1.0, g, (1, fout as isize), tx.data(), (fin as isize, 1), 1.0, s, (fin as isize, 1));
    }
    if let Some(b) = b {
        if let Some(s) = sink.slot(b) {
            for row in g.chunks(fout) {
                for (s, &v) in s.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    x: Var,
    tx: &Tensor,
    w: Var,
    tw: &Tensor,
    b: Option<Var>,
    geom: ConvGeometry,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let [n, c, h, wd] = *tx.shape() else { unreachable!() };
    let [o, _, kh, kw] = *tw.shape() else { unreachable!() };
    let oh = geom.output_size(h, kh).expect("validated in forward");
    let ow = geom.output_size(wd, kw).expect("validated in forward");
    let plane = oh * ow;
    let ckk = c * kh * kw;
    let pointwise = is_pointwise(kh, kw, geom);

    if let Some(b) = b {
        if let Some(s) = sink.slot(b) {
            for (k, chunk) in g.chunks(plane).enumerate() {
                s[k % o] += chunk.iter().sum::<f64>();
            }
        }
    }

    let want_w = sink.slot(w).is_some();
    let want_x = sink.slot(x).is_some();
    if !want_w && !want_x {
        return;
    }
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
    let mut dcols = if want_x && !pointwise { vec![0.0; ckk * plane] } else { Vec::new() };
    for img in 0..n {
        let gi = &g[img * o * plane..(img + 1) * o * plane];
        let xi = &tx.data()[img * c * h * wd..(img + 1) * c * h * wd];
        if want_w {
            let colref: &[f64] = if pointwise {
                xi
            } else {
                im2col(xi, c, h, wd, kh, kw, geom, oh, ow, &mut cols);
                &cols
            };
            let s = sink.slot(w).expect("checked");
            // dW[o,ckk] += G[o,plane] · colsᵀ[plane,ckk]
            gemm(o, plane, ckk, 1.0, gi, (plane as isize, 1), colref, (1, plane as isize), 1.0, s, (ckk as isize, 1));
        }
        if want_x {
            let s = sink.slot(x).expect("checked");
            let dxi = &mut s[img * c * h * wd..(img + 1) * c * h * wd];
            if pointwise {
                // dX[c,plane] += Wᵀ[c,o] · G[o,plane]
                gemm(ckk, o, plane, 1.0, tw.data(), (1, ckk as isize), gi, (plane as isize, 1), 1.0, dxi, (plane as isize, 1));
            } else {
                gemm(ckk, o, plane, 1.0, tw.data(), (1, ckk as isize), gi, (plane as isize, 1), 0.0, &mut dcols, (plane as isize, 1));
                col2im(&dcols, c, h, wd, kh, kw, geom, oh, ow, dxi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let m = tape.constant(random(&[3, 3], &mut rng));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random(&[2, 3], &mut rng);
            let b = random(&[3, 2], &mut rng);
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let p = tape.matmul(va, vb).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += a.at(&[i, k]) * b.at(&[k, j]);
                    }
                    assert!((tape.value(p).at(&[i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_inner_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn pointwise_conv_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, w, None, ConvGeometry::default()).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_output_size_formula() {
        let g = ConvGeometry { stride: 2, pad: 1 };
        assert_eq!(g.output_size(7, 3), Some(4));
        assert_eq!(ConvGeometry::default().output_size(2, 3), None);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 7, 5]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, g).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 3]);
        let bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(tape.conv2d(x, bad, None, g).is_err());
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeometry { stride: 1, pad: 1 };
        let (x, w, b) = (random(&[2, 2, 5, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng));
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(vx, vw, Some(vb), geom).unwrap();
        let yv = tape.value(y);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..5 {
                    for ox in 0..4 {
                        let mut acc = b.data()[o];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let (iy, ix) = (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                        acc += w.at(&[o, c, ki, kj]) * x.at(&[n, c, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        assert!((yv.at(&[n, o, oy, ox]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_and_concat_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.5]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 3.5]);
        let z = tape.concat(&[y, y]).unwrap();
        assert_eq!(tape.shape(z), &[2, 3]);
        assert!(tape.concat(&[x, y]).is_err());
        let t = tape.transpose(z).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t).at(&[2, 1]), 3.5);
    }
}
