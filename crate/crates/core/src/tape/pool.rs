use super::{Op, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};

/// Inclusive cell rectangle on a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct RoiBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RoiBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// Cell range `[start, end)` of bin `i` when splitting `len` cells into
/// `bins` near-equal parts. Every bin holds at least one cell.
fn bin_range(len: usize, bins: usize, i: usize) -> (usize, usize) {
    let start = (i * len) / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start.min(len - 1), end.max(start + 1).min(len))
}

impl Tape {
    /// Non-overlapping `size×size` max pooling over the last two axes of an
    /// `N×C×H×W` tensor (trailing rows/columns that do not fill a window are
    /// dropped).
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = *t.shape() else {
            return Err(invalid("max_pool2d", format!("need NCHW, got {:?}", t.shape())));
        };
        if size == 0 || h < size || w < size {
            return Err(invalid("max_pool2d", format!("window {size} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        let row = base + (oy * size + dy) * w + ox * size;
                        for idx in row..row + size {
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool2d { x, argmax },
            "max_pool2d",
        )
    }

    /// Maximum over the last two (spatial) axes: `[..., H, W] → [...]`.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(invalid("spatial_max", format!("need rank >= 2, got {:?}", t.shape())));
        }
        let r = t.rank();
        let plane = t.shape()[r - 2] * t.shape()[r - 1];
        let lead = t.shape()[..r - 2].to_vec();
        let mut out = Vec::with_capacity(t.numel() / plane);
        let mut argmax = Vec::with_capacity(t.numel() / plane);
        for (p, chunk) in t.data().chunks(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push(p * plane + best);
        }
        let shape = if lead.is_empty() { vec![] } else { lead };
        self.push(Tensor::from_parts(shape, out), Op::SpatialMax { x, argmax }, "spatial_max")
    }

    /// Max pooling of rectangular regions of a `C×H×W` map onto a
    /// `size×size` grid each: output `k×C×size×size`.
    pub fn roi_pool(&mut self, x: Var, boxes: &[RoiBox], size: usize) -> Result<Var> {
        let t = self.value(x);
        let [c, h, w] = *t.shape() else {
            return Err(invalid("roi_pool", format!("need CHW, got {:?}", t.shape())));
        };
        if boxes.is_empty() || size == 0 {
            return Err(invalid("roi_pool", "need at least one box and a positive grid"));
        }
        let src = t.data();
        let k = boxes.len();
        let mut out = Vec::with_capacity(k * c * size * size);
        let mut argmax = Vec::with_capacity(k * c * size * size);
        for b in boxes {
            if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= w || b.y1 >= h {
                return Err(invalid("roi_pool", format!("box {b:?} outside {h}x{w}")));
            }
            for ch in 0..c {
                let base = ch * h * w;
                for by in 0..size {
                    let (ys, ye) = bin_range(b.height(), size, by);
                    for bx in 0..size {
                        let (xs, xe) = bin_range(b.width(), size, bx);
                        let mut best = base + (b.y0 + ys) * w + b.x0 + xs;
                        for yy in b.y0 + ys..b.y0 + ye {
                            for xx in b.x0 + xs..b.x0 + xe {
                                let idx = base + yy * w + xx;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![k, c, size, size], out),
            Op::RoiPool { x, argmax },
            "roi_pool",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_and_never_empty() {
        for len in 1..10 {
            for bins in 1..5 {
                let mut covered = vec![false; len];
                for i in 0..bins {
                    let (s, e) = bin_range(len, bins, i);
                    assert!(s < e && e <= len, "len {len} bins {bins} i {i}: {s}..{e}");
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let mut tape = Tape::new();
        let x = tape.param(
            Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap(),
        );
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn global_max_per_channel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2, 2], vec![1.0, 4.0, 2.0, 3.0, -1.0, -5.0, -2.0, -0.5]).unwrap());
        let y = tape.spatial_max(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, -0.5]);
    }

    #[test]
    fn roi_pool_single_cell() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 3], data).unwrap());
        let b = RoiBox { x0: 2, y0: 1, x1: 2, y1: 1 };
        let y = tape.roi_pool(x, &[b], 1).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 14.0]);
        let y3 = tape.roi_pool(x, &[b], 3).unwrap();
        assert_eq!(tape.shape(y3), &[1, 2, 3, 3]);
        assert!(tape.value(y3).data()[..9].iter().all(|&v| v == 5.0));
    }

    #[test]
    fn roi_pool_hot_cell_lands_in_its_bin() {
        for hot in 0..16 {
            let mut data = vec![0.0; 16];
            data[hot] = 1.0;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, 4, 4], data).unwrap());
            let b = RoiBox { x0: 0, y0: 0, x1: 3, y1: 3 };
            let y = tape.roi_pool(x, &[b], 2).unwrap();
            let (hy, hx) = (hot / 4, hot % 4);
            let expected_bin = (hy / 2) * 2 + hx / 2;
            for (i, &v) in tape.value(y).data().iter().enumerate() {
                assert_eq!(v, if i == expected_bin { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn roi_pool_rejects_out_of_bounds() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let b = RoiBox { x0: 0, y0: 0, x1: 2, y1: 1 };
        assert!(tape.roi_pool(x, &[b], 1).is_err());
    }
}
