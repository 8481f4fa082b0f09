//! Resampling and PPM/PGM output for `3×H×W` images in `[0, 1]`.

use std::io::Write;

use crate::tensor::{invalid, Result, Tensor};

fn chw(image: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(invalid(op, format!("need C×H×W, got {:?}", image.shape()))),
    }
}

/// Bilinear resampling of the window `[y0, y0+wh) × [x0, x0+ww)` (in source
/// pixels, possibly fractional) onto an `out_h × out_w` grid. Pixel centres
/// sit at half-integers; samples outside the source clamp to the border.
pub fn resample(image: &Tensor, window: [f64; 4], out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = chw(image, "resample")?;
    let [x0, y0, ww, wh] = window;
    if out_h == 0 || out_w == 0 || !(ww > 0.0 && wh > 0.0) {
        return Err(invalid("resample", "empty window or output"));
    }
    let axis = |n_out: usize, start: f64, len: f64, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = (start + (i as f64 + 0.5) * len / n_out as f64 - 0.5).clamp(0.0, (limit - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, y0, wh, h);
    let xs = axis(out_w, x0, ww, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y_lo, y_hi, fy) in &ys {
            for &(x_lo, x_hi, fx) in &xs {
                let top = plane[y_lo * w + x_lo] * (1.0 - fx) + plane[y_lo * w + x_hi] * fx;
                let bottom = plane[y_hi * w + x_lo] * (1.0 - fx) + plane[y_hi * w + x_hi] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Whole-image bilinear resize.
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = chw(image, "resize")?;
    if h == out_h && w == out_w {
        return Ok(image.clone());
    }
    resample(image, [0.0, 0.0, w as f64, h as f64], out_h, out_w)
}

/// Mirror along the width axis.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(image, "flip")?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for row in 0..c * h {
        out.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(vec![c, h, w], out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) of a `3×H×W` image.
pub fn write_ppm<W: Write>(image: &Tensor, out: &mut W) -> Result<()> {
    let (c, h, w) = chw(image, "ppm")?;
    if c != 3 {
        return Err(invalid("ppm", format!("need 3 channels, got {c}")));
    }
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            bytes.push(to_byte(d[ch * h * w + i]));
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Binary PGM (P5) of an `H×W` map, min-max normalized to the byte range.
/// A constant map is written as black.
pub fn write_pgm<W: Write>(map: &Tensor, out: &mut W) -> Result<()> {
    let [h, w] = *map.shape() else {
        return Err(invalid("pgm", format!("need H×W, got {:?}", map.shape())));
    };
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| if span > 0.0 { to_byte((v - lo) / span) } else { 0 })
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Draws a one-pixel outline of the half-open pixel box `[x0, x1) × [y0, y1)`
/// in `color`, clipped to the image.
pub fn draw_box(image: &mut Tensor, bbox: [usize; 4], color: [f64; 3]) -> Result<()> {
    let (c, h, w) = chw(image, "draw_box")?;
    if c != 3 {
        return Err(invalid("draw_box", format!("need 3 channels, got {c}")));
    }
    let [x0, y0, x1, y1] = bbox;
    if x0 >= x1 || y0 >= y1 || x0 >= w || y0 >= h {
        return Ok(());
    }
    let (x1, y1) = (x1.min(w) - 1, y1.min(h) - 1);
    let d = image.data_mut();
    let mut put = |x: usize, y: usize| {
        for (ch, &v) in color.iter().enumerate() {
            d[ch * h * w + y * w + x] = v;
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
    Ok(())
}
