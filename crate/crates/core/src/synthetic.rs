//! Procedurally generated multi-label shapes dataset with box annotations,
//! its on-disk layout, and a color-only baseline classifier.
//!
//! Each class is a (shape, color) pair. Colors are shared between classes,
//! so color alone cannot separate them.
//!
//! On disk a dataset is a directory holding `manifest.json` and one GMT1
//! tensor per image under `images/`. The manifest lists, per example, the
//! image file, the present classes and the pixel boxes; any image source can
//! be used by producing the same layout.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{invalid, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

pub const SHAPES: [Shape; 6] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring, Shape::Bar];

pub const PALETTE: [[f64; 3]; 3] = [[0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.25, 0.35, 0.9]];

pub const MAX_CLASSES: usize = SHAPES.len() * PALETTE.len();

pub const MIN_OBJECT_SIDE: usize = 12;
pub const MAX_OBJECT_SIDE: usize = 48;
/// Largest IoU allowed between two placed objects.
pub const MAX_OVERLAP: f64 = 0.3;
const BACKGROUND: f64 = 0.5;
const NOISE: f64 = 0.1;

/// `(shape, color index)` of a class.
pub fn class_prototype(class: usize) -> (Shape, usize) {
    (SHAPES[class % 6], (class % 3 + class / 6) % 3)
}

/// Half-open pixel box `[x0, x1) × [y0, y1)` of one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl GtBox {
    pub fn coords(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// IoU of two half-open pixel boxes.
pub fn iou(a: [usize; 4], b: [usize; 4]) -> f64 {
    let iw = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let ih = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = (iw * ih) as f64;
    let area = |r: [usize; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<bool>,
    pub boxes: Vec<GtBox>,
}

impl LabeledExample {
    pub fn present(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&k| self.labels[k]).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub examples: Vec<LabeledExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n_examples: usize,
    pub num_classes: usize,
    pub side: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            num_classes: 6,
            side: 128,
            max_objects: 3,
            seed: 0,
        }
    }
}

fn covers(shape: Shape, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    let r2 = du * du + dv * dv;
    match shape {
        Shape::Disk => r2 <= 0.25,
        Shape::Square => true,
        Shape::Triangle => du.abs() <= v / 2.0,
        Shape::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        Shape::Ring => (0.09..=0.25).contains(&r2),
        Shape::Bar => dv.abs() <= 1.0 / 6.0,
    }
}

/// Paints `shape` into the `size×size` square at `(x, y)` and returns the
/// tight box of the painted pixels.
fn paint(img: &mut [f64], side: usize, shape: Shape, color: [f64; 3], x: usize, y: usize, size: usize) -> Option<[usize; 4]> {
    let plane = side * side;
    let mut bbox: Option<[usize; 4]> = None;
    for py in y..y + size {
        for px in x..x + size {
            let u = (px - x) as f64 / size as f64 + 0.5 / size as f64;
            let v = (py - y) as f64 / size as f64 + 0.5 / size as f64;
            if !covers(shape, u, v) {
                continue;
            }
            for (ch, &c) in color.iter().enumerate() {
                img[ch * plane + py * side + px] = c;
            }
            bbox = Some(match bbox {
                None => [px, py, px + 1, py + 1],
                Some(b) => [b[0].min(px), b[1].min(py), b[2].max(px + 1), b[3].max(py + 1)],
            });
        }
    }
    bbox
}

fn generate_one(spec: &DataSpec, rng: &mut ChaCha8Rng) -> LabeledExample {
    let side = spec.side;
    let mut img = vec![BACKGROUND; 3 * side * side];
    let n_objects = rng.gen_range(1..=spec.max_objects);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(n_objects);
    let mut placements: Vec<[usize; 4]> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = rng.gen_range(0..spec.num_classes);
        let (shape, color) = class_prototype(class);
        for _attempt in 0..100 {
            let size = rng.gen_range(MIN_OBJECT_SIDE..=MAX_OBJECT_SIDE.min(side));
            let x = rng.gen_range(0..=side - size);
            let y = rng.gen_range(0..=side - size);
            let square = [x, y, x + size, y + size];
            if placements.iter().any(|&p| iou(p, square) > MAX_OVERLAP) {
                continue;
            }
            if let Some(b) = paint(&mut img, side, shape, PALETTE[color], x, y, size) {
                placements.push(square);
                boxes.push(GtBox {
                    class,
                    x0: b[0],
                    y0: b[1],
                    x1: b[2],
                    y1: b[3],
                });
            }
            break;
        }
    }
    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-NOISE / 2.0..NOISE / 2.0)).clamp(0.0, 1.0);
    }
    let mut labels = vec![false; spec.num_classes];
    for b in &boxes {
        labels[b.class] = true;
    }
    LabeledExample {
        image: Tensor::from_parts(vec![3, side, side], img),
        labels,
        boxes,
    }
}

/// Deterministic dataset for `spec`. Example `i` depends only on
/// `(seed, i)`.
pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.num_classes > MAX_CLASSES {
        return Err(invalid("generate", format!("num_classes must be in 1..={MAX_CLASSES}")));
    }
    if spec.max_objects == 0 || spec.side < MIN_OBJECT_SIDE {
        return Err(invalid(
            "generate",
            format!("need max_objects >= 1 and side >= {MIN_OBJECT_SIDE}"),
        ));
    }
    let examples = (0..spec.n_examples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            generate_one(spec, &mut rng)
        })
        .collect();
    Ok(Dataset {
        num_classes: spec.num_classes,
        examples,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    labels: Vec<usize>,
    boxes: Vec<GtBox>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    examples: Vec<ManifestEntry>,
}

fn json_err(e: serde_json::Error) -> TensorError {
    TensorError::Format(e.to_string())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Splits off the examples from `at` onward.
    pub fn split(mut self, at: usize) -> (Dataset, Dataset) {
        let tail = self.examples.split_off(at.min(self.examples.len()));
        let l = self.num_classes;
        (self, Dataset { num_classes: l, examples: tail })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, ex) in self.examples.iter().enumerate() {
            let file = format!("images/{i:06}.gmt1");
            let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
            ex.image.write_gmt1(&mut w)?;
            entries.push(ManifestEntry {
                file,
                labels: ex.present(),
                boxes: ex.boxes.clone(),
            });
        }
        let manifest = Manifest {
            num_classes: self.num_classes,
            examples: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(json_err)?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(json_err)?;
        let l = manifest.num_classes;
        let mut examples = Vec::with_capacity(manifest.examples.len());
        for e in manifest.examples {
            let image = Tensor::read_gmt1(&mut BufReader::new(fs::File::open(dir.join(&e.file))?))?;
            if image.rank() != 3 || image.shape()[0] != 3 {
                return Err(TensorError::Format(format!("{}: need a 3×H×W image, got {:?}", e.file, image.shape())));
            }
            let mut labels = vec![false; l];
            for &k in e.labels.iter().chain(e.boxes.iter().map(|b| &b.class)) {
                if k >= l {
                    return Err(TensorError::Format(format!("{}: class {k} outside 0..{l}", e.file)));
                }
                labels[k] = true;
            }
            examples.push(LabeledExample {
                image,
                labels,
                boxes: e.boxes,
            });
        }
        Ok(Self { num_classes: l, examples })
    }
}

/// Classifies by color alone: each pixel is assigned to the nearest of the
/// per-class mean object colors or the background color, and a class scores
/// the fraction of pixels assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorPrototypeBaseline {
    pub prototypes: Vec<[f64; 3]>,
    pub background: [f64; 3],
}

fn pixel(img: &Tensor, i: usize) -> [f64; 3] {
    let plane = img.shape()[1] * img.shape()[2];
    let d = img.data();
    [d[i], d[plane + i], d[2 * plane + i]]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

impl ColorPrototypeBaseline {
    /// Prototype colors from the training boxes. A pixel inside a box counts
    /// towards the class if it is farther from the background color than
    /// the noise amplitude.
    pub fn fit(train: &Dataset) -> Result<Self> {
        let l = train.num_classes;
        let mut sums = vec![[0.0; 3]; l];
        let mut counts = vec![0usize; l];
        let bg = [BACKGROUND; 3];
        for ex in &train.examples {
            let w = ex.image.shape()[2];
            for b in &ex.boxes {
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        let p = pixel(&ex.image, y * w + x);
                        if dist2(p, bg) > NOISE * NOISE {
                            for c in 0..3 {
                                sums[b.class][c] += p[c];
                            }
                            counts[b.class] += 1;
                        }
                    }
                }
            }
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(invalid("baseline", format!("class {k} has no training pixels")));
        }
        let prototypes = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64])
            .collect();
        Ok(Self { prototypes, background: bg })
    }

    pub fn score(&self, image: &Tensor) -> Vec<f64> {
        let plane = image.shape()[1] * image.shape()[2];
        let mut hits = vec![0usize; self.prototypes.len()];
        for i in 0..plane {
            let p = pixel(image, i);
            let mut best = (dist2(p, self.background), None);
            for (k, &proto) in self.prototypes.iter().enumerate() {
                let d = dist2(p, proto);
                if d < best.0 {
                    best = (d, Some(k));
                }
            }
            if let (_, Some(k)) = best {
                hits[k] += 1;
            }
        }
        hits.iter().map(|&h| h as f64 / plane as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> DataSpec {
        DataSpec {
            n_examples: n,
            side: 64,
            ..DataSpec::default()
        }
    }

    #[test]
    fn prototypes_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for k in 0..MAX_CLASSES {
            let (s, c) = class_prototype(k);
            assert!(seen.insert((s, c)), "class {k} repeats a prototype");
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let a = generate(&spec(30)).unwrap();
        assert_eq!(a, generate(&spec(30)).unwrap());
        for ex in &a.examples {
            assert!(!ex.boxes.is_empty());
            for (k, &on) in ex.labels.iter().enumerate() {
                assert_eq!(on, ex.boxes.iter().any(|b| b.class == k));
            }
            for b in &ex.boxes {
                assert!(b.x0 < b.x1 && b.x1 <= 64 && b.y0 < b.y1 && b.y1 <= 64);
            }
            assert!(ex.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // a prefix of a longer run is the same data
        let longer = generate(&spec(40)).unwrap();
        assert_eq!(longer.examples[..30], a.examples[..]);
    }

    #[test]
    fn single_object_mode() {
        let d = generate(&DataSpec {
            max_objects: 1,
            ..spec(50)
        })
        .unwrap();
        assert!(d.examples.iter().all(|e| e.present().len() == 1 && e.boxes.len() == 1));
    }

    #[test]
    fn infeasible_specs() {
        assert!(generate(&DataSpec { num_classes: 19, ..spec(1) }).is_err());
        assert!(generate(&DataSpec { max_objects: 0, ..spec(1) }).is_err());
        assert!(generate(&DataSpec { side: 8, ..spec(1) }).is_err());
    }

    #[test]
    fn iou_values() {
        assert_eq!(iou([0, 0, 2, 2], [0, 0, 2, 2]), 1.0);
        assert_eq!(iou([0, 0, 2, 2], [2, 2, 4, 4]), 0.0);
        assert!((iou([0, 0, 2, 2], [1, 0, 3, 2]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn save_load_round_trip() {
        let d = generate(&spec(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn baseline_scores_present_colors() {
        let d = generate(&spec(60)).unwrap();
        let b = ColorPrototypeBaseline::fit(&d).unwrap();
        for (k, p) in b.prototypes.iter().enumerate() {
            // overlapping objects leak other colors into a box; the nearest
            // palette entry must still be the class's own
            let nearest = (0..3).min_by(|&a, &c| dist2(*p, PALETTE[a]).total_cmp(&dist2(*p, PALETTE[c]))).unwrap();
            assert_eq!(nearest, class_prototype(k).1, "class {k}: {p:?}");
        }
        let single = generate(&DataSpec { max_objects: 1, ..spec(20) }).unwrap();
        for ex in &single.examples {
            let s = b.score(&ex.image);
            let best = (0..6).max_by(|&a, &c| s[a].total_cmp(&s[c])).unwrap();
            assert_eq!(class_prototype(best).1, class_prototype(ex.present()[0]).1);
        }
    }
}
