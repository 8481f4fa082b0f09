//! Dataset-level measurements of a trained network: held-out metrics,
//! class-map suppression and proposal localization.

use serde::Serialize;

use crate::metrics::{evaluate_predictions, EvalResult};
use crate::oracle::flood_fill_components;
use crate::roi::{ranked_regions, scale_variants};
use crate::synthetic::{iou, Dataset};
use crate::tensor::{invalid, Result};
use crate::training::Trained;

/// IoU at which a proposal counts as hitting a ground-truth box.
pub const HIT_IOU: f64 = 0.3;

pub fn evaluate(net: &Trained, data: &Dataset, threshold: f64) -> Result<EvalResult> {
    let probs = data
        .examples
        .iter()
        .map(|ex| net.predict(&ex.image))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = data.examples.iter().map(|ex| ex.labels.clone()).collect();
    evaluate_predictions(&probs, &labels, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Suppression {
    /// Mean ReLU activation over all cells of present-class maps.
    pub present: f64,
    /// Same over absent-class maps.
    pub absent: f64,
}

impl Suppression {
    pub fn ratio(&self) -> f64 {
        self.absent / self.present
    }
}

pub fn suppression(net: &Trained, data: &Dataset) -> Result<Suppression> {
    let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
    for ex in &data.examples {
        let cam = net.infer(&ex.image)?.cam;
        for k in 0..cam.num_classes() {
            let slot = ex.labels[k] as usize;
            let map = cam.class_map(k);
            sums[slot] += map.data().iter().map(|v| v.max(0.0)).sum::<f64>();
            counts[slot] += map.data().len();
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(invalid("suppression", "need both present and absent classes"));
    }
    Ok(Suppression {
        present: sums[1] / counts[1] as f64,
        absent: sums[0] / counts[0] as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Localization {
    pub images: usize,
    /// Images where every present class's top-energy region hits one of
    /// that class's boxes.
    pub hits: usize,
    /// Images where, for every present class, some component of some
    /// scale variant of its map hits; no ranking can do better.
    pub ceiling_hits: usize,
}

impl Localization {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.images as f64
    }

    pub fn ceiling(&self) -> f64 {
        self.ceiling_hits as f64 / self.images as f64
    }
}

fn to_image_box(cell: [usize; 4], stride: usize, scale: f64) -> [usize; 4] {
    cell.map(|v| ((v * stride) as f64 * scale).round() as usize)
}

pub fn localization(net: &Trained, data: &Dataset) -> Result<Localization> {
    let mut out = Localization {
        images: data.len(),
        hits: 0,
        ceiling_hits: 0,
    };
    for ex in &data.examples {
        let inf = net.infer(&ex.image)?;
        let scale = ex.image.shape()[2] as f64 / net.side as f64;
        let stride = inf.cam.stride;
        let state = net.bn.get("weak.bn")?;
        let zeta = &net.model.config.selection.zeta;
        let (mut all_hit, mut all_reachable) = (true, true);
        for k in ex.present() {
            let gts: Vec<[usize; 4]> = ex.boxes.iter().filter(|b| b.class == k).map(|b| b.coords()).collect();
            let best = |cell: [usize; 4]| {
                let b = to_image_box(cell, stride, scale);
                gts.iter().map(|&g| iou(b, g)).fold(0.0, f64::max)
            };
            let map = inf.cam.class_map(k);
            let (h, w) = (inf.cam.height(), inf.cam.width());
            let top = ranked_regions(&map)?
                .first()
                .map(|(r, _)| [r.bbox.x0, r.bbox.y0, r.bbox.x1 + 1, r.bbox.y1 + 1])
                .unwrap_or([0, 0, w, h]);
            let hit = best(top) >= HIT_IOU;
            all_hit &= hit;
            let reachable = hit
                || scale_variants(&map, state.running_mean[k], state.running_var[k], zeta)
                .iter()
                .flat_map(flood_fill_components)
                .any(|(b, _, _)| best([b.x0, b.y0, b.x1 + 1, b.y1 + 1]) >= HIT_IOU);
            all_reachable &= reachable;
        }
        out.hits += all_hit as usize;
        out.ceiling_hits += all_reachable as usize;
    }
    Ok(out)
}
