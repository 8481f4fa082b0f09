//! Energy-based region proposals.
//!
//! For the `k_s` classes with the highest global logits, each class map is
//! shifted into `k_r` scale variants by subtracting a fraction of the class's
//! BN running mean (larger shifts shrink the positive support, yielding
//! tighter boxes). Each variant is ReLU-filtered and split into 8-connected
//! components; the `k_e` components with the largest summed activation
//! ("energy") become proposals, boxed by their minimum enclosing rectangle.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::tape::{BnState, RoiBox, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};
use crate::weak_head::CategoryActivationMaps;

/// Floor applied to the running variance before the offset division.
pub const VARIANCE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Number of class maps inspected.
    pub k_s: usize,
    /// Regions kept per map variant.
    pub k_e: usize,
    /// Scale variants per map (the original plus one per `zeta`).
    pub k_r: usize,
    /// Offset magnitudes for variants `1..k_r`.
    pub zeta: Vec<f64>,
    /// Side of the pooled grid.
    pub pool_size: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k_s: 4,
            k_e: 2,
            k_r: 3,
            zeta: vec![0.5, 1.0],
            pool_size: 3,
        }
    }
}

impl SelectionConfig {
    pub fn k_o(&self) -> usize {
        self.k_s * self.k_e * self.k_r
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_s == 0 || self.k_e == 0 || self.k_r == 0 || self.pool_size == 0 {
            return Err(invalid("selection", "k_s, k_e, k_r and pool_size must be positive"));
        }
        if self.zeta.len() + 1 != self.k_r {
            return Err(invalid(
                "selection",
                format!("k_r = {} needs {} zeta values, got {}", self.k_r, self.k_r - 1, self.zeta.len()),
            ));
        }
        if self.zeta.iter().any(|z| !z.is_finite()) {
            return Err(invalid("selection", "zeta values must be finite"));
        }
        Ok(())
    }
}

/// A connected set of strictly positive cells and its enclosing box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// `(row, col)` cells in row-major discovery order.
    pub cells: Vec<(usize, usize)>,
    pub bbox: RoiBox,
}

impl Region {
    fn from_cells(cells: Vec<(usize, usize)>) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &(r, c) in &cells {
            y0 = y0.min(r);
            y1 = y1.max(r);
            x0 = x0.min(c);
            x1 = x1.max(c);
        }
        Self {
            cells,
            bbox: RoiBox { x0, y0, x1, y1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    /// Inclusive cell box on the activation map.
    pub bbox: RoiBox,
    pub energy: f64,
    pub category: usize,
    pub variant: usize,
    pub energy_rank: usize,
}

impl RegionProposal {
    /// Box in input pixels as half-open `[x0, x1) × [y0, y1)`.
    pub fn pixel_box(&self, stride: usize) -> [usize; 4] {
        [
            self.bbox.x0 * stride,
            self.bbox.y0 * stride,
            (self.bbox.x1 + 1) * stride,
            (self.bbox.y1 + 1) * stride,
        ]
    }
}

fn map_dims(map: &Tensor) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(invalid("roi", format!("need an H×W map, got {:?}", map.shape()))),
    }
}

/// Indices of the `k_s` largest logits in descending order; equal logits
/// keep ascending class order.
pub fn select_top_maps(logits: &[f64], k_s: usize) -> Result<Vec<usize>> {
    if k_s > logits.len() {
        return Err(invalid("select_top_maps", format!("k_s = {k_s} exceeds {} classes", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k_s);
    Ok(order)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components of the strictly positive cells of `map`.
///
/// Two-pass labeling with union-find; components are ordered by their first
/// cell in row-major order.
pub fn connected_regions(map: &Tensor) -> Result<Vec<Region>> {
    let (h, w) = map_dims(map)?;
    let v = map.data();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if v[i] <= 0.0 {
                continue;
            }
            // previously visited neighbours: W, NW, N, NE
            let mut neighbours = Vec::with_capacity(4);
            if c > 0 {
                neighbours.push(i - 1);
            }
            if r > 0 {
                neighbours.push(i - w);
                if c > 0 {
                    neighbours.push(i - w - 1);
                }
                if c + 1 < w {
                    neighbours.push(i - w + 1);
                }
            }
            for j in neighbours {
                if v[j] > 0.0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    let mut slot_of_root = vec![usize::MAX; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if v[i] <= 0.0 {
                continue;
            }
            let root = find(&mut parent, i);
            if slot_of_root[root] == usize::MAX {
                slot_of_root[root] = groups.len();
                groups.push((root, Vec::new()));
            }
            groups[slot_of_root[root]].1.push((r, c));
        }
    }
    Ok(groups.into_iter().map(|(_, cells)| Region::from_cells(cells)).collect())
}

/// Sum of ReLU-filtered activations over the region's cells.
pub fn region_energy(map: &Tensor, region: &Region) -> Result<f64> {
    let (h, w) = map_dims(map)?;
    if region.cells.is_empty() {
        return Err(invalid("region_energy", "empty region"));
    }
    region.cells.iter().try_fold(0.0, |acc, &(r, c)| {
        if r >= h || c >= w {
            return Err(invalid("region_energy", format!("cell ({r}, {c}) outside {h}x{w}")));
        }
        Ok(acc + map.data()[r * w + c].max(0.0))
    })
}

/// Energy order: higher energy first, then smaller box area, then the box
/// coordinates.
pub fn energy_order(a: (&RoiBox, f64), b: (&RoiBox, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.area().cmp(&b.0.area()))
        .then(a.0.cmp(b.0))
}

/// Components of `map` with their energies, strongest first.
pub fn ranked_regions(map: &Tensor) -> Result<Vec<(Region, f64)>> {
    let mut ranked = connected_regions(map)?
        .into_iter()
        .map(|r| {
            let e = region_energy(map, &r)?;
            Ok((r, e))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| energy_order((&a.0.bbox, a.1), (&b.0.bbox, b.1)));
    Ok(ranked)
}

/// Components ordered by enclosing-box area (largest first, energy breaks
/// ties). This is the area-size criterion energy ranking replaces.
pub fn ranked_regions_by_area(map: &Tensor) -> Result<Vec<(Region, f64)>> {
    let mut ranked = ranked_regions(map)?;
    ranked.sort_by(|a, b| {
        b.0.bbox
            .area()
            .cmp(&a.0.bbox.area())
            .then_with(|| energy_order((&a.0.bbox, a.1), (&b.0.bbox, b.1)))
    });
    Ok(ranked)
}

/// Offset subtracted from a class map for variant weight `zeta`:
/// `zeta · μ_t / √max(σ_t², floor)`.
pub fn variant_offset(running_mean: f64, running_var: f64, zeta: f64) -> f64 {
    zeta * running_mean / running_var.max(VARIANCE_FLOOR).sqrt()
}

/// The original map followed by one shifted copy per `zeta`.
pub fn scale_variants(map: &Tensor, running_mean: f64, running_var: f64, zeta: &[f64]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(zeta.len() + 1);
    out.push(map.clone());
    for &z in zeta {
        let off = variant_offset(running_mean, running_var, z);
        out.push(map.map(|v| v - off));
    }
    out
}

/// Exactly `k_o` proposals for one image, ordered by (class rank, variant,
/// energy rank). Variants with fewer than `k_e` components are padded with
/// the full-map box at zero energy.
pub fn select_rois(
    cam: &CategoryActivationMaps,
    global_logits: &[f64],
    bn: &BnState,
    cfg: &SelectionConfig,
) -> Result<Vec<RegionProposal>> {
    cfg.validate()?;
    let l = cam.num_classes();
    if global_logits.len() != l || bn.channels() != l {
        return Err(invalid(
            "select_rois",
            format!("{l} maps, {} logits, {} BN channels", global_logits.len(), bn.channels()),
        ));
    }
    let full = RoiBox {
        x0: 0,
        y0: 0,
        x1: cam.width() - 1,
        y1: cam.height() - 1,
    };
    let mut out = Vec::with_capacity(cfg.k_o());
    for category in select_top_maps(global_logits, cfg.k_s)? {
        let map = cam.class_map(category);
        let variants = scale_variants(&map, bn.running_mean[category], bn.running_var[category], &cfg.zeta);
        for (variant, vmap) in variants.iter().enumerate() {
            let ranked = ranked_regions(vmap)?;
            for energy_rank in 0..cfg.k_e {
                let (bbox, energy) = ranked
                    .get(energy_rank)
                    .map(|(r, e)| (r.bbox, *e))
                    .unwrap_or((full, 0.0));
                out.push(RegionProposal {
                    bbox,
                    energy,
                    category,
                    variant,
                    energy_rank,
                });
            }
        }
    }
    Ok(out)
}

/// Transfers a cell box between maps whose resolutions differ by `ratio`
/// (target cells per source cell), rounding outward and clamping to the
/// target `height × width`.
pub fn transfer_box(b: &RoiBox, ratio: f64, height: usize, width: usize) -> RoiBox {
    let lo = |v: usize, limit: usize| ((v as f64 * ratio).floor() as usize).min(limit - 1);
    let hi = |v: usize, limit: usize| {
        let end = ((v + 1) as f64 * ratio).ceil() as usize;
        end.saturating_sub(1).min(limit - 1)
    };
    let (x0, y0) = (lo(b.x0, width), lo(b.y0, height));
    let (x1, y1) = (hi(b.x1, width).max(x0), hi(b.y1, height).max(y0));
    RoiBox { x0, y0, x1, y1 }
}

/// ROI-pools the proposals' boxes, transferred from the `F_w` grid onto the
/// `C×H_r×W_r` map `f_r`, into a `k×C×S×S` tensor.
pub fn pool_proposals(
    tape: &mut Tape,
    f_r: Var,
    proposals: &[RegionProposal],
    ratio: f64,
    pool_size: usize,
) -> Result<Var> {
    let [_, h, w] = *tape.shape(f_r) else {
        return Err(invalid("pool_proposals", format!("need C×H×W, got {:?}", tape.shape(f_r))));
    };
    let boxes: Vec<RoiBox> = proposals.iter().map(|p| transfer_box(&p.bbox, ratio, h, w)).collect();
    tape.roi_pool(f_r, &boxes, pool_size)
}
