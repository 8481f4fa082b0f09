//! Brute-force reference for energy-based region ranking.
//!
//! Components are found by breadth-first flood fill from every unvisited
//! positive cell, sharing no code with the union-find labeling in
//! [`crate::roi`].

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::roi::ranked_regions;
use crate::tape::RoiBox;
use crate::tensor::{Result, Tensor};

/// A component as `(box, energy, cell count)`.
pub type Component = (RoiBox, f64, usize);

pub fn flood_fill_components(map: &Tensor) -> Vec<Component> {
    let [h, w] = *map.shape() else {
        panic!("flood_fill_components needs an H×W map");
    };
    let v = map.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || v[start] <= 0.0 {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let (mut bx, mut energy, mut count) = (
            RoiBox {
                x0: start % w,
                y0: start / w,
                x1: start % w,
                y1: start / w,
            },
            0.0,
            0,
        );
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            energy += v[i];
            count += 1;
            bx.x0 = bx.x0.min(c as usize);
            bx.x1 = bx.x1.max(c as usize);
            bx.y0 = bx.y0.min(r as usize);
            bx.y1 = bx.y1.max(r as usize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && v[j] > 0.0 {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push((bx, energy, count));
    }
    out
}

fn area(b: &RoiBox) -> usize {
    (b.x1 - b.x0 + 1) * (b.y1 - b.y0 + 1)
}

/// Brute-force top-`k` by energy: repeatedly scans for the best remaining
/// component (energy, then smaller area, then box coordinates).
pub fn top_by_energy(components: &[Component], k: usize) -> Vec<Component> {
    let better = |a: &Component, b: &Component| {
        a.1 > b.1 || (a.1 == b.1 && (area(&a.0) < area(&b.0) || (area(&a.0) == area(&b.0) && a.0 < b.0)))
    };
    let mut left = components.to_vec();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if better(&left[i], &left[best]) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Largest enclosing box first.
pub fn top_by_area(components: &[Component]) -> Option<Component> {
    components
        .iter()
        .copied()
        .reduce(|best, c| if area(&c.0) > area(&best.0) { c } else { best })
}

pub fn random_map<R: Rng>(rng: &mut R, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Two blobs: a wide faint one and a compact strong one. Area ranking
/// prefers the first, energy ranking the second.
pub fn constructed_disagreement() -> Tensor {
    let mut v = vec![-1.0; 64];
    for c in 0..6 {
        v[c] = 0.1;
        v[8 + c] = 0.1;
    }
    for r in 5..7 {
        for c in 5..7 {
            v[r * 8 + c] = 2.0;
        }
    }
    Tensor::new(vec![8, 8], v).expect("shape")
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub trials: usize,
    pub seed: u64,
    pub k_e: usize,
    /// Maps where the selected boxes or energies differ from brute force.
    pub mismatches: usize,
    /// Maps where the top area component is not the top energy component.
    pub area_disagreements: usize,
    /// Whether the energy pick on [`constructed_disagreement`] is the
    /// compact strong blob.
    pub constructed_case_ok: bool,
}

/// Compares [`ranked_regions`] with flood-fill enumeration on `trials`
/// random 8×8 maps.
pub fn run(trials: usize, seed: u64, k_e: usize) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mismatches, mut area_disagreements) = (0, 0);
    for _ in 0..trials {
        let map = random_map(&mut rng, 8, 8);
        let picked: Vec<(RoiBox, f64)> = ranked_regions(&map)?
            .into_iter()
            .take(k_e)
            .map(|(r, e)| (r.bbox, e))
            .collect();
        let comps = flood_fill_components(&map);
        let truth = top_by_energy(&comps, k_e);
        let same = picked.len() == truth.len()
            && picked
                .iter()
                .zip(&truth)
                .all(|(p, t)| p.0 == t.0 && (p.1 - t.1).abs() <= 1e-12 * t.1.abs().max(1.0));
        mismatches += !same as usize;
        if let (Some(a), Some(e)) = (top_by_area(&comps), truth.first()) {
            area_disagreements += (a.0 != e.0) as usize;
        }
    }
    let special = constructed_disagreement();
    let energy_pick = ranked_regions(&special)?.first().map(|(r, _)| r.bbox);
    let area_pick = top_by_area(&flood_fill_components(&special)).map(|c| c.0);
    let strong = RoiBox {
        x0: 5,
        y0: 5,
        x1: 6,
        y1: 6,
    };
    Ok(OracleReport {
        trials,
        seed,
        k_e,
        mismatches,
        area_disagreements,
        constructed_case_ok: energy_pick == Some(strong) && area_pick != Some(strong),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flood_fill_counts_diagonal_links() {
        let m = Tensor::new(vec![3, 3], vec![1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 3.0]).unwrap();
        let comps = flood_fill_components(&m);
        assert_eq!(comps.len(), 1);
        assert_eq!((comps[0].1, comps[0].2), (6.0, 3));
    }

    #[test]
    fn small_run_is_clean() {
        let r = run(200, 5, 2).unwrap();
        assert_eq!(r.mismatches, 0);
        assert!(r.constructed_case_ok);
        assert!(r.area_disagreements > 0);
    }
}
