//! Ranking and thresholded classification metrics for multi-label output.

use serde::{Deserialize, Serialize};

use crate::tensor::{invalid, Result};

/// Default positivity threshold for the P/R/F1 aggregates.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// All-point average precision. Examples are ranked by descending score,
/// equal scores by index. Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(invalid("average_precision", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Positive iff the probability exceeds the threshold.
    All,
    /// Positive iff among the example's three highest probabilities and
    /// above the threshold.
    Top3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_shapes(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(invalid("metrics", format!("{} predictions, {} label rows", probs.len(), labels.len())));
    }
    let l = probs[0].len();
    if probs.iter().any(|p| p.len() != l) || labels.iter().any(|y| y.len() != l) {
        return Err(invalid("metrics", "ragged prediction or label rows"));
    }
    Ok(l)
}

/// Positive predictions of one example under `protocol`.
pub fn positives(probs: &[f64], protocol: Protocol, threshold: f64) -> Vec<bool> {
    let mut out: Vec<bool> = probs.iter().map(|&p| p > threshold).collect();
    if protocol == Protocol::Top3 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        for &k in order.iter().skip(3) {
            out[k] = false;
        }
    }
    out
}

/// Per-class (CP, CR, CF1) and overall (OP, OR, OF1) precision, recall and
/// F1. Zero denominators count as 0.
pub fn prf_aggregates(probs: &[Vec<f64>], labels: &[Vec<bool>], protocol: Protocol, threshold: f64) -> Result<Prf> {
    let l = check_shapes(probs, labels)?;
    let (mut tp, mut pred, mut gt) = (vec![0usize; l], vec![0usize; l], vec![0usize; l]);
    for (p, y) in probs.iter().zip(labels) {
        for (k, on) in positives(p, protocol, threshold).into_iter().enumerate() {
            pred[k] += on as usize;
            gt[k] += y[k] as usize;
            tp[k] += (on && y[k]) as usize;
        }
    }
    let cp = (0..l).map(|k| ratio(tp[k], pred[k])).sum::<f64>() / l as f64;
    let cr = (0..l).map(|k| ratio(tp[k], gt[k])).sum::<f64>() / l as f64;
    let (tp_all, pred_all, gt_all) = (tp.iter().sum(), pred.iter().sum(), gt.iter().sum());
    let (op, or) = (ratio(tp_all, pred_all), ratio(tp_all, gt_all));
    Ok(Prf {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for classes without positives; those are left out of `map`.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub all: Prf,
    pub top3: Prf,
}

pub fn evaluate_predictions(probs: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<EvalResult> {
    let l = check_shapes(probs, labels)?;
    let per_class_ap = (0..l)
        .map(|k| {
            let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let y: Vec<bool> = labels.iter().map(|y| y[k]).collect();
            average_precision(&s, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    let included: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(invalid("evaluate", "no class has a positive example"));
    }
    Ok(EvalResult {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class_ap,
        all: prf_aggregates(probs, labels, Protocol::All, threshold)?,
        top3: prf_aggregates(probs, labels, Protocol::Top3, threshold)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Precision at each positive from pairwise rank counting.
    fn rank_walk(scores: &[f64], labels: &[bool]) -> f64 {
        let ranks_before = |i: usize| {
            (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .collect::<Vec<_>>()
        };
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
        pos.iter()
            .map(|&i| {
                let before = ranks_before(i);
                let hits = before.iter().filter(|&&j| labels[j]).count() + 1;
                hits as f64 / (before.len() + 1) as f64
            })
            .sum::<f64>()
            / pos.len() as f64
    }

    #[test]
    fn ap_basics() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]).unwrap(), Some(0.5));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, false]).unwrap(), None);
        // ties resolve by index
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), Some(0.5));
        assert!(average_precision(&[0.5], &[true, false]).is_err());
    }

    #[test]
    fn ap_matches_rank_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..20).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<bool> = (0..20).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            let ap = average_precision(&scores, &labels).unwrap().unwrap();
            assert!((ap - rank_walk(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_and_silent_predictions() {
        let labels = vec![vec![true, false, true], vec![false, true, false]];
        let probs: Vec<Vec<f64>> = labels.iter().map(|r| r.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect()).collect();
        for protocol in [Protocol::All, Protocol::Top3] {
            let m = prf_aggregates(&probs, &labels, protocol, 0.5).unwrap();
            assert_eq!([m.cp, m.cr, m.cf1, m.op, m.or, m.of1], [1.0; 6]);
        }
        let silent = vec![vec![0.1; 3]; 2];
        let m = prf_aggregates(&silent, &labels, Protocol::All, 0.5).unwrap();
        assert_eq!((m.or, m.of1), (0.0, 0.0));
    }

    #[test]
    fn hand_counted_confusion_table() {
        let probs = vec![
            vec![0.9, 0.6, 0.4, 0.7],
            vec![0.2, 0.8, 0.55, 0.1],
            vec![0.6, 0.52, 0.9, 0.95],
        ];
        let b = |v: [u8; 4]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
        let labels = vec![b([1, 0, 0, 1]), b([0, 1, 1, 1]), b([1, 0, 0, 0])];
        // ALL: per-class tp/pred/gt = 2/2/2, 1/3/1, 1/2/1, 1/2/2
        let all = prf_aggregates(&probs, &labels, Protocol::All, 0.5).unwrap();
        let (cp, cr, op, or) = (7.0 / 12.0, 7.0 / 8.0, 5.0 / 9.0, 5.0 / 6.0);
        assert!((all.cp - cp).abs() < 1e-15 && (all.cr - cr).abs() < 1e-15);
        assert!((all.op - op).abs() < 1e-15 && (all.or - or).abs() < 1e-15);
        assert!((all.cf1 - 2.0 * cp * cr / (cp + cr)).abs() < 1e-15);
        assert!((all.of1 - 2.0 * op * or / (op + or)).abs() < 1e-15);
        // TOP3 drops class 1 of the last example
        let top = prf_aggregates(&probs, &labels, Protocol::Top3, 0.5).unwrap();
        assert!((top.cp - 5.0 / 8.0).abs() < 1e-15 && (top.cr - 7.0 / 8.0).abs() < 1e-15);
        assert!((top.op - 5.0 / 8.0).abs() < 1e-15 && (top.or - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn top3_never_exceeds_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
            assert!(positives(&p, Protocol::Top3, 0.0).iter().filter(|&&b| b).count() <= 3);
        }
    }

    #[test]
    fn map_skips_classes_without_positives() {
        let probs = vec![vec![0.9, 0.2, 0.1], vec![0.1, 0.7, 0.3]];
        let labels = vec![vec![true, false, false], vec![false, false, false]];
        let r = evaluate_predictions(&probs, &labels, 0.5).unwrap();
        assert_eq!(r.per_class_ap, vec![Some(1.0), None, None]);
        assert_eq!(r.map, 1.0);
    }
}
