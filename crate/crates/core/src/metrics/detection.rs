//! Box detections and average precision.

use alloc::vec;
use alloc::vec::Vec;

use super::components::{connected_components, Connectivity};
use crate::error::{Error, Result};
use crate::volume::ProbVolume;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.1;

/// Axis-aligned box in continuous index space, `[min, max)` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(min[a].is_finite() && max[a].is_finite() && max[a] > min[a])) {
            return Err(Error::InvalidParameter("box must have positive extent on every axis".into()));
        }
        Ok(Box3 { min, max })
    }

    /// Box covering voxels `lo..=hi`.
    pub fn from_voxels(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Box3 { min: lo.map(|v| v as f64), max: hi.map(|v| v as f64 + 1.0) }
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    pub fn iou(&self, other: &Box3) -> f64 {
        let mut inter = 1.0;
        for a in 0..3 {
            let d = self.max[a].min(other.max[a]) - self.min[a].max(other.min[a]);
            if d <= 0.0 {
                return 0.0;
            }
            inter *= d;
        }
        inter / (self.volume() + other.volume() - inter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection3 {
    pub bbox: Box3,
    pub score: f64,
}

impl Detection3 {
    pub fn new(bbox: Box3, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidValue("detection score outside [0, 1]"));
        }
        Box3::new(bbox.min, bbox.max)?;
        Ok(Detection3 { bbox, score })
    }
}

/// One detection per 26-connected component of `prob >= threshold`, scored
/// by the component's maximum probability.
pub fn components_to_detections(prob: &ProbVolume, threshold: f64) -> Result<Vec<Detection3>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter("detection threshold must be in (0, 1)".into()));
    }
    let mask = prob.threshold(threshold as f32);
    let geom = prob.geometry();
    Ok(connected_components(&mask, Connectivity::TwentySix)
        .into_iter()
        .map(|c| {
            let score = c.voxels.iter().map(|&[x, y, z]| prob.data()[geom.index(x, y, z)]).fold(0.0f32, f32::max);
            Detection3 { bbox: Box3::from_voxels(c.bbox_min, c.bbox_max), score: score as f64 }
        })
        .collect())
}

/// Average precision in percent with all-points interpolation.
///
/// Detections are ranked by descending score (stable for ties); each one is
/// matched to the unmatched ground-truth box of highest IoU if that IoU
/// reaches `iou_threshold`. With no ground truth the result is 100 when
/// there are no detections either and 0 otherwise.
pub fn average_precision(dets: &[Detection3], gt: &[Box3], iou_threshold: f64) -> f64 {
    if gt.is_empty() {
        return if dets.is_empty() { 100.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut matched = vec![false; gt.len()];
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gbox) in gt.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = dets[d].bbox.iou(gbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let hit = match best {
            Some((g, iou)) if iou >= iou_threshold => {
                matched[g] = true;
                true
            }
            _ => false,
        };
        tp_flags.push(hit);
    }

    // recall rises by exactly 1/|gt| at every true positive, so the
    // all-points area is the mean of the precision envelope at those ranks
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let area: f64 = tp_flags.iter().zip(&precision).filter(|(&hit, _)| hit).fold(0.0, |acc, (_, &p)| acc + p);
    let ap = area / gt.len() as f64;
    100.0 * ap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, z: f64, s: f64) -> Box3 {
        Box3::new([x, y, z], [x + s, y + s, z + s]).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection3>, Vec<Box3>) {
        let n_gt = rng.random_range(0..=5);
        let n_det = rng.random_range(0..=10);
        let gt: Vec<Box3> =
            (0..n_gt).map(|_| bx(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), 0.0, rng.random_range(2.0..6.0))).collect();
        let dets = (0..n_det)
            .map(|_| {
                let b = if !gt.is_empty() && rng.random_bool(0.6) {
                    let g = gt[rng.random_range(0..gt.len())];
                    let j = rng.random_range(-2.0..2.0);
                    bx(g.min[0] + j, g.min[1] - j, 0.0, g.max[0] - g.min[0])
                } else {
                    bx(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), 0.0, rng.random_range(2.0..6.0))
                };
                // coarse scores so ties occur
                Detection3 { bbox: b, score: rng.random_range(0..5) as f64 / 4.0 }
            })
            .collect();
        (dets, gt)
    }

    /// Brute force: replay the greedy matching rank by rank, then for every
    /// rank where recall rises take the best precision at any later rank.
    fn brute_force_ap(dets: &[Detection3], gt: &[Box3], thr: f64) -> f64 {
        if gt.is_empty() {
            return if dets.is_empty() { 100.0 } else { 0.0 };
        }
        let mut ranked: Vec<(usize, Detection3)> = dets.iter().copied().enumerate().collect();
        // insertion sort keeps equal scores in input order
        for i in 1..ranked.len() {
            let mut j = i;
            while j > 0 && ranked[j - 1].1.score < ranked[j].1.score {
                ranked.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut used = vec![false; gt.len()];
        let mut tp_at = Vec::new();
        for (_, d) in &ranked {
            let mut best_g = usize::MAX;
            let mut best_iou = -1.0;
            for g in 0..gt.len() {
                let iou = d.bbox.iou(&gt[g]);
                if !used[g] && iou > best_iou {
                    best_iou = iou;
                    best_g = g;
                }
            }
            let tp = best_g != usize::MAX && best_iou >= thr;
            if tp {
                used[best_g] = true;
            }
            tp_at.push(tp);
        }
        let points: Vec<(f64, f64)> = (1..=tp_at.len())
            .map(|k| {
                let tp = tp_at[..k].iter().filter(|&&t| t).count() as f64;
                (tp / gt.len() as f64, tp / k as f64)
            })
            .collect();
        let mut area = 0.0;
        for k in 0..points.len() {
            if tp_at[k] {
                area += points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            }
        }
        100.0 * (area / gt.len() as f64)
    }

    #[test]
    fn iou_values() {
        let a = bx(0.0, 0.0, 0.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        let b = Box3::new([1.0, 0.0, 0.0], [3.0, 2.0, 2.0]).unwrap();
        assert!((a.iou(&b) - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(a.iou(&bx(5.0, 5.0, 5.0, 1.0)), 0.0);
        assert!(Box3::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn ap_edge_cases() {
        let gt = [bx(0.0, 0.0, 0.0, 3.0), bx(10.0, 0.0, 0.0, 3.0)];
        let perfect: Vec<_> = gt.iter().map(|&b| Detection3 { bbox: b, score: 0.9 }).collect();
        assert_eq!(average_precision(&perfect, &gt, 0.1), 100.0);
        assert_eq!(average_precision(&[], &gt, 0.1), 0.0);
        assert_eq!(average_precision(&[], &[], 0.1), 100.0);
        assert_eq!(average_precision(&perfect, &[], 0.1), 0.0);
        // one hit ranked below one miss: precision 1/2 at recall 1/2
        let dets = [Detection3 { bbox: bx(30.0, 0.0, 0.0, 1.0), score: 0.9 }, Detection3 { bbox: gt[0], score: 0.5 }];
        assert!((average_precision(&dets, &gt, 0.1) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let (dets, gt) = random_case(&mut rng);
            assert_eq!(average_precision(&dets, &gt, 0.1), brute_force_ap(&dets, &gt, 0.1));
        }
    }

    #[test]
    fn one_box_per_blob() {
        let g = Geometry::with_dims([10, 6, 1]).unwrap();
        let mut data = vec![0.0f32; 60];
        for (x, y, p) in [(1, 1, 0.9), (2, 1, 0.7), (2, 2, 0.6), (7, 3, 0.8), (8, 4, 0.55)] {
            data[g.index(x, y, 0)] = p;
        }
        data[g.index(5, 5, 0)] = 0.3;
        let prob = ProbVolume::new(g, data).unwrap();
        let dets = components_to_detections(&prob, 0.5).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].bbox, Box3::from_voxels([1, 1, 0], [2, 2, 0]));
        assert_eq!(dets[0].score as f32, 0.9);
        assert_eq!(dets[1].bbox, Box3::from_voxels([7, 3, 0], [8, 4, 0]));
        assert_eq!(dets[1].score as f32, 0.8);
        assert!(components_to_detections(&prob, 0.95).unwrap().is_empty());
        assert!(components_to_detections(&prob, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn adding_top_true_positive_never_lowers_ap(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (dets, gt) = random_case(&mut rng);
            prop_assume!(!gt.is_empty());
            let ap = average_precision(&dets, &gt, 0.1);
            // a ground-truth box no current detection can match
            for &b in gt.iter().filter(|b| !dets.iter().any(|d| d.bbox.iou(b) >= 0.1)) {
                let mut more = vec![Detection3 { bbox: b, score: 1.0 }];
                more.extend_from_slice(&dets);
                prop_assert!(average_precision(&more, &gt, 0.1) >= ap);
            }
        }
    }
}
