//! Segmentation and detection metrics, paired t-tests, ILP post-processing.
//!
//! Dice scores and AP are reported in percent.

mod components;
mod detection;
mod report;
mod stats;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, ProbVolume};

pub use components::{connected_components, per_lesion_dice, Connectivity, LesionComponent, LesionDice};
pub use detection::{average_precision, components_to_detections, Box3, Detection3, DEFAULT_IOU_THRESHOLD};
pub use report::{EvalReport, Summary, TTestEntry};
pub use stats::{paired_t_test, student_t_sf, TTest};

/// Default crop margin around each lesion for per-lesion Dice, in voxels.
pub const DEFAULT_LESION_MARGIN: usize = 5;
/// Size filter of the per-lesion column, mm³.
pub const LESION_MIN_VOLUME_MM3: f64 = 125.0;

/// Dice of two flat masks (non-zero is foreground); 100 when both are empty.
pub fn dice_flat(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch { expected: gt.len(), actual: pred.len() });
    }
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        p += a as u64;
        g += b as u64;
        inter += (a && b) as u64;
    }
    Ok(dice_from_counts(inter, p, g))
}

pub(crate) fn dice_from_counts(inter: u64, p: u64, g: u64) -> f64 {
    if p + g == 0 {
        100.0
    } else {
        200.0 * inter as f64 / (p + g) as f64
    }
}

pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    pred.check_same_grid(gt)?;
    dice_flat(pred.data(), gt.data())
}

/// One Dice per `(pred, gt)` case plus mean and (population) std.
pub fn per_case_dice(cases: &[(MaskVolume, MaskVolume)]) -> Result<Summary> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let values = cases.iter().map(|(p, g)| dice(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(Summary::from_values(values))
}

/// Elementwise product of a probability map with an ILP map.
pub fn apply_ilp_postprocess(prob: &ProbVolume, ilp: &ProbVolume) -> Result<ProbVolume> {
    prob.check_same_grid(ilp)?;
    let data = prob.data().iter().zip(ilp.data()).map(|(&p, &q)| p * q).collect();
    ProbVolume::new(*prob.geometry(), data)
}
