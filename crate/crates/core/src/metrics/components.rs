//! Connected lesion components and per-lesion Dice.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use super::dice_from_counts;
use crate::error::Result;
use crate::volume::{Geometry, MaskVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// One connected foreground region.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct LesionComponent {
    /// 1-based, in order of each component's first voxel in scan order.
    pub label: u32,
    /// `[x, y, z]` indices in discovery order.
    pub voxels: Vec<[usize; 3]>,
    /// Inclusive index bounds.
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
    pub volume_mm3: f64,
}

/// Components of the non-zero voxels, labelled by first voxel in x-fastest
/// scan order.
pub fn connected_components(mask: &MaskVolume, connectivity: Connectivity) -> Vec<LesionComponent> {
    let geom = *mask.geometry();
    let dims = geom.dims;
    let offsets = connectivity.offsets();
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask.data()[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        while let Some(i) = queue.pop_front() {
            let c = geom.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            voxels.push(c);
            for off in &offsets {
                let n = [c[0] as i64 + off[0], c[1] as i64 + off[1], c[2] as i64 + off[2]];
                if (0..3).any(|a| n[a] < 0 || n[a] >= dims[a] as i64) {
                    continue;
                }
                let j = geom.index(n[0] as usize, n[1] as usize, n[2] as usize);
                if mask.data()[j] != 0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let volume_mm3 = voxels.len() as f64 * geom.voxel_volume();
        out.push(LesionComponent { label: out.len() as u32 + 1, voxels, bbox_min: lo, bbox_max: hi, volume_mm3 });
    }
    out
}

/// Dice of one ground-truth lesion inside its local crop.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct LesionDice {
    pub component: LesionComponent,
    pub dice: f64,
}

/// Crop bounds: bbox grown by `margin`, clipped to the volume (inclusive).
fn crop_bounds(c: &LesionComponent, geom: &Geometry, margin: usize) -> ([usize; 3], [usize; 3]) {
    let lo = core::array::from_fn(|a| c.bbox_min[a].saturating_sub(margin));
    let hi = core::array::from_fn(|a| (c.bbox_max[a] + margin).min(geom.dims[a] - 1));
    (lo, hi)
}

/// Per-lesion Dice over the ground-truth components (26-connectivity) whose
/// volume is at least `min_volume` mm³. Each lesion is scored against the
/// prediction inside its bounding box grown by `margin` voxels, so
/// predictions far from every lesion do not count.
pub fn per_lesion_dice(
    pred: &MaskVolume,
    gt: &MaskVolume,
    margin: usize,
    min_volume: Option<f64>,
) -> Result<Vec<LesionDice>> {
    pred.check_same_grid(gt)?;
    let geom = *gt.geometry();
    let mut out = Vec::new();
    for component in connected_components(gt, Connectivity::TwentySix) {
        if min_volume.is_some_and(|v| component.volume_mm3 < v) {
            continue;
        }
        let (lo, hi) = crop_bounds(&component, &geom, margin);
        let mut p = 0u64;
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                let row = geom.index(lo[0], y, z);
                p += pred.data()[row..=row + hi[0] - lo[0]].iter().filter(|&&v| v != 0).count() as u64;
            }
        }
        let inter =
            component.voxels.iter().filter(|&&[x, y, z]| pred.data()[geom.index(x, y, z)] != 0).count() as u64;
        let dice = dice_from_counts(inter, p, component.voxels.len() as u64);
        out.push(LesionDice { component, dice });
    }
    Ok(out)
}
