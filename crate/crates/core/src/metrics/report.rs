//! Aggregated evaluation results.

use alloc::string::String;
use alloc::vec::Vec;

use super::components::per_lesion_dice;
use super::{dice, paired_t_test, LESION_MIN_VOLUME_MM3};
use crate::error::{Error, Result};
use crate::math;
use crate::volume::MaskVolume;

/// Values with their mean and population standard deviation (`None` when
/// there are no values).
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub values: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Summary {
    pub fn from_values(values: Vec<f64>) -> Self {
        if values.is_empty() {
            return Summary { values, mean: None, std: None };
        }
        let mean = math::mean(&values);
        let std = math::std_dev(&values, 0);
        Summary { values, mean: Some(mean), std: Some(std) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TTestEntry {
    pub label: String,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub per_case_dice: Summary,
    pub per_lesion_dice: Summary,
    /// Per-lesion Dice restricted to lesions of at least 125 mm³.
    pub per_lesion_dice_filtered: Summary,
    pub ap: Option<f64>,
    pub t_tests: Vec<TTestEntry>,
}

impl EvalReport {
    /// Per-case and per-lesion Dice over `(pred, gt)` cases.
    pub fn segmentation(cases: &[(MaskVolume, MaskVolume)], margin: usize) -> Result<Self> {
        Self::segmentation_with(cases, margin, LESION_MIN_VOLUME_MM3)
    }

    /// As [`EvalReport::segmentation`] with a custom size filter for the
    /// filtered per-lesion column.
    pub fn segmentation_with(cases: &[(MaskVolume, MaskVolume)], margin: usize, min_volume_mm3: f64) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut per_case = Vec::with_capacity(cases.len());
        let mut lesion = Vec::new();
        let mut filtered = Vec::new();
        for (pred, gt) in cases {
            per_case.push(dice(pred, gt)?);
            for l in per_lesion_dice(pred, gt, margin, None)? {
                if l.component.volume_mm3 >= min_volume_mm3 {
                    filtered.push(l.dice);
                }
                lesion.push(l.dice);
            }
        }
        Ok(EvalReport {
            per_case_dice: Summary::from_values(per_case),
            per_lesion_dice: Summary::from_values(lesion),
            per_lesion_dice_filtered: Summary::from_values(filtered),
            ap: None,
            t_tests: Vec::new(),
        })
    }

    /// Appends a paired t-test of this report's per-case Dice against
    /// `other`'s.
    pub fn add_t_test(&mut self, label: impl Into<String>, other: &Summary) -> Result<()> {
        let r = paired_t_test(&self.per_case_dice.values, &other.values)?;
        self.t_tests.push(TTestEntry { label: label.into(), t: r.t, p: r.p });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let summaries = [&self.per_case_dice, &self.per_lesion_dice, &self.per_lesion_dice_filtered];
        let percents = summaries.iter().flat_map(|s| s.values.iter().chain(s.mean.iter())).chain(self.ap.iter());
        for &v in percents {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvalidValue("percent outside [0, 100]"));
            }
        }
        if self.t_tests.iter().any(|t| !(0.0..=1.0).contains(&t.p)) {
            return Err(Error::InvalidValue("p-value outside [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use alloc::vec;

    #[test]
    fn summary_stats() {
        let s = Summary::from_values(vec![2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, Some(5.0));
        assert_eq!(s.std, Some(2.0));
        let e = Summary::from_values(vec![]);
        assert!(e.mean.is_none() && e.is_empty());
    }

    #[test]
    fn segmentation_report() {
        let g = Geometry::with_dims([8, 8, 4]).unwrap();
        let mut gt = vec![0u8; g.len()];
        for z in 0..4 {
            for y in 0..6 {
                for x in 0..6 {
                    gt[g.index(x, y, z)] = 1;
                }
            }
        }
        let gt = MaskVolume::new(g, gt).unwrap();
        let r = EvalReport::segmentation(&[(gt.clone(), gt.clone())], 5).unwrap();
        assert_eq!(r.per_case_dice.mean, Some(100.0));
        assert_eq!(r.per_lesion_dice.len(), 1);
        // 144 voxels at 1 mm passes the size filter
        assert_eq!(r.per_lesion_dice_filtered.len(), 1);
        r.validate().unwrap();
        let mut bad = r.clone();
        bad.ap = Some(101.0);
        assert!(bad.validate().is_err());
    }
}
