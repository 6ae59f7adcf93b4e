//! Flat-buffer entry points for foreign callers.
//!
//! Images cross the boundary as contiguous x-fastest buffers plus explicit
//! `dims` and `spacing`. No input buffer is modified. Errors keep the core
//! [`Error`] so callers can surface [`Error::name`].

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ilp::{fit_ilp, make_ilp_volume, BandwidthRule, IlpFunction};
use crate::metrics::dice;
use crate::volume::{Geometry, Grid, MaskVolume, Volume3, Voxel};

/// Borrowed flat buffer with its grid description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayView<'a, T> {
    pub data: &'a [T],
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl<'a, T: Voxel> ArrayView<'a, T> {
    pub fn new(data: &'a [T], dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let view = ArrayView { data, dims, spacing };
        view.geometry()?;
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::DataLength { expected, actual: data.len() });
        }
        Ok(view)
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
    }

    /// Owned grid copy.
    pub fn to_grid(&self) -> Result<Grid<T>> {
        Grid::new(self.geometry()?, self.data.to_vec())
    }
}

/// Fits an ILP function on raw sample values.
pub fn fit_ilp_flat(samples: &[f32], rule: BandwidthRule, lut_step: Option<f64>) -> Result<IlpFunction> {
    let s: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("samples"));
    }
    fit_ilp(&s, rule, lut_step)
}

/// `eval` at every value.
pub fn eval_ilp_flat(f: &IlpFunction, hu: &[f64]) -> Vec<f64> {
    hu.iter().map(|&x| f.eval(x)).collect()
}

/// ILP map of a flat image, same layout as the input.
pub fn make_ilp_volume_flat(f: &IlpFunction, image: ArrayView<'_, f32>) -> Result<Vec<f32>> {
    let vol: Volume3 = image.to_grid()?;
    Ok(make_ilp_volume(f, &vol).into_grid().into_data())
}

/// Dice in percent of two flat masks on the same grid.
pub fn dice_flat(pred: ArrayView<'_, u8>, gt: ArrayView<'_, u8>) -> Result<f64> {
    let p: MaskVolume = pred.to_grid()?;
    let g: MaskVolume = gt.to_grid()?;
    dice(&p, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ilp::eval_ilp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn view_validation() {
        let data = [0.0f32; 8];
        assert!(ArrayView::new(&data, [2, 2, 2], [1.0; 3]).is_ok());
        assert_eq!(
            ArrayView::new(&data, [2, 2, 3], [1.0; 3]).unwrap_err(),
            Error::DataLength { expected: 12, actual: 8 }
        );
        assert!(ArrayView::new(&data, [2, 2, 2], [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn flat_results_match_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<f32> = (0..300).map(|_| 150.0 + rng.random_range(-20.0..20.0)).collect();
        let f = fit_ilp_flat(&samples, BandwidthRule::Scott, Some(1.0)).unwrap();
        let hu: Vec<f64> = (0..100).map(|_| rng.random_range(-200.0..400.0)).collect();
        let flat = eval_ilp_flat(&f, &hu);
        for (x, v) in hu.iter().zip(&flat) {
            assert_eq!(*v, eval_ilp(&f, *x));
        }

        let img: Vec<f32> = (0..512).map(|_| rng.random_range(50.0..250.0)).collect();
        let before = img.clone();
        let view = ArrayView::new(&img, [8, 8, 8], [1.0, 1.0, 2.0]).unwrap();
        let out = make_ilp_volume_flat(&f, view).unwrap();
        let core = make_ilp_volume(&f, &view.to_grid().unwrap());
        assert_eq!(out.as_slice(), core.data());
        assert_eq!(img, before);

        let m = [1u8, 0, 1, 1];
        let v = ArrayView::new(&m, [4, 1, 1], [1.0; 3]).unwrap();
        assert_eq!(dice_flat(v, v).unwrap(), 100.0);
        let w = ArrayView::new(&m, [2, 2, 1], [1.0; 3]).unwrap();
        assert_eq!(dice_flat(v, w).unwrap_err().name(), "GeometryMismatch");
    }

    #[test]
    fn errors_carry_names() {
        let e = fit_ilp_flat(&[], BandwidthRule::Scott, None).unwrap_err();
        assert_eq!(e.name(), "EmptySamples");
        let e = fit_ilp_flat(&[3.0; 10], BandwidthRule::Scott, None).unwrap_err();
        assert_eq!(e.name(), "DegenerateBandwidth");
    }
}
