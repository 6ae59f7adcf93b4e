//! Volumetric grids: HU images, label masks and probability maps.
//!
//! All grids store voxels x-fastest (`index = x + nx * (y + ny * z)`) and
//! carry an axis-aligned geometry (dims, spacing in mm, origin in mm).
//! Resampling uses the voxel-center convention anchored at the origin:
//! voxel `i` along an axis sits at `origin + i * spacing`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};

/// Pad value for out-of-bounds image voxels (air).
pub const PAD_HU: f32 = -1024.0;

/// Axis-aligned voxel grid description.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let geom = Geometry { dims, spacing, origin };
        geom.validate()?;
        Ok(geom)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::DegenerateDims);
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidSpacing);
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidParameter("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Geometry::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }
}

/// Element types a [`Grid`] may hold.
pub trait Voxel: Copy + PartialEq + core::fmt::Debug {
    fn is_valid(&self) -> bool;
}

impl Voxel for f32 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}

impl Voxel for u8 {
    fn is_valid(&self) -> bool {
        true
    }
}

/// Dense 3D grid of voxels with geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    geom: Geometry,
    data: Vec<T>,
}

/// HU image (`X = {x_i}`).
pub type Volume3 = Grid<f32>;

/// Hard label map; 0 is background.
pub type MaskVolume = Grid<u8>;

impl<T: Voxel> Grid<T> {
    pub fn new(geom: Geometry, data: Vec<T>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::DataLength { expected: geom.len(), actual: data.len() });
        }
        if !data.iter().all(Voxel::is_valid) {
            return Err(Error::InvalidValue("non-finite voxel"));
        }
        Ok(Grid { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geom.index(x, y, z)]
    }

    /// Same grid (dims, spacing and origin all equal).
    pub fn same_grid<U>(&self, other: &Grid<U>) -> bool {
        self.geom == other.geom
    }

    pub fn check_same_grid<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch)
        }
    }

    /// Elementwise map onto a new grid with the same geometry.
    pub fn map<U: Voxel>(&self, f: impl FnMut(T) -> U) -> Result<Grid<U>> {
        Grid::new(self.geom, self.data.iter().copied().map(f).collect())
    }

    /// Splits the grid into single-slice grids along z.
    pub fn slices_z(&self) -> Vec<Grid<T>> {
        let [nx, ny, nz] = self.geom.dims;
        let plane = nx * ny;
        (0..nz)
            .map(|z| {
                let mut geom = self.geom;
                geom.dims[2] = 1;
                geom.origin[2] += z as f64 * self.geom.spacing[2];
                Grid { geom, data: self.data[z * plane..(z + 1) * plane].to_vec() }
            })
            .collect()
    }
}

impl Volume3 {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

impl MaskVolume {
    /// Binary copy: 1 where the label is nonzero.
    pub fn binarized(&self) -> MaskVolume {
        Grid { geom: self.geom, data: self.data.iter().map(|&l| u8::from(l != 0)).collect() }
    }

    /// Binary copy selecting one label.
    pub fn select_label(&self, label: u8) -> MaskVolume {
        Grid { geom: self.geom, data: self.data.iter().map(|&l| u8::from(l == label)).collect() }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }
}

/// Probability map with every value in `[0, 1]` (ILP volumes, network outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume(Grid<f32>);

impl ProbVolume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("probability outside [0, 1]"));
        }
        Ok(ProbVolume(Grid::new(geom, data)?))
    }

    pub fn from_grid(grid: Grid<f32>) -> Result<Self> {
        let Grid { geom, data } = grid;
        Self::new(geom, data)
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.0
    }

    /// Binary mask of voxels with probability `>= threshold`.
    pub fn threshold(&self, threshold: f32) -> MaskVolume {
        Grid { geom: self.0.geom, data: self.0.data.iter().map(|&p| u8::from(p >= threshold)).collect() }
    }
}

impl Deref for ProbVolume {
    type Target = Grid<f32>;

    fn deref(&self) -> &Grid<f32> {
        &self.0
    }
}

fn resampled_geometry(geom: &Geometry, target_spacing: f64) -> Result<Geometry> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(Error::InvalidParameter("target spacing must be positive".into()));
    }
    geom.validate()?;
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        let extent = geom.dims[axis] as f64 * geom.spacing[axis] / target_spacing;
        // 1e-9 tolerance keeps exact multiples from gaining a voxel to rounding
        dims[axis] = (libm::ceil(extent - 1e-9) as usize).max(1);
    }
    Geometry::new(dims, [target_spacing; 3], geom.origin)
}

/// Continuous index of output voxel `j` on an input axis.
#[inline]
fn source_coord(j: usize, target_spacing: f64, spacing: f64, n: usize) -> f64 {
    let p = j as f64 * target_spacing / spacing;
    p.min((n - 1) as f64)
}

/// Resamples an image to isotropic spacing with trilinear interpolation.
pub fn resample_isotropic(vol: &Volume3, target_spacing: f64) -> Result<Volume3> {
    let src = vol.geometry();
    let out_geom = resampled_geometry(src, target_spacing)?;
    let [nx, ny, nz] = src.dims;
    let axis_weights = |axis: usize, n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|j| {
                let p = source_coord(j, target_spacing, src.spacing[axis], n_in);
                let i0 = libm::floor(p) as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect()
    };
    let wx = axis_weights(0, out_geom.dims[0], nx);
    let wy = axis_weights(1, out_geom.dims[1], ny);
    let wz = axis_weights(2, out_geom.dims[2], nz);
    let data = vol.data();
    let at = |x: usize, y: usize, z: usize| data[src.index(x, y, z)] as f64;
    let mut out = Vec::with_capacity(out_geom.len());
    for &(z0, z1, fz) in &wz {
        for &(y0, y1, fy) in &wy {
            for &(x0, x1, fx) in &wx {
                let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
                let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
                let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
                let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                out.push((c0 * (1.0 - fz) + c1 * fz) as f32);
            }
        }
    }
    Grid::new(out_geom, out)
}

/// Nearest-neighbour counterpart of [`resample_isotropic`] for label maps.
pub fn resample_mask(mask: &MaskVolume, target_spacing: f64) -> Result<MaskVolume> {
    let src = mask.geometry();
    let out_geom = resampled_geometry(src, target_spacing)?;
    let nearest = |axis: usize| -> Vec<usize> {
        (0..out_geom.dims[axis])
            .map(|j| {
                let p = source_coord(j, target_spacing, src.spacing[axis], src.dims[axis]);
                (libm::floor(p + 0.5) as usize).min(src.dims[axis] - 1)
            })
            .collect()
    };
    let (ix, iy, iz) = (nearest(0), nearest(1), nearest(2));
    let mut out = Vec::with_capacity(out_geom.len());
    for &z in &iz {
        for &y in &iy {
            for &x in &ix {
                out.push(mask.get(x, y, z));
            }
        }
    }
    Grid::new(out_geom, out)
}

/// Copies a box of `size` voxels starting at `start` (which may lie outside
/// the grid); voxels outside the source are set to `pad`.
pub fn extract_patch<T: Voxel>(grid: &Grid<T>, start: [i64; 3], size: [usize; 3], pad: T) -> Result<Grid<T>> {
    let src = grid.geometry();
    let mut geom = Geometry { dims: size, spacing: src.spacing, origin: src.origin };
    for axis in 0..3 {
        geom.origin[axis] += start[axis] as f64 * src.spacing[axis];
    }
    geom.validate()?;
    let inside = |c: i64, axis: usize| c >= 0 && (c as usize) < src.dims[axis];
    let mut out = Vec::with_capacity(geom.len());
    for z in 0..size[2] as i64 {
        let sz = start[2] + z;
        for y in 0..size[1] as i64 {
            let sy = start[1] + y;
            for x in 0..size[0] as i64 {
                let sx = start[0] + x;
                if inside(sx, 0) && inside(sy, 1) && inside(sz, 2) {
                    out.push(grid.get(sx as usize, sy as usize, sz as usize));
                } else {
                    out.push(pad);
                }
            }
        }
    }
    Grid::new(geom, out)
}

/// Writes the part of `patch` that overlaps `target` back at `start`.
pub fn embed_patch<T: Voxel>(target: &mut Grid<T>, patch: &Grid<T>, start: [i64; 3]) {
    let dst = target.geom;
    let size = patch.dims();
    for z in 0..size[2] {
        let tz = start[2] + z as i64;
        if tz < 0 || tz as usize >= dst.dims[2] {
            continue;
        }
        for y in 0..size[1] {
            let ty = start[1] + y as i64;
            if ty < 0 || ty as usize >= dst.dims[1] {
                continue;
            }
            for x in 0..size[0] {
                let tx = start[0] + x as i64;
                if tx < 0 || tx as usize >= dst.dims[0] {
                    continue;
                }
                let idx = dst.index(tx as usize, ty as usize, tz as usize);
                target.data[idx] = patch.get(x, y, z);
            }
        }
    }
}

/// Stacks single-slice grids along z; inverse of [`Grid::slices_z`].
pub fn stack_z<T: Voxel>(slices: &[Grid<T>]) -> Result<Grid<T>> {
    let first = slices.first().ok_or(Error::DegenerateDims)?;
    let mut geom = first.geom;
    if geom.dims[2] != 1 || slices.iter().any(|s| s.geom.dims[..2] != geom.dims[..2] || s.geom.dims[2] != 1) {
        return Err(Error::GeometryMismatch);
    }
    geom.dims[2] = slices.len();
    let data = slices.iter().flat_map(|s| s.data.iter().copied()).collect();
    Grid::new(geom, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counting(dims: [usize; 3]) -> Volume3 {
        let geom = Geometry::with_dims(dims).unwrap();
        Grid::new(geom, (0..geom.len()).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert_eq!(Geometry::with_dims([0, 2, 2]), Err(Error::DegenerateDims));
        assert_eq!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]), Err(Error::InvalidSpacing));
        let geom = Geometry::with_dims([2, 2, 1]).unwrap();
        assert!(matches!(Volume3::new(geom, vec![0.0; 3]), Err(Error::DataLength { expected: 4, actual: 3 })));
        assert!(Volume3::new(geom, vec![0.0, f32::NAN, 0.0, 0.0]).is_err());
        assert!(ProbVolume::new(geom, vec![0.0, 1.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_resample() {
        let v = counting([5, 4, 3]);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn constant_resample_stays_constant() {
        let geom = Geometry::new([5, 4, 3], [0.7, 1.3, 2.5], [1.0, -2.0, 3.0]).unwrap();
        let v = Grid::filled(geom, 42.0f32).unwrap();
        for t in [0.5, 1.0, 2.0, 3.3] {
            let r = resample_isotropic(&v, t).unwrap();
            assert!(r.data().iter().all(|&x| x == 42.0));
            assert_eq!(r.geometry().origin, geom.origin);
            assert_eq!(r.geometry().spacing, [t; 3]);
        }
    }

    #[test]
    fn halfway_sample_by_hand() {
        // values 0 and 10 one voxel apart; x = 0.5 mm sits midway
        let geom = Geometry::with_dims([2, 1, 1]).unwrap();
        let v = Grid::new(geom, vec![0.0f32, 10.0]).unwrap();
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.dims(), [4, 2, 2]);
        assert_eq!(r.get(1, 0, 0), 5.0);
        assert_eq!(r.get(0, 0, 0), 0.0);
        assert_eq!(r.get(2, 0, 0), 10.0);
    }

    #[test]
    fn output_dims_round_up() {
        let geom = Geometry::new([5, 3, 1], [0.7, 1.0, 2.0], [0.0; 3]).unwrap();
        let v = Grid::filled(geom, 0.0f32).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [4, 3, 2]);
    }

    #[test]
    fn mask_resample_nearest() {
        let geom = Geometry::with_dims([2, 1, 1]).unwrap();
        let m = Grid::new(geom, vec![1u8, 2]).unwrap();
        let r = resample_mask(&m, 0.5).unwrap();
        assert_eq!(r.dims(), [4, 2, 2]);
        assert_eq!(r.data(), [1, 2, 2, 2].repeat(4).as_slice());
        let r = resample_mask(&m, 1.0).unwrap();
        assert_eq!(r, m);
    }

    #[test]
    fn patch_copy_and_padding() {
        let v = counting([4, 3, 2]);
        let p = extract_patch(&v, [0, 0, 0], v.dims(), PAD_HU).unwrap();
        assert_eq!(p, v);
        let p = extract_patch(&v, [10, 0, 0], [2, 2, 2], PAD_HU).unwrap();
        assert!(p.data().iter().all(|&x| x == PAD_HU));
        assert!(extract_patch(&v, [0, 0, 0], [0, 1, 1], PAD_HU).is_err());
    }

    #[test]
    fn straddling_patch_matches_index_arithmetic() {
        let v = counting([4, 3, 2]);
        let start = [-1i64, 1, 0];
        let size = [3usize, 3, 2];
        let p = extract_patch(&v, start, size, -1.0).unwrap();
        for z in 0..2i64 {
            for y in 0..3i64 {
                for x in 0..3i64 {
                    let (sx, sy, sz) = (x + start[0], y + start[1], z + start[2]);
                    let expected = if (0..4).contains(&sx) && (0..3).contains(&sy) && (0..2).contains(&sz) {
                        (sx + 4 * (sy + 3 * sz)) as f32
                    } else {
                        -1.0
                    };
                    assert_eq!(p.get(x as usize, y as usize, z as usize), expected);
                }
            }
        }
        assert_eq!(p.geometry().origin, [-1.0, 1.0, 0.0]);
    }

    #[test]
    fn slices_round_trip() {
        let v = counting([3, 2, 4]);
        let s = v.slices_z();
        assert_eq!(s.len(), 4);
        assert_eq!(s[2].get(1, 1, 0), v.get(1, 1, 2));
        assert_eq!(stack_z(&s).unwrap(), v);
    }

    proptest! {
        #[test]
        fn trilinear_bounded_by_neighbours(
            vals in proptest::collection::vec(-1000.0f32..1000.0, 27),
            sx in 0.3f64..2.0, sy in 0.3f64..2.0, sz in 0.3f64..2.0, t in 0.25f64..2.5,
        ) {
            let geom = Geometry::new([3, 3, 3], [sx, sy, sz], [0.0; 3]).unwrap();
            let v = Grid::new(geom, vals).unwrap();
            let r = resample_isotropic(&v, t).unwrap();
            let out = r.geometry();
            for z in 0..out.dims[2] {
                for y in 0..out.dims[1] {
                    for x in 0..out.dims[0] {
                        let c = [x, y, z];
                        let mut lo = f32::INFINITY;
                        let mut hi = f32::NEG_INFINITY;
                        let mut corners = [[0usize; 2]; 3];
                        for a in 0..3 {
                            let p = (c[a] as f64 * t / geom.spacing[a]).min(2.0);
                            let i0 = p.floor() as usize;
                            corners[a] = [i0, (i0 + 1).min(2)];
                        }
                        for &cz in &corners[2] { for &cy in &corners[1] { for &cx in &corners[0] {
                            let s = v.get(cx, cy, cz);
                            lo = lo.min(s);
                            hi = hi.max(s);
                        }}}
                        let val = r.get(x, y, z);
                        prop_assert!(val >= lo - 1e-3 && val <= hi + 1e-3);
                    }
                }
            }
        }

        #[test]
        fn patch_then_embed_reproduces_overlap(
            sx in -3i64..5, sy in -3i64..5, sz in -2i64..3,
            w in 1usize..6, h in 1usize..6, d in 1usize..4,
        ) {
            let v = counting([4, 4, 3]);
            let patch = extract_patch(&v, [sx, sy, sz], [w, h, d], PAD_HU).unwrap();
            let mut target = Grid::filled(*v.geometry(), 0.0f32).unwrap();
            embed_patch(&mut target, &patch, [sx, sy, sz]);
            for (i, (&t, &orig)) in target.data().iter().zip(v.data()).enumerate() {
                let [x, y, z] = v.geometry().coords(i);
                let covered = (x as i64) >= sx && (x as i64) < sx + w as i64
                    && (y as i64) >= sy && (y as i64) < sy + h as i64
                    && (z as i64) >= sz && (z as i64) < sz + d as i64;
                prop_assert_eq!(t, if covered { orig } else { 0.0 });
            }
        }
    }
}
