//! Synthetic CT phantoms with known lesion masks.
//!
//! A phantom is a noisy background with one or more elliptical organ blobs;
//! lesions are smaller ellipsoids placed fully inside the organs and kept
//! apart from each other. Every voxel intensity is drawn independently from
//! the normal distribution of its tissue class, then additive noise is
//! applied to the whole image.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Geometry, MaskVolume, Volume3};

/// Normal intensity distribution in HU.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tissue {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background: Tissue,
    /// Inclusive range of organ blob counts.
    pub organ_count: [usize; 2],
    /// Range of organ semi-axes in voxels.
    pub organ_radius: [f64; 2],
    pub organ: Tissue,
    pub lesion_count: [usize; 2],
    /// Range of lesion semi-axes in voxels.
    pub lesion_radius: [f64; 2],
    pub lesion: Tissue,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 1],
            spacing: [1.0; 3],
            background: Tissue { mean: 0.0, std: 20.0 },
            organ_count: [1, 2],
            organ_radius: [12.0, 20.0],
            organ: Tissue { mean: 100.0, std: 15.0 },
            lesion_count: [1, 3],
            lesion_radius: [2.0, 6.0],
            lesion: Tissue { mean: 160.0, std: 10.0 },
            noise_std: 5.0,
            seed: 0,
        }
    }
}

/// Attempts per lesion before giving up.
const MAX_PLACEMENT_TRIES: usize = 500;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        for t in [self.background, self.organ, self.lesion] {
            if !(t.std >= 0.0 && t.std.is_finite() && t.mean.is_finite()) {
                return Err(Error::InvalidParameter("tissue std must be finite and non-negative".into()));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidParameter("noise_std must be non-negative".into()));
        }
        for (name, r) in [("organ_radius", self.organ_radius), ("lesion_radius", self.lesion_radius)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be a positive range")));
            }
        }
        for (name, c) in [("organ_count", self.organ_count), ("lesion_count", self.lesion_count)] {
            if c[0] > c[1] {
                return Err(Error::InvalidParameter(format!("{name} range is reversed")));
            }
        }
        if self.organ_count[1] == 0 && self.lesion_count[1] > 0 {
            return Err(Error::InvalidParameter("lesions need at least one organ".into()));
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let spread = self.lesion.std.max(self.organ.std);
        if libm::fabs(self.lesion.mean - self.organ.mean) < spread {
            out.push(format!(
                "lesion mean {} HU is within one std of the organ mean {} HU",
                self.lesion.mean, self.organ.mean
            ));
        }
        out
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    /// Semi-axes; `INFINITY` on axes of length 1 so 2D slabs get discs.
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            if self.radii[a].is_finite() {
                let d = (p[a] as f64 - self.center[a]) / self.radii[a];
                s += d * d;
            }
        }
        s <= 1.0
    }

    /// Index bounding box, clipped to `dims`.
    fn bbox(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        core::array::from_fn(|a| {
            if !self.radii[a].is_finite() {
                return (0, dims[a]);
            }
            let lo = libm::floor(self.center[a] - self.radii[a]).max(0.0) as usize;
            let hi = (libm::ceil(self.center[a] + self.radii[a]) as usize + 1).min(dims[a]);
            (lo.min(dims[a]), hi)
        })
    }
}

fn random_ellipsoid(rng: &mut ChaCha8Rng, dims: [usize; 3], radius: [f64; 2], margin: bool) -> Ellipsoid {
    let mut radii = [f64::INFINITY; 3];
    let mut center = [0.0; 3];
    for a in 0..3 {
        if dims[a] == 1 {
            continue;
        }
        let r = if radius[0] < radius[1] { rng.random_range(radius[0]..=radius[1]) } else { radius[0] };
        radii[a] = r;
        let extent = (dims[a] - 1) as f64;
        let (lo, hi) = if margin && 2.0 * r < extent { (r, extent - r) } else { (0.0, extent) };
        center[a] = if lo < hi { rng.random_range(lo..=hi) } else { extent / 2.0 };
    }
    Ellipsoid { center, radii }
}

fn count_in(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    rng.random_range(range[0]..=range[1])
}

fn normal(t: Tissue) -> Result<Normal<f64>> {
    Normal::new(t.mean, t.std).map_err(|_| Error::InvalidParameter("invalid tissue distribution".into()))
}

/// One phantom image and its lesion mask (label 1).
pub fn generate(spec: &PhantomSpec) -> Result<(Volume3, MaskVolume)> {
    let (image, mask, _) = generate_with_organs(spec)?;
    Ok((image, mask))
}

/// Like [`generate`], also returning the organ support mask.
pub fn generate_with_organs(spec: &PhantomSpec) -> Result<(Volume3, MaskVolume, MaskVolume)> {
    spec.validate()?;
    let geom = Geometry::new(spec.dims, spec.spacing, [0.0; 3])?;
    let dims = spec.dims;
    let n = geom.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut organ = vec![0u8; n];
    for _ in 0..count_in(&mut rng, spec.organ_count) {
        let e = random_ellipsoid(&mut rng, dims, spec.organ_radius, true);
        paint(&geom, &e, |i| organ[i] = 1);
    }

    let mut lesion = vec![0u8; n];
    let lesions = count_in(&mut rng, spec.lesion_count);
    let support: Vec<usize> = (0..n).filter(|&i| organ[i] != 0).collect();
    for _ in 0..lesions {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            if support.is_empty() {
                break;
            }
            let mut e = random_ellipsoid(&mut rng, dims, spec.lesion_radius, false);
            // centre on a random organ voxel
            let [x, y, z] = geom.coords(support[rng.random_range(0..support.len())]);
            for (a, c) in [x, y, z].into_iter().enumerate() {
                if dims[a] > 1 {
                    e.center[a] = c as f64;
                }
            }
            if fits(&geom, &e, &organ, &lesion) {
                paint(&geom, &e, |i| lesion[i] = 1);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasiblePlacement);
        }
    }

    let bg = normal(spec.background)?;
    let org = normal(spec.organ)?;
    let les = normal(spec.lesion)?;
    let noise = normal(Tissue { mean: 0.0, std: spec.noise_std })?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let tissue = if lesion[i] != 0 {
            les.sample(&mut rng)
        } else if organ[i] != 0 {
            org.sample(&mut rng)
        } else {
            bg.sample(&mut rng)
        };
        data.push((tissue + noise.sample(&mut rng)) as f32);
    }
    Ok((Volume3::new(geom, data)?, MaskVolume::new(geom, lesion)?, MaskVolume::new(geom, organ)?))
}

fn paint(geom: &Geometry, e: &Ellipsoid, mut f: impl FnMut(usize)) {
    let [bx, by, bz] = e.bbox(geom.dims);
    for z in bz.0..bz.1 {
        for y in by.0..by.1 {
            for x in bx.0..bx.1 {
                if e.contains([x, y, z]) {
                    f(geom.index(x, y, z));
                }
            }
        }
    }
}

/// Lesion fully inside the organ support, non-empty, and not touching any
/// existing lesion voxel (26-neighbourhood).
fn fits(geom: &Geometry, e: &Ellipsoid, organ: &[u8], lesion: &[u8]) -> bool {
    let dims = geom.dims;
    // every voxel of the ellipsoid must lie inside the image
    for a in 0..3 {
        if e.radii[a].is_finite() && (e.center[a] - e.radii[a] < 0.0 || e.center[a] + e.radii[a] > (dims[a] - 1) as f64) {
            return false;
        }
    }
    let mut any = false;
    let [bx, by, bz] = e.bbox(dims);
    for z in bz.0..bz.1 {
        for y in by.0..by.1 {
            for x in bx.0..bx.1 {
                if !e.contains([x, y, z]) {
                    continue;
                }
                any = true;
                if organ[geom.index(x, y, z)] == 0 {
                    return false;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as i64 || ny >= dims[1] as i64 || nz >= dims[2] as i64 {
                                continue;
                            }
                            if lesion[geom.index(nx as usize, ny as usize, nz as usize)] != 0 {
                                return false;
                            }
                        }
                    }
                }
            }
        }
    }
    any
}

/// `n` phantoms, pair `k` generated with seed `base_seed + k`.
pub fn generate_dataset(spec: &PhantomSpec, n: usize, base_seed: u64) -> Result<Vec<(Volume3, MaskVolume)>> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be at least 1".into()));
    }
    (0..n as u64).map(|k| generate(&spec.with_seed(base_seed.wrapping_add(k)))).collect()
}
