//! Intensity-based lesion probability (ILP) function.
//!
//! Lesion intensities collected under ground-truth masks are turned into a
//! smooth density with a Gaussian kernel density estimate, then divided by
//! its maximum so the most lesion-like HU value maps to 1. Applying the
//! function voxel by voxel gives the ILP map used as auxiliary supervision.
//!
//! Evaluation normally goes through a lookup table over
//! `[LUT_MIN_HU, LUT_MAX_HU]` with linear interpolation; the exact kernel sum
//! stays available for reference checks.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::volume::{MaskVolume, ProbVolume, Volume3};

/// Lower end of the lookup/rescaling grid (HU).
pub const LUT_MIN_HU: f64 = -1024.0;
/// Upper end of the lookup/rescaling grid (HU).
pub const LUT_MAX_HU: f64 = 3071.0;
/// Samples beyond this many bandwidths contribute exactly zero in f64.
const KERNEL_CUTOFF: f64 = 40.0;
/// Default cap on the number of samples entering the KDE.
pub const DEFAULT_MAX_SAMPLES: usize = 200_000;

/// Counts of masked intensities in fixed-width bins.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntensityHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl IntensityHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Count of the bin containing `hu`, or 0 outside the histogram range.
    pub fn count_at(&self, hu: f64) -> u64 {
        let (Some(&lo), Some(&hi)) = (self.bin_edges.first(), self.bin_edges.last()) else {
            return 0;
        };
        if hu < lo || hu > hi {
            return 0;
        }
        let bin = self.bin_edges.partition_point(|&e| e <= hu).saturating_sub(1);
        self.counts[bin.min(self.counts.len() - 1)]
    }
}

/// Intensities of the voxels carrying `label`.
pub fn masked_samples(vol: &Volume3, mask: &MaskVolume, label: u8) -> Result<Vec<f64>> {
    vol.check_same_grid(mask)?;
    let samples: Vec<f64> = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &l)| l == label)
        .map(|(&v, _)| v as f64)
        .collect();
    if samples.is_empty() {
        return Err(Error::NoLesionVoxels);
    }
    Ok(samples)
}

/// Histogram of intensities under `label`, bins aligned to multiples of
/// `bin_width` and covering the observed range.
pub fn build_histogram(vol: &Volume3, mask: &MaskVolume, label: u8, bin_width: f64) -> Result<IntensityHistogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidParameter("bin width must be positive".into()));
    }
    let samples = masked_samples(vol, mask, label)?;
    histogram_from_samples(&samples, bin_width)
}

pub fn histogram_from_samples(samples: &[f64], bin_width: f64) -> Result<IntensityHistogram> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let (min, max) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let first = libm::floor(min / bin_width) as i64;
    let last = libm::floor(max / bin_width) as i64;
    let bins = (last - first + 1) as usize;
    let bin_edges: Vec<f64> = (0..=bins as i64).map(|k| (first + k) as f64 * bin_width).collect();
    let mut counts = alloc::vec![0u64; bins];
    for &s in samples {
        let k = (libm::floor(s / bin_width) as i64 - first).clamp(0, bins as i64 - 1);
        counts[k as usize] += 1;
    }
    Ok(IntensityHistogram { bin_edges, total: samples.len() as u64, counts })
}

/// Kernel bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BandwidthRule {
    /// `h = σ̂ n^(-1/5)`.
    #[default]
    Scott,
    /// `h = 0.9 min(σ̂, IQR/1.34) n^(-1/5)`.
    Silverman,
    Fixed(f64),
}

impl BandwidthRule {
    /// Bandwidth for the given samples (σ̂ uses `n - 1` in the denominator).
    pub fn bandwidth(self, samples: &[f64]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        let n = samples.len() as f64;
        let h = match self {
            BandwidthRule::Fixed(h) => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::InvalidParameter("fixed bandwidth must be positive".into()));
                }
                return Ok(h);
            }
            BandwidthRule::Scott => math::std_dev(samples, 1) * libm::pow(n, -0.2),
            BandwidthRule::Silverman => {
                let sorted = math::sorted_copy(samples);
                let iqr = math::quantile_sorted(&sorted, 0.75) - math::quantile_sorted(&sorted, 0.25);
                let sigma = math::std_dev(samples, 1);
                let spread = if iqr > 0.0 { sigma.min(iqr / 1.34) } else { sigma };
                0.9 * spread * libm::pow(n, -0.2)
            }
        };
        if h > 0.0 && h.is_finite() {
            Ok(h)
        } else {
            Err(Error::DegenerateBandwidth)
        }
    }
}

/// Options controlling [`fit_ilp_with`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FitOptions {
    pub rule: BandwidthRule,
    /// Lookup-table step in HU; `None` evaluates the kernel sum directly.
    pub lut_step: Option<f64>,
    /// Larger sample sets are uniformly subsampled (without replacement).
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { rule: BandwidthRule::Scott, lut_step: Some(1.0), max_samples: DEFAULT_MAX_SAMPLES, seed: 0 }
    }
}

/// Uniform lookup table of ILP values.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Lut {
    pub min_hu: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl Lut {
    pub fn max_hu(&self) -> f64 {
        self.min_hu + self.step * (self.values.len() - 1) as f64
    }

    pub fn grid_point(&self, i: usize) -> f64 {
        self.min_hu + self.step * i as f64
    }

    /// Linear interpolation, clamped to the end values outside the grid.
    #[inline]
    pub fn interpolate(&self, hu: f64) -> f64 {
        let pos = (hu - self.min_hu) / self.step;
        if !(pos > 0.0) {
            return self.values[0];
        }
        let last = self.values.len() - 1;
        if pos >= last as f64 {
            return self.values[last];
        }
        let i = pos as usize;
        let frac = pos - i as f64;
        self.values[i] + (self.values[i + 1] - self.values[i]) * frac
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) || !self.min_hu.is_finite() {
            return Err(Error::InvalidParameter("lookup table needs a finite origin and positive step".into()));
        }
        if self.values.len() < 2 {
            return Err(Error::InvalidParameter("lookup table needs at least two entries".into()));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("lookup table value outside [0, 1]"));
        }
        Ok(())
    }
}

fn grid_len(step: f64) -> usize {
    libm::floor((LUT_MAX_HU - LUT_MIN_HU) / step + 1e-9) as usize + 1
}

/// The fitted ILP function `f(x) = KDE(x) / c`.
#[derive(Debug, Clone, PartialEq)]
pub struct IlpFunction {
    /// Kernel centres, ascending. Empty for table-only functions.
    samples: Vec<f64>,
    bandwidth: f64,
    rescale_c: f64,
    lut: Option<Lut>,
}

/// Fits with default options apart from the rule and LUT step.
pub fn fit_ilp(samples: &[f64], rule: BandwidthRule, lut_step: Option<f64>) -> Result<IlpFunction> {
    fit_ilp_with(samples, &FitOptions { rule, lut_step, ..FitOptions::default() })
}

pub fn fit_ilp_with(samples: &[f64], options: &FitOptions) -> Result<IlpFunction> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidValue("non-finite sample"));
    }
    if let Some(step) = options.lut_step {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidParameter("lut step must be positive".into()));
        }
    }
    if options.max_samples == 0 {
        return Err(Error::InvalidParameter("max_samples must be >= 1".into()));
    }
    let mut kept: Vec<f64> = if samples.len() > options.max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut picks = index::sample(&mut rng, samples.len(), options.max_samples).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| samples[i]).collect()
    } else {
        samples.to_vec()
    };
    let bandwidth = options.rule.bandwidth(&kept)?;
    kept.sort_by(f64::total_cmp);

    let mut f = IlpFunction { samples: kept, bandwidth, rescale_c: 1.0, lut: None };
    let step = options.lut_step.unwrap_or(1.0);
    let raw: Vec<f64> = (0..grid_len(step)).map(|i| f.kde(LUT_MIN_HU + step * i as f64)).collect();
    let peak = raw.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::NonFinite("KDE peak on the rescaling grid"));
    }
    f.rescale_c = peak;
    if options.lut_step.is_some() {
        f.lut = Some(Lut { min_hu: LUT_MIN_HU, step, values: raw.iter().map(|v| (v / peak).min(1.0)).collect() });
    }
    Ok(f)
}

impl IlpFunction {
    /// Table-only function, e.g. restored from a model file or a user prior.
    pub fn from_lut(bandwidth: f64, rescale_c: f64, lut: Lut) -> Result<Self> {
        lut.validate()?;
        if !(bandwidth > 0.0 && rescale_c > 0.0) {
            return Err(Error::InvalidParameter("bandwidth and rescale constant must be positive".into()));
        }
        Ok(IlpFunction { samples: Vec::new(), bandwidth, rescale_c, lut: Some(lut) })
    }

    /// User-provided prior curve sampled on a uniform HU grid; values are
    /// rescaled to peak at 1. The bandwidth field is set to the grid step.
    pub fn from_table(hu: &[f64], values: &[f64]) -> Result<Self> {
        if hu.len() != values.len() {
            return Err(Error::ShapeMismatch { expected: hu.len(), actual: values.len() });
        }
        if hu.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, actual: hu.len() });
        }
        let step = hu[1] - hu[0];
        if !(step > 0.0) || hu.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step.max(1.0)) {
            return Err(Error::InvalidParameter("prior curve must be sampled on a uniform ascending grid".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidValue("prior curve values must be finite and non-negative"));
        }
        let peak = values.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::InvalidValue("prior curve is zero everywhere"));
        }
        let lut = Lut { min_hu: hu[0], step, values: values.iter().map(|v| v / peak).collect() };
        Self::from_lut(step, peak, lut)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn rescale_c(&self) -> f64 {
        self.rescale_c
    }

    pub fn lut(&self) -> Option<&Lut> {
        self.lut.as_ref()
    }

    /// Kernel centres in ascending order (empty for table-only functions).
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn has_kernel(&self) -> bool {
        !self.samples.is_empty()
    }

    /// Copy that evaluates the kernel sum directly.
    pub fn without_lut(&self) -> Self {
        assert!(self.has_kernel(), "table-only ILP function has no exact evaluation path");
        IlpFunction { lut: None, ..self.clone() }
    }

    /// Unrescaled density `(1/(n h)) Σ φ((x - s_j)/h)`.
    pub fn kde(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self.samples.partition_point(|&s| s < x - KERNEL_CUTOFF * h);
        let hi = self.samples.partition_point(|&s| s <= x + KERNEL_CUTOFF * h);
        let sum: f64 = self.samples[lo..hi]
            .iter()
            .map(|&s| {
                let z = (x - s) / h;
                libm::exp(-0.5 * z * z)
            })
            .fold(0.0, |acc, v| acc + v);
        sum / (self.samples.len() as f64 * h * libm::sqrt(2.0 * PI))
    }

    /// Exact `KDE(x) / c`, capped at 1 between rescaling grid points.
    /// Table-only functions fall back to the table.
    pub fn eval_exact(&self, hu: f64) -> f64 {
        if self.samples.is_empty() {
            return self.lut.as_ref().map_or(0.0, |l| l.interpolate(hu));
        }
        (self.kde(hu) / self.rescale_c).min(1.0)
    }

    /// Default evaluation path: the table when present, else exact.
    #[inline]
    pub fn eval(&self, hu: f64) -> f64 {
        match &self.lut {
            Some(lut) => lut.interpolate(hu),
            None => self.eval_exact(hu),
        }
    }

    /// Grid point with the largest table value (first one on ties).
    pub fn lut_mode(&self) -> Option<f64> {
        let lut = self.lut.as_ref()?;
        let (best, _) = lut
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        Some(lut.grid_point(best))
    }
}

/// `f^ILP(hu)`, in `[0, 1]`.
#[inline]
pub fn eval_ilp(f: &IlpFunction, hu: f64) -> f64 {
    f.eval(hu)
}

/// Applies the ILP function to every voxel.
pub fn make_ilp_volume(f: &IlpFunction, vol: &Volume3) -> ProbVolume {
    let data = vol.data().iter().map(|&x| f.eval(x as f64) as f32).collect();
    ProbVolume::new(*vol.geometry(), data).expect("ILP values lie in [0, 1]")
}

/// Returns `g` with `g(x) = f(x - delta)`: kernel centres move by `delta`,
/// bandwidth and rescale constant are kept, the table is rebuilt.
pub fn shift_ilp(f: &IlpFunction, delta: f64) -> IlpFunction {
    let samples: Vec<f64> = f.samples.iter().map(|s| s + delta).collect();
    let mut g = IlpFunction { samples, bandwidth: f.bandwidth, rescale_c: f.rescale_c, lut: None };
    if let Some(lut) = &f.lut {
        let values = (0..lut.values.len())
            .map(|i| {
                let x = lut.grid_point(i);
                if g.has_kernel() {
                    g.eval_exact(x)
                } else {
                    lut.interpolate(x - delta)
                }
            })
            .collect();
        g.lut = Some(Lut { min_hu: lut.min_hu, step: lut.step, values });
    }
    g
}

/// One row of an exported ILP curve.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurveRow {
    pub hu: f64,
    pub ilp: f64,
    pub count: Option<u64>,
}

/// Samples the ILP function (and optionally the histogram) on
/// `lo, lo + step, ..., <= hi`.
pub fn export_curve(f: &IlpFunction, hist: Option<&IntensityHistogram>, lo: f64, hi: f64, step: f64) -> Result<Vec<CurveRow>> {
    if !(lo < hi && step > 0.0 && lo.is_finite() && hi.is_finite() && step.is_finite()) {
        return Err(Error::InvalidParameter("curve range needs lo < hi and step > 0".into()));
    }
    let rows = libm::floor((hi - lo) / step + 1e-9) as usize + 1;
    Ok((0..rows)
        .map(|k| {
            let hu = lo + step * k as f64;
            CurveRow { hu, ilp: f.eval(hu), count: hist.map(|h| h.count_at(hu)) }
        })
        .collect())
}
