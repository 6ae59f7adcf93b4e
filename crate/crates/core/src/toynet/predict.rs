//! Sliding-window inference.

use alloc::vec;
use alloc::vec::Vec;

use super::train::{check_mode_channels, mode_function, slice_input};
use super::{forward, FeatureMap, IlpMode, NetParams};
use crate::error::{Error, Result};
use crate::ilp::{make_ilp_volume, IlpFunction};
use crate::metrics::apply_ilp_postprocess;
use crate::volume::{ProbVolume, Volume3};

/// Window start positions along an axis of length `n`; the last window is
/// moved back so it ends at the border.
fn starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch >= n {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + patch < n).collect();
    out.push(n - patch);
    out.dedup();
    out
}

/// Segmentation probabilities of one `[C, H, W]` input, averaging
/// overlapping windows of `patch = [height, width]`.
pub fn predict_slice(params: &NetParams, input: &FeatureMap, patch: [usize; 2], stride: [usize; 2]) -> Result<Vec<f64>> {
    if patch.contains(&0) || stride.contains(&0) {
        return Err(Error::InvalidParameter("patch and stride must be positive".into()));
    }
    if stride[0] > patch[0] || stride[1] > patch[1] {
        return Err(Error::InvalidParameter("stride must not exceed patch size".into()));
    }
    let (h, w) = (input.height, input.width);
    let (ph, pw) = (patch[0].min(h), patch[1].min(w));
    let mut acc = vec![0.0; h * w];
    let mut hits = vec![0u32; h * w];
    let pad = vec![0.0; input.channels];
    for &y0 in &starts(h, ph, stride[0]) {
        for &x0 in &starts(w, pw, stride[1]) {
            let window = input.window(y0 as i64, x0 as i64, ph, pw, &pad);
            let (seg, _) = forward(params, &window)?;
            for y in 0..ph {
                for x in 0..pw {
                    let i = (y0 + y) * w + x0 + x;
                    acc[i] += seg[y * pw + x];
                    hits[i] += 1;
                }
            }
        }
    }
    Ok(acc.iter().zip(&hits).map(|(a, &n)| a / n as f64).collect())
}

/// Slice-by-slice segmentation of a volume. In postprocess mode the averaged
/// map is multiplied by the ILP volume of the input.
pub fn predict_volume(
    params: &NetParams,
    vol: &Volume3,
    patch: [usize; 2],
    stride: [usize; 2],
    mode: IlpMode,
    ilp: Option<&IlpFunction>,
) -> Result<ProbVolume> {
    check_mode_channels(&params.spec, mode)?;
    let f = mode_function(mode, ilp)?;
    let ilp_map = match (&f, mode) {
        (Some(f), IlpMode::Input | IlpMode::Postprocess) => Some(make_ilp_volume(f, vol)),
        _ => None,
    };
    let [nx, ny, nz] = vol.dims();
    let plane = nx * ny;
    let mut out = Vec::with_capacity(vol.len());
    for z in 0..nz {
        let range = z * plane..(z + 1) * plane;
        let extra = if mode == IlpMode::Input { ilp_map.as_ref().map(|m| &m.data()[range.clone()]) } else { None };
        let input = slice_input(&params.spec, &vol.data()[range], extra, ny, nx);
        out.extend(predict_slice(params, &input, patch, stride)?.into_iter().map(|p| p as f32));
    }
    let prob = ProbVolume::new(*vol.geometry(), out)?;
    match (mode, ilp_map) {
        (IlpMode::Postprocess, Some(m)) => apply_ilp_postprocess(&prob, &m),
        _ => Ok(prob),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ilp::{fit_ilp, BandwidthRule};
    use crate::toynet::{init, NetSpec};
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::with_dims(dims).unwrap();
        let n = g.len();
        Volume3::new(g, (0..n).map(|_| rng.random_range(0.0..250.0)).collect()).unwrap()
    }

    fn net(seed: u64) -> NetParams {
        init(&NetSpec { hidden_channels: vec![3], ..Default::default() }, seed).unwrap()
    }

    #[test]
    fn window_starts() {
        assert_eq!(starts(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(starts(8, 4, 4), vec![0, 4]);
        assert_eq!(starts(8, 4, 2), vec![0, 2, 4]);
        assert_eq!(starts(3, 4, 4), vec![0]);
        assert_eq!(starts(4, 4, 1), vec![0]);
    }

    #[test]
    fn exact_tiling_equals_stitched_tiles() {
        let p = net(1);
        let vol = random_volume(2, [8, 12, 1]);
        let got = predict_volume(&p, &vol, [4, 4], [4, 4], IlpMode::None, None).unwrap();
        let input = slice_input(&p.spec, vol.data(), None, 12, 8);
        for ty in 0..3 {
            for tx in 0..2 {
                let tile = input.window(ty * 4, tx * 4, 4, 4, &[0.0]);
                let (seg, _) = forward(&p, &tile).unwrap();
                for y in 0..4 {
                    for x in 0..4 {
                        let i = (ty as usize * 4 + y) * 8 + tx as usize * 4 + x;
                        assert_eq!(got.data()[i], seg[y * 4 + x] as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn overlap_average_matches_brute_force() {
        let p = net(3);
        let vol = random_volume(4, [9, 7, 1]);
        let input = slice_input(&p.spec, vol.data(), None, 7, 9);
        let got = predict_slice(&p, &input, [4, 5], [2, 3]).unwrap();
        // accumulate every window position the tiling visits
        let ys = [0usize, 2, 3];
        let xs = [0usize, 3, 4];
        let mut sum = vec![0.0; 63];
        let mut count = vec![0.0; 63];
        for &y0 in &ys {
            for &x0 in &xs {
                let (seg, _) = forward(&p, &input.window(y0 as i64, x0 as i64, 4, 5, &[0.0])).unwrap();
                for y in 0..4 {
                    for x in 0..5 {
                        sum[(y0 + y) * 9 + x0 + x] += seg[y * 5 + x];
                        count[(y0 + y) * 9 + x0 + x] += 1.0;
                    }
                }
            }
        }
        for i in 0..63 {
            assert!((got[i] - sum[i] / count[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn overlap_counts_on_constant_net() {
        // zero weights give 0.5 everywhere, so averaging must return 0.5
        let mut p = net(5);
        let zeros = vec![0.0; p.num_params()];
        p.set_flat(&zeros).unwrap();
        let vol = random_volume(6, [11, 6, 2]);
        let out = predict_volume(&p, &vol, [3, 4], [1, 2], IlpMode::None, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn postprocess_identity_and_bound() {
        let p = net(7);
        let g = Geometry::with_dims([6, 6, 1]).unwrap();
        let vol = Volume3::filled(g, 150.0).unwrap();
        let f = fit_ilp(&[150.0; 20], BandwidthRule::Fixed(10.0), Some(1.0)).unwrap();
        let raw = predict_volume(&p, &vol, [6, 6], [6, 6], IlpMode::None, None).unwrap();
        let pp = predict_volume(&p, &vol, [6, 6], [6, 6], IlpMode::Postprocess, Some(&f)).unwrap();
        assert_eq!(raw.data(), pp.data());

        let vol = random_volume(8, [6, 6, 1]);
        let raw = predict_volume(&p, &vol, [4, 4], [2, 2], IlpMode::None, None).unwrap();
        let pp = predict_volume(&p, &vol, [4, 4], [2, 2], IlpMode::Postprocess, Some(&f)).unwrap();
        assert!(raw.data().iter().zip(pp.data()).all(|(r, q)| q <= r));
    }

    #[test]
    fn rejects_large_stride() {
        let p = net(9);
        let vol = random_volume(1, [4, 4, 1]);
        assert!(predict_volume(&p, &vol, [2, 2], [3, 2], IlpMode::None, None).is_err());
    }
}
