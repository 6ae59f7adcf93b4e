//! Mini-batch SGD training on 2D slices.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{init, loss_and_grad, BatchItem, FeatureMap, IlpMode, NetParams, NetSpec};
use crate::diffusion::{diffuse, DiffusionParams};
use crate::error::{Error, Result};
use crate::ilp::{shift_ilp, IlpFunction};
use crate::losses::LossConfig;
use crate::volume::{MaskVolume, Volume3};

/// Optimiser, schedule and ILP usage for [`train`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random crop `[height, width]`; `None` trains on whole slices.
    pub patch_size: Option<[usize; 2]>,
    pub seed: u64,
    pub ilp_mode: IlpMode,
    /// Random horizontal/vertical flips.
    pub flips: bool,
    /// Compute ILP targets from the diffused image instead of the raw one.
    pub target_smoothing: Option<DiffusionParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            weight_decay: 5e-4,
            momentum: 0.9,
            loss: LossConfig::default(),
            epochs: 10,
            batch_size: 4,
            patch_size: None,
            seed: 0,
            ilp_mode: IlpMode::None,
            flips: false,
            target_smoothing: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must be in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        if let Some([h, w]) = self.patch_size {
            if h == 0 || w == 0 {
                return Err(Error::InvalidParameter("patch_size must be positive".into()));
            }
        }
        if let IlpMode::Shifted(d) = self.ilp_mode {
            if !d.is_finite() {
                return Err(Error::InvalidParameter("shift must be finite".into()));
            }
        }
        if let Some(p) = &self.target_smoothing {
            p.validate()?;
        }
        self.loss.validate()
    }
}

/// One image/mask pair; every z-slice becomes a training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Volume3,
    pub mask: MaskVolume,
}

/// Mean losses over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_ilp: f64,
}

/// Network input for one slice: normalised HU, plus the ILP map in input mode.
pub(crate) fn slice_input(spec: &NetSpec, hu: &[f32], ilp_map: Option<&[f32]>, h: usize, w: usize) -> FeatureMap {
    let mut fm = FeatureMap::zeros(spec.input_channels, h, w);
    for (d, &v) in fm.channel_mut(0).iter_mut().zip(hu) {
        *d = spec.normalize(v as f64);
    }
    if spec.input_channels == 2 {
        let ilp = ilp_map.expect("two-channel input needs an ILP map");
        for (d, &v) in fm.channel_mut(1).iter_mut().zip(ilp) {
            *d = v as f64;
        }
    }
    fm
}

/// ILP function actually used by a mode (shifted modes shift first).
pub(crate) fn mode_function(mode: IlpMode, f: Option<&IlpFunction>) -> Result<Option<IlpFunction>> {
    if !mode.needs_ilp_function() {
        return Ok(None);
    }
    let f = f.ok_or(Error::MissingIlpTarget)?;
    Ok(Some(match mode {
        IlpMode::Shifted(d) => shift_ilp(f, d),
        _ => f.clone(),
    }))
}

pub(crate) fn check_mode_channels(spec: &NetSpec, mode: IlpMode) -> Result<()> {
    if spec.input_channels != mode.input_channels() {
        return Err(Error::InvalidParameter(alloc::format!(
            "mode {} needs {} input channel(s), network has {}",
            mode.label(),
            mode.input_channels(),
            spec.input_channels
        )));
    }
    Ok(())
}

struct Example {
    input: FeatureMap,
    seg: Vec<f64>,
    ilp: Option<Vec<f64>>,
}

fn prepare(dataset: &[TrainSample], spec: &NetSpec, cfg: &TrainConfig, f: Option<&IlpFunction>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for sample in dataset {
        sample.image.check_same_grid(&sample.mask)?;
        let target_source = match &cfg.target_smoothing {
            Some(p) if cfg.ilp_mode.supervises_ilp() => diffuse(&sample.image, p)?,
            _ => sample.image.clone(),
        };
        let map_of = |v: &Volume3| -> Option<Vec<f32>> {
            f.map(|f| v.data().iter().map(|&x| f.eval(x as f64) as f32).collect())
        };
        let input_ilp = if cfg.ilp_mode == IlpMode::Input { map_of(&sample.image) } else { None };
        let target_ilp = if cfg.ilp_mode.supervises_ilp() { map_of(&target_source) } else { None };
        let [nx, ny, nz] = sample.image.dims();
        let plane = nx * ny;
        for z in 0..nz {
            let range = z * plane..(z + 1) * plane;
            let hu = &sample.image.data()[range.clone()];
            let input = slice_input(spec, hu, input_ilp.as_ref().map(|m| &m[range.clone()]), ny, nx);
            let seg = sample.mask.data()[range.clone()].iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
            let ilp = target_ilp.as_ref().map(|m| m[range.clone()].iter().map(|&v| v as f64).collect());
            out.push(Example { input, seg, ilp });
        }
    }
    Ok(out)
}

fn crop_plane(data: &[f64], w: usize, y0: usize, x0: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ph * pw);
    for y in y0..y0 + ph {
        out.extend_from_slice(&data[y * w + x0..y * w + x0 + pw]);
    }
    out
}

fn flip_plane(data: &[f64], h: usize, w: usize, horizontal: bool) -> Vec<f64> {
    let fm = FeatureMap { channels: 1, height: h, width: w, data: data.to_vec() };
    fm.flipped(horizontal).data
}

fn make_item(ex: &Example, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> BatchItem {
    let (h, w) = (ex.input.height, ex.input.width);
    let mut item = match cfg.patch_size {
        Some([ph, pw]) if ph < h || pw < w => {
            let (ph, pw) = (ph.min(h), pw.min(w));
            let y0 = rng.random_range(0..=h - ph);
            let x0 = rng.random_range(0..=w - pw);
            let pad = alloc::vec![0.0; ex.input.channels];
            BatchItem {
                patch: ex.input.window(y0 as i64, x0 as i64, ph, pw, &pad),
                seg_gt: crop_plane(&ex.seg, w, y0, x0, ph, pw),
                ilp_target: ex.ilp.as_ref().map(|m| crop_plane(m, w, y0, x0, ph, pw)),
            }
        }
        _ => BatchItem { patch: ex.input.clone(), seg_gt: ex.seg.clone(), ilp_target: ex.ilp.clone() },
    };
    if cfg.flips {
        for horizontal in [true, false] {
            if rng.random_bool(0.5) {
                let (ph, pw) = (item.patch.height, item.patch.width);
                item.patch = item.patch.flipped(horizontal);
                item.seg_gt = flip_plane(&item.seg_gt, ph, pw, horizontal);
                item.ilp_target = item.ilp_target.map(|m| flip_plane(&m, ph, pw, horizontal));
            }
        }
    }
    item
}

/// Trains a freshly initialised network (init seed = `cfg.seed`).
///
/// Returns the final parameters and one [`EpochRecord`] per epoch. `ilp`
/// is required by every mode except [`IlpMode::None`].
pub fn train(
    dataset: &[TrainSample],
    spec: &NetSpec,
    cfg: &TrainConfig,
    ilp: Option<&IlpFunction>,
) -> Result<(NetParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    let params = init(spec, cfg.seed)?;
    train_from(params, dataset, cfg, ilp)
}

/// Continues training from existing parameters.
pub fn train_from(
    mut params: NetParams,
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    ilp: Option<&IlpFunction>,
) -> Result<(NetParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_mode_channels(&params.spec, cfg.ilp_mode)?;
    let f = mode_function(cfg.ilp_mode, ilp)?;
    let examples = prepare(dataset, &params.spec, cfg, f.as_ref())?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a1e);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut flat = params.flatten();
    let mut velocity = alloc::vec![0.0; flat.len()];
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seg, mut ilp_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk.iter().map(|&i| make_item(&examples[i], cfg, &mut rng)).collect();
            let loss = loss_and_grad(&params, &batch, cfg.ilp_mode, &cfg.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&loss.gradient) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v + cfg.learning_rate * cfg.weight_decay * *p;
            }
            params.set_flat(&flat)?;
            total += loss.total;
            seg += loss.seg;
            ilp_sum += loss.ilp;
            batches += 1;
        }
        let n = batches as f64;
        history.push(EpochRecord { epoch: epoch + 1, loss_total: total / n, loss_seg: seg / n, loss_ilp: ilp_sum / n });
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("network parameters"));
    }
    Ok((params, history))
}
