//! The `ilpforge` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ilpforge_core::diffusion::diffuse;
use ilpforge_core::ilp::{export_curve, fit_ilp_with, histogram_from_samples, make_ilp_volume, masked_samples};
use ilpforge_core::metrics::{average_precision, components_to_detections, Box3, Detection3, EvalReport};
use ilpforge_core::phantom::{generate_dataset, PhantomSpec};
use ilpforge_core::toynet::{predict_volume, train, IlpMode, TrainSample};
use ilpforge_core::volume::{resample_isotropic, resample_mask};
use ilpforge_core::{MaskVolume, Volume3};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Context, ToolError, ToolResult};
use crate::model_io::{history_to_csv, read_ilp, read_params, write_curve, write_model, write_params};
use crate::nifti::{read_mask, read_prob, read_volume, write_mask, write_prob, write_volume};
use crate::study::{parse_mode, run_study, StudyConfig};

#[derive(Debug, Parser)]
#[command(name = "ilpforge", version, about = "Intensity-based lesion probability tools for CT volumes")]
pub struct Cli {
    /// Seed for every randomised step (phantoms, training, subsampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, `section.key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

/// Image/mask pairs given explicitly or through a phantom manifest.
#[derive(Debug, Args)]
pub struct Pairs {
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    #[arg(long = "mask")]
    pub masks: Vec<PathBuf>,
    /// Manifest written by `phantom`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an ILP model on lesion voxels and write the model JSON and curve CSV.
    BuildIlp {
        #[command(flatten)]
        pairs: Pairs,
        /// Mask label to sample (defaults to `ilp.label`).
        #[arg(long)]
        label: Option<u8>,
        /// Skip pairs whose mask lacks the label instead of failing.
        #[arg(long)]
        skip_empty: bool,
        #[arg(long)]
        out: PathBuf,
        /// Curve CSV path; defaults to the model path with a `.csv` extension.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Write the ILP map of an image.
    ApplyIlp {
        /// Model JSON or prior LUT CSV.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the phantom study and write JSON and CSV reports.
    Study {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Use the small smoke configuration instead of `[study]`.
        #[arg(long)]
        smoke: bool,
    },
    /// Edge-preserving smoothing.
    Diffuse {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Isotropic resampling (trilinear, nearest neighbour with `--mask`).
    Resample {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target spacing in mm.
        #[arg(long)]
        spacing: f64,
        #[arg(long)]
        mask: bool,
    },
    /// Generate phantom image/mask pairs and a manifest.
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Write `.nii.gz` files.
        #[arg(long)]
        gz: bool,
    },
    /// Train the two-head network.
    Train {
        #[command(flatten)]
        pairs: Pairs,
        /// ILP model (needed by every mode except `none`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Predict a lesion probability map.
    Predict {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// ILP mode (defaults to `train.ilp_mode`).
        #[arg(long)]
        mode: Option<String>,
        /// Also write the thresholded mask.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Per-case and per-lesion Dice of predictions against ground truth.
    EvalSeg {
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long = "gt", required = true)]
        gts: Vec<PathBuf>,
        /// Predictions of a second method, paired with `--pred` for a t-test.
        #[arg(long = "baseline")]
        baselines: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average precision of component detections from probability maps.
    EvalDet {
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long = "gt", required = true)]
        gts: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the ILP curve, optionally with a lesion histogram.
    PlotCurve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pairs: Pairs,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub files: Vec<ManifestEntry>,
}

pub fn read_manifest(path: &Path) -> ToolResult<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ToolError::format(path, e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(m.files.iter().map(|f| (dir.join(&f.image), dir.join(&f.mask))).collect())
}

impl Pairs {
    fn resolve(&self) -> ToolResult<Vec<(PathBuf, PathBuf)>> {
        if self.images.len() != self.masks.len() {
            return Err(ToolError::Usage(format!("{} --image but {} --mask arguments", self.images.len(), self.masks.len())));
        }
        let mut pairs: Vec<_> = self.images.iter().cloned().zip(self.masks.iter().cloned()).collect();
        if let Some(m) = &self.manifest {
            pairs.extend(read_manifest(m)?);
        }
        Ok(pairs)
    }

    fn required(&self) -> ToolResult<Vec<(PathBuf, PathBuf)>> {
        let pairs = self.resolve()?;
        if pairs.is_empty() {
            return Err(ToolError::Usage("at least one --image/--mask pair or a --manifest is required".into()));
        }
        Ok(pairs)
    }
}

fn read_pair(image: &Path, mask: &Path) -> ToolResult<(Volume3, MaskVolume)> {
    let vol = read_volume(image)?;
    let m = read_mask(mask)?;
    vol.check_same_grid(&m).context(|| format!("{} vs {}", image.display(), mask.display()))?;
    Ok((vol, m))
}

fn write_text(path: &Path, text: &str) -> ToolResult<()> {
    fs::write(path, text).map_err(|e| ToolError::io(path, e))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> ToolResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ToolError::Config(e.to_string()))?;
    text.push('\n');
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> ToolResult<PipelineConfig> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn threads(cli: &Cli) -> usize {
    cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

/// A prediction file as a binary mask: label images are binarised, other
/// values are thresholded as probabilities.
fn read_prediction(path: &Path, threshold: f64) -> ToolResult<MaskVolume> {
    let vol = read_volume(path)?;
    let labels = vol.data().iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v));
    if labels {
        Ok(vol.map(|v| u8::from(v > 0.0))?)
    } else {
        Ok(read_prob(path)?.threshold(threshold as f32))
    }
}

fn eval_pairs(preds: &[PathBuf], gts: &[PathBuf], threshold: f64) -> ToolResult<Vec<(MaskVolume, MaskVolume)>> {
    if preds.len() != gts.len() {
        return Err(ToolError::Usage(format!("{} predictions but {} ground-truth files", preds.len(), gts.len())));
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let pred = read_prediction(p, threshold)?;
            let gt = read_mask(g)?.binarized();
            pred.check_same_grid(&gt).context(|| format!("{} vs {}", p.display(), g.display()))?;
            Ok((pred, gt))
        })
        .collect()
}

/// Detections and ground-truth boxes of several cases pooled for one AP:
/// each case is moved along x past the previous ones so boxes of different
/// cases never overlap.
pub fn pooled_average_precision(cases: &[(Vec<Detection3>, Vec<Box3>)], extents: &[usize], iou: f64) -> f64 {
    let mut dets = Vec::new();
    let mut gt = Vec::new();
    let mut offset = 0.0;
    let shift = |b: &Box3, o: f64| Box3 { min: [b.min[0] + o, b.min[1], b.min[2]], max: [b.max[0] + o, b.max[1], b.max[2]] };
    for ((d, g), &nx) in cases.iter().zip(extents) {
        dets.extend(d.iter().map(|x| Detection3 { bbox: shift(&x.bbox, offset), score: x.score }));
        gt.extend(g.iter().map(|b| shift(b, offset)));
        offset += nx as f64 + 1.0;
    }
    average_precision(&dets, &gt, iou)
}

pub fn run(cli: &Cli) -> ToolResult<()> {
    let cfg = load_config(cli)?;
    let threads = threads(cli);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    match &cli.command {
        Command::BuildIlp { pairs, label, skip_empty, out, curve } => {
            let label = label.unwrap_or(cfg.ilp.label);
            let mut samples = Vec::new();
            for (img, mask) in pairs.required()? {
                let (vol, m) = read_pair(&img, &mask)?;
                let src = if cfg.ilp.smooth_histogram { diffuse(&vol, &cfg.diffusion)? } else { vol };
                match masked_samples(&src, &m, label) {
                    Ok(s) => samples.extend(s),
                    Err(ilpforge_core::Error::NoLesionVoxels) if *skip_empty => {
                        eprintln!("skipping {}: no voxel has label {label}", mask.display());
                    }
                    Err(e) => return Err(e).context(|| format!("{}", mask.display())),
                }
            }
            if samples.is_empty() {
                return Err(ilpforge_core::Error::NoLesionVoxels.into());
            }
            let hist = histogram_from_samples(&samples, cfg.ilp.bin_width)?;
            let f = fit_ilp_with(&samples, &cfg.fit_options())?;
            let [lo, hi] = cfg.ilp.curve_range;
            let rows = export_curve(&f, Some(&hist), lo, hi, cfg.ilp.curve_step)?;
            write_model(&f, out)?;
            let curve = curve.clone().unwrap_or_else(|| out.with_extension("csv"));
            write_curve(&rows, &curve)?;
            let mode = rows.iter().max_by(|a, b| a.ilp.total_cmp(&b.ilp)).map_or(f64::NAN, |r| r.hu);
            println!("samples {} bandwidth {:.4} mode {mode} HU", samples.len(), f.bandwidth());
        }
        Command::ApplyIlp { model, image, out } => {
            let f = read_ilp(model)?;
            let vol = read_volume(image)?;
            let src = if cfg.ilp.smooth_maps { diffuse(&vol, &cfg.diffusion)? } else { vol };
            write_prob(&make_ilp_volume(&f, &src), out)?;
        }
        Command::Study { out, csv, smoke } => {
            let mut study = if *smoke { StudyConfig::smoke() } else { cfg.study.clone() };
            if let Some(s) = cli.seed {
                study.base_seed = s;
            }
            let report = run_study(&study, threads)?;
            write_text(out, &(report.to_json()? + "\n"))?;
            let csv_path = csv.clone().unwrap_or_else(|| out.with_extension("csv"));
            write_text(&csv_path, &report.to_csv())?;
            for m in &report.modes {
                println!("{:<14} per-case Dice {:.3}", m.mode, m.per_case_dice.mean.unwrap_or(f64::NAN));
            }
            if let Some(t) = report.t_test("supervision vs none", "case") {
                println!("supervision vs none: t = {:.4}, p = {:.4e}", t.t, t.p);
            }
        }
        Command::Diffuse { image, out } => {
            write_volume(&diffuse(&read_volume(image)?, &cfg.diffusion)?, out)?;
        }
        Command::Resample { image, out, spacing, mask } => {
            if *mask {
                write_mask(&resample_mask(&read_mask(image)?, *spacing)?, out)?;
            } else {
                write_volume(&resample_isotropic(&read_volume(image)?, *spacing)?, out)?;
            }
        }
        Command::Phantom { out_dir, count, gz } => {
            if *count == 0 {
                return Err(ToolError::Usage("--count must be at least 1".into()));
            }
            for w in cfg.phantom.warnings() {
                eprintln!("warning: {w}");
            }
            fs::create_dir_all(out_dir).map_err(|e| ToolError::io(out_dir, e))?;
            let data = generate_dataset(&cfg.phantom, *count, cfg.phantom.seed).context(|| "stage phantom".into())?;
            let ext = if *gz { "nii.gz" } else { "nii" };
            let mut files = Vec::with_capacity(*count);
            for (k, (img, mask)) in data.iter().enumerate() {
                let entry = ManifestEntry { image: format!("case_{k:04}_image.{ext}"), mask: format!("case_{k:04}_mask.{ext}") };
                write_volume(img, out_dir.join(&entry.image))?;
                write_mask(mask, out_dir.join(&entry.mask))?;
                files.push(entry);
            }
            let manifest = Manifest { seed: cfg.phantom.seed, spec: cfg.phantom.clone(), files };
            emit_json(&manifest, Some(&out_dir.join("manifest.json")))?;
        }
        Command::Train { pairs, model, out, history } => {
            let mode = cfg.ilp_mode()?;
            let f = model.as_deref().map(read_ilp).transpose()?;
            let mut dataset = Vec::new();
            for (img, mask) in pairs.required()? {
                let (image, m) = read_pair(&img, &mask)?;
                dataset.push(TrainSample { image, mask: m.binarized() });
            }
            let tc = cfg.train_config(cfg.seed)?;
            let (params, hist) = train(&dataset, &cfg.net_spec(mode), &tc, f.as_ref()).context(|| "stage train".into())?;
            write_params(&params, out)?;
            let csv = history_to_csv(&hist);
            match history {
                Some(p) => write_text(p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Predict { params, image, out, model, mode, mask_out } => {
            let mode = match mode {
                Some(m) => parse_mode(m, cfg.train.shift)?,
                None => cfg.ilp_mode()?,
            };
            // training-only modes predict like the plain network
            let mode = if mode.supervises_ilp() { IlpMode::None } else { mode };
            let p = read_params(params)?;
            let f = model.as_deref().map(read_ilp).transpose()?;
            let vol = read_volume(image)?;
            let [nx, ny, _] = vol.dims();
            let patch = cfg.train.predict_patch.unwrap_or([ny, nx]);
            let stride = cfg.train.predict_stride.unwrap_or(patch);
            let prob = predict_volume(&p, &vol, patch, stride, mode, f.as_ref()).context(|| "stage predict".into())?;
            write_prob(&prob, out)?;
            if let Some(m) = mask_out {
                write_mask(&prob.threshold(cfg.metrics.threshold as f32), m)?;
            }
        }
        Command::EvalSeg { preds, gts, baselines, out } => {
            let m = &cfg.metrics;
            let cases = eval_pairs(preds, gts, m.threshold)?;
            let mut report = EvalReport::segmentation_with(&cases, m.lesion_margin, m.min_lesion_volume_mm3)?;
            if !baselines.is_empty() {
                let base = eval_pairs(baselines, gts, m.threshold)?;
                let base_report = EvalReport::segmentation_with(&base, m.lesion_margin, m.min_lesion_volume_mm3)?;
                report.add_t_test("pred vs baseline", &base_report.per_case_dice).context(|| "stage t-test".into())?;
            }
            emit_json(&report, out.as_deref())?;
        }
        Command::EvalDet { preds, gts, out } => {
            if preds.len() != gts.len() {
                return Err(ToolError::Usage(format!("{} predictions but {} ground-truth files", preds.len(), gts.len())));
            }
            let mut cases = Vec::new();
            let mut extents = Vec::new();
            for (p, g) in preds.iter().zip(gts) {
                let prob = read_prob(p)?;
                let gt = read_mask(g)?.binarized();
                prob.check_same_grid(&gt).context(|| format!("{} vs {}", p.display(), g.display()))?;
                let dets = components_to_detections(&prob, cfg.metrics.threshold)?;
                let boxes = ilpforge_core::metrics::connected_components(&gt, cfg.metrics.connectivity)
                    .iter()
                    .map(|c| Box3::from_voxels(c.bbox_min, c.bbox_max))
                    .collect();
                extents.push(gt.dims()[0]);
                cases.push((dets, boxes));
            }
            let ap = pooled_average_precision(&cases, &extents, cfg.metrics.iou_threshold);
            let report = EvalReport { ap: Some(ap), ..EvalReport::default() };
            emit_json(&report, out.as_deref())?;
        }
        Command::PlotCurve { model, out, pairs } => {
            let f = read_ilp(model)?;
            let mut samples = Vec::new();
            for (img, mask) in pairs.resolve()? {
                let (vol, m) = read_pair(&img, &mask)?;
                let src = if cfg.ilp.smooth_histogram { diffuse(&vol, &cfg.diffusion)? } else { vol };
                samples.extend(masked_samples(&src, &m, cfg.ilp.label).context(|| format!("{}", mask.display()))?);
            }
            let hist = if samples.is_empty() { None } else { Some(histogram_from_samples(&samples, cfg.ilp.bin_width)?) };
            let [lo, hi] = cfg.ilp.curve_range;
            write_curve(&export_curve(&f, hist.as_ref(), lo, hi, cfg.ilp.curve_step)?, out)?;
        }
    }
    Ok(())
}
