//! Phantom study comparing the ways of using the ILP during training.
//!
//! For every seed a fresh phantom dataset is generated and split into
//! training and test slabs. The ILP function is fitted on the diffused
//! training images under their lesion masks, then one network per mode is
//! trained from the same initialisation and evaluated on the test slabs.
//! Paired t-tests compare supervision against every other mode, pairing
//! the Dice of the same test slab under the same seed.

use std::fmt::Write as _;

use ilpforge_core::diffusion::{diffuse, DiffusionParams};
use ilpforge_core::ilp::{fit_ilp_with, masked_samples, BandwidthRule, FitOptions, IlpFunction};
use ilpforge_core::losses::LossConfig;
use ilpforge_core::metrics::{dice, paired_t_test, per_lesion_dice, Summary, LESION_MIN_VOLUME_MM3};
use ilpforge_core::phantom::{generate_dataset, PhantomSpec};
use ilpforge_core::toynet::{predict_volume, train, IlpMode, NetSpec, TrainConfig, TrainSample};
use ilpforge_core::{MaskVolume, Volume3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Context, ToolError, ToolResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Study settings; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub train_cases: usize,
    pub test_cases: usize,
    pub phantom: PhantomSpec,
    pub hidden_channels: Vec<usize>,
    pub kernel: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub shift: f64,
    pub modes: Vec<String>,
    pub diffusion: DiffusionParams,
    /// Compute ILP training targets from the diffused image instead of the raw one.
    pub smooth_targets: bool,
    pub bandwidth: BandwidthRule,
    pub lut_step: f64,
    pub threshold: f64,
    pub lesion_margin: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seeds: 10,
            base_seed: 0,
            train_cases: 10,
            test_cases: 190,
            phantom: PhantomSpec::default(),
            hidden_channels: vec![8, 16],
            kernel: 3,
            learning_rate: 0.02,
            weight_decay: 5e-4,
            momentum: 0.9,
            epochs: 20,
            batch_size: 1,
            lambda: 0.1,
            shift: 100.0,
            modes: ["none", "supervision", "input", "postprocess", "shifted"].map(String::from).to_vec(),
            diffusion: DiffusionParams::default(),
            smooth_targets: false,
            bandwidth: BandwidthRule::Scott,
            lut_step: 1.0,
            threshold: 0.5,
            lesion_margin: 5,
        }
    }
}

impl StudyConfig {
    /// Small configuration for smoke runs.
    pub fn smoke() -> Self {
        StudyConfig { seeds: 2, train_cases: 4, test_cases: 4, epochs: 2, ..Default::default() }
    }

    pub fn parsed_modes(&self) -> ToolResult<Vec<IlpMode>> {
        self.modes.iter().map(|m| parse_mode(m, self.shift)).collect()
    }

    pub fn validate(&self) -> ToolResult<()> {
        let bad = |m: &str| Err(ToolError::Config(m.into()));
        if self.seeds == 0 {
            return bad("study.seeds must be at least 1");
        }
        if self.train_cases == 0 || self.test_cases == 0 {
            return bad("study needs at least one training and one test case");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("study.threshold must be in (0, 1)");
        }
        if !(self.lut_step > 0.0) {
            return bad("study.lut_step must be positive");
        }
        let modes = self.parsed_modes()?;
        if modes.is_empty() {
            return bad("study.modes is empty");
        }
        self.phantom.validate()?;
        self.diffusion.validate()?;
        for mode in modes {
            self.net_spec(mode).validate()?;
            self.train_config(mode, 0).validate()?;
        }
        Ok(())
    }

    pub fn net_spec(&self, mode: IlpMode) -> NetSpec {
        NetSpec {
            input_channels: mode.input_channels(),
            hidden_channels: self.hidden_channels.clone(),
            kernel: self.kernel,
            ..NetSpec::default()
        }
    }

    pub fn train_config(&self, mode: IlpMode, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            loss: LossConfig::with_lambda(self.lambda),
            epochs: self.epochs,
            batch_size: self.batch_size,
            patch_size: None,
            seed,
            ilp_mode: mode,
            flips: false,
            target_smoothing: self.smooth_targets.then_some(self.diffusion),
        }
    }

    fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions { rule: self.bandwidth, lut_step: Some(self.lut_step), seed, ..FitOptions::default() }
    }
}

/// Parses `none`, `supervision`, `input`, `postprocess`, `shifted` (uses
/// `default_shift`) or `shifted(<delta>)`.
pub fn parse_mode(s: &str, default_shift: f64) -> ToolResult<IlpMode> {
    let s = s.trim().to_ascii_lowercase();
    Ok(match s.as_str() {
        "none" => IlpMode::None,
        "supervision" => IlpMode::Supervision,
        "input" => IlpMode::Input,
        "postprocess" | "pp" => IlpMode::Postprocess,
        "shifted" => IlpMode::Shifted(default_shift),
        other => {
            let inner = other.strip_prefix("shifted(").and_then(|r| r.strip_suffix(')'));
            match inner.map(|v| v.trim().parse::<f64>()) {
                Some(Ok(d)) if d.is_finite() => IlpMode::Shifted(d),
                _ => return Err(ToolError::Config(format!("unknown ILP mode '{other}'"))),
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: String,
    /// Mean test Dice of each seed.
    pub seed_mean_dice: Vec<f64>,
    /// Every (seed, test case) Dice, seed-major.
    pub per_case_dice: Summary,
    pub per_lesion_dice: Summary,
    pub per_lesion_dice_filtered: Summary,
    /// Last-epoch training loss per seed.
    pub final_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTTest {
    pub label: String,
    /// `case` pairs the same test slab under the same seed; `seed` pairs
    /// the per-seed means.
    pub pairing: String,
    pub n: usize,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub config: StudyConfig,
    /// Fitted ILP mode (HU) per seed.
    pub ilp_mode_hu: Vec<f64>,
    pub modes: Vec<ModeResult>,
    pub t_tests: Vec<StudyTTest>,
}

impl StudyReport {
    pub fn mode(&self, label: &str) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == label)
    }

    pub fn t_test(&self, label: &str, pairing: &str) -> Option<&StudyTTest> {
        self.t_tests.iter().find(|t| t.label == label && t.pairing == pairing)
    }

    pub fn to_json(&self) -> ToolResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| ToolError::Config(e.to_string()))
    }

    /// One row per mode: mean/std of per-case and per-lesion Dice and the
    /// per-case p-value against supervision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,per_case_dice_mean,per_case_dice_std,per_lesion_dice_mean,per_lesion_dice_std,\
             per_lesion_125_mean,per_lesion_125_std,p_vs_supervision\n",
        );
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for m in &self.modes {
            let p = self
                .t_test(&format!("supervision vs {}", m.mode), "case")
                .map(|t| format!("{:.6e}", t.p))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                m.mode,
                fmt(m.per_case_dice.mean),
                fmt(m.per_case_dice.std),
                fmt(m.per_lesion_dice.mean),
                fmt(m.per_lesion_dice.std),
                fmt(m.per_lesion_dice_filtered.mean),
                fmt(m.per_lesion_dice_filtered.std),
                p
            );
        }
        out
    }
}

struct SeedData {
    train: Vec<TrainSample>,
    test: Vec<(Volume3, MaskVolume)>,
    ilp: IlpFunction,
}

struct RunResult {
    dice: Vec<f64>,
    lesion: Vec<f64>,
    lesion_filtered: Vec<f64>,
    final_loss: f64,
}

fn seed_of(cfg: &StudyConfig, k: usize) -> u64 {
    cfg.base_seed.wrapping_add(k as u64)
}

fn prepare_seed(cfg: &StudyConfig, k: usize) -> ToolResult<SeedData> {
    let seed = seed_of(cfg, k);
    let n = cfg.train_cases + cfg.test_cases;
    // disjoint phantom seed blocks per study seed
    let cases = generate_dataset(&cfg.phantom, n, seed.wrapping_mul(1_000_003)).context(|| "stage phantom".into())?;
    let (train_pairs, test) = cases.split_at(cfg.train_cases);
    let mut samples = Vec::new();
    for (img, mask) in train_pairs {
        let smooth = diffuse(img, &cfg.diffusion).context(|| "stage diffuse".into())?;
        match masked_samples(&smooth, mask, 1) {
            Ok(s) => samples.extend(s),
            Err(ilpforge_core::Error::NoLesionVoxels) => {}
            Err(e) => return Err(e).context(|| "stage histogram".into()),
        }
    }
    let ilp = fit_ilp_with(&samples, &cfg.fit_options(seed)).context(|| "stage fit-ilp".into())?;
    let train = train_pairs.iter().map(|(image, mask)| TrainSample { image: image.clone(), mask: mask.clone() }).collect();
    Ok(SeedData { train, test: test.to_vec(), ilp })
}

fn run_mode(cfg: &StudyConfig, data: &SeedData, mode: IlpMode, seed: u64) -> ToolResult<RunResult> {
    let spec = cfg.net_spec(mode);
    let tc = cfg.train_config(mode, seed);
    let (params, history) = train(&data.train, &spec, &tc, Some(&data.ilp)).context(|| format!("stage train {}", mode.label()))?;
    let mut dice_values = Vec::with_capacity(data.test.len());
    let mut lesion = Vec::new();
    let mut lesion_filtered = Vec::new();
    for (img, gt) in &data.test {
        let [nx, ny, _] = img.dims();
        let prob = predict_volume(&params, img, [ny, nx], [ny, nx], mode, Some(&data.ilp))
            .context(|| format!("stage predict {}", mode.label()))?;
        let pred = prob.threshold(cfg.threshold as f32);
        dice_values.push(dice(&pred, gt)?);
        for l in per_lesion_dice(&pred, gt, cfg.lesion_margin, None)? {
            if l.component.volume_mm3 >= LESION_MIN_VOLUME_MM3 {
                lesion_filtered.push(l.dice);
            }
            lesion.push(l.dice);
        }
    }
    let final_loss = history.last().map_or(f64::NAN, |r| r.loss_total);
    Ok(RunResult { dice: dice_values, lesion, lesion_filtered, final_loss })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the whole study on at most `threads` worker threads. The report is
/// independent of the thread count.
pub fn run_study(cfg: &StudyConfig, threads: usize) -> ToolResult<StudyReport> {
    cfg.validate()?;
    let modes = cfg.parsed_modes()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ToolError::Config(format!("thread pool: {e}")))?;

    let (seed_data, runs) = pool.install(|| -> ToolResult<_> {
        let seed_data: Vec<SeedData> =
            (0..cfg.seeds).into_par_iter().map(|k| prepare_seed(cfg, k)).collect::<ToolResult<_>>()?;
        let jobs: Vec<(usize, usize)> = (0..cfg.seeds).flat_map(|k| (0..modes.len()).map(move |m| (k, m))).collect();
        let runs: Vec<RunResult> = jobs
            .par_iter()
            .map(|&(k, m)| run_mode(cfg, &seed_data[k], modes[m], seed_of(cfg, k)))
            .collect::<ToolResult<_>>()?;
        Ok((seed_data, runs))
    })?;

    let mut results = Vec::with_capacity(modes.len());
    for (m, mode) in modes.iter().enumerate() {
        let mut all = Vec::new();
        let mut lesion = Vec::new();
        let mut filtered = Vec::new();
        let mut seed_mean = Vec::new();
        let mut final_loss = Vec::new();
        for k in 0..cfg.seeds {
            let r = &runs[k * modes.len() + m];
            seed_mean.push(mean(&r.dice));
            all.extend_from_slice(&r.dice);
            lesion.extend_from_slice(&r.lesion);
            filtered.extend_from_slice(&r.lesion_filtered);
            final_loss.push(r.final_loss);
        }
        results.push(ModeResult {
            mode: mode_name(*mode),
            seed_mean_dice: seed_mean,
            per_case_dice: Summary::from_values(all),
            per_lesion_dice: Summary::from_values(lesion),
            per_lesion_dice_filtered: Summary::from_values(filtered),
            final_loss,
        });
    }

    let mut t_tests = Vec::new();
    if let Some(sup) = results.iter().find(|r| r.mode == "supervision") {
        for other in results.iter().filter(|r| r.mode != "supervision") {
            let label = format!("supervision vs {}", other.mode);
            for (pairing, a, b) in [
                ("case", &sup.per_case_dice.values, &other.per_case_dice.values),
                ("seed", &sup.seed_mean_dice, &other.seed_mean_dice),
            ] {
                match paired_t_test(a, b) {
                    Ok(r) => t_tests.push(StudyTTest { label: label.clone(), pairing: pairing.into(), n: a.len(), t: r.t, p: r.p }),
                    // identical results (e.g. a zero-weight ILP loss) have no test
                    Err(ilpforge_core::Error::ZeroVariance | ilpforge_core::Error::TooFewSamples { .. }) => {}
                    Err(e) => return Err(e).context(|| "stage t-test".into()),
                }
            }
        }
    }

    Ok(StudyReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        ilp_mode_hu: seed_data.iter().map(|d| d.ilp.lut_mode().unwrap_or(f64::NAN)).collect(),
        modes: results,
        t_tests,
    })
}

/// Row name of a mode; shifted modes carry their offset when it is not the
/// conventional +100 HU.
pub fn mode_name(mode: IlpMode) -> String {
    match mode {
        IlpMode::Shifted(100.0) => "shifted".into(),
        other => other.label(),
    }
}
