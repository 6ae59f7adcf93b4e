//! Tool-wide configuration: one TOML document with a section per module.
//!
//! ```toml
//! seed = 0
//!
//! [diffusion]
//! iterations = 5
//!
//! [ilp]
//! bandwidth = "scott"        # or "silverman", or { fixed = 4.0 }
//! lut_step = 1.0
//!
//! [loss]
//! preset = "kits21"          # takes lambda from the preset row
//!
//! [train]
//! ilp_mode = "supervision"
//! epochs = 20
//! ```
//!
//! Command-line `--set section.key=value` overrides are applied to the
//! document before it is interpreted; values use TOML syntax and fall back
//! to plain strings.

use std::fs;
use std::path::Path;

use ilpforge_core::diffusion::DiffusionParams;
use ilpforge_core::ilp::{BandwidthRule, FitOptions, DEFAULT_MAX_SAMPLES};
use ilpforge_core::losses::LossConfig;
use ilpforge_core::metrics::{Connectivity, DEFAULT_IOU_THRESHOLD, DEFAULT_LESION_MARGIN, LESION_MIN_VOLUME_MM3};
use ilpforge_core::phantom::PhantomSpec;
use ilpforge_core::presets;
use ilpforge_core::toynet::{IlpMode, NetSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{ToolError, ToolResult};
use crate::study::{parse_mode, StudyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlpSection {
    /// Mask label whose voxels feed the histogram.
    pub label: u8,
    pub bin_width: f64,
    pub bandwidth: BandwidthRule,
    /// Lookup-table step in HU; 0 evaluates the kernel sum directly.
    pub lut_step: f64,
    pub max_samples: usize,
    /// Diffuse images before histogram construction.
    pub smooth_histogram: bool,
    /// Diffuse images before ILP map generation (`apply-ilp`).
    pub smooth_maps: bool,
    pub curve_range: [f64; 2],
    pub curve_step: f64,
}

impl Default for IlpSection {
    fn default() -> Self {
        IlpSection {
            label: 1,
            bin_width: 1.0,
            bandwidth: BandwidthRule::Scott,
            lut_step: 1.0,
            max_samples: DEFAULT_MAX_SAMPLES,
            smooth_histogram: true,
            smooth_maps: false,
            curve_range: [-1024.0, 3071.0],
            curve_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Hyperparameter row name; its λ replaces `lambda` when set.
    pub preset: Option<String>,
    pub lambda: f64,
    pub epsilon: f64,
    pub prob_clamp: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        LossSection { preset: None, lambda: d.lambda, epsilon: d.epsilon, prob_clamp: d.prob_clamp }
    }
}

impl LossSection {
    pub fn loss_config(&self) -> ToolResult<LossConfig> {
        let lambda = match &self.preset {
            Some(name) => {
                presets::by_name(name)
                    .ok_or_else(|| ToolError::Config(format!("unknown preset '{name}'")))?
                    .lambda
            }
            None => self.lambda,
        };
        Ok(LossConfig { lambda, epsilon: self.epsilon, prob_clamp: self.prob_clamp })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub ilp_mode: String,
    /// Offset used by a bare `shifted` mode.
    pub shift: f64,
    pub hidden_channels: Vec<usize>,
    pub kernel: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: Option<[usize; 2]>,
    pub flips: bool,
    pub smooth_targets: bool,
    /// Sliding-window prediction patch and stride; whole slices when unset.
    pub predict_patch: Option<[usize; 2]>,
    pub predict_stride: Option<[usize; 2]>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = StudyConfig::default();
        TrainSection {
            ilp_mode: "supervision".into(),
            shift: 100.0,
            hidden_channels: NetSpec::default().hidden_channels,
            kernel: NetSpec::default().kernel,
            learning_rate: s.learning_rate,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            epochs: s.epochs,
            batch_size: s.batch_size,
            patch_size: None,
            flips: false,
            smooth_targets: false,
            predict_patch: None,
            predict_stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub threshold: f64,
    pub lesion_margin: usize,
    pub min_lesion_volume_mm3: f64,
    pub iou_threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            threshold: 0.5,
            lesion_margin: DEFAULT_LESION_MARGIN,
            min_lesion_volume_mm3: LESION_MIN_VOLUME_MM3,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            connectivity: Connectivity::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub diffusion: DiffusionParams,
    pub ilp: IlpSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
    pub phantom: PhantomSpec,
    pub study: StudyConfig,
}

/// Parses `section.key=value` into a path and a TOML value.
fn parse_override(spec: &str) -> ToolResult<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ToolError::Usage(format!("override '{spec}' is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(String::is_empty) {
        return Err(ToolError::Usage(format!("override '{spec}' has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(doc: &mut toml::Table, path: &[String], value: toml::Value) -> ToolResult<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ToolError::Config(format!("'{p}' is not a section")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Builds a configuration from optional TOML text plus overrides, then
    /// validates it.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> ToolResult<Self> {
        let mut doc: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| ToolError::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut doc, &path, value)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ToolError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> ToolResult<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| ToolError::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    /// Applies the global `--seed` to every seeded section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.phantom.seed = seed;
        self.study.base_seed = seed;
        self
    }

    /// Every failure is reported as a configuration error.
    pub fn validate(&self) -> ToolResult<()> {
        self.check().map_err(|e| match e {
            ToolError::Core(c) => ToolError::Config(c.to_string()),
            other => other,
        })
    }

    fn check(&self) -> ToolResult<()> {
        let bad = |m: String| Err(ToolError::Config(m));
        self.diffusion.validate()?;
        if !(self.ilp.bin_width > 0.0 && self.ilp.bin_width.is_finite()) {
            return bad("ilp.bin_width must be positive".into());
        }
        if !(self.ilp.lut_step >= 0.0 && self.ilp.lut_step.is_finite()) {
            return bad("ilp.lut_step must be >= 0".into());
        }
        if self.ilp.max_samples == 0 {
            return bad("ilp.max_samples must be >= 1".into());
        }
        let [lo, hi] = self.ilp.curve_range;
        if !(lo < hi && self.ilp.curve_step > 0.0) {
            return bad("ilp.curve_range needs lo < hi and ilp.curve_step > 0".into());
        }
        self.ilp.bandwidth.bandwidth(&[0.0, 1.0])?;
        self.loss.loss_config()?.validate()?;
        let mode = self.ilp_mode()?;
        self.net_spec(mode).validate()?;
        self.train_config(0)?.validate()?;
        for (name, v) in [("train.predict_patch", self.train.predict_patch), ("train.predict_stride", self.train.predict_stride)] {
            if v.is_some_and(|v| v.contains(&0)) {
                return bad(format!("{name} entries must be positive"));
            }
        }
        let m = &self.metrics;
        if !(m.threshold > 0.0 && m.threshold < 1.0) {
            return bad("metrics.threshold must be in (0, 1)".into());
        }
        if !(m.iou_threshold > 0.0 && m.iou_threshold <= 1.0) {
            return bad("metrics.iou_threshold must be in (0, 1]".into());
        }
        if !(m.min_lesion_volume_mm3 >= 0.0) {
            return bad("metrics.min_lesion_volume_mm3 must be >= 0".into());
        }
        self.phantom.validate()?;
        self.study.validate()
    }

    pub fn ilp_mode(&self) -> ToolResult<IlpMode> {
        parse_mode(&self.train.ilp_mode, self.train.shift)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            rule: self.ilp.bandwidth,
            lut_step: (self.ilp.lut_step > 0.0).then_some(self.ilp.lut_step),
            max_samples: self.ilp.max_samples,
            seed: self.seed,
        }
    }

    pub fn net_spec(&self, mode: IlpMode) -> NetSpec {
        NetSpec {
            input_channels: mode.input_channels(),
            hidden_channels: self.train.hidden_channels.clone(),
            kernel: self.train.kernel,
            ..NetSpec::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> ToolResult<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            loss: self.loss.loss_config()?,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patch_size: t.patch_size,
            seed,
            ilp_mode: self.ilp_mode()?,
            flips: t.flips,
            target_smoothing: t.smooth_targets.then_some(self.diffusion),
        })
    }
}
