//! ILP model files, curve tables and network parameter files.
//!
//! * ILP model JSON: `{samples_digest, bandwidth, rescale_c, lut{min, step, values}}`.
//!   The digest is the SHA-256 of the kernel centres as little-endian f64,
//!   in hex. Loading yields a table-only function that evaluates exactly
//!   like the LUT path of the fitted one.
//! * Curve CSV: header `hu,ilp,count`, empty count when no histogram.
//! * Prior LUT CSV: `hu,ilp[,...]` rows on a uniform HU grid.
//! * Network parameters: binary `ILPT` file, see [`write_params`].
//! * Training history CSV: `epoch,loss_total,loss_seg,loss_ilp`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ilpforge_core::ilp::{CurveRow, IlpFunction, Lut, LUT_MAX_HU, LUT_MIN_HU};
use ilpforge_core::toynet::{ConvLayer, EpochRecord, NetParams, NetSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ToolError, ToolResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutJson {
    pub min: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpModelJson {
    pub samples_digest: String,
    pub bandwidth: f64,
    pub rescale_c: f64,
    pub lut: LutJson,
}

pub fn samples_digest(samples: &[f64]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.to_le_bytes());
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut out, b| {
        let _ = write!(out, "{b:02x}");
        out
    })
}

impl IlpModelJson {
    /// Functions without a table get one at 1 HU from the exact path.
    pub fn from_function(f: &IlpFunction) -> Self {
        let lut = match f.lut() {
            Some(l) => LutJson { min: l.min_hu, step: l.step, values: l.values.clone() },
            None => {
                let n = (LUT_MAX_HU - LUT_MIN_HU) as usize + 1;
                LutJson { min: LUT_MIN_HU, step: 1.0, values: (0..n).map(|i| f.eval(LUT_MIN_HU + i as f64)).collect() }
            }
        };
        IlpModelJson { samples_digest: samples_digest(f.samples()), bandwidth: f.bandwidth(), rescale_c: f.rescale_c(), lut }
    }

    pub fn to_function(&self) -> ilpforge_core::Result<IlpFunction> {
        let lut = Lut { min_hu: self.lut.min, step: self.lut.step, values: self.lut.values.clone() };
        IlpFunction::from_lut(self.bandwidth, self.rescale_c, lut)
    }
}

pub fn model_to_json(f: &IlpFunction) -> String {
    let mut s = serde_json::to_string_pretty(&IlpModelJson::from_function(f)).expect("model json");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<IlpFunction, String> {
    let m: IlpModelJson = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if m.samples_digest.len() != 64 || !m.samples_digest.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err("samples_digest must be 64 hex digits".into());
    }
    m.to_function().map_err(|e| e.to_string())
}

pub fn write_model(f: &IlpFunction, path: impl AsRef<Path>) -> ToolResult<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(f)).map_err(|e| ToolError::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> ToolResult<IlpFunction> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    model_from_json(&text).map_err(|m| ToolError::format(path, m))
}

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("hu,ilp,count\n");
    for r in rows {
        match r.count {
            Some(c) => writeln!(out, "{},{},{c}", r.hu, r.ilp),
            None => writeln!(out, "{},{},", r.hu, r.ilp),
        }
        .unwrap();
    }
    out
}

pub fn write_curve(rows: &[CurveRow], path: impl AsRef<Path>) -> ToolResult<()> {
    let path = path.as_ref();
    fs::write(path, curve_to_csv(rows)).map_err(|e| ToolError::io(path, e))
}

/// Parses `hu,ilp` pairs from the first two columns; a non-numeric first
/// line is taken as a header.
pub fn parse_lut_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut hu = Vec::new();
    let mut ilp = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let col = |i: usize| record.get(i).unwrap_or("").parse::<f64>();
        match (col(0), col(1)) {
            (Ok(x), Ok(y)) => {
                hu.push(x);
                ilp.push(y);
            }
            _ if k == 0 => {}
            _ => {
                let line = record.position().map_or(k as u64 + 1, |p| p.line());
                return Err(format!("line {line}: expected two numbers"));
            }
        }
    }
    Ok((hu, ilp))
}

/// User prior curve from CSV.
pub fn read_lut_csv(path: impl AsRef<Path>) -> ToolResult<IlpFunction> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    let (hu, ilp) = parse_lut_csv(&text).map_err(|m| ToolError::format(path, m))?;
    IlpFunction::from_table(&hu, &ilp).map_err(|e| ToolError::format(path, e.to_string()))
}

/// Model JSON, or a prior CSV when the extension is `.csv`.
pub fn read_ilp(path: impl AsRef<Path>) -> ToolResult<IlpFunction> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_lut_csv(path)
    } else {
        read_model(path)
    }
}

pub const PARAMS_MAGIC: &[u8; 4] = b"ILPT";
pub const PARAMS_VERSION: u32 = 1;

/// Binary layout, all little-endian:
///
/// ```text
/// "ILPT" u32 version
/// u32 input_channels  u32 kernel  f64 input_center  f64 input_scale  u64 seed
/// u32 hidden_count    u32 hidden_channels[hidden_count]
/// u32 layer_count     per layer: u32 out, u32 in, u32 kernel
/// per layer: f64 weights[out*in*kernel*kernel]  f64 bias[out]
/// ```
pub fn encode_params(p: &NetParams) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + 8 * p.num_params());
    let u32le = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
    b.extend_from_slice(PARAMS_MAGIC);
    u32le(&mut b, PARAMS_VERSION as usize);
    u32le(&mut b, p.spec.input_channels);
    u32le(&mut b, p.spec.kernel);
    b.extend_from_slice(&p.spec.input_center.to_le_bytes());
    b.extend_from_slice(&p.spec.input_scale.to_le_bytes());
    b.extend_from_slice(&p.seed.to_le_bytes());
    u32le(&mut b, p.spec.hidden_channels.len());
    for &h in &p.spec.hidden_channels {
        u32le(&mut b, h);
    }
    u32le(&mut b, p.layers.len());
    for l in &p.layers {
        u32le(&mut b, l.out_channels);
        u32le(&mut b, l.in_channels);
        u32le(&mut b, l.kernel);
    }
    for l in &p.layers {
        for v in l.weights.iter().chain(&l.bias) {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("file is truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<NetParams, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != PARAMS_MAGIC {
        return Err("not an ILPT parameter file".into());
    }
    let version = c.u32()?;
    if version != PARAMS_VERSION as usize {
        return Err(format!("unsupported parameter file version {version}"));
    }
    let input_channels = c.u32()?;
    let kernel = c.u32()?;
    let input_center = c.f64()?;
    let input_scale = c.f64()?;
    let seed = c.u64()?;
    let hidden = c.u32()?;
    if hidden > 64 {
        return Err(format!("{hidden} hidden layers"));
    }
    let hidden_channels = (0..hidden).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
    let spec = NetSpec { input_channels, hidden_channels, kernel, input_center, input_scale };
    spec.validate().map_err(|e| e.to_string())?;

    let count = c.u32()?;
    let shapes = spec.layer_shapes();
    if count != shapes.len() {
        return Err(format!("layer table has {count} entries, the network needs {}", shapes.len()));
    }
    for &(out, inp, k) in &shapes {
        let got = (c.u32()?, c.u32()?, c.u32()?);
        if got != (out, inp, k) {
            return Err(format!("layer shape {got:?} does not match the network shape ({out}, {inp}, {k})"));
        }
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for &(out, inp, k) in &shapes {
        let mut l = ConvLayer::zeros(out, inp, k);
        for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *v = c.f64()?;
        }
        layers.push(l);
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    let params = NetParams { spec, layers, seed };
    params.validate().map_err(|e| e.to_string())?;
    Ok(params)
}

pub fn write_params(p: &NetParams, path: impl AsRef<Path>) -> ToolResult<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(p)).map_err(|e| ToolError::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> ToolResult<NetParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ToolError::io(path, e))?;
    decode_params(&bytes).map_err(|m| ToolError::format(path, m))
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss_total,loss_seg,loss_ilp\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.loss_total, r.loss_seg, r.loss_ilp).unwrap();
    }
    out
}
