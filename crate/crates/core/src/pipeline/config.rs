//! Flat `key = value` run configuration. `#` starts a comment.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sketch::ScaleGrid;

use super::protocol::SketchMode;

#[derive(Debug, Clone, PartialEq)]
pub enum TransportKind {
    Memory,
    Tcp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Run seed; data, frequency, device and decoder seeds derive from it.
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub ratio: f64,
    /// Frequencies; `0` means `100 K D`.
    pub m: usize,
    pub scales: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub bins: usize,
    pub mode: SketchMode,
    pub noise_std: f64,
    pub bit_depth: u32,
    pub calibration_repeats: usize,
    pub send_all: bool,
    pub transport: TransportKind,
    pub address: String,
    /// CSV input instead of synthetic data.
    pub data: Option<PathBuf>,
    pub has_header: bool,
    pub label_column: bool,
    /// Where the server (or `both`) writes learned centroids.
    pub output: Option<PathBuf>,
    /// Where `both` writes the evaluation row.
    pub report: Option<PathBuf>,
    pub lloyd_restarts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 5,
            d: 10,
            n: 20_000,
            ratio: 10.0,
            m: 0,
            scales: 10,
            sigma_min: 1e-3,
            sigma_max: 1.0,
            bins: 32,
            mode: SketchMode::Opu,
            noise_std: 0.0,
            bit_depth: 8,
            calibration_repeats: 1,
            send_all: false,
            transport: TransportKind::Memory,
            address: "127.0.0.1:7878".into(),
            data: None,
            has_header: false,
            label_column: true,
            output: None,
            report: None,
            lloyd_restarts: 20,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse { line, msg: format!("bad value {v:?} for {key}") })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("bad boolean {v:?} for {key}") }),
    }
}

impl PipelineConfig {
    pub fn num_frequencies(&self) -> usize {
        if self.m == 0 {
            100 * self.k * self.d
        } else {
            self.m
        }
    }

    pub fn grid(&self) -> Result<ScaleGrid> {
        ScaleGrid::log_spaced(self.sigma_min, self.sigma_max, self.scales)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got {content:?}") })?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.seed = parse(line, key, v)?,
                "k" => cfg.k = parse(line, key, v)?,
                "d" => cfg.d = parse(line, key, v)?,
                "n" => cfg.n = parse(line, key, v)?,
                "ratio" => cfg.ratio = parse(line, key, v)?,
                "m" => cfg.m = parse(line, key, v)?,
                "scales" => cfg.scales = parse(line, key, v)?,
                "sigma_min" => cfg.sigma_min = parse(line, key, v)?,
                "sigma_max" => cfg.sigma_max = parse(line, key, v)?,
                "bins" => cfg.bins = parse(line, key, v)?,
                "mode" => {
                    cfg.mode = match v {
                        "matrix" => SketchMode::Matrix,
                        "opu" => SketchMode::Opu,
                        _ => return Err(Error::Parse { line, msg: format!("mode must be matrix or opu, got {v:?}") }),
                    }
                }
                "noise_std" => cfg.noise_std = parse(line, key, v)?,
                "bit_depth" => cfg.bit_depth = parse(line, key, v)?,
                "calibration_repeats" => cfg.calibration_repeats = parse(line, key, v)?,
                "send_all" => cfg.send_all = parse_bool(line, key, v)?,
                "transport" => {
                    cfg.transport = match v {
                        "memory" => TransportKind::Memory,
                        "tcp" => TransportKind::Tcp,
                        _ => {
                            return Err(Error::Parse { line, msg: format!("transport must be memory or tcp, got {v:?}") })
                        }
                    }
                }
                "address" => cfg.address = v.to_string(),
                "data" => cfg.data = Some(PathBuf::from(v)),
                "has_header" => cfg.has_header = parse_bool(line, key, v)?,
                "label_column" => cfg.label_column = parse_bool(line, key, v)?,
                "output" => cfg.output = Some(PathBuf::from(v)),
                "report" => cfg.report = Some(PathBuf::from(v)),
                "lloyd_restarts" => cfg.lloyd_restarts = parse(line, key, v)?,
                _ => return Err(Error::Parse { line, msg: format!("unknown key {key:?}") }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("k, d and n must be at least 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidArgument("bins must be at least 2".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std {}", self.noise_std)));
        }
        if self.bit_depth == 0 || self.bit_depth > crate::opu::MAX_BIT_DEPTH {
            return Err(Error::InvalidArgument(format!("bit_depth {}", self.bit_depth)));
        }
        self.grid()?;
        Ok(())
    }
}
