//! Human click logs: validation, click maps and inter-subject agreement.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::rmse;
use crate::imaging::{convolve_zero_padded, gaussian_kernel, min_max_normalize, upsample_bilinear};

pub const REQUIRED_CLICKS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub x: i64,
    pub y: i64,
    pub t_ms: u64,
}

/// One subject's clicks for one image and target class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLog {
    pub image_id: u64,
    pub target_class: String,
    pub subject_id: String,
    /// `[width, height]` in pixels.
    pub image_size: [u32; 2],
    pub clicks: Vec<Click>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Count { expected: usize, found: usize },
    Repeated { x: i64, y: i64 },
    OutOfBounds { index: usize, x: i64, y: i64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Count { expected, found } => write!(f, "expected {expected} clicks, found {found}"),
            Self::Repeated { x, y } => write!(f, "click ({x}, {y}) is repeated"),
            Self::OutOfBounds { index, x, y } => write!(f, "click {index} at ({x}, {y}) is outside the image"),
        }
    }
}

/// Every violation of the click contract, empty when the log is valid.
pub fn validate_log(log: &ClickLog) -> Vec<Violation> {
    let mut out = Vec::new();
    if log.clicks.len() != REQUIRED_CLICKS {
        out.push(Violation::Count {
            expected: REQUIRED_CLICKS,
            found: log.clicks.len(),
        });
    }
    let mut seen = HashSet::new();
    let mut reported = HashSet::new();
    let [w, h] = log.image_size;
    for (index, c) in log.clicks.iter().enumerate() {
        if !seen.insert((c.x, c.y)) && reported.insert((c.x, c.y)) {
            out.push(Violation::Repeated { x: c.x, y: c.y });
        }
        if c.x < 0 || c.y < 0 || c.x >= w as i64 || c.y >= h as i64 {
            out.push(Violation::OutOfBounds { index, x: c.x, y: c.y });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanMapConfig {
    /// Cells per side of the count grid.
    pub grid: usize,
    /// Side of the smoothing kernel, odd.
    pub kernel: usize,
    /// Smoothing sigma in cells.
    pub sigma: f64,
    pub output_size: usize,
}

impl Default for HumanMapConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            kernel: 11,
            sigma: 1.5,
            output_size: 224,
        }
    }
}

impl HumanMapConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.grid == 0 {
            v.push("humanmaps.grid must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            v.push("humanmaps.kernel must be odd".into());
        }
        if !(self.sigma > 0.0) {
            v.push("humanmaps.sigma must be positive".into());
        }
        if self.output_size == 0 {
            v.push("humanmaps.output_size must be positive".into());
        }
        v
    }
}

fn check_group(logs: &[ClickLog], cfg: &HumanMapConfig) -> Result<[u32; 2]> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(violations));
    }
    let first = logs.first().ok_or(Error::Empty("click logs"))?;
    if let Some(other) = logs
        .iter()
        .find(|l| l.image_id != first.image_id || l.target_class != first.target_class || l.image_size != first.image_size)
    {
        return Err(Error::MixedLogs(format!(
            "image {} / {} vs image {} / {}",
            first.image_id, first.target_class, other.image_id, other.target_class
        )));
    }
    let [w, h] = first.image_size;
    if !(w as usize).is_multiple_of(cfg.grid) || !(h as usize).is_multiple_of(cfg.grid) {
        return Err(Error::InvalidConfig(vec![format!(
            "image size {w}x{h} is not a multiple of the {}-cell grid",
            cfg.grid
        )]));
    }
    Ok(first.image_size)
}

/// Click counts per grid cell, smoothed, before resizing.
pub fn smoothed_counts(logs: &[ClickLog], cfg: &HumanMapConfig) -> Result<Array2<f64>> {
    let [w, h] = check_group(logs, cfg)?;
    let (cw, ch) = (w as i64 / cfg.grid as i64, h as i64 / cfg.grid as i64);
    let mut counts = Array2::<f64>::zeros((cfg.grid, cfg.grid));
    for c in logs.iter().flat_map(|l| &l.clicks) {
        if c.x < 0 || c.y < 0 || c.x >= w as i64 || c.y >= h as i64 {
            return Err(Error::InvalidConfig(vec![format!("click ({}, {}) is outside the image", c.x, c.y)]));
        }
        counts[[(c.y / ch) as usize, (c.x / cw) as usize]] += 1.0;
    }
    Ok(convolve_zero_padded(&counts, &gaussian_kernel(cfg.kernel, cfg.sigma)))
}

/// Bin, smooth, resize and min-max normalize the clicks of one
/// image/target pair.
pub fn clicks_to_map(logs: &[ClickLog], cfg: &HumanMapConfig) -> Result<Array2<f64>> {
    let smoothed = smoothed_counts(logs, cfg)?;
    let up = upsample_bilinear(smoothed.view(), cfg.output_size, cfg.output_size);
    Ok(min_max_normalize(&up))
}

/// Mean pairwise RMSE between subject maps.
pub fn human_agreement(maps: &[Array2<f64>]) -> Result<f64> {
    if maps.len() < 2 {
        return Err(Error::Empty("second subject map"));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            total += rmse(maps[i].view(), maps[j].view())?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Reads a JSON-lines click log, skipping blank lines.
pub fn read_logs(path: &Path) -> Result<Vec<ClickLog>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
