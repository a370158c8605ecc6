//! Ground-truth density maps from head annotations. Each head is stamped as
//! a discretized isotropic Gaussian, truncated and renormalized over its
//! in-image support so every head contributes mass exactly 1. The kernel
//! width is either fixed or geometry-adaptive (beta times the mean distance
//! to the k nearest neighbors).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scene's head annotations: image size `(height, width)` plus a list of
/// `(x, y)` coordinates, each inside the image bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAnnotations {
    pub image_size: (usize, usize),
    pub points: Vec<(f32, f32)>,
}

impl HeadAnnotations {
    pub fn new(image_size: (usize, usize), points: Vec<(f32, f32)>) -> Result<Self> {
        let (h, w) = image_size;
        for &(x, y) in &points {
            if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x >= w as f32 || y >= h as f32 {
                return Err(Error::invalid_argument(format!(
                    "head point ({}, {}) outside image bounds {}x{}",
                    x, y, w, h
                )));
            }
        }
        Ok(HeadAnnotations { image_size, points })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// On-disk annotation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f32; 2]>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("annotation serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn to_annotations(&self) -> Result<HeadAnnotations> {
        HeadAnnotations::new(
            (self.height, self.width),
            self.points.iter().map(|p| (p[0], p[1])).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Fixed,
    Adaptive,
}

/// Gaussian stamp parameters. `sigma_fixed` governs fixed mode; `beta` and
/// `k_neighbors` govern adaptive mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub mode: KernelMode,
    pub sigma_fixed: f32,
    pub beta: f32,
    pub k_neighbors: usize,
    pub truncation_radius_sigmas: f32,
}

impl KernelSpec {
    pub fn fixed(sigma: f32) -> Self {
        KernelSpec {
            mode: KernelMode::Fixed,
            sigma_fixed: sigma,
            beta: 0.3,
            k_neighbors: 3,
            truncation_radius_sigmas: 4.0,
        }
    }

    pub fn adaptive(beta: f32, k_neighbors: usize) -> Self {
        KernelSpec {
            mode: KernelMode::Adaptive,
            sigma_fixed: 15.0,
            beta,
            k_neighbors,
            truncation_radius_sigmas: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_fixed <= 0.0 {
            return Err(Error::invalid_argument("sigma_fixed must be > 0"));
        }
        if self.beta <= 0.0 {
            return Err(Error::invalid_argument("beta must be > 0"));
        }
        if self.k_neighbors < 1 {
            return Err(Error::invalid_argument("k_neighbors must be >= 1"));
        }
        if self.truncation_radius_sigmas < 2.0 {
            return Err(Error::invalid_argument(
                "truncation_radius_sigmas must be >= 2",
            ));
        }
        Ok(())
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::fixed(15.0)
    }
}

/// Single-channel nonnegative raster whose sum approximates the head count.
/// `scale` is the downsampling factor relative to the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub scale: u32,
    pub raster: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, scale: u32) -> Self {
        DensityMap {
            height,
            width,
            scale,
            raster: vec![0.0; height * width],
        }
    }

    pub fn sum(&self) -> f64 {
        self.raster.iter().map(|&v| v as f64).sum()
    }
}

/// Mean Euclidean distance from `points[i]` to its `k` nearest other points,
/// brute force over all pairs. Ties break by distance then input order.
/// Returns `None` when there are no other points.
pub fn knn_mean_distance(points: &[(f32, f32)], i: usize, k: usize) -> Option<f64> {
    if points.len() <= 1 {
        return None;
    }
    let (xi, yi) = points[i];
    let mut dists: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &(x, y))| {
            let dx = (x - xi) as f64;
            let dy = (y - yi) as f64;
            ((dx * dx + dy * dy).sqrt(), j)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let take = k.min(dists.len());
    Some(dists[..take].iter().map(|&(d, _)| d).sum::<f64>() / take as f64)
}

fn sigma_for_head(ann: &HeadAnnotations, spec: &KernelSpec, i: usize) -> f64 {
    match spec.mode {
        KernelMode::Fixed => spec.sigma_fixed as f64,
        KernelMode::Adaptive => match knn_mean_distance(&ann.points, i, spec.k_neighbors) {
            None => spec.sigma_fixed as f64,
            Some(dbar) => {
                let (h, w) = ann.image_size;
                let diag = ((h * h + w * w) as f64).sqrt();
                (spec.beta as f64 * dbar).clamp(0.5, diag / 4.0)
            }
        },
    }
}

/// Render the full-resolution (scale 1) density map: one renormalized
/// Gaussian stamp per head, summed in head-index order.
pub fn render_density(ann: &HeadAnnotations, spec: &KernelSpec) -> Result<DensityMap> {
    spec.validate()?;
    let (h, w) = ann.image_size;
    let mut acc = vec![0.0f64; h * w];
    let mut stamp: Vec<(usize, f64)> = Vec::new();
    for (i, &(x, y)) in ann.points.iter().enumerate() {
        let sigma = sigma_for_head(ann, spec, i);
        let radius = spec.truncation_radius_sigmas as f64 * sigma;
        let (x, y) = (x as f64, y as f64);
        let px0 = ((x - radius).floor().max(0.0)) as usize;
        let px1 = ((x + radius).ceil() as usize).min(w.saturating_sub(1));
        let py0 = ((y - radius).floor().max(0.0)) as usize;
        let py1 = ((y + radius).ceil() as usize).min(h.saturating_sub(1));
        stamp.clear();
        let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
        let r_sq = radius * radius;
        let mut mass = 0.0f64;
        for py in py0..=py1 {
            let dy = (py as f64 + 0.5) - y;
            for px in px0..=px1 {
                let dx = (px as f64 + 0.5) - x;
                let d_sq = dx * dx + dy * dy;
                if d_sq <= r_sq {
                    let v = (-d_sq * inv_two_sigma_sq).exp();
                    stamp.push((py * w + px, v));
                    mass += v;
                }
            }
        }
        if mass > 0.0 {
            let inv = 1.0 / mass;
            for &(idx, v) in &stamp {
                acc[idx] += v * inv;
            }
        } else if px0 <= px1 && py0 <= py1 {
            // degenerate support: put the full mass on the nearest pixel
            let cx = (x.round() as usize).min(w - 1);
            let cy = (y.round() as usize).min(h - 1);
            acc[cy * w + cx] += 1.0;
        }
    }
    Ok(DensityMap {
        height: h,
        width: w,
        scale: 1,
        raster: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Sum-pool by `factor`, preserving total mass exactly.
pub fn downsample_preserving_count(dm: &DensityMap, factor: usize) -> Result<DensityMap> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::invalid_argument(format!(
            "downsample factor must be 2, 4 or 8, got {}",
            factor
        )));
    }
    if dm.height % factor != 0 || dm.width % factor != 0 {
        return Err(Error::invalid_argument(format!(
            "downsample factor {} does not divide raster {}x{}",
            factor, dm.height, dm.width
        )));
    }
    let (oh, ow) = (dm.height / factor, dm.width / factor);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..dm.height {
        let row = &dm.raster[y * dm.width..(y + 1) * dm.width];
        let orow = &mut out[(y / factor) * ow..(y / factor + 1) * ow];
        for (x, &v) in row.iter().enumerate() {
            orow[x / factor] += v;
        }
    }
    Ok(DensityMap {
        height: oh,
        width: ow,
        scale: dm.scale * factor as u32,
        raster: out,
    })
}

const CDM_MAGIC: &[u8; 4] = b"CDM1";

/// Write the CDM1 raster format: magic, height/width/scale as u32 LE, then
/// the row-major f32 LE raster.
pub fn write_cdm(dm: &DensityMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + dm.raster.len() * 4);
    buf.extend_from_slice(CDM_MAGIC);
    buf.extend_from_slice(&(dm.height as u32).to_le_bytes());
    buf.extend_from_slice(&(dm.width as u32).to_le_bytes());
    buf.extend_from_slice(&dm.scale.to_le_bytes());
    for v in &dm.raster {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_cdm(path: &Path) -> Result<DensityMap> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if buf.len() < 16 {
        return Err(Error::malformed(p, "truncated header"));
    }
    if &buf[0..4] != CDM_MAGIC {
        return Err(Error::malformed(p, "bad magic (expected CDM1)"));
    }
    let height = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let scale = u32::from_le_bytes(buf[12..16].try_into().unwrap());
    let expected = 16 + height * width * 4;
    if buf.len() != expected {
        return Err(Error::malformed(
            p,
            format!("payload length {} does not match {}x{}", buf.len(), height, width),
        ));
    }
    let raster = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DensityMap {
        height,
        width,
        scale,
        raster,
    })
}
