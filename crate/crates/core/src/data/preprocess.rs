use serde::{Deserialize, Serialize};

use crate::conditioning::{compute_label_distribution, compute_volume_distribution};
use crate::error::{Error, Result};
use crate::grid::{Grid2, Grid3};
use crate::nn::ops::linear_taps;

use super::{SliceSample, VolumeSample};

pub const TARGET_SPACING: f64 = 1.37;
pub const SLICE_SIZE: usize = 224;
pub const CLIP_SIGMAS: f32 = 3.0;
pub const STD_EPS: f64 = 1e-8;

/// Whether each slice gets its own conditioning vector or all slices share
/// the volume-level one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    #[default]
    PerSlice,
    PerVolume,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_spacing: f64,
    pub height: usize,
    pub width: usize,
    pub z_mode: ZMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: TARGET_SPACING,
            height: SLICE_SIZE,
            width: SLICE_SIZE,
            z_mode: ZMode::PerSlice,
        }
    }
}

/// Bilinear resize with half-pixel centres; constant fields stay exactly
/// constant and same-size resizes are exact copies.
pub fn resize_image(src: &Grid2<f32>, out_h: usize, out_w: usize) -> Grid2<f32> {
    assert!(!src.is_empty() && out_h > 0 && out_w > 0, "resize of an empty grid");
    let ty = linear_taps(src.height, out_h);
    let tx = linear_taps(src.width, out_w);
    let lerp = |a: f32, b: f32, f: f64| if f == 0.0 { a } else { a + (f as f32) * (b - a) };
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, _, fy) in &ty {
        for &(x0, x1, _, fx) in &tx {
            let top = lerp(src.get(y0, x0), src.get(y0, x1), fx);
            let bot = lerp(src.get(y1, x0), src.get(y1, x1), fx);
            out.push(lerp(top, bot, fy));
        }
    }
    Grid2 {
        height: out_h,
        width: out_w,
        data: out,
    }
}

fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    let s = ((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    s.min(src - 1)
}

/// Nearest-neighbour resize; never introduces a value absent from the input.
pub fn resize_labels(src: &Grid2<u8>, out_h: usize, out_w: usize) -> Grid2<u8> {
    assert!(!src.is_empty() && out_h > 0 && out_w > 0, "resize of an empty grid");
    let xs: Vec<usize> = (0..out_w).map(|o| nearest_index(o, src.width, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = nearest_index(oy, src.height, out_h);
        out.extend(xs.iter().map(|&sx| src.get(sy, sx)));
    }
    Grid2 {
        height: out_h,
        width: out_w,
        data: out,
    }
}

fn resampled_dim(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Resample every slice in-plane to `target_spacing` mm/pixel. Slice
/// spacing is left untouched.
pub fn resample_volume(v: &VolumeSample, target_spacing: f64) -> Result<VolumeSample> {
    if !(target_spacing > 0.0) {
        return Err(Error::Parameter(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let (sy, sx) = v.in_plane_spacing;
    if !(sy > 0.0 && sx > 0.0) {
        return Err(Error::Parameter(format!(
            "in-plane spacing must be positive, got ({sy}, {sx})"
        )));
    }
    let h = resampled_dim(v.image.height, sy, target_spacing);
    let w = resampled_dim(v.image.width, sx, target_spacing);
    Ok(VolumeSample {
        subject_id: v.subject_id.clone(),
        phase: v.phase,
        image: v.image.map_slices(|s| resize_image(&s, h, w))?,
        labels: v.labels.map_slices(|s| resize_labels(&s, h, w))?,
        in_plane_spacing: (target_spacing, target_spacing),
        slice_spacing: v.slice_spacing,
    })
}

/// Volume-wise z-score with population statistics, clamped to +-3.
pub fn standardize_intensity(v: &VolumeSample) -> VolumeSample {
    let data = &v.image.data;
    assert!(!data.is_empty(), "standardizing an empty volume");
    let n = data.len() as f64;
    let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(STD_EPS);
    let image = Grid3 {
        data: data
            .iter()
            .map(|&x| (((x as f64 - mean) / sd) as f32).clamp(-CLIP_SIGMAS, CLIP_SIGMAS))
            .collect(),
        ..v.image.clone()
    };
    VolumeSample {
        image,
        ..v.clone()
    }
}

/// Resample, standardize and resize a raw volume.
pub fn preprocess_volume(v: &VolumeSample, cfg: &PreprocessConfig) -> Result<VolumeSample> {
    v.validate()?;
    let r = resample_volume(v, cfg.target_spacing)?;
    let s = standardize_intensity(&r);
    let (h, w) = (cfg.height, cfg.width);
    Ok(VolumeSample {
        image: s.image.map_slices(|g| resize_image(&g, h, w))?,
        labels: s.labels.map_slices(|g| resize_labels(&g, h, w))?,
        ..s
    })
}

/// One sample per axial slice, each with the conditioning vector of its own
/// mask (or of the whole volume under [`ZMode::PerVolume`]).
pub fn extract_slices(v: &VolumeSample, z_mode: ZMode) -> Vec<SliceSample> {
    let volume_z = compute_volume_distribution(&v.labels.data);
    (0..v.image.depth)
        .map(|k| {
            let labels = v.labels.slice_grid(k);
            let z = match z_mode {
                ZMode::PerSlice => compute_label_distribution(&labels),
                ZMode::PerVolume => volume_z,
            };
            SliceSample {
                subject_id: v.subject_id.clone(),
                phase: v.phase,
                slice_index: k,
                image: v.image.slice_grid(k),
                labels,
                z,
            }
        })
        .collect()
}
