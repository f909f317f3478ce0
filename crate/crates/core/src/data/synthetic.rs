//! Desk-scale stand-in for ACDC: short-axis cardiac phantoms with exact
//! ground truth.
//!
//! Each slice shows a bright LV blood pool (label 3) inside a dark
//! myocardial ring (label 2) next to a bright RV blob (label 1). Boundaries
//! are blurred and the myocardium is only slightly darker than the
//! surrounding tissue, so the exact extent of each structure is not
//! recoverable from intensity alone. Heart size varies several-fold across
//! subjects, between phases, and from base to apex.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::grid::Grid3;
use crate::seeding;

use super::nifti::{write_nifti, NiftiVolume, StoredType};
use super::preprocess::TARGET_SPACING;
use super::{Phase, VolumeSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub slices_per_volume: usize,
    /// Square slice size in pixels.
    pub size: usize,
    /// Gaussian blur of structure boundaries, in pixels of a 224-pixel
    /// slice (scaled with `size`).
    pub blur_sigma: f64,
    /// Additive noise relative to the blood-pool/myocardium contrast.
    pub noise_sigma: f64,
    /// Largest random offset between a boundary as drawn and as annotated,
    /// in pixels of a 224-pixel slice.
    pub boundary_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 12,
            slices_per_volume: 8,
            size: 224,
            blur_sigma: 2.5,
            noise_sigma: 0.15,
            boundary_jitter: 0.0,
            seed: 0,
        }
    }
}

const SLICE_SPACING_MM: f64 = 10.0;
const ES_FRAME: u32 = 10;

#[derive(Clone, Copy, Debug)]
struct Heart {
    cx: f64,
    cy: f64,
    lv_radius: f64,
    myo_thickness: f64,
    rv_radial: f64,
    rv_tangential: f64,
    rv_angle: f64,
    /// Drawn-vs-annotated offsets for the LV and epicardial boundaries.
    lv_offset: f64,
    epi_offset: f64,
}

#[derive(Clone, Copy)]
struct Subject {
    scale: f64,
    cx: f64,
    cy: f64,
    rv_angle: f64,
    gain: f64,
    offset: f64,
    tissue: f64,
    texture_phase: (f64, f64),
    lv_offset: f64,
    epi_offset: f64,
}

fn label_at(h: &Heart, x: f64, y: f64, offsets: bool) -> u8 {
    let (dx, dy) = (x - h.cx, y - h.cy);
    let r = (dx * dx + dy * dy).sqrt();
    let (lo, eo) = if offsets {
        (h.lv_offset, h.epi_offset)
    } else {
        (0.0, 0.0)
    };
    if r < h.lv_radius + lo {
        return 3;
    }
    if r < h.lv_radius + h.myo_thickness + eo {
        return 2;
    }
    // RV blob: ellipse hugging the septum side
    let d = h.lv_radius + h.myo_thickness + 0.6 * h.rv_radial;
    let (ux, uy) = (h.rv_angle.cos(), h.rv_angle.sin());
    let (ex, ey) = (dx - d * ux, dy - d * uy);
    let radial = ex * ux + ey * uy;
    let tangential = -ex * uy + ey * ux;
    if h.rv_radial > 0.5
        && (radial / h.rv_radial).powi(2) + (tangential / h.rv_tangential).powi(2) < 1.0
    {
        return 1;
    }
    0
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            data[y * w + x] = acc;
        }
    }
}

fn heart_for(s: &Subject, phase: Phase, t: f64) -> Heart {
    // t runs from base (0) to apex (1)
    let (lv, myo) = match phase {
        Phase::Ed => (19.0, 6.5),
        Phase::Es => (12.5, 9.0),
    };
    let taper = 1.0 - 0.55 * t;
    let rv_taper = (1.0 - 1.05 * t).max(0.0);
    Heart {
        cx: s.cx,
        cy: s.cy,
        lv_radius: lv * s.scale * taper,
        myo_thickness: myo * s.scale * (1.0 - 0.3 * t),
        rv_radial: 11.0 * s.scale * rv_taper * if phase == Phase::Es { 0.7 } else { 1.0 },
        rv_tangential: 24.0 * s.scale * rv_taper,
        rv_angle: s.rv_angle,
        lv_offset: s.lv_offset,
        epi_offset: s.epi_offset,
    }
}

fn render_slice(
    cfg: &SyntheticConfig,
    s: &Subject,
    heart: &Heart,
    rng: &mut impl Rng,
) -> (Vec<f32>, Vec<u8>) {
    let n = cfg.size;
    let mut clean = vec![0.0f64; n * n];
    let mut labels = vec![0u8; n * n];
    let (p1, p2) = s.texture_phase;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            labels[y * n + x] = label_at(heart, fx, fy, true);
            let drawn = label_at(heart, fx, fy, false);
            let texture = 0.08 * ((fx / 17.0 + p1).sin() * (fy / 23.0 + p2).cos());
            clean[y * n + x] = match drawn {
                3 => 1.0,
                1 => 0.9,
                2 => 0.25,
                _ => s.tissue + texture,
            };
        }
    }
    blur(&mut clean, n, n, cfg.blur_sigma * n as f64 / 224.0);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let image = clean
        .iter()
        .map(|&v| {
            let v = if cfg.noise_sigma > 0.0 {
                v + noise.sample(rng)
            } else {
                v
            };
            (v * s.gain + s.offset) as f32
        })
        .collect();
    (image, labels)
}

/// Generate `n_subjects` phantoms, each with an ED and an ES volume, at
/// the pipeline's target spacing. Deterministic given the config.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Vec<VolumeSample> {
    assert!(cfg.n_subjects >= 3, "synthetic dataset needs at least 3 subjects");
    assert!(cfg.slices_per_volume >= 1 && cfg.size >= 16);
    let n = cfg.size as f64;
    let unit = n / 224.0;
    let mut out = Vec::with_capacity(2 * cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let id = subject_id(i);
        let mut rng = seeding::rng(cfg.seed, &["synthetic", &id]);
        let j = cfg.boundary_jitter * unit;
        let s = Subject {
            scale: rng.gen_range(0.55..1.45) * unit,
            cx: n / 2.0 + rng.gen_range(-0.06..0.06) * n,
            cy: n / 2.0 + rng.gen_range(-0.06..0.06) * n,
            rv_angle: PI + rng.gen_range(-0.5..0.5),
            gain: rng.gen_range(80.0..240.0),
            offset: rng.gen_range(0.0..40.0),
            tissue: rng.gen_range(0.38..0.48),
            texture_phase: (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)),
            lv_offset: if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 },
            epi_offset: if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 },
        };
        for phase in Phase::BOTH {
            let mut image = Vec::with_capacity(cfg.slices_per_volume * cfg.size * cfg.size);
            let mut labels = Vec::with_capacity(image.capacity());
            for k in 0..cfg.slices_per_volume {
                let t = if cfg.slices_per_volume > 1 {
                    k as f64 / (cfg.slices_per_volume - 1) as f64
                } else {
                    0.0
                };
                let heart = heart_for(&s, phase, t);
                let (img, lab) = render_slice(cfg, &s, &heart, &mut rng);
                image.extend(img);
                labels.extend(lab);
            }
            let d = cfg.slices_per_volume;
            out.push(VolumeSample {
                subject_id: id.clone(),
                phase,
                image: Grid3::new(d, cfg.size, cfg.size, image).expect("sized"),
                labels: Grid3::new(d, cfg.size, cfg.size, labels).expect("sized"),
                in_plane_spacing: (TARGET_SPACING, TARGET_SPACING),
                slice_spacing: SLICE_SPACING_MM,
            });
        }
    }
    out
}

pub fn subject_id(i: usize) -> String {
    format!("patient{:03}", i + 1)
}

/// Persist volumes in the ACDC directory layout. Returns the subject
/// directories written.
pub fn write_acdc_layout(root: &Path, volumes: &[VolumeSample]) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = Vec::new();
    for v in volumes {
        let dir = root.join(&v.subject_id);
        if !dirs.contains(&dir) {
            fs::create_dir_all(&dir).at(&dir)?;
            let cfg = dir.join("Info.cfg");
            fs::write(&cfg, format!("ED: 1\nES: {ES_FRAME}\nGroup: SYN\nNbFrame: {ES_FRAME}\n"))
                .at(&cfg)?;
            dirs.push(dir.clone());
        }
        let frame = match v.phase {
            Phase::Ed => 1,
            Phase::Es => ES_FRAME,
        };
        let (d, h, w) = v.image.dims();
        let spacing = [v.in_plane_spacing.1, v.in_plane_spacing.0, v.slice_spacing];
        let img = NiftiVolume {
            dims: [w, h, d],
            spacing,
            data: v.image.data.iter().map(|&x| x as f64).collect(),
        };
        let gt = NiftiVolume {
            dims: [w, h, d],
            spacing,
            data: v.labels.data.iter().map(|&x| x as f64).collect(),
        };
        let stem = format!("{}_frame{frame:02}", v.subject_id);
        write_nifti(&dir.join(format!("{stem}.nii.gz")), &img, StoredType::F32)?;
        write_nifti(&dir.join(format!("{stem}_gt.nii.gz")), &gt, StoredType::U8)?;
    }
    Ok(dirs)
}
