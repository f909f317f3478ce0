//! Segmentation backbones with one conditioning fusion site, volume-wise
//! inference and checkpoint persistence.

pub mod fusion;
pub mod model;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningVector;
use crate::data::cache::write_atomic;
use crate::data::SliceSample;
use crate::error::{Error, IoContext, Result};
use crate::grid::Grid3;
use crate::tensor::Tensor;

pub use fusion::{Architecture, FusionSpec, Mechanism, Site, Variant};
pub use model::{argmax_lowest, predict_labels, BackboneConfig, SegmentationModel, Tape};

/// Slices per inference batch.
pub const INFER_BATCH: usize = 8;

/// Stack slice images into an `n x 1 x h x w` batch.
pub fn batch_images(slices: &[&SliceSample]) -> Result<Tensor<f32>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::Shape(format!(
                "slice {}x{} in a {h}x{w} batch",
                s.image.height, s.image.width
            )));
        }
        data.extend_from_slice(&s.image.data);
    }
    Tensor::from_vec(slices.len(), 1, h, w, data)
}

/// Predict a label volume from the ordered slices of one (subject, phase).
pub fn forward_volume(model: &SegmentationModel<f32>, slices: &[SliceSample]) -> Result<Grid3<u8>> {
    let z: Vec<ConditioningVector> = slices.iter().map(|s| s.z).collect();
    forward_volume_with_z(model, slices, &z)
}

/// As [`forward_volume`] but with explicit conditioning vectors, one per
/// slice (used for conditioning ablations).
pub fn forward_volume_with_z(
    model: &SegmentationModel<f32>,
    slices: &[SliceSample],
    z: &[ConditioningVector],
) -> Result<Grid3<u8>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Input("no slices to predict".into()))?;
    if let Some(s) = slices
        .iter()
        .find(|s| s.subject_id != first.subject_id || s.phase != first.phase)
    {
        return Err(Error::Input(format!(
            "slices from {}/{} and {}/{} in one volume",
            first.subject_id, first.phase, s.subject_id, s.phase
        )));
    }
    if z.len() != slices.len() {
        return Err(Error::Shape(format!(
            "{} conditioning vectors for {} slices",
            z.len(),
            slices.len()
        )));
    }
    let (h, w) = (first.image.height, first.image.width);
    let mut labels = Vec::with_capacity(slices.len() * h * w);
    let refs: Vec<&SliceSample> = slices.iter().collect();
    for (chunk, zc) in refs.chunks(INFER_BATCH).zip(z.chunks(INFER_BATCH)) {
        let logits = model.infer(&batch_images(chunk)?, zc)?;
        for plane in predict_labels(&logits) {
            labels.extend(plane);
        }
    }
    Grid3::new(slices.len(), h, w, labels)
}

/// Sidecar record stored next to a checkpoint's weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fusion: FusionSpec,
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub epoch: usize,
}

const WEIGHTS_MAGIC: &[u8; 4] = b"CSWT";

fn meta_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Write `weights` (binary, keyed by parameter name) and a JSON sidecar
/// with the same stem.
pub fn save_checkpoint(
    weights: &Path,
    model: &SegmentationModel<f32>,
    epoch: usize,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    let entries = model.store().entries();
    buf.write_u32::<LittleEndian>(entries.len() as u32).at(weights)?;
    for e in entries {
        buf.write_u32::<LittleEndian>(e.name.len() as u32).at(weights)?;
        buf.extend_from_slice(e.name.as_bytes());
        buf.write_u32::<LittleEndian>(e.shape.len() as u32).at(weights)?;
        for &d in &e.shape {
            buf.write_u32::<LittleEndian>(d as u32).at(weights)?;
        }
        buf.write_u64::<LittleEndian>(e.value.len() as u64).at(weights)?;
        for &v in &e.value {
            buf.write_f32::<LittleEndian>(v).at(weights)?;
        }
    }
    write_atomic(weights, &buf)?;
    let meta = CheckpointMeta {
        fusion: *model.fusion(),
        backbone: *model.config(),
        seed: model.store().seed(),
        epoch,
    };
    write_atomic(&meta_path(weights), &serde_json::to_vec_pretty(&meta)?)
}

/// Rebuild a model from [`save_checkpoint`] output.
pub fn load_checkpoint(weights: &Path) -> Result<(SegmentationModel<f32>, CheckpointMeta)> {
    let mp = meta_path(weights);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&mp).at(&mp)?)?;
    let mut model = SegmentationModel::<f32>::new(meta.backbone, meta.fusion, meta.seed)?;
    let bytes = fs::read(weights).at(weights)?;
    let bad = |reason: String| Error::Format {
        path: weights.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(bad("not a weight file".into()));
    }
    let mut r = &bytes[4..];
    let count = r.read_u32::<LittleEndian>().at(weights)? as usize;
    if count != model.store().len() {
        return Err(bad(format!(
            "{count} tensors, model expects {}",
            model.store().len()
        )));
    }
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>().at(weights)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).at(weights)?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name".into()))?;
        let nd = r.read_u32::<LittleEndian>().at(weights)? as usize;
        for _ in 0..nd {
            r.read_u32::<LittleEndian>().at(weights)?;
        }
        let len = r.read_u64::<LittleEndian>().at(weights)? as usize;
        let mut values = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut values).at(weights)?;
        model.store_mut().set_by_name(&name, values)?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Phase;
    use crate::grid::Grid2;

    fn slices(n: usize, subject: &str) -> Vec<SliceSample> {
        (0..n)
            .map(|k| SliceSample {
                subject_id: subject.into(),
                phase: Phase::Ed,
                slice_index: k,
                image: Grid2::new(16, 16, (0..256).map(|v| ((v * 7 + k) % 13) as f32 / 6.0 - 1.0).collect())
                    .unwrap(),
                labels: Grid2::filled(16, 16, 0),
                z: ConditioningVector([5.0, 10.0, k as f64]),
            })
            .collect()
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn volume_has_one_plane_per_slice() {
        let m = SegmentationModel::<f32>::new(small(), Variant::FilmDecoder.fusion(Architecture::Unet), 1)
            .unwrap();
        let v = forward_volume(&m, &slices(10, "a")).unwrap();
        assert_eq!(v.dims(), (10, 16, 16));
        assert!(v.data.iter().all(|&l| l < 4));
    }

    #[test]
    fn classifier_bias_decides_constant_prediction() {
        let mut m =
            SegmentationModel::<f32>::new(small(), Variant::Baseline.fusion(Architecture::Unet), 1)
                .unwrap();
        let (w, b) = (m.classifier().weight(), m.classifier().bias());
        m.store_mut().get_mut(w).fill(0.0);
        m.store_mut().get_mut(b).copy_from_slice(&[1.0, 0.0, -1.0, 0.5]);
        let v = forward_volume(&m, &slices(3, "a")).unwrap();
        assert!(v.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn mixed_subjects_rejected() {
        let m = SegmentationModel::<f32>::new(small(), Variant::Baseline.fusion(Architecture::Unet), 1)
            .unwrap();
        let mut s = slices(2, "a");
        s.extend(slices(1, "b"));
        assert!(matches!(forward_volume(&m, &s), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SegmentationModel::<f32>::new(
            small(),
            Variant::ConcatMlpMiddle.fusion(Architecture::EncoderDecoder),
            7,
        )
        .unwrap();
        for e in m.store_mut().entries_mut() {
            e.value.iter_mut().enumerate().for_each(|(i, v)| *v += i as f32 * 1e-3);
        }
        let p = dir.path().join("checkpoint.bin");
        save_checkpoint(&p, &m, 12).unwrap();
        let (back, meta) = load_checkpoint(&p).unwrap();
        assert_eq!(meta.epoch, 12);
        assert_eq!(meta.seed, 7);
        for (a, b) in back.store().entries().iter().zip(m.store().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }
}
