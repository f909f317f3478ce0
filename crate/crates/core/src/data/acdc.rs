//! ACDC directory layout:
//!
//! ```text
//! patientXXX/
//!   Info.cfg                    # "ED: 1", "ES: 12", ...
//!   patientXXX_frame01.nii.gz
//!   patientXXX_frame01_gt.nii.gz
//!   patientXXX_frame12.nii.gz
//!   patientXXX_frame12_gt.nii.gz
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::grid::Grid3;

use super::nifti::{read_nifti, NiftiVolume};
use super::{Phase, VolumeSample, NUM_CLASSES};

/// Maps label values found in annotation files onto the canonical classes
/// 0 = background, 1 = RV cavity, 2 = myocardium, 3 = LV cavity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMap(pub [u8; NUM_CLASSES]);

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap([0, 1, 2, 3])
    }
}

impl LabelMap {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; NUM_CLASSES];
        for &c in &self.0 {
            if c as usize >= NUM_CLASSES || seen[c as usize] {
                return Err(Error::Config(format!(
                    "label map {:?} is not a permutation of 0..4",
                    self.0
                )));
            }
            seen[c as usize] = true;
        }
        Ok(())
    }
}

/// ED and ES frame numbers from `Info.cfg`.
pub fn read_info_cfg(path: &Path) -> Result<(u32, u32)> {
    let text = fs::read_to_string(path).at(path)?;
    let mut ed = None;
    let mut es = None;
    for line in text.lines() {
        let Some((k, v)) = line.split_once(':') else {
            continue;
        };
        let parse = || {
            v.trim().parse::<u32>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad frame number {:?}", v.trim()),
            })
        };
        match k.trim() {
            "ED" => ed = Some(parse()?),
            "ES" => es = Some(parse()?),
            _ => {}
        }
    }
    match (ed, es) {
        (Some(ed), Some(es)) => Ok((ed, es)),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "ED and ES entries required".into(),
        }),
    }
}

fn frame_path(dir: &Path, subject: &str, frame: u32, gt: bool) -> Option<PathBuf> {
    let stem = if gt {
        format!("{subject}_frame{frame:02}_gt")
    } else {
        format!("{subject}_frame{frame:02}")
    };
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Input files of one subject, in a fixed order (used for content hashing).
pub fn subject_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let subject = subject_name(dir)?;
    let info = dir.join("Info.cfg");
    let (ed, es) = read_info_cfg(&info)?;
    let mut files = vec![info];
    for frame in [ed, es] {
        for gt in [false, true] {
            match frame_path(dir, &subject, frame, gt) {
                Some(p) => files.push(p),
                None if gt => {
                    return Err(Error::AnnotationMissing(
                        dir.join(format!("{subject}_frame{frame:02}_gt.nii.gz")),
                    ))
                }
                None => {
                    return Err(Error::Format {
                        path: dir.join(format!("{subject}_frame{frame:02}.nii.gz")),
                        reason: "image volume missing".into(),
                    })
                }
            }
        }
    }
    Ok(files)
}

fn subject_name(dir: &Path) -> Result<String> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Input(format!("not a subject directory: {}", dir.display())))
}

fn to_grid_f32(v: &NiftiVolume) -> Result<Grid3<f32>> {
    let [nx, ny, nz] = v.dims;
    Grid3::new(nz, ny, nx, v.data.iter().map(|&x| x as f32).collect())
}

fn to_labels(v: &NiftiVolume, map: &LabelMap, source: &Path) -> Result<Grid3<u8>> {
    let [nx, ny, nz] = v.dims;
    let mut out = Vec::with_capacity(v.data.len());
    for &x in &v.data {
        let r = x.round();
        if (x - r).abs() > 1e-3 || r < 0.0 || r >= NUM_CLASSES as f64 {
            return Err(Error::CorruptLabels {
                source_name: source.display().to_string(),
                value: r as i64,
            });
        }
        out.push(map.0[r as usize]);
    }
    Grid3::new(nz, ny, nx, out)
}

/// Load the ED and ES frames of one subject with their annotations.
pub fn load_acdc_subject(dir: &Path, label_map: &LabelMap) -> Result<Vec<VolumeSample>> {
    label_map.validate()?;
    let subject = subject_name(dir)?;
    let (ed, es) = read_info_cfg(&dir.join("Info.cfg"))?;
    let mut out = Vec::with_capacity(2);
    for (phase, frame) in [(Phase::Ed, ed), (Phase::Es, es)] {
        let img_path = frame_path(dir, &subject, frame, false).ok_or_else(|| Error::Format {
            path: dir.join(format!("{subject}_frame{frame:02}.nii.gz")),
            reason: "image volume missing".into(),
        })?;
        let gt_path = frame_path(dir, &subject, frame, true).ok_or_else(|| {
            Error::AnnotationMissing(dir.join(format!("{subject}_frame{frame:02}_gt.nii.gz")))
        })?;
        let img = read_nifti(&img_path)?;
        let gt = read_nifti(&gt_path)?;
        if img.dims != gt.dims {
            return Err(Error::Shape(format!(
                "{}: image {:?} vs labels {:?}",
                subject, img.dims, gt.dims
            )));
        }
        let v = VolumeSample {
            subject_id: subject.clone(),
            phase,
            image: to_grid_f32(&img)?,
            labels: to_labels(&gt, label_map, &gt_path)?,
            in_plane_spacing: (img.spacing[1], img.spacing[0]),
            slice_spacing: img.spacing[2],
        };
        v.validate()?;
        out.push(v);
    }
    Ok(out)
}

/// Subject directories under a dataset root, sorted by name.
pub fn list_subjects(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .at(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("Info.cfg").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::nifti::{write_nifti, StoredType};

    fn write_subject(root: &Path, name: &str, frames: &[(u32, bool)], label_value: f64) -> PathBuf {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("Info.cfg"), "ED: 1\nES: 12\nGroup: NOR\nHeight: 180.0\n").unwrap();
        let vol = NiftiVolume {
            dims: [4, 3, 2],
            spacing: [1.5, 1.5, 10.0],
            data: (0..24).map(|v| v as f64).collect(),
        };
        for &(frame, with_gt) in frames {
            write_nifti(&dir.join(format!("{name}_frame{frame:02}.nii.gz")), &vol, StoredType::F32)
                .unwrap();
            if with_gt {
                let mut gt = vol.clone();
                gt.data = (0..24).map(|v| if v == 5 { label_value } else { (v % 4) as f64 }).collect();
                write_nifti(&dir.join(format!("{name}_frame{frame:02}_gt.nii.gz")), &gt, StoredType::U8)
                    .unwrap();
            }
        }
        dir
    }

    #[test]
    fn loads_both_phases() {
        let root = tempfile::tempdir().unwrap();
        let dir = write_subject(root.path(), "patient001", &[(1, true), (12, true)], 1.0);
        let vols = load_acdc_subject(&dir, &LabelMap::default()).unwrap();
        assert_eq!(vols.len(), 2);
        assert_eq!(vols[0].phase, Phase::Ed);
        assert_eq!(vols[1].phase, Phase::Es);
        assert_eq!(vols[0].image.dims(), (2, 3, 4));
        assert_eq!(vols[0].in_plane_spacing, (1.5, 1.5));
        assert_eq!(vols[0].slice_spacing, 10.0);
        assert_eq!(list_subjects(root.path()).unwrap(), vec![dir]);
    }

    #[test]
    fn missing_es_annotation() {
        let root = tempfile::tempdir().unwrap();
        let dir = write_subject(root.path(), "patient002", &[(1, true), (12, false)], 1.0);
        let err = load_acdc_subject(&dir, &LabelMap::default()).unwrap_err();
        assert!(matches!(err, Error::AnnotationMissing(_)), "{err}");
    }

    #[test]
    fn label_four_is_corrupt() {
        let root = tempfile::tempdir().unwrap();
        let dir = write_subject(root.path(), "patient003", &[(1, true), (12, true)], 4.0);
        let err = load_acdc_subject(&dir, &LabelMap::default()).unwrap_err();
        assert!(matches!(err, Error::CorruptLabels { value: 4, .. }), "{err}");
    }

    #[test]
    fn label_map_is_applied() {
        let root = tempfile::tempdir().unwrap();
        let dir = write_subject(root.path(), "patient004", &[(1, true), (12, true)], 1.0);
        let swapped = LabelMap([0, 3, 2, 1]);
        let vols = load_acdc_subject(&dir, &swapped).unwrap();
        assert_eq!(vols[0].labels.data[1], 3);
        assert_eq!(vols[0].labels.data[3], 1);
        assert!(LabelMap([0, 1, 1, 3]).validate().is_err());
    }
}
