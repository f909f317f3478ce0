//! Data ingestion and preprocessing: ACDC-layout volumes, resampling,
//! clipped z-score standardization, subject-level splits and per-slice
//! samples with their conditioning vectors.

pub mod acdc;
pub mod cache;
pub mod nifti;
pub mod preprocess;
pub mod splits;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningVector;
use crate::error::{Error, Result};
use crate::grid::{Grid2, Grid3};

pub use acdc::{load_acdc_subject, LabelMap};
pub use cache::{prepare_cache, PrepareReport, PreparedDataset, VolumeSlices};
pub use preprocess::{
    extract_slices, preprocess_volume, resample_volume, resize_image, resize_labels,
    standardize_intensity, PreprocessConfig, ZMode,
};
pub use splits::{make_splits, subsample_training, SplitPlan};
pub use synthetic::{generate_synthetic_dataset, write_acdc_layout, SyntheticConfig};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "ES")]
    Es,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Ed, Phase::Es];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ED" => Ok(Phase::Ed),
            "ES" => Ok(Phase::Es),
            _ => Err(Error::Input(format!("unknown phase {s:?}"))),
        }
    }
}

/// One annotated 3D frame of a subject.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub subject_id: String,
    pub phase: Phase,
    pub image: Grid3<f32>,
    pub labels: Grid3<u8>,
    /// mm per pixel along rows (y) and columns (x).
    pub in_plane_spacing: (f64, f64),
    pub slice_spacing: f64,
}

impl VolumeSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.dims() != self.labels.dims() {
            return Err(Error::Shape(format!(
                "image {:?} and labels {:?} differ",
                self.image.dims(),
                self.labels.dims()
            )));
        }
        if let Some(&bad) = self.labels.data.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::CorruptLabels {
                source_name: self.subject_id.clone(),
                value: bad as i64,
            });
        }
        let (a, b) = self.in_plane_spacing;
        if !(a > 0.0 && b > 0.0 && self.slice_spacing > 0.0) {
            return Err(Error::Parameter(format!(
                "non-positive spacing ({a}, {b}, {})",
                self.slice_spacing
            )));
        }
        Ok(())
    }
}

/// One preprocessed axial slice with its conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub subject_id: String,
    pub phase: Phase,
    pub slice_index: usize,
    pub image: Grid2<f32>,
    pub labels: Grid2<u8>,
    pub z: ConditioningVector,
}
