//! Volume Dice per structure, aggregation, and the paired t-test with
//! Bonferroni correction used to compare a conditioned variant against its
//! baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::conditioning::ConditioningVector;
use crate::data::cache::write_atomic;
use crate::data::{Phase, VolumeSlices};
use crate::error::{Error, IoContext, Result};
use crate::grid::Grid3;
use crate::networks::{forward_volume_with_z, SegmentationModel};
use crate::{par, seeding};

/// Comparisons per family: the eight conditioned variants of one table row.
pub const NUM_COMPARISONS: usize = 8;
pub const ALPHA: f64 = 0.05;

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1.0 when the class is absent
/// from both volumes.
pub fn dice_score(pred: &Grid3<u8>, gt: &Grid3<u8>, class_id: u8) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Dice of one test volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRecord {
    /// Cross-validation repeat the volume was tested in; part of the pairing
    /// key since a subject can be a test subject in several repeats.
    pub repeat: usize,
    pub subject_id: String,
    pub phase: Phase,
    pub rv: f64,
    pub myo: f64,
    pub lv: f64,
    pub mean_dice: f64,
}

impl DiceRecord {
    pub fn from_volumes(
        repeat: usize,
        subject_id: &str,
        phase: Phase,
        pred: &Grid3<u8>,
        gt: &Grid3<u8>,
    ) -> Result<Self> {
        let rv = dice_score(pred, gt, 1)?;
        let myo = dice_score(pred, gt, 2)?;
        let lv = dice_score(pred, gt, 3)?;
        Ok(Self {
            repeat,
            subject_id: subject_id.to_string(),
            phase,
            rv,
            myo,
            lv,
            mean_dice: (rv + myo + lv) / 3.0,
        })
    }

    fn key(&self) -> (usize, &str, Phase) {
        (self.repeat, &self.subject_id, self.phase)
    }
}

/// Predict and score every volume with its own conditioning vectors.
pub fn evaluate_model(
    model: &SegmentationModel<f32>,
    volumes: &[&VolumeSlices],
    repeat: usize,
) -> Result<Vec<DiceRecord>> {
    let z: Vec<Vec<ConditioningVector>> = volumes
        .iter()
        .map(|v| v.slices.iter().map(|s| s.z).collect())
        .collect();
    evaluate_model_with_z(model, volumes, &z, repeat)
}

/// As [`evaluate_model`] with caller-supplied conditioning vectors, one
/// list per volume.
pub fn evaluate_model_with_z(
    model: &SegmentationModel<f32>,
    volumes: &[&VolumeSlices],
    z: &[Vec<ConditioningVector>],
    repeat: usize,
) -> Result<Vec<DiceRecord>> {
    if z.len() != volumes.len() {
        return Err(Error::Shape(format!(
            "{} conditioning lists for {} volumes",
            z.len(),
            volumes.len()
        )));
    }
    let idx: Vec<usize> = (0..volumes.len()).collect();
    par::map_slice(&idx, |&i| {
        let v = volumes[i];
        let pred = forward_volume_with_z(model, &v.slices, &z[i])?;
        DiceRecord::from_volumes(repeat, &v.subject_id, v.phase, &pred, &v.labels()?)
    })
    .into_iter()
    .collect()
}

/// Conditioning vectors of all slices permuted across the whole set, for the
/// shuffled-z ablation.
pub fn shuffled_z(volumes: &[&VolumeSlices], seed: u64) -> Vec<Vec<ConditioningVector>> {
    let mut pool: Vec<ConditioningVector> = volumes
        .iter()
        .flat_map(|v| v.slices.iter().map(|s| s.z))
        .collect();
    pool.shuffle(&mut seeding::rng(seed, &["shuffled-z"]));
    let mut it = pool.into_iter();
    volumes
        .iter()
        .map(|v| it.by_ref().take(v.slices.len()).collect())
        .collect()
}

/// Mean and sample standard deviation of `mean_dice` (std is 0 for a
/// single record).
pub fn aggregate(records: &[DiceRecord]) -> Result<(f64, f64)> {
    let xs: Vec<f64> = records.iter().map(|r| r.mean_dice).collect();
    mean_std(&xs)
}

pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Input("cannot aggregate zero records".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t_statistic: f64,
    pub p_value: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Input("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d)?;
    let n = d.len();
    let df = n - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t_statistic: 0.0,
                p_value: 1.0,
                df,
            }
        } else {
            TTest {
                t_statistic: mean.signum() * f64::INFINITY,
                p_value: 0.0,
                df,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    Ok(TTest {
        t_statistic: t,
        p_value: p,
        df,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub corrected_alpha: f64,
    pub significant: bool,
}

pub fn bonferroni_decide(p_value: f64, family_size: usize, alpha: f64) -> Decision {
    let corrected_alpha = alpha / family_size.max(1) as f64;
    Decision {
        corrected_alpha,
        significant: p_value < corrected_alpha,
    }
}

/// One variant-versus-baseline test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub mechanism: String,
    pub baseline: String,
    pub pairs: usize,
    pub t_statistic: f64,
    pub p_value: f64,
    pub num_comparisons: usize,
    pub corrected_alpha: f64,
    pub significant: bool,
}

/// Pair records by (repeat, subject, phase) and test `variant` against
/// `baseline`. Volumes present on only one side are ignored.
pub fn compare(
    mechanism: &str,
    variant: &[DiceRecord],
    baseline_id: &str,
    baseline: &[DiceRecord],
) -> Result<ComparisonResult> {
    let base: BTreeMap<_, f64> = baseline.iter().map(|r| (r.key(), r.mean_dice)).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut sorted: Vec<&DiceRecord> = variant.iter().collect();
    sorted.sort_by(|x, y| x.key().cmp(&y.key()));
    for r in sorted {
        if let Some(&m) = base.get(&r.key()) {
            a.push(r.mean_dice);
            b.push(m);
        }
    }
    let t = paired_ttest(&a, &b)?;
    let d = bonferroni_decide(t.p_value, NUM_COMPARISONS, ALPHA);
    Ok(ComparisonResult {
        mechanism: mechanism.to_string(),
        baseline: baseline_id.to_string(),
        pairs: a.len(),
        t_statistic: t.t_statistic,
        p_value: t.p_value,
        num_comparisons: NUM_COMPARISONS,
        corrected_alpha: d.corrected_alpha,
        significant: d.significant,
    })
}

pub fn write_records(path: &Path, records: &[DiceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_records(path: &Path) -> Result<Vec<DiceRecord>> {
    let bytes = fs::read(path).at(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        out.push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<u8>) -> Grid3<u8> {
        let n = data.len();
        Grid3::new(1, 1, n, data).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = vol(vec![0, 1, 1, 2]);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&vol(vec![1, 1, 0, 0]), &vol(vec![0, 0, 1, 1]), 1).unwrap(), 0.0);
        let mut p = vec![0u8; 200];
        let mut g = vec![0u8; 200];
        p[..100].fill(3);
        g[50..150].fill(3);
        assert_eq!(dice_score(&vol(p), &vol(g), 3).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a, 3).unwrap(), 1.0);
        assert!(matches!(dice_score(&a, &vol(vec![0; 3]), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregate_examples() {
        let rec = |m: f64| DiceRecord {
            repeat: 0,
            subject_id: "s".into(),
            phase: Phase::Ed,
            rv: m,
            myo: m,
            lv: m,
            mean_dice: m,
        };
        let (m, s) = aggregate(&[rec(0.9), rec(0.9), rec(0.9)]).unwrap();
        assert!((m - 0.9).abs() < 1e-15 && s.abs() < 1e-15);
        let (m, s) = aggregate(&[rec(0.8), rec(1.0)]).unwrap();
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn ttest_examples() {
        let a = [0.5, 0.7, 0.9];
        let t = paired_ttest(&a, &a).unwrap();
        assert_eq!((t.t_statistic, t.p_value), (0.0, 1.0));

        let t = paired_ttest(&[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.df, 2);
        assert!((t.t_statistic - 12f64.sqrt()).abs() < 1e-9);
        // closed form for two degrees of freedom: p = 1 - t / sqrt(2 + t^2)
        let oracle = 1.0 - t.t_statistic / (2.0 + t.t_statistic.powi(2)).sqrt();
        assert!((t.p_value - oracle).abs() < 1e-8);

        let t = paired_ttest(&[0.7, 0.7, 0.7], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(t.p_value, 0.0);
        assert!(paired_ttest(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bonferroni_threshold() {
        assert!(bonferroni_decide(0.0062, 8, 0.05).significant);
        assert!(!bonferroni_decide(0.0063, 8, 0.05).significant);
        assert_eq!(bonferroni_decide(0.01, 8, 0.05).corrected_alpha, 0.00625);
        assert!(bonferroni_decide(0.049, 1, 0.05).significant);
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dice.csv");
        let r = vec![DiceRecord::from_volumes(2, "patient001", Phase::Es, &vol(vec![1, 2, 3, 0]), &vol(vec![1, 2, 0, 0])).unwrap()];
        write_records(&p, &r).unwrap();
        assert_eq!(read_records(&p).unwrap(), r);
    }
}
