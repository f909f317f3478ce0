//! On-disk cache of preprocessed slices.
//!
//! ```text
//! <out>/cache/
//!   manifest.csv                      # one row per SliceSample
//!   <subject>/<phase>_<slice>.bin     # "CSLC", u32 h, u32 w, f32 image, u8 labels
//! ```
//!
//! Each manifest row carries a SHA-256 over the subject's input files and
//! the preprocessing settings; subjects whose hash is unchanged and whose
//! slice files exist are not recomputed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::ConditioningVector;
use crate::error::{Error, IoContext, Result};
use crate::grid::{Grid2, Grid3};
use crate::par;

use super::acdc::{list_subjects, load_acdc_subject, subject_files, LabelMap};
use super::preprocess::{extract_slices, preprocess_volume, PreprocessConfig};
use super::{Phase, SliceSample, VolumeSample};

pub const MANIFEST: &str = "manifest.csv";
const MAGIC: &[u8; 4] = b"CSLC";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    subject: String,
    phase: Phase,
    slice: usize,
    z_rv: f64,
    z_myo: f64,
    z_lv: f64,
    file: String,
    source_hash: String,
}

/// Outcome of a cache preparation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrepareReport {
    pub processed: Vec<String>,
    pub skipped: Vec<String>,
    /// `(subject, error message)` for subjects that could not be read.
    pub failed: Vec<(String, String)>,
    pub volumes: usize,
    pub slices: usize,
    pub manifest: PathBuf,
}

/// All slices of one (subject, phase) volume, ordered by slice index.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSlices {
    pub subject_id: String,
    pub phase: Phase,
    pub slices: Vec<SliceSample>,
}

impl VolumeSlices {
    pub fn labels(&self) -> Result<Grid3<u8>> {
        let grids: Vec<Grid2<u8>> = self.slices.iter().map(|s| s.labels.clone()).collect();
        Grid3::stack(&grids)
    }
}

/// Preprocessed dataset held in memory, grouped by volume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreparedDataset {
    pub volumes: Vec<VolumeSlices>,
}

impl PreparedDataset {
    /// Preprocess raw volumes in memory (no cache directory involved).
    pub fn from_volumes(raw: &[VolumeSample], cfg: &PreprocessConfig) -> Result<Self> {
        let prepared = par::map_slice(raw, |v| preprocess_volume(v, cfg));
        let mut volumes = Vec::with_capacity(raw.len());
        for p in prepared {
            let v = p?;
            volumes.push(VolumeSlices {
                subject_id: v.subject_id.clone(),
                phase: v.phase,
                slices: extract_slices(&v, cfg.z_mode),
            });
        }
        volumes.sort_by(|a, b| (&a.subject_id, a.phase).cmp(&(&b.subject_id, b.phase)));
        Ok(Self { volumes })
    }

    /// Read a cache directory written by [`prepare_cache`].
    pub fn load(cache_dir: &Path) -> Result<Self> {
        let rows = read_manifest(&cache_dir.join(MANIFEST))?;
        let loaded = par::map_slice(&rows, |r| -> Result<SliceSample> {
            let (image, labels) = read_slice_file(&cache_dir.join(&r.file))?;
            Ok(SliceSample {
                subject_id: r.subject.clone(),
                phase: r.phase,
                slice_index: r.slice,
                image,
                labels,
                z: ConditioningVector([r.z_rv, r.z_myo, r.z_lv]),
            })
        });
        let mut groups: BTreeMap<(String, Phase), Vec<SliceSample>> = BTreeMap::new();
        for s in loaded {
            let s = s?;
            groups
                .entry((s.subject_id.clone(), s.phase))
                .or_default()
                .push(s);
        }
        let volumes = groups
            .into_iter()
            .map(|((subject_id, phase), mut slices)| {
                slices.sort_by_key(|s| s.slice_index);
                VolumeSlices {
                    subject_id,
                    phase,
                    slices,
                }
            })
            .collect();
        Ok(Self { volumes })
    }

    /// Distinct subject ids, sorted.
    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.volumes.iter().map(|v| v.subject_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn volumes_of<'a>(&'a self, subjects: &[String]) -> Vec<&'a VolumeSlices> {
        let keep: HashSet<&String> = subjects.iter().collect();
        self.volumes
            .iter()
            .filter(|v| keep.contains(&v.subject_id))
            .collect()
    }

    pub fn slices_of<'a>(&'a self, subjects: &[String]) -> Vec<&'a SliceSample> {
        self.volumes_of(subjects)
            .into_iter()
            .flat_map(|v| v.slices.iter())
            .collect()
    }

    pub fn slice_count(&self) -> usize {
        self.volumes.iter().map(|v| v.slices.len()).sum()
    }
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = fs::File::open(path).at(path)?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(f));
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

fn write_slice_file(path: &Path, s: &SliceSample) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + s.image.len() * 5);
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(s.image.height as u32).at(path)?;
    buf.write_u32::<LittleEndian>(s.image.width as u32).at(path)?;
    for &v in &s.image.data {
        buf.write_f32::<LittleEndian>(v).at(path)?;
    }
    buf.extend_from_slice(&s.labels.data);
    write_atomic(path, &buf)
}

fn read_slice_file(path: &Path) -> Result<(Grid2<f32>, Grid2<u8>)> {
    let bytes = fs::read(path).at(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a slice file"));
    }
    let mut r = &bytes[4..];
    let h = r.read_u32::<LittleEndian>().at(path)? as usize;
    let w = r.read_u32::<LittleEndian>().at(path)? as usize;
    let n = h * w;
    if r.len() != n * 5 {
        return Err(bad("truncated slice file"));
    }
    let mut image = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut image).at(path)?;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels).at(path)?;
    Ok((Grid2::new(h, w, image)?, Grid2::new(h, w, labels)?))
}

/// Write via a temporary sibling and rename, so readers never see a
/// partially written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

fn source_hash(dir: &Path, cfg: &PreprocessConfig, map: &LabelMap) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(map.0);
    for f in subject_files(dir)? {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let bytes = fs::read(&f).at(&f)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

enum SubjectOutcome {
    Fresh(Vec<ManifestRow>),
    Reused(Vec<ManifestRow>),
    Failed(String),
}

fn prepare_subject(
    dir: &Path,
    cache: &Path,
    cfg: &PreprocessConfig,
    map: &LabelMap,
    previous: &[ManifestRow],
) -> Result<SubjectOutcome> {
    let subject = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let hash = source_hash(dir, cfg, map)?;
    if !previous.is_empty()
        && previous.iter().all(|r| r.source_hash == hash && cache.join(&r.file).is_file())
    {
        return Ok(SubjectOutcome::Reused(previous.to_vec()));
    }
    let mut rows = Vec::new();
    for v in load_acdc_subject(dir, map)? {
        let p = preprocess_volume(&v, cfg)?;
        for s in extract_slices(&p, cfg.z_mode) {
            let file = format!("{subject}/{}_{:03}.bin", s.phase, s.slice_index);
            write_slice_file(&cache.join(&file), &s)?;
            rows.push(ManifestRow {
                subject: subject.clone(),
                phase: s.phase,
                slice: s.slice_index,
                z_rv: s.z.0[0],
                z_myo: s.z.0[1],
                z_lv: s.z.0[2],
                file,
                source_hash: hash.clone(),
            });
        }
    }
    Ok(SubjectOutcome::Fresh(rows))
}

/// Preprocess every subject under `root` into `<out>/cache`. Subjects that
/// fail to load are reported and skipped; an empty result is fatal.
pub fn prepare_cache(
    root: &Path,
    out: &Path,
    cfg: &PreprocessConfig,
    label_map: &LabelMap,
) -> Result<PrepareReport> {
    label_map.validate()?;
    if !root.is_dir() {
        return Err(Error::Input(format!("dataset root {} does not exist", root.display())));
    }
    let cache = out.join("cache");
    fs::create_dir_all(&cache).at(&cache)?;
    let manifest = cache.join(MANIFEST);
    let mut previous: BTreeMap<String, Vec<ManifestRow>> = BTreeMap::new();
    if manifest.is_file() {
        // an unreadable old manifest only costs a recomputation
        if let Ok(rows) = read_manifest(&manifest) {
            for r in rows {
                previous.entry(r.subject.clone()).or_default().push(r);
            }
        }
    }

    let dirs = list_subjects(root)?;
    if dirs.is_empty() {
        return Err(Error::Input(format!("no subjects found under {}", root.display())));
    }
    let outcomes = par::map_slice(&dirs, |d| {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let prev = previous.get(&name).map(Vec::as_slice).unwrap_or(&[]);
        let outcome = prepare_subject(d, &cache, cfg, label_map, prev)
            .unwrap_or_else(|e| SubjectOutcome::Failed(e.to_string()));
        (name, outcome)
    });

    let mut report = PrepareReport {
        manifest: manifest.clone(),
        ..Default::default()
    };
    let mut rows = Vec::new();
    for (name, outcome) in outcomes {
        match outcome {
            SubjectOutcome::Fresh(r) => {
                report.processed.push(name);
                rows.extend(r);
            }
            SubjectOutcome::Reused(r) => {
                report.skipped.push(name);
                rows.extend(r);
            }
            SubjectOutcome::Failed(msg) => report.failed.push((name, msg)),
        }
    }
    if rows.is_empty() {
        return Err(Error::Input(format!(
            "no usable subjects under {} ({} failed)",
            root.display(),
            report.failed.len()
        )));
    }
    rows.sort_by(|a, b| (&a.subject, a.phase, a.slice).cmp(&(&b.subject, b.phase, b.slice)));
    let volumes: HashSet<(&str, Phase)> = rows.iter().map(|r| (r.subject.as_str(), r.phase)).collect();
    report.volumes = volumes.len();
    report.slices = rows.len();

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    write_atomic(&manifest, &bytes)?;
    Ok(report)
}
