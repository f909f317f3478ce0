//! Configuration-driven orchestration of the architecture x variant x
//! fraction x repeat grid.
//!
//! Configuration is TOML:
//!
//! ```toml
//! seed = 0
//! output = "runs/acdc"
//!
//! [data]
//! kind = "acdc"            # or "synthetic"
//! root = "data/acdc/training"
//! label_map = [0, 1, 2, 3]
//!
//! [data.preprocess]
//! target_spacing = 1.37
//! height = 224
//! width = 224
//! z_mode = "per_slice"     # or "per_volume"
//!
//! [data.synthetic]         # used when kind = "synthetic"
//! n_subjects = 12
//!
//! [grid]
//! architectures = ["unet", "encoder_decoder"]
//! variants = ["baseline", "film_decoder"]    # default: all nine
//! fractions = [1.0, 0.25, 0.06, 0.015]
//! repeats = 3
//!
//! [train]                  # any TrainConfig field
//! learning_rate = 1e-4
//!
//! [backbone]               # any BackboneConfig field
//! base_channels = 32
//! ```

mod grid;
mod report;

pub use grid::{
    cell_dir, evaluate_cell, load_dataset, prepare_data, run_cell, run_grid, CellStatus,
    CellSummary, GridSummary, CHECKPOINT, DICE_RECORDS, DONE, FAILED, HISTORY,
};
pub use report::{report, ReportSummary};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::splits::{SPLIT_RATIOS, TRAINING_FRACTIONS};
use crate::data::{LabelMap, PreprocessConfig, SyntheticConfig};
use crate::error::{Error, IoContext, Result};
use crate::networks::{Architecture, BackboneConfig, Variant};
use crate::seeding;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Acdc,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// ACDC root; for synthetic data, where the generated subjects live.
    pub root: PathBuf,
    pub label_map: LabelMap,
    pub preprocess: PreprocessConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Acdc,
            root: PathBuf::from("data"),
            label_map: LabelMap::default(),
            preprocess: PreprocessConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub architectures: Vec<Architecture>,
    pub variants: Vec<Variant>,
    pub fractions: Vec<f64>,
    pub repeats: usize,
    pub split_ratios: (f64, f64, f64),
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            architectures: Architecture::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            fractions: TRAINING_FRACTIONS.to_vec(),
            repeats: 3,
            split_ratios: SPLIT_RATIOS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs"),
            data: DataConfig::default(),
            grid: GridConfig::default(),
            train: TrainConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.architectures.is_empty() || g.variants.is_empty() || g.fractions.is_empty() {
            return Err(Error::Config(
                "grid selections (architectures, variants, fractions) must be nonempty".into(),
            ));
        }
        if g.repeats == 0 {
            return Err(Error::Config("grid.repeats must be at least 1".into()));
        }
        if let Some(f) = g.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        self.data.label_map.validate()?;
        self.train.validate()?;
        self.backbone.validate()?;
        self.backbone
            .check_input(self.data.preprocess.height, self.data.preprocess.width)?;
        Ok(())
    }

    /// Set one dotted key (`train.learning_rate`, `grid.fractions`, ...)
    /// from a TOML literal; bare words are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, sections) = parts.split_last().expect("split yields one part");
        let unknown = || Error::Config(format!("unknown configuration key {key}"));
        let mut table = root.as_table_mut().expect("config serializes to a table");
        for p in sections {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(unknown)?;
        }
        if !table.contains_key(*last) {
            return Err(unknown());
        }
        table.insert(last.to_string(), parsed);
        let next: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &architecture in &self.grid.architectures {
            for &variant in &self.grid.variants {
                for &fraction in &self.grid.fractions {
                    for repeat in 0..self.grid.repeats {
                        out.push(Cell {
                            architecture,
                            variant,
                            fraction,
                            repeat,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn cells_dir(&self) -> PathBuf {
        self.output.join("cells")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output.join("cache")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output.join("reports")
    }
}

/// One (architecture, variant, fraction, repeat) run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub architecture: Architecture,
    pub variant: Variant,
    pub fraction: f64,
    pub repeat: usize,
}

/// Fraction as thousandths, e.g. 0.015 -> "0015".
pub fn fraction_code(f: f64) -> String {
    format!("{:04}", (f * 1000.0).round() as u64)
}

impl Cell {
    /// Stable identifier, e.g. `unet__film_decoder__f0060__r1`.
    pub fn run_id(&self) -> String {
        format!(
            "{}__{}__f{}__r{}",
            self.architecture,
            self.variant,
            fraction_code(self.fraction),
            self.repeat
        )
    }

    /// Seed for initialization and data order, independent of which other
    /// cells exist.
    pub fn seed(&self, global: u64) -> u64 {
        seeding::derive(
            global,
            &[
                self.architecture.id(),
                self.variant.id(),
                &fraction_code(self.fraction),
                &self.repeat.to_string(),
            ],
        )
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.run_id())
    }
}

/// `key=value[,key=value...]` where a value may list `|`-separated
/// alternatives. Keys: `arch`, `variant`, `fraction`, `repeat`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellFilter {
    terms: BTreeMap<String, Vec<String>>,
}

impl CellFilter {
    pub fn parse(expr: &str) -> Result<Self> {
        let mut terms = BTreeMap::new();
        for part in expr.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("filter term {part:?} lacks '='")))?;
            let key = match k.trim() {
                "arch" | "architecture" => "arch",
                "variant" => "variant",
                "fraction" => "fraction",
                "repeat" => "repeat",
                other => return Err(Error::Config(format!("unknown filter key {other:?}"))),
            };
            let alts: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
            for a in &alts {
                match key {
                    "arch" => {
                        a.parse::<Architecture>()?;
                    }
                    "variant" => {
                        a.parse::<Variant>()?;
                    }
                    "fraction" => {
                        a.parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad fraction {a:?}")))?;
                    }
                    _ => {
                        a.parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad repeat {a:?}")))?;
                    }
                }
            }
            terms.insert(key.to_string(), alts);
        }
        Ok(Self { terms })
    }

    pub fn matches(&self, c: &Cell) -> bool {
        self.terms.iter().all(|(k, alts)| {
            alts.iter().any(|a| match k.as_str() {
                "arch" => a == c.architecture.id(),
                "variant" => a == c.variant.id(),
                "fraction" => a.parse::<f64>().is_ok_and(|f| (f - c.fraction).abs() < 1e-9),
                _ => a.parse::<usize>().is_ok_and(|r| r == c.repeat),
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_has_216_cells_with_unique_ids() {
        let cfg = ExperimentConfig::default();
        let cells = cfg.cells();
        assert_eq!(cells.len(), 216);
        let ids: std::collections::HashSet<String> = cells.iter().map(Cell::run_id).collect();
        assert_eq!(ids.len(), 216);
        let seeds: std::collections::HashSet<u64> = cells.iter().map(|c| c.seed(0)).collect();
        assert_eq!(seeds.len(), 216);
    }

    #[test]
    fn restricted_grid() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            [grid]
            architectures = ["encoder_decoder"]
            variants = ["baseline", "film_decoder"]
            fractions = [1.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.cells().len(), 6);
    }

    #[test]
    fn run_id_format() {
        let c = Cell {
            architecture: Architecture::Unet,
            variant: Variant::FilmDecoder,
            fraction: 0.06,
            repeat: 1,
        };
        assert_eq!(c.run_id(), "unet__film_decoder__f0060__r1");
        assert_eq!(fraction_code(0.015), "0015");
        assert_eq!(fraction_code(1.0), "1000");
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("train.learning_rate", "0.001").unwrap();
        cfg.set("backbone.base_channels", "8").unwrap();
        cfg.set("data.kind", "synthetic").unwrap();
        cfg.set("grid.fractions", "[1.0, 0.25]").unwrap();
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.backbone.base_channels, 8);
        assert_eq!(cfg.data.kind, DatasetKind::Synthetic);
        assert_eq!(cfg.grid.fractions, vec![1.0, 0.25]);
        assert!(cfg.set("train.nope", "1").is_err());
        assert!(cfg.set("train.patience", "0").is_err());
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn filters() {
        let f = CellFilter::parse("arch=unet,variant=baseline|film_late,fraction=0.25").unwrap();
        let cells = ExperimentConfig::default().cells();
        let kept: Vec<&Cell> = cells.iter().filter(|c| f.matches(c)).collect();
        assert_eq!(kept.len(), 6);
        assert!(CellFilter::parse("colour=red").is_err());
        assert!(CellFilter::parse("variant=film_middle").is_err());
        assert!(CellFilter::parse("").unwrap().matches(&cells[0]));
    }
}
