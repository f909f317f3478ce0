use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::cache::{write_atomic, MANIFEST};
use crate::data::synthetic::{generate_synthetic_dataset, write_acdc_layout};
use crate::data::{
    make_splits, prepare_cache, subsample_training, PrepareReport, PreparedDataset, SplitPlan,
};
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{
    aggregate, evaluate_model, evaluate_model_with_z, shuffled_z, write_records, DiceRecord,
};
use crate::networks::{load_checkpoint, save_checkpoint, SegmentationModel};
use crate::par;
use crate::training::{progress_line, train, TrainConfig};

use super::{Cell, CellFilter, DatasetKind, ExperimentConfig};

pub const DONE: &str = "done.json";
pub const FAILED: &str = "failed.txt";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.csv";
pub const DICE_RECORDS: &str = "dice_records.csv";

/// Marker written last in a cell directory; its presence means the cell is
/// complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub run_id: String,
    pub cell: Cell,
    pub seed: u64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub test_volumes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Completed(CellSummary),
    Skipped(CellSummary),
    Failed(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridSummary {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Build the preprocessing cache for the configured dataset. Synthetic
/// subjects are generated into `data.root` first if it holds none.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PrepareReport> {
    let root = &cfg.data.root;
    if cfg.data.kind == DatasetKind::Synthetic {
        let empty = !root.is_dir()
            || crate::data::acdc::list_subjects(root).map(|s| s.is_empty()).unwrap_or(true);
        if empty {
            fs::create_dir_all(root).at(root)?;
            write_acdc_layout(root, &generate_synthetic_dataset(&cfg.data.synthetic))?;
        }
    }
    prepare_cache(root, &cfg.output, &cfg.data.preprocess, &cfg.data.label_map)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<PreparedDataset> {
    let cache = cfg.cache_dir();
    if !cache.join(MANIFEST).is_file() {
        return Err(Error::Input(format!(
            "no preprocessing cache at {}; run prepare-data first",
            cache.display()
        )));
    }
    PreparedDataset::load(&cache)
}

pub fn cell_dir(cfg: &ExperimentConfig, cell: &Cell) -> PathBuf {
    cfg.cells_dir().join(cell.run_id())
}

pub(crate) fn read_summary(dir: &Path) -> Option<CellSummary> {
    let bytes = fs::read(dir.join(DONE)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Train and evaluate one cell, writing its artifacts. Completed cells
/// are returned as skipped without recomputation.
pub fn run_cell(
    cfg: &ExperimentConfig,
    dataset: &PreparedDataset,
    plans: &[SplitPlan],
    cell: &Cell,
    verbose: bool,
) -> Result<CellStatus> {
    let dir = cell_dir(cfg, cell);
    if let Some(s) = read_summary(&dir) {
        return Ok(CellStatus::Skipped(s));
    }
    let plan = plans
        .get(cell.repeat)
        .ok_or_else(|| Error::Config(format!("no split plan for repeat {}", cell.repeat)))?;
    let plan = subsample_training(plan, cell.fraction)?;
    let train_slices = dataset.slices_of(&plan.effective_train_subjects);
    let val = dataset.volumes_of(&plan.val_subjects);
    let test = dataset.volumes_of(&plan.test_subjects);

    let seed = cell.seed(cfg.seed);
    let mut model =
        SegmentationModel::<f32>::new(cfg.backbone, cell.variant.fusion(cell.architecture), seed)?;
    let tcfg = TrainConfig { seed, ..cfg.train };
    let prefix = format!("[{}] ", cell.run_id());
    let history = train(&mut model, &train_slices, &val, &tcfg, |r| {
        if verbose {
            println!("{}", progress_line(&prefix, r));
        }
    })?;
    let records = evaluate_model(&model, &test, cell.repeat)?;
    let (mean_dice, std_dice) = aggregate(&records)?;

    fs::create_dir_all(&dir).at(&dir)?;
    let _ = fs::remove_file(dir.join(FAILED));
    save_checkpoint(&dir.join(CHECKPOINT), &model, history.best_epoch)?;
    history.write_csv(&dir.join(HISTORY))?;
    write_records(&dir.join(DICE_RECORDS), &records)?;
    let summary = CellSummary {
        run_id: cell.run_id(),
        cell: *cell,
        seed,
        best_epoch: history.best_epoch,
        stopped_epoch: history.stopped_epoch,
        mean_dice,
        std_dice,
        test_volumes: records.len(),
    };
    write_atomic(&dir.join(DONE), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(CellStatus::Completed(summary))
}

/// Re-evaluate a completed cell's checkpoint on its test subjects. With
/// `shuffle_seed`, conditioning vectors are permuted across the test
/// volumes first (the conditioning ablation).
pub fn evaluate_cell(
    cfg: &ExperimentConfig,
    dataset: &PreparedDataset,
    cell: &Cell,
    shuffle_seed: Option<u64>,
) -> Result<Vec<DiceRecord>> {
    let path = cell_dir(cfg, cell).join(CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Input(format!("no checkpoint at {}", path.display())));
    }
    let (model, _) = load_checkpoint(&path)?;
    let plans = make_splits(
        &dataset.subjects(),
        cfg.grid.repeats.max(cell.repeat + 1),
        cfg.grid.split_ratios,
        cfg.seed,
    )?;
    let test = dataset.volumes_of(&plans[cell.repeat].test_subjects);
    match shuffle_seed {
        None => evaluate_model(&model, &test, cell.repeat),
        Some(s) => evaluate_model_with_z(&model, &test, &shuffled_z(&test, s), cell.repeat),
    }
}

/// Run every configured cell accepted by `filter`, at most `jobs` at a
/// time. A failing cell is recorded in its directory and in the summary;
/// the remaining cells still run.
pub fn run_grid(
    cfg: &ExperimentConfig,
    filter: &CellFilter,
    jobs: usize,
    verbose: bool,
) -> Result<GridSummary> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let plans = make_splits(
        &dataset.subjects(),
        cfg.grid.repeats,
        cfg.grid.split_ratios,
        cfg.seed,
    )?;
    let cells: Vec<Cell> = cfg.cells().into_iter().filter(|c| filter.matches(c)).collect();
    let outcomes = par::with_jobs(jobs, || {
        par::map_slice(&cells, |c| {
            let status = run_cell(cfg, &dataset, &plans, c, verbose)
                .unwrap_or_else(|e| CellStatus::Failed(e.to_string()));
            if let CellStatus::Failed(msg) = &status {
                let dir = cell_dir(cfg, c);
                if fs::create_dir_all(&dir).is_ok() {
                    let _ = write_atomic(&dir.join(FAILED), msg.as_bytes());
                }
            }
            (c.run_id(), status)
        })
    });
    let mut summary = GridSummary::default();
    for (id, status) in outcomes {
        match status {
            CellStatus::Completed(_) => summary.completed.push(id),
            CellStatus::Skipped(_) => summary.skipped.push(id),
            CellStatus::Failed(msg) => summary.failed.push((id, msg)),
        }
    }
    Ok(summary)
}
