use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::cache::write_atomic;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{aggregate, compare, read_records, DiceRecord};
use crate::networks::{Architecture, Variant};

use super::grid::{DICE_RECORDS, DONE, FAILED};
use super::{fraction_code, Cell};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl Cell {
    /// Inverse of [`Cell::run_id`].
    pub fn parse_run_id(id: &str) -> Option<Cell> {
        let parts: Vec<&str> = id.split("__").collect();
        let [arch, variant, f, r] = parts.as_slice() else {
            return None;
        };
        let fraction = f.strip_prefix('f')?.parse::<u64>().ok()? as f64 / 1000.0;
        Some(Cell {
            architecture: arch.parse().ok()?,
            variant: variant.parse().ok()?,
            fraction,
            repeat: r.strip_prefix('r')?.parse().ok()?,
        })
    }
}

#[derive(Default)]
struct Slot {
    records: Vec<DiceRecord>,
    failed: bool,
}

type Key = (Architecture, String, Variant);

fn collect(cells_dir: &Path) -> Result<BTreeMap<Key, Slot>> {
    let mut slots: BTreeMap<Key, Slot> = BTreeMap::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(cells_dir)
        .at(cells_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let Some(cell) = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(Cell::parse_run_id)
        else {
            continue;
        };
        let slot = slots
            .entry((cell.architecture, fraction_code(cell.fraction), cell.variant))
            .or_default();
        if dir.join(DONE).is_file() {
            slot.records.extend(read_records(&dir.join(DICE_RECORDS))?);
        } else if dir.join(FAILED).is_file() {
            slot.failed = true;
        }
    }
    Ok(slots)
}

#[derive(Serialize)]
struct CsvRow {
    architecture: String,
    fraction: f64,
    variant: String,
    status: &'static str,
    mean: Option<f64>,
    std: Option<f64>,
    n: usize,
    p_value: Option<f64>,
    significant: bool,
    best: bool,
}

struct Rendered {
    text: String,
    csv: CsvRow,
}

const GROUPS: [(&str, usize); 4] = [
    ("", 1),
    ("Concatenation (raw)", 3),
    ("Concatenation (MLP)", 3),
    ("FiLM", 2),
];
const SUBHEAD: [&str; 9] = [
    "Baseline", "Early", "Middle", "Late", "Early", "Middle", "Late", "Decoder", "Late",
];

/// Write `<out>/reports/<arch>.txt` and `<arch>.csv` for every architecture
/// with completed cells under `<out>/cells`.
pub fn report(output: &Path) -> Result<ReportSummary> {
    let slots = collect(&output.join("cells"))?;
    if slots.is_empty() {
        return Err(Error::Input(format!(
            "no grid cells found under {}",
            output.join("cells").display()
        )));
    }
    let reports = output.join("reports");
    let mut summary = ReportSummary::default();
    for arch in Architecture::ALL {
        let fractions: BTreeSet<&String> = slots
            .keys()
            .filter(|(a, _, _)| *a == arch)
            .map(|(_, f, _)| f)
            .collect();
        if fractions.is_empty() {
            continue;
        }
        let mut rows: Vec<(f64, Vec<Rendered>)> = Vec::new();
        for f in fractions.iter().rev() {
            let fraction = f.parse::<u64>().unwrap_or(0) as f64 / 1000.0;
            rows.push((fraction, render_row(arch, f, fraction, &slots, &mut summary.warnings)?));
        }
        let (txt, csv) = (reports.join(format!("{arch}.txt")), reports.join(format!("{arch}.csv")));
        write_atomic(&txt, layout_text(arch, &rows).as_bytes())?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for (_, cells) in &rows {
            for c in cells {
                w.serialize(&c.csv)?;
            }
        }
        write_atomic(&csv, &w.into_inner().map_err(|e| Error::Input(e.to_string()))?)?;
        summary.files.push(txt);
        summary.files.push(csv);
    }
    Ok(summary)
}

fn render_row(
    arch: Architecture,
    fcode: &str,
    fraction: f64,
    slots: &BTreeMap<Key, Slot>,
    warnings: &mut Vec<String>,
) -> Result<Vec<Rendered>> {
    let get = |v: Variant| slots.get(&(arch, fcode.to_string(), v));
    fn usable(s: Option<&Slot>) -> Option<&Vec<DiceRecord>> {
        s.filter(|s| !s.failed && !s.records.is_empty()).map(|s| &s.records)
    }
    let baseline = usable(get(Variant::Baseline));
    if baseline.is_none() {
        warnings.push(format!(
            "{arch} at fraction {fraction}: no completed baseline, row has no significance markers"
        ));
    }
    let mut stats: Vec<Option<(f64, f64)>> = Vec::with_capacity(9);
    for v in Variant::ALL {
        stats.push(match usable(get(v)) {
            Some(r) => Some(aggregate(r)?),
            None => None,
        });
    }
    let mut best: Option<usize> = None;
    for (i, s) in stats.iter().enumerate() {
        if let Some((m, _)) = s {
            if best.map_or(true, |b| *m > stats[b].expect("set").0) {
                best = Some(i);
            }
        }
    }

    let mut out = Vec::with_capacity(9);
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let slot = get(v);
        let mut csv = CsvRow {
            architecture: arch.to_string(),
            fraction,
            variant: v.to_string(),
            status: "missing",
            mean: None,
            std: None,
            n: 0,
            p_value: None,
            significant: false,
            best: best == Some(i),
        };
        let text = match (slot, stats[i]) {
            (Some(s), _) if s.failed => {
                csv.status = "failed";
                "—".to_string()
            }
            (Some(s), Some((m, sd))) => {
                csv.status = "ok";
                csv.mean = Some(m);
                csv.std = Some(sd);
                csv.n = s.records.len();
                if let (Some(b), true) = (baseline, v != Variant::Baseline) {
                    if let Ok(c) = compare(v.id(), &s.records, Variant::Baseline.id(), b) {
                        csv.p_value = Some(c.p_value);
                        csv.significant = c.significant;
                    }
                }
                let mut t = format!("{m:.3}±{sd:.3}");
                if csv.significant {
                    t.push('*');
                }
                if csv.best {
                    t = format!("[{t}]");
                }
                t
            }
            _ => "·".to_string(),
        };
        out.push(Rendered { text, csv });
    }
    Ok(out)
}

fn layout_text(arch: Architecture, rows: &[(f64, Vec<Rendered>)]) -> String {
    let width = rows
        .iter()
        .flat_map(|(_, r)| r.iter().map(|c| c.text.chars().count()))
        .chain(SUBHEAD.iter().map(|s| s.len()))
        .max()
        .unwrap_or(8)
        .max(8);
    let first = 10;
    let mut s = format!("{arch}: mean Dice ± std over test volumes (pooled repeats)\n\n");
    let mut line = format!("{:<first$}", "");
    for (name, span) in GROUPS {
        let span_w = span * (width + 2) - 2;
        line.push_str(&format!("{:^span_w$}  ", name));
    }
    s.push_str(line.trim_end());
    s.push('\n');
    let mut line = format!("{:<first$}", "Fraction");
    for h in SUBHEAD {
        line.push_str(&format!("{h:>width$}  "));
    }
    s.push_str(line.trim_end());
    s.push('\n');
    for (f, cells) in rows {
        let mut line = format!("{:<first$}", format!("{}%", f * 100.0));
        for c in cells {
            let pad = width.saturating_sub(c.text.chars().count());
            line.push_str(&" ".repeat(pad));
            line.push_str(&c.text);
            line.push_str("  ");
        }
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s.push_str(
        "\n* significant vs. baseline (paired t-test, Bonferroni over 8 comparisons)\n\
         [ ] best in row   — failed   · not run\n",
    );
    s
}
