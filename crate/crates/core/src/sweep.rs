//! Cross-validated sweep over initializations, modality modes and label
//! fractions, with an on-disk run ledger and rendered reports.
//!
//! Ledger: `<out>/ledger/<cell>.json` per finished cell. A worker claims a
//! cell by atomically creating `<cell>.claim`; finished or failed cells
//! release their claim. Pretraining checkpoints are cached per fold under
//! `<out>/pretrain/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{PipelineConfig, FRACTION_GRID};
use crate::dataset::{Crop, CropSet};
use crate::error::{Error, Result};
use crate::format::{read_json, write_json};
use crate::metrics::{MeanStd, MetricsReport};
use crate::model::{InitMode, ModalityMode, TissueModel};
use crate::train::{self, crops_of, labeled, make_splits, Fold, SplitPlan};
use crate::{par, seed};

pub const LEDGER_DIR: &str = "ledger";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const REPORT_DIR: &str = "report";
const SWEEP_META: &str = "sweep.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub init: InitMode,
    pub mode: ModalityMode,
    /// Label fraction in percent.
    pub percent: u32,
    pub fold: usize,
}

impl CellKey {
    pub fn name(&self) -> String {
        format!("{}.{}.p{:03}.fold{}", self.init.name(), self.mode.name(), self.percent, self.fold)
    }

    pub fn fraction(&self) -> f64 {
        f64::from(self.percent) / 100.0
    }
}

fn percent(f: f64) -> u32 {
    (f * 100.0).round() as u32
}

/// Every cell of the method grid (dual mode) and the modality grid, sorted.
pub fn sweep_cells(cfg: &PipelineConfig) -> Vec<CellKey> {
    let s = &cfg.sweep;
    let mut cells = BTreeSet::new();
    for fold in 0..cfg.train.folds {
        for &init in &s.inits {
            for &f in &s.fractions {
                cells.insert(CellKey {
                    init,
                    mode: ModalityMode::Dual,
                    percent: percent(f),
                    fold,
                });
            }
        }
        for &mode in &s.modality_modes {
            for &f in &s.modality_fractions {
                cells.insert(CellKey {
                    init: s.modality_init,
                    mode,
                    percent: percent(f),
                    fold,
                });
            }
        }
    }
    cells.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: CellKey,
    pub config_hash: String,
    pub state: CellState,
    pub seed: u64,
    pub learning_rate: f64,
    pub labeled_train: usize,
    pub best_epoch: usize,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepMeta {
    modality_init: InitMode,
    config: PipelineConfig,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<String>,
}

pub struct Ledger {
    dir: PathBuf,
}

impl Ledger {
    pub fn open(dir: &Path) -> Result<Self> {
        crate::format::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn record_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.json"))
    }

    fn claim_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.claim"))
    }

    /// Remove claims left by an interrupted run.
    pub fn clear_stale_claims(&self) -> Result<usize> {
        let mut n = 0;
        for entry in std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().is_some_and(|e| e == "claim") {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Atomic claim; `false` when another worker holds it.
    pub fn claim(&self, name: &str) -> Result<bool> {
        let path = self.claim_path(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn complete(&self, record: &CellRecord) -> Result<()> {
        let name = record.cell.name();
        write_json(&self.record_path(&name), record)?;
        let claim = self.claim_path(&name);
        std::fs::remove_file(&claim).map_err(|e| Error::io(&claim, e))
    }

    pub fn get(&self, name: &str) -> Result<Option<CellRecord>> {
        let p = self.record_path(name);
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    /// All records, sorted by cell.
    pub fn records(&self) -> Result<Vec<CellRecord>> {
        let mut out = Vec::new();
        if !self.dir.exists() {
            return Ok(out);
        }
        for entry in std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            let is_record = path.extension().is_some_and(|e| e == "json") && path.file_name().is_some_and(|n| n != SWEEP_META);
            if is_record {
                out.push(read_json::<CellRecord>(&path)?);
            }
        }
        out.sort_by_key(|r| r.cell);
        Ok(out)
    }

    fn modality_init(&self) -> InitMode {
        read_json::<SweepMeta>(&self.dir.join(SWEEP_META))
            .map(|m| m.modality_init)
            .unwrap_or(InitMode::ContrastiveCheckpoint)
    }
}

fn pretrain_path(out: &Path, fold: usize) -> PathBuf {
    out.join(PRETRAIN_DIR).join(format!("fold{fold}.ckpt"))
}

/// Load a cached pretraining checkpoint for `fold` or train one.
pub fn ensure_pretrain(cfg: &PipelineConfig, crops: &[Crop], fold: &Fold, out: &Path) -> Result<PathBuf> {
    let path = pretrain_path(out, fold.index);
    let hash = cfg.cell_hash();
    if path.exists() && checkpoint::load(&path).and_then(|c| c.check_config_hash(&hash)).is_ok() {
        return Ok(path);
    }
    let pool = crops_of(crops, &fold.train);
    fold.check_leakage(pool.iter().copied())?;
    let run_seed = seed::derive(cfg.seed, "pretrain", fold.index as u64);
    let outcome = train::pretrain(&pool, cfg.model.encoder(), &cfg.objectives, &cfg.train, run_seed)?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in outcome.losses.iter().enumerate() {
        writeln!(curve, "{},{l:.6}", e + 1).unwrap();
    }
    let meta = serde_json::json!({ "fold": fold.index, "pool": pool.len(), "steps": outcome.steps, "losses": outcome.losses });
    let ckpt = Checkpoint::from_encoders(&outcome.model, run_seed).with_config_hash(hash).with_meta(meta);
    checkpoint::save(&ckpt, &path)?;
    let curve_path = path.with_extension("loss.csv");
    std::fs::write(&curve_path, curve).map_err(|e| Error::io(&curve_path, e))?;
    Ok(path)
}

/// Train and evaluate one cell.
pub fn run_cell(cfg: &PipelineConfig, crops: &[Crop], fold: &Fold, cell: CellKey, pretrained: Option<&Path>) -> Result<CellRecord> {
    let train_all = crops_of(crops, &fold.train);
    let val = crops_of(crops, &fold.val);
    let test = crops_of(crops, &fold.test);
    // The labeled subset is shared by every init and mode at this fraction.
    let subset = train::subsample_train(&labeled(&train_all), cell.fraction(), seed::derive(cfg.seed, "subsample", fold.index as u64))?;
    fold.check_leakage(subset.iter().copied().chain(val.iter().copied()))?;
    let run_seed = seed::derive(cfg.seed, &format!("finetune.{}.p{:03}", cell.mode.name(), cell.percent), fold.index as u64);
    let ckpt = match cell.init {
        InitMode::ContrastiveCheckpoint => pretrained,
        InitMode::GenericPretrained => cfg.train.generic_weights.as_deref(),
        InitMode::Scratch => None,
    };
    let model = TissueModel::init_weights(cell.init, cfg.model.encoder(), cfg.model.head(cell.mode), run_seed, ckpt)?;
    let mut outcome = train::finetune(model, &subset, &val, &cfg.train, run_seed)?;
    let metrics = train::evaluate(&mut outcome.model, &test, cfg.train.batch_size)?;
    Ok(CellRecord {
        cell,
        config_hash: cfg.cell_hash(),
        state: CellState::Done,
        seed: run_seed,
        learning_rate: cfg.train.finetune_lr(),
        labeled_train: subset.len(),
        best_epoch: outcome.best_epoch,
        metrics: Some(metrics),
        error: None,
    })
}

fn failed(cfg: &PipelineConfig, cell: CellKey, e: &Error) -> CellRecord {
    CellRecord {
        cell,
        config_hash: cfg.cell_hash(),
        state: CellState::Failed,
        seed: 0,
        learning_rate: cfg.train.finetune_lr(),
        labeled_train: 0,
        best_epoch: 0,
        metrics: None,
        error: Some(e.to_string()),
    }
}

/// Run every pending cell. Cells already done under the same cell hash are
/// skipped; failed cells are retried.
pub fn run_sweep(cfg: &PipelineConfig, crops: &CropSet, out: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    let plan = make_splits(&crops.insertions, cfg.train.folds, seed::derive(cfg.seed, "splits", 0))?;
    crate::format::create_dir_all(out)?;
    write_json(&out.join("splits.json"), &plan)?;
    let ledger = Ledger::open(&out.join(LEDGER_DIR))?;
    ledger.clear_stale_claims()?;
    write_json(
        &ledger.dir.join(SWEEP_META),
        &SweepMeta {
            modality_init: cfg.sweep.modality_init,
            config: cfg.clone(),
        },
    )?;
    let hash = cfg.cell_hash();
    let mut outcome = SweepOutcome::default();
    let mut pending = Vec::new();
    for cell in sweep_cells(cfg) {
        match ledger.get(&cell.name())? {
            Some(r) if r.state == CellState::Done && r.config_hash == hash => outcome.skipped.push(cell.name()),
            _ => pending.push(cell),
        }
    }

    let results = par::with_workers(cfg.sweep.workers, || run_pending(cfg, &crops.crops, &plan, &pending, out, &ledger));
    for (cell, r) in pending.iter().zip(results) {
        match r? {
            None => outcome.skipped.push(cell.name()),
            Some(CellState::Done) => outcome.executed.push(cell.name()),
            Some(CellState::Failed) => {
                outcome.executed.push(cell.name());
                outcome.failed.push(cell.name());
            }
        }
    }
    Ok(outcome)
}

fn run_pending(cfg: &PipelineConfig, crops: &[Crop], plan: &SplitPlan, pending: &[CellKey], out: &Path, ledger: &Ledger) -> Vec<Result<Option<CellState>>> {
    let folds: BTreeSet<usize> = pending
        .iter()
        .filter(|c| c.init == InitMode::ContrastiveCheckpoint)
        .map(|c| c.fold)
        .collect();
    let folds: Vec<usize> = folds.into_iter().collect();
    let pretrained: BTreeMap<usize, std::result::Result<PathBuf, String>> = folds
        .iter()
        .copied()
        .zip(par::map_slice(&folds, |&f| {
            ensure_pretrain(cfg, crops, &plan.folds[f], out).map_err(|e| format!("pretraining fold {f}: {e}"))
        }))
        .collect();

    par::map_slice(pending, |&cell| -> Result<Option<CellState>> {
        let name = cell.name();
        if !ledger.claim(&name)? {
            return Ok(None);
        }
        let fold = &plan.folds[cell.fold];
        let result = match (cell.init, pretrained.get(&cell.fold)) {
            (InitMode::ContrastiveCheckpoint, Some(Err(msg))) => Err(Error::Checkpoint(msg.clone())),
            (_, p) => run_cell(cfg, crops, fold, cell, p.and_then(|r| r.as_ref().ok()).map(PathBuf::as_path)),
        };
        let record = result.unwrap_or_else(|e| failed(cfg, cell, &e));
        ledger.complete(&record)?;
        Ok(Some(record.state))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reports {
    pub runs_csv: String,
    pub table_md: String,
    pub method_curve_csv: String,
    pub modality_curve_csv: String,
    pub failed_cells: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

type Groups = BTreeMap<(u32, String), Vec<(f64, f64)>>;

/// Render reports from ledger records alone.
pub fn render_reports(records: &[CellRecord], modality_init: InitMode) -> Reports {
    let mut runs = String::from("init_mode,modality_mode,fraction,fold,state,weighted_ap,weighted_f1,labeled_train,best_epoch,learning_rate,absent_classes,error\n");
    let mut method: BTreeMap<(u32, InitMode), Vec<(f64, f64)>> = BTreeMap::new();
    let mut modality: Groups = BTreeMap::new();
    let mut failures = Vec::new();
    for r in records {
        let c = &r.cell;
        let m = r.metrics.as_ref();
        let absent = m.map_or_else(String::new, |m| m.absent_classes.iter().map(|c| c.name()).collect::<Vec<_>>().join(" "));
        writeln!(
            runs,
            "{},{},{:.2},{},{},{},{},{},{},{},{},{}",
            c.init.name(),
            c.mode.name(),
            c.fraction(),
            c.fold,
            if r.state == CellState::Done { "done" } else { "failed" },
            fmt_opt(m.map(|m| m.weighted_ap)),
            fmt_opt(m.map(|m| m.weighted_f1)),
            r.labeled_train,
            r.best_epoch,
            r.learning_rate,
            absent,
            csv_field(r.error.as_deref().unwrap_or("")),
        )
        .unwrap();
        let Some(m) = m else {
            failures.push(c.name());
            continue;
        };
        if c.mode == ModalityMode::Dual {
            method.entry((c.percent, c.init)).or_default().push((m.weighted_ap, m.weighted_f1));
        }
        if c.init == modality_init {
            modality.entry((c.percent, c.mode.name().to_string())).or_default().push((m.weighted_ap, m.weighted_f1));
        }
    }

    let stats = |v: &[(f64, f64)]| {
        let ap: Vec<f64> = v.iter().map(|x| x.0).collect();
        let f1: Vec<f64> = v.iter().map(|x| x.1).collect();
        (MeanStd::of(&ap).unwrap(), MeanStd::of(&f1).unwrap())
    };

    let mut table = String::from("| % Training Set | Method | AP | F1 |\n|---|---|---|---|\n");
    for ((p, init), v) in &method {
        let (ap, f1) = stats(v);
        writeln!(table, "| {p}% | {} | {} | {} |", init.display(), ap.display(), f1.display()).unwrap();
    }
    table.push_str("\n| % Training Set | Modality | AP | F1 |\n|---|---|---|---|\n");
    for ((p, mode), v) in &modality {
        let (ap, f1) = stats(v);
        writeln!(table, "| {p}% | {mode} | {} | {} |", ap.display(), f1.display()).unwrap();
    }
    if !failures.is_empty() {
        writeln!(table, "\nFailed cells: {}", failures.join(", ")).unwrap();
    }

    let mut method_curve = String::from("method,fraction,mean_ap,std_ap,folds\n");
    let mut by_method: BTreeMap<InitMode, Vec<(u32, MeanStd)>> = BTreeMap::new();
    for ((p, init), v) in &method {
        by_method.entry(*init).or_default().push((*p, stats(v).0));
    }
    for (init, pts) in &by_method {
        for (p, s) in pts {
            writeln!(method_curve, "{},{:.2},{:.6},{:.6},{}", init.name(), f64::from(*p) / 100.0, s.mean, s.std, s.n).unwrap();
        }
    }
    let mut modality_curve = String::from("modality,fraction,mean_ap,std_ap,folds\n");
    let mut by_mode: BTreeMap<&str, Vec<(u32, MeanStd)>> = BTreeMap::new();
    for ((p, mode), v) in &modality {
        by_mode.entry(mode.as_str()).or_default().push((*p, stats(v).0));
    }
    for (mode, pts) in &by_mode {
        for (p, s) in pts {
            writeln!(modality_curve, "{mode},{:.2},{:.6},{:.6},{}", f64::from(*p) / 100.0, s.mean, s.std, s.n).unwrap();
        }
    }

    Reports {
        runs_csv: runs,
        table_md: table,
        method_curve_csv: method_curve,
        modality_curve_csv: modality_curve,
        failed_cells: failures.len(),
    }
}

/// Render the ledger under `out` into `<out>/report/`.
pub fn write_reports(out: &Path) -> Result<(Reports, usize)> {
    let ledger = Ledger::open(&out.join(LEDGER_DIR))?;
    let records = ledger.records()?;
    let reports = render_reports(&records, ledger.modality_init());
    let dir = out.join(REPORT_DIR);
    crate::format::create_dir_all(&dir)?;
    for (name, body) in [
        ("runs.csv", &reports.runs_csv),
        ("table.md", &reports.table_md),
        ("curve_method.csv", &reports.method_curve_csv),
        ("curve_modality.csv", &reports.modality_curve_csv),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok((reports, records.len()))
}

/// Fractions of the grid, formatted for display.
pub fn grid_percentages() -> Vec<u32> {
    FRACTION_GRID.iter().map(|&f| percent(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ClassMetrics;

    fn rec(init: InitMode, mode: ModalityMode, percent: u32, fold: usize, ap: f64) -> CellRecord {
        CellRecord {
            cell: CellKey { init, mode, percent, fold },
            config_hash: "h".into(),
            state: CellState::Done,
            seed: 0,
            learning_rate: 1e-4,
            labeled_train: 10,
            best_epoch: 1,
            metrics: Some(MetricsReport {
                weighted_ap: ap,
                weighted_f1: ap - 0.1,
                n: 4,
                per_class: Vec::<ClassMetrics>::new(),
                absent_classes: vec![],
            }),
            error: None,
        }
    }

    #[test]
    fn grid_counting() {
        let mut cfg = PipelineConfig::default();
        cfg.sweep.fractions = vec![0.1];
        cfg.sweep.modality_modes = vec![];
        assert_eq!(sweep_cells(&cfg).len(), 9);

        let mut paper = PipelineConfig::default();
        paper.apply_paper_grid();
        // 3 inits x 6 fractions, plus 2 single-modality modes x 6 fractions (dual shared), per fold.
        assert_eq!(sweep_cells(&paper).len(), 3 * (18 + 12));
        assert_eq!(grid_percentages(), vec![10, 20, 30, 60, 80, 100]);
    }

    #[test]
    fn table_rows_and_formatting() {
        let records = vec![
            rec(InitMode::Scratch, ModalityMode::Dual, 10, 0, 0.90),
            rec(InitMode::Scratch, ModalityMode::Dual, 10, 1, 1.00),
            rec(InitMode::ContrastiveCheckpoint, ModalityMode::Dual, 10, 0, 0.944),
            rec(InitMode::ContrastiveCheckpoint, ModalityMode::PhaseOnly, 10, 0, 0.5),
        ];
        let r = render_reports(&records, InitMode::ContrastiveCheckpoint);
        assert!(r.table_md.starts_with("| % Training Set | Method | AP | F1 |"));
        assert!(r.table_md.contains("| 10% | Scratch | 0.95±0.05 | 0.85±0.05 |"), "{}", r.table_md);
        assert!(r.table_md.contains("| 10% | Pretrained | 0.94±0.00 |"));
        assert!(r.table_md.contains("| 10% | phase_only | 0.50±0.00 |"));
        assert_eq!(r.runs_csv.lines().count(), 5);
        assert_eq!(r.method_curve_csv.lines().count(), 3);
        assert_eq!(r.modality_curve_csv.lines().count(), 3);
        assert_eq!(r, render_reports(&records, InitMode::ContrastiveCheckpoint));
    }

    #[test]
    fn empty_ledger_renders_empty_tables() {
        let dir = tempfile::tempdir().unwrap();
        let (r, n) = write_reports(dir.path()).unwrap();
        assert_eq!(n, 0);
        assert_eq!(r.runs_csv.lines().count(), 1);
        assert!(dir.path().join(REPORT_DIR).join("table.md").exists());
    }

    #[test]
    fn claims_are_exclusive_and_cleared() {
        let dir = tempfile::tempdir().unwrap();
        let l = Ledger::open(dir.path()).unwrap();
        assert!(l.claim("a").unwrap());
        assert!(!l.claim("a").unwrap());
        assert_eq!(l.clear_stale_claims().unwrap(), 1);
        assert!(l.claim("a").unwrap());
        let r = rec(InitMode::Scratch, ModalityMode::Dual, 10, 0, 0.5);
        assert!(l.claim(&r.cell.name()).unwrap());
        l.complete(&r).unwrap();
        assert_eq!(l.records().unwrap(), vec![r]);
    }

    #[test]
    fn csv_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("a, b"), "\"a, b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
