//! `octpair`: simulate, preprocess, train and report from one config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use octpair_core::checkpoint::{self, Checkpoint};
use octpair_core::config::{grid_fraction, PipelineConfig};
use octpair_core::dataset::{
    generate_dataset, plan_dataset, preprocess_dataset, CropSet, DatasetManifest, CROP_MANIFEST_FILE,
};
use octpair_core::error::Error;
use octpair_core::metrics::MetricsReport;
use octpair_core::model::{InitMode, ModalityMode, TissueModel};
use octpair_core::sweep::{run_sweep, sweep_cells, write_reports};
use octpair_core::train::{self, crops_of, labeled, make_splits, Fold};
use octpair_core::{par, seed};

const CONFIG_ECHO: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "octpair", version, about = "Cross-modal contrastive pretraining for needle-tip OCT tissue classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config merged onto the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Start from the minute-scale preset instead of the full defaults.
    #[arg(long, global = true)]
    toy: bool,
    /// Pin batch 28, tau 0.1, D 512, 100 epochs and the full fraction grid.
    #[arg(long, global = true)]
    paper_grid: bool,
    /// Root for default input and output directories.
    #[arg(long, global = true, env = "OCTPAIR_DATA_DIR", default_value = "octpair-data")]
    data_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration.
    Config,
    /// Generate the synthetic phantom dataset.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Print the insertion plan and write nothing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Turn raw insertions into labeled crop pairs.
    Preprocess {
        /// Dataset directory holding manifest.json.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Contrastive pretraining of both encoders on one fold's training pool.
    Pretrain {
        #[command(flatten)]
        fold: FoldArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Supervised training on a labeled fraction of one fold.
    Finetune {
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long, value_enum, default_value = "scratch")]
        init: InitArg,
        #[arg(long, value_enum, default_value = "dual")]
        mode: ModeArg,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Weights for the contrastive or generic init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a saved model on one fold's test insertions.
    Evaluate {
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        model: PathBuf,
        /// Metrics CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (init, mode, fraction, fold) cell; finished cells are skipped.
    Sweep {
        #[arg(long)]
        crops: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// List pending cells and exit.
        #[arg(long)]
        dry_run: bool,
        /// Exit nonzero when any cell failed.
        #[arg(long)]
        strict: bool,
    },
    /// Render tables and curves from a sweep ledger.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct FoldArgs {
    /// Crop store directory holding crops.json.
    #[arg(long)]
    crops: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Scratch,
    Generic,
    Contrastive,
}

impl From<InitArg> for InitMode {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Scratch => InitMode::Scratch,
            InitArg::Generic => InitMode::GenericPretrained,
            InitArg::Contrastive => InitMode::ContrastiveCheckpoint,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dual,
    IntensityOnly,
    PhaseOnly,
}

impl From<ModeArg> for ModalityMode {
    fn from(a: ModeArg) -> Self {
        match a {
            ModeArg::Dual => ModalityMode::Dual,
            ModeArg::IntensityOnly => ModalityMode::IntensityOnly,
            ModeArg::PhaseOnly => ModalityMode::PhaseOnly,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn resolve(g: &Global) -> Outcome<PipelineConfig> {
    let base = if g.toy { PipelineConfig::toy() } else { PipelineConfig::default() };
    let mut cfg = match &g.config {
        Some(p) if !p.exists() => return Err(Failure::Usage(format!("config file {} not found", p.display()))),
        Some(p) => PipelineConfig::load(&base, p)?,
        None => base,
    };
    if g.paper_grid {
        cfg.apply_paper_grid();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.sweep.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &PipelineConfig, dir: &Path) -> Outcome {
    octpair_core::format::create_dir_all(dir)?;
    let p = dir.join(CONFIG_ECHO);
    let body = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

fn load_fold(cfg: &PipelineConfig, crops_dir: &Path, index: usize) -> Outcome<(CropSet, Fold)> {
    let (set, _) = CropSet::load(crops_dir)?;
    let plan = make_splits(&set.insertions, cfg.train.folds, seed::derive(cfg.seed, "splits", 0))?;
    let fold = plan
        .folds
        .get(index)
        .cloned()
        .ok_or_else(|| Failure::Usage(format!("fold {index} out of range (0..{})", plan.folds.len())))?;
    Ok((set, fold))
}

fn refuse_overwrite(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(Error::AlreadyExists(path.to_path_buf()).into());
    }
    Ok(())
}

fn metrics_csv(m: &MetricsReport) -> String {
    let mut s = String::from("class,support,precision,recall,f1,ap\n");
    for c in &m.per_class {
        let ap = c.ap.map_or_else(String::new, |v| format!("{v:.6}"));
        writeln!(s, "{},{},{:.6},{:.6},{:.6},{ap}", c.class.name(), c.support, c.precision, c.recall, c.f1).unwrap();
    }
    writeln!(s, "weighted,{},,,{:.6},{:.6}", m.n, m.weighted_f1, m.weighted_ap).unwrap();
    s
}

fn run(cli: Cli) -> Outcome<u8> {
    let cfg = resolve(&cli.global)?;
    let root = &cli.global.data_dir;
    let dataset_dir = root.join("dataset");
    let crops_dir = root.join("crops");
    let sweep_dir = root.join("sweep");

    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),

        Command::Simulate { out, force, dry_run } => {
            let out = out.unwrap_or(dataset_dir);
            if dry_run {
                let plan = plan_dataset(&cfg.simulate, cfg.seed)?;
                for p in &plan {
                    let th: Vec<String> = p.config.layers.iter().map(|l| l.thickness.map_or("end".into(), |t| t.to_string())).collect();
                    println!("{:<12} {:<7} {:>8.1}s  layers {}", p.id, p.meat_class.name(), p.config.duration, th.join("/"));
                }
                println!("{} insertions planned; nothing written", plan.len());
                return Ok(0);
            }
            let m = generate_dataset(&cfg.simulate, cfg.seed, &out, force)?;
            echo_config(&cfg, &out)?;
            for (class, n) in &cfg.simulate.counts {
                println!("{class:>8}: {n} insertions");
            }
            println!("{} insertions written to {}", m.insertions.len(), out.display());
        }

        Command::Preprocess { dataset, out, force } => {
            let dataset = dataset.unwrap_or(dataset_dir);
            let out = out.unwrap_or(crops_dir);
            refuse_overwrite(&out.join(CROP_MANIFEST_FILE), force)?;
            let manifest = DatasetManifest::load(&dataset)?;
            let set = preprocess_dataset(&manifest, &dataset, &cfg.preprocess)?;
            let hash = set.save(&cfg.preprocess, &out, force)?;
            echo_config(&cfg, &out)?;
            for (class, c) in set.counts() {
                println!("{class:>8}: {} labeled, {} unlabeled", c.labeled, c.unlabeled);
            }
            println!("crop manifest sha256 {hash}");
        }

        Command::Pretrain { fold, out, force } => {
            refuse_overwrite(&out, force)?;
            let (set, f) = load_fold(&cfg, &fold.crops.unwrap_or(crops_dir), fold.fold)?;
            let pool = crops_of(&set.crops, &f.train);
            f.check_leakage(pool.iter().copied())?;
            let run_seed = seed::derive(cfg.seed, "pretrain", f.index as u64);
            let outcome = par::with_workers(cfg.sweep.workers, || {
                train::pretrain(&pool, cfg.model.encoder(), &cfg.objectives, &cfg.train, run_seed)
            })?;
            let meta = serde_json::json!({ "fold": f.index, "pool": pool.len(), "losses": outcome.losses, "config": cfg });
            let ckpt = Checkpoint::from_encoders(&outcome.model, run_seed).with_config_hash(cfg.cell_hash()).with_meta(meta);
            checkpoint::save(&ckpt, &out)?;
            for (e, l) in outcome.losses.iter().enumerate() {
                println!("epoch {:>3}  loss {l:.4}", e + 1);
            }
            println!("{} steps on {} crops; checkpoint {}", outcome.steps, pool.len(), out.display());
        }

        Command::Finetune { fold, init, mode, fraction, checkpoint: ckpt, out, force } => {
            refuse_overwrite(&out, force)?;
            let fraction = grid_fraction(fraction)?;
            let (set, f) = load_fold(&cfg, &fold.crops.unwrap_or(crops_dir), fold.fold)?;
            let train_all = crops_of(&set.crops, &f.train);
            let val = crops_of(&set.crops, &f.val);
            let subset = train::subsample_train(&labeled(&train_all), fraction, seed::derive(cfg.seed, "subsample", f.index as u64))?;
            f.check_leakage(subset.iter().copied().chain(val.iter().copied()))?;
            let mode = ModalityMode::from(mode);
            let pct = (fraction * 100.0).round() as u32;
            let run_seed = seed::derive(cfg.seed, &format!("finetune.{}.p{pct:03}", mode.name()), f.index as u64);
            let init = InitMode::from(init);
            let weights = ckpt.or_else(|| cfg.train.generic_weights.clone().filter(|_| init == InitMode::GenericPretrained));
            if init == InitMode::ContrastiveCheckpoint && weights.is_none() {
                return Err(Failure::Usage("--init contrastive needs --checkpoint".into()));
            }
            let model = TissueModel::init_weights(init, cfg.model.encoder(), cfg.model.head(mode), run_seed, weights.as_deref())?;
            let outcome = par::with_workers(cfg.sweep.workers, || train::finetune(model, &subset, &val, &cfg.train, run_seed))?;
            let meta = serde_json::json!({
                "fold": f.index, "init": init.name(), "mode": mode.name(), "fraction": fraction,
                "labeled_train": subset.len(), "best_epoch": outcome.best_epoch, "config": cfg,
            });
            let ckpt = Checkpoint::from_model(&outcome.model, run_seed).with_config_hash(cfg.cell_hash()).with_meta(meta);
            checkpoint::save(&ckpt, &out)?;
            println!(
                "{} labeled crops, best epoch {} (val F1 {:.3}); model {}",
                subset.len(),
                outcome.best_epoch,
                outcome.val_f1.iter().copied().fold(f64::NAN, f64::max),
                out.display()
            );
        }

        Command::Evaluate { fold, model, out } => {
            let (set, f) = load_fold(&cfg, &fold.crops.unwrap_or(crops_dir), fold.fold)?;
            let mut m = checkpoint::load(&model)?.to_model()?;
            let test = crops_of(&set.crops, &f.test);
            let report = train::evaluate(&mut m, &test, cfg.train.batch_size)?;
            let csv = metrics_csv(&report);
            match out {
                Some(p) => {
                    std::fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
                    println!("weighted AP {:.4}  weighted F1 {:.4}  ({} crops)", report.weighted_ap, report.weighted_f1, report.n);
                }
                None => print!("{csv}"),
            }
            if !report.absent_classes.is_empty() {
                let names: Vec<&str> = report.absent_classes.iter().map(|c| c.name()).collect();
                eprintln!("warning: classes absent from the test set: {}", names.join(", "));
            }
        }

        Command::Sweep { crops, out, dry_run, strict } => {
            let out = out.unwrap_or(sweep_dir);
            if dry_run {
                let cells = sweep_cells(&cfg);
                for c in &cells {
                    println!("{}", c.name());
                }
                println!("{} cells", cells.len());
                return Ok(0);
            }
            let (set, _) = CropSet::load(&crops.unwrap_or(crops_dir))?;
            echo_config(&cfg, &out)?;
            let outcome = run_sweep(&cfg, &set, &out)?;
            let (reports, _) = write_reports(&out)?;
            println!("{}", reports.table_md);
            println!(
                "{} cells run, {} skipped, {} failed; reports in {}",
                outcome.executed.len(),
                outcome.skipped.len(),
                outcome.failed.len(),
                out.join("report").display()
            );
            if strict && !outcome.failed.is_empty() {
                eprintln!("failed cells: {}", outcome.failed.join(", "));
                return Ok(2);
            }
        }

        Command::Report { out } => {
            let out = out.unwrap_or(sweep_dir);
            let (reports, n) = write_reports(&out)?;
            if n == 0 {
                eprintln!("warning: ledger under {} holds no cells", out.display());
            }
            print!("{}", reports.table_md);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

