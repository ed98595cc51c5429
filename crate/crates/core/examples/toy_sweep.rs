//! Run the toy sweep end to end in memory and print the report tables.
//!
//! `cargo run --release --example toy_sweep -- [OUT_DIR] [CONFIG.toml]`

use std::path::PathBuf;
use std::time::Instant;

use octpair_core::config::PipelineConfig;
use octpair_core::dataset::{build_crops, plan_dataset};
use octpair_core::sweep::{run_sweep, write_reports};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("octpair-toy"));
    let cfg = match args.next() {
        Some(p) => PipelineConfig::load(&PipelineConfig::toy(), p.as_ref())?,
        None => PipelineConfig::toy(),
    };
    let t0 = Instant::now();
    let plan = plan_dataset(&cfg.simulate, cfg.seed)?;
    let crops = build_crops(&plan, &cfg.preprocess)?;
    for (class, c) in crops.counts() {
        println!("{class:>8}: {} labeled, {} unlabeled", c.labeled, c.unlabeled);
    }
    println!("crops ready in {:.1}s", t0.elapsed().as_secs_f64());
    let outcome = run_sweep(&cfg, &crops, &out)?;
    println!("{} cells run, {} skipped, {} failed", outcome.executed.len(), outcome.skipped.len(), outcome.failed.len());
    let (reports, _) = write_reports(&out)?;
    println!("{}", reports.table_md);
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
