//! Experiment orchestration: configuration, full runs, ablation grids,
//! hyperparameter sweeps and report files.

mod ablation;
mod config;
mod run;
mod sweep;

use std::path::Path;

pub use ablation::{cell_config, cells, identity_cells, run_ablation, AblationReport, AblationRow, Cell};
pub use config::{
    AblationGrid, DiagnosticsToggles, ExperimentConfig, Hyperparameter, SweepConfig, SweepMetric, CONFIG_VERSION,
};
pub use run::{
    attack_identity, averaged_and_final, flatness_pair, run_experiment, unseen_loss, write_run, FlatnessPair,
    FlatnessSummary, IdentitySummary, RunOutput, RunReport, Timings, ARTIFACT_VERSION,
};
pub use sweep::{emit_plots_data, point_config, run_sweep, MetricStat, SweepPoint, SweepReport};

use crate::error::Result;

pub(crate) fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}

pub fn write_ablation(report: &AblationReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(dir, "ablation.csv", &report.to_csv()?)?;
    write_file(dir, "ablation.json", serde_json::to_string_pretty(report)?.as_bytes())
}

pub fn write_sweep(report: &SweepReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(dir, "sweep.csv", &emit_plots_data(report)?)?;
    write_file(dir, "sweep.json", serde_json::to_string_pretty(report)?.as_bytes())
}
