use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::alsuv::{finish_attack, optimize_latents, AttackConfig, AttackOutcome};
use crate::error::{Error, Result};
use crate::eval::{evaluate, format_float, AverageMetrics};
use crate::numerics::cosine_similarity;
use crate::worldgen::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub averaging: bool,
    pub validation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: Cell,
    pub k_top: usize,
    pub world_hash: String,
    pub identities: usize,
    pub failed: usize,
    /// Mean seen-encoder cosine of the selected reconstructions.
    pub seen_similarity: f64,
    pub unseen: Option<AverageMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub fars: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

/// Grid cells in `n`-major order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let g = &cfg.ablation;
    let mut out = Vec::new();
    for &n in &g.n {
        for &averaging in &g.averaging {
            for &validation in &g.validation {
                out.push(Cell {
                    n,
                    averaging,
                    validation,
                });
            }
        }
    }
    out
}

/// Attack settings of one cell; `k_top` is capped at `n`.
pub fn cell_config(base: &AttackConfig, cell: Cell) -> AttackConfig {
    AttackConfig {
        n: cell.n,
        k_top: base.k_top.min(cell.n),
        averaging: cell.averaging,
        validation: cell.validation,
        ..base.clone()
    }
}

/// Outcomes of every grid cell for one identity. The largest `n` is
/// optimized once and smaller cells reuse its leading latents, which are
/// exactly the latents a smaller run would draw.
pub fn identity_cells(world: &World, identity: usize, base: &AttackConfig, cells: &[Cell]) -> Result<Vec<AttackOutcome>> {
    let n_max = cells.iter().map(|c| c.n).max().ok_or(Error::Empty("ablation grid"))?;
    let v = world.attacker_view(identity);
    let big = AttackConfig {
        n: n_max,
        k_top: base.k_top.min(n_max),
        ..base.clone()
    };
    big.validate()?;
    let batch = optimize_latents(&big, v.generator, v.seen, v.seen_target)?;
    cells
        .iter()
        .map(|&cell| {
            let cfg = cell_config(base, cell);
            cfg.validate()?;
            finish_attack(&cfg, &batch.prefix(cell.n)?, v.generator, v.seen, v.validation, v.seen_target)
        })
        .collect()
}

/// Runs the whole grid on one shared world.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate_ablation()?;
    let world = World::build(&cfg.world, cfg.world_seed())?;
    let world_hash = world.hash()?;
    let grid = cells(cfg);
    let per_identity: Vec<Option<Vec<AttackOutcome>>> = (0..world.n_identities())
        .into_par_iter()
        .map(|i| identity_cells(&world, i, &cfg.attack_for(i), &grid).ok())
        .collect();
    let failed = per_identity.iter().filter(|o| o.is_none()).count();
    let seen = world.ensemble.roles().seen;
    let rows = grid
        .iter()
        .enumerate()
        .map(|(c, &cell)| {
            let attacks: Vec<(usize, &AttackOutcome)> = per_identity
                .iter()
                .enumerate()
                .filter_map(|(i, o)| o.as_ref().map(|cells| (i, &cells[c])))
                .collect();
            let (unseen, seen_similarity) = if attacks.is_empty() {
                (None, f64::NAN)
            } else {
                let report = evaluate(&world, &attacks, &cfg.fars)?;
                let mut total = 0.0;
                for (i, o) in &attacks {
                    let f = world.ensemble.seen().forward(&o.reconstruction)?;
                    total += cosine_similarity(&f, world.truth.get(*i, seen))?;
                }
                (Some(report.unseen_average), total / attacks.len() as f64)
            };
            Ok(AblationRow {
                cell,
                k_top: cfg.attack.k_top.min(cell.n),
                world_hash: world_hash.clone(),
                identities: attacks.len(),
                failed,
                seen_similarity,
                unseen,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        fars: cfg.fars.clone(),
        rows,
    })
}

impl AblationReport {
    /// One row per cell: the cell, then unseen-average SAR, SAR@FAR,
    /// rank-1 and mean similarity.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "n".to_string(),
            "averaging".into(),
            "validation".into(),
            "k_top".into(),
            "world_hash".into(),
            "identities".into(),
            "failed".into(),
            "seen_similarity".into(),
            "unseen_sar".into(),
        ];
        header.extend(self.fars.iter().map(|f| format!("unseen_sar@far={f:e}")));
        header.extend(["unseen_rank1".into(), "unseen_similarity".into()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.cell.n.to_string(),
                r.cell.averaging.to_string(),
                r.cell.validation.to_string(),
                r.k_top.to_string(),
                r.world_hash.clone(),
                r.identities.to_string(),
                r.failed.to_string(),
                format_float(r.seen_similarity),
            ];
            match &r.unseen {
                Some(u) => {
                    rec.push(format_float(u.sar));
                    rec.extend(u.sar_at_far.iter().map(|v| format_float(*v)));
                    rec.push(format_float(u.rank1));
                    rec.push(format_float(u.mean_similarity));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), self.fars.len() + 3)),
            }
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}
