use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::write_file;
use crate::alsuv::{average_trajectory, finish_attack, optimize_latents, AttackConfig, AttackObjective, AttackOutcome, LatentBatch};
use crate::diagnostics::{flatness, loss_surface_slice, DiagnosticsConfig, FlatnessStats, SurfaceSlice};
use crate::error::{Error, Result};
use crate::eval::{evaluate, format_float, median, EvalReport};
use crate::numerics::cosine_similarity;
use crate::worldgen::World;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub identity: usize,
    pub attack_seed: u64,
    /// `None` on success.
    pub error: Option<String>,
    pub selected_index: Option<usize>,
    pub selected_rank: Option<usize>,
    pub effective_k_top: Option<usize>,
    pub seen_similarity: Option<f64>,
    pub seen_top1_similarity: Option<f64>,
    /// Cosine of the reconstruction's feature to the true template, per encoder.
    pub encoder_similarities: Vec<f64>,
    pub diverged: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessPair {
    pub identity: usize,
    pub averaged: FlatnessStats,
    pub final_iterate: FlatnessStats,
    pub unseen_loss_averaged: f64,
    pub unseen_loss_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessSummary {
    pub pairs: Vec<FlatnessPair>,
    pub median_trace_averaged: f64,
    pub median_trace_final: f64,
    pub median_lambda1_averaged: f64,
    pub median_lambda1_final: f64,
    pub median_unseen_loss_averaged: f64,
    pub median_unseen_loss_final: f64,
}

impl FlatnessSummary {
    pub fn from_pairs(pairs: Vec<FlatnessPair>) -> Self {
        let col = |f: &dyn Fn(&FlatnessPair) -> f64| median(&pairs.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        Self {
            median_trace_averaged: col(&|p| p.averaged.trace),
            median_trace_final: col(&|p| p.final_iterate.trace),
            median_lambda1_averaged: col(&|p| p.averaged.lambda1),
            median_lambda1_final: col(&|p| p.final_iterate.lambda1),
            median_unseen_loss_averaged: col(&|p| p.unseen_loss_averaged),
            median_unseen_loss_final: col(&|p| p.unseen_loss_final),
            pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub artifact_version: String,
    pub config: ExperimentConfig,
    pub world_hash: String,
    pub identities: Vec<IdentitySummary>,
    pub failed: Vec<usize>,
    pub eval: Option<EvalReport>,
    pub flatness: Option<FlatnessSummary>,
    pub surface_files: Vec<String>,
}

impl RunReport {
    pub fn partial_failure(&self) -> bool {
        !self.failed.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub world_seconds: f64,
    pub attack_seconds: f64,
    pub eval_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub timings: Timings,
    pub surfaces: Vec<(String, SurfaceSlice)>,
}

/// `1 - mean cosine` to the true templates over the unseen encoders.
pub fn unseen_loss(world: &World, identity: usize, latent: &[f64]) -> Result<f64> {
    let image = world.generator().forward(latent)?;
    let unseen = &world.ensemble.roles().unseen;
    let mut total = 0.0;
    for &k in unseen {
        let f = world.ensemble.encoder(k).forward(&image)?;
        total += cosine_similarity(&f, world.truth.get(identity, k))?;
    }
    Ok(1.0 - total / unseen.len() as f64)
}

/// Optimizes the batch and finishes the attack through the attacker's view
/// only.
pub fn attack_identity(world: &World, identity: usize, cfg: &AttackConfig) -> Result<(LatentBatch, AttackOutcome)> {
    cfg.validate()?;
    let v = world.attacker_view(identity);
    let batch = optimize_latents(cfg, v.generator, v.seen, v.seen_target)?;
    let outcome = finish_attack(cfg, &batch, v.generator, v.seen, v.validation, v.seen_target)?;
    Ok((batch, outcome))
}

/// The selected track's averaged latent and its final iterate.
pub fn averaged_and_final(batch: &LatentBatch, index: usize, t0: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let track = batch
        .tracks
        .iter()
        .find(|t| t.index == index)
        .ok_or_else(|| Error::OutOfRange(format!("track {index}")))?;
    let single = LatentBatch {
        tracks: vec![track.clone()],
    };
    let averaged = average_trajectory(&single, t0)?.remove(0).latent;
    Ok((averaged, track.last().to_vec()))
}

/// Curvature and unseen loss at the averaged and final iterate of the
/// selected track.
pub fn flatness_pair(
    world: &World,
    identity: usize,
    batch: &LatentBatch,
    outcome: &AttackOutcome,
    t0: usize,
    settings: &DiagnosticsConfig,
) -> Result<FlatnessPair> {
    let (averaged, last) = averaged_and_final(batch, outcome.selected_index, t0)?;
    let v = world.attacker_view(identity);
    let objective = AttackObjective::new(v.generator, v.seen, v.seen_target)?;
    Ok(FlatnessPair {
        identity,
        averaged: flatness(&objective, &averaged, settings)?,
        final_iterate: flatness(&objective, &last, settings)?,
        unseen_loss_averaged: unseen_loss(world, identity, &averaged)?,
        unseen_loss_final: unseen_loss(world, identity, &last)?,
    })
}

struct IdentityResult {
    summary: IdentitySummary,
    outcome: Option<AttackOutcome>,
    flatness: Option<FlatnessPair>,
    surfaces: Vec<(String, SurfaceSlice)>,
}

fn summarize(world: &World, identity: usize, seed: u64, outcome: &AttackOutcome) -> Result<IdentitySummary> {
    let encoder_similarities = world
        .ensemble
        .encoders()
        .iter()
        .enumerate()
        .map(|(k, e)| cosine_similarity(&e.forward(&outcome.reconstruction)?, world.truth.get(identity, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(IdentitySummary {
        identity,
        attack_seed: seed,
        error: None,
        selected_index: Some(outcome.selected_index),
        selected_rank: Some(outcome.selected_rank),
        effective_k_top: Some(outcome.effective_k_top),
        seen_similarity: Some(outcome.selected_seen_similarity()),
        seen_top1_similarity: Some(outcome.seen_top1().seen_similarity),
        encoder_similarities,
        diverged: outcome.diverged.len(),
        warnings: outcome.warnings.clone(),
    })
}

fn run_identity(cfg: &ExperimentConfig, world: &World, identity: usize) -> Result<IdentityResult> {
    let attack = cfg.attack_for(identity);
    let (batch, outcome) = attack_identity(world, identity, &attack)?;
    let summary = summarize(world, identity, attack.seed, &outcome)?;
    let settings = DiagnosticsConfig {
        seed: cfg.diagnostics_seed(identity),
        ..cfg.diagnostics.settings
    };
    let flat = if cfg.diagnostics.flatness {
        Some(flatness_pair(world, identity, &batch, &outcome, attack.t0, &settings)?)
    } else {
        None
    };
    let mut surfaces = Vec::new();
    if cfg.diagnostics.surfaces && identity < cfg.diagnostics.surface_identities {
        let v = world.attacker_view(identity);
        let objective = AttackObjective::new(v.generator, v.seen, v.seen_target)?;
        let (averaged, last) = averaged_and_final(&batch, outcome.selected_index, attack.t0)?;
        for (name, z) in [("averaged", averaged), ("final", last)] {
            let slice = loss_surface_slice(&objective, &z, settings.seed, settings.radius, settings.resolution)?;
            surfaces.push((format!("surface_id{identity}_{name}.csv"), slice));
        }
    }
    Ok(IdentityResult {
        summary,
        outcome: Some(outcome),
        flatness: flat,
        surfaces,
    })
}

fn failed_identity(cfg: &ExperimentConfig, identity: usize, err: &Error) -> IdentityResult {
    IdentityResult {
        summary: IdentitySummary {
            identity,
            attack_seed: cfg.attack_seed(identity),
            error: Some(err.to_string()),
            selected_index: None,
            selected_rank: None,
            effective_k_top: None,
            seen_similarity: None,
            seen_top1_similarity: None,
            encoder_similarities: Vec::new(),
            diverged: 0,
            warnings: Vec::new(),
        },
        outcome: None,
        flatness: None,
        surfaces: Vec::new(),
    }
}

/// Builds the world, attacks every identity, evaluates on every encoder and
/// runs the enabled diagnostics. Per-identity failures are recorded, not
/// propagated.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let world = World::build(&cfg.world, cfg.world_seed())?;
    let world_hash = world.hash()?;
    let world_seconds = start.elapsed().as_secs_f64();

    let attack_start = Instant::now();
    let results: Vec<IdentityResult> = (0..world.n_identities())
        .into_par_iter()
        .map(|i| run_identity(cfg, &world, i).unwrap_or_else(|e| failed_identity(cfg, i, &e)))
        .collect();
    let attack_seconds = attack_start.elapsed().as_secs_f64();

    let eval_start = Instant::now();
    let attacks: Vec<(usize, &AttackOutcome)> = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().map(|o| (r.summary.identity, o)))
        .collect();
    let eval = if attacks.is_empty() {
        None
    } else {
        Some(evaluate(&world, &attacks, &cfg.fars)?)
    };
    let eval_seconds = eval_start.elapsed().as_secs_f64();

    let flatness = cfg
        .diagnostics
        .flatness
        .then(|| FlatnessSummary::from_pairs(results.iter().filter_map(|r| r.flatness.clone()).collect()));
    let failed = results.iter().filter(|r| r.outcome.is_none()).map(|r| r.summary.identity).collect();
    let mut surfaces = Vec::new();
    let mut identities = Vec::with_capacity(results.len());
    for r in results {
        surfaces.extend(r.surfaces);
        identities.push(r.summary);
    }
    let report = RunReport {
        artifact_version: ARTIFACT_VERSION.to_string(),
        config: cfg.clone(),
        world_hash,
        identities,
        failed,
        eval,
        flatness,
        surface_files: surfaces.iter().map(|(name, _)| name.clone()).collect(),
    };
    Ok(RunOutput {
        report,
        timings: Timings {
            world_seconds,
            attack_seconds,
            eval_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
        surfaces,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

fn identities_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "identity",
        "status",
        "selected_index",
        "selected_rank",
        "seen_similarity",
        "seen_top1_similarity",
        "unseen_similarity",
        "diverged",
    ])?;
    let unseen = report
        .eval
        .as_ref()
        .map(|e| e.unseen_average.encoders.clone())
        .unwrap_or_default();
    for s in &report.identities {
        let unseen_sim = (!s.encoder_similarities.is_empty() && !unseen.is_empty())
            .then(|| unseen.iter().map(|k| s.encoder_similarities[*k]).sum::<f64>() / unseen.len() as f64);
        w.write_record([
            s.identity.to_string(),
            if s.error.is_none() { "ok".into() } else { "failed".into() },
            s.selected_index.map(|v| v.to_string()).unwrap_or_default(),
            s.selected_rank.map(|v| v.to_string()).unwrap_or_default(),
            opt(s.seen_similarity),
            opt(s.seen_top1_similarity),
            opt(unseen_sim),
            s.diverged.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn flatness_csv(summary: &FlatnessSummary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "identity",
        "trace_averaged",
        "trace_final",
        "lambda1_averaged",
        "lambda1_final",
        "unseen_loss_averaged",
        "unseen_loss_final",
    ])?;
    for p in &summary.pairs {
        w.write_record([
            p.identity.to_string(),
            format_float(p.averaged.trace),
            format_float(p.final_iterate.trace),
            format_float(p.averaged.lambda1),
            format_float(p.final_iterate.lambda1),
            format_float(p.unseen_loss_averaged),
            format_float(p.unseen_loss_final),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `report.json`, `config.json`, `metrics.csv`, `identities.csv`,
/// `flatness.csv`, the surface CSVs and `timings.json` into `dir`.
pub fn write_run(output: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let r = &output.report;
    write_file(dir, "report.json", serde_json::to_string_pretty(r)?.as_bytes())?;
    write_file(dir, "config.json", r.config.to_json()?.as_bytes())?;
    if let Some(eval) = &r.eval {
        let mut buf = Vec::new();
        eval.write_csv(&mut buf)?;
        write_file(dir, "metrics.csv", &buf)?;
    }
    write_file(dir, "identities.csv", &identities_csv(r)?)?;
    if let Some(f) = &r.flatness {
        write_file(dir, "flatness.csv", &flatness_csv(f)?)?;
    }
    for (name, slice) in &output.surfaces {
        let mut buf = Vec::new();
        slice.write_csv(&mut buf)?;
        write_file(dir, name, &buf)?;
    }
    write_file(dir, "timings.json", serde_json::to_string_pretty(&output.timings)?.as_bytes())?;
    Ok(())
}
