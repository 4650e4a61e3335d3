use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Hyperparameter, SweepMetric};
use crate::alsuv::{finish_attack, optimize_latents, AttackConfig, AttackOutcome};
use crate::error::{Error, Result};
use crate::eval::{accuracy_threshold, build_score_sets, format_float, sar};
use crate::numerics::cosine_similarity;
use crate::worldgen::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub metric: SweepMetric,
    pub mean: f64,
    /// Standard error over identities; absent with fewer than two.
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub identities: usize,
    pub stats: Vec<MetricStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: Hyperparameter,
    pub world_hash: String,
    pub points: Vec<SweepPoint>,
}

pub fn point_config(base: &AttackConfig, parameter: Hyperparameter, value: usize) -> AttackConfig {
    let mut cfg = base.clone();
    match parameter {
        Hyperparameter::N => {
            cfg.n = value;
            cfg.k_top = cfg.k_top.min(value);
        }
        Hyperparameter::T0 => cfg.t0 = value,
        Hyperparameter::KTop => cfg.k_top = value,
    }
    cfg
}

struct Evaluator<'a> {
    world: &'a World,
    thresholds: Vec<(usize, f64)>,
}

impl<'a> Evaluator<'a> {
    fn new(world: &'a World) -> Result<Self> {
        let thresholds = world
            .ensemble
            .roles()
            .unseen
            .iter()
            .map(|&k| Ok((k, accuracy_threshold(&build_score_sets(&world.identities, &world.ensemble, k)?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { world, thresholds })
    }

    fn metric(&self, identity: usize, outcome: &AttackOutcome, metric: SweepMetric) -> Result<f64> {
        let w = self.world;
        let x = &outcome.reconstruction;
        let truth_sim = |k: usize| -> Result<f64> { cosine_similarity(&w.ensemble.encoder(k).forward(x)?, w.truth.get(identity, k)) };
        Ok(match metric {
            SweepMetric::SeenSimilarity => truth_sim(w.ensemble.roles().seen)?,
            SweepMetric::UnseenSimilarity => {
                let mut total = 0.0;
                for (k, _) in &self.thresholds {
                    total += truth_sim(*k)?;
                }
                total / self.thresholds.len() as f64
            }
            SweepMetric::ValidationDistance => 1.0 - truth_sim(w.ensemble.roles().validation)?,
            SweepMetric::UnseenSar => {
                let mut total = 0.0;
                for (k, tau) in &self.thresholds {
                    let enc = w.ensemble.encoder(*k);
                    let probe = enc.forward(x)?;
                    let scores = w.identities.identities[identity]
                        .other_samples()
                        .iter()
                        .map(|s| cosine_similarity(&probe, &enc.forward(s)?))
                        .collect::<Result<Vec<_>>>()?;
                    total += sar(&scores, *tau)?;
                }
                total / self.thresholds.len() as f64
            }
        })
    }
}

fn stat(metric: SweepMetric, values: &[f64]) -> MetricStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    MetricStat { metric, mean, stderr }
}

/// Varies one attack hyperparameter over the configured values. All points
/// share the world and, per identity, one optimized batch.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate_sweep()?;
    let sweep = &cfg.sweep;
    let world = World::build(&cfg.world, cfg.world_seed())?;
    let evaluator = Evaluator::new(&world)?;
    let n_batch = match sweep.parameter {
        Hyperparameter::N => *sweep.values.iter().max().expect("validated nonempty"),
        _ => cfg.attack.n,
    };
    // per identity: per point: per metric
    let per_identity: Vec<Option<Vec<Vec<f64>>>> = (0..world.n_identities())
        .into_par_iter()
        .map(|i| -> Option<Vec<Vec<f64>>> {
            let base = cfg.attack_for(i);
            let v = world.attacker_view(i);
            let big = AttackConfig {
                n: n_batch,
                ..point_config(&base, Hyperparameter::N, n_batch)
            };
            let batch = optimize_latents(&big, v.generator, v.seen, v.seen_target).ok()?;
            sweep
                .values
                .iter()
                .map(|&value| {
                    let pc = point_config(&base, sweep.parameter, value);
                    let outcome = finish_attack(&pc, &batch.prefix(pc.n)?, v.generator, v.seen, v.validation, v.seen_target)?;
                    sweep.metrics.iter().map(|m| evaluator.metric(i, &outcome, *m)).collect()
                })
                .collect::<Result<Vec<_>>>()
                .ok()
        })
        .collect();
    let ok: Vec<&Vec<Vec<f64>>> = per_identity.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::NoCandidates);
    }
    let points = sweep
        .values
        .iter()
        .enumerate()
        .map(|(p, &value)| SweepPoint {
            value,
            identities: ok.len(),
            stats: sweep
                .metrics
                .iter()
                .enumerate()
                .map(|(m, metric)| stat(*metric, &ok.iter().map(|r| r[p][m]).collect::<Vec<_>>()))
                .collect(),
        })
        .collect();
    Ok(SweepReport {
        parameter: sweep.parameter,
        world_hash: world.hash()?,
        points,
    })
}

/// Long-format rows `hyperparameter,value,metric,mean,stderr`.
pub fn emit_plots_data(report: &SweepReport) -> Result<Vec<u8>> {
    if report.points.is_empty() {
        return Err(Error::MissingSweep);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["hyperparameter", "value", "metric", "mean", "stderr"])?;
    for p in &report.points {
        for s in &p.stats {
            w.write_record([
                report.parameter.to_string(),
                p.value.to_string(),
                s.metric.to_string(),
                format_float(s.mean),
                s.stderr.map(format_float).unwrap_or_default(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
