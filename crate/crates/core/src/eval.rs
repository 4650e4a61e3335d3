//! Verification and identification metrics.
//!
//! Thresholds are fitted per encoder on that encoder's own genuine/impostor
//! score sets. A reconstruction of identity `i` is then compared with every
//! sample of `i` except the source image it was inverted from.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alsuv::AttackOutcome;
use crate::error::{Error, Result};
use crate::numerics::cosine_similarity;
use crate::worldgen::{EncoderEnsemble, IdentityWorld, Role, World};

pub const DEFAULT_FARS: [f64; 3] = [1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSets {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

fn features(world: &IdentityWorld, ensemble: &EncoderEnsemble, encoder: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let net = ensemble.encoder(encoder);
    world
        .identities
        .iter()
        .map(|id| id.samples.iter().map(|x| net.forward(x)).collect())
        .collect()
}

/// Scores every unordered pair of samples: same identity goes to `genuine`,
/// different identities to `impostor`. Pairs are enumerated in a fixed
/// (identity, sample) lexicographic order.
pub fn build_score_sets(world: &IdentityWorld, ensemble: &EncoderEnsemble, encoder: usize) -> Result<ScoreSets> {
    if world.identities.len() < 2 {
        return Err(Error::Empty("need at least two identities"));
    }
    if world.identities.iter().any(|id| id.samples.len() < 2) {
        return Err(Error::Empty("need at least two samples per identity"));
    }
    let feats = features(world, ensemble, encoder)?;
    let flat: Vec<(usize, &Vec<f64>)> = feats
        .iter()
        .enumerate()
        .flat_map(|(i, fs)| fs.iter().map(move |f| (i, f)))
        .collect();
    let mut sets = ScoreSets {
        genuine: Vec::new(),
        impostor: Vec::new(),
    };
    for (a, (ia, fa)) in flat.iter().enumerate() {
        for (ib, fb) in &flat[a + 1..] {
            let s = cosine_similarity(fa, fb)?;
            if ia == ib {
                sets.genuine.push(s);
            } else {
                sets.impostor.push(s);
            }
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    /// False when no impostor score can serve as a threshold without
    /// exceeding the false-accept budget; `value` then sits just above the
    /// largest impostor score.
    pub reliable: bool,
}

/// Smallest `tau` among the impostor scores with `#{s >= tau} / N <= far`.
pub fn far_threshold(impostor: &[f64], far: f64) -> Result<Threshold> {
    if impostor.is_empty() {
        return Err(Error::Empty("impostor scores"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::OutOfRange(format!("far = {far}")));
    }
    if impostor.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("impostor scores"));
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mut best = None;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        // j scores are >= sorted[i]
        if (j as f64) / n <= far {
            best = Some(sorted[i]);
        } else {
            break;
        }
        i = j;
    }
    Ok(match best {
        Some(value) => Threshold {
            value,
            reliable: true,
        },
        None => Threshold {
            value: sorted[0].next_up(),
            reliable: false,
        },
    })
}

/// Fraction of scores at or above `tau`.
pub fn sar(scores: &[f64], tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("attack scores"));
    }
    if !tau.is_finite() {
        return Err(Error::NonFinite("threshold"));
    }
    Ok(scores.iter().filter(|s| **s >= tau).count() as f64 / scores.len() as f64)
}

/// Threshold maximizing verification accuracy on the two score sets; ties go
/// to the smallest threshold.
pub fn accuracy_threshold(sets: &ScoreSets) -> Result<f64> {
    if sets.genuine.is_empty() || sets.impostor.is_empty() {
        return Err(Error::Empty("score sets"));
    }
    // (score, is_genuine), ascending
    let mut all: Vec<(f64, bool)> = sets
        .genuine
        .iter()
        .map(|s| (*s, true))
        .chain(sets.impostor.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // at tau = all[k].0: correct = genuine >= tau + impostor < tau
    let total_genuine = sets.genuine.len();
    let mut genuine_below = 0usize;
    let mut impostor_below = 0usize;
    let mut best = (0usize, f64::NAN);
    let mut k = 0;
    while k < all.len() {
        let tau = all[k].0;
        let correct = (total_genuine - genuine_below) + impostor_below;
        if best.1.is_nan() || correct > best.0 {
            best = (correct, tau);
        }
        while k < all.len() && all[k].0 == tau {
            if all[k].1 {
                genuine_below += 1;
            } else {
                impostor_below += 1;
            }
            k += 1;
        }
    }
    let above_all = all[all.len() - 1].0.next_up();
    if impostor_below > best.0 {
        best = (impostor_below, above_all);
    }
    Ok(best.1)
}

/// Whether the most similar gallery entry belongs to `true_id`. Ties go to
/// the lower gallery index.
pub fn rank1_identification(probe: &[f64], gallery: &[(Vec<f64>, usize)], true_id: usize) -> Result<bool> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (feature, id) in gallery {
        let s = cosine_similarity(probe, feature)?;
        if s > best.0 {
            best = (s, *id);
        }
    }
    Ok(best.1 == true_id)
}

/// Cosine distances to the true validation template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceTriple {
    pub seen_top1: f64,
    pub selected: f64,
    /// Absent when the attack ran without validation.
    pub pseudo_target: Option<f64>,
}

pub fn pseudo_target_analysis(outcome: &AttackOutcome, world: &World, identity: usize) -> Result<DistanceTriple> {
    let val = world.ensemble.validation();
    let truth = world.truth.get(identity, world.ensemble.roles().validation);
    let g = world.generator();
    let dist = |f: &[f64]| -> Result<f64> { Ok(1.0 - cosine_similarity(f, truth)?) };
    Ok(DistanceTriple {
        seen_top1: dist(&val.forward(&g.forward(&outcome.seen_top1().latent)?)?)?,
        selected: dist(&val.forward(&outcome.reconstruction)?)?,
        pseudo_target: outcome.pseudo_target.as_deref().map(dist).transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarPoint {
    pub far: f64,
    pub threshold: f64,
    pub reliable: bool,
    pub sar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMetrics {
    pub encoder: usize,
    pub role: Role,
    pub sar: f64,
    pub sar_threshold: f64,
    pub sar_at_far: Vec<FarPoint>,
    pub rank1: f64,
    /// Mean cosine between the reconstruction's feature and the true template.
    pub mean_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub encoders: Vec<usize>,
    pub sar: f64,
    pub sar_at_far: Vec<f64>,
    pub rank1: f64,
    pub mean_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub per_identity: Vec<(usize, DistanceTriple)>,
    pub median_seen_top1: f64,
    pub median_selected: f64,
    pub median_pseudo_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fars: Vec<f64>,
    pub identities: Vec<usize>,
    pub encoders: Vec<EncoderMetrics>,
    pub unseen_average: AverageMetrics,
    pub distances: DistanceSummary,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn encoder_metrics(world: &World, encoder: usize, attacks: &[(usize, &AttackOutcome)], fars: &[f64]) -> Result<EncoderMetrics> {
    let ensemble = &world.ensemble;
    let net = ensemble.encoder(encoder);
    let sets = build_score_sets(&world.identities, ensemble, encoder)?;
    let sar_threshold = accuracy_threshold(&sets)?;
    let feats = features(&world.identities, ensemble, encoder)?;
    let gallery: Vec<(Vec<f64>, usize)> = feats
        .iter()
        .enumerate()
        .flat_map(|(i, fs)| fs.iter().map(move |f| (f.clone(), i)))
        .collect();
    let mut scores = Vec::new();
    let mut hits = 0usize;
    let mut sims = Vec::with_capacity(attacks.len());
    for (id, outcome) in attacks {
        let probe = net.forward(&outcome.reconstruction)?;
        // skip sample 0, the source of the template
        for f in &feats[*id][1..] {
            scores.push(cosine_similarity(&probe, f)?);
        }
        if rank1_identification(&probe, &gallery, *id)? {
            hits += 1;
        }
        sims.push(cosine_similarity(&probe, world.truth.get(*id, encoder))?);
    }
    let sar_at_far = fars
        .iter()
        .map(|&far| {
            let t = far_threshold(&sets.impostor, far)?;
            Ok(FarPoint {
                far,
                threshold: t.value,
                reliable: t.reliable,
                sar: sar(&scores, t.value)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderMetrics {
        encoder,
        role: ensemble.roles().role_of(encoder),
        sar: sar(&scores, sar_threshold)?,
        sar_threshold,
        sar_at_far,
        rank1: hits as f64 / attacks.len() as f64,
        mean_similarity: mean(&sims),
    })
}

/// Unseen-encoder mean of every rate.
pub fn unseen_average(encoders: &[EncoderMetrics], fars: &[f64]) -> Result<AverageMetrics> {
    let unseen: Vec<&EncoderMetrics> = encoders.iter().filter(|m| m.role == Role::Unseen).collect();
    if unseen.is_empty() {
        return Err(Error::Empty("unseen encoders"));
    }
    let avg = |f: &dyn Fn(&EncoderMetrics) -> f64| mean(&unseen.iter().map(|m| f(m)).collect::<Vec<_>>());
    Ok(AverageMetrics {
        encoders: unseen.iter().map(|m| m.encoder).collect(),
        sar: avg(&|m| m.sar),
        sar_at_far: (0..fars.len()).map(|k| avg(&|m| m.sar_at_far[k].sar)).collect(),
        rank1: avg(&|m| m.rank1),
        mean_similarity: avg(&|m| m.mean_similarity),
    })
}

/// Scores one reconstruction per listed identity on every encoder.
pub fn evaluate(world: &World, attacks: &[(usize, &AttackOutcome)], fars: &[f64]) -> Result<EvalReport> {
    if attacks.is_empty() {
        return Err(Error::Empty("attack outcomes"));
    }
    let encoders = (0..world.ensemble.len())
        .map(|k| encoder_metrics(world, k, attacks, fars))
        .collect::<Result<Vec<_>>>()?;
    let unseen_average = unseen_average(&encoders, fars)?;
    let per_identity = attacks
        .iter()
        .map(|(id, o)| Ok((*id, pseudo_target_analysis(o, world, *id)?)))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&DistanceTriple) -> Option<f64>| -> Vec<f64> {
        per_identity.iter().filter_map(|(_, d)| f(d)).collect()
    };
    let distances = DistanceSummary {
        median_seen_top1: median(&col(&|d| Some(d.seen_top1))).unwrap_or(f64::NAN),
        median_selected: median(&col(&|d| Some(d.selected))).unwrap_or(f64::NAN),
        median_pseudo_target: median(&col(&|d| d.pseudo_target)),
        per_identity,
    };
    Ok(EvalReport {
        fars: fars.to_vec(),
        identities: attacks.iter().map(|(id, _)| *id).collect(),
        encoders,
        unseen_average,
        distances,
    })
}

/// Full-precision float text used in every CSV output.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `encoder,role,metric,value`, one row per encoder and metric, then the
    /// unseen averages under encoder `unseen_average`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["encoder", "role", "metric", "value"])?;
        for m in &self.encoders {
            let enc = m.encoder.to_string();
            let role = m.role.to_string();
            let mut row = |metric: &str, v: f64| w.write_record([enc.as_str(), role.as_str(), metric, &format_float(v)]);
            row("sar", m.sar)?;
            row("sar_threshold", m.sar_threshold)?;
            for p in &m.sar_at_far {
                row(&format!("sar@far={:e}", p.far), p.sar)?;
                row(&format!("threshold@far={:e}", p.far), p.threshold)?;
                row(&format!("reliable@far={:e}", p.far), if p.reliable { 1.0 } else { 0.0 })?;
            }
            row("rank1", m.rank1)?;
            row("mean_similarity", m.mean_similarity)?;
        }
        let a = &self.unseen_average;
        let mut row = |metric: &str, v: f64| w.write_record(["unseen_average", "unseen", metric, &format_float(v)]);
        row("sar", a.sar)?;
        for (far, v) in self.fars.iter().zip(&a.sar_at_far) {
            row(&format!("sar@far={far:e}"), *v)?;
        }
        row("rank1", a.rank1)?;
        row("mean_similarity", a.mean_similarity)?;
        w.flush()?;
        Ok(())
    }
}
