//! Averaged latent search with unsupervised validation.
//!
//! 1. `n` latents are drawn and each is optimized for `T` Adam steps against
//!    the seen encoder's template (`optimize_latents`).
//! 2. each trajectory's last `T0` iterates are averaged (`average_trajectory`).
//! 3. averaged candidates are ranked by seen similarity (`rank_candidates`);
//!    the mean validation-encoder feature of the top `k_top` is the pseudo
//!    target (`pseudo_target`).
//! 4. among the top `k_top`, the candidate whose validation feature is
//!    closest (cosine) to the pseudo target wins (`select_latent`).
//!
//! Nothing here ever sees an unseen encoder; the attack entry points only
//! take the generator, the seen encoder, the validation encoder and the seen
//! template.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{cosine_similarity, cosine_similarity_grad, norm, Mlp, Objective};
use crate::optimize::{adam_step, AdamState, LrSchedule};
use crate::rng::{normal_vec, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Number of latents optimized in parallel.
    pub n: usize,
    /// Trajectory tail length that gets averaged.
    pub t0: usize,
    /// Candidates used for the pseudo target and the final selection.
    pub k_top: usize,
    /// Learning-rate schedule; `schedule.total_steps` is the step count `T`.
    pub schedule: LrSchedule,
    pub init_scale: f64,
    pub seed: u64,
    /// When false, candidates are the final iterates.
    pub averaging: bool,
    /// When false, the top seen-ranked candidate is returned directly.
    pub validation: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n: 100,
            t0: 70,
            k_top: 10,
            schedule: LrSchedule::default(),
            init_scale: 1.0,
            seed: 0,
            averaging: true,
            validation: true,
        }
    }
}

impl AttackConfig {
    pub fn steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.t0 == 0 || self.t0 > self.steps() {
            return bad(format!("t0 = {} must lie in 1..={}", self.t0, self.steps()));
        }
        if self.k_top == 0 || self.k_top > self.n {
            return bad(format!("k_top = {} must lie in 1..={}", self.k_top, self.n));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be positive, got {}", self.init_scale));
        }
        self.schedule.validate()
    }
}

/// `-cos(E(G(z)), v)` with its exact gradient.
#[derive(Debug, Clone, Copy)]
pub struct AttackObjective<'a> {
    pub generator: &'a Mlp,
    pub encoder: &'a Mlp,
    pub target: &'a [f64],
}

impl<'a> AttackObjective<'a> {
    pub fn new(generator: &'a Mlp, encoder: &'a Mlp, target: &'a [f64]) -> Result<Self> {
        check_len("encoder input vs generator output", generator.output_dim(), encoder.input_dim())?;
        check_len("target feature", encoder.output_dim(), target.len())?;
        Ok(Self {
            generator,
            encoder,
            target,
        })
    }

    pub fn similarity(&self, z: &[f64]) -> Result<f64> {
        let feature = self.encoder.forward(&self.generator.forward(z)?)?;
        cosine_similarity(&feature, self.target)
    }

    pub fn value_and_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g_trace = self.generator.forward_trace(z)?;
        let e_trace = self.encoder.forward_trace(g_trace.output())?;
        let sim = cosine_similarity(e_trace.output(), self.target)?;
        let d_sim: Vec<f64> = cosine_similarity_grad(e_trace.output(), self.target)?
            .into_iter()
            .map(|v| -v)
            .collect();
        let d_image = self.encoder.backward(&e_trace, &d_sim)?;
        let d_latent = self.generator.backward(&g_trace, &d_image)?;
        Ok((-sim, d_latent))
    }
}

impl Objective for AttackObjective<'_> {
    fn dim(&self) -> usize {
        self.generator.input_dim()
    }

    fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(-self.similarity(z)?)
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(z)?.1)
    }
}

pub fn attack_loss(z: &[f64], generator: &Mlp, seen: &Mlp, v_seen: &[f64]) -> Result<f64> {
    AttackObjective::new(generator, seen, v_seen)?.value(z)
}

pub fn attack_loss_grad(z: &[f64], generator: &Mlp, seen: &Mlp, v_seen: &[f64]) -> Result<Vec<f64>> {
    AttackObjective::new(generator, seen, v_seen)?.gradient(z)
}

/// One latent's optimization history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrack {
    pub index: usize,
    /// `z^(0) .. z^(T)`; shorter when the latent diverged.
    pub trajectory: Vec<Vec<f64>>,
    pub state: AdamState,
    pub failure: Option<String>,
}

impl LatentTrack {
    pub fn alive(&self) -> bool {
        self.failure.is_none()
    }

    pub fn last(&self) -> &[f64] {
        self.trajectory.last().expect("trajectory holds the initial point")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBatch {
    pub tracks: Vec<LatentTrack>,
}

impl LatentBatch {
    pub fn n(&self) -> usize {
        self.tracks.len()
    }

    pub fn alive(&self) -> impl Iterator<Item = &LatentTrack> {
        self.tracks.iter().filter(|t| t.alive())
    }

    /// The first `k` tracks. Latents are seeded by index, so this is exactly
    /// the batch a run with `n = k` would have produced.
    pub fn prefix(&self, k: usize) -> Result<LatentBatch> {
        if k == 0 || k > self.tracks.len() {
            return Err(Error::OutOfRange(format!("prefix {k} of {} tracks", self.tracks.len())));
        }
        Ok(LatentBatch {
            tracks: self.tracks[..k].to_vec(),
        })
    }

    pub fn diverged(&self) -> Vec<(usize, String)> {
        self.tracks
            .iter()
            .filter_map(|t| t.failure.clone().map(|f| (t.index, f)))
            .collect()
    }
}

/// `z_i^(0) = init_scale * N(0, I)` from the latent's own random stream.
pub fn initial_latent(seed: u64, index: usize, dim: usize, init_scale: f64) -> Vec<f64> {
    normal_vec(&mut stream(seed, index as u64), dim)
        .into_iter()
        .map(|v| v * init_scale)
        .collect()
}

/// Runs Adam from `init` for `schedule.total_steps` steps.
pub fn optimize_single(
    index: usize,
    init: Vec<f64>,
    objective: &AttackObjective<'_>,
    schedule: &LrSchedule,
) -> LatentTrack {
    let steps = schedule.total_steps;
    let mut state = AdamState::new(init.len());
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(init);
    let mut failure = None;
    for step in 0..steps {
        let z = trajectory.last().expect("nonempty");
        let advanced = objective
            .gradient(z)
            .and_then(|g| adam_step(&state, z, &g, schedule.lr_at(step)?))
            .and_then(|(s, next)| {
                if next.iter().all(|v| v.is_finite()) {
                    Ok((s, next))
                } else {
                    Err(Error::Diverged)
                }
            });
        match advanced {
            Ok((s, next)) => {
                state = s;
                trajectory.push(next);
            }
            Err(e) => {
                failure = Some(format!("step {step}: {e}"));
                break;
            }
        }
    }
    LatentTrack {
        index,
        trajectory,
        state,
        failure,
    }
}

/// Optimizes `cfg.n` latents independently against the seen template.
pub fn optimize_latents(
    cfg: &AttackConfig,
    generator: &Mlp,
    seen: &Mlp,
    v_seen: &[f64],
) -> Result<LatentBatch> {
    if cfg.n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    if cfg.steps() > 0 {
        cfg.schedule.validate()?;
    }
    let objective = AttackObjective::new(generator, seen, v_seen)?;
    let dim = generator.input_dim();
    let tracks: Vec<LatentTrack> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let init = initial_latent(cfg.seed, i, dim, cfg.init_scale);
            optimize_single(i, init, &objective, &cfg.schedule)
        })
        .collect();
    let batch = LatentBatch { tracks };
    if batch.alive().next().is_none() {
        return Err(Error::NoCandidates);
    }
    Ok(batch)
}

/// A latent put forward for ranking, tagged with its batch index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub latent: Vec<f64>,
}

/// Mean of the last `t0` iterates `z^(T-t0+1) .. z^(T)` of every live track.
///
/// Uses a running mean, so a window of one returns the final iterate and a
/// constant window returns the constant, both exactly.
pub fn average_trajectory(batch: &LatentBatch, t0: usize) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for track in batch.alive() {
        let total = track.trajectory.len() - 1;
        if t0 == 0 || t0 > total {
            return Err(Error::OutOfRange(format!("t0 = {t0} for T = {total}")));
        }
        let window = &track.trajectory[total + 1 - t0..];
        let mut mean = window[0].clone();
        for (k, z) in window.iter().enumerate().skip(1) {
            let count = (k + 1) as f64;
            for (m, v) in mean.iter_mut().zip(z) {
                *m += (v - *m) / count;
            }
        }
        out.push(Candidate {
            index: track.index,
            latent: mean,
        });
    }
    Ok(out)
}

pub fn final_iterates(batch: &LatentBatch) -> Vec<Candidate> {
    batch
        .alive()
        .map(|t| Candidate {
            index: t.index,
            latent: t.last().to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub index: usize,
    pub latent: Vec<f64>,
    pub seen_similarity: f64,
}

/// Orders candidates by nonincreasing seen similarity, ties by index.
pub fn rank_candidates(
    candidates: &[Candidate],
    generator: &Mlp,
    seen: &Mlp,
    v_seen: &[f64],
) -> Result<Vec<RankedCandidate>> {
    let objective = AttackObjective::new(generator, seen, v_seen)?;
    let mut ranked = candidates
        .iter()
        .map(|c| {
            Ok(RankedCandidate {
                index: c.index,
                latent: c.latent.clone(),
                seen_similarity: objective.similarity(&c.latent)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.seen_similarity
            .total_cmp(&a.seen_similarity)
            .then(a.index.cmp(&b.index))
    });
    Ok(ranked)
}

fn check_k_top(ranked: &[RankedCandidate], k_top: usize) -> Result<()> {
    if k_top == 0 || k_top > ranked.len() {
        return Err(Error::OutOfRange(format!(
            "k_top = {k_top} with {} candidates",
            ranked.len()
        )));
    }
    Ok(())
}

/// Plain (unnormalized) mean of the validation features of the top `k_top`.
pub fn pseudo_target(
    ranked: &[RankedCandidate],
    generator: &Mlp,
    validation: &Mlp,
    k_top: usize,
) -> Result<Vec<f64>> {
    check_k_top(ranked, k_top)?;
    let mut mean: Vec<f64> = Vec::new();
    for (k, c) in ranked[..k_top].iter().enumerate() {
        let f = validation.forward(&generator.forward(&c.latent)?)?;
        if k == 0 {
            mean = f;
        } else {
            let count = (k + 1) as f64;
            for (m, v) in mean.iter_mut().zip(&f) {
                *m += (v - *m) / count;
            }
        }
    }
    if norm(&mean) < 1e-12 {
        return Err(Error::DegeneratePseudoTarget);
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Position in the seen ranking.
    pub rank: usize,
    /// Validation similarity to the pseudo target for each of the top `k_top`.
    pub validation_similarities: Vec<f64>,
}

/// Among the top `k_top`, picks the candidate with the highest validation
/// similarity to `pseudo` (the smallest cosine distance). Ties go to the
/// better seen rank.
pub fn select_latent(
    ranked: &[RankedCandidate],
    generator: &Mlp,
    validation: &Mlp,
    pseudo: &[f64],
    k_top: usize,
) -> Result<Selection> {
    check_k_top(ranked, k_top)?;
    let sims = ranked[..k_top]
        .iter()
        .map(|c| cosine_similarity(&validation.forward(&generator.forward(&c.latent)?)?, pseudo))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (r, s) in sims.iter().enumerate().skip(1) {
        if *s > sims[best] {
            best = r;
        }
    }
    Ok(Selection {
        rank: best,
        validation_similarities: sims,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub selected_index: usize,
    pub selected_rank: usize,
    pub selected_latent: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub ranked: Vec<RankedCandidate>,
    pub pseudo_target: Option<Vec<f64>>,
    pub validation_similarities: Vec<f64>,
    pub effective_k_top: usize,
    pub diverged: Vec<(usize, String)>,
    pub warnings: Vec<String>,
}

impl AttackOutcome {
    pub fn seen_top1(&self) -> &RankedCandidate {
        &self.ranked[0]
    }

    pub fn selected_seen_similarity(&self) -> f64 {
        self.ranked[self.selected_rank].seen_similarity
    }
}

/// Averaging, ranking and selection on an already optimized batch.
pub fn finish_attack(
    cfg: &AttackConfig,
    batch: &LatentBatch,
    generator: &Mlp,
    seen: &Mlp,
    validation: &Mlp,
    v_seen: &[f64],
) -> Result<AttackOutcome> {
    let candidates = if cfg.averaging {
        average_trajectory(batch, cfg.t0)?
    } else {
        final_iterates(batch)
    };
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let ranked = rank_candidates(&candidates, generator, seen, v_seen)?;
    let mut warnings = Vec::new();
    let k_top = cfg.k_top.min(ranked.len());
    if k_top < cfg.k_top {
        warnings.push(format!(
            "only {} latents survived; k_top reduced from {} to {k_top}",
            ranked.len(),
            cfg.k_top
        ));
    }
    let (selected_rank, pseudo, validation_similarities) = if cfg.validation {
        let pseudo = pseudo_target(&ranked, generator, validation, k_top)?;
        let sel = select_latent(&ranked, generator, validation, &pseudo, k_top)?;
        (sel.rank, Some(pseudo), sel.validation_similarities)
    } else {
        (0, None, Vec::new())
    };
    let chosen = &ranked[selected_rank];
    Ok(AttackOutcome {
        selected_index: chosen.index,
        selected_rank,
        selected_latent: chosen.latent.clone(),
        reconstruction: generator.forward(&chosen.latent)?,
        pseudo_target: pseudo,
        validation_similarities,
        effective_k_top: k_top,
        diverged: batch.diverged(),
        warnings,
        ranked,
    })
}

/// The full attack: optimize, average, rank, build the pseudo target, select.
pub fn alsuv_attack(
    cfg: &AttackConfig,
    generator: &Mlp,
    seen: &Mlp,
    validation: &Mlp,
    v_seen: &[f64],
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_len("validation encoder input", generator.output_dim(), validation.input_dim())?;
    let batch = optimize_latents(cfg, generator, seen, v_seen)?;
    finish_attack(cfg, &batch, generator, seen, validation, v_seen)
}

/// Configuration of the long single-latent baseline: one latent, `total_steps`
/// steps, the step schedule restarted every `cycle_length` steps, no
/// averaging and no validation.
pub fn serial_config(cfg: &AttackConfig, total_steps: usize, cycle_length: usize) -> AttackConfig {
    AttackConfig {
        n: 1,
        t0: 1,
        k_top: 1,
        schedule: LrSchedule {
            total_steps,
            cycle_length: Some(cycle_length),
            ..cfg.schedule.clone()
        },
        averaging: false,
        validation: false,
        ..cfg.clone()
    }
}

pub fn serial_baseline(
    cfg: &AttackConfig,
    total_steps: usize,
    cycle_length: usize,
    generator: &Mlp,
    seen: &Mlp,
    validation: &Mlp,
    v_seen: &[f64],
) -> Result<AttackOutcome> {
    alsuv_attack(
        &serial_config(cfg, total_steps, cycle_length),
        generator,
        seen,
        validation,
        v_seen,
    )
}
