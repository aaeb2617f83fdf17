//! Concept-aware loss and the sequential unlearning engine.
//!
//! Three loss terms drive each forgetting task:
//! * unlearn: squared distance between the noise predictions under the
//!   forgotten condition and under its superclass condition, on data generated
//!   from the model for the forgotten concept. The superclass branch is a
//!   stop-gradient target.
//! * align: plain diffusion loss under the superclass condition on data
//!   generated for the superclass, keeping that behaviour intact.
//! * reg: distillation against a frozen teacher (the model before the current
//!   task) under the superclass condition, keeping earlier forgetting intact.
//!
//! total = unlearn + alpha * align + beta * reg, optimized through Adam with
//! the dynamic gradient mask.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::concepts::{self, ConceptRegistry};
use crate::config::UnlearnConfig;
use crate::diffusion::{self, draw_noise, noisify, NoiseSchedule};
use crate::masking::{
    self, DynamicMask, GradAccumulator, MaskScope, MaskStatsRow, OptimizerState, ScopeVariant,
};
use crate::nn::{denoise, BatchGrad, DenoiserParams, GradientVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForgetTask {
    pub concept_id: usize,
    pub super_id: usize,
}

impl ForgetTask {
    pub fn new(reg: &ConceptRegistry, concept_id: usize) -> Result<Self> {
        let super_id = reg
            .superclass_of(concept_id)
            .ok_or_else(|| Error::contract(format!("token {concept_id} is not a subconcept")))?;
        Ok(ForgetTask { concept_id, super_id })
    }
}

/// Rows of (x0, c, c_s), self-generated under the forgotten condition.
#[derive(Debug, Clone)]
pub struct ForgetSet {
    pub rows: Vec<(Vec<f64>, usize, usize)>,
}

/// Rows of (x0, c_s), self-generated under the superclass condition.
#[derive(Debug, Clone)]
pub struct SuperSet {
    pub rows: Vec<(Vec<f64>, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub params: DenoiserParams,
    /// Number of completed tasks when the snapshot was taken.
    pub provenance: usize,
}

pub fn build_forget_set(
    params_base: &DenoiserParams,
    task: ForgetTask,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ForgetSet> {
    let samples = diffusion::sample(params_base, task.concept_id, sched, rng, n)?;
    Ok(ForgetSet {
        rows: samples
            .into_iter()
            .map(|x0| (x0, task.concept_id, task.super_id))
            .collect(),
    })
}

/// Superclass exemplars drawn from the model, restricted to rows the oracle
/// does not attribute to the concept being forgotten. The superclass token
/// itself still generates the forgotten mode at this scale, so raw samples
/// would re-teach exactly the behavior the alignment term is meant to replace.
pub fn build_super_set(
    params_base: &DenoiserParams,
    reg: &ConceptRegistry,
    task: ForgetTask,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<SuperSet> {
    let mut rows = Vec::with_capacity(n);
    let mut drawn = 0usize;
    let limit = 50 * n.max(8);
    while rows.len() < n {
        let want = n - rows.len();
        if drawn >= limit {
            return Err(Error::contract(
                "superclass sampling kept producing the forgotten concept",
            ));
        }
        let batch = diffusion::sample(params_base, task.super_id, sched, rng, want.max(8))?;
        drawn += batch.len();
        for x0 in batch {
            if rows.len() < n && concepts::classify(reg, &x0) != task.concept_id {
                rows.push((x0, task.super_id));
            }
        }
    }
    Ok(SuperSet { rows })
}

/// Loss steering the forgotten condition toward the superclass branch, which
/// is treated as a constant target (no gradient).
pub fn unlearn_loss(
    params: &DenoiserParams,
    forget_batch: &[(Vec<f64>, usize, usize)],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradientVector)> {
    if forget_batch.is_empty() {
        return Err(Error::contract("empty forget batch"));
    }
    let d = params.arch.data_dim;
    let t_max = sched.t_max();
    let norm = (forget_batch.len() * d) as f64;
    let mut loss = 0.0;
    let mut bg = BatchGrad::new(params.len());
    for (x0, c, c_s) in forget_batch {
        let t = rng.gen_range(1..=t_max);
        let eps = draw_noise(d, rng);
        let x_t = noisify(x0, t, &eps, sched)?;
        let target = denoise(params, &x_t, t, t_max, *c_s)?;
        let pred = denoise(params, &x_t, t, t_max, *c)?;
        let residual: Vec<f64> = pred.iter().zip(&target).map(|(p, q)| p - q).collect();
        loss += residual.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r / norm).collect();
        bg.accumulate(params, &x_t, t, t_max, *c, &upstream)?;
    }
    Ok((loss / norm, bg.grad))
}

/// Plain diffusion loss restricted to the superclass condition.
pub fn align_loss(
    params: &DenoiserParams,
    super_batch: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradientVector)> {
    if super_batch.is_empty() {
        return Err(Error::contract("empty super batch"));
    }
    diffusion::diffusion_loss_and_grad(params, super_batch, sched, rng)
}

/// Distillation against the frozen teacher on identical (x_t, t) inputs.
pub fn reg_loss(
    params: &DenoiserParams,
    teacher: &TeacherSnapshot,
    super_batch: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradientVector)> {
    if super_batch.is_empty() {
        return Err(Error::contract("empty super batch"));
    }
    if teacher.params.arch != params.arch {
        return Err(Error::contract("teacher/student architecture mismatch"));
    }
    let d = params.arch.data_dim;
    let t_max = sched.t_max();
    let norm = (super_batch.len() * d) as f64;
    let mut loss = 0.0;
    let mut bg = BatchGrad::new(params.len());
    for (x0, c_s) in super_batch {
        let t = rng.gen_range(1..=t_max);
        let eps = draw_noise(d, rng);
        let x_t = noisify(x0, t, &eps, sched)?;
        let target = denoise(&teacher.params, &x_t, t, t_max, *c_s)?;
        let pred = denoise(params, &x_t, t, t_max, *c_s)?;
        let residual: Vec<f64> = pred.iter().zip(&target).map(|(p, q)| p - q).collect();
        loss += residual.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r / norm).collect();
        bg.accumulate(params, &x_t, t, t_max, *c_s, &upstream)?;
    }
    Ok((loss / norm, bg.grad))
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub unlearn: f64,
    pub align: f64,
    pub reg: f64,
    pub total: f64,
}

/// Weighted sum of the three terms, each fed an independent sub-stream drawn
/// from `rng`. Gradient is the exact elementwise linear combination.
pub fn total_loss(
    params: &DenoiserParams,
    forget_batch: &[(Vec<f64>, usize, usize)],
    super_batch: &[(Vec<f64>, usize)],
    reg_batch: &[(Vec<f64>, usize)],
    teacher: &TeacherSnapshot,
    weights: LossWeights,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, GradientVector)> {
    let (s1, s2, s3) = (rng.gen::<u64>(), rng.gen::<u64>(), rng.gen::<u64>());
    let (lu, gu) = unlearn_loss(params, forget_batch, sched, &mut ChaCha8Rng::seed_from_u64(s1))?;
    let (la, ga) = align_loss(params, super_batch, sched, &mut ChaCha8Rng::seed_from_u64(s2))?;
    // An empty distillation batch means there is nothing to preserve yet
    // (first task); the term vanishes rather than erroring.
    let (lr, gr) = if reg_batch.is_empty() {
        (0.0, GradientVector::zeros(params.len()))
    } else {
        reg_loss(params, teacher, reg_batch, sched, &mut ChaCha8Rng::seed_from_u64(s3))?
    };
    let mut grad = gu;
    grad.add_scaled(&ga, weights.alpha);
    grad.add_scaled(&gr, weights.beta);
    Ok((
        LossBreakdown {
            unlearn: lu,
            align: la,
            reg: lr,
            total: lu + weights.alpha * la + weights.beta * lr,
        },
        grad,
    ))
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub l_unlearn: f64,
    pub l_align: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub tau: f64,
    pub mask_changes: usize,
}

pub fn trace_header() -> &'static str {
    "step,L_unlearn,L_align,L_reg,L_total,tau,mask_changes"
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_unlearn, self.l_align, self.l_reg, self.l_total, self.tau, self.mask_changes
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: DenoiserParams,
    pub teacher: TeacherSnapshot,
    pub registry: ConceptRegistry,
    pub sched: NoiseSchedule,
}

/// Everything one task produced, for reporting and invariant checks.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub task: ForgetTask,
    pub trace: Vec<TraceRow>,
    pub mask_stats: Vec<MaskStatsRow>,
    /// Positions active under the mask at any point of the task.
    pub ever_active: Vec<bool>,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

fn pick_batch<T: Clone>(rows: &[T], batch: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..batch).map(|_| rows[rng.gen_range(0..rows.len())].clone()).collect()
}

/// Run one forgetting task in place on `state.params`.
///
/// `reg_tasks` lists the forgetting tasks whose supersets feed the
/// distillation term (the current task, plus earlier tasks when the config
/// flag asks for it). `seed`/`task_index` derive all random streams.
pub fn unlearn_concept(
    state: &mut TrainerState,
    task: ForgetTask,
    cfg: &UnlearnConfig,
    reg_tasks: &[ForgetTask],
    seed: u64,
    task_index: usize,
) -> Result<TaskRun> {
    let n = state.params.len();
    let mut run = TaskRun {
        task,
        trace: Vec::new(),
        mask_stats: Vec::new(),
        ever_active: vec![false; n],
    };
    if cfg.t_end == 0 {
        return Ok(run);
    }
    let sched = state.sched.clone();
    let weights = LossWeights { alpha: cfg.alpha, beta: cfg.beta };
    let tix = task_index as u64;

    let forget_set = build_forget_set(
        &state.params,
        task,
        cfg.n_forget,
        &sched,
        &mut crate::rng::stream(seed, "task-forget-data", tix),
    )?;
    let super_set = build_super_set(
        &state.params,
        &state.registry,
        task,
        cfg.n_super,
        &sched,
        &mut crate::rng::stream(seed, "task-super-data", tix),
    )?;
    let mut reg_rows: Vec<(Vec<f64>, usize)> = Vec::new();
    if cfg.reg_anchor_null {
        // Distill the unconditional behavior too: collateral drift through the
        // shared coupling weights otherwise erodes concepts no task touches.
        let null = state.registry.null_token;
        let rows = diffusion::sample(
            &state.params,
            null,
            &sched,
            &mut crate::rng::stream(seed, "task-null-data", tix),
            cfg.n_super,
        )?;
        reg_rows.extend(rows.into_iter().map(|x0| (x0, null)));
    }
    for (j, &rt) in reg_tasks.iter().enumerate() {
        if rt.super_id == task.super_id {
            reg_rows.extend(super_set.rows.iter().cloned());
        } else {
            let extra = build_super_set(
                &state.params,
                &state.registry,
                rt,
                cfg.n_super,
                &sched,
                &mut crate::rng::stream(seed, "task-reg-data", tix * 64 + j as u64),
            )?;
            reg_rows.extend(extra.rows);
            // Pin down the already-forgotten token's redirected behavior as
            // well; anchoring only its superclass still lets the token itself
            // drift back toward the erased mode.
            let relearned = diffusion::sample(
                &state.params,
                rt.concept_id,
                &sched,
                &mut crate::rng::stream(seed, "task-prior-forget-data", tix * 64 + j as u64),
                cfg.n_super,
            )?;
            reg_rows.extend(relearned.into_iter().map(|x0| (x0, rt.concept_id)));
        }
    }

    let scope = MaskScope::new(cfg.scope, &state.params);
    let sparsity = cfg.effective_sparsity();
    let mut acc = GradAccumulator::zeros(n);

    let step_loss = |params: &DenoiserParams,
                     teacher: &TeacherSnapshot,
                     step_tag: u64|
     -> Result<(LossBreakdown, GradientVector)> {
        let mut rng = crate::rng::stream(seed, "task-step", tix * 1_000_000 + step_tag);
        let fb = pick_batch(&forget_set.rows, cfg.batch, &mut rng);
        let sb = pick_batch(&super_set.rows, cfg.batch, &mut rng);
        let rb = if reg_rows.is_empty() {
            Vec::new()
        } else {
            pick_batch(&reg_rows, cfg.batch, &mut rng)
        };
        total_loss(params, &fb, &sb, &rb, teacher, weights, &sched, &mut rng)
    };

    // Warmup: gradients feed the accumulator only; no parameter updates.
    for w in 0..cfg.warmup_steps {
        let (breakdown, grad) = step_loss(&state.params, &state.teacher, w as u64)?;
        if !breakdown.total.is_finite() || breakdown.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step: w, loss: breakdown.total });
        }
        masking::accumulate(&mut acc, &grad)?;
    }
    let mut mask = masking::init_mask(&acc, sparsity, &scope)?;
    masking::reset(&mut acc);
    let initial_active = mask.active_indices();
    mark_active(&mut run.ever_active, &mask);

    let mut opt = OptimizerState::new(n);
    for t in 1..=cfg.t_end {
        let (breakdown, grad) = step_loss(&state.params, &state.teacher, 1_000 + t as u64)?;
        if !breakdown.total.is_finite() || breakdown.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step: t, loss: breakdown.total });
        }
        masking::accumulate(&mut acc, &grad)?;
        masking::apply_masked_update(&mut state.params, &grad, &mask, &mut opt, cfg.lr)?;

        let tau = masking::cosine_ratio(t.min(cfg.t_end), cfg.r_m, cfg.t_end)?;
        let mut changes = 0;
        if t % cfg.delta_t == 0 {
            let update = masking::update_mask(&mut mask, &acc, tau)?;
            masking::reset(&mut acc);
            changes = update.dropped + update.added;
            mark_active(&mut run.ever_active, &mask);
            let overlap = overlap_fraction(&mask, &initial_active);
            run.mask_stats.push(MaskStatsRow {
                step: t,
                tau,
                dropped: update.dropped,
                added: update.added,
                active_count: mask.active_count,
                overlap_with_initial_mask: overlap,
            });
        }
        run.trace.push(TraceRow {
            step: t,
            l_unlearn: breakdown.unlearn,
            l_align: breakdown.align,
            l_reg: breakdown.reg,
            l_total: breakdown.total,
            tau,
            mask_changes: changes,
        });
    }
    Ok(run)
}

fn mark_active(ever: &mut [bool], mask: &DynamicMask) {
    for i in mask.active_indices() {
        ever[i] = true;
    }
}

fn overlap_fraction(mask: &DynamicMask, initial: &[usize]) -> f64 {
    if initial.is_empty() {
        return 1.0;
    }
    let hits = initial.iter().filter(|&&i| mask.is_active(i)).count();
    hits as f64 / initial.len() as f64
}

/// Per-task evaluation snapshot appended after each completed task.
#[derive(Debug, Clone)]
pub struct SequenceEvalRow {
    pub after_task: usize,
    pub forget_rates: Vec<(usize, f64)>,
    pub others_acc: f64,
    pub super_align: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub rows: Vec<SequenceEvalRow>,
}

pub struct SequenceOutcome {
    pub runs: Vec<TaskRun>,
    pub log: MetricsLog,
    pub teachers: Vec<TeacherSnapshot>,
    /// Set when a task aborted on divergence; runs/log hold everything up to
    /// that point so partial artifacts can still be persisted.
    pub diverged: Option<Error>,
}

/// Forget the given concepts in order. Before each task the current params
/// become the teacher; for the first task that is the pretrained base.
pub fn unlearn_sequence(
    state: &mut TrainerState,
    tasks: &[ForgetTask],
    cfg: &UnlearnConfig,
    n_eval: usize,
    seed: u64,
) -> Result<SequenceOutcome> {
    if tasks.is_empty() {
        return Err(Error::contract("task list is empty"));
    }
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        if !seen.insert(t.concept_id) {
            return Err(Error::contract("duplicate concept in task list"));
        }
    }
    let mut outcome = SequenceOutcome {
        runs: Vec::new(),
        log: MetricsLog::default(),
        teachers: Vec::new(),
        diverged: None,
    };
    let mut forgotten: Vec<usize> = Vec::new();
    let mut prior_tasks: Vec<ForgetTask> = Vec::new();
    for (k, &task) in tasks.iter().enumerate() {
        state.teacher = TeacherSnapshot {
            params: state.params.clone(),
            provenance: k,
        };
        outcome.teachers.push(state.teacher.clone());
        // Distillation preserves what earlier tasks established; the current
        // task's superset only joins when explicitly requested, since the
        // teacher still carries the behavior this task is trying to remove.
        let mut reg_tasks: Vec<ForgetTask> = Vec::new();
        if cfg.reg_includes_current_superset {
            reg_tasks.push(task);
        }
        for &pt in &prior_tasks {
            if !reg_tasks.iter().any(|t| t.super_id == pt.super_id) {
                reg_tasks.push(pt);
            }
        }
        let run = match unlearn_concept(state, task, cfg, &reg_tasks, seed, k) {
            Ok(run) => run,
            Err(e @ Error::Diverged { .. }) => {
                outcome.diverged = Some(e);
                return Ok(outcome);
            }
            Err(e) => return Err(e),
        };
        outcome.runs.push(run);
        forgotten.push(task.concept_id);
        prior_tasks.push(task);

        let forgotten_set: std::collections::HashSet<usize> = forgotten.iter().cloned().collect();
        let mut forget_rates = Vec::new();
        let mut super_align = Vec::new();
        for (j, &c) in forgotten.iter().enumerate() {
            let fr = crate::eval::forget_rate(
                &state.params,
                &state.registry,
                c,
                n_eval,
                &state.sched,
                &mut crate::rng::stream(seed, "seq-eval-forget", (k * 64 + j) as u64),
            )?;
            let sa = crate::eval::super_alignment(
                &state.params,
                &state.registry,
                c,
                n_eval,
                &state.sched,
                &mut crate::rng::stream(seed, "seq-eval-align", (k * 64 + j) as u64),
            )?;
            forget_rates.push((c, fr));
            super_align.push((c, sa));
        }
        let others = crate::eval::others_accuracy(
            &state.params,
            &state.registry,
            &forgotten_set,
            n_eval,
            &state.sched,
            &mut crate::rng::stream(seed, "seq-eval-others", k as u64),
        )?;
        outcome.log.rows.push(SequenceEvalRow {
            after_task: k,
            forget_rates,
            others_acc: others,
            super_align,
        });
    }
    Ok(outcome)
}

/// Base-model training on the registry mixture. The condition token for each
/// example is its subconcept (p=0.5), its superclass (p=0.3), or the null
/// token (p=0.2), so the model learns all three conditioning modes.
pub fn pretrain(
    registry: &ConceptRegistry,
    sched: &NoiseSchedule,
    arch: &crate::nn::Architecture,
    cfg: &crate::config::PretrainConfig,
    seed: u64,
) -> Result<(DenoiserParams, Vec<f64>)> {
    let mut params = crate::nn::init_params(arch, seed)?;
    let n = params.len();
    let mut opt = OptimizerState::new(n);
    let full_scope = MaskScope::new(ScopeVariant::AllParams, &params);
    let full_mask = {
        let acc = GradAccumulator { a: vec![1.0; n], steps_accumulated: 1 };
        masking::init_mask(&acc, 1e-12_f64.max(f64::MIN_POSITIVE), &full_scope)?
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = crate::rng::stream(seed, "pretrain-step", step as u64);
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let sub = &registry.subconcepts[rng.gen_range(0..registry.subconcepts.len())];
            let x0: Vec<f64> = sub
                .mean
                .iter()
                .map(|m| m + sub.stddev * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let u: f64 = rng.gen();
            let token = if u < 0.5 {
                sub.id
            } else if u < 0.8 {
                sub.superclass_id
            } else {
                registry.null_token
            };
            batch.push((x0, token));
        }
        let (loss, grad) = diffusion::diffusion_loss_and_grad(&params, &batch, sched, &mut rng)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss });
        }
        masking::apply_masked_update(&mut params, &grad, &full_mask, &mut opt, cfg.lr)?;
        losses.push(loss);
    }
    Ok((params, losses))
}
