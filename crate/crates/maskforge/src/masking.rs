//! Dynamic gradient mask engine.
//!
//! Gradients are accumulated during a warmup phase, thresholded by magnitude
//! into a binary mask at a fixed sparsity, and then periodically refreshed:
//! the lowest-|A| active positions are dropped and the highest-|A| inactive
//! in-scope positions are added in equal number, with the replaced fraction
//! following a cosine decay from the initial update ratio down to zero.
//! Parameter updates run masked gradients through Adam; positions with mask 0
//! keep parameters and moments bit-identical.

use crate::nn::{DenoiserParams, GradientVector};
use crate::{Error, Result};

/// Which parameter positions are eligible for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeVariant {
    AllParams,
    /// Input-coupling layer (w0, b0) plus the condition-embedding table:
    /// where the condition enters the network.
    ConditionCoupling,
}

#[derive(Debug, Clone)]
pub struct MaskScope {
    pub variant: ScopeVariant,
    /// Sorted parameter positions eligible for masking.
    pub indices: Vec<usize>,
}

impl MaskScope {
    pub fn new(variant: ScopeVariant, params: &DenoiserParams) -> Self {
        let indices = match variant {
            ScopeVariant::AllParams => (0..params.len()).collect(),
            ScopeVariant::ConditionCoupling => {
                let mut idx: Vec<usize> = Vec::new();
                for name in ["w0", "b0", "cond_embed"] {
                    idx.extend(params.entry(name).range());
                }
                idx.sort_unstable();
                idx
            }
        };
        MaskScope { variant, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DynamicMask {
    /// Membership bitmap over [0, N); positions outside scope are always false.
    active: Vec<bool>,
    pub sparsity: f64,
    pub scope: MaskScope,
    pub active_count: usize,
}

impl DynamicMask {
    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub a: Vec<f64>,
    pub steps_accumulated: usize,
}

impl GradAccumulator {
    pub fn zeros(n: usize) -> Self {
        GradAccumulator {
            a: vec![0.0; n],
            steps_accumulated: 0,
        }
    }
}

/// A^(t+1) = A^(t) + g^(t)
pub fn accumulate(acc: &mut GradAccumulator, g: &GradientVector) -> Result<()> {
    if acc.a.len() != g.flat.len() {
        return Err(Error::contract("accumulator/gradient length mismatch"));
    }
    for (a, b) in acc.a.iter_mut().zip(&g.flat) {
        *a += b;
    }
    acc.steps_accumulated += 1;
    Ok(())
}

pub fn reset(acc: &mut GradAccumulator) {
    acc.a.iter_mut().for_each(|v| *v = 0.0);
    acc.steps_accumulated = 0;
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MaskSchedule {
    /// Initial drop/add update ratio.
    pub r_m: f64,
    /// Total unlearning steps per concept.
    pub t_end: usize,
    /// Steps between mask updates.
    pub delta_t: usize,
    pub warmup_steps: usize,
}

impl MaskSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_m > 0.0 && self.r_m <= 1.0) {
            return Err(Error::contract("r_m must be in (0, 1]"));
        }
        if self.delta_t < 1 {
            return Err(Error::contract("delta_t must be >= 1"));
        }
        if self.warmup_steps < 1 {
            return Err(Error::contract("warmup_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Sort candidate positions by |A| with the requested direction, ties broken
/// by lowest index (indices arrive sorted, and the sort is stable).
fn sorted_by_magnitude(mut idx: Vec<usize>, a: &[f64], descending: bool) -> Vec<usize> {
    idx.sort_by(|&i, &j| {
        let (ai, aj) = (a[i].abs(), a[j].abs());
        if descending {
            aj.total_cmp(&ai)
        } else {
            ai.total_cmp(&aj)
        }
    });
    idx
}

/// Threshold the accumulated gradient into a mask: the k = round((1-s)*|scope|)
/// in-scope positions with largest |A| become active.
pub fn init_mask(acc: &GradAccumulator, sparsity: f64, scope: &MaskScope) -> Result<DynamicMask> {
    if acc.steps_accumulated < 1 {
        return Err(Error::contract("mask init requires at least one accumulated step"));
    }
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::contract("sparsity must be in (0, 1)"));
    }
    let k = ((1.0 - sparsity) * scope.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::contract("sparsity too high: no active positions"));
    }
    let ranked = sorted_by_magnitude(scope.indices.clone(), &acc.a, true);
    let mut active = vec![false; acc.a.len()];
    for &i in ranked.iter().take(k) {
        active[i] = true;
    }
    Ok(DynamicMask {
        active,
        sparsity,
        scope: scope.clone(),
        active_count: k,
    })
}

/// tau = (r_m / 2) (1 + cos(t pi / T_end))
pub fn cosine_ratio(t: usize, r_m: f64, t_end: usize) -> Result<f64> {
    if t_end < 1 {
        return Err(Error::contract("t_end must be >= 1"));
    }
    if t > t_end {
        return Err(Error::contract(format!("t = {t} out of [0, {t_end}]")));
    }
    Ok(r_m / 2.0 * (1.0 + (t as f64 * std::f64::consts::PI / t_end as f64).cos()))
}

/// Outcome of one drop/add refresh.
#[derive(Debug, Clone, Copy)]
pub struct MaskUpdate {
    pub dropped: usize,
    pub added: usize,
}

/// Replace m = floor(tau * active_count) positions: drop the m active with
/// smallest |A|, add the m inactive in-scope with largest |A|.
pub fn update_mask(mask: &mut DynamicMask, acc: &GradAccumulator, tau: f64) -> Result<MaskUpdate> {
    if acc.steps_accumulated < 1 {
        return Err(Error::contract("mask update requires accumulated gradients"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::contract("tau must be in [0, 1]"));
    }
    let m = (tau * mask.active_count as f64).floor() as usize;
    if m == 0 {
        return Ok(MaskUpdate { dropped: 0, added: 0 });
    }
    let (active_in_scope, inactive_in_scope): (Vec<usize>, Vec<usize>) = {
        let mut act = Vec::new();
        let mut inact = Vec::new();
        for &i in &mask.scope.indices {
            if mask.active[i] {
                act.push(i);
            } else {
                inact.push(i);
            }
        }
        (act, inact)
    };
    let m = m.min(inactive_in_scope.len());
    let drop = sorted_by_magnitude(active_in_scope, &acc.a, false);
    let add = sorted_by_magnitude(inactive_in_scope, &acc.a, true);
    for &i in drop.iter().take(m) {
        mask.active[i] = false;
    }
    for &i in add.iter().take(m) {
        mask.active[i] = true;
    }
    debug_assert_eq!(mask.count_active(), mask.active_count);
    Ok(MaskUpdate { dropped: m, added: m })
}

/// Adam state with per-position step counts so that masked-out positions keep
/// their moments (and bias correction) untouched.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step on g~ = M (*) g. Positions with mask 0 are untouched.
pub fn apply_masked_update(
    params: &mut DenoiserParams,
    g: &GradientVector,
    mask: &DynamicMask,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != g.flat.len() || params.len() != opt.m.len() {
        return Err(Error::contract("parameter/gradient/optimizer length mismatch"));
    }
    if !g.all_finite() {
        return Err(Error::contract("non-finite gradient; step aborted"));
    }
    for i in 0..params.len() {
        if !mask.active[i] {
            continue;
        }
        let gi = g.flat[i];
        opt.t[i] += 1;
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * gi;
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * gi * gi;
        let t = opt.t[i] as f64;
        let m_hat = opt.m[i] / (1.0 - opt.beta1.powf(t));
        let v_hat = opt.v[i] / (1.0 - opt.beta2.powf(t));
        params.flat[i] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// One row of the mask-stats report.
#[derive(Debug, Clone)]
pub struct MaskStatsRow {
    pub step: usize,
    pub tau: f64,
    pub dropped: usize,
    pub added: usize,
    pub active_count: usize,
    pub overlap_with_initial_mask: f64,
}

pub fn mask_stats_header() -> &'static str {
    "step,tau,dropped,added,active_count,overlap_with_initial_mask"
}

impl MaskStatsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.tau, self.dropped, self.added, self.active_count, self.overlap_with_initial_mask
        )
    }
}
