//! Bayes-oracle evaluation: forgetting effectiveness, retention, and
//! superclass alignment of generated samples.

use std::collections::HashSet;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::concepts::{classify, classify_super, ConceptRegistry};
use crate::diffusion::{sample, NoiseSchedule};
use crate::nn::DenoiserParams;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_concept_forget_rate: Vec<(usize, f64)>,
    pub others_acc: f64,
    pub super_align: Vec<(usize, f64)>,
    pub n_eval: usize,
    pub seed: u64,
}

/// Fraction of samples generated under `concept_id` that still classify as it.
pub fn forget_rate(
    params: &DenoiserParams,
    reg: &ConceptRegistry,
    concept_id: usize,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n < 1 {
        return Err(Error::contract("n must be >= 1"));
    }
    let rows = sample(params, concept_id, sched, rng, n)?;
    let hits = rows.iter().filter(|x| classify(reg, x) == concept_id).count();
    Ok(hits as f64 / n as f64)
}

/// Mean correct-classification fraction over the retained subconcepts.
pub fn others_accuracy(
    params: &DenoiserParams,
    reg: &ConceptRegistry,
    forgotten: &HashSet<usize>,
    n_per: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let retained: Vec<usize> = reg
        .subconcepts
        .iter()
        .map(|c| c.id)
        .filter(|id| !forgotten.contains(id))
        .collect();
    if retained.is_empty() {
        return Err(Error::contract("every concept is forgotten; nothing to retain"));
    }
    let mut sum = 0.0;
    for &id in &retained {
        sum += forget_rate(params, reg, id, n_per, sched, rng)?;
    }
    Ok(sum / retained.len() as f64)
}

/// Fraction of samples under the forgotten condition that land in the right
/// superclass but are no longer classified as the forgotten concept.
pub fn super_alignment(
    params: &DenoiserParams,
    reg: &ConceptRegistry,
    concept_id: usize,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n < 1 {
        return Err(Error::contract("n must be >= 1"));
    }
    let super_id = reg
        .superclass_of(concept_id)
        .ok_or_else(|| Error::contract("not a subconcept"))?;
    let rows = sample(params, concept_id, sched, rng, n)?;
    Ok(alignment_fraction(reg, concept_id, super_id, &rows))
}

pub(crate) fn alignment_fraction(
    reg: &ConceptRegistry,
    concept_id: usize,
    super_id: usize,
    rows: &[Vec<f64>],
) -> f64 {
    let hits = rows
        .iter()
        .filter(|x| classify_super(reg, x) == super_id && classify(reg, x) != concept_id)
        .count();
    hits as f64 / rows.len() as f64
}

/// CSV with a config-hash comment line, a fixed header, and one row per
/// metric. The file is written to a temp sibling and renamed into place.
pub fn write_report(report: &EvalReport, reg: &ConceptRegistry, path: &Path, config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str("metric,concept,value,n,seed\n");
    for (c, v) in &report.per_concept_forget_rate {
        out.push_str(&format!(
            "forget_rate,{},{},{},{}\n",
            reg.token_name(*c),
            v,
            report.n_eval,
            report.seed
        ));
    }
    out.push_str(&format!(
        "others_acc,,{},{},{}\n",
        report.others_acc, report.n_eval, report.seed
    ));
    for (c, v) in &report.super_align {
        out.push_str(&format!(
            "super_alignment,{},{},{},{}\n",
            reg.token_name(*c),
            v,
            report.n_eval,
            report.seed
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
