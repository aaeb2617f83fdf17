//! Command implementations behind the `maskforge` binary. Kept in the library
//! so integration tests can drive them directly.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::concepts::{save_registry, ConceptRegistry};
use crate::config::RunConfig;
use crate::diffusion::{make_schedule, sample, NoiseSchedule};
use crate::eval::{self, EvalReport};
use crate::masking::mask_stats_header;
use crate::nn::DenoiserParams;
use crate::plot::scatter_svg;
use crate::unlearning::{self, trace_header, ForgetTask, SequenceOutcome, TeacherSnapshot, TrainerState};
use crate::{Error, Result};

pub fn resolve_tasks(cfg: &RunConfig, reg: &ConceptRegistry) -> Result<Vec<ForgetTask>> {
    cfg.unlearn
        .tasks
        .iter()
        .map(|name| {
            let id = reg
                .token_by_name(name)
                .ok_or_else(|| Error::Config(format!("unknown concept '{name}'")))?;
            ForgetTask::new(reg, id).map_err(|_| Error::Config(format!("'{name}' is not a subconcept")))
        })
        .collect()
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.schedule.t_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

fn write_csv(path: &Path, config_hash: &str, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = format!("# config_hash={config_hash}\n{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Train the base model and persist checkpoint, loss curve, and registry.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let reg = cfg.registry()?;
    check_vocab(cfg, &reg)?;
    let sched = schedule(cfg)?;
    let (params, losses) = unlearning::pretrain(&reg, &sched, &cfg.arch, &cfg.pretrain, cfg.seed)?;
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join("base.mfck");
    checkpoint::save(&params, &ckpt)?;
    save_registry(&reg, &out.join("registry.json"))?;
    write_csv(
        &out.join("pretrain_loss.csv"),
        &cfg.hash(),
        "step,loss",
        losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    Ok(ckpt)
}

fn check_vocab(cfg: &RunConfig, reg: &ConceptRegistry) -> Result<()> {
    if cfg.arch.cond_vocab != reg.cond_vocab() {
        return Err(Error::Config(format!(
            "arch cond_vocab {} does not match registry vocab {}",
            cfg.arch.cond_vocab,
            reg.cond_vocab()
        )));
    }
    Ok(())
}

fn load_matching_checkpoint(cfg: &RunConfig, path: &Path) -> Result<DenoiserParams> {
    let params = checkpoint::load(path)?;
    if params.arch != cfg.arch {
        return Err(Error::Config(format!(
            "checkpoint architecture does not match config ({} params vs arch expecting {})",
            params.len(),
            cfg.arch.param_count()
        )));
    }
    Ok(params)
}

/// Run the full forgetting sequence from a base checkpoint and persist all
/// artifacts: final checkpoint, teachers, traces, mask stats, and eval rows.
pub fn cmd_unlearn(cfg: &RunConfig, base_checkpoint: &Path) -> Result<SequenceOutcome> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let reg = cfg.registry()?;
    check_vocab(cfg, &reg)?;
    let tasks = resolve_tasks(cfg, &reg)?;
    if tasks.is_empty() {
        return Err(Error::Config("task list is empty".into()));
    }
    let params = load_matching_checkpoint(cfg, base_checkpoint)?;
    let sched = schedule(cfg)?;
    let mut state = TrainerState {
        teacher: TeacherSnapshot { params: params.clone(), provenance: 0 },
        params,
        registry: reg.clone(),
        sched,
    };
    let outcome = unlearning::unlearn_sequence(&mut state, &tasks, &cfg.unlearn, cfg.eval.n_eval, cfg.seed)?;

    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    let hash = cfg.hash();
    checkpoint::save(&state.params, &out.join("final.mfck"))?;
    for teacher in &outcome.teachers {
        checkpoint::save(&teacher.params, &out.join(format!("teacher_{}.mfck", teacher.provenance)))?;
    }
    for (k, run) in outcome.runs.iter().enumerate() {
        write_csv(
            &out.join(format!("task_{k}_trace.csv")),
            &hash,
            trace_header(),
            run.trace.iter().map(|r| r.to_csv()),
        )?;
        write_csv(
            &out.join(format!("task_{k}_mask_stats.csv")),
            &hash,
            mask_stats_header(),
            run.mask_stats.iter().map(|r| r.to_csv()),
        )?;
    }
    write_csv(
        &out.join("sequence_eval.csv"),
        &hash,
        "after_task,metric,concept,value",
        outcome.log.rows.iter().flat_map(|row| {
            let mut lines = Vec::new();
            for (c, v) in &row.forget_rates {
                lines.push(format!("{},forget_rate,{},{}", row.after_task, reg.token_name(*c), v));
            }
            lines.push(format!("{},others_acc,,{}", row.after_task, row.others_acc));
            for (c, v) in &row.super_align {
                lines.push(format!(
                    "{},super_alignment,{},{}",
                    row.after_task,
                    reg.token_name(*c),
                    v
                ));
            }
            lines
        }),
    )?;
    if let Some(e) = outcome.diverged {
        return Err(e);
    }
    Ok(outcome)
}

/// Evaluate a checkpoint: forget rate and alignment for the configured task
/// concepts, accuracy over the rest.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, out_path: &Path) -> Result<EvalReport> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let reg = cfg.registry()?;
    check_vocab(cfg, &reg)?;
    let params = load_matching_checkpoint(cfg, ckpt)?;
    let sched = schedule(cfg)?;
    let tasks = resolve_tasks(cfg, &reg)?;
    let forgotten: HashSet<usize> = tasks.iter().map(|t| t.concept_id).collect();
    let n = cfg.eval.n_eval;
    let mut report = EvalReport {
        per_concept_forget_rate: Vec::new(),
        others_acc: 0.0,
        super_align: Vec::new(),
        n_eval: n,
        seed: cfg.seed,
    };
    for (j, t) in tasks.iter().enumerate() {
        let fr = eval::forget_rate(
            &params,
            &reg,
            t.concept_id,
            n,
            &sched,
            &mut crate::rng::stream(cfg.seed, "cmd-eval-forget", j as u64),
        )?;
        let sa = eval::super_alignment(
            &params,
            &reg,
            t.concept_id,
            n,
            &sched,
            &mut crate::rng::stream(cfg.seed, "cmd-eval-align", j as u64),
        )?;
        report.per_concept_forget_rate.push((t.concept_id, fr));
        report.super_align.push((t.concept_id, sa));
    }
    report.others_acc = eval::others_accuracy(
        &params,
        &reg,
        &forgotten,
        n,
        &sched,
        &mut crate::rng::stream(cfg.seed, "cmd-eval-others", 0),
    )?;
    eval::write_report(&report, &reg, out_path, &cfg.hash())?;
    Ok(report)
}

/// Sample points under one condition token; write CSV and an SVG scatter.
pub fn cmd_sample(cfg: &RunConfig, ckpt: &Path, cond: &str, n: usize, out_base: &Path) -> Result<()> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let reg = cfg.registry()?;
    check_vocab(cfg, &reg)?;
    let token = reg
        .token_by_name(cond)
        .ok_or_else(|| Error::Config(format!("unknown condition token '{cond}'")))?;
    let params = load_matching_checkpoint(cfg, ckpt)?;
    let sched = schedule(cfg)?;
    let rows = sample(&params, token, &sched, &mut crate::rng::stream(cfg.seed, "cmd-sample", token as u64), n)?;
    let d = cfg.arch.data_dim;
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    write_csv(
        &out_base.with_extension("csv"),
        &cfg.hash(),
        &header.join(","),
        rows.iter().map(|r| {
            r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }),
    )?;
    let title = format!("cond={} n={}", reg.token_name(token), n);
    let svg = scatter_svg(&reg, &rows, &title);
    std::fs::write(out_base.with_extension("svg"), svg)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum AblationAxis {
    Alpha,
    Beta,
    Sparsity,
    DeltaT,
}

/// Sweep one knob over the given values, re-running the full unlearning
/// pipeline per value from a shared base checkpoint. The relapse metric is
/// the first task's forget rate re-measured after the last task.
pub fn cmd_ablate(cfg: &RunConfig, base_checkpoint: &Path, axis: AblationAxis, values: &[f64]) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::Config("ablation values list is empty".into()));
    }
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    let mut rows: Vec<String> = Vec::new();
    let reg = cfg.registry()?;
    for &v in values {
        let mut sub = cfg.clone();
        let label = match axis {
            AblationAxis::Alpha => {
                sub.unlearn.alpha = v;
                "alpha"
            }
            AblationAxis::Beta => {
                sub.unlearn.beta = v;
                "beta"
            }
            AblationAxis::Sparsity => {
                sub.unlearn.sparsity = v;
                "sparsity"
            }
            AblationAxis::DeltaT => {
                sub.unlearn.delta_t = v as usize;
                "delta_T"
            }
        };
        sub.output_dir = out.join(format!("{label}_{v}")).to_string_lossy().into_owned();
        let outcome = cmd_unlearn(&sub, base_checkpoint)?;
        let last = outcome
            .log
            .rows
            .last()
            .ok_or_else(|| Error::Config("ablation run produced no eval rows".into()))?;
        for (c, fr) in &last.forget_rates {
            rows.push(format!("{label},{v},forget_rate,{},{fr}", reg.token_name(*c)));
        }
        rows.push(format!("{label},{v},others_acc,,{}", last.others_acc));
        for (c, sa) in &last.super_align {
            rows.push(format!("{label},{v},super_alignment,{},{sa}", reg.token_name(*c)));
        }
        if let Some((c, fr)) = last.forget_rates.first() {
            rows.push(format!("{label},{v},relapse_forget_rate,{},{fr}", reg.token_name(*c)));
        }
    }
    let path = out.join("ablation.csv");
    write_csv(&path, &cfg.hash(), "axis,value,metric,concept,metric_value", rows.into_iter())?;
    Ok(path)
}

/// Summarize the mask-stats CSVs of a previous run directory.
pub fn cmd_mask_stats(dir: &Path) -> Result<String> {
    let mut reports = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("task_") && n.ends_with("_mask_stats.csv"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no task_*_mask_stats.csv files under {}",
            dir.display()
        )));
    }
    for path in entries {
        let text = std::fs::read_to_string(&path)?;
        let mut updates = 0usize;
        let mut total_swaps = 0usize;
        let mut last_overlap = 1.0f64;
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("step,")) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                continue;
            }
            updates += 1;
            total_swaps += cols[2].parse::<usize>().unwrap_or(0) + cols[3].parse::<usize>().unwrap_or(0);
            last_overlap = cols[5].parse().unwrap_or(last_overlap);
        }
        reports.push(format!(
            "{}: {} mask updates, {} total drop/add swaps, final overlap with initial mask {:.3}",
            path.file_name().unwrap().to_string_lossy(),
            updates,
            total_swaps,
            last_overlap
        ));
    }
    Ok(reports.join("\n"))
}
