//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The heavy end-to-end artifacts (pretrained bases and full unlearning
//! sequences for seeds 1-3, at two regularization weights) are computed once
//! and shared across criteria 4, 6, 7, and 9.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use maskforge::concepts::{default_registry, ConceptRegistry};
use maskforge::config::RunConfig;
use maskforge::diffusion::{
    diffusion_loss_and_grad, draw_noise, make_schedule, noisify, NoiseSchedule,
};
use maskforge::masking::{
    self, accumulate, cosine_ratio, init_mask, update_mask, GradAccumulator, MaskScope,
    ScopeVariant,
};
use maskforge::nn::{init_params, Architecture, DenoiserParams};
use maskforge::rng::stream;
use maskforge::unlearning::{
    align_loss, build_forget_set, build_super_set, pretrain, reg_loss, total_loss,
    unlearn_loss, unlearn_concept, unlearn_sequence, ForgetTask, LossWeights,
    SequenceOutcome, TeacherSnapshot, TrainerState,
};

const SEEDS: [u64; 3] = [1, 2, 3];

fn verdict(id: u32, name: &str, pass: bool) {
    println!(
        "ACCEPTANCE #{id} {name}: {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion #{id} ({name}) failed");
}

struct SeedRun {
    seed: u64,
    base: DenoiserParams,
    base_per_concept: Vec<f64>,
    outcome: SequenceOutcome,
    final_params: DenoiserParams,
    outcome_beta0: SequenceOutcome,
}

struct Heavy {
    cfg: RunConfig,
    reg: ConceptRegistry,
    sched: NoiseSchedule,
    runs: Vec<SeedRun>,
}

fn run_sequence(
    cfg: &RunConfig,
    reg: &ConceptRegistry,
    sched: &NoiseSchedule,
    base: &DenoiserParams,
    seed: u64,
    beta: f64,
) -> (SequenceOutcome, DenoiserParams) {
    let tasks: Vec<ForgetTask> = cfg
        .unlearn
        .tasks
        .iter()
        .map(|n| ForgetTask::new(reg, reg.token_by_name(n).unwrap()).unwrap())
        .collect();
    let mut ucfg = cfg.unlearn.clone();
    ucfg.beta = beta;
    let mut state = TrainerState {
        params: base.clone(),
        teacher: TeacherSnapshot { params: base.clone(), provenance: 0 },
        registry: reg.clone(),
        sched: sched.clone(),
    };
    let outcome = unlearn_sequence(&mut state, &tasks, &ucfg, cfg.eval.n_eval, seed).unwrap();
    assert!(outcome.diverged.is_none(), "sequence diverged");
    (outcome, state.params)
}

fn heavy() -> &'static Heavy {
    static CELL: OnceLock<Heavy> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::default();
        let reg = default_registry();
        let sched = make_schedule(
            cfg.schedule.t_steps,
            cfg.schedule.beta_start,
            cfg.schedule.beta_end,
        )
        .unwrap();
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let (base, _) = pretrain(&reg, &sched, &cfg.arch, &cfg.pretrain, seed).unwrap();
                let base_per_concept = reg
                    .subconcepts
                    .iter()
                    .map(|c| {
                        maskforge::eval::forget_rate(
                            &base,
                            &reg,
                            c.id,
                            cfg.eval.n_eval,
                            &sched,
                            &mut stream(seed, "acceptance-base-acc", c.id as u64),
                        )
                        .unwrap()
                    })
                    .collect();
                let (outcome, final_params) =
                    run_sequence(&cfg, &reg, &sched, &base, seed, cfg.unlearn.beta);
                let (outcome_beta0, _) = run_sequence(&cfg, &reg, &sched, &base, seed, 0.0);
                SeedRun { seed, base, base_per_concept, outcome, final_params, outcome_beta0 }
            })
            .collect();
        Heavy { cfg, reg, sched, runs }
    })
}

#[test]
fn criterion_1_cosine_schedule_identities() {
    let t_end = 800;
    let a = (cosine_ratio(0, 0.3, t_end).unwrap() - 0.3).abs();
    let b = cosine_ratio(t_end, 0.3, t_end).unwrap().abs();
    let c = (cosine_ratio(t_end / 2, 0.3, t_end).unwrap() - 0.15).abs();
    verdict(1, "cosine schedule identities", a < 1e-12 && b < 1e-12 && c < 1e-12);
}

#[test]
fn criterion_2_mask_conservation() {
    let arch = Architecture {
        data_dim: 2,
        hidden_dims: vec![6, 5],
        cond_vocab: 4,
        cond_embed_dim: 3,
        time_embed_dim: 4,
    };
    let params = init_params(&arch, 5).unwrap();
    let mut ok = true;
    for trial in 0..1000u64 {
        let mut rng = stream(42, "acceptance-mask", trial);
        let variant = if rng.gen::<bool>() { ScopeVariant::AllParams } else { ScopeVariant::ConditionCoupling };
        let scope = MaskScope::new(variant, &params);
        let mut acc = GradAccumulator::zeros(params.len());
        let mut g = maskforge::nn::GradientVector::zeros(params.len());
        for v in g.flat.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        accumulate(&mut acc, &g).unwrap();
        let sparsity = rng.gen_range(0.05..0.95);
        let mut mask = init_mask(&acc, sparsity, &scope).unwrap();
        let count = mask.count_active();
        let in_scope: HashSet<usize> = scope.indices.iter().cloned().collect();
        for _ in 0..rng.gen_range(1..6) {
            for v in g.flat.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            masking::reset(&mut acc);
            accumulate(&mut acc, &g).unwrap();
            let tau = rng.gen_range(0.0..0.5);
            update_mask(&mut mask, &acc, tau).unwrap();
            ok &= mask.count_active() == count;
            ok &= mask.active_indices().iter().all(|i| in_scope.contains(i));
        }
        if !ok {
            break;
        }
    }
    verdict(2, "mask conservation under update sequences", ok);
}

fn tiny_setup() -> (DenoiserParams, NoiseSchedule) {
    let arch = Architecture {
        data_dim: 2,
        hidden_dims: vec![5, 4],
        cond_vocab: 13,
        cond_embed_dim: 3,
        time_embed_dim: 4,
    };
    (init_params(&arch, 7).unwrap(), make_schedule(10, 1e-3, 0.05).unwrap())
}

/// Central finite difference of a loss under a replayed rng stream.
fn central_fd<F>(params: &DenoiserParams, idx: usize, h: f64, eval: F) -> f64
where
    F: Fn(&DenoiserParams) -> f64,
{
    let mut plus = params.clone();
    plus.flat[idx] += h;
    let mut minus = params.clone();
    minus.flat[idx] -= h;
    (eval(&plus) - eval(&minus)) / (2.0 * h)
}

#[test]
fn criterion_3_gradient_exactness() {
    let (params, sched) = tiny_setup();
    let reg = default_registry();
    let task = ForgetTask::new(&reg, 0).unwrap();
    let teacher = TeacherSnapshot { params: init_params(&params.arch, 8).unwrap(), provenance: 0 };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut data_rng = stream(3, "acceptance-fd-data", trial);
        let batch: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| data_rng.gen_range(-6.0..6.0)).collect();
                (x, data_rng.gen_range(8..12))
            })
            .collect();
        let fbatch: Vec<(Vec<f64>, usize, usize)> = batch
            .iter()
            .map(|(x, _)| (x.clone(), task.concept_id, task.super_id))
            .collect();
        let idx = data_rng.gen_range(0..params.len());
        let noise = |t: u64| stream(3, "acceptance-fd-noise", trial * 8 + t);

        let (_, g) = diffusion_loss_and_grad(&params, &batch, &sched, &mut noise(0)).unwrap();
        let fd = central_fd(&params, idx, h, |p| {
            diffusion_loss_and_grad(p, &batch, &sched, &mut noise(0)).unwrap().0
        });
        worst = worst.max((g.flat[idx] - fd).abs() / g.flat[idx].abs().max(fd.abs()).max(1e-2));

        // The superclass branch is a frozen target: differentiate against the
        // base params' branch output, as the analytic gradient does.
        let frozen = params.clone();
        let (_, g) = unlearn_loss(&params, &fbatch, &sched, &mut noise(1)).unwrap();
        let fd = central_fd(&params, idx, h, |p| {
            let mut rng = noise(1);
            let d = p.arch.data_dim;
            let t_max = sched.t_max();
            let norm = (fbatch.len() * d) as f64;
            let mut loss = 0.0;
            for (x0, c, c_s) in &fbatch {
                let t = rng.gen_range(1..=t_max);
                let eps = draw_noise(d, &mut rng);
                let x_t = noisify(x0, t, &eps, &sched).unwrap();
                let target = maskforge::nn::denoise(&frozen, &x_t, t, t_max, *c_s).unwrap();
                let pred = maskforge::nn::denoise(p, &x_t, t, t_max, *c).unwrap();
                loss += pred
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            loss / norm
        });
        worst = worst.max((g.flat[idx] - fd).abs() / g.flat[idx].abs().max(fd.abs()).max(1e-2));

        let (_, g) = align_loss(&params, &batch, &sched, &mut noise(2)).unwrap();
        let fd = central_fd(&params, idx, h, |p| {
            align_loss(p, &batch, &sched, &mut noise(2)).unwrap().0
        });
        worst = worst.max((g.flat[idx] - fd).abs() / g.flat[idx].abs().max(fd.abs()).max(1e-2));

        let (_, g) = reg_loss(&params, &teacher, &batch, &sched, &mut noise(3)).unwrap();
        let fd = central_fd(&params, idx, h, |p| {
            reg_loss(p, &teacher, &batch, &sched, &mut noise(3)).unwrap().0
        });
        worst = worst.max((g.flat[idx] - fd).abs() / g.flat[idx].abs().max(fd.abs()).max(1e-2));
    }
    println!("  max relative error {worst:.3e}");
    verdict(3, "analytic gradients match finite differences", worst < 1e-5);
}

#[test]
fn criterion_4_masked_update_isolation() {
    let h = heavy();
    let base = &h.runs[0].base;
    let task = ForgetTask::new(
        &h.reg,
        h.reg.token_by_name(&h.cfg.unlearn.tasks[0]).unwrap(),
    )
    .unwrap();
    let mut ucfg = h.cfg.unlearn.clone();
    ucfg.t_end = 800;
    let mut state = TrainerState {
        params: base.clone(),
        teacher: TeacherSnapshot { params: base.clone(), provenance: 0 },
        registry: h.reg.clone(),
        sched: h.sched.clone(),
    };
    let run = unlearn_concept(&mut state, task, &ucfg, &[task], 1, 0).unwrap();
    let ok = (0..base.len())
        .filter(|&i| !run.ever_active[i])
        .all(|i| state.params.flat[i].to_bits() == base.flat[i].to_bits());
    verdict(4, "never-activated positions bit-identical after a task", ok);
}

#[test]
fn criterion_5_total_loss_linearity() {
    let (params, sched) = tiny_setup();
    let reg = default_registry();
    let task = ForgetTask::new(&reg, 0).unwrap();
    let teacher = TeacherSnapshot { params: init_params(&params.arch, 9).unwrap(), provenance: 0 };
    let mut rng = stream(5, "acceptance-linearity", 0);
    let fb: Vec<(Vec<f64>, usize, usize)> = (0..4)
        .map(|_| {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-6.0..6.0)).collect();
            (x, task.concept_id, task.super_id)
        })
        .collect();
    let sb: Vec<(Vec<f64>, usize)> = (0..4)
        .map(|_| {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-6.0..6.0)).collect();
            (x, task.super_id)
        })
        .collect();
    let weights = LossWeights { alpha: 0.25, beta: 0.25 };
    let mk = || stream(5, "acceptance-linearity", 1);
    let (breakdown, total) =
        total_loss(&params, &fb, &sb, &sb, &teacher, weights, &sched, &mut mk()).unwrap();
    // Replay the same three component streams total_loss derives internally.
    let mut outer = mk();
    let (s1, s2, s3) = (outer.gen::<u64>(), outer.gen::<u64>(), outer.gen::<u64>());
    use rand::SeedableRng;
    let (lu, gu) =
        unlearn_loss(&params, &fb, &sched, &mut ChaCha8Rng::seed_from_u64(s1)).unwrap();
    let (la, ga) = align_loss(&params, &sb, &sched, &mut ChaCha8Rng::seed_from_u64(s2)).unwrap();
    let (lr, gr) =
        reg_loss(&params, &teacher, &sb, &sched, &mut ChaCha8Rng::seed_from_u64(s3)).unwrap();
    let scalar_ok =
        (breakdown.total - (lu + 0.25 * la + 0.25 * lr)).abs() < 1e-12;
    let grad_ok = (0..params.len()).all(|i| {
        (total.flat[i] - (gu.flat[i] + 0.25 * ga.flat[i] + 0.25 * gr.flat[i])).abs() < 1e-12
    });
    verdict(5, "total gradient is the weighted sum of components", scalar_ok && grad_ok);
}

#[test]
fn criterion_6_end_to_end_sequential_unlearning() {
    let h = heavy();
    let mut all_ok = true;
    for run in &h.runs {
        let base_ok = run.base_per_concept.iter().all(|&a| a >= 0.85);
        let last = run.outcome.log.rows.last().unwrap();
        let mean_forget =
            last.forget_rates.iter().map(|(_, v)| v).sum::<f64>() / last.forget_rates.len() as f64;
        let align_ok = last.super_align.iter().all(|&(_, v)| v >= 0.80);
        let relapse = last.forget_rates[0].1;
        let seed_ok = base_ok
            && mean_forget <= 0.10
            && last.others_acc >= 0.85
            && align_ok
            && relapse <= 0.15;
        println!(
            "  seed {}: base_acc_ok={} mean_forget={:.3} others_acc={:.3} min_align={:.3} relapse={:.3} -> {}",
            run.seed,
            base_ok,
            mean_forget,
            last.others_acc,
            last.super_align.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min),
            relapse,
            if seed_ok { "ok" } else { "FAIL" }
        );
        all_ok &= seed_ok;
    }
    verdict(6, "sequential unlearning targets on seeds 1-3", all_ok);
}

#[test]
fn criterion_7_regularization_ablation() {
    let h = heavy();
    let relapse = |o: &SequenceOutcome| o.log.rows.last().unwrap().forget_rates[0].1;
    let with_reg: f64 =
        h.runs.iter().map(|r| relapse(&r.outcome)).sum::<f64>() / h.runs.len() as f64;
    let without: f64 =
        h.runs.iter().map(|r| relapse(&r.outcome_beta0)).sum::<f64>() / h.runs.len() as f64;
    println!("  mean first-concept relapse: beta=0.25 -> {with_reg:.3}, beta=0 -> {without:.3}");
    verdict(7, "dropping the distillation term worsens relapse", without > with_reg);
}

#[test]
fn criterion_8_forward_noising_moments() {
    let sched = make_schedule(200, 1e-4, 0.05).unwrap();
    let x0 = vec![3.0, -2.0];
    let n = 100_000usize;
    let mut ok = true;
    for (case, t) in [1usize, 100, 200].iter().enumerate() {
        let ab = sched.alpha_bar_at(*t);
        let want_mean: Vec<f64> = x0.iter().map(|v| ab.sqrt() * v).collect();
        let want_var = 1.0 - ab;
        let mut rng = stream(8, "acceptance-moments", case as u64);
        let mut sums = vec![0.0; 2];
        let mut sq = vec![0.0; 2];
        for _ in 0..n {
            let eps = draw_noise(2, &mut rng);
            let xt = noisify(&x0, *t, &eps, &sched).unwrap();
            for d in 0..2 {
                sums[d] += xt[d];
                sq[d] += (xt[d] - want_mean[d]) * (xt[d] - want_mean[d]);
            }
        }
        for d in 0..2 {
            let mean = sums[d] / n as f64;
            let var = sq[d] / n as f64;
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / n as f64).sqrt();
            ok &= (mean - want_mean[d]).abs() < 4.0 * se_mean;
            ok &= (var - want_var).abs() < 4.0 * se_var;
        }
    }
    verdict(8, "forward noising moments match closed form", ok);
}

#[test]
fn criterion_9_bit_identical_determinism() {
    let h = heavy();
    let run = &h.runs[0];
    let (_, repeat) =
        run_sequence(&h.cfg, &h.reg, &h.sched, &run.base, run.seed, h.cfg.unlearn.beta);
    let ok = run.final_params.len() == repeat.len()
        && (0..repeat.len())
            .all(|i| run.final_params.flat[i].to_bits() == repeat.flat[i].to_bits());
    verdict(9, "repeat run yields a bit-identical checkpoint", ok);
}

// Shared sanity for the data builders the end-to-end runs depend on.
#[test]
fn forget_and_super_sets_classify_to_their_concepts() {
    let h = heavy();
    let base = &h.runs[0].base;
    let task = ForgetTask::new(
        &h.reg,
        h.reg.token_by_name(&h.cfg.unlearn.tasks[0]).unwrap(),
    )
    .unwrap();
    let fs = build_forget_set(base, task, 100, &h.sched, &mut stream(1, "acc-ds", 0)).unwrap();
    let hits = fs
        .rows
        .iter()
        .filter(|(x, _, _)| maskforge::concepts::classify(&h.reg, x) == task.concept_id)
        .count();
    assert!(hits >= 80, "forget set purity {hits}/100");
    let ss = build_super_set(base, &h.reg, task, 100, &h.sched, &mut stream(1, "acc-ds", 1)).unwrap();
    let super_hits = ss
        .rows
        .iter()
        .filter(|(x, _)| maskforge::concepts::classify_super(&h.reg, x) == task.super_id)
        .count();
    assert!(super_hits >= 80, "super set purity {super_hits}/100");
}
