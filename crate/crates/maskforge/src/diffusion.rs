//! Noise schedule, forward noising, base diffusion training loss, and
//! ancestral sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::{denoise, BatchGrad, DenoiserParams, GradientVector};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Cumulative products of alpha, indexed by t - 1.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// alpha_bar at step t (1-based).
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::contract("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::contract(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
pub fn noisify(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::contract(format!("t = {t} out of schedule range")));
    }
    let ab = sched.alpha_bar_at(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect())
}

/// A batch of samples with their noising realizations.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x0: Vec<Vec<f64>>,
    pub t: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
    pub x_t: Vec<Vec<f64>>,
}

impl NoisedBatch {
    pub fn new(x0: Vec<Vec<f64>>, t: Vec<usize>, eps: Vec<Vec<f64>>, sched: &NoiseSchedule) -> Result<Self> {
        if x0.len() != t.len() || x0.len() != eps.len() {
            return Err(Error::contract("NoisedBatch component lengths differ"));
        }
        let x_t = x0
            .iter()
            .zip(&t)
            .zip(&eps)
            .map(|((x, &ti), e)| noisify(x, ti, e, sched))
            .collect::<Result<Vec<_>>>()?;
        Ok(NoisedBatch { x0, t, eps, x_t })
    }
}

pub fn draw_noise(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Base diffusion loss (per-element mean squared error between true and
/// predicted noise) and its exact gradient. t is drawn uniformly per batch
/// element; eps per element from `rng`.
pub fn diffusion_loss_and_grad(
    params: &DenoiserParams,
    batch: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradientVector)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let d = params.arch.data_dim;
    let t_max = sched.t_max();
    let norm = (batch.len() * d) as f64;
    let mut loss = 0.0;
    let mut bg = BatchGrad::new(params.len());
    for (x0, cond) in batch {
        let t = rng.gen_range(1..=t_max);
        let eps = draw_noise(d, rng);
        let x_t = noisify(x0, t, &eps, sched)?;
        let pred = denoise(params, &x_t, t, t_max, *cond)?;
        let residual: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| p - e).collect();
        loss += residual.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r / norm).collect();
        bg.accumulate(params, &x_t, t, t_max, *cond, &upstream)?;
    }
    Ok((loss / norm, bg.grad))
}

/// Ancestral DDPM sampling: n trajectories from x_T ~ N(0, I) down to x_1,
/// with sqrt(beta_t) noise injected for t > 1 and none at the final step.
pub fn sample(
    params: &DenoiserParams,
    cond: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(Error::contract("n must be >= 1"));
    }
    let d = params.arch.data_dim;
    let t_max = sched.t_max();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = draw_noise(d, rng);
        for t in (1..=t_max).rev() {
            let beta = sched.beta[t - 1];
            let alpha = sched.alpha[t - 1];
            let ab = sched.alpha_bar_at(t);
            let pred = denoise(params, &x, t, t_max, cond)?;
            let coef = beta / (1.0 - ab).sqrt();
            for (xi, pi) in x.iter_mut().zip(&pred) {
                *xi = (*xi - coef * pi) / alpha.sqrt();
            }
            if t > 1 {
                let z = draw_noise(d, rng);
                let s = beta.sqrt();
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += s * zi;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("sampling produced non-finite values"));
        }
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Architecture};
    use crate::rng::stream;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.beta, vec![0.1]);
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_monotone_and_product_identity() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 1..=200 {
            prod *= 1.0 - s.beta[t - 1];
            assert!((s.alpha_bar_at(t) - prod).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            }
        }
        assert!((s.beta[0] - 1e-4).abs() < 1e-15);
        assert!((s.beta[199] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_range() {
        assert!(make_schedule(10, 0.02, 0.01).is_err());
        assert!(make_schedule(0, 0.01, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
    }

    #[test]
    fn noisify_limits() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        // eps = 0 branch
        let x_t = noisify(&[2.0, -3.0], 4, &[0.0, 0.0], &s).unwrap();
        let sa = s.alpha_bar_at(4).sqrt();
        assert!((x_t[0] - sa * 2.0).abs() < 1e-15);
        assert!((x_t[1] + sa * 3.0).abs() < 1e-15);
        // abar := 1 limit applied directly to the formula
        let x = [1.5, 0.5];
        let direct: Vec<f64> = x.iter().map(|v| 1.0f64.sqrt() * v).collect();
        assert_eq!(direct, x.to_vec());
        assert!(noisify(&[0.0, 0.0], 11, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn noised_batch_satisfies_identity() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = stream(3, "test-nb", 0);
        let x0: Vec<Vec<f64>> = (0..8).map(|_| draw_noise(2, &mut rng)).collect();
        let t: Vec<usize> = (0..8).map(|_| rng.gen_range(1..=50)).collect();
        let eps: Vec<Vec<f64>> = (0..8).map(|_| draw_noise(2, &mut rng)).collect();
        let nb = NoisedBatch::new(x0, t, eps, &s).unwrap();
        for i in 0..8 {
            let ab = s.alpha_bar_at(nb.t[i]);
            for j in 0..2 {
                let expect = ab.sqrt() * nb.x0[i][j] + (1.0 - ab).sqrt() * nb.eps[i][j];
                assert!((nb.x_t[i][j] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn noisify_monte_carlo_moments() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let x0 = [1.0, -2.0];
        let t = 100;
        let ab = s.alpha_bar_at(t);
        let n = 100_000;
        let mut rng = stream(5, "test-mc", 0);
        let mut mean = [0.0f64; 2];
        let mut m2 = [0.0f64; 2];
        for _ in 0..n {
            let eps = draw_noise(2, &mut rng);
            let x_t = noisify(&x0, t, &eps, &s).unwrap();
            for j in 0..2 {
                mean[j] += x_t[j];
                m2[j] += x_t[j] * x_t[j];
            }
        }
        let nf = n as f64;
        for j in 0..2 {
            mean[j] /= nf;
            let var = m2[j] / nf - mean[j] * mean[j];
            let expect_mean = ab.sqrt() * x0[j];
            let expect_var = 1.0 - ab;
            // 4 standard errors of the mean / variance estimators
            let se_mean = expect_var.sqrt() / nf.sqrt();
            let se_var = expect_var * (2.0 / nf).sqrt();
            assert!((mean[j] - expect_mean).abs() < 4.0 * se_mean);
            assert!((var - expect_var).abs() < 4.0 * se_var);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_rejects_empty_batch() {
        let p = init_params(&Architecture::default(), 1).unwrap();
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let mut rng = stream(1, "test-loss", 0);
        let batch = vec![(vec![1.0, 2.0], 0usize), (vec![-1.0, 0.5], 3)];
        let (loss, grad) = diffusion_loss_and_grad(&p, &batch, &s, &mut rng).unwrap();
        assert!(loss >= 0.0);
        assert!(grad.all_finite());
        assert!(diffusion_loss_and_grad(&p, &[], &s, &mut rng).is_err());
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let arch = Architecture {
            data_dim: 2,
            hidden_dims: vec![4],
            cond_vocab: 3,
            cond_embed_dim: 3,
            time_embed_dim: 4,
        };
        let p = init_params(&arch, 7).unwrap();
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let batch = vec![(vec![0.5, -0.3], 1usize), (vec![-1.0, 0.8], 2)];
        let (_, grad) = diffusion_loss_and_grad(&p, &batch, &s, &mut stream(9, "fd", 0)).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp.flat[i] += h;
            let (lp, _) = diffusion_loss_and_grad(&pp, &batch, &s, &mut stream(9, "fd", 0)).unwrap();
            pp.flat[i] -= 2.0 * h;
            let (lm, _) = diffusion_loss_and_grad(&pp, &batch, &s, &mut stream(9, "fd", 0)).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let a = grad.flat[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-5, "param {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn sample_shape_and_determinism() {
        let p = init_params(&Architecture::default(), 2).unwrap();
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let a = sample(&p, 1, &s, &mut stream(4, "s", 0), 3).unwrap();
        let b = sample(&p, 1, &s, &mut stream(4, "s", 0), 3).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| v.is_finite()));
    }
}
