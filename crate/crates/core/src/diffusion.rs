//! Forward corruption, the per-step loss, and the two reverse samplers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{self, normal_vec, streams, DetRng};
use crate::schedule::{respaced_steps, Schedule};
use crate::weighting::WeightTable;

/// A forward sample `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε` together with its `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPoint {
    pub values: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Anything that predicts the noise in `x_t`.
pub trait EpsModel: Sync {
    fn dim(&self) -> usize;
    fn predict_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl EpsModel for Denoiser {
    fn dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn predict_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.arch.predict_eps(&self.params, x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ancestral,
    Ddim,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Ddim => "ddim",
        })
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler `{other}` (expected ancestral or ddim)"
            ))),
        }
    }
}

/// Reverse-process variance for the ancestral sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `σ_t² = β_t`
    Beta,
    /// `σ_t² = β̃_t`, the forward posterior variance.
    PosteriorBeta,
}

impl std::str::FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(VarianceMode::Beta),
            "posterior_beta" => Ok(VarianceMode::PosteriorBeta),
            other => Err(Error::InvalidArgument(format!(
                "unknown variance mode `{other}` (expected beta or posterior_beta)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    /// DDIM stochasticity; 0 is deterministic.
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_var_mode")]
    pub var_mode: VarianceMode,
    /// Number of respaced steps; `None` runs every step.
    #[serde(default)]
    pub num_steps: Option<usize>,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Ancestral
}
fn default_var_mode() -> VarianceMode {
    VarianceMode::PosteriorBeta
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sampler: default_sampler(),
            eta: 0.0,
            var_mode: default_var_mode(),
            num_steps: None,
        }
    }
}

impl SamplerConfig {
    pub fn ddim(eta: f64, num_steps: Option<usize>) -> Self {
        Self {
            sampler: SamplerKind::Ddim,
            eta,
            num_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if self.num_steps == Some(0) {
            return Err(Error::InvalidConfig("num_steps must be positive".into()));
        }
        Ok(())
    }

    /// Decreasing step list starting at `from` (inclusive).
    pub fn steps_from(&self, from: usize) -> Result<Vec<usize>> {
        let count = self.num_steps.map_or(from, |n| n.min(from));
        respaced_steps(from, count)
    }
}

/// Ordered states from the first sampled step down to `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(usize, Vec<f64>)>,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub eta: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        &self.states.last().expect("trajectory is never empty").1
    }
}

/// `x_t` from `x_0` and a given noise vector.
pub fn corrupt(x0: &[f64], t: usize, sched: &Schedule, eps: &[f64]) -> Result<Vec<f64>> {
    let ab = sched.alpha_bar(t)?;
    if eps.len() != x0.len() {
        return Err(Error::ShapeMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Draws `ε ~ N(0, I)` and returns the corrupted point.
pub fn forward_sample(
    x0: &[f64],
    t: usize,
    sched: &Schedule,
    rng: &mut DetRng,
) -> Result<NoisyPoint> {
    sched.check_step(t)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("x0 has non-finite entries".into()));
    }
    let eps = normal_vec(rng, x0.len());
    let values = corrupt(x0, t, sched, &eps)?;
    Ok(NoisyPoint { values, t, eps })
}

/// `mse_weight[t] · mean((pred − target)²)`.
pub fn loss_term(
    pred_eps: &[f64],
    target_eps: &[f64],
    t: usize,
    table: &WeightTable,
) -> Result<f64> {
    if pred_eps.len() != target_eps.len() {
        return Err(Error::ShapeMismatch {
            expected: target_eps.len(),
            got: pred_eps.len(),
        });
    }
    if pred_eps.is_empty() {
        return Ok(0.0);
    }
    let mse = pred_eps
        .iter()
        .zip(target_eps)
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        / pred_eps.len() as f64;
    Ok(table.mse_weight_at(t)? * mse)
}

/// Mean of the forward posterior `q(x_{t−1} | x_t, x_0)`.
pub fn posterior_mean(x0: &[f64], x_t: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok(x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect())
}

/// Mean of the learned reverse step, given the predicted noise.
pub fn model_mean(x_t: &[f64], pred_eps: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let c = beta / (1.0 - ab).sqrt();
    let s = 1.0 / (1.0 - beta).sqrt();
    Ok(x_t
        .iter()
        .zip(pred_eps)
        .map(|(x, e)| s * (x - c * e))
        .collect())
}

/// KL between isotropic Gaussians `N(mean_q, var_q·I)` and `N(mean_p, var_p·I)`.
pub fn gaussian_kl(mean_q: &[f64], var_q: f64, mean_p: &[f64], var_p: f64) -> f64 {
    let d = mean_q.len() as f64;
    let sq: f64 = mean_q
        .iter()
        .zip(mean_p)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    0.5 * (d * ((var_p / var_q).ln() + var_q / var_p - 1.0) + sq / var_p)
}

/// Per-step KL term evaluated from the two posterior means, both with the
/// fixed variance `β_t`, and scaled by two so it reads in the same units as
/// `coefficient · ‖ε − ε_θ‖²`.
pub fn kl_term(
    x0: &[f64],
    x_t: &[f64],
    pred_eps: &[f64],
    t: usize,
    sched: &Schedule,
) -> Result<f64> {
    let var = sched.beta(t)?;
    let mq = posterior_mean(x0, x_t, t, sched)?;
    let mp = model_mean(x_t, pred_eps, t, sched)?;
    Ok(2.0 * gaussian_kl(&mq, var, &mp, var))
}

/// Deterministic part of the ancestral update from `t` to `t_prev`, plus the
/// standard deviation of its noise. Respaced steps use the effective
/// `β = 1 − ᾱ_t/ᾱ_{t_prev}`.
fn ancestral_coefficients(
    t: usize,
    t_prev: usize,
    sched: &Schedule,
    var_mode: VarianceMode,
) -> Result<(f64, f64, f64)> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "previous step {t_prev} must be below {t}"
        )));
    }
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let beta = if t_prev + 1 == t {
        sched.beta(t)?
    } else {
        1.0 - ab / ab_prev
    };
    let var = if t_prev == 0 {
        0.0
    } else {
        match var_mode {
            VarianceMode::Beta => beta,
            VarianceMode::PosteriorBeta if t_prev + 1 == t => sched.posterior_var(t)?,
            VarianceMode::PosteriorBeta => beta * (1.0 - ab_prev) / (1.0 - ab),
        }
    };
    Ok((
        1.0 / (1.0 - beta).sqrt(),
        beta / (1.0 - ab).sqrt(),
        var.sqrt(),
    ))
}

/// Ancestral update with an explicit noise vector `z`.
pub fn ancestral_update(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    pred_eps: &[f64],
    sched: &Schedule,
    var_mode: VarianceMode,
    z: &[f64],
) -> Result<Vec<f64>> {
    let (scale, eps_coef, sigma) = ancestral_coefficients(t, t_prev, sched, var_mode)?;
    Ok(x_t
        .iter()
        .zip(pred_eps)
        .zip(z)
        .map(|((x, e), z)| scale * (x - eps_coef * e) + sigma * z)
        .collect())
}

/// One ancestral step `t → t−1`; no noise is added at `t = 1`.
pub fn ancestral_step(
    x_t: &[f64],
    t: usize,
    pred_eps: &[f64],
    sched: &Schedule,
    var_mode: VarianceMode,
    rng: &mut DetRng,
) -> Result<Vec<f64>> {
    ancestral_step_to(x_t, t, t - 1, pred_eps, sched, var_mode, rng)
}

pub fn ancestral_step_to(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    pred_eps: &[f64],
    sched: &Schedule,
    var_mode: VarianceMode,
    rng: &mut DetRng,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len(x_t, pred_eps)?;
    let z = if t_prev == 0 {
        vec![0.0; x_t.len()]
    } else {
        normal_vec(rng, x_t.len())
    };
    ancestral_update(x_t, t, t_prev, pred_eps, sched, var_mode, &z)
}

/// `x̂_0 = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t`.
pub fn predict_x0(x_t: &[f64], pred_eps: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t
        .iter()
        .zip(pred_eps)
        .map(|(x, e)| (x - b * e) / a)
        .collect())
}

fn ddim_sigma(t: usize, t_prev: usize, sched: &Schedule, eta: f64) -> Result<f64> {
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    Ok(eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt())
}

/// DDIM update with an explicit noise vector `z`.
pub fn ddim_update(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    pred_eps: &[f64],
    sched: &Schedule,
    eta: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "previous step {t_prev} must be below {t}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!(
            "eta must lie in [0, 1], got {eta}"
        )));
    }
    let x0 = predict_x0(x_t, pred_eps, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let sigma = ddim_sigma(t, t_prev, sched, eta)?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let a = ab_prev.sqrt();
    Ok(x0
        .iter()
        .zip(pred_eps)
        .zip(z)
        .map(|((x0, e), z)| a * x0 + dir * e + sigma * z)
        .collect())
}

pub fn ddim_step(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    pred_eps: &[f64],
    sched: &Schedule,
    eta: f64,
    rng: &mut DetRng,
) -> Result<Vec<f64>> {
    check_len(x_t, pred_eps)?;
    let z = if eta > 0.0 && t_prev > 0 {
        normal_vec(rng, x_t.len())
    } else {
        vec![0.0; x_t.len()]
    };
    ddim_update(x_t, t, t_prev, pred_eps, sched, eta, &z)
}

fn check_len(x: &[f64], eps: &[f64]) -> Result<()> {
    if x.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            got: eps.len(),
        });
    }
    Ok(())
}

fn check_steps(steps: &[usize], sched: &Schedule) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("step list is empty".into()));
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "steps must be strictly decreasing".into(),
        ));
    }
    sched.check_step(steps[0])?;
    sched.check_step(*steps.last().unwrap())
}

/// Runs the reverse chain from `x` at `steps[0]` down to `t = 0`, calling
/// `visit` on every new state.
fn run_chain<M: EpsModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    steps: &[usize],
    cfg: &SamplerConfig,
    mut x: Vec<f64>,
    rng: &mut DetRng,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict_eps(&x, t)?;
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteModel);
        }
        x = match cfg.sampler {
            SamplerKind::Ancestral => {
                ancestral_step_to(&x, t, t_prev, &eps, sched, cfg.var_mode, rng)?
            }
            SamplerKind::Ddim => ddim_step(&x, t, t_prev, &eps, sched, cfg.eta, rng)?,
        };
        visit(t_prev, &x);
    }
    Ok(x)
}

/// Generator for trajectory `index` of a batch seeded with `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> DetRng {
    rng::stream(seed, streams::SAMPLING + index)
}

/// One full trajectory from `x ~ N(0, I)` at `steps[0]` down to `t = 0`.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    steps: &[usize],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_steps(steps, sched)?;
    let mut rng = trajectory_rng(seed, 0);
    let x = normal_vec(&mut rng, model.dim());
    let mut states = vec![(steps[0], x.clone())];
    run_chain(model, sched, steps, cfg, x, &mut rng, |t, x| {
        states.push((t, x.to_vec()))
    })?;
    Ok(Trajectory {
        states,
        seed,
        sampler: cfg.sampler,
        eta: cfg.eta,
    })
}

/// Final states of `n` independent trajectories. Trajectory `i` uses its own
/// generator, so the output does not depend on the thread count.
pub fn sample_many<M: EpsModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let steps = cfg.steps_from(sched.num_timesteps())?;
    check_steps(&steps, sched)?;
    let one = |i: usize| -> Result<Vec<f64>> {
        let mut rng = trajectory_rng(seed, i as u64);
        let x = normal_vec(&mut rng, model.dim());
        run_chain(model, sched, &steps, cfg, x, &mut rng, |_, _| {})
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(one).collect()
    }
}

/// Corrupts `x0` to `t_start` and denoises it back to `t = 0`.
pub fn reconstruct<M: EpsModel + ?Sized>(
    model: &M,
    x0: &[f64],
    t_start: usize,
    sched: &Schedule,
    cfg: &SamplerConfig,
    rng: &mut DetRng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if t_start == 0 {
        return Ok(x0.to_vec());
    }
    let noisy = forward_sample(x0, t_start, sched, rng)?;
    let steps = cfg.steps_from(t_start)?;
    run_chain(model, sched, &steps, cfg, noisy.values, rng, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianMixtureOptimum;
    use crate::schedule::ScheduleFamily;
    use crate::weighting::{build_weight_table, WeightingConfig};

    fn linear() -> Schedule {
        Schedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_consistent() {
        let s = linear();
        let x0 = vec![0.5, -0.3];
        let a = forward_sample(&x0, 300, &s, &mut rng::seeded(4)).unwrap();
        let b = forward_sample(&x0, 300, &s, &mut rng::seeded(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values, corrupt(&x0, 300, &s, &a.eps).unwrap());
        assert!(forward_sample(&x0, 0, &s, &mut rng::seeded(4)).is_err());
        assert!(forward_sample(&[f64::NAN], 3, &s, &mut rng::seeded(4)).is_err());
    }

    #[test]
    fn zero_noise_is_identity_limit() {
        let s = linear();
        let x0 = vec![0.25, 1.0];
        assert_eq!(corrupt(&x0, 0, &s, &[0.0, 0.0]).unwrap(), x0);
    }

    #[test]
    fn loss_term_schemes() {
        let s = linear();
        let pred = [0.3, -0.2, 1.0];
        let target = [0.1, 0.2, 0.5];
        let mse = (0.04 + 0.16 + 0.25) / 3.0;
        let base = build_weight_table(&s, &WeightingConfig::baseline()).unwrap();
        let p2 = build_weight_table(&s, &WeightingConfig::p2(1.0, 1.0)).unwrap();
        assert_eq!(loss_term(&pred, &pred, 10, &base).unwrap(), 0.0);
        assert!((loss_term(&pred, &target, 10, &base).unwrap() - mse).abs() < 1e-15);
        let expected = (1.0 - s.alpha_bar(10).unwrap()) * mse;
        assert!((loss_term(&pred, &target, 10, &p2).unwrap() - expected).abs() < 1e-12 * expected);
        assert!(loss_term(&pred, &target[..2], 10, &base).is_err());
    }

    #[test]
    fn ancestral_final_step_is_noise_free() {
        let s = linear();
        let x0 = vec![0.7, -0.4];
        let noisy = forward_sample(&x0, 1, &s, &mut rng::seeded(2)).unwrap();
        for mode in [VarianceMode::Beta, VarianceMode::PosteriorBeta] {
            let a = ancestral_step(&noisy.values, 1, &noisy.eps, &s, mode, &mut rng::seeded(9))
                .unwrap();
            let b = ancestral_step(&noisy.values, 1, &noisy.eps, &s, mode, &mut rng::seeded(10))
                .unwrap();
            assert_eq!(a, b);
            let expected = model_mean(&noisy.values, &noisy.eps, 1, &s).unwrap();
            assert_eq!(a, expected);
            // At t = 1 the deterministic map inverts the corruption exactly.
            for (x, y) in a.iter().zip(&x0) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn beta_mode_sigma_is_sqrt_beta() {
        let s = linear();
        let (_, _, sigma) = ancestral_coefficients(400, 399, &s, VarianceMode::Beta).unwrap();
        assert_eq!(sigma, s.beta(400).unwrap().sqrt());
        let (_, _, sigma) =
            ancestral_coefficients(400, 399, &s, VarianceMode::PosteriorBeta).unwrap();
        assert_eq!(sigma, s.posterior_var(400).unwrap().sqrt());
    }

    #[test]
    fn ddim_deterministic_and_x0_recovery() {
        let s = linear();
        let x0 = vec![0.3, -0.9, 0.1];
        let noisy = forward_sample(&x0, 700, &s, &mut rng::seeded(1)).unwrap();
        let a = ddim_step(
            &noisy.values,
            700,
            0,
            &noisy.eps,
            &s,
            0.0,
            &mut rng::seeded(1),
        )
        .unwrap();
        let b = ddim_step(
            &noisy.values,
            700,
            0,
            &noisy.eps,
            &s,
            0.0,
            &mut rng::seeded(99),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, predict_x0(&noisy.values, &noisy.eps, 700, &s).unwrap());
        for (x, y) in a.iter().zip(&x0) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(ddim_step(
            &noisy.values,
            700,
            700,
            &noisy.eps,
            &s,
            0.0,
            &mut rng::seeded(1)
        )
        .is_err());
        assert!(ddim_step(
            &noisy.values,
            700,
            800,
            &noisy.eps,
            &s,
            0.0,
            &mut rng::seeded(1)
        )
        .is_err());
    }

    #[test]
    fn ddim_eta_one_matches_posterior_ancestral() {
        let s = linear();
        let x = vec![0.4, -1.2];
        let eps = vec![0.1, 0.3];
        let z = vec![0.5, -0.7];
        for (t, t_prev) in [(500, 499), (500, 480), (2, 1)] {
            let a =
                ancestral_update(&x, t, t_prev, &eps, &s, VarianceMode::PosteriorBeta, &z).unwrap();
            let d = ddim_update(&x, t, t_prev, &eps, &s, 1.0, &z).unwrap();
            for (u, v) in a.iter().zip(&d) {
                assert!((u - v).abs() < 1e-10, "t={t}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn sample_checks_steps() {
        let s = Schedule::from_betas(ScheduleFamily::Linear, vec![0.1; 10]).unwrap();
        let model = GaussianMixtureOptimum::standard_normal(1, &s);
        let cfg = SamplerConfig::default();
        assert!(sample(&model, &s, &[], &cfg, 0).is_err());
        assert!(sample(&model, &s, &[3, 5], &cfg, 0).is_err());
        assert!(sample(&model, &s, &[11, 5], &cfg, 0).is_err());
        let tr = sample(&model, &s, &[10, 7, 3, 1], &cfg, 5).unwrap();
        let ts: Vec<usize> = tr.states.iter().map(|(t, _)| *t).collect();
        assert_eq!(ts, vec![10, 7, 3, 1, 0]);
        assert_eq!(tr, sample(&model, &s, &[10, 7, 3, 1], &cfg, 5).unwrap());
    }

    #[test]
    fn reconstruct_from_zero_is_identity() {
        let s = linear();
        let model = GaussianMixtureOptimum::standard_normal(2, &s);
        let x0 = vec![0.1, 0.2];
        let out = reconstruct(
            &model,
            &x0,
            0,
            &s,
            &SamplerConfig::default(),
            &mut rng::seeded(0),
        )
        .unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn kl_matches_coefficient_mse() {
        let s = linear();
        let x0 = vec![0.2, -0.5];
        let noisy = forward_sample(&x0, 321, &s, &mut rng::seeded(8)).unwrap();
        let pred = vec![noisy.eps[0] + 0.3, noisy.eps[1] - 0.1];
        let kl = kl_term(&x0, &noisy.values, &pred, 321, &s).unwrap();
        let coef = crate::weighting::vlb_coefficient(&s, 321).unwrap();
        let mse_form = coef * (0.09 + 0.01);
        assert!((kl - mse_form).abs() < 1e-10 * mse_form);
    }
}
