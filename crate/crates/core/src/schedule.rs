//! Discrete noise schedules and the per-step quantities derived from them.
//!
//! Step indices are 1-based (`1..=T`), matching the usual diffusion notation.
//! `alpha_bar(0)` is defined as 1 so that quantities involving the previous
//! step are well defined at `t = 1`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NUM_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
/// Upper bound on cosine-schedule betas; avoids a singular final step.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleFamily::Linear => f.write_str("linear"),
            ScheduleFamily::Cosine => f.write_str("cosine"),
        }
    }
}

impl std::str::FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleFamily::Linear),
            "cosine" => Ok(ScheduleFamily::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule family `{other}` (expected linear or cosine)"
            ))),
        }
    }
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub family: ScheduleFamily,
    #[serde(default = "default_num_timesteps")]
    pub num_timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_cosine_offset")]
    pub cosine_s: f64,
}

fn default_num_timesteps() -> usize {
    DEFAULT_NUM_TIMESTEPS
}
fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}
fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}
fn default_cosine_offset() -> f64 {
    DEFAULT_COSINE_OFFSET
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::linear(DEFAULT_NUM_TIMESTEPS)
    }
}

impl ScheduleConfig {
    pub fn linear(num_timesteps: usize) -> Self {
        Self {
            family: ScheduleFamily::Linear,
            num_timesteps,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            cosine_s: DEFAULT_COSINE_OFFSET,
        }
    }

    pub fn cosine(num_timesteps: usize) -> Self {
        Self {
            family: ScheduleFamily::Cosine,
            ..Self::linear(num_timesteps)
        }
    }

    pub fn build(&self) -> Result<Schedule> {
        match self.family {
            ScheduleFamily::Linear => {
                Schedule::linear(self.num_timesteps, self.beta_start, self.beta_end)
            }
            ScheduleFamily::Cosine => Schedule::cosine(self.num_timesteps, self.cosine_s),
        }
    }
}

/// The three SNR bands along the diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// SNR below 1e-2: only global structure survives.
    Coarse,
    /// SNR in [1e-2, 1].
    Content,
    /// SNR above 1: residual noise removal.
    CleanUp,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Coarse, Stage::Content, Stage::CleanUp];

    pub fn index(self) -> usize {
        match self {
            Stage::Coarse => 0,
            Stage::Content => 1,
            Stage::CleanUp => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Content => "content",
            Stage::CleanUp => "cleanup",
        }
    }
}

pub const COARSE_SNR_UPPER: f64 = 1e-2;
pub const CLEANUP_SNR_LOWER: f64 = 1.0;

/// Classifies an SNR value into its stage.
pub fn stage_of(snr: f64) -> Result<Stage> {
    if !(snr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "SNR must be positive, got {snr}"
        )));
    }
    Ok(if snr < COARSE_SNR_UPPER {
        Stage::Coarse
    } else if snr <= CLEANUP_SNR_LOWER {
        Stage::Content
    } else {
        Stage::CleanUp
    })
}

/// A discrete noise schedule with all derived per-step arrays.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    family: ScheduleFamily,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    snrs: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl Schedule {
    /// Betas interpolate linearly from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 timesteps, got {num_timesteps}"
            )));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start < beta_end) {
            return Err(Error::InvalidSchedule(format!(
                "linear betas need 0 < beta_start < beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = (num_timesteps - 1) as f64;
        let betas = (0..num_timesteps)
            .map(|i| {
                if i + 1 == num_timesteps {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / span
                }
            })
            .collect();
        Self::from_betas(ScheduleFamily::Linear, betas)
    }

    /// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
    /// `f(u) = cos²((u/T + s)/(1 + s) · π/2)`, betas clipped at [`COSINE_MAX_BETA`].
    pub fn cosine(num_timesteps: usize, s: f64) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 timesteps, got {num_timesteps}"
            )));
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "cosine offset must be positive, got {s}"
            )));
        }
        let f = |u: usize| cosine_f(u, num_timesteps, s);
        let f0 = f(0);
        let betas = (1..=num_timesteps)
            .map(|t| {
                let ratio = (f(t) / f0) / (f(t - 1) / f0);
                (1.0 - ratio).min(COSINE_MAX_BETA)
            })
            .collect();
        Self::from_betas(ScheduleFamily::Cosine, betas)
    }

    /// Builds a schedule from explicit betas. `alpha_bar` is the running
    /// product of `1 - beta`.
    pub fn from_betas(family: ScheduleFamily, betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 timesteps, got {}",
                betas.len()
            )));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::InvalidSchedule(format!(
                "beta at t={} is {b}, outside (0, 1)",
                i + 1
            )));
        }

        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let snrs: Vec<f64> = alpha_bars.iter().map(|&a| a / (1.0 - a)).collect();
        if snrs.windows(2).any(|w| !(w[1] < w[0])) || snrs.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidSchedule(
                "SNR must be positive and strictly decreasing".into(),
            ));
        }
        let posterior_vars = betas
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                b * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();

        Ok(Self {
            family,
            betas,
            alpha_bars,
            snrs,
            posterior_vars,
        })
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            Err(Error::StepOutOfRange {
                t,
                max: self.betas.len(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        self.index(t).map(|_| ())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    /// `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn snr_at(&self, t: usize) -> Result<f64> {
        Ok(self.snrs[self.index(t)?])
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_vars[self.index(t)?])
    }

    pub fn stage_at(&self, t: usize) -> Result<Stage> {
        stage_of(self.snr_at(t)?)
    }

    /// Arrays indexed by `t - 1`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snrs
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    /// Step whose SNR is closest to `target` in log space.
    pub fn step_nearest_snr(&self, target: f64) -> usize {
        let lt = target.ln();
        let (i, _) = self
            .snrs
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (s.ln() - lt).abs()))
            .fold(
                (0, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            );
        i + 1
    }

    /// CSV with header `t,beta,alpha_bar,snr,posterior_var`, shortest
    /// round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,snr,posterior_var\n");
        for i in 0..self.betas.len() {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                i + 1,
                self.betas[i],
                self.alpha_bars[i],
                self.snrs[i],
                self.posterior_vars[i]
            ));
        }
        out
    }
}

fn cosine_f(u: usize, num_timesteps: usize, s: f64) -> f64 {
    let x = ((u as f64 / num_timesteps as f64) + s) / (1.0 + s) * FRAC_PI_2;
    let c = x.cos();
    c * c
}

/// Uniformly strided subsequence of `1..=T` with `count` entries, in
/// decreasing order, always containing `T` and `1`.
pub fn respaced_steps(num_timesteps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > num_timesteps {
        return Err(Error::InvalidArgument(format!(
            "cannot respace {num_timesteps} steps into {count}"
        )));
    }
    if count == 1 {
        return Ok(vec![num_timesteps]);
    }
    let span = (num_timesteps - 1) as f64;
    let mut steps: Vec<usize> = (0..count)
        .map(|i| 1 + (i as f64 * span / (count - 1) as f64).round() as usize)
        .collect();
    steps.dedup();
    steps.reverse();
    Ok(steps)
}
