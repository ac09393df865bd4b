//! Per-timestep loss weighting.
//!
//! Every scheme is expressed two ways: as a weight `lambda_on_vlb[t]` on the
//! per-step KL term `L_t`, and as the equivalent weight `mse_weight[t]` on the
//! noise-prediction error `‖ε − ε_θ‖²`. The two differ by the KL coefficient
//! `β_t / ((1 − β_t)(1 − ᾱ_t))`.
//!
//! - `Vlb`: uniform weights on `L_t`.
//! - `Baseline`: `λ_t = (1 − β_t)(1 − ᾱ_t)/β_t`, i.e. unweighted ε-MSE.
//! - `P2`: `λ'_t = λ_t / (k + SNR(t))^γ`, which suppresses high-SNR steps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Above this exponent samples are known to pick up noise artifacts.
pub const GAMMA_WARN_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingScheme {
    Vlb,
    Baseline,
    P2,
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingScheme::Vlb => "vlb",
            WeightingScheme::Baseline => "baseline",
            WeightingScheme::P2 => "p2",
        })
    }
}

impl std::str::FromStr for WeightingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vlb" => Ok(WeightingScheme::Vlb),
            "baseline" => Ok(WeightingScheme::Baseline),
            "p2" => Ok(WeightingScheme::P2),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting scheme `{other}` (expected vlb, baseline or p2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    pub scheme: WeightingScheme,
    /// P2 exponent; ignored for other schemes.
    #[serde(default)]
    pub gamma: f64,
    /// P2 stabilizer; ignored for other schemes.
    #[serde(default = "default_k")]
    pub k: f64,
}

fn default_k() -> f64 {
    1.0
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl WeightingConfig {
    pub fn vlb() -> Self {
        Self {
            scheme: WeightingScheme::Vlb,
            gamma: 0.0,
            k: 1.0,
        }
    }

    pub fn baseline() -> Self {
        Self {
            scheme: WeightingScheme::Baseline,
            gamma: 0.0,
            k: 1.0,
        }
    }

    pub fn p2(gamma: f64, k: f64) -> Self {
        Self {
            scheme: WeightingScheme::P2,
            gamma,
            k,
        }
    }

    /// Rejects negative or non-finite `gamma` and non-positive `k`; logs a
    /// warning for `gamma > 2`.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be a finite non-negative number, got {}",
                self.gamma
            )));
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "k must be positive, got {}",
                self.k
            )));
        }
        if self.scheme == WeightingScheme::P2 && self.gamma > GAMMA_WARN_THRESHOLD {
            log::warn!(
                "gamma = {} > {GAMMA_WARN_THRESHOLD}: clean-up steps get almost no weight; \
                 expect noisy samples",
                self.gamma
            );
        }
        Ok(())
    }
}

/// KL coefficient `β_t / ((1 − β_t)(1 − ᾱ_t))` turning ε-MSE into `L_t`.
pub fn vlb_coefficient(sched: &Schedule, t: usize) -> Result<f64> {
    let beta = sched.beta(t)?;
    let alpha_bar = sched.alpha_bar(t)?;
    Ok(beta / ((1.0 - beta) * (1.0 - alpha_bar)))
}

/// `λ_t = (1 − β_t)(1 − ᾱ_t)/β_t`.
pub fn baseline_lambda(sched: &Schedule, t: usize) -> Result<f64> {
    let beta = sched.beta(t)?;
    let alpha_bar = sched.alpha_bar(t)?;
    Ok((1.0 - beta) * (1.0 - alpha_bar) / beta)
}

/// `λ'_t = λ_t / (k + SNR(t))^γ`. Only the config's `gamma` and `k` are used.
pub fn p2_lambda(sched: &Schedule, cfg: &WeightingConfig, t: usize) -> Result<f64> {
    Ok(baseline_lambda(sched, t)? * p2_factor(sched.snr_at(t)?, cfg))
}

fn p2_factor(snr: f64, cfg: &WeightingConfig) -> f64 {
    (cfg.k + snr).powf(-cfg.gamma)
}

/// Baseline weight rewritten purely in SNR terms:
/// `SNR(t)(1 + SNR(t−1)) / ((1 + SNR(t))(SNR(t−1) − SNR(t)))`.
///
/// Undefined at `t = 1`, which has no predecessor.
pub fn continuous_lambda(sched: &Schedule, t: usize) -> Result<f64> {
    sched.check_step(t)?;
    if t < 2 {
        return Err(Error::InvalidArgument(
            "continuous lambda needs t >= 2".into(),
        ));
    }
    let snr = sched.snr_at(t)?;
    let snr_prev = sched.snr_at(t - 1)?;
    lambda_from_snr_pair(snr_prev, snr)
}

pub(crate) fn lambda_from_snr_pair(snr_prev: f64, snr: f64) -> Result<f64> {
    let gap = snr_prev - snr;
    if gap == 0.0 {
        return Err(Error::InvalidSchedule(
            "SNR does not change between consecutive steps".into(),
        ));
    }
    Ok(snr * (1.0 + snr_prev) / ((1.0 + snr) * gap))
}

/// Per-step weights for one scheme. Arrays are indexed by `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub lambda_on_vlb: Vec<f64>,
    pub mse_weight: Vec<f64>,
}

impl WeightTable {
    pub fn num_timesteps(&self) -> usize {
        self.mse_weight.len()
    }

    pub fn mse_weight_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.mse_weight.len() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.mse_weight.len(),
            });
        }
        Ok(self.mse_weight[t - 1])
    }

    /// Multiplies every weight by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda_on_vlb: self.lambda_on_vlb.iter().map(|w| w * c).collect(),
            mse_weight: self.mse_weight.iter().map(|w| w * c).collect(),
        }
    }
}

pub fn build_weight_table(sched: &Schedule, cfg: &WeightingConfig) -> Result<WeightTable> {
    cfg.validate()?;
    let n = sched.num_timesteps();
    let mut lambda_on_vlb = Vec::with_capacity(n);
    let mut mse_weight = Vec::with_capacity(n);
    for t in 1..=n {
        match cfg.scheme {
            WeightingScheme::Vlb => {
                lambda_on_vlb.push(1.0);
                mse_weight.push(vlb_coefficient(sched, t)?);
            }
            WeightingScheme::Baseline => {
                lambda_on_vlb.push(baseline_lambda(sched, t)?);
                mse_weight.push(1.0);
            }
            WeightingScheme::P2 => {
                let factor = p2_factor(sched.snr_at(t)?, cfg);
                lambda_on_vlb.push(baseline_lambda(sched, t)? * factor);
                mse_weight.push(factor);
            }
        }
    }
    Ok(WeightTable {
        lambda_on_vlb,
        mse_weight,
    })
}

/// `lambda_on_vlb` rescaled to sum to one.
pub fn normalize_weights(table: &WeightTable) -> Vec<f64> {
    normalize(&table.lambda_on_vlb)
}

pub(crate) fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// CSV `t,snr,lambda_baseline,lambda_p2,mse_weight,normalized_baseline,normalized_p2`
/// for the P2 scheme with the given `gamma`, `k`.
pub fn weights_csv(sched: &Schedule, gamma: f64, k: f64) -> Result<String> {
    let baseline = build_weight_table(sched, &WeightingConfig::baseline())?;
    let p2 = build_weight_table(sched, &WeightingConfig::p2(gamma, k))?;
    let nb = normalize_weights(&baseline);
    let np = normalize_weights(&p2);
    let mut out = String::from(
        "t,snr,lambda_baseline,lambda_p2,mse_weight,normalized_baseline,normalized_p2\n",
    );
    for i in 0..sched.num_timesteps() {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            i + 1,
            sched.snrs()[i],
            baseline.lambda_on_vlb[i],
            p2.lambda_on_vlb[i],
            p2.mse_weight[i],
            nb[i],
            np[i]
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleFamily;

    fn linear() -> Schedule {
        Schedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn baseline_by_hand() {
        // beta_1 = 0.5, alpha_bar_1 = 0.5
        let s = Schedule::from_betas(ScheduleFamily::Linear, vec![0.5, 0.6]).unwrap();
        assert!((baseline_lambda(&s, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn baseline_first_step_linear() {
        let s = linear();
        let expected = (1.0 - 1e-4) * (1.0 - (1.0 - 1e-4)) / 1e-4;
        assert!(rel(baseline_lambda(&s, 1).unwrap(), expected) < 1e-12);
        assert!((baseline_lambda(&s, 1).unwrap() - 0.9999).abs() < 1e-9);
    }

    #[test]
    fn p2_gamma_zero_is_baseline() {
        let s = linear();
        let cfg = WeightingConfig::p2(0.0, 3.7);
        for t in [1, 10, 500, 1000] {
            assert_eq!(
                p2_lambda(&s, &cfg, t).unwrap(),
                baseline_lambda(&s, t).unwrap()
            );
        }
    }

    #[test]
    fn p2_k1_gamma1_ratio_is_one_minus_alpha_bar() {
        let s = linear();
        let cfg = WeightingConfig::p2(1.0, 1.0);
        for t in 1..=1000 {
            let ratio = p2_lambda(&s, &cfg, t).unwrap() / baseline_lambda(&s, t).unwrap();
            assert!(rel(ratio, 1.0 - s.alpha_bar(t).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn p2_half_gamma_snr_three() {
        // alpha_bar = 0.75 gives SNR = 3.
        let s = Schedule::from_betas(ScheduleFamily::Linear, vec![0.25, 0.5]).unwrap();
        assert!((s.snr_at(1).unwrap() - 3.0).abs() < 1e-15);
        let cfg = WeightingConfig::p2(0.5, 1.0);
        let ratio = p2_lambda(&s, &cfg, 1).unwrap() / baseline_lambda(&s, 1).unwrap();
        assert!((ratio - 0.5).abs() < 1e-15);
    }

    #[test]
    fn continuous_lambda_plugin() {
        assert!((lambda_from_snr_pair(2.0, 1.0).unwrap() - 1.5).abs() < 1e-15);
        assert!(lambda_from_snr_pair(1.0, 1.0).is_err());
        assert!(continuous_lambda(&linear(), 1).is_err());
        assert!(continuous_lambda(&linear(), 1001).is_err());
    }

    #[test]
    fn table_schemes() {
        let s = linear();
        let vlb = build_weight_table(&s, &WeightingConfig::vlb()).unwrap();
        let base = build_weight_table(&s, &WeightingConfig::baseline()).unwrap();
        let p2 = build_weight_table(&s, &WeightingConfig::p2(1.0, 1.0)).unwrap();
        for t in 1..=1000 {
            let i = t - 1;
            assert_eq!(vlb.lambda_on_vlb[i], 1.0);
            assert_eq!(vlb.mse_weight[i], vlb_coefficient(&s, t).unwrap());
            assert_eq!(base.mse_weight[i], 1.0);
            assert_eq!(base.lambda_on_vlb[i], baseline_lambda(&s, t).unwrap());
            assert!(rel(p2.mse_weight[i], 1.0 - s.alpha_bar(t).unwrap()) < 1e-12);
            for table in [&vlb, &base, &p2] {
                let coef = vlb_coefficient(&s, t).unwrap();
                assert!(rel(table.mse_weight[i], table.lambda_on_vlb[i] * coef) < 1e-12);
                assert!(table.mse_weight[i] > 0.0 && table.mse_weight[i].is_finite());
            }
        }
    }

    #[test]
    fn p2_gamma_zero_table_is_baseline_bitwise() {
        let s = Schedule::cosine(1000, 0.008).unwrap();
        let base = build_weight_table(&s, &WeightingConfig::baseline()).unwrap();
        let p2 = build_weight_table(&s, &WeightingConfig::p2(0.0, 1.0)).unwrap();
        assert_eq!(base, p2);
    }

    #[test]
    fn normalize_uniform() {
        let table = WeightTable {
            lambda_on_vlb: vec![1.0; 4],
            mse_weight: vec![1.0; 4],
        };
        assert_eq!(normalize_weights(&table), vec![0.25; 4]);
    }

    #[test]
    fn normalized_sums_to_one() {
        let s = linear();
        for cfg in [
            WeightingConfig::baseline(),
            WeightingConfig::p2(1.0, 1.0),
            WeightingConfig::vlb(),
        ] {
            let n = normalize_weights(&build_weight_table(&s, &cfg).unwrap());
            assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(WeightingConfig::p2(-0.1, 1.0).validate().is_err());
        assert!(WeightingConfig::p2(1.0, 0.0).validate().is_err());
        assert!(WeightingConfig::p2(f64::NAN, 1.0).validate().is_err());
        // warns, does not fail
        assert!(WeightingConfig::p2(3.0, 1.0).validate().is_ok());
    }

    #[test]
    fn config_serde() {
        let cfg: WeightingConfig = serde_json::from_str(r#"{"scheme":"p2","gamma":0.5}"#).unwrap();
        assert_eq!(cfg, WeightingConfig::p2(0.5, 1.0));
        assert!(serde_json::from_str::<WeightingConfig>(r#"{"scheme":"p2","gamm":0.5}"#).is_err());
    }

    #[test]
    fn csv_shape() {
        let s = Schedule::linear(10, 1e-3, 0.1).unwrap();
        let csv = weights_csv(&s, 1.0, 1.0).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "t,snr,lambda_baseline,lambda_p2,mse_weight,normalized_baseline,normalized_p2"
        );
        assert_eq!(lines.len(), 11);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
    }
}
