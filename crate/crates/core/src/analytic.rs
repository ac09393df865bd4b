//! Closed-form optimal noise predictors for Gaussian-mixture data.
//!
//! For `x_0 ~ Σ_j π_j N(μ_j, s²I)` the marginal of `x_t` given component `j`
//! is `N(√ᾱ_t μ_j, v_t I)` with `v_t = ᾱ_t s² + 1 − ᾱ_t`, and
//! `E[ε | x_t, j] = √(1−ᾱ_t)(x_t − √ᾱ_t μ_j)/v_t`. The optimum mixes these
//! with the component posteriors. Useful as a reference model for the
//! samplers that does not depend on training.

use std::f64::consts::PI;

use crate::data::{DatasetDescriptor, DatasetKind};
use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::schedule::Schedule;

#[derive(Debug, Clone)]
pub struct GaussianMixtureOptimum {
    means: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    std: f64,
    alpha_bars: Vec<f64>,
}

impl GaussianMixtureOptimum {
    pub fn new(
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
        std: f64,
        sched: &Schedule,
    ) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::InvalidArgument(
                "need one weight per mixture component".into(),
            ));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidArgument(
                "component means differ in length".into(),
            ));
        }
        Ok(Self {
            means,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            std,
            alpha_bars: sched.alpha_bars().to_vec(),
        })
    }

    pub fn standard_normal(dim: usize, sched: &Schedule) -> Self {
        Self::new(vec![vec![0.0; dim]], vec![1.0], 1.0, sched).expect("valid single component")
    }

    /// Optimum for a ring dataset (ignores the `[-1.5, 1.5]` clamp, which is
    /// negligible for small mode widths).
    pub fn ring(desc: &DatasetDescriptor, sched: &Schedule) -> Result<Self> {
        if desc.kind != DatasetKind::RingOfGaussians {
            return Err(Error::InvalidArgument("expected a ring dataset".into()));
        }
        desc.validate()?;
        let k = desc.modes;
        let means = (0..k)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / k as f64;
                vec![a.cos(), a.sin()]
            })
            .collect();
        Self::new(means, vec![1.0 / k as f64; k], desc.noise, sched)
    }
}

impl EpsModel for GaussianMixtureOptimum {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn predict_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        if t == 0 || t > self.alpha_bars.len() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.alpha_bars.len(),
            });
        }
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let ab = self.alpha_bars[t - 1];
        let sa = ab.sqrt();
        let var = ab * self.std * self.std + 1.0 - ab;

        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_weights)
            .map(|(m, lw)| {
                let sq: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - sa * mi).powi(2)).sum();
                lw - sq / (2.0 * var)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();

        let scale = (1.0 - ab).sqrt() / var;
        let mut out = vec![0.0; x.len()];
        for (m, r) in self.means.iter().zip(&resp) {
            let w = r / total;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
                *o += w * scale * (xi - sa * mi);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_optimum_is_linear() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        let m = GaussianMixtureOptimum::standard_normal(1, &s);
        for t in [1, 250, 1000] {
            let x = 0.7;
            let expected = x * (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            assert!((m.predict_eps(&[x], t).unwrap()[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn ring_optimum_points_toward_nearest_mode_at_low_noise() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        let m = GaussianMixtureOptimum::ring(&DatasetDescriptor::ring(8, 0.02), &s).unwrap();
        // x_t slightly off mode 0; predicted x0 should sit near (1, 0).
        let t = 10;
        let x = [1.05, 0.02];
        let eps = m.predict_eps(&x, t).unwrap();
        let x0 = crate::diffusion::predict_x0(&x, &eps, t, &s).unwrap();
        assert!((x0[0] - 1.0).abs() < 0.06 && x0[1].abs() < 0.03, "{x0:?}");
    }
}
