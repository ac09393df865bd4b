//! Toy datasets. Every generator is an infinite i.i.d. source; outputs are
//! standardized by a fixed affine map and clamped to `[-1.5, 1.5]`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, DetRng};

pub const VALUE_BOUND: f64 = 1.5;
pub const TINY_BARS_SIDE: usize = 8;
pub const TINY_BARS_WIDTHS: [usize; 2] = [1, 4];

/// One sample `x_0`.
pub type DataPoint = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    RingOfGaussians,
    SwissRoll,
    Checkerboard,
    TinyBars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub kind: DatasetKind,
    /// Ring: number of modes. Checkerboard: cells per side (even).
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Ring: per-mode std. Swiss roll / bars: additive Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_modes() -> usize {
    8
}
fn default_noise() -> f64 {
    0.05
}

impl Default for DatasetDescriptor {
    fn default() -> Self {
        Self::ring(8, default_noise())
    }
}

impl DatasetDescriptor {
    pub fn ring(modes: usize, std: f64) -> Self {
        Self {
            kind: DatasetKind::RingOfGaussians,
            modes,
            noise: std,
            seed: 0,
        }
    }

    pub fn swiss_roll(noise: f64) -> Self {
        Self {
            kind: DatasetKind::SwissRoll,
            modes: 0,
            noise,
            seed: 0,
        }
    }

    pub fn checkerboard(cells: usize) -> Self {
        Self {
            kind: DatasetKind::Checkerboard,
            modes: cells,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn tiny_bars(noise: f64) -> Self {
        Self {
            kind: DatasetKind::TinyBars,
            modes: 0,
            noise,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::TinyBars => TINY_BARS_SIDE * TINY_BARS_SIDE,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "dataset noise must be non-negative, got {}",
                self.noise
            )));
        }
        match self.kind {
            DatasetKind::RingOfGaussians if self.modes == 0 => {
                Err(Error::InvalidConfig("ring needs at least one mode".into()))
            }
            DatasetKind::Checkerboard if self.modes < 2 || !self.modes.is_multiple_of(2) => {
                Err(Error::InvalidConfig(format!(
                    "checkerboard needs an even number of cells per side, got {}",
                    self.modes
                )))
            }
            _ => Ok(()),
        }
    }

    /// Draws one standardized sample.
    pub fn draw(&self, rng: &mut DetRng) -> DataPoint {
        let mut x = match self.kind {
            DatasetKind::RingOfGaussians => {
                let j = rng.random_range(0..self.modes);
                let angle = 2.0 * PI * j as f64 / self.modes as f64;
                vec![
                    angle.cos() + self.noise * rng.sample::<f64, _>(StandardNormal),
                    angle.sin() + self.noise * rng.sample::<f64, _>(StandardNormal),
                ]
            }
            DatasetKind::SwissRoll => {
                let (a, b) = SWISS_RANGE;
                let u = rng.random_range(a..b);
                let [mx, my] = swiss_roll_mean();
                vec![
                    u * u.cos() / b - mx + self.noise * rng.sample::<f64, _>(StandardNormal),
                    u * u.sin() / b - my + self.noise * rng.sample::<f64, _>(StandardNormal),
                ]
            }
            DatasetKind::Checkerboard => {
                let cells = self.modes;
                // Pick a dark cell (row + col even) uniformly, then a point inside it.
                let row = rng.random_range(0..cells);
                let col = 2 * rng.random_range(0..cells / 2) + row % 2;
                let width = 2.0 / cells as f64;
                vec![
                    -1.0 + width * (col as f64 + rng.random::<f64>()),
                    -1.0 + width * (row as f64 + rng.random::<f64>()),
                ]
            }
            DatasetKind::TinyBars => {
                let side = TINY_BARS_SIDE;
                let width = TINY_BARS_WIDTHS[rng.random_range(0..TINY_BARS_WIDTHS.len())];
                let horizontal = rng.random::<bool>();
                let start = rng.random_range(0..=side - width);
                let shift = tiny_bars_mean();
                let mut img = vec![-1.0 - shift; side * side];
                for r in 0..side {
                    for c in 0..side {
                        let along = if horizontal { r } else { c };
                        if (start..start + width).contains(&along) {
                            img[r * side + c] = 1.0 - shift;
                        }
                    }
                }
                for v in &mut img {
                    *v += self.noise * rng.sample::<f64, _>(StandardNormal);
                }
                img
            }
        };
        for v in &mut x {
            *v = v.clamp(-VALUE_BOUND, VALUE_BOUND);
        }
        x
    }
}

const SWISS_RANGE: (f64, f64) = (1.5 * PI, 4.5 * PI);

/// Exact mean of `(u cos u, u sin u)/b` for `u ~ U(a, b)`.
fn swiss_roll_mean() -> [f64; 2] {
    let (a, b) = SWISS_RANGE;
    let ix = |u: f64| u * u.sin() + u.cos();
    let iy = |u: f64| -u * u.cos() + u.sin();
    [(ix(b) - ix(a)) / (b - a) / b, (iy(b) - iy(a)) / (b - a) / b]
}

/// Mean pixel value of an unshifted bar image, averaged over widths.
fn tiny_bars_mean() -> f64 {
    let side = TINY_BARS_SIDE as f64;
    let mean_width = TINY_BARS_WIDTHS.iter().sum::<usize>() as f64 / TINY_BARS_WIDTHS.len() as f64;
    -1.0 + 2.0 * mean_width / side
}

/// `n` i.i.d. samples from `rng`.
pub fn generate(desc: &DatasetDescriptor, n: usize, rng: &mut DetRng) -> Result<Vec<DataPoint>> {
    desc.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need n >= 1 samples".into()));
    }
    Ok((0..n).map(|_| desc.draw(rng)).collect())
}

/// `n` samples from the descriptor's own seed on the given stream.
pub fn generate_seeded(desc: &DatasetDescriptor, n: usize, stream: u64) -> Result<Vec<DataPoint>> {
    generate(desc, n, &mut rng::stream(desc.seed, stream))
}

/// One JSON array per line.
pub fn to_json_lines(points: &[DataPoint]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(p).expect("f64 vectors serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims() {
        assert_eq!(DatasetDescriptor::ring(8, 0.02).dim(), 2);
        assert_eq!(DatasetDescriptor::tiny_bars(0.05).dim(), 64);
    }

    #[test]
    fn ring_points_near_modes() {
        let desc = DatasetDescriptor::ring(8, 0.02);
        let pts = generate(&desc, 20_000, &mut rng::seeded(3)).unwrap();
        let far = pts
            .iter()
            .filter(|p| {
                let nearest = (0..8)
                    .map(|j| {
                        let a = 2.0 * PI * j as f64 / 8.0;
                        ((p[0] - a.cos()).powi(2) + (p[1] - a.sin()).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                nearest > 5.0 * 0.02
            })
            .count();
        // P(radius > 5 sigma) for a 2-D isotropic Gaussian is exp(-12.5) ~ 3.7e-6.
        assert!((far as f64) / 20_000.0 < 1e-3, "far = {far}");
    }

    #[test]
    fn deterministic_by_seed() {
        for desc in [
            DatasetDescriptor::ring(8, 0.05),
            DatasetDescriptor::swiss_roll(0.05),
            DatasetDescriptor::checkerboard(4),
            DatasetDescriptor::tiny_bars(0.05),
        ] {
            let a = generate(&desc, 50, &mut rng::seeded(11)).unwrap();
            let b = generate(&desc, 50, &mut rng::seeded(11)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|p| p.len() == desc.dim()));
        }
    }

    #[test]
    fn invalid_params() {
        assert!(DatasetDescriptor::ring(0, 0.1).validate().is_err());
        assert!(DatasetDescriptor::checkerboard(3).validate().is_err());
        assert!(DatasetDescriptor::ring(8, -1.0).validate().is_err());
        assert!(generate(&DatasetDescriptor::default(), 0, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn tiny_bars_means_are_bimodal_by_width() {
        // Enumerate every placement: the per-image mean depends only on the width.
        let side = TINY_BARS_SIDE;
        let shift = tiny_bars_mean();
        let mut expected = Vec::new();
        for &w in &TINY_BARS_WIDTHS {
            let lit = (w * side) as f64;
            let mean = (lit * 1.0 + ((side * side) as f64 - lit) * -1.0) / (side * side) as f64;
            expected.push(mean - shift);
        }
        assert!((expected[0] + 0.375).abs() < 1e-12 && (expected[1] - 0.375).abs() < 1e-12);

        let desc = DatasetDescriptor::tiny_bars(0.0);
        let imgs = generate(&desc, 2000, &mut rng::seeded(5)).unwrap();
        let mut counts = [0usize; 2];
        for img in &imgs {
            let m = img.iter().sum::<f64>() / img.len() as f64;
            let k = expected
                .iter()
                .position(|e| (m - e).abs() < 1e-12)
                .expect("mean must match one width");
            counts[k] += 1;
        }
        assert!(counts.iter().all(|&c| c > 800), "{counts:?}");
    }

    #[test]
    fn standardization() {
        for desc in [
            DatasetDescriptor::ring(8, 0.05),
            DatasetDescriptor::swiss_roll(0.05),
            DatasetDescriptor::checkerboard(4),
            DatasetDescriptor::tiny_bars(0.05),
        ] {
            let pts = generate(&desc, 100_000, &mut rng::seeded(9)).unwrap();
            let d = desc.dim();
            let n = pts.len() as f64;
            let mut overall = 0.0;
            for j in 0..d {
                let mean = pts.iter().map(|p| p[j]).sum::<f64>() / n;
                let var = pts.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
                overall += mean;
                assert!(
                    var.sqrt() <= 1.02,
                    "{:?} coord {j} std {}",
                    desc.kind,
                    var.sqrt()
                );
            }
            assert!((overall / d as f64).abs() < 0.02, "{:?}", desc.kind);
            assert!(pts.iter().flatten().all(|v| v.abs() <= VALUE_BOUND));
        }
    }

    #[test]
    fn descriptor_serde() {
        let d: DatasetDescriptor =
            serde_json::from_str(r#"{"kind":"ring_of_gaussians","modes":8,"noise":0.02}"#).unwrap();
        assert_eq!(d, DatasetDescriptor::ring(8, 0.02));
        assert!(
            serde_json::from_str::<DatasetDescriptor>(r#"{"kind":"tiny_bars","extra":1}"#).is_err()
        );
    }
}
