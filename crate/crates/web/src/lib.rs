//! Browser bindings for the demo page. Each export returns a JSON string; the
//! plain functions underneath are what the native tests exercise.

use p2diff::analytic::GaussianMixtureOptimum;
use p2diff::diffusion::sample_many;
use p2diff::eval::{corruption_distance_study, snr_bin_grid};
use p2diff::weighting::{build_weight_table, normalize_weights};
use p2diff::{
    rng, DatasetDescriptor, Result, SamplerConfig, SamplerKind, Schedule, ScheduleConfig,
    ScheduleFamily, WeightingConfig,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const T: usize = 1000;

fn schedule(family: &str) -> Result<Schedule> {
    let family: ScheduleFamily = family.parse()?;
    ScheduleConfig {
        family,
        ..ScheduleConfig::linear(T)
    }
    .build()
}

#[derive(Serialize)]
struct Curves {
    t: Vec<usize>,
    snr: Vec<f64>,
    stage: Vec<&'static str>,
    baseline: Vec<f64>,
    p2: Vec<f64>,
}

/// Normalized baseline and P2 weights over t = 1…T.
pub fn weight_curves_json(family: &str, gamma: f64, k: f64) -> Result<String> {
    let s = schedule(family)?;
    let base = normalize_weights(&build_weight_table(&s, &WeightingConfig::baseline())?);
    let p2 = normalize_weights(&build_weight_table(&s, &WeightingConfig::p2(gamma, k))?);
    let stage = (1..=T)
        .map(|t| s.stage_at(t).map(|x| x.name()))
        .collect::<Result<_>>()?;
    let curves = Curves {
        t: (1..=T).collect(),
        snr: s.snrs().to_vec(),
        stage,
        baseline: base,
        p2,
    };
    Ok(serde_json::to_string(&curves).expect("plain numbers"))
}

/// Same-source and different-source corruption curves on a ring.
pub fn corruption_json(
    family: &str,
    modes: usize,
    std: f64,
    triplets: usize,
    seed: u64,
) -> Result<String> {
    let s = schedule(family)?;
    let data = DatasetDescriptor::ring(modes, std);
    let grid = snr_bin_grid(&s, 2);
    let study = corruption_distance_study(&data, &s, &grid, triplets, &mut rng::seeded(seed))?;
    Ok(serde_json::to_string(&study).expect("plain numbers"))
}

/// Samples from the exact ring denoiser, so the page needs no trained weights.
#[allow(clippy::too_many_arguments)]
pub fn sample_ring_json(
    family: &str,
    modes: usize,
    std: f64,
    n: usize,
    sampler: &str,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<String> {
    let s = schedule(family)?;
    let model = GaussianMixtureOptimum::ring(&DatasetDescriptor::ring(modes, std), &s)?;
    let kind: SamplerKind = sampler.parse()?;
    let cfg = SamplerConfig {
        sampler: kind,
        eta,
        num_steps: Some(steps),
        ..SamplerConfig::default()
    };
    let points = sample_many(&model, &s, &cfg, n, seed)?;
    Ok(serde_json::to_string(&points).expect("plain numbers"))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn weight_curves(family: &str, gamma: f64, k: f64) -> std::result::Result<String, JsError> {
    js(weight_curves_json(family, gamma, k))
}

#[wasm_bindgen]
pub fn corruption_curves(
    family: &str,
    modes: usize,
    std: f64,
    triplets: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(corruption_json(family, modes, std, triplets, seed as u64))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sample_ring(
    family: &str,
    modes: usize,
    std: f64,
    n: usize,
    sampler: &str,
    steps: usize,
    eta: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(sample_ring_json(
        family,
        modes,
        std,
        n,
        sampler,
        steps,
        eta,
        seed as u64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn curves_sum_to_one() {
        let v: Value =
            serde_json::from_str(&weight_curves_json("cosine", 1.0, 1.0).unwrap()).unwrap();
        let sum: f64 = v["p2"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(v["t"].as_array().unwrap().len(), T);
        assert_eq!(v["stage"][0], "cleanup");
        assert!(weight_curves_json("quadratic", 1.0, 1.0).is_err());
    }

    #[test]
    fn corruption_rows_cover_grid() {
        let v: Value =
            serde_json::from_str(&corruption_json("linear", 8, 0.05, 40, 1).unwrap()).unwrap();
        let same = v["same_source"]["rows"].as_array().unwrap();
        assert!(same.len() > 5);
        assert_eq!(
            same.len(),
            v["different_source"]["rows"].as_array().unwrap().len()
        );
    }

    #[test]
    fn ring_samples_land_near_unit_circle() {
        let pts: Vec<Vec<f64>> = serde_json::from_str(
            &sample_ring_json("linear", 8, 0.05, 200, "ddim", 50, 0.0, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(pts.len(), 200);
        let r = pts.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / 200.0;
        assert!((r - 1.0).abs() < 0.1, "{r}");
        assert!(sample_ring_json("linear", 8, 0.05, 10, "euler", 50, 0.0, 3).is_err());
    }
}
