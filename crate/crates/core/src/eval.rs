//! Evaluation: the two SNR investigations (corruption distances and
//! stochastic reconstruction) and energy-distance / MMD two-sample scores.
//!
//! Distances between points are per-coordinate RMS differences,
//! `‖a − b‖/√d`.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{DataPoint, DatasetDescriptor};
use crate::diffusion::{corrupt, reconstruct, sample_many, EpsModel, NoisyPoint, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng::{self, normal_vec, streams, DetRng};
use crate::schedule::{Schedule, Stage};
use crate::weighting::{build_weight_table, WeightingConfig};

pub const MIN_ROW_SAMPLES: usize = 30;
pub const MIN_TWO_SAMPLE: usize = 100;
pub const DEFAULT_TRIPLETS: usize = 200;
/// Pooled points used for the median-distance bandwidth.
const BANDWIDTH_POINTS: usize = 2000;
/// Rows per block in pairwise sums; blocks are combined in order.
const PAIR_BLOCK: usize = 64;

pub fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub t: usize,
    pub snr: f64,
    pub mean_distance: f64,
    pub stderr: f64,
    /// Mean of the squared RMS distance, the quantity with closed forms.
    pub mean_sq_distance: f64,
    pub sq_stderr: f64,
    pub n: usize,
}

impl DistanceRow {
    fn from_distances(t: usize, snr: f64, distances: &[f64]) -> Self {
        let (mean_distance, stderr) = mean_and_stderr(distances);
        let sq: Vec<f64> = distances.iter().map(|d| d * d).collect();
        let (mean_sq_distance, sq_stderr) = mean_and_stderr(&sq);
        Self {
            t,
            snr,
            mean_distance,
            stderr,
            mean_sq_distance,
            sq_stderr,
            n: distances.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceReport {
    pub rows: Vec<DistanceRow>,
    pub distance: &'static str,
    pub dataset: DatasetDescriptor,
    pub seed: u64,
}

impl DistanceReport {
    /// CSV `t_start,snr,mean_distance,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_start,snr,mean_distance,stderr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                r.t, r.snr, r.mean_distance, r.stderr
            ));
        }
        out
    }
}

/// Steps whose SNR sits closest to the centres of log-SNR bins
/// (`per_decade` bins per decade) spanning the schedule.
pub fn snr_bin_grid(sched: &Schedule, per_decade: usize) -> Vec<usize> {
    let snrs = sched.snrs();
    let lo = snrs[snrs.len() - 1].log10();
    let hi = snrs[0].log10();
    let width = 1.0 / per_decade.max(1) as f64;
    let first = (lo / width).floor() as i64;
    let last = (hi / width).ceil() as i64;
    let mut grid: Vec<usize> = (first..last)
        .map(|j| (j as f64 + 0.5) * width)
        .filter(|c| *c >= lo && *c <= hi)
        .map(|c| sched.step_nearest_snr(10f64.powf(c)))
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Same-source vs different-source distance curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionStudy {
    pub same_source: DistanceReport,
    pub different_source: DistanceReport,
}

impl CorruptionStudy {
    /// CSV with both curves side by side.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t,snr,same_mean,same_stderr,same_sq_mean,same_sq_stderr,\
             diff_mean,diff_stderr,diff_sq_mean,diff_sq_stderr,n\n",
        );
        for (s, d) in self
            .same_source
            .rows
            .iter()
            .zip(&self.different_source.rows)
        {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}\n",
                s.t,
                s.snr,
                s.mean_distance,
                s.stderr,
                s.mean_sq_distance,
                s.sq_stderr,
                d.mean_distance,
                d.stderr,
                d.mean_sq_distance,
                d.sq_stderr,
                s.n
            ));
        }
        out
    }
}

/// For every grid step, draws `n_triplets` pairs `(x_0, x_0')` and measures
/// `d(x_tA, x_tB)` (both from `x_0`) and `d(x_tA, x_t')` (`x_t'` from `x_0'`).
///
/// `x_tB` and `x_t'` share their noise draw. Each curve keeps its exact
/// marginal distribution; the pairing only removes noise from the ratio of
/// the two curves.
pub fn corruption_distance_study(
    data: &DatasetDescriptor,
    sched: &Schedule,
    t_grid: &[usize],
    n_triplets: usize,
    rng: &mut DetRng,
) -> Result<CorruptionStudy> {
    if n_triplets < MIN_ROW_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_ROW_SAMPLES,
            got: n_triplets,
        });
    }
    data.validate()?;
    for &t in t_grid {
        sched.check_step(t)?;
    }
    let pairs: Vec<(DataPoint, DataPoint)> = (0..n_triplets)
        .map(|_| (data.draw(rng), data.draw(rng)))
        .collect();
    let d = data.dim();
    let mut same_rows = Vec::with_capacity(t_grid.len());
    let mut diff_rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut same = Vec::with_capacity(n_triplets);
        let mut diff = Vec::with_capacity(n_triplets);
        for (x0, x0p) in &pairs {
            let eps_a = normal_vec(rng, d);
            let eps_b = normal_vec(rng, d);
            let xa = corrupt(x0, t, sched, &eps_a)?;
            let xb = corrupt(x0, t, sched, &eps_b)?;
            let xp = corrupt(x0p, t, sched, &eps_b)?;
            same.push(rms_distance(&xa, &xb));
            diff.push(rms_distance(&xa, &xp));
        }
        let snr = sched.snr_at(t)?;
        same_rows.push(DistanceRow::from_distances(t, snr, &same));
        diff_rows.push(DistanceRow::from_distances(t, snr, &diff));
    }
    let report = |rows| DistanceReport {
        rows,
        distance: "rms",
        dataset: data.clone(),
        seed: data.seed,
    };
    Ok(CorruptionStudy {
        same_source: report(same_rows),
        different_source: report(diff_rows),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub report: DistanceReport,
    /// Spearman correlation between `t_start` and mean distance.
    pub spearman: f64,
}

/// Mean `d(x_0, x̂_0)` over `n` held-out inputs for every `t_start`.
/// Input `i` uses the same generator at every `t_start`.
pub fn reconstruction_study<M: EpsModel + ?Sized>(
    model: &M,
    data: &DatasetDescriptor,
    sched: &Schedule,
    t_grid: &[usize],
    n: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ReconstructionReport> {
    if n < MIN_ROW_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_ROW_SAMPLES,
            got: n,
        });
    }
    if model.dim() != data.dim() {
        return Err(Error::ShapeMismatch {
            expected: data.dim(),
            got: model.dim(),
        });
    }
    let inputs = crate::data::generate(data, n, &mut rng::stream(seed, streams::HELD_OUT))?;
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let one = |i: usize| -> Result<f64> {
            let mut r = rng::stream(seed, streams::SAMPLING + i as u64);
            let x_hat = reconstruct(model, &inputs[i], t, sched, sampler, &mut r)?;
            Ok(rms_distance(&inputs[i], &x_hat))
        };
        #[cfg(feature = "parallel")]
        let distances: Vec<f64> = {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(one).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let distances: Vec<f64> = (0..n).map(one).collect::<Result<_>>()?;
        let snr = if t == 0 {
            f64::INFINITY
        } else {
            sched.snr_at(t)?
        };
        rows.push(DistanceRow::from_distances(t, snr, &distances));
    }
    let ts: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.mean_distance).collect();
    Ok(ReconstructionReport {
        spearman: spearman(&ts, &ds),
        report: DistanceReport {
            rows,
            distance: "rms",
            dataset: data.clone(),
            seed,
        },
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoSampleScore {
    /// V-statistic `2E|X−Y| − E|X−X'| − E|Y−Y'|`.
    pub energy_distance: f64,
    /// Biased squared MMD with an RBF kernel.
    pub mmd_rbf: f64,
    pub bandwidth: f64,
}

/// Mean of `f(a_i, b_j)` over all pairs, summed in fixed row blocks.
fn pair_mean(a: &[DataPoint], b: &[DataPoint], f: impl Fn(&[f64], &[f64]) -> f64 + Sync) -> f64 {
    let block = |rows: &[DataPoint]| -> f64 {
        let mut s = 0.0;
        for x in rows {
            for y in b {
                s += f(x, y);
            }
        }
        s
    };
    #[cfg(feature = "parallel")]
    let partial: Vec<f64> = {
        use rayon::prelude::*;
        a.par_chunks(PAIR_BLOCK).map(block).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partial: Vec<f64> = a.chunks(PAIR_BLOCK).map(block).collect();
    partial.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

pub fn energy_distance(a: &[DataPoint], b: &[DataPoint]) -> f64 {
    let ab = pair_mean(a, b, euclidean);
    let aa = pair_mean(a, a, euclidean);
    let bb = pair_mean(b, b, euclidean);
    (2.0 * ab - aa - bb).max(0.0)
}

/// Median pairwise distance of the pooled sample. Large pools are reduced to
/// an evenly strided subset of the lexicographically sorted points, which
/// keeps the result independent of input order.
pub fn median_bandwidth(a: &[DataPoint], b: &[DataPoint]) -> f64 {
    let mut pooled: Vec<&DataPoint> = a.iter().chain(b).collect();
    pooled.sort_by(|x, y| {
        x.iter()
            .zip(y.iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let chosen: Vec<&DataPoint> = if pooled.len() > BANDWIDTH_POINTS {
        (0..BANDWIDTH_POINTS)
            .map(|i| pooled[i * pooled.len() / BANDWIDTH_POINTS])
            .collect()
    } else {
        pooled
    };
    let mut dists = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            dists.push(euclidean(chosen[i], chosen[j]));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn mmd_rbf(a: &[DataPoint], b: &[DataPoint], bandwidth: f64) -> f64 {
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| {
        let sq: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
        (-gamma * sq).exp()
    };
    let kab = pair_mean(a, b, k);
    let kaa = pair_mean(a, a, k);
    let kbb = pair_mean(b, b, k);
    (kaa + kbb - 2.0 * kab).max(0.0)
}

pub fn two_sample_score(a: &[DataPoint], b: &[DataPoint]) -> Result<TwoSampleScore> {
    for s in [a, b] {
        if s.len() < MIN_TWO_SAMPLE {
            return Err(Error::InsufficientSamples {
                needed: MIN_TWO_SAMPLE,
                got: s.len(),
            });
        }
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: d,
            got: a.iter().chain(b).find(|p| p.len() != d).unwrap().len(),
        });
    }
    let bandwidth = median_bandwidth(a, b);
    let bandwidth = if bandwidth > 0.0 { bandwidth } else { 1.0 };
    Ok(TwoSampleScore {
        energy_distance: energy_distance(a, b),
        mmd_rbf: mmd_rbf(a, b, bandwidth),
        bandwidth,
    })
}

/// Energy distances of `n_perm` random relabelings of the pooled sample.
pub fn permutation_null(a: &[DataPoint], b: &[DataPoint], n_perm: usize, seed: u64) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut pooled: Vec<DataPoint> = a.iter().chain(b).cloned().collect();
    let mut r = rng::stream(seed, streams::EVAL);
    (0..n_perm)
        .map(|_| {
            pooled.shuffle(&mut r);
            let (x, y) = pooled.split_at(a.len());
            energy_distance(x, y)
        })
        .collect()
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-sample coordinate means, a global-colour proxy for image data.
pub fn sample_means(points: &[DataPoint]) -> Vec<DataPoint> {
    points
        .iter()
        .map(|p| vec![p.iter().sum::<f64>() / p.len() as f64])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageLosses {
    /// Unweighted ε-MSE of held-out examples per stage.
    pub mse: [f64; 3],
    /// The same with the run's own loss weights applied.
    pub weighted: [f64; 3],
}

/// Held-out stage losses for one model.
pub fn stage_losses<M: EpsModel + ?Sized>(
    model: &M,
    examples: &[NoisyPoint],
    sched: &Schedule,
    weighting: &WeightingConfig,
) -> Result<StageLosses> {
    let table = build_weight_table(sched, weighting)?;
    let mut sums = [(0.0, 0.0, 0usize); 3];
    for ex in examples {
        let pred = model.predict_eps(&ex.values, ex.t)?;
        let mse = pred
            .iter()
            .zip(&ex.eps)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            / pred.len() as f64;
        let s = &mut sums[sched.stage_at(ex.t)?.index()];
        s.0 += mse;
        s.1 += table.mse_weight[ex.t - 1] * mse;
        s.2 += 1;
    }
    let avg = |sum: f64, n: usize| if n == 0 { f64::NAN } else { sum / n as f64 };
    Ok(StageLosses {
        mse: sums.map(|(m, _, n)| avg(m, n)),
        weighted: sums.map(|(_, w, n)| avg(w, n)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMeanStats {
    pub generated_mean: f64,
    pub generated_std: f64,
    pub data_mean: f64,
    pub data_std: f64,
    /// Energy distance between the 1-D distributions of per-sample means.
    pub energy_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub weighting: WeightingConfig,
    pub score: TwoSampleScore,
    pub stage_losses: StageLosses,
    pub sample_means: SampleMeanStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub schedule_family: String,
    pub num_timesteps: usize,
    pub gamma: f64,
    pub k: f64,
    pub dataset: DatasetDescriptor,
    pub sampler: SamplerConfig,
    pub n: usize,
    pub seed: u64,
    pub stages: [Stage; 3],
    pub baseline: RunSummary,
    pub p2: RunSummary,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Scores one checkpoint's EMA model against held-out data.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    sampler: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<RunSummary> {
    let sched = ckpt.schedule()?;
    let model = ckpt.ema_denoiser()?;
    let data = &ckpt.header.data;
    let held_out = crate::data::generate(data, n, &mut rng::stream(data.seed, streams::HELD_OUT))?;
    let generated = sample_many(&model, &sched, sampler, n, seed)?;
    if generated.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteModel);
    }
    let score = two_sample_score(&generated, &held_out)?;

    let mut r = rng::stream(seed, streams::EVAL);
    let examples: Vec<NoisyPoint> = held_out
        .iter()
        .map(|x0| {
            let t = rand::Rng::random_range(&mut r, 1..=sched.num_timesteps());
            crate::diffusion::forward_sample(x0, t, &sched, &mut r)
        })
        .collect::<Result<_>>()?;
    let stage_losses = stage_losses(&model, &examples, &sched, &ckpt.header.weighting)?;

    let gen_means = sample_means(&generated);
    let data_means = sample_means(&held_out);
    let flat = |v: &[DataPoint]| v.iter().map(|p| p[0]).collect::<Vec<f64>>();
    let (gm, gs) = mean_std(&flat(&gen_means));
    let (dm, ds) = mean_std(&flat(&data_means));
    Ok(RunSummary {
        weighting: ckpt.header.weighting,
        score,
        stage_losses,
        sample_means: SampleMeanStats {
            generated_mean: gm,
            generated_std: gs,
            data_mean: dm,
            data_std: ds,
            energy_distance: energy_distance(&gen_means, &data_means),
        },
    })
}

/// Scores a baseline-weighted and a P2-weighted checkpoint trained on
/// otherwise identical configurations. Reports numbers only.
pub fn compare_runs(
    baseline: &Checkpoint,
    p2: &Checkpoint,
    sampler: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let (a, b) = (&baseline.header, &p2.header);
    if a.spec != b.spec
        || a.schedule != b.schedule
        || a.data != b.data
        || a.step != b.step
        || a.seed != b.seed
    {
        return Err(Error::InvalidConfig(
            "checkpoints differ in more than their weighting".into(),
        ));
    }
    Ok(ComparisonReport {
        schedule_family: a.schedule.family.to_string(),
        num_timesteps: a.schedule.num_timesteps,
        gamma: b.weighting.gamma,
        k: b.weighting.k,
        dataset: a.data.clone(),
        sampler: sampler.clone(),
        n,
        seed,
        stages: Stage::ALL,
        baseline: evaluate_checkpoint(baseline, sampler, n, seed)?,
        p2: evaluate_checkpoint(p2, sampler, n, seed)?,
    })
}
