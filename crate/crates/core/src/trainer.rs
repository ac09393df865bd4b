//! Optimization loop: uniform timestep sampling, weighted ε-MSE, AdamW with
//! decoupled weight decay, and an EMA of the parameters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::data::{DataPoint, DatasetDescriptor};
use crate::denoiser::{Architecture, Denoiser, DenoiserParams, DenoiserSpec};
use crate::diffusion::{forward_sample, NoisyPoint};
use crate::error::{Error, Result};
use crate::rng::{self, streams, DetRng};
use crate::schedule::{stage_of, Schedule, ScheduleConfig};
use crate::weighting::{build_weight_table, WeightTable, WeightingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepSampling {
    Uniform,
}

/// Everything the optimization loop needs besides the model shape and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_rate: f64,
    pub seed: u64,
    pub weighting: WeightingConfig,
    pub schedule: ScheduleConfig,
    pub t_sampling: TimestepSampling,
    /// Steps per metrics row.
    pub log_every: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_rate: 0.9999,
            seed: 0,
            weighting: WeightingConfig::baseline(),
            schedule: ScheduleConfig::default(),
            t_sampling: TimestepSampling::Uniform,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!(
                "ema_rate must lie in [0, 1), got {}",
                self.ema_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        self.weighting.validate()
    }
}

/// I.i.d. uniform draws from `1..=T`.
pub fn sample_timesteps(batch_size: usize, num_timesteps: usize, rng: &mut DetRng) -> Vec<usize> {
    (0..batch_size)
        .map(|_| rng.random_range(1..=num_timesteps))
        .collect()
}

/// Adam with decoupled weight decay. The decay is applied after the adaptive
/// step: `θ ← θ − lr·m̂/(√v̂ + ε)`, then `θ ← θ − lr·wd·θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(
        num_params: usize,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn from_config(num_params: usize, cfg: &TrainConfig) -> Self {
        Self::new(
            num_params,
            cfg.lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        )
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let decay = self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            *p -= decay * *p;
        }
    }
}

/// Shadow copy of the parameters, `shadow ← rate·shadow + (1 − rate)·live`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams {
    pub shadow: Vec<f64>,
}

impl EmaParams {
    pub fn new(live: &[f64]) -> Self {
        Self {
            shadow: live.to_vec(),
        }
    }

    pub fn update(&mut self, live: &[f64], rate: f64) {
        for (s, l) in self.shadow.iter_mut().zip(live) {
            *s = rate * *s + (1.0 - rate) * l;
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Sum of per-example weighted losses and example count per stage
    /// (coarse, content, clean-up).
    pub stage_sums: [(f64, usize); 3],
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub ema: EmaParams,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: DetRng,
}

impl TrainState {
    pub fn new(arch: &Architecture, cfg: &TrainConfig) -> Self {
        let params = arch.init_params(&mut rng::stream(cfg.seed, streams::INIT));
        Self {
            ema: EmaParams::new(params.as_slice()),
            optimizer: AdamW::from_config(arch.num_params(), cfg),
            params,
            step: 0,
            rng: rng::stream(cfg.seed, streams::DIFFUSION),
        }
    }
}

/// One optimizer update on a batch of clean points.
pub fn train_step(
    state: &mut TrainState,
    arch: &Architecture,
    batch: &[DataPoint],
    sched: &Schedule,
    table: &WeightTable,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ts = sample_timesteps(batch.len(), sched.num_timesteps(), &mut state.rng);
    let noisy: Vec<NoisyPoint> = batch
        .iter()
        .zip(&ts)
        .map(|(x0, &t)| forward_sample(x0, t, sched, &mut state.rng))
        .collect::<Result<_>>()?;
    train_step_on(state, arch, &noisy, sched, table, cfg)
}

/// One optimizer update on already-corrupted examples.
pub fn train_step_on(
    state: &mut TrainState,
    arch: &Architecture,
    noisy: &[NoisyPoint],
    sched: &Schedule,
    table: &WeightTable,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let out = arch.loss_and_grad_detailed(&state.params, noisy, table)?;
    let grad_norm = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    let mut stage_sums = [(0.0, 0usize); 3];
    for (ex, l) in noisy.iter().zip(&out.per_example) {
        let stage = stage_of(sched.snr_at(ex.t)?)?;
        let slot = &mut stage_sums[stage.index()];
        slot.0 += l;
        slot.1 += 1;
    }

    if !out.loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            grad_norm,
            t_histogram: [stage_sums[0].1, stage_sums[1].1, stage_sums[2].1],
        });
    }

    state.optimizer.step(state.params.as_mut_slice(), &out.grad);
    state.ema.update(state.params.as_slice(), cfg.ema_rate);
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        loss: out.loss,
        grad_norm,
        stage_sums,
    })
}

/// One row of `metrics.csv`, averaged over a logging interval.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    /// Mean weighted loss of examples in each stage; NaN if none were drawn.
    pub stage_loss: [f64; 3],
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss,loss_coarse,loss_content,loss_cleanup,grad_norm";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.step,
            self.loss,
            self.stage_loss[0],
            self.stage_loss[1],
            self.stage_loss[2],
            self.grad_norm
        )
    }
}

#[derive(Debug, Default)]
struct Accumulator {
    steps: u64,
    loss: f64,
    grad_norm: f64,
    stages: [(f64, usize); 3],
}

impl Accumulator {
    fn add(&mut self, r: &StepReport) {
        self.steps += 1;
        self.loss += r.loss;
        self.grad_norm += r.grad_norm;
        for (acc, s) in self.stages.iter_mut().zip(&r.stage_sums) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
    }

    fn flush(&mut self, step: u64) -> MetricsRow {
        let n = self.steps as f64;
        let row = MetricsRow {
            step,
            loss: self.loss / n,
            stage_loss: self.stages.map(|(sum, count)| {
                if count == 0 {
                    f64::NAN
                } else {
                    sum / count as f64
                }
            }),
            grad_norm: self.grad_norm / n,
        };
        *self = Self::default();
        row
    }
}

/// A training run in memory: configuration, schedule, network and state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub data: DatasetDescriptor,
    pub sched: Schedule,
    pub table: WeightTable,
    pub arch: Architecture,
    pub state: TrainState,
    data_rng: DetRng,
    acc: Accumulator,
    pub metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, spec: DenoiserSpec, data: DatasetDescriptor) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if spec.input_dim != data.dim() {
            return Err(Error::InvalidConfig(format!(
                "model input_dim {} does not match dataset dimension {}",
                spec.input_dim,
                data.dim()
            )));
        }
        let sched = cfg.schedule.build()?;
        let table = build_weight_table(&sched, &cfg.weighting)?;
        let arch = Architecture::new(spec, sched.num_timesteps())?;
        let state = TrainState::new(&arch, &cfg);
        let data_rng = rng::stream(cfg.seed, streams::DATA);
        Ok(Self {
            cfg,
            data,
            sched,
            table,
            arch,
            state,
            data_rng,
            acc: Accumulator::default(),
            metrics: Vec::new(),
        })
    }

    /// Draws a fresh batch and takes one step; appends a metrics row at the
    /// end of every logging interval.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch: Vec<DataPoint> = (0..self.cfg.batch_size)
            .map(|_| self.data.draw(&mut self.data_rng))
            .collect();
        let report = train_step(
            &mut self.state,
            &self.arch,
            &batch,
            &self.sched,
            &self.table,
            &self.cfg,
        )?;
        self.acc.add(&report);
        if report.step % self.cfg.log_every == 0 {
            let row = self.acc.flush(report.step);
            log::info!(
                "step {} loss {:.5} (coarse {:.5}, content {:.5}, clean-up {:.5}) |g| {:.4}",
                row.step,
                row.loss,
                row.stage_loss[0],
                row.stage_loss[1],
                row.stage_loss[2],
                row.grad_norm
            );
            self.metrics.push(row);
        }
        Ok(report)
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Closes a partial logging interval, if any.
    pub fn flush_metrics(&mut self) {
        if self.acc.steps > 0 {
            let row = self.acc.flush(self.state.step);
            self.metrics.push(row);
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader::new(
                self.arch.spec().clone(),
                self.cfg.schedule.clone(),
                self.cfg.weighting,
                self.data.clone(),
                self.cfg.seed,
                self.state.step,
                self.arch.num_params(),
            ),
            params: self.state.params.as_slice().to_vec(),
            ema: self.state.ema.shadow.clone(),
        }
    }

    /// Denoiser with the EMA weights.
    pub fn ema_denoiser(&self) -> Denoiser {
        Denoiser {
            arch: self.arch.clone(),
            params: DenoiserParams::from_flat(self.state.ema.shadow.clone()),
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for row in &self.metrics {
            out.push_str(&row.to_csv_line());
            out.push('\n');
        }
        out
    }
}

/// Runs `cfg.steps` steps, writing `metrics.csv`, intermediate checkpoints
/// (`checkpoint_<step>.bin`) and the final `checkpoint.bin` into `out_dir`.
/// Returns the final checkpoint path.
pub fn train(
    cfg: &TrainConfig,
    spec: &DenoiserSpec,
    data: &DatasetDescriptor,
    out_dir: &Path,
) -> Result<PathBuf> {
    let mut trainer = Trainer::new(cfg.clone(), spec.clone(), data.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    for _ in 0..cfg.steps {
        trainer.step()?;
        let step = trainer.state.step;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            checkpoint::save(
                &trainer.checkpoint(),
                &out_dir.join(format!("checkpoint_{step}.bin")),
            )?;
            write(&metrics_path, trainer.metrics_csv())?;
        }
    }
    trainer.flush_metrics();
    write(&metrics_path, trainer.metrics_csv())?;
    let path = out_dir.join("checkpoint.bin");
    checkpoint::save(&trainer.checkpoint(), &path)?;
    Ok(path)
}

fn write(path: &Path, contents: String) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
