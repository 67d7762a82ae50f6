//! Mini-batch training with Adam, exponential learning-rate decay and a
//! coarse-to-fine grid schedule, plus RSSI calibration.

use alloc::vec::Vec;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::field::{FieldModel, GradientSet, ModelConfig, ParamGroup};
use crate::geometry::Vec3;
use crate::math::{cbrt, log10, round};
use crate::objectives::{entropy_term, LossReport, DEFAULT_BG_WEIGHT};
use crate::optim::{lr_at, AdamState};
use crate::renderer::{
    backward_ray, default_step, forward_ray, render_spectrum, RayTape, SceneGeometry,
    SpatialSpectrum,
};

/// Hyperparameters of a training run. `model.dims` is the final resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Number of grid doublings between the coarsest and the final grid.
    pub stages: usize,
    /// Iterations at which the grids move to the next stage; one per stage.
    pub upsample_iters: Vec<usize>,
    pub total_iters: usize,
    pub batch_rays: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    /// Learning rates decay exponentially to this fraction at `total_iters`.
    pub lr_decay_target: f64,
    pub skip_threshold: f64,
    pub bg_weight: f64,
    /// Sample spacing in meters; `None` uses a quarter of the final voxel.
    pub step: Option<f64>,
    pub seed: u64,
    pub log_interval: usize,
}

impl TrainConfig {
    /// CPU-sized defaults: 32^3 grids, 8 features, 64-wide networks,
    /// 256 rays per batch, 5000 iterations.
    pub fn desk() -> Self {
        let total_iters = 5000;
        Self {
            model: ModelConfig::desk(),
            stages: 3,
            upsample_iters: default_upsample_iters(total_iters, 3),
            total_iters,
            batch_rays: 256,
            lr_grid: 0.2,
            lr_mlp: 2e-3,
            lr_decay_target: 0.1,
            skip_threshold: 1e-4,
            bg_weight: DEFAULT_BG_WEIGHT,
            step: None,
            seed: 0,
            log_interval: 100,
        }
    }

    /// Full-scale settings: 160^3 grids, 24 features, 256-wide networks,
    /// 1024 rays per batch, 100k iterations.
    pub fn paper() -> Self {
        let total_iters = 100_000;
        Self {
            model: ModelConfig::paper(),
            upsample_iters: default_upsample_iters(total_iters, 3),
            total_iters,
            batch_rays: 1024,
            log_interval: 1000,
            ..Self::desk()
        }
    }

    /// Replaces `total_iters` and rescales the upsample schedule to match.
    pub fn with_total_iters(mut self, total_iters: usize) -> Self {
        self.total_iters = total_iters;
        self.upsample_iters = default_upsample_iters(total_iters, self.stages);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(contract!("batch_rays must be at least 1"));
        }
        if self.log_interval == 0 {
            return Err(contract!("log_interval must be at least 1"));
        }
        if self.upsample_iters.len() != self.stages {
            return Err(contract!(
                "{} stages need {} upsample iterations, got {}",
                self.stages,
                self.stages,
                self.upsample_iters.len()
            ));
        }
        if self.total_iters > 0 {
            if self.upsample_iters.windows(2).any(|w| w[0] >= w[1]) {
                return Err(contract!(
                    "upsample iterations must increase strictly: {:?}",
                    self.upsample_iters
                ));
            }
            if self.upsample_iters.iter().any(|&i| i >= self.total_iters) {
                return Err(contract!(
                    "upsample iterations {:?} must precede total_iters {}",
                    self.upsample_iters,
                    self.total_iters
                ));
            }
        }
        let positive = [
            ("lr_grid", self.lr_grid),
            ("lr_mlp", self.lr_mlp),
            ("lr_decay_target", self.lr_decay_target),
        ];
        for (name, v) in positive {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(contract!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.skip_threshold >= 0.0) || !(self.bg_weight >= 0.0) {
            return Err(contract!("skip_threshold and bg_weight must be non-negative"));
        }
        if let Some(step) = self.step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(contract!("step must be positive, got {step}"));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Front-loaded schedule `total / 2^stages, ..., total / 4, total / 2`.
pub fn default_upsample_iters(total_iters: usize, stages: usize) -> Vec<usize> {
    (0..stages)
        .map(|s| total_iters >> (stages - s).min(63))
        .collect()
}

/// Grid resolution of stage `stage` out of `stages`: the voxel count is
/// `floor(final / 2^(stages - stage))`, distributed over the axes by cube-root
/// scaling.
pub fn progressive_dims(final_dims: [usize; 3], stage: usize, stages: usize) -> [usize; 3] {
    if stage >= stages {
        return final_dims;
    }
    let final_count = final_dims.iter().product::<usize>();
    let count = final_count >> (stages - stage).min(63);
    let ratio = cbrt(count as f64 / final_count as f64);
    final_dims.map(|d| (round(d as f64 * ratio) as usize).clamp(2, d))
}

/// One supervised transmitter position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub tx: Vec3,
    pub spectrum: SpatialSpectrum,
}

/// Receiver geometry plus measured spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub geometry: SceneGeometry,
    pub records: Vec<TrainingRecord>,
}

impl TrainingSet {
    pub fn new(geometry: SceneGeometry, records: Vec<TrainingRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.spectrum.resolution() != geometry.resolution() {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "record {i} has a {:?} spectrum, scene expects {:?}",
                    r.spectrum.resolution(),
                    geometry.resolution()
                )));
            }
            if !r.tx.is_finite() {
                return Err(contract!("record {i} has a non-finite transmitter"));
            }
        }
        Ok(Self { geometry, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subset by record index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> TrainingSet {
        TrainingSet {
            geometry: self.geometry,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// A supervised ray: record index and spectrum cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySample {
    pub record: usize,
    pub azimuth: usize,
    pub elevation: usize,
}

/// Draws `count` rays uniformly over records and spectrum cells.
pub fn sample_rays(data: &TrainingSet, count: usize, rng: &mut ChaCha8Rng) -> Vec<RaySample> {
    let (az, el) = data.geometry.resolution();
    (0..count)
        .map(|_| {
            let record = rng.random_range(0..data.len());
            let cell = rng.random_range(0..az * el);
            RaySample {
                record,
                azimuth: cell / el,
                elevation: cell % el,
            }
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub report: LossReport,
    pub lr_grid: f64,
    pub lr_mlp: f64,
}

impl LogEntry {
    pub const CSV_HEADER: &'static str = "iter,spectrum_loss,bg_loss,total,lr_grid,lr_mlp";

    pub fn csv_line(&self) -> alloc::string::String {
        alloc::format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.report.spectrum_loss,
            self.report.bg_loss,
            self.report.total,
            self.lr_grid,
            self.lr_mlp
        )
    }
}

/// Renders `rays` and returns their losses without touching the model.
pub fn evaluate_rays(
    model: &FieldModel,
    data: &TrainingSet,
    rays: &[RaySample],
    step: f64,
    skip_threshold: f64,
    bg_weight: f64,
) -> Result<LossReport> {
    if rays.is_empty() {
        return Err(contract!("cannot evaluate an empty ray batch"));
    }
    let mut rec = RayTape::default();
    let (mut se, mut bg) = (0.0, 0.0);
    for ray in rays {
        let r = &data.records[ray.record];
        let dir = data.geometry.direction(ray.azimuth, ray.elevation)?;
        forward_ray(model, &data.geometry, r.tx, dir, step, skip_threshold, &mut rec)?;
        let resid = rec.radiance - r.spectrum.get(ray.azimuth, ray.elevation);
        se += resid * resid;
        bg += entropy_term(rec.final_transmittance).0;
    }
    Ok(LossReport::new(se / rays.len() as f64, bg, bg_weight, rays.len()))
}

/// Mean squared error over every cell of every record.
pub fn dataset_spectrum_loss(
    model: &FieldModel,
    data: &TrainingSet,
    step: f64,
    skip_threshold: f64,
) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for r in &data.records {
        let pred = render_spectrum(model, &data.geometry, r.tx, step, skip_threshold)?;
        for (p, t) in pred.values().iter().zip(r.spectrum.values()) {
            se += (p - t) * (p - t);
        }
        n += pred.values().len();
    }
    if n == 0 {
        return Err(contract!("dataset has no cells"));
    }
    Ok(se / n as f64)
}

/// Step-by-step training driver.
pub struct Trainer<'a> {
    data: &'a TrainingSet,
    config: TrainConfig,
    model: FieldModel,
    adam: AdamState,
    grads: GradientSet,
    rng: ChaCha8Rng,
    iteration: usize,
    stage: usize,
    step: f64,
    history: Vec<LogEntry>,
    tape: RayTape,
    #[cfg(feature = "parallel")]
    chunk_grads: Vec<GradientSet>,
}

/// Rays of a batch are split into this many fixed chunks whose gradients are
/// reduced in chunk order, so results do not depend on the thread count.
#[cfg(feature = "parallel")]
const GRADIENT_CHUNKS: usize = 8;

impl<'a> Trainer<'a> {
    /// Builds the stage-0 model from `config.seed`.
    pub fn new(data: &'a TrainingSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(contract!("training set is empty"));
        }
        let mut model_cfg = config.model.clone();
        model_cfg.dims = progressive_dims(config.model.dims, 0, config.stages);
        let model = FieldModel::new(&model_cfg, *data.geometry.bbox(), config.seed)?;
        Self::resume(data, config, model)
    }

    /// Continues from an existing model whose grids are at stage-0 size or
    /// at any later stage size.
    pub fn resume(data: &'a TrainingSet, config: TrainConfig, model: FieldModel) -> Result<Self> {
        config.validate()?;
        let stage = (0..=config.stages)
            .find(|&s| progressive_dims(config.model.dims, s, config.stages) == model.dims())
            .ok_or_else(|| contract!("model grid {:?} matches no stage of the schedule", model.dims()))?;
        let step = config
            .step
            .unwrap_or_else(|| default_step(config.model.dims, data.geometry.bbox()));
        let lengths: Vec<usize> = model.zero_grad().tensors().iter().map(|t| t.len()).collect();
        let grads = model.zero_grad();
        Ok(Self {
            data,
            adam: AdamState::new(&lengths),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_7a41),
            iteration: 0,
            stage,
            step,
            history: Vec::new(),
            tape: RayTape::default(),
            #[cfg(feature = "parallel")]
            chunk_grads: Vec::new(),
            config,
            model,
            grads,
        })
    }

    pub fn model(&self) -> &FieldModel {
        &self.model
    }

    pub fn into_model(self) -> FieldModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    /// Sample spacing used for every ray.
    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn history(&self) -> &[LogEntry] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iters
    }

    /// Upsamples both grids if the current iteration is a scheduled stage
    /// change that has not happened yet. Grid Adam moments restart; network
    /// moments are kept.
    pub fn apply_pending_upsample(&mut self) -> Result<bool> {
        let mut changed = false;
        while self.stage < self.config.stages
            && self.config.upsample_iters[self.stage] <= self.iteration
        {
            self.stage += 1;
            let dims = progressive_dims(self.config.model.dims, self.stage, self.config.stages);
            if dims != self.model.dims() {
                self.model.upsample_grids(dims)?;
                changed = true;
            }
        }
        if changed {
            self.grads = self.model.zero_grad();
            #[cfg(feature = "parallel")]
            self.chunk_grads.clear();
            self.adam.reset_tensor(0, self.model.density.values().len());
            self.adam.reset_tensor(1, self.model.features.values().len());
        }
        Ok(changed)
    }

    /// Runs one iteration: pending upsample, batch gradient, Adam update.
    pub fn step(&mut self) -> Result<LossReport> {
        if self.is_done() {
            return Err(contract!("training already finished"));
        }
        self.apply_pending_upsample()?;
        let cfg = &self.config;
        let lr_grid = lr_at(self.iteration, cfg.lr_grid, cfg.total_iters, cfg.lr_decay_target);
        let lr_mlp = lr_at(self.iteration, cfg.lr_mlp, cfg.total_iters, cfg.lr_decay_target);
        let rays = sample_rays(self.data, cfg.batch_rays, &mut self.rng);

        let report = self.accumulate_batch(&rays)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }

        let grads = self.grads.tensors();
        let mut params = self.model.tensors_mut();
        self.adam.step(&mut params, &grads, |_, p| match p.group {
            ParamGroup::Grid => lr_grid,
            ParamGroup::Mlp => lr_mlp,
        })?;

        let it = self.iteration;
        if it % self.config.log_interval == 0 || it + 1 == self.config.total_iters {
            self.history.push(LogEntry {
                iteration: it,
                report,
                lr_grid,
                lr_mlp,
            });
        }
        self.iteration += 1;
        Ok(report)
    }

    #[cfg(not(feature = "parallel"))]
    fn accumulate_batch(&mut self, rays: &[RaySample]) -> Result<LossReport> {
        self.grads.zero();
        let (se, bg) = ray_chunk_gradients(
            &self.model,
            self.data,
            rays,
            rays.len(),
            self.step,
            (self.config.skip_threshold, self.config.bg_weight),
            &mut self.tape,
            &mut self.grads,
        )?;
        Ok(LossReport::new(se / rays.len() as f64, bg, self.config.bg_weight, rays.len()))
    }

    #[cfg(feature = "parallel")]
    fn accumulate_batch(&mut self, rays: &[RaySample]) -> Result<LossReport> {
        use rayon::prelude::*;
        let _ = &self.tape;
        if self.chunk_grads.len() != GRADIENT_CHUNKS {
            self.chunk_grads = (0..GRADIENT_CHUNKS).map(|_| self.model.zero_grad()).collect();
        }
        let chunk = rays.len().div_ceil(GRADIENT_CHUNKS).max(1);
        let (model, data, step) = (&self.model, self.data, self.step);
        let weights = (self.config.skip_threshold, self.config.bg_weight);
        let partial: Vec<Result<(f64, f64)>> = self
            .chunk_grads
            .par_iter_mut()
            .enumerate()
            .map(|(c, g)| {
                g.zero();
                let lo = (c * chunk).min(rays.len());
                let hi = ((c + 1) * chunk).min(rays.len());
                let mut tape = RayTape::default();
                ray_chunk_gradients(model, data, &rays[lo..hi], rays.len(), step, weights, &mut tape, g)
            })
            .collect();
        self.grads.zero();
        let (mut se, mut bg) = (0.0, 0.0);
        for (p, g) in partial.into_iter().zip(&self.chunk_grads) {
            let (a, b) = p?;
            se += a;
            bg += b;
            self.grads.add_assign(g);
        }
        Ok(LossReport::new(se / rays.len() as f64, bg, self.config.bg_weight, rays.len()))
    }

    /// Trains to completion.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(TrainOutcome {
            model: self.model,
            history: self.history,
        })
    }
}

/// Forward and backward over a slice of rays; returns the summed squared
/// error and summed entropy.
#[allow(clippy::too_many_arguments)]
fn ray_chunk_gradients(
    model: &FieldModel,
    data: &TrainingSet,
    rays: &[RaySample],
    batch: usize,
    step: f64,
    (skip_threshold, bg_weight): (f64, f64),
    tape: &mut RayTape,
    grads: &mut GradientSet,
) -> Result<(f64, f64)> {
    let (mut se, mut bg) = (0.0, 0.0);
    for ray in rays {
        let r = &data.records[ray.record];
        let dir = data.geometry.direction(ray.azimuth, ray.elevation)?;
        forward_ray(model, &data.geometry, r.tx, dir, step, skip_threshold, tape)?;
        let resid = tape.radiance - r.spectrum.get(ray.azimuth, ray.elevation);
        let (entropy, d_entropy) = entropy_term(tape.final_transmittance);
        se += resid * resid;
        bg += entropy;
        let d_radiance = 2.0 * resid / batch as f64;
        backward_ray(model, tape, d_radiance, bg_weight * d_entropy, grads);
    }
    Ok((se, bg))
}

/// Loss and parameter gradient of one ray batch, exactly as a training step
/// computes them.
pub fn batch_gradient(
    model: &FieldModel,
    data: &TrainingSet,
    rays: &[RaySample],
    step: f64,
    skip_threshold: f64,
    bg_weight: f64,
) -> Result<(LossReport, GradientSet)> {
    if rays.is_empty() {
        return Err(contract!("cannot differentiate an empty ray batch"));
    }
    let mut grads = model.zero_grad();
    let mut tape = RayTape::default();
    let (se, bg) = ray_chunk_gradients(
        model,
        data,
        rays,
        rays.len(),
        step,
        (skip_threshold, bg_weight),
        &mut tape,
        &mut grads,
    )?;
    let report = LossReport::new(se / rays.len() as f64, bg, bg_weight, rays.len());
    Ok((report, grads))
}

/// Final model and logged losses of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FieldModel,
    pub history: Vec<LogEntry>,
}

/// Trains a fresh model on `data`.
pub fn train(data: &TrainingSet, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(data, config)?.run()
}

/// Least-squares constant offset between measured RSSI and
/// `10 log10(sum of predicted spectrum)`, over pairs
/// `(predicted power sum, measured dB)`. Pairs without positive predicted
/// power are ignored.
pub fn calibration_offset(pairs: &[(f64, f64)]) -> Result<f64> {
    let residuals: Vec<f64> = pairs
        .iter()
        .filter(|(p, m)| *p > 0.0 && p.is_finite() && m.is_finite())
        .map(|(p, m)| m - 10.0 * log10(*p))
        .collect();
    if residuals.is_empty() {
        return Err(Error::NoCalibrationRecords);
    }
    Ok(residuals.iter().sum::<f64>() / residuals.len() as f64)
}

/// Fits the calibration constant `c` of
/// [`aggregate_rssi`](crate::renderer::aggregate_rssi) on `(tx, measured dB)`
/// records.
pub fn fit_rssi_calibration(
    model: &FieldModel,
    geometry: &SceneGeometry,
    records: &[(Vec3, f64)],
    step: f64,
    skip_threshold: f64,
) -> Result<f64> {
    let mut pairs = Vec::with_capacity(records.len());
    for (tx, measured) in records {
        let s = render_spectrum(model, geometry, *tx, step, skip_threshold)?;
        pairs.push((s.sum(), *measured));
    }
    calibration_offset(&pairs)
}
