//! Receiver-side ray generation, sampling and alpha compositing.
//!
//! A ray leaves the receiver along `dir`, is clipped to the bounding box and
//! sampled at uniform spacing. Every sample acts as a virtual transmitter:
//!
//! ```text
//! alpha_i = 1 - exp(-sigma_i * delta_i)
//! T_i     = prod_{j<i} (1 - alpha_j)
//! R       = sum_i T_i * alpha_i * S_i
//! ```
//!
//! Samples whose density falls below the skip threshold are dropped before
//! the signal network runs and contribute `alpha = 0`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::field::{FieldModel, RayContext, SignalTape};
use crate::geometry::{Aabb, Vec3};
use crate::math::{cos, exp, floor, log10, sin};
use crate::voxel_grid::Cell;

/// Fixed receiver, modeled volume and spectrum resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGeometry {
    rx: Vec3,
    bbox: Aabb,
    azimuths: usize,
    elevations: usize,
}

impl SceneGeometry {
    pub fn new(rx: Vec3, bbox: Aabb, azimuths: usize, elevations: usize) -> Result<Self> {
        if !bbox.contains(rx) {
            return Err(contract!("receiver {:?} lies outside the bounding box", rx.to_array()));
        }
        if azimuths == 0 || elevations == 0 {
            return Err(contract!("spectrum resolution must be at least 1x1"));
        }
        Ok(Self {
            rx,
            bbox,
            azimuths,
            elevations,
        })
    }

    pub fn rx(&self) -> Vec3 {
        self.rx
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    /// `(M azimuths, N elevations)`
    pub fn resolution(&self) -> (usize, usize) {
        (self.azimuths, self.elevations)
    }

    pub fn cell_count(&self) -> usize {
        self.azimuths * self.elevations
    }

    pub fn direction(&self, m: usize, n: usize) -> Result<Vec3> {
        direction_from_angles(m, n, (self.azimuths, self.elevations))
    }
}

/// Received power per (azimuth, elevation) cell, azimuth-major:
/// cell `(m, n)` is stored at `m * N + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSpectrum {
    azimuths: usize,
    elevations: usize,
    values: Vec<f64>,
}

impl SpatialSpectrum {
    pub fn zeros(azimuths: usize, elevations: usize) -> Self {
        Self {
            azimuths,
            elevations,
            values: vec![0.0; azimuths * elevations],
        }
    }

    pub fn from_values(azimuths: usize, elevations: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != azimuths * elevations {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{azimuths}x{elevations} spectrum needs {} values, got {}",
                azimuths * elevations,
                values.len()
            )));
        }
        Ok(Self {
            azimuths,
            elevations,
            values,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.azimuths, self.elevations)
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.elevations + n]
    }

    pub fn set(&mut self, m: usize, n: usize, v: f64) {
        self.values[m * self.elevations + n] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(m, n)` of the largest cell (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.elevations, best % self.elevations)
    }
}

/// Center direction of spectrum cell `(m, n)`, z up:
/// azimuth `2 pi (m + 1/2) / M`, elevation `(pi/2) (n + 1/2) / N` above the
/// horizon.
pub fn direction_from_angles(m: usize, n: usize, (az, el): (usize, usize)) -> Result<Vec3> {
    if m >= az || n >= el {
        return Err(contract!("cell ({m}, {n}) outside a {az}x{el} spectrum"));
    }
    let phi = 2.0 * core::f64::consts::PI * (m as f64 + 0.5) / az as f64;
    let theta = core::f64::consts::FRAC_PI_2 * (n as f64 + 0.5) / el as f64;
    Ok(Vec3::new(
        cos(theta) * cos(phi),
        cos(theta) * sin(phi),
        sin(theta),
    ))
}

/// A quarter of the smallest voxel edge of a `dims` lattice over `bbox`.
pub fn default_step(dims: [usize; 3], bbox: &Aabb) -> f64 {
    let e = bbox.extent();
    let edge = Vec3::new(
        e.x / (dims[0] - 1) as f64,
        e.y / (dims[1] - 1) as f64,
        e.z / (dims[2] - 1) as f64,
    );
    edge.min_component() / 4.0
}

/// Uniform samples along a clipped ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySamples {
    pub t_near: f64,
    pub step: f64,
    pub count: usize,
}

impl RaySamples {
    /// Distance of sample `i` from the ray origin.
    #[inline]
    pub fn distance(&self, i: usize) -> f64 {
        self.t_near + (i as f64 + 0.5) * self.step
    }

    pub fn distances(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|i| self.distance(i))
    }
}

/// Sample placement `r_i = t_near + (i + 1/2) step`, `i < floor((t_far - t_near) / step)`.
pub fn sample_ray(origin: Vec3, dir: Vec3, bbox: &Aabb, step: f64) -> Result<RaySamples> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(contract!("sample step must be positive, got {step}"));
    }
    let (t_near, t_far) = bbox.clip_ray(origin, dir);
    let count = if t_far > t_near {
        floor((t_far - t_near) / step) as usize
    } else {
        0
    };
    Ok(RaySamples {
        t_near,
        step,
        count,
    })
}

/// Output of [`composite`].
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub radiance: f64,
    pub final_transmittance: f64,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Single front-to-back compositing pass.
pub fn composite(sigma: &[f64], signal: &[f64], delta: &[f64]) -> Result<Composite> {
    if sigma.len() != signal.len() || sigma.len() != delta.len() {
        return Err(contract!(
            "composite needs equal lengths, got {} / {} / {}",
            sigma.len(),
            signal.len(),
            delta.len()
        ));
    }
    let k = sigma.len();
    let mut out = Composite {
        radiance: 0.0,
        final_transmittance: 1.0,
        alpha: Vec::with_capacity(k),
        transmittance: Vec::with_capacity(k),
        weights: Vec::with_capacity(k),
    };
    let mut t = 1.0;
    for i in 0..k {
        if !(sigma[i] >= 0.0) {
            return Err(contract!("density must be non-negative, got {} at {i}", sigma[i]));
        }
        let a = 1.0 - exp(-sigma[i] * delta[i]);
        let w = t * a;
        out.alpha.push(a);
        out.transmittance.push(t);
        out.weights.push(w);
        out.radiance += w * signal[i];
        t *= 1.0 - a;
    }
    out.final_transmittance = t;
    Ok(out)
}

/// Everything computed along one rendered ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTrace {
    pub direction: Vec3,
    pub samples: RaySamples,
    /// Per sample: whether it survived empty-space skipping.
    pub kept: Vec<bool>,
    pub sigma: Vec<f64>,
    /// Per kept sample.
    pub signal: Vec<f64>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub radiance: f64,
    pub final_transmittance: f64,
}

impl RayTrace {
    pub fn kept_count(&self) -> usize {
        self.signal.len()
    }

    pub fn skipped_count(&self) -> usize {
        self.samples.count - self.kept_count()
    }
}

/// Renders one ray and keeps every intermediate.
pub fn trace_ray(
    model: &FieldModel,
    geometry: &SceneGeometry,
    tx: Vec3,
    dir: Vec3,
    step: f64,
    skip_threshold: f64,
) -> Result<RayTrace> {
    check_threshold(skip_threshold)?;
    let samples = sample_ray(geometry.rx, dir, &geometry.bbox, step)?;
    let ctx = model.ray_context(tx, -dir);
    let mut tape = SignalTape::default();
    let mut trace = RayTrace {
        direction: dir,
        samples,
        kept: Vec::with_capacity(samples.count),
        sigma: Vec::with_capacity(samples.count),
        signal: Vec::new(),
        alpha: Vec::new(),
        transmittance: Vec::new(),
        weights: Vec::new(),
        radiance: 0.0,
        final_transmittance: 1.0,
    };
    let mut t = 1.0;
    for r in samples.distances() {
        let x = geometry.rx + dir * r;
        let cell = model.density.locate(x)?;
        let (_, sigma) = model.density_at(&cell);
        trace.sigma.push(sigma);
        let keep = sigma >= skip_threshold;
        trace.kept.push(keep);
        if !keep {
            continue;
        }
        let s = model.signal_at(&ctx, &cell, x, &mut tape);
        let a = 1.0 - exp(-sigma * step);
        let w = t * a;
        trace.signal.push(s);
        trace.alpha.push(a);
        trace.transmittance.push(t);
        trace.weights.push(w);
        trace.radiance += w * s;
        t *= 1.0 - a;
    }
    trace.final_transmittance = t;
    Ok(trace)
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(contract!("skip threshold must be non-negative, got {tau}"));
    }
    Ok(())
}

/// Sample bookkeeping of a render.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub kept: usize,
    pub skipped: usize,
}

impl RenderStats {
    pub fn total(&self) -> usize {
        self.kept + self.skipped
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total() as f64
        }
    }

    fn merge(self, o: RenderStats) -> RenderStats {
        RenderStats {
            kept: self.kept + o.kept,
            skipped: self.skipped + o.skipped,
        }
    }
}

/// Reusable buffers for rendering rays without keeping traces.
#[derive(Debug, Default)]
pub struct RayScratch {
    tape: SignalTape,
}

/// Accumulated signal and final transmittance along one ray.
pub fn render_ray(
    model: &FieldModel,
    geometry: &SceneGeometry,
    tx: Vec3,
    dir: Vec3,
    step: f64,
    skip_threshold: f64,
) -> Result<(f64, f64)> {
    check_threshold(skip_threshold)?;
    let mut scratch = RayScratch::default();
    render_ray_with(model, geometry, tx, dir, step, skip_threshold, &mut scratch)
        .map(|(r, t, _)| (r, t))
}

fn render_ray_with(
    model: &FieldModel,
    geometry: &SceneGeometry,
    tx: Vec3,
    dir: Vec3,
    step: f64,
    skip_threshold: f64,
    scratch: &mut RayScratch,
) -> Result<(f64, f64, RenderStats)> {
    let samples = sample_ray(geometry.rx, dir, &geometry.bbox, step)?;
    let ctx = model.ray_context(tx, -dir);
    scratch.tape.clear();
    let mut radiance = 0.0;
    let mut t = 1.0;
    let mut stats = RenderStats::default();
    for r in samples.distances() {
        let x = geometry.rx + dir * r;
        let cell = model.density.locate(x)?;
        let (_, sigma) = model.density_at(&cell);
        if sigma < skip_threshold {
            stats.skipped += 1;
            continue;
        }
        stats.kept += 1;
        let s = model.signal_at(&ctx, &cell, x, &mut scratch.tape);
        let a = 1.0 - exp(-sigma * step);
        radiance += t * a * s;
        t *= 1.0 - a;
    }
    Ok((radiance, t, stats))
}

/// Renders the full `M x N` spectrum seen by the receiver for transmitter `tx`.
pub fn render_spectrum(
    model: &FieldModel,
    geometry: &SceneGeometry,
    tx: Vec3,
    step: f64,
    skip_threshold: f64,
) -> Result<SpatialSpectrum> {
    render_spectrum_with_stats(model, geometry, tx, step, skip_threshold).map(|(s, _)| s)
}

pub fn render_spectrum_with_stats(
    model: &FieldModel,
    geometry: &SceneGeometry,
    tx: Vec3,
    step: f64,
    skip_threshold: f64,
) -> Result<(SpatialSpectrum, RenderStats)> {
    check_threshold(skip_threshold)?;
    if !tx.is_finite() {
        return Err(contract!("transmitter position must be finite"));
    }
    let (az, el) = geometry.resolution();
    let render_cell = |idx: usize, scratch: &mut RayScratch| {
        let dir = geometry.direction(idx / el, idx % el)?;
        render_ray_with(model, geometry, tx, dir, step, skip_threshold, scratch)
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(f64, f64, RenderStats)>> = {
        use rayon::prelude::*;
        (0..az * el)
            .into_par_iter()
            .map_init(RayScratch::default, |s, idx| render_cell(idx, s))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(f64, f64, RenderStats)>> = {
        let mut scratch = RayScratch::default();
        (0..az * el).map(|idx| render_cell(idx, &mut scratch)).collect()
    };

    let mut spectrum = SpatialSpectrum::zeros(az, el);
    let mut stats = RenderStats::default();
    for (idx, r) in results.into_iter().enumerate() {
        let (radiance, _, s) = r?;
        spectrum.values[idx] = radiance;
        stats = stats.merge(s);
    }
    Ok((spectrum, stats))
}

/// Total received power in dB: `10 log10(sum R) + calibration`.
pub fn aggregate_rssi(spectrum: &SpatialSpectrum, calibration_db: f64) -> Result<f64> {
    if spectrum.values.iter().any(|v| !(*v >= 0.0)) {
        return Err(contract!("spectrum values must be non-negative"));
    }
    let total = spectrum.sum();
    if !(total > 0.0) {
        return Err(Error::NoReceivedPower);
    }
    Ok(10.0 * log10(total) + calibration_db)
}

/// Forward record of one training ray, reused across rays.
#[derive(Debug, Default)]
pub struct RayTape {
    ctx: Option<RayContext>,
    tape: SignalTape,
    cells: Vec<Cell>,
    raw: Vec<f64>,
    alpha: Vec<f64>,
    transmittance: Vec<f64>,
    step: f64,
    pub radiance: f64,
    pub final_transmittance: f64,
    pub stats: RenderStats,
}

/// Renders one ray and records what [`backward_ray`] needs.
pub fn forward_ray(
    model: &FieldModel,
    geometry: &SceneGeometry,
    tx: Vec3,
    dir: Vec3,
    step: f64,
    skip_threshold: f64,
    rec: &mut RayTape,
) -> Result<()> {
    let samples = sample_ray(geometry.rx, dir, &geometry.bbox, step)?;
    rec.ctx = Some(model.ray_context(tx, -dir));
    rec.tape.clear();
    rec.cells.clear();
    rec.raw.clear();
    rec.alpha.clear();
    rec.transmittance.clear();
    rec.step = step;
    rec.stats = RenderStats::default();
    let ctx = rec.ctx.as_ref().expect("context just set");
    let mut radiance = 0.0;
    let mut t = 1.0;
    for r in samples.distances() {
        let x = geometry.rx + dir * r;
        let cell = model.density.locate(x)?;
        let (raw, sigma) = model.density_at(&cell);
        if sigma < skip_threshold {
            rec.stats.skipped += 1;
            continue;
        }
        rec.stats.kept += 1;
        let s = model.signal_at(ctx, &cell, x, &mut rec.tape);
        let a = 1.0 - exp(-sigma * step);
        rec.cells.push(cell);
        rec.raw.push(raw);
        rec.alpha.push(a);
        rec.transmittance.push(t);
        radiance += t * a * s;
        t *= 1.0 - a;
    }
    rec.radiance = radiance;
    rec.final_transmittance = t;
    Ok(())
}

/// Backpropagates `d_radiance` and `d_transmittance` (gradients of the loss
/// with respect to this ray's `R` and `T_K`) into `grads`.
pub fn backward_ray(
    model: &FieldModel,
    rec: &mut RayTape,
    d_radiance: f64,
    d_transmittance: f64,
    grads: &mut crate::field::GradientSet,
) {
    let Some(ctx) = rec.ctx.as_mut() else {
        return;
    };
    let delta = rec.step;
    let t_k = rec.final_transmittance;
    // Signal still to be collected behind sample i.
    let mut behind = 0.0;
    for i in (0..rec.alpha.len()).rev() {
        let (a, t) = (rec.alpha[i], rec.transmittance[i]);
        let s = rec.tape.signal_value(i);
        let w = t * a;
        let d_sigma = d_radiance * delta * ((1.0 - a) * t * s - behind) - d_transmittance * delta * t_k;
        model.density_backward(&rec.cells[i], rec.raw[i], d_sigma, grads);
        model.signal_backward(ctx, &rec.tape, i, d_radiance * w, grads);
        behind += w * s;
    }
    model.finish_ray(ctx, grads);
}
