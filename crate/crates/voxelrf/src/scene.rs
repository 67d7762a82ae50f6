//! Analytic Gaussian-blob scenes and a brute-force reference renderer.
//!
//! The reference renderer shares no code with the core renderer: it clips
//! rays itself and composites with the explicit product
//! `T_i = prod_{j<i} (1 - alpha_j)`, so it can falsify the incremental
//! implementation.

use serde::{Deserialize, Serialize};
use voxelrf_core::{Aabb, SceneGeometry, SpatialSpectrum, Vec3};

use crate::error::{Error, Result};

/// Signal values are kept strictly inside (0, 1) like a sigmoid output.
pub const SIGNAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub peak_density: f64,
    pub emission: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    bbox: Aabb,
    rx: Vec3,
    blobs: Vec<Blob>,
    tx_modulation: f64,
}

impl SyntheticScene {
    pub fn new(bbox: Aabb, rx: Vec3, blobs: Vec<Blob>, tx_modulation: f64) -> Result<Self> {
        if !bbox.contains(rx) {
            return Err(Error::Config(format!("receiver {rx:?} lies outside the scene box")));
        }
        if !(tx_modulation >= 0.0 && tx_modulation.is_finite()) {
            return Err(Error::Config(format!("tx_modulation must be >= 0, got {tx_modulation}")));
        }
        for (i, b) in blobs.iter().enumerate() {
            if !bbox.contains(Vec3::from_array(b.center)) {
                return Err(Error::Config(format!("blob {i} center lies outside the scene box")));
            }
            if !(b.radius > 0.0) || !(b.peak_density >= 0.0) || !(b.emission > 0.0 && b.emission < 1.0) {
                return Err(Error::Config(format!(
                    "blob {i} needs radius > 0, peak_density >= 0 and emission in (0, 1)"
                )));
            }
        }
        Ok(Self {
            bbox,
            rx,
            blobs,
            tx_modulation,
        })
    }

    /// Three reflectors above a receiver in a 4 m room.
    pub fn demo(tx_modulation: f64) -> Self {
        let bbox = Aabb::new(Vec3::ZERO, Vec3::splat(4.0)).unwrap();
        let blobs = vec![
            Blob {
                center: [1.1, 2.6, 2.9],
                radius: 0.35,
                peak_density: 6.0,
                emission: 0.9,
            },
            Blob {
                center: [2.9, 1.3, 3.0],
                radius: 0.4,
                peak_density: 5.0,
                emission: 0.7,
            },
            Blob {
                center: [2.6, 3.0, 2.1],
                radius: 0.3,
                peak_density: 8.0,
                emission: 0.8,
            },
        ];
        Self::new(bbox, Vec3::new(2.0, 2.0, 1.5), blobs, tx_modulation).unwrap()
    }

    /// Looks up a built-in scene by name.
    pub fn preset(name: &str, tx_modulation: f64) -> Result<Self> {
        match name {
            "demo" => Ok(Self::demo(tx_modulation)),
            "empty" => Self::new(*Self::demo(0.0).bbox(), Self::demo(0.0).rx(), Vec::new(), tx_modulation),
            other => Err(Error::Config(format!("unknown scene preset `{other}` (known: demo, empty)"))),
        }
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn rx(&self) -> Vec3 {
        self.rx
    }

    pub fn blobs(&self) -> &[Blob] {
        &self.blobs
    }

    pub fn tx_modulation(&self) -> f64 {
        self.tx_modulation
    }

    pub fn geometry(&self, azimuths: usize, elevations: usize) -> Result<SceneGeometry> {
        Ok(SceneGeometry::new(self.rx, self.bbox, azimuths, elevations)?)
    }
}

/// Density and signal of the analytic field at `x`, for a transmitter at
/// `tx` and propagation direction `dir` (unit).
///
/// Each blob contributes `peak * g` to the density and
/// `emission * g * (1 + m cos(pi <unit(tx - c), dir>)) / (1 + m)` to the
/// signal, with `g = exp(-|x - c|^2 / (2 r^2))`; the signal is clamped to
/// `[SIGNAL_FLOOR, 1 - SIGNAL_FLOOR]`.
pub fn oracle_density_emission(scene: &SyntheticScene, x: Vec3, tx: Vec3, dir: Vec3) -> (f64, f64) {
    let m = scene.tx_modulation;
    let mut sigma = 0.0;
    let mut signal = 0.0;
    for b in &scene.blobs {
        let c = Vec3::from_array(b.center);
        let d = x - c;
        let g = (-d.dot(d) / (2.0 * b.radius * b.radius)).exp();
        sigma += b.peak_density * g;
        let to_tx = tx - c;
        let n = to_tx.norm();
        let cos_arg = if n > 0.0 { to_tx.dot(dir) / n } else { 0.0 };
        let directivity = (1.0 + m * (std::f64::consts::PI * cos_arg).cos()) / (1.0 + m);
        signal += b.emission * g * directivity;
    }
    (sigma, signal.clamp(SIGNAL_FLOOR, 1.0 - SIGNAL_FLOOR))
}

/// Result of [`oracle_composite`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComposite {
    pub radiance: f64,
    pub final_transmittance: f64,
    pub weights: Vec<f64>,
}

/// Front-to-back compositing with every transmittance formed as an explicit
/// product over the preceding samples. Quadratic in the sample count.
pub fn oracle_composite(sigma: &[f64], signal: &[f64], delta: &[f64]) -> OracleComposite {
    assert!(sigma.len() == signal.len() && sigma.len() == delta.len());
    let alpha: Vec<f64> = sigma.iter().zip(delta).map(|(s, d)| 1.0 - (-s * d).exp()).collect();
    let transmittance = |i: usize| alpha[..i].iter().map(|a| 1.0 - a).product::<f64>();
    let weights: Vec<f64> = (0..alpha.len()).map(|i| transmittance(i) * alpha[i]).collect();
    OracleComposite {
        radiance: weights.iter().zip(signal).map(|(w, s)| w * s).sum(),
        final_transmittance: transmittance(alpha.len()),
        weights,
    }
}

/// Entry and exit distances of a ray through a closed box, or `None` when
/// it misses.
fn ray_interval(bbox: &Aabb, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let (lo, hi) = (bbox.min().to_array(), bbox.max().to_array());
    let (o, d) = (origin.to_array(), dir.to_array());
    let (mut near, mut far) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t0 = (lo[a] - o[a]) / d[a];
        let t1 = (hi[a] - o[a]) / d[a];
        near = near.max(t0.min(t1));
        far = far.min(t0.max(t1));
    }
    (far > near).then_some((near, far))
}

/// Midpoint samples at spacing `step` inside the box along `dir`:
/// `t_i = near + (i + 1/2) step` for `i < floor((far - near) / step)`.
fn ray_points(bbox: &Aabb, origin: Vec3, dir: Vec3, step: f64) -> Vec<Vec3> {
    let Some((near, far)) = ray_interval(bbox, origin, dir) else {
        return Vec::new();
    };
    let count = ((far - near) / step).floor() as usize;
    (0..count)
        .map(|i| origin + dir * (near + (i as f64 + 0.5) * step))
        .collect()
}

/// Reference spectrum of the analytic field seen from the receiver.
pub fn oracle_render(scene: &SyntheticScene, geometry: &SceneGeometry, tx: Vec3, fine_step: f64) -> SpatialSpectrum {
    assert!(fine_step > 0.0, "fine_step must be positive");
    let (az, el) = geometry.resolution();
    let mut out = SpatialSpectrum::zeros(az, el);
    let mut sigma = Vec::new();
    let mut signal = Vec::new();
    for m in 0..az {
        for n in 0..el {
            let dir = geometry.direction(m, n).expect("in-range cell");
            sigma.clear();
            signal.clear();
            for x in ray_points(geometry.bbox(), geometry.rx(), dir, fine_step) {
                let (s, e) = oracle_density_emission(scene, x, tx, -dir);
                sigma.push(s);
                signal.push(e);
            }
            let delta = vec![fine_step; sigma.len()];
            out.set(m, n, oracle_composite(&sigma, &signal, &delta).radiance);
        }
    }
    out
}

/// Largest admissible reference step for a model grid: a sixteenth of the
/// smallest voxel edge.
pub fn fine_step_for(dims: [usize; 3], bbox: &Aabb) -> f64 {
    let e = bbox.extent().to_array();
    (0..3).map(|a| e[a] / (dims[a] - 1) as f64).fold(f64::INFINITY, f64::min) / 16.0
}
