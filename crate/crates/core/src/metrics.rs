//! Evaluation metrics: SSIM between spectra, percentile summaries and RSSI
//! error statistics.

use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::math::exp;
use crate::renderer::SpatialSpectrum;

/// Gaussian-window SSIM settings. Out-of-range window taps are mirrored
/// (symmetric padding), so any spectrum size is valid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                exp(-d * d / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Mirror an index into `0..n` with edge repetition (`... 1 0 | 0 1 ... n-1 | n-1 n-2 ...`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Mean SSIM over all cells.
pub fn ssim(a: &SpatialSpectrum, b: &SpatialSpectrum, cfg: &SsimConfig) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(contract!(
            "SSIM needs equal resolutions, got {:?} and {:?}",
            a.resolution(),
            b.resolution()
        ));
    }
    if cfg.window == 0 || cfg.window % 2 == 0 {
        return Err(contract!("SSIM window must be odd, got {}", cfg.window));
    }
    let (rows, cols) = a.resolution();
    let taps = cfg.taps();
    let r = (cfg.window / 2) as isize;
    let c1 = (cfg.k1 * cfg.data_range) * (cfg.k1 * cfg.data_range);
    let c2 = (cfg.k2 * cfg.data_range) * (cfg.k2 * cfg.data_range);
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, wi) in taps.iter().enumerate() {
                let ii = reflect(i as isize + di as isize - r, rows);
                for (dj, wj) in taps.iter().enumerate() {
                    let jj = reflect(j as isize + dj as isize - r, cols);
                    let w = wi * wj;
                    let x = a.get(ii, jj);
                    let y = b.get(ii, jj);
                    mx += w * x;
                    my += w * y;
                    sxx += w * (x * x);
                    syy += w * (y * y);
                    sxy += w * (x * y);
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (rows * cols) as f64)
}

/// Linear interpolation between closest ranks; `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PercentileSummary {
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
}

fn sorted_copy(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(contract!("percentiles of an empty list"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(contract!("percentiles of a list containing NaN"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn percentile_summary(values: &[f64]) -> Result<PercentileSummary> {
    let v = sorted_copy(values)?;
    Ok(PercentileSummary {
        p25: percentile(&v, 0.25),
        median: percentile(&v, 0.5),
        p75: percentile(&v, 0.75),
    })
}

/// Empirical CDF as sorted `(value, fraction of values <= value)` pairs,
/// one per distinct value.
pub fn cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    let v = sorted_copy(values)?;
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    Ok(out)
}

/// Absolute errors `|predicted - measured|` and their summary.
pub fn rssi_error(predicted: &[f64], measured: &[f64]) -> Result<(Vec<f64>, PercentileSummary)> {
    if predicted.len() != measured.len() {
        return Err(contract!(
            "RSSI error needs equal lengths, got {} and {}",
            predicted.len(),
            measured.len()
        ));
    }
    let errors: Vec<f64> = predicted
        .iter()
        .zip(measured)
        .map(|(p, m)| (p - m).abs())
        .collect();
    let summary = percentile_summary(&errors)?;
    Ok((errors, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn spectrum(m: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> SpatialSpectrum {
        let mut s = SpatialSpectrum::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                s.set(i, j, f(i, j));
            }
        }
        s
    }

    #[test]
    fn window_is_normalized() {
        let t = SsimConfig::default().taps();
        assert_eq!(t.len(), 11);
        let s: f64 = t.iter().flat_map(|a| t.iter().map(move |b| a * b)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect(-1, 9), 0);
        assert_eq!(reflect(-5, 9), 4);
        assert_eq!(reflect(9, 9), 8);
        assert_eq!(reflect(13, 9), 4);
        assert_eq!(reflect(-3, 2), 1);
    }

    #[test]
    fn identical_spectra_score_one() {
        let s = spectrum(36, 9, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&s, &s, &SsimConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn inverted_checkerboard_scores_low() {
        let a = spectrum(36, 9, |i, j| if (i / 3 + j / 3) % 2 == 0 { 0.95 } else { 0.05 });
        let b = spectrum(36, 9, |i, j| 1.0 - a.get(i, j));
        let v = ssim(&a, &b, &SsimConfig::default()).unwrap();
        assert!(v < 0.2, "{v}");
    }

    #[test]
    fn symmetric_and_bounded() {
        let a = spectrum(36, 9, |i, j| libm::sin(i as f64 * 0.4) * 0.3 + 0.4 + j as f64 * 0.01);
        let b = spectrum(36, 9, |i, j| libm::cos(j as f64 * 0.9 + i as f64 * 0.1) * 0.2 + 0.5);
        let cfg = SsimConfig::default();
        let ab = ssim(&a, &b, &cfg).unwrap();
        let ba = ssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn fixed_data_range_is_not_scale_invariant() {
        let a = spectrum(20, 9, |i, j| ((i + 2 * j) % 5) as f64 / 4.0);
        let b = spectrum(20, 9, |i, j| ((i + j) % 4) as f64 / 3.0);
        let half = |s: &SpatialSpectrum| {
            SpatialSpectrum::from_values(20, 9, s.values().iter().map(|v| v * 0.5).collect()).unwrap()
        };
        let cfg = SsimConfig::default();
        let full = ssim(&a, &b, &cfg).unwrap();
        let scaled = ssim(&half(&a), &half(&b), &cfg).unwrap();
        assert!((full - scaled).abs() > 1e-6);
    }

    #[test]
    fn mismatched_sizes_fail() {
        let a = SpatialSpectrum::zeros(4, 4);
        let b = SpatialSpectrum::zeros(4, 5);
        assert!(ssim(&a, &b, &SsimConfig::default()).is_err());
    }

    #[test]
    fn percentiles() {
        let s = percentile_summary(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.median, 3.0);
        let c = percentile_summary(&[7.5; 6]).unwrap();
        assert_eq!((c.p25, c.median, c.p75), (7.5, 7.5, 7.5));
        assert_eq!(percentile_summary(&[0.0, 10.0]).unwrap().p25, 2.5);
        assert!(percentile_summary(&[]).is_err());
    }

    #[test]
    fn cdf_table() {
        let t = cdf(&[3.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(t, vec![(1.0, 0.25), (2.0, 0.5), (3.0, 1.0)]);
    }

    #[test]
    fn rssi_errors() {
        let (e, _) = rssi_error(&[-50.0, -60.0], &[-50.0, -60.0]).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
        let (e, s) = rssi_error(&[-47.0, -57.0, -77.0], &[-50.0, -60.0, -80.0]).unwrap();
        assert!(e.iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!((s.median - 3.0).abs() < 1e-12);
        assert!(rssi_error(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn percentile_is_monotone(mut v in proptest::collection::vec(-1e3f64..1e3, 1..40), q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0) {
            v.sort_by(f64::total_cmp);
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(percentile(&v, lo) <= percentile(&v, hi));
        }
    }
}
