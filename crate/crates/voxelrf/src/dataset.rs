//! Dataset directories: a JSON manifest plus one spectrum file per record.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use voxelrf_core::trainer::{TrainingRecord, TrainingSet};
use voxelrf_core::{Aabb, SceneGeometry, SpatialSpectrum, Vec3};

use crate::error::{Error, Result};
use crate::scene::{oracle_render, SyntheticScene};
use crate::spectrum_io::{read_spectrum, write_spectrum};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPECTRUM_DIR: &str = "spectra";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BboxEntry {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub rx_position: [f64; 3],
    pub bbox: BboxEntry,
    pub spectrum_res: [usize; 2],
    /// Raw power that maps to 1.0 in the stored spectra.
    pub normalization: f64,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub tx_position: [f64; 3],
    /// Relative to the dataset directory.
    pub spectrum_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi_dbm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scene: SceneEntry,
    pub records: Vec<RecordEntry>,
}

impl Manifest {
    pub fn geometry(&self) -> Result<SceneGeometry> {
        let s = &self.scene;
        let bbox = Aabb::new(Vec3::from_array(s.bbox.min), Vec3::from_array(s.bbox.max))?;
        let [m, n] = s.spectrum_res;
        Ok(SceneGeometry::new(Vec3::from_array(s.rx_position), bbox, m, n)?)
    }
}

/// Parameters of [`synthesize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_tx: usize,
    pub seed: u64,
    pub azimuths: usize,
    pub elevations: usize,
    /// Reference renderer step; see [`crate::scene::fine_step_for`].
    pub fine_step: f64,
    /// Constant added to `10 log10(raw power)` to form the RSSI.
    pub rssi_offset_db: f64,
    /// Standard deviation of the Gaussian RSSI measurement noise.
    pub rssi_noise_db: f64,
}

/// One synthesized record, held in memory exactly as it is stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub tx: Vec3,
    /// Normalized spectrum, rounded to `f32` precision.
    pub spectrum: SpatialSpectrum,
    /// Sum of the unnormalized spectrum.
    pub raw_power: f64,
    pub rssi_dbm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub geometry: SceneGeometry,
    pub normalization: f64,
    pub records: Vec<SynthRecord>,
}

impl SynthDataset {
    pub fn training_set(&self) -> TrainingSet {
        TrainingSet::new(
            self.geometry,
            self.records
                .iter()
                .map(|r| TrainingRecord {
                    tx: r.tx,
                    spectrum: r.spectrum.clone(),
                })
                .collect(),
        )
        .expect("records share the scene resolution")
    }
}

/// Draws `n_tx` transmitters uniformly in the scene box, renders each with
/// the reference renderer and normalizes every spectrum by the global
/// maximum cell. A pure function of `(scene, options)`.
pub fn synthesize(scene: &SyntheticScene, opts: &SynthOptions) -> Result<SynthDataset> {
    if opts.n_tx == 0 {
        return Err(Error::Config("n_tx must be at least 1".into()));
    }
    if !(opts.fine_step > 0.0) || !(opts.rssi_noise_db >= 0.0) {
        return Err(Error::Config("fine_step must be > 0 and rssi_noise_db >= 0".into()));
    }
    let geometry = scene.geometry(opts.azimuths, opts.elevations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (lo, hi) = (scene.bbox().min(), scene.bbox().max());
    let txs: Vec<Vec3> = (0..opts.n_tx)
        .map(|_| {
            Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            )
        })
        .collect();
    let raw: Vec<SpatialSpectrum> = txs
        .iter()
        .map(|&tx| oracle_render(scene, &geometry, tx, opts.fine_step))
        .collect();

    let peak = raw.iter().map(SpatialSpectrum::max).fold(0.0, f64::max);
    let normalization = if peak > 0.0 { peak } else { 1.0 };
    let noise = Normal::new(0.0, opts.rssi_noise_db).expect("checked above");
    let records = txs
        .into_iter()
        .zip(raw)
        .map(|(tx, s)| {
            let raw_power = s.sum();
            let draw = noise.sample(&mut rng);
            let rssi_dbm = (raw_power > 0.0).then(|| 10.0 * raw_power.log10() + opts.rssi_offset_db + draw);
            let (m, n) = s.resolution();
            let values = s.values().iter().map(|v| (v / normalization) as f32 as f64).collect();
            SynthRecord {
                tx,
                spectrum: SpatialSpectrum::from_values(m, n, values).expect("same shape"),
                raw_power,
                rssi_dbm,
            }
        })
        .collect();
    Ok(SynthDataset {
        geometry,
        normalization,
        records,
    })
}

/// Writes `data` under `out_dir` and returns its manifest.
pub fn write_dataset(data: &SynthDataset, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let spectra = out_dir.join(SPECTRUM_DIR);
    fs::create_dir_all(&spectra).map_err(|e| Error::io(&spectra, e))?;
    let g = &data.geometry;
    let (m, n) = g.resolution();
    let mut records = Vec::with_capacity(data.records.len());
    for (i, r) in data.records.iter().enumerate() {
        let rel = format!("{SPECTRUM_DIR}/{i:05}.vxrf");
        write_spectrum(out_dir.join(&rel), &r.spectrum)?;
        records.push(RecordEntry {
            tx_position: r.tx.to_array(),
            spectrum_path: rel,
            rssi_dbm: r.rssi_dbm,
        });
    }
    let manifest = Manifest {
        scene: SceneEntry {
            rx_position: g.rx().to_array(),
            bbox: BboxEntry {
                min: g.bbox().min().to_array(),
                max: g.bbox().max().to_array(),
            },
            spectrum_res: [m, n],
            normalization: data.normalization,
            units: "linear".into(),
        },
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// [`synthesize`] followed by [`write_dataset`].
pub fn generate_dataset(
    scene: &SyntheticScene,
    opts: &SynthOptions,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    write_dataset(&synthesize(scene, opts)?, out_dir)
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub data: TrainingSet,
    pub rssi_dbm: Vec<Option<f64>>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&path, json_offset(&text, e.line(), e.column()), e.to_string()))?;
        let norm = manifest.scene.normalization;
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::format(&path, 0, format!("normalization must be > 0, got {norm}")));
        }
        let geometry = manifest.geometry().map_err(|e| Error::format(&path, 0, e.to_string()))?;
        let res = geometry.resolution();
        let mut records = Vec::with_capacity(manifest.records.len());
        for (i, r) in manifest.records.iter().enumerate() {
            let spectrum = read_spectrum(dir.join(&r.spectrum_path))?;
            if spectrum.resolution() != res {
                return Err(Error::format(
                    dir.join(&r.spectrum_path),
                    8,
                    format!("record {i} is {:?}, manifest declares {res:?}", spectrum.resolution()),
                ));
            }
            records.push(TrainingRecord {
                tx: Vec3::from_array(r.tx_position),
                spectrum,
            });
        }
        let rssi_dbm = manifest.records.iter().map(|r| r.rssi_dbm).collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            data: TrainingSet::new(geometry, records)?,
            manifest,
            rssi_dbm,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Byte offset of a 1-based line/column position.
fn json_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

/// Fraction of records held out by [`split_indices`].
pub const TEST_FRACTION: f64 = 0.2;

/// Seeded shuffle of `0..n` into (train, test) index lists, each sorted.
/// The test share is `round(0.2 n)`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::fine_step_for;

    fn options(n_tx: usize, seed: u64) -> SynthOptions {
        let scene = SyntheticScene::demo(0.5);
        SynthOptions {
            n_tx,
            seed,
            azimuths: 12,
            elevations: 3,
            fine_step: 4.0 * fine_step_for([32; 3], scene.bbox()),
            rssi_offset_db: -50.0,
            rssi_noise_db: 1.0,
        }
    }

    fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generated_directory_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let scene = SyntheticScene::demo(0.5);
        let synth = synthesize(&scene, &options(6, 3)).unwrap();
        let manifest = write_dataset(&synth, tmp.path()).unwrap();
        assert_eq!(manifest.records.len(), 6);
        assert_eq!(manifest.scene.units, "linear");

        let loaded = Dataset::load(tmp.path()).unwrap();
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.data, synth.training_set());
        let peak = loaded.data.records.iter().map(|r| r.spectrum.max()).fold(0.0, f64::max);
        assert_eq!(peak, 1.0);
        assert!(loaded.rssi_dbm.iter().all(Option::is_some));
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let scene = SyntheticScene::demo(0.5);
        generate_dataset(&scene, &options(4, 9), a.path()).unwrap();
        generate_dataset(&scene, &options(4, 9), b.path()).unwrap();
        generate_dataset(&scene, &options(4, 10), c.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
    }

    #[test]
    fn rssi_tracks_raw_power() {
        let scene = SyntheticScene::demo(0.5);
        let mut opts = options(5, 1);
        opts.rssi_noise_db = 0.0;
        let synth = synthesize(&scene, &opts).unwrap();
        for r in &synth.records {
            let expected = 10.0 * r.raw_power.log10() - 50.0;
            assert!((r.rssi_dbm.unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn load_reports_bad_manifests() {
        let tmp = tempfile::tempdir().unwrap();
        let scene = SyntheticScene::demo(0.5);
        generate_dataset(&scene, &options(2, 1), tmp.path()).unwrap();
        let path = tmp.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replace("\"units\"", "\"unit\"")).unwrap();
        assert!(matches!(Dataset::load(tmp.path()), Err(Error::Format { .. })));

        fs::write(&path, &text).unwrap();
        fs::remove_file(tmp.path().join("spectra/00001.vxrf")).unwrap();
        assert!(matches!(Dataset::load(tmp.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn split_is_seeded_and_covers_everything() {
        let (train, test) = split_indices(160, 4);
        assert_eq!((train.len(), test.len()), (128, 32));
        assert_eq!(split_indices(160, 4), (train.clone(), test.clone()));
        assert_ne!(split_indices(160, 5).1, test);
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        assert_eq!(all, (0..160).collect::<Vec<_>>());
    }

    #[test]
    fn json_offsets_count_bytes() {
        assert_eq!(json_offset("ab\ncd\n", 2, 2), 4);
        assert_eq!(json_offset("x", 1, 1), 0);
    }
}
