//! Model checkpoints.
//!
//! Layout, little-endian: magic `VXCK`, version `u32`, metadata length `u32`,
//! metadata as UTF-8 JSON, tensor count `u32`, then per tensor: name length
//! `u32`, UTF-8 name, rank `u32`, `rank` dims as `u32`, and the values as
//! `f64`. Grids are stored with dims `[nx, ny, nz, channels]`, x fastest;
//! dense weights as `[out, in]`, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxelrf_core::{Aabb, FieldModel, ModelConfig, Vec3};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VXCK";
pub const VERSION: u32 = 1;

/// Shape-defining hyperparameters of a stored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub dims: [usize; 3],
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub deformation: bool,
}

impl ModelShape {
    pub fn of(model: &FieldModel) -> Self {
        let c = model.config();
        Self {
            dims: c.dims,
            feature_dim: c.feature_dim,
            hidden_width: c.hidden_width,
            pos_levels: c.pos_levels,
            dir_levels: c.dir_levels,
            deformation: c.deformation,
        }
    }
}

/// Metadata block. Everything after `iteration` is optional context the CLI
/// needs to render and evaluate without the training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelShape,
    pub seed: u64,
    pub iteration: usize,
    #[serde(default)]
    pub rx_position: Option<[f64; 3]>,
    #[serde(default)]
    pub spectrum_res: Option<[usize; 2]>,
    /// Sample spacing used in training.
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub skip_threshold: Option<f64>,
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub rssi_calibration_db: Option<f64>,
    /// Echo of the run configuration.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn for_model(model: &FieldModel, seed: u64, iteration: usize) -> Self {
        Self {
            format_version: VERSION,
            model: ModelShape::of(model),
            seed,
            iteration,
            rx_position: None,
            spectrum_res: None,
            step: None,
            skip_threshold: None,
            split_seed: None,
            rssi_calibration_db: None,
            config: None,
        }
    }
}

/// Tensor names and dims, in storage order, for a model of this shape.
fn expected_tensors(shape: &ModelShape) -> Vec<(String, Vec<usize>)> {
    let [nx, ny, nz] = shape.dims;
    let (f, h) = (shape.feature_dim, shape.hidden_width);
    let deform_in = 2 * 2 * shape.pos_levels * 3;
    let radiance_in = f + 2 * shape.dir_levels * 3;
    let mut out = vec![
        ("bbox".to_string(), vec![2, 3]),
        ("density_bias".to_string(), vec![1]),
        ("density_grid".to_string(), vec![nx, ny, nz, 1]),
        ("feature_grid".to_string(), vec![nx, ny, nz, f]),
    ];
    for (net, widths) in [("deform", [deform_in, h, f]), ("radiance", [radiance_in, h, 1])] {
        for l in 0..2 {
            out.push((format!("{net}.{l}.weight"), vec![widths[l + 1], widths[l]]));
            out.push((format!("{net}.{l}.bias"), vec![widths[l + 1]]));
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
}

pub fn encode_checkpoint(model: &FieldModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.model != ModelShape::of(model) {
        return Err(Error::Config("checkpoint metadata does not describe the model".into()));
    }
    let mut model = model.clone();
    let bbox = *model.bbox();
    let mut payloads: Vec<Vec<f64>> = vec![
        [bbox.min().to_array(), bbox.max().to_array()].concat(),
        vec![model.density_bias()],
    ];
    payloads.extend(model.tensors_mut().into_iter().map(|t| t.values.to_vec()));

    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    let tensors = expected_tensors(&meta.model);
    put_u32(&mut out, tensors.len());
    for ((name, dims), values) in tensors.iter().zip(&payloads) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len(), "{name}");
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dims.len());
        for &d in dims {
            put_u32(&mut out, d);
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::format(self.path, at as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(self.bytes.len(), format!("file ends inside {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(FieldModel, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "the magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"VXCK\""));
    }
    let version = r.u32("the version")?;
    if version != VERSION as usize {
        return Err(r.fail(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let meta_len = r.u32("the metadata length")?;
    let meta_at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "the metadata")?)
        .map_err(|e| r.fail(meta_at, format!("metadata: {e}")))?;
    if meta.format_version != VERSION {
        return Err(r.fail(meta_at, format!("metadata declares version {}", meta.format_version)));
    }

    let expected = expected_tensors(&meta.model);
    let count_at = r.pos;
    let count = r.u32("the tensor count")?;
    if count != expected.len() {
        return Err(r.fail(count_at, format!("{count} tensors, expected {}", expected.len())));
    }
    let mut payloads = Vec::with_capacity(count);
    for (name, dims) in &expected {
        let at = r.pos;
        let name_len = r.u32("a tensor name length")?;
        let found = r.take(name_len, "a tensor name")?;
        if found != name.as_bytes() {
            return Err(r.fail(at, format!("expected tensor `{name}`, found `{}`", String::from_utf8_lossy(found))));
        }
        let rank_at = r.pos;
        let rank = r.u32("a tensor rank")?;
        if rank > 8 {
            return Err(r.fail(rank_at, format!("tensor `{name}` has implausible rank {rank}")));
        }
        let found_dims = (0..rank).map(|_| r.u32("tensor dims")).collect::<Result<Vec<_>>>()?;
        if &found_dims != dims {
            return Err(Error::ShapeMismatch {
                path: path.to_path_buf(),
                tensor: name.clone(),
                expected: dims.clone(),
                found: found_dims,
            });
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8, "a tensor payload")?;
        payloads.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>(),
        );
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let corrupt = |e: voxelrf_core::Error| Error::format(path, 0, e.to_string());
    let b = &payloads[0];
    let bbox = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5])).map_err(corrupt)?;
    let s = &meta.model;
    let config = ModelConfig {
        dims: s.dims,
        feature_dim: s.feature_dim,
        hidden_width: s.hidden_width,
        pos_levels: s.pos_levels,
        dir_levels: s.dir_levels,
        density_bias: payloads[1][0],
        deformation: s.deformation,
    };
    let mut model = FieldModel::new(&config, bbox, 0).map_err(corrupt)?;
    for (t, values) in model.tensors_mut().into_iter().zip(&payloads[2..]) {
        t.values.copy_from_slice(values);
    }
    Ok((model, meta))
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never observe a partial checkpoint.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &FieldModel, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, meta)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FieldModel, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
