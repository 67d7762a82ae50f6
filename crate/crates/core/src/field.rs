//! The learnable radiance field.
//!
//! Density comes straight from the density grid through a softplus. The
//! emitted signal is
//!
//! ```text
//! feat  = interp(feature_grid, x) + deform(enc(tx) ++ enc(x))
//! S     = sigmoid(radiance(feat ++ enc(dir)))
//! ```
//!
//! where `dir` is the emission direction (from the sample toward the
//! receiver) and positions are mapped to `[-1, 1]^3` through the model's
//! bounding box before encoding.
//!
//! Along one ray `tx` and `dir` are fixed, so the parts of the first layer of
//! each network that only see `enc(tx)` or `enc(dir)` are evaluated once per
//! ray ([`RayContext`]) and their gradients are summed over the ray before
//! the outer product is taken.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::math::{axpy, cos, dot, sigmoid, sin, softplus};
use crate::mlp::{Activation, DenseGrad, Mlp};
use crate::voxel_grid::{scatter, Cell, VoxelGrid};

/// Frequency encoding `p -> (sin(2^l pi p), cos(2^l pi p))` for `l < levels`,
/// applied per input component. Raw inputs are not passed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    levels: usize,
}

impl PositionalEncoding {
    pub fn new(levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(contract!("positional encoding needs at least one level"));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Output width for `inputs` components.
    pub fn width(&self, inputs: usize) -> usize {
        2 * self.levels * inputs
    }

    pub fn encode_into(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width(input.len()));
        let mut o = 0;
        for &p in input {
            let mut freq = core::f64::consts::PI;
            for _ in 0..self.levels {
                out[o] = sin(freq * p);
                out[o + 1] = cos(freq * p);
                o += 2;
                freq *= 2.0;
            }
        }
    }

    pub fn encode(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.width(input.len())];
        self.encode_into(input, &mut out);
        out
    }
}

/// Shape and initialization of a [`FieldModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dims: [usize; 3],
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub density_bias: f64,
    /// When false the deformation network is bypassed (its output is 0).
    pub deformation: bool,
}

impl ModelConfig {
    /// Small model that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            dims: [32, 32, 32],
            feature_dim: 8,
            hidden_width: 64,
            pos_levels: 5,
            dir_levels: 4,
            density_bias: -3.0,
            deformation: true,
        }
    }

    /// 160^3 grids, 24 features, 256-wide networks.
    pub fn paper() -> Self {
        Self {
            dims: [160, 160, 160],
            feature_dim: 24,
            hidden_width: 256,
            ..Self::desk()
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Which learning-rate group a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Grid,
    Mlp,
}

/// A named mutable view of one parameter tensor.
pub struct ParamTensor<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub values: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    bbox: Aabb,
    pub density: VoxelGrid,
    pub features: VoxelGrid,
    pub deform: Mlp,
    pub radiance: Mlp,
    pos_encoding: PositionalEncoding,
    dir_encoding: PositionalEncoding,
    density_bias: f64,
    deformation: bool,
}

impl FieldModel {
    /// Fresh model: zero grids, Glorot-initialized networks drawn from a
    /// generator seeded with `seed` (deformation network first).
    pub fn new(config: &ModelConfig, bbox: Aabb, seed: u64) -> Result<Self> {
        if config.feature_dim == 0 || config.hidden_width == 0 {
            return Err(contract!("feature_dim and hidden_width must be positive"));
        }
        if !config.density_bias.is_finite() {
            return Err(contract!("density_bias must be finite"));
        }
        let pos_encoding = PositionalEncoding::new(config.pos_levels)?;
        let dir_encoding = PositionalEncoding::new(config.dir_levels)?;
        let f = config.feature_dim;
        let h = config.hidden_width;
        let mut deform = Mlp::new(
            &[2 * pos_encoding.width(3), h, f],
            Activation::Relu,
            Activation::Identity,
        )?;
        let mut radiance = Mlp::new(
            &[f + dir_encoding.width(3), h, 1],
            Activation::Relu,
            Activation::Sigmoid,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        deform.init_glorot(&mut rng);
        radiance.init_glorot(&mut rng);
        Ok(Self {
            bbox,
            density: VoxelGrid::new(config.dims, 1, bbox, 0.0)?,
            features: VoxelGrid::new(config.dims, f, bbox, 0.0)?,
            deform,
            radiance,
            pos_encoding,
            dir_encoding,
            density_bias: config.density_bias,
            deformation: config.deformation,
        })
    }

    /// Reassembles a model from its parts, validating every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        density: VoxelGrid,
        features: VoxelGrid,
        deform: Mlp,
        radiance: Mlp,
        pos_encoding: PositionalEncoding,
        dir_encoding: PositionalEncoding,
        density_bias: f64,
        deformation: bool,
    ) -> Result<Self> {
        let mismatch = |m: String| Err(Error::ShapeMismatch(m));
        let bbox = *density.bbox();
        if density.channels() != 1 {
            return mismatch(alloc::format!("density grid has {} channels", density.channels()));
        }
        if features.dims() != density.dims() || features.bbox() != density.bbox() {
            return mismatch("density and feature grids disagree on lattice".into());
        }
        let f = features.channels();
        if deform.layers().len() != 2 || radiance.layers().len() != 2 {
            return mismatch("both networks must have exactly two layers".into());
        }
        if deform.in_dim() != 2 * pos_encoding.width(3) || deform.out_dim() != f {
            return mismatch(alloc::format!(
                "deformation network is {}->{}, expected {}->{f}",
                deform.in_dim(),
                deform.out_dim(),
                2 * pos_encoding.width(3)
            ));
        }
        if radiance.in_dim() != f + dir_encoding.width(3) || radiance.out_dim() != 1 {
            return mismatch(alloc::format!(
                "radiance network is {}->{}, expected {}->1",
                radiance.in_dim(),
                radiance.out_dim(),
                f + dir_encoding.width(3)
            ));
        }
        if deform.layers()[0].out_dim() != radiance.layers()[0].out_dim() {
            return mismatch("networks must share the hidden width".into());
        }
        Ok(Self {
            bbox,
            density,
            features,
            deform,
            radiance,
            pos_encoding,
            dir_encoding,
            density_bias,
            deformation,
        })
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn dims(&self) -> [usize; 3] {
        self.density.dims()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.channels()
    }

    pub fn hidden_width(&self) -> usize {
        self.radiance.layers()[0].out_dim()
    }

    pub fn pos_encoding(&self) -> PositionalEncoding {
        self.pos_encoding
    }

    pub fn dir_encoding(&self) -> PositionalEncoding {
        self.dir_encoding
    }

    pub fn density_bias(&self) -> f64 {
        self.density_bias
    }

    pub fn deformation_enabled(&self) -> bool {
        self.deformation
    }

    pub fn set_deformation(&mut self, enabled: bool) {
        self.deformation = enabled;
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            dims: self.dims(),
            feature_dim: self.feature_dim(),
            hidden_width: self.hidden_width(),
            pos_levels: self.pos_encoding.levels(),
            dir_levels: self.dir_encoding.levels(),
            density_bias: self.density_bias,
            deformation: self.deformation,
        }
    }

    /// Upsamples both grids to `dims`.
    pub fn upsample_grids(&mut self, dims: [usize; 3]) -> Result<()> {
        self.density = self.density.upsample(dims)?;
        self.features = self.features.upsample(dims)?;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mlp = |m: &Mlp| {
            m.layers()
                .iter()
                .map(|l| l.weight.len() + l.bias.len())
                .sum::<usize>()
        };
        self.density.values().len()
            + self.features.values().len()
            + mlp(&self.deform)
            + mlp(&self.radiance)
    }

    /// Every parameter tensor, in a fixed order shared with
    /// [`GradientSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ParamTensor<'_>> {
        let mut out = vec![
            ParamTensor {
                name: "density_grid".into(),
                group: ParamGroup::Grid,
                values: self.density.values_mut(),
            },
            ParamTensor {
                name: "feature_grid".into(),
                group: ParamGroup::Grid,
                values: self.features.values_mut(),
            },
        ];
        for (net, mlp) in [("deform", &mut self.deform), ("radiance", &mut self.radiance)] {
            for (i, layer) in mlp.layers_mut().iter_mut().enumerate() {
                out.push(ParamTensor {
                    name: alloc::format!("{net}.{i}.weight"),
                    group: ParamGroup::Mlp,
                    values: &mut layer.weight,
                });
                out.push(ParamTensor {
                    name: alloc::format!("{net}.{i}.bias"),
                    group: ParamGroup::Mlp,
                    values: &mut layer.bias,
                });
            }
        }
        out
    }

    pub fn zero_grad(&self) -> GradientSet {
        GradientSet {
            density: vec![0.0; self.density.values().len()],
            features: vec![0.0; self.features.values().len()],
            deform: self.deform.zero_grad(),
            radiance: self.radiance.zero_grad(),
        }
    }

    /// Softplus density from a located cell: `(shifted raw value, sigma)`.
    #[inline]
    pub fn density_at(&self, cell: &Cell) -> (f64, f64) {
        let raw = self.density.interpolate_scalar(cell) + self.density_bias;
        (raw, softplus(raw))
    }

    pub fn query_density(&self, x: Vec3) -> Result<f64> {
        let cell = self.density.locate(x)?;
        Ok(self.density_at(&cell).1)
    }

    pub fn query_signal(&self, x: Vec3, tx: Vec3, dir: Vec3) -> Result<f64> {
        check_unit(dir)?;
        let cell = self.features.locate(x)?;
        let ctx = self.ray_context(tx, dir);
        let mut tape = SignalTape::default();
        Ok(self.signal_at(&ctx, &cell, x, &mut tape))
    }

    /// Accumulates the gradients of `d_sigma * sigma(x) + d_signal * S(x, tx, dir)`
    /// with respect to every parameter into `grads`.
    pub fn model_backward(
        &self,
        x: Vec3,
        tx: Vec3,
        dir: Vec3,
        d_sigma: f64,
        d_signal: f64,
        grads: &mut GradientSet,
    ) -> Result<()> {
        check_unit(dir)?;
        self.check_grads(grads)?;
        let cell = self.density.locate(x)?;
        let (raw, _) = self.density_at(&cell);
        self.density_backward(&cell, raw, d_sigma, grads);
        let mut ctx = self.ray_context(tx, dir);
        let mut tape = SignalTape::default();
        self.signal_at(&ctx, &cell, x, &mut tape);
        self.signal_backward(&mut ctx, &tape, 0, d_signal, grads);
        self.finish_ray(&ctx, grads);
        Ok(())
    }

    pub(crate) fn check_grads(&self, grads: &GradientSet) -> Result<()> {
        let congruent = grads.density.len() == self.density.values().len()
            && grads.features.len() == self.features.values().len()
            && mlp_congruent(&self.deform, &grads.deform)
            && mlp_congruent(&self.radiance, &grads.radiance);
        if congruent {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                "gradient set does not match the model".into(),
            ))
        }
    }

    /// Precomputes the transmitter- and direction-only terms for one ray.
    pub fn ray_context(&self, tx: Vec3, dir: Vec3) -> RayContext {
        let tx_unit = self.bbox.to_unit_cube(tx);
        let enc_tx = self.pos_encoding.encode(&tx_unit.to_array());
        let enc_dir = self.dir_encoding.encode(&dir.to_array());
        let h = self.hidden_width();
        let f = self.feature_dim();
        let deform_l0 = &self.deform.layers()[0];
        let et = enc_tx.len();
        let deform_base = (0..h)
            .map(|o| deform_l0.bias[o] + dot(&deform_l0.row(o)[..et], &enc_tx))
            .collect();
        let radiance_l0 = &self.radiance.layers()[0];
        let radiance_base = (0..h)
            .map(|o| radiance_l0.bias[o] + dot(&radiance_l0.row(o)[f..], &enc_dir))
            .collect();
        RayContext {
            enc_tx,
            enc_dir,
            deform_base,
            radiance_base,
            deform_sum: vec![0.0; h],
            radiance_sum: vec![0.0; h],
            d_feat: vec![0.0; f],
            d_hidden: vec![0.0; h],
        }
    }

    /// Evaluates the signal at a sample and records the activations needed
    /// by [`signal_backward`](Self::signal_backward).
    pub(crate) fn signal_at(
        &self,
        ctx: &RayContext,
        cell: &Cell,
        x: Vec3,
        tape: &mut SignalTape,
    ) -> f64 {
        let f = self.feature_dim();
        let h = self.hidden_width();
        let ex = self.pos_encoding.width(3);

        let enc_at = tape.enc_x.len();
        tape.enc_x.resize(enc_at + ex, 0.0);
        let x_unit = self.bbox.to_unit_cube(x);
        self.pos_encoding
            .encode_into(&x_unit.to_array(), &mut tape.enc_x[enc_at..]);

        let feat_at = tape.feat.len();
        tape.feat.resize(feat_at + f, 0.0);
        self.features
            .interpolate_cell(cell, &mut tape.feat[feat_at..]);

        let dh_at = tape.deform_hidden.len();
        tape.deform_hidden.resize(dh_at + h, 0.0);
        if self.deformation {
            let l0 = &self.deform.layers()[0];
            let et = ctx.enc_tx.len();
            let enc_x = &tape.enc_x[enc_at..];
            for (o, hd) in tape.deform_hidden[dh_at..].iter_mut().enumerate() {
                *hd = (ctx.deform_base[o] + dot(&l0.row(o)[et..], enc_x)).max(0.0);
            }
            let l1 = &self.deform.layers()[1];
            let hidden = &tape.deform_hidden[dh_at..];
            for (k, v) in tape.feat[feat_at..].iter_mut().enumerate() {
                *v += l1.bias[k] + dot(l1.row(k), hidden);
            }
        }

        let rh_at = tape.radiance_hidden.len();
        tape.radiance_hidden.resize(rh_at + h, 0.0);
        let l0 = &self.radiance.layers()[0];
        let feat = &tape.feat[feat_at..];
        for (o, hr) in tape.radiance_hidden[rh_at..].iter_mut().enumerate() {
            *hr = (ctx.radiance_base[o] + dot(&l0.row(o)[..f], feat)).max(0.0);
        }
        let l1 = &self.radiance.layers()[1];
        let logit = l1.bias[0] + dot(l1.row(0), &tape.radiance_hidden[rh_at..]);
        let s = sigmoid(logit);
        tape.cells.push(*cell);
        tape.signal.push(s);
        s
    }

    #[inline]
    pub(crate) fn density_backward(&self, cell: &Cell, raw: f64, d_sigma: f64, grads: &mut GradientSet) {
        if d_sigma != 0.0 {
            scatter(cell, 1, &[d_sigma * sigmoid(raw)], &mut grads.density);
        }
    }

    /// Backpropagates `d_signal` for tape entry `s`. Ray-constant first-layer
    /// terms are summed into `ctx` and flushed by
    /// [`finish_ray`](Self::finish_ray).
    pub(crate) fn signal_backward(
        &self,
        ctx: &mut RayContext,
        tape: &SignalTape,
        s: usize,
        d_signal: f64,
        grads: &mut GradientSet,
    ) {
        if d_signal == 0.0 {
            return;
        }
        let f = self.feature_dim();
        let h = self.hidden_width();
        let ex = self.pos_encoding.width(3);
        let signal = tape.signal[s];
        let d_logit = d_signal * signal * (1.0 - signal);

        let r_hidden = &tape.radiance_hidden[s * h..(s + 1) * h];
        let feat = &tape.feat[s * f..(s + 1) * f];
        let r1 = &self.radiance.layers()[1];
        grads.radiance[1].accumulate(&[d_logit], r_hidden);

        let r0 = &self.radiance.layers()[0];
        let r0_in = r0.in_dim();
        ctx.d_feat.fill(0.0);
        for o in 0..h {
            if r_hidden[o] <= 0.0 {
                continue;
            }
            let dh = d_logit * r1.weight[o];
            ctx.radiance_sum[o] += dh;
            let row = &mut grads.radiance[0].weight[o * r0_in..o * r0_in + f];
            axpy(dh, feat, row);
            axpy(dh, &r0.row(o)[..f], &mut ctx.d_feat);
        }

        scatter(&tape.cells[s], f, &ctx.d_feat, &mut grads.features);

        if !self.deformation {
            return;
        }
        let d_hidden_vals = &tape.deform_hidden[s * h..(s + 1) * h];
        let d1 = &self.deform.layers()[1];
        grads.deform[1].accumulate(&ctx.d_feat, d_hidden_vals);
        ctx.d_hidden.fill(0.0);
        for (k, &g) in ctx.d_feat.iter().enumerate() {
            axpy(g, d1.row(k), &mut ctx.d_hidden);
        }
        let enc_x = &tape.enc_x[s * ex..(s + 1) * ex];
        let d0_in = self.deform.in_dim();
        let et = ctx.enc_tx.len();
        for o in 0..h {
            if d_hidden_vals[o] <= 0.0 {
                continue;
            }
            let dh = ctx.d_hidden[o];
            ctx.deform_sum[o] += dh;
            let row = &mut grads.deform[0].weight[o * d0_in + et..(o + 1) * d0_in];
            axpy(dh, enc_x, row);
        }
    }

    /// Flushes the ray-constant first-layer gradients held in `ctx`.
    pub(crate) fn finish_ray(&self, ctx: &RayContext, grads: &mut GradientSet) {
        let f = self.feature_dim();
        let r_in = self.radiance.in_dim();
        for (o, &g) in ctx.radiance_sum.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &ctx.enc_dir, &mut grads.radiance[0].weight[o * r_in + f..(o + 1) * r_in]);
                grads.radiance[0].bias[o] += g;
            }
        }
        if self.deformation {
            let d_in = self.deform.in_dim();
            let et = ctx.enc_tx.len();
            for (o, &g) in ctx.deform_sum.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &ctx.enc_tx, &mut grads.deform[0].weight[o * d_in..o * d_in + et]);
                    grads.deform[0].bias[o] += g;
                }
            }
        }
    }
}

fn check_unit(dir: Vec3) -> Result<()> {
    let n = dir.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(contract!("direction must be unit length, |dir| = {n}"));
    }
    Ok(())
}

fn mlp_congruent(m: &Mlp, g: &[DenseGrad]) -> bool {
    m.layers().len() == g.len()
        && m
            .layers()
            .iter()
            .zip(g)
            .all(|(l, g)| l.weight.len() == g.weight.len() && l.bias.len() == g.bias.len())
}

/// Per-ray constants and first-layer gradient sums.
#[derive(Debug, Clone)]
pub struct RayContext {
    enc_tx: Vec<f64>,
    enc_dir: Vec<f64>,
    deform_base: Vec<f64>,
    radiance_base: Vec<f64>,
    deform_sum: Vec<f64>,
    radiance_sum: Vec<f64>,
    d_feat: Vec<f64>,
    d_hidden: Vec<f64>,
}

/// Activations of the signal path for the samples of one ray, stored flat.
#[derive(Debug, Clone, Default)]
pub struct SignalTape {
    enc_x: Vec<f64>,
    feat: Vec<f64>,
    deform_hidden: Vec<f64>,
    radiance_hidden: Vec<f64>,
    signal: Vec<f64>,
    cells: Vec<Cell>,
}

impl SignalTape {
    pub fn clear(&mut self) {
        self.enc_x.clear();
        self.feat.clear();
        self.deform_hidden.clear();
        self.radiance_hidden.clear();
        self.signal.clear();
        self.cells.clear();
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    #[inline]
    pub fn signal_value(&self, i: usize) -> f64 {
        self.signal[i]
    }
}

/// Gradient buffers congruent with a [`FieldModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub density: Vec<f64>,
    pub features: Vec<f64>,
    pub deform: Vec<DenseGrad>,
    pub radiance: Vec<DenseGrad>,
}

impl GradientSet {
    pub fn zero(&mut self) {
        self.density.fill(0.0);
        self.features.fill(0.0);
        for g in self.deform.iter_mut().chain(self.radiance.iter_mut()) {
            g.weight.fill(0.0);
            g.bias.fill(0.0);
        }
    }

    /// Tensors in the order of [`FieldModel::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.density, &self.features];
        for g in self.deform.iter().chain(&self.radiance) {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.density, &mut self.features];
        for g in self.deform.iter_mut().chain(self.radiance.iter_mut()) {
            out.push(&mut g.weight);
            out.push(&mut g.bias);
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}
