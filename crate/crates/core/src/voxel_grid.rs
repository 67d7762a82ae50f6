//! Dense voxel grids with trilinear interpolation.
//!
//! Nodes sit on cell corners: node `(0,0,0)` is at the box's min corner and
//! node `(Lx-1, Ly-1, Lz-1)` at its max corner. Values are stored node-major
//! with x varying fastest, then y, then z, and the channels of one node
//! contiguous.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::math::floor;

/// The eight nodes surrounding a point and their trilinear weights.
///
/// Corner `c` offsets the base node by `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    channels: usize,
    bbox: Aabb,
    values: Vec<f64>,
}

impl VoxelGrid {
    /// A grid with every value equal to `fill`.
    pub fn new(dims: [usize; 3], channels: usize, bbox: Aabb, fill: f64) -> Result<Self> {
        Self::check_shape(dims, channels)?;
        let len = dims[0] * dims[1] * dims[2] * channels;
        Ok(Self {
            dims,
            channels,
            bbox,
            values: vec![fill; len],
        })
    }

    pub fn from_values(
        dims: [usize; 3],
        channels: usize,
        bbox: Aabb,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::check_shape(dims, channels)?;
        let len = dims[0] * dims[1] * dims[2] * channels;
        if values.len() != len {
            return Err(Error::ShapeMismatch(alloc::format!(
                "grid {dims:?}x{channels} needs {len} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract!("grid values must be finite"));
        }
        Ok(Self {
            dims,
            channels,
            bbox,
            values,
        })
    }

    /// Samples `f` at every node position.
    pub fn from_fn(
        dims: [usize; 3],
        channels: usize,
        bbox: Aabb,
        mut f: impl FnMut(Vec3, &mut [f64]),
    ) -> Result<Self> {
        let mut grid = Self::new(dims, channels, bbox, 0.0)?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.node_position([i, j, k]);
                    let at = grid.node_index([i, j, k]) * channels;
                    f(p, &mut grid.values[at..at + channels]);
                }
            }
        }
        Ok(grid)
    }

    fn check_shape(dims: [usize; 3], channels: usize) -> Result<()> {
        if dims.iter().any(|&d| d < 2) {
            return Err(contract!(
                "grid needs at least two nodes per axis, got {dims:?}"
            ));
        }
        if channels == 0 {
            return Err(contract!("grid needs at least one channel"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn node_index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn node_values(&self, node: [usize; 3]) -> &[f64] {
        let at = self.node_index(node) * self.channels;
        &self.values[at..at + self.channels]
    }

    pub fn node_position(&self, [i, j, k]: [usize; 3]) -> Vec3 {
        let (min, e) = (self.bbox.min(), self.bbox.extent());
        let frac = |n: usize, d: usize| n as f64 / (d - 1) as f64;
        Vec3::new(
            min.x + e.x * frac(i, self.dims[0]),
            min.y + e.y * frac(j, self.dims[1]),
            min.z + e.z * frac(k, self.dims[2]),
        )
    }

    /// Distance between neighboring nodes along each axis.
    pub fn voxel_size(&self) -> Vec3 {
        let e = self.bbox.extent();
        Vec3::new(
            e.x / (self.dims[0] - 1) as f64,
            e.y / (self.dims[1] - 1) as f64,
            e.z / (self.dims[2] - 1) as f64,
        )
    }

    /// Finds the cell containing `p` and its corner weights.
    pub fn locate(&self, p: Vec3) -> Result<Cell> {
        if !self.bbox.contains(p) {
            return Err(Error::OutOfBounds {
                x: p.x,
                y: p.y,
                z: p.z,
            });
        }
        let (min, e) = (self.bbox.min(), self.bbox.extent());
        let u = [
            (p.x - min.x) / e.x * (self.dims[0] - 1) as f64,
            (p.y - min.y) / e.y * (self.dims[1] - 1) as f64,
            (p.z - min.z) / e.z * (self.dims[2] - 1) as f64,
        ];
        Ok(self.locate_index_space(u))
    }

    /// Like [`locate`](Self::locate) but with coordinates in node units,
    /// `u[a]` in `[0, dims[a] - 1]`.
    fn locate_index_space(&self, u: [f64; 3]) -> Cell {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let top = self.dims[a] - 2;
            let ua = u[a].clamp(0.0, (self.dims[a] - 1) as f64);
            let i = (floor(ua) as usize).min(top);
            base[a] = i;
            frac[a] = ua - i as f64;
        }
        let stride = [1, self.dims[0], self.dims[0] * self.dims[1]];
        let origin = self.node_index(base);
        let mut nodes = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for c in 0..8 {
            let mut node = origin;
            let mut w = 1.0;
            for a in 0..3 {
                if (c >> a) & 1 == 1 {
                    node += stride[a];
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            nodes[c] = node;
            weights[c] = w;
        }
        Cell { nodes, weights }
    }

    /// Trilinear blend of the 8 corner values into `out` (length = channels).
    pub fn interpolate_cell(&self, cell: &Cell, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        let c = self.channels;
        for (node, w) in cell.nodes.iter().zip(cell.weights) {
            let v = &self.values[node * c..node * c + c];
            for (o, vi) in out.iter_mut().zip(v) {
                *o += w * vi;
            }
        }
    }

    /// Single-channel fast path of [`interpolate_cell`](Self::interpolate_cell).
    #[inline]
    pub fn interpolate_scalar(&self, cell: &Cell) -> f64 {
        debug_assert_eq!(self.channels, 1);
        let mut s = 0.0;
        for (node, w) in cell.nodes.iter().zip(cell.weights) {
            s += w * self.values[*node];
        }
        s
    }

    pub fn interpolate(&self, p: Vec3) -> Result<Vec<f64>> {
        let cell = self.locate(p)?;
        let mut out = vec![0.0; self.channels];
        self.interpolate_cell(&cell, &mut out);
        Ok(out)
    }

    /// Adjoint of [`interpolate`](Self::interpolate): adds
    /// `weight * upstream` into the 8 corner slots of `grad`.
    pub fn interpolate_backward(&self, p: Vec3, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.values.len() || upstream.len() != self.channels {
            return Err(Error::ShapeMismatch(alloc::format!(
                "gradient buffer {} / upstream {} vs grid {} / {} channels",
                grad.len(),
                upstream.len(),
                self.values.len(),
                self.channels
            )));
        }
        let cell = self.locate(p)?;
        scatter(&cell, self.channels, upstream, grad);
        Ok(())
    }

    /// Resamples onto a finer lattice over the same box.
    ///
    /// Every new node takes the trilinear value of the old grid at its
    /// position, so nodes that coincide with old nodes keep their values.
    pub fn upsample(&self, new_dims: [usize; 3]) -> Result<VoxelGrid> {
        if (0..3).any(|a| new_dims[a] < self.dims[a]) {
            return Err(contract!(
                "upsample cannot shrink {:?} to {new_dims:?}",
                self.dims
            ));
        }
        if new_dims == self.dims {
            return Ok(self.clone());
        }
        let c = self.channels;
        let mut out = VoxelGrid::new(new_dims, c, self.bbox, 0.0)?;
        // Positions in old-node units; exact rationals whenever a new node
        // coincides with an old one.
        let coord = |n: usize, a: usize| {
            (n * (self.dims[a] - 1)) as f64 / (new_dims[a] - 1) as f64
        };
        for k in 0..new_dims[2] {
            for j in 0..new_dims[1] {
                for i in 0..new_dims[0] {
                    let cell = self.locate_index_space([coord(i, 0), coord(j, 1), coord(k, 2)]);
                    let at = out.node_index([i, j, k]) * c;
                    self.interpolate_cell(&cell, &mut out.values[at..at + c]);
                }
            }
        }
        Ok(out)
    }
}

/// Adds `weight * upstream` into the corner slots of a gradient buffer laid
/// out like a grid with `channels` channels.
#[inline]
pub fn scatter(cell: &Cell, channels: usize, upstream: &[f64], grad: &mut [f64]) {
    for (node, w) in cell.nodes.iter().zip(cell.weights) {
        let g = &mut grad[node * channels..node * channels + channels];
        for (gi, ui) in g.iter_mut().zip(upstream) {
            *gi += w * ui;
        }
    }
}
