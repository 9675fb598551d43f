//! Voxel grids, ego poses and the grid-level operations shared by every
//! other module.
//!
//! Layout is row-major over `(x, y, z)`: the voxel `(i, j, k)` lives at
//! `(i * w + j) * d + k`. BEV rows follow x, columns follow y.

mod format;
mod pose;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_dump, read_dump_file, write_dump, write_dump_file, GridDump, DUMP_MAGIC};
pub use pose::{wrap_angle, EgoPose};

/// Fixed category table.
pub mod category {
    pub const FREE: u8 = 0;
    pub const DRIVABLE: u8 = 1;
    pub const STATIC: u8 = 2;
    pub const VEHICLE: u8 = 3;
    pub const PEDESTRIAN: u8 = 4;

    pub const COUNT: usize = 5;
    pub const GMO: [u8; 2] = [VEHICLE, PEDESTRIAN];
    pub const OBSTACLES: [u8; 3] = [STATIC, VEHICLE, PEDESTRIAN];

    #[inline]
    pub fn is_gmo(c: u8) -> bool {
        c == VEHICLE || c == PEDESTRIAN
    }

    pub fn name(c: u8) -> &'static str {
        match c {
            FREE => "free",
            DRIVABLE => "drivable",
            STATIC => "static",
            VEHICLE => "vehicle",
            PEDESTRIAN => "pedestrian",
            _ => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct GridConfigSpec {
    x_range: (f64, f64),
    y_range: (f64, f64),
    z_range: (f64, f64),
    resolution: f64,
}

/// Axis ranges and voxel pitch of a grid. Dimensions are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridConfigSpec", into = "GridConfigSpec")]
pub struct GridConfig {
    x_range: (f64, f64),
    y_range: (f64, f64),
    z_range: (f64, f64),
    resolution: f64,
    h: usize,
    w: usize,
    d: usize,
}

impl TryFrom<GridConfigSpec> for GridConfig {
    type Error = Error;

    fn try_from(s: GridConfigSpec) -> Result<Self> {
        GridConfig::new(s.x_range, s.y_range, s.z_range, s.resolution)
    }
}

impl From<GridConfig> for GridConfigSpec {
    fn from(c: GridConfig) -> Self {
        GridConfigSpec {
            x_range: c.x_range,
            y_range: c.y_range,
            z_range: c.z_range,
            resolution: c.resolution,
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn axis_dim(name: &str, range: (f64, f64), res: f64) -> Result<usize> {
    let extent = range.1 - range.0;
    if !(extent.is_finite() && extent > 0.0) {
        return Err(Error::InvalidConfig(format!("{name} range must have positive extent")));
    }
    let cells = extent / res;
    let n = cells.round();
    if (cells - n).abs() > 1e-6 || n < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "{name} extent {extent} is not a whole number of {res} m voxels"
        )));
    }
    Ok(n as usize)
}

impl GridConfig {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        resolution: f64,
    ) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::InvalidConfig("resolution must be > 0".into()));
        }
        let h = axis_dim("x", x_range, resolution)?;
        let w = axis_dim("y", y_range, resolution)?;
        let d = axis_dim("z", z_range, resolution)?;
        if h > u16::MAX as usize || w > u16::MAX as usize || d > u16::MAX as usize {
            return Err(Error::InvalidConfig("dimension exceeds u16".into()));
        }
        Ok(Self {
            x_range,
            y_range,
            z_range,
            resolution,
            h,
            w,
            d,
        })
    }

    /// The 512 x 512 x 40 benchmark volume at 0.2 m.
    pub fn reference() -> Self {
        Self::new((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0), 0.2).expect("valid reference config")
    }

    /// 32 x 32 x 8 desk-scale volume at 0.8 m.
    pub fn desk() -> Self {
        Self::new((-12.8, 12.8), (-12.8, 12.8), (-1.6, 4.8), 0.8).expect("valid desk config")
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn columns(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn x_range(&self) -> (f64, f64) {
        self.x_range
    }

    pub fn y_range(&self) -> (f64, f64) {
        self.y_range
    }

    pub fn z_range(&self) -> (f64, f64) {
        self.z_range
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.x_range.0, self.y_range.0, self.z_range.0]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.d + k
    }

    #[inline]
    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.d;
        let col = idx / self.d;
        [col / self.w, col % self.w, k]
    }

    /// Center of voxel `(i, j, k)` in meters.
    #[inline]
    pub fn voxel_to_world(&self, v: [usize; 3]) -> [f64; 3] {
        let r = self.resolution;
        [
            self.x_range.0 + (v[0] as f64 + 0.5) * r,
            self.y_range.0 + (v[1] as f64 + 0.5) * r,
            self.z_range.0 + (v[2] as f64 + 0.5) * r,
        ]
    }

    /// Center of the BEV cell `(i, j)` in meters (signed indices allowed).
    #[inline]
    pub fn cell_center(&self, i: i64, j: i64) -> [f64; 2] {
        let r = self.resolution;
        [
            self.x_range.0 + (i as f64 + 0.5) * r,
            self.y_range.0 + (j as f64 + 0.5) * r,
        ]
    }

    #[inline]
    fn axis_index(p: f64, min: f64, res: f64, n: usize) -> Option<usize> {
        let f = ((p - min) / res + 1e-9).floor();
        if f >= 0.0 && f < n as f64 {
            Some(f as usize)
        } else {
            None
        }
    }

    /// Voxel containing `p`, or `None` outside the half-open grid box.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let r = self.resolution;
        Some([
            Self::axis_index(p[0], self.x_range.0, r, self.h)?,
            Self::axis_index(p[1], self.y_range.0, r, self.w)?,
            Self::axis_index(p[2], self.z_range.0, r, self.d)?,
        ])
    }

    /// BEV cell containing the planar point, or `None` when outside.
    pub fn world_to_cell(&self, p: [f64; 2]) -> Option<[usize; 2]> {
        let r = self.resolution;
        Some([
            Self::axis_index(p[0], self.x_range.0, r, self.h)?,
            Self::axis_index(p[1], self.y_range.0, r, self.w)?,
        ])
    }

    /// Fractional `(row, col)` where integer values land on cell centers.
    #[inline]
    pub fn fractional_cell(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.resolution;
        [
            (p[0] - self.x_range.0) / r - 0.5,
            (p[1] - self.y_range.0) / r - 0.5,
        ]
    }

    /// Height layer that holds the road surface: the one containing z just below 0.
    pub fn ground_layer(&self) -> usize {
        let k = ((-1e-6 - self.z_range.0) / self.resolution).floor();
        k.clamp(0.0, (self.d - 1) as f64) as usize
    }

    /// Same dimensions and (within f32 round-off) the same extents.
    pub fn same_layout(&self, other: &GridConfig) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * (1.0 + a.abs());
        self.dims() == other.dims()
            && close(self.resolution, other.resolution)
            && close(self.x_range.0, other.x_range.0)
            && close(self.y_range.0, other.y_range.0)
            && close(self.z_range.0, other.z_range.0)
    }

    pub(crate) fn check_same(&self, other: &GridConfig, context: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                left: vec![self.h, self.w, self.d],
                right: vec![other.h, other.w, other.d],
                context,
            })
        }
    }
}

/// One category id per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    config: GridConfig,
    labels: Vec<u8>,
}

impl SemanticGrid {
    pub fn new(config: GridConfig, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != config.len() {
            return Err(Error::ShapeMismatch {
                left: vec![labels.len()],
                right: vec![config.len()],
                context: "semantic labels",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= category::COUNT) {
            return Err(Error::UnknownCategory(bad));
        }
        Ok(Self { config, labels })
    }

    pub fn free(config: GridConfig) -> Self {
        Self {
            config,
            labels: vec![category::FREE; config.len()],
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, v: [usize; 3]) -> u8 {
        self.labels[self.config.index(v[0], v[1], v[2])]
    }

    #[inline]
    pub fn set(&mut self, v: [usize; 3], label: u8) {
        assert!((label as usize) < category::COUNT);
        let idx = self.config.index(v[0], v[1], v[2]);
        self.labels[idx] = label;
    }

    /// Labels of one BEV column, bottom to top.
    pub fn column(&self, i: usize, j: usize) -> &[u8] {
        let d = self.config.d;
        let start = self.config.index(i, j, 0);
        &self.labels[start..start + d]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Top-down view: label of the highest non-free voxel of each column.
    pub fn bev_projection(&self) -> Vec<u8> {
        let (h, w, _) = self.config.dims();
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let top = self
                    .column(i, j)
                    .iter()
                    .rev()
                    .copied()
                    .find(|&l| l != category::FREE)
                    .unwrap_or(category::FREE);
                out.push(top);
            }
        }
        out
    }

    /// BEV mask of columns containing any label in `cats`.
    pub fn column_mask(&self, cats: &[u8]) -> Vec<bool> {
        let (h, w, _) = self.config.dims();
        let mut out = vec![false; h * w];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.column(c / w, c % w).iter().any(|l| cats.contains(l));
        }
        out
    }
}

/// Three meters-valued components per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid {
    config: GridConfig,
    vectors: Vec<f32>,
}

impl FlowGrid {
    pub fn new(config: GridConfig, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != 3 * config.len() {
            return Err(Error::ShapeMismatch {
                left: vec![vectors.len()],
                right: vec![3 * config.len()],
                context: "flow vectors",
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow vector".into()));
        }
        Ok(Self { config, vectors })
    }

    pub fn zeros(config: GridConfig) -> Self {
        Self {
            config,
            vectors: vec![0.0; 3 * config.len()],
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    #[inline]
    pub fn get(&self, idx: usize) -> [f64; 3] {
        let v = &self.vectors[3 * idx..3 * idx + 3];
        [v[0] as f64, v[1] as f64, v[2] as f64]
    }

    #[inline]
    pub(crate) fn set(&mut self, idx: usize, v: [f64; 3]) {
        self.vectors[3 * idx] = v[0] as f32;
        self.vectors[3 * idx + 1] = v[1] as f32;
        self.vectors[3 * idx + 2] = v[2] as f32;
    }

    /// Zeroes the vectors of every voxel whose label is not GMO.
    pub fn masked_to_gmo(mut self, semantic: &SemanticGrid) -> Self {
        for (idx, &l) in semantic.labels().iter().enumerate() {
            if !category::is_gmo(l) {
                self.set(idx, [0.0; 3]);
            }
        }
        self
    }
}

/// Instance id per voxel, 0 meaning none.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGrid {
    config: GridConfig,
    ids: Vec<u16>,
}

impl InstanceGrid {
    pub fn new(config: GridConfig, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != config.len() {
            return Err(Error::ShapeMismatch {
                left: vec![ids.len()],
                right: vec![config.len()],
                context: "instance ids",
            });
        }
        Ok(Self { config, ids })
    }

    pub fn empty(config: GridConfig) -> Self {
        Self {
            config,
            ids: vec![0; config.len()],
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    #[inline]
    pub fn set(&mut self, idx: usize, id: u16) {
        self.ids[idx] = id;
    }

    /// Sorted distinct non-zero ids.
    pub fn distinct(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.ids.iter().copied().filter(|&i| i != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Renumbers ids to `1..=n` in ascending order of the original ids.
    pub fn compacted(&self) -> InstanceGrid {
        let distinct = self.distinct();
        let ids = self
            .ids
            .iter()
            .map(|&i| {
                if i == 0 {
                    0
                } else {
                    distinct.binary_search(&i).map(|p| p as u16 + 1).unwrap_or(0)
                }
            })
            .collect();
        InstanceGrid {
            config: self.config,
            ids,
        }
    }
}

/// Boolean voxel mask with its dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    dims: (usize, usize, usize),
    bits: Vec<bool>,
}

impl VoxelMask {
    pub fn new(dims: (usize, usize, usize), bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::ShapeMismatch {
                left: vec![bits.len()],
                right: vec![dims.0, dims.1, dims.2],
                context: "voxel mask",
            });
        }
        Ok(Self { dims, bits })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// |a ∩ b| / |a ∪ b|, with an empty union scored 1.
pub fn binary_iou(a: &VoxelMask, b: &VoxelMask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            left: vec![a.dims.0, a.dims.1, a.dims.2],
            right: vec![b.dims.0, b.dims.1, b.dims.2],
            context: "binary_iou",
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mask of voxels whose label is in `categories`.
pub fn category_mask(g: &SemanticGrid, categories: &[u8]) -> Result<VoxelMask> {
    if let Some(&bad) = categories.iter().find(|&&c| c as usize >= category::COUNT) {
        return Err(Error::UnknownCategory(bad));
    }
    let mut table = [false; 256];
    for &c in categories {
        table[c as usize] = true;
    }
    let bits = g.labels.iter().map(|&l| table[l as usize]).collect();
    Ok(VoxelMask {
        dims: g.config.dims(),
        bits,
    })
}

/// Re-expresses `src` in another frame by nearest-voxel lookup.
///
/// `transform` maps source-frame coordinates to destination-frame
/// coordinates. Destination voxels whose preimage falls outside `src` are free.
pub fn warp_grid(src: &SemanticGrid, transform: &EgoPose) -> SemanticGrid {
    let cfg = src.config;
    let (h, w, d) = cfg.dims();
    let inv = transform.inverse();
    let mut out = SemanticGrid::free(cfg);
    for i in 0..h {
        for j in 0..w {
            let c = cfg.cell_center(i as i64, j as i64);
            let p = inv.apply(c);
            if let Some([si, sj]) = cfg.world_to_cell(p) {
                let s = cfg.index(si, sj, 0);
                let t = cfg.index(i, j, 0);
                out.labels[t..t + d].copy_from_slice(&src.labels[s..s + d]);
            }
        }
    }
    out
}
