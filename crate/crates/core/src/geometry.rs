//! Voxel grid geometry: index/world conversions, sight-ray sampling and
//! cross-frame rigid projection.
//!
//! Axis convention: voxel `i` runs along the grid width `W` and world `x`,
//! `j` along the height `H` and world `y`, `k` along the vertical `Z`. Cell
//! centers sit at integer continuous coordinates, so voxel `(i, j, k)` maps to
//! `((i - W/2) s, (j - H/2) s, (k - Z/2) s)` plus the grid's center offset.
//!
//! Transforms use column vectors: `p' = M p`. A row-vector composition
//! `p P_t P_{t-k}^{-1}` corresponds to `P_{t-k}^{-1} P_t p` here.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// Dimensions and placement of a voxel volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// `H`, cells along `y`.
    pub height: usize,
    /// `W`, cells along `x`.
    pub width: usize,
    /// `Z`, cells along `z`.
    pub depth: usize,
    /// Edge length of one cubic cell in meters.
    pub voxel_size: f64,
    /// World position of the grid center.
    pub center_offset: [f64; 3],
}

impl GridSpec {
    pub fn new(height: usize, width: usize, depth: usize, voxel_size: f64) -> Result<Self> {
        let grid = Self {
            height,
            width,
            depth,
            voxel_size,
            center_offset: [0.0; 3],
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_center_offset(mut self, offset: [f64; 3]) -> Self {
        self.center_offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::config(
                "grid",
                format!(
                    "dimensions must be positive, got {}x{}x{}",
                    self.height, self.width, self.depth
                ),
            ));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config(
                "voxel_size",
                format!("must be positive and finite, got {}", self.voxel_size),
            ));
        }
        if self.center_offset.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("center_offset", "must be finite"));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.height * self.width * self.depth
    }

    /// Spatial tensor shape `[H, W, Z]`.
    pub fn spatial_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.depth]
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        idx.i < self.width && idx.j < self.height && idx.k < self.depth
    }

    /// Row-major offset of a voxel in an `H x W x Z` buffer.
    pub fn linear(&self, idx: VoxelIndex) -> usize {
        (idx.j * self.width + idx.i) * self.depth + idx.k
    }

    pub fn unlinear(&self, offset: usize) -> VoxelIndex {
        let k = offset % self.depth;
        let rest = offset / self.depth;
        VoxelIndex {
            i: rest % self.width,
            j: rest / self.width,
            k,
        }
    }

    /// All voxel indices in buffer order.
    pub fn indices(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        (0..self.voxel_count()).map(|o| self.unlinear(o))
    }

    /// World position of the grid center (the ego position).
    pub fn center(&self) -> WorldPoint {
        let [x, y, z] = self.center_offset;
        WorldPoint { x, y, z }
    }

    /// Half extent of the grid along `x` in meters.
    pub fn half_extent_x(&self) -> f64 {
        self.width as f64 * self.voxel_size / 2.0
    }

    fn axis_to_world(&self, index: f64, cells: usize, offset: f64) -> f64 {
        (index - cells as f64 / 2.0) * self.voxel_size + offset
    }

    fn axis_to_voxel(&self, coord: f64, cells: usize, offset: f64) -> f64 {
        let continuous = (coord - offset) / self.voxel_size + cells as f64 / 2.0;
        // Snap onto the node when `coord` is exactly what the forward map
        // produces for it, so the round trip is exact at cell centers.
        let node = continuous.round();
        if self.axis_to_world(node, cells, offset) == coord {
            node
        } else {
            continuous
        }
    }
}

/// Integer voxel address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    /// Width-axis (x) index.
    pub i: usize,
    /// Height-axis (y) index.
    pub j: usize,
    /// Vertical (z) index.
    pub k: usize,
}

impl VoxelIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }
}

/// A point in some ego frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(self, other: WorldPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Fractional voxel coordinates; integers are cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContinuousVoxelCoord {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl ContinuousVoxelCoord {
    pub fn new(u: f64, v: f64, w: f64) -> Self {
        Self { u, v, w }
    }
}

/// Unit vector from the grid center toward a point, or the zero sentinel
/// for the point at the center itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SightDirection {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl SightDirection {
    pub const ZERO: SightDirection = SightDirection {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.dx, self.dy, self.dz)
    }
}

/// Ordered sample offsets along a sight ray, in cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct StrideSet {
    strides: Vec<f64>,
}

impl StrideSet {
    pub fn new(strides: Vec<f64>) -> Result<Self> {
        if strides.is_empty() {
            return Err(Error::config("strides", "at least one stride is required"));
        }
        if strides.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("strides", "strides must be finite"));
        }
        if strides.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("strides", "strides must be strictly increasing"));
        }
        if !strides.contains(&0.0) {
            return Err(Error::config("strides", "the stride set must contain 0"));
        }
        Ok(Self { strides })
    }

    /// Symmetric integer strides `-half..=half`.
    pub fn symmetric(half: i32) -> Self {
        Self {
            strides: (-half..=half).map(f64::from).collect(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.strides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strides.is_empty()
    }

    /// Position of the zero stride.
    pub fn zero_slot(&self) -> usize {
        self.strides
            .iter()
            .position(|&s| s == 0.0)
            .expect("validated stride set contains 0")
    }
}

impl Default for StrideSet {
    fn default() -> Self {
        Self::symmetric(4)
    }
}

/// A 4x4 homogeneous rigid transform, column-vector convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(pub Matrix4<f64>);

impl RigidTransform {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self(Matrix4::new_translation(&Vector3::new(t[0], t[1], t[2])))
    }

    /// Rotation by `yaw` radians about `+z` (counter-clockwise seen from above),
    /// followed by a translation.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        let mut m = rot.to_homogeneous();
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)])
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform(self.0 * other.0)
    }

    /// Rigid inverse `[R^T | -R^T t]`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m[(0, 3)] = t.x;
        m[(1, 3)] = t.y;
        m[(2, 3)] = t.z;
        RigidTransform(m)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == Matrix4::identity()
    }

    /// Largest deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }
}

/// Ego-to-global transform of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePose {
    pub transform: RigidTransform,
    /// Seconds.
    pub timestamp: f64,
}

impl FramePose {
    const ORTHO_TOL: f64 = 1e-6;

    pub fn new(transform: Matrix4<f64>, timestamp: f64) -> Result<Self> {
        let pose = Self {
            transform: RigidTransform(transform),
            timestamp,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_row_major(values: &[f64; 16], timestamp: f64) -> Result<Self> {
        Self::new(Matrix4::from_row_slice(values), timestamp)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.transform.0[(r, c)];
            }
        }
        out
    }

    pub fn identity(timestamp: f64) -> Self {
        Self {
            transform: RigidTransform::identity(),
            timestamp,
        }
    }

    pub fn translation(t: [f64; 3], timestamp: f64) -> Self {
        Self {
            transform: RigidTransform::from_translation(t),
            timestamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.transform.0;
        if m.iter().any(|v| !v.is_finite()) || !self.timestamp.is_finite() {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let last = Vector4::new(m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]);
        if last != Vector4::new(0.0, 0.0, 0.0, 1.0) {
            return Err(Error::InvalidPose(format!(
                "last row must be (0, 0, 0, 1), got {:?}",
                last.as_slice()
            )));
        }
        let err = self.transform.orthonormality_error();
        if err > Self::ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation block not orthonormal (deviation {err:e})"
            )));
        }
        Ok(())
    }
}

/// Cell center of `idx` in the grid's ego frame.
pub fn voxel_to_world(idx: VoxelIndex, grid: &GridSpec) -> Result<WorldPoint> {
    if !grid.contains(idx) {
        return Err(Error::OutOfBounds {
            i: idx.i,
            j: idx.j,
            k: idx.k,
            w: grid.width,
            h: grid.height,
            z: grid.depth,
        });
    }
    let [ox, oy, oz] = grid.center_offset;
    Ok(WorldPoint {
        x: grid.axis_to_world(idx.i as f64, grid.width, ox),
        y: grid.axis_to_world(idx.j as f64, grid.height, oy),
        z: grid.axis_to_world(idx.k as f64, grid.depth, oz),
    })
}

/// Inverse of [`voxel_to_world`]; out-of-grid points are returned as-is.
pub fn world_to_voxel(p: WorldPoint, grid: &GridSpec) -> ContinuousVoxelCoord {
    let [ox, oy, oz] = grid.center_offset;
    ContinuousVoxelCoord {
        u: grid.axis_to_voxel(p.x, grid.width, ox),
        v: grid.axis_to_voxel(p.y, grid.height, oy),
        w: grid.axis_to_voxel(p.z, grid.depth, oz),
    }
}

const CENTER_EPS: f64 = 1e-9;

pub fn sight_direction(p: WorldPoint, grid: &GridSpec) -> SightDirection {
    let d = p.to_vector() - grid.center().to_vector();
    let n = d.norm();
    if n < CENTER_EPS {
        return SightDirection::ZERO;
    }
    let u = d / n;
    SightDirection {
        dx: u.x,
        dy: u.y,
        dz: u.z,
    }
}

/// Points `p + dir * (n * s)` for every stride `n`.
pub fn sample_sight_points(
    p: WorldPoint,
    dir: SightDirection,
    strides: &StrideSet,
    grid: &GridSpec,
) -> Vec<WorldPoint> {
    strides
        .as_slice()
        .iter()
        .map(|&n| {
            let step = n * grid.voxel_size;
            WorldPoint {
                x: p.x + dir.dx * step,
                y: p.y + dir.dy * step,
                z: p.z + dir.dz * step,
            }
        })
        .collect()
}

/// Transform taking current-ego coordinates to the past frame's ego
/// coordinates: `P_past^{-1} P_now`.
pub fn relative_transform(pose_now: &FramePose, pose_past: &FramePose) -> Result<RigidTransform> {
    pose_now.validate()?;
    pose_past.validate()?;
    let past_inv = pose_past
        .transform
        .0
        .try_inverse()
        .ok_or_else(|| Error::InvalidPose("past pose is singular".into()))?;
    let m = RigidTransform(past_inv * pose_now.transform.0);
    if m.orthonormality_error() > FramePose::ORTHO_TOL {
        return Err(Error::InvalidPose(
            "relative transform lost orthonormality".into(),
        ));
    }
    Ok(m)
}

pub fn transform_point(m: &RigidTransform, p: WorldPoint) -> WorldPoint {
    let h = m.0 * Vector4::new(p.x, p.y, p.z, 1.0);
    WorldPoint::new(h.x, h.y, h.z)
}
