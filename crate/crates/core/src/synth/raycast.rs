//! Digital ray traversal from the grid center to every boundary voxel.

use crate::geometry::{GridSpec, VoxelIndex};
use crate::occupancy::{OccupancyGrid, VisibilityMask, FREE};

/// One center-to-boundary ray as the ordered linear indices it visits.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub target: VoxelIndex,
    pub voxels: Vec<usize>,
    /// Cosine between the ray and the center-to-voxel direction, per visited voxel.
    pub alignment: Vec<f64>,
}

/// All boundary rays of a grid, in linear order of their target voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySet {
    pub grid: GridSpec,
    pub rays: Vec<Ray>,
}

/// Ray origin in continuous voxel coordinates (cell `i` spans `[i-0.5, i+0.5]`).
fn origin(grid: &GridSpec) -> [f64; 3] {
    [
        grid.width as f64 / 2.0,
        grid.height as f64 / 2.0,
        grid.depth as f64 / 2.0,
    ]
}

fn is_boundary(idx: VoxelIndex, grid: &GridSpec) -> bool {
    idx.i == 0
        || idx.j == 0
        || idx.k == 0
        || idx.i + 1 == grid.width
        || idx.j + 1 == grid.height
        || idx.k + 1 == grid.depth
}

/// Amanatides-Woo traversal from `o` to the center of `target`. Ties step
/// the lowest axis first (`u`, then `v`, then `w`).
pub fn traverse(o: [f64; 3], target: [usize; 3], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let t = target.map(|v| v as f64);
    let d = [t[0] - o[0], t[1] - o[1], t[2] - o[2]];
    let mut cell = [0usize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        cell[a] = ((o[a] + 0.5).floor().max(0.0) as usize).min(dims[a] - 1);
        if d[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (cell[a] as f64 + 0.5 - o[a]) / d[a];
            t_delta[a] = 1.0 / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - 0.5 - o[a]) / d[a];
            t_delta[a] = -1.0 / d[a];
        }
    }
    let mut out = vec![cell];
    while cell != target {
        for a in 0..3 {
            if cell[a] == target[a] {
                t_max[a] = f64::INFINITY;
            }
        }
        let mut a = 0;
        for b in 1..3 {
            if t_max[b] < t_max[a] {
                a = b;
            }
        }
        if !t_max[a].is_finite() {
            break;
        }
        cell[a] = (cell[a] as isize + step[a]) as usize;
        t_max[a] += t_delta[a];
        out.push(cell);
    }
    out
}

impl RaySet {
    pub fn new(grid: &GridSpec) -> Self {
        let o = origin(grid);
        let dims = [grid.width, grid.height, grid.depth];
        let rays = grid
            .indices()
            .filter(|&idx| is_boundary(idx, grid))
            .map(|target| {
                let cells = traverse(o, [target.i, target.j, target.k], dims);
                let d = [
                    target.i as f64 - o[0],
                    target.j as f64 - o[1],
                    target.k as f64 - o[2],
                ];
                let dn = norm(d);
                let mut voxels = Vec::with_capacity(cells.len());
                let mut alignment = Vec::with_capacity(cells.len());
                for c in cells {
                    voxels.push(grid.linear(VoxelIndex::new(c[0], c[1], c[2])));
                    let e = [c[0] as f64 - o[0], c[1] as f64 - o[1], c[2] as f64 - o[2]];
                    let en = norm(e);
                    alignment.push(if en < 1e-9 || dn < 1e-9 {
                        0.0
                    } else {
                        (d[0] * e[0] + d[1] * e[1] + d[2] * e[2]) / (dn * en)
                    });
                }
                Ray {
                    target,
                    voxels,
                    alignment,
                }
            })
            .collect();
        Self { grid: *grid, rays }
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Visibility and per-ray hit results for one occupancy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RayCast {
    pub mask: VisibilityMask,
    /// First occupied voxel along each ray.
    pub first_hit: Vec<Option<VoxelIndex>>,
    /// Ray that owns each voxel: visible rays first, then best aligned, then lowest index.
    pub owner: Vec<Option<u32>>,
}

pub fn cast_rays(occ: &OccupancyGrid, rays: &RaySet) -> RayCast {
    let grid = &rays.grid;
    let n = grid.voxel_count();
    let mut visible = vec![false; n];
    let mut owner: Vec<Option<u32>> = vec![None; n];
    let mut best: Vec<(bool, f64)> = vec![(false, f64::NEG_INFINITY); n];
    let mut first_hit = Vec::with_capacity(rays.len());
    for (r, ray) in rays.rays.iter().enumerate() {
        let hit_at = ray.voxels.iter().position(|&v| occ.labels[v] != FREE);
        first_hit.push(hit_at.map(|p| grid.unlinear(ray.voxels[p])));
        for (p, (&v, &a)) in ray.voxels.iter().zip(&ray.alignment).enumerate() {
            let vis = hit_at.map_or(true, |h| p <= h);
            visible[v] |= vis;
            let key = (vis, a);
            let (bv, ba) = best[v];
            if owner[v].is_none() || (key.0 && !bv) || (key.0 == bv && key.1 > ba) {
                best[v] = key;
                owner[v] = Some(r as u32);
            }
        }
    }
    RayCast {
        mask: VisibilityMask {
            shape: grid.spatial_shape(),
            visible,
        },
        first_hit,
        owner,
    }
}

/// Visibility mask and first hit per boundary ray.
pub fn cast_visibility(occ: &OccupancyGrid, grid: &GridSpec) -> (VisibilityMask, Vec<Option<VoxelIndex>>) {
    let cast = cast_rays(occ, &RaySet::new(grid));
    (cast.mask, cast.first_hit)
}

/// Point-sampled ray march with step `0.1` cells along the same rays.
pub fn ray_march_visibility(occ: &OccupancyGrid, grid: &GridSpec) -> VisibilityMask {
    let o = origin(grid);
    let dims = [grid.width, grid.height, grid.depth];
    let mut visible = vec![false; grid.voxel_count()];
    for target in grid.indices().filter(|&idx| is_boundary(idx, grid)) {
        let d = [
            target.i as f64 - o[0],
            target.j as f64 - o[1],
            target.k as f64 - o[2],
        ];
        let steps = (norm(d) / 0.1).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let c: Vec<usize> = (0..3)
                .map(|a| (((o[a] + d[a] * t) + 0.5).floor().max(0.0) as usize).min(dims[a] - 1))
                .collect();
            let v = grid.linear(VoxelIndex::new(c[0], c[1], c[2]));
            visible[v] = true;
            if occ.labels[v] != FREE {
                break;
            }
        }
    }
    VisibilityMask {
        shape: grid.spatial_shape(),
        visible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traversal_is_face_connected_and_ends_on_target() {
        let grid = GridSpec::new(8, 10, 6, 0.5).unwrap();
        let rays = RaySet::new(&grid);
        for ray in &rays.rays {
            assert_eq!(*ray.voxels.last().unwrap(), grid.linear(ray.target));
            for w in ray.voxels.windows(2) {
                let (a, b) = (grid.unlinear(w[0]), grid.unlinear(w[1]));
                let dist = a.i.abs_diff(b.i) + a.j.abs_diff(b.j) + a.k.abs_diff(b.k);
                assert_eq!(dist, 1);
            }
        }
    }

    #[test]
    fn empty_grid_is_visible_along_every_ray() {
        let grid = GridSpec::new(8, 8, 4, 0.5).unwrap();
        let occ = OccupancyGrid::empty(grid.spatial_shape());
        let rays = RaySet::new(&grid);
        let cast = cast_rays(&occ, &rays);
        assert!(cast.first_hit.iter().all(Option::is_none));
        for ray in &rays.rays {
            assert!(ray.voxels.iter().all(|&v| cast.mask.visible[v]));
        }
    }

    #[test]
    fn wall_on_plus_x_hides_voxels_behind_it() {
        let grid = GridSpec::new(8, 16, 4, 0.5).unwrap();
        let mut occ = OccupancyGrid::empty(grid.spatial_shape());
        let wall = VoxelIndex::new(9, 4, 2);
        occ.labels[grid.linear(wall)] = 2;
        let (mask, hits) = cast_visibility(&occ, &grid);
        let rays = RaySet::new(&grid);
        let r = rays
            .rays
            .iter()
            .position(|ray| ray.target == VoxelIndex::new(15, 4, 2))
            .unwrap();
        assert_eq!(hits[r], Some(wall));
        assert!(mask.visible[grid.linear(wall)]);
        for i in 10..16 {
            assert!(!mask.visible[grid.linear(VoxelIndex::new(i, 4, 2))], "i={i}");
        }
    }
}
