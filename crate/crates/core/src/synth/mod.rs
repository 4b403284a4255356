//! Synthetic multi-frame scenes with depth-ambiguous volume features.
//!
//! Each frame's features emulate monocular lifting: along every ray from the
//! ego position, the first surface hit is written into every voxel of the ray.
//! Only the relative motion between frames can tell where on the ray the
//! surface actually is.

pub mod raycast;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::cost_volume::{TemporalWindow, VolumeFeatures};
use crate::error::{Error, Result};
use crate::geometry::{transform_point, voxel_to_world, FramePose, GridSpec, WorldPoint};
use crate::occupancy::{ClassSet, OccupancyGrid, VisibilityMask, FREE};
use crate::tensor::DenseTensor;

pub use raycast::{cast_rays, cast_visibility, ray_march_visibility, RayCast, RaySet};

/// Class written below the ground plane.
pub const GROUND_CLASS: u8 = 1;

/// Mixes `tag` into `base` (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub grid: GridSpec,
    pub class_set: ClassSet,
    /// Inclusive range of boxes per scene.
    pub box_count: (usize, usize),
    /// Footprint edge length range, meters.
    pub box_size: (f64, f64),
    pub box_height: (f64, f64),
    /// Per-scene ego speed range, m/s.
    pub ego_speed: (f64, f64),
    pub frame_interval: f64,
    pub frame_count: usize,
    pub ground_height: f64,
    /// Boxes never overlap the strip `|y| < road_half_width` the ego drives along.
    pub road_half_width: f64,
    pub channels: usize,
    pub noise_sigma: f64,
    pub texture_sigma: f64,
    pub texture_length: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::new(32, 32, 8, 0.5).expect("valid default grid"),
            class_set: ClassSet::numbered(4).expect("valid default classes"),
            box_count: (4, 10),
            box_size: (1.0, 3.0),
            box_height: (1.0, 2.5),
            ego_speed: (0.0, 3.0),
            frame_interval: 0.5,
            frame_count: 7,
            ground_height: -1.5,
            road_half_width: 1.5,
            channels: 8,
            noise_sigma: 0.05,
            texture_sigma: 0.25,
            texture_length: 0.75,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let range = |key: &str, (lo, hi): (f64, f64), strict: bool| {
            let ok = lo.is_finite() && hi.is_finite() && lo <= hi && if strict { lo > 0.0 } else { lo >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, format!("invalid range ({lo}, {hi})")))
            }
        };
        range("box_size", self.box_size, true)?;
        range("box_height", self.box_height, true)?;
        range("ego_speed", self.ego_speed, false)?;
        if self.box_count.0 > self.box_count.1 {
            return Err(Error::config("box_count", "min exceeds max"));
        }
        if self.frame_count == 0 {
            return Err(Error::config("frame_count", "must be at least 1"));
        }
        if !(self.frame_interval > 0.0) {
            return Err(Error::config("frame_interval", "must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.class_set.len() > u8::MAX as usize {
            return Err(Error::config("classes", "too many classes"));
        }
        for (key, v) in [
            ("noise_sigma", self.noise_sigma),
            ("texture_sigma", self.texture_sigma),
            ("road_half_width", self.road_half_width),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be nonnegative"));
            }
        }
        if !(self.texture_length > 0.0) {
            return Err(Error::config("texture_length", "must be positive"));
        }
        Ok(())
    }

    /// Oldest-to-current time span of a window.
    pub fn time_span(&self) -> f64 {
        (self.frame_count - 1) as f64 * self.frame_interval
    }
}

/// Axis-aligned box, half-open on every axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: WorldPoint) -> bool {
        let p = [p.x, p.y, p.z];
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub bounds: Aabb,
    pub class: u8,
}

/// Smooth random vector field used as surface appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureField {
    omega: Vec<[f64; 3]>,
    phase: Vec<f64>,
    /// One amplitude vector per component.
    amplitude: Vec<Vec<f64>>,
    scale: f64,
}

const TEXTURE_COMPONENTS: usize = 24;

impl TextureField {
    pub fn new(channels: usize, sigma: f64, length: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut omega = Vec::with_capacity(TEXTURE_COMPONENTS);
        let mut phase = Vec::with_capacity(TEXTURE_COMPONENTS);
        let mut amplitude = Vec::with_capacity(TEXTURE_COMPONENTS);
        for _ in 0..TEXTURE_COMPONENTS {
            let w: [f64; 3] = std::array::from_fn(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / length
            });
            omega.push(w);
            phase.push(rng.gen_range(0.0..std::f64::consts::TAU));
            amplitude.push((0..channels).map(|_| StandardNormal.sample(&mut rng)).collect());
        }
        Self {
            omega,
            phase,
            amplitude,
            scale: sigma * (2.0 / TEXTURE_COMPONENTS as f64).sqrt(),
        }
    }

    pub fn zero(channels: usize) -> Self {
        Self::new(channels, 0.0, 1.0, 0)
    }

    pub fn add_to(&self, p: WorldPoint, out: &mut [f64]) {
        if self.scale == 0.0 {
            return;
        }
        for ((w, &b), amp) in self.omega.iter().zip(&self.phase).zip(&self.amplitude) {
            let c = (w[0] * p.x + w[1] * p.y + w[2] * p.z + b).cos() * self.scale;
            for (o, &a) in out.iter_mut().zip(amp) {
                *o += a * c;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub boxes: Vec<SceneBox>,
    pub ground_height: f64,
    pub ego_speed: f64,
    /// Trajectory frame at which the ego sits at the global origin.
    pub anchor_frame: usize,
    pub texture: TextureField,
    pub seed: u64,
}

impl Scene {
    /// Ego pose at trajectory frame `f`, straight along `+x`.
    pub fn pose(&self, f: usize, frame_interval: f64) -> FramePose {
        let x = self.ego_speed * (f as f64 - self.anchor_frame as f64) * frame_interval;
        FramePose::translation([x, 0.0, 0.0], f as f64 * frame_interval)
    }

    /// Label of a point in global coordinates.
    pub fn label_at(&self, p: WorldPoint) -> u8 {
        if let Some(b) = self.boxes.iter().rev().find(|b| b.bounds.contains(p)) {
            b.class
        } else if p.z < self.ground_height {
            GROUND_CLASS
        } else {
            FREE
        }
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let ego_speed = uniform(&mut rng, cfg.ego_speed);
    let count = rng.gen_range(cfg.box_count.0..=cfg.box_count.1);
    let m = cfg.class_set.semantic_count() as u8;
    let first_box_class = if m >= 2 { 2 } else { GROUND_CLASS };
    let g = &cfg.grid;
    let c = g.center();
    let hx = g.width as f64 * g.voxel_size / 2.0;
    let hy = g.height as f64 * g.voxel_size / 2.0;
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..100 {
            let sx = uniform(&mut rng, cfg.box_size);
            let sy = uniform(&mut rng, cfg.box_size);
            let sz = uniform(&mut rng, cfg.box_height);
            let x = rng.gen_range(c.x - hx..c.x + hx);
            let y = rng.gen_range(c.y - hy..c.y + hy);
            let class = rng.gen_range(first_box_class..=m.max(first_box_class));
            let (y0, y1) = (y - sy / 2.0, y + sy / 2.0);
            if y0 < cfg.road_half_width && y1 > -cfg.road_half_width {
                continue;
            }
            boxes.push(SceneBox {
                bounds: Aabb {
                    min: [x - sx / 2.0, y0, cfg.ground_height],
                    max: [x + sx / 2.0, y1, cfg.ground_height + sz],
                },
                class,
            });
            break;
        }
    }
    Ok(Scene {
        boxes,
        ground_height: cfg.ground_height,
        ego_speed,
        anchor_frame: cfg.frame_count - 1,
        texture: TextureField::new(cfg.channels, cfg.texture_sigma, cfg.texture_length, derive_seed(cfg.seed, 1)),
        seed: cfg.seed,
    })
}

/// Labels of voxel centers in the ego frame given by `pose`.
pub fn rasterize_occupancy(scene: &Scene, pose: &FramePose, grid: &GridSpec) -> OccupancyGrid {
    let labels = grid
        .indices()
        .map(|idx| {
            let p = voxel_to_world(idx, grid).expect("index within grid");
            scene.label_at(transform_point(&pose.transform, p))
        })
        .collect();
    OccupancyGrid {
        shape: grid.spatial_shape(),
        labels,
    }
}

/// Fixed unit-norm class vectors; row 0 (Free) is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub rows: Vec<Vec<f64>>,
}

impl ClassEmbeddings {
    pub fn new(classes: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut rows = vec![vec![0.0; channels]];
        for _ in 1..classes {
            let mut v = draw(&mut rng);
            for _ in 0..1000 {
                if rows[1..].iter().all(|r| dist(r, &v) >= 0.9) {
                    break;
                }
                v = draw(&mut rng);
            }
            rows.push(v);
        }
        Self { rows }
    }

    pub fn channels(&self) -> usize {
        self.rows[0].len()
    }

    /// Smallest distance between two non-Free rows.
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 1..self.rows.len() {
            for b in a + 1..self.rows.len() {
                best = best.min(dist(&self.rows[a], &self.rows[b]));
            }
        }
        best
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smears the first hit of every ray over the whole ray, in `pose`'s ego frame.
pub fn synthesize_ambiguous_features(
    occ: &OccupancyGrid,
    embeddings: &ClassEmbeddings,
    rays: &RaySet,
    noise_sigma: f64,
    texture: &TextureField,
    pose: &FramePose,
    rng: &mut ChaCha8Rng,
) -> Result<VolumeFeatures<f32>> {
    let grid = rays.grid;
    if occ.shape != grid.spatial_shape() {
        return Err(Error::shape(format!(
            "occupancy {:?} does not match grid {:?}",
            occ.shape,
            grid.spatial_shape()
        )));
    }
    let c = embeddings.channels();
    let cast = cast_rays(occ, rays);
    let ray_value: Vec<Option<Vec<f64>>> = cast
        .first_hit
        .iter()
        .map(|hit| {
            hit.map(|idx| {
                let mut v = embeddings.rows[occ.labels[grid.linear(idx)] as usize].clone();
                let local = voxel_to_world(idx, &grid).expect("hit within grid");
                texture.add_to(transform_point(&pose.transform, local), &mut v);
                v
            })
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut data = vec![0f32; grid.voxel_count() * c];
    for (v, owner) in cast.owner.iter().enumerate() {
        if let Some(value) = owner.and_then(|r| ray_value[r as usize].as_ref()) {
            for (o, &x) in data[v * c..(v + 1) * c].iter_mut().zip(value) {
                let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                *o = (x + n) as f32;
            }
        }
    }
    let [h, w, z] = grid.spatial_shape();
    VolumeFeatures::new(DenseTensor::new(vec![h, w, z, c], data)?, *pose, grid)
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub window: TemporalWindow<f32>,
    pub gt: OccupancyGrid,
    pub mask: VisibilityMask,
    pub ego_speed: f64,
}

/// Ray set and class embeddings shared by every sample of a dataset.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: SceneConfig,
    pub rays: RaySet,
    pub embeddings: ClassEmbeddings,
}

impl World {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            rays: RaySet::new(&cfg.grid),
            embeddings: ClassEmbeddings::new(cfg.class_set.len(), cfg.channels, derive_seed(cfg.seed, 0xE3B)),
        })
    }

    /// Window ending at trajectory frame `t_index`.
    pub fn frame_sample(&self, scene: &Scene, t_index: usize) -> Result<FrameSample> {
        let cfg = &self.cfg;
        if t_index + 1 < cfg.frame_count {
            return Err(Error::Range(format!(
                "frame {t_index} has too little history for {} frames",
                cfg.frame_count
            )));
        }
        let mut frames = Vec::with_capacity(cfg.frame_count);
        let mut current = None;
        for back in 0..cfg.frame_count {
            let pose = scene.pose(t_index - back, cfg.frame_interval);
            let occ = rasterize_occupancy(scene, &pose, &cfg.grid);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, 100 + back as u64));
            let feats = synthesize_ambiguous_features(
                &occ,
                &self.embeddings,
                &self.rays,
                cfg.noise_sigma,
                &scene.texture,
                &pose,
                &mut rng,
            )?;
            if back == 0 {
                let mask = cast_rays(&occ, &self.rays).mask;
                current = Some((occ, mask));
            }
            frames.push(feats);
        }
        let (gt, mask) = current.expect("at least one frame");
        let cur = frames.remove(0);
        Ok(FrameSample {
            window: TemporalWindow::new(cur, frames, cfg.frame_interval)?,
            gt,
            mask,
            ego_speed: scene.ego_speed,
        })
    }

    /// Scene and sample for a scene seed, ending at the anchor frame.
    pub fn sample(&self, scene_seed: u64) -> Result<FrameSample> {
        let mut cfg = self.cfg.clone();
        cfg.seed = scene_seed;
        let scene = generate_scene(&cfg)?;
        self.frame_sample(&scene, scene.anchor_frame)
    }
}

pub fn build_frame_sample(scene: &Scene, cfg: &SceneConfig, t_index: usize) -> Result<FrameSample> {
    World::new(cfg)?.frame_sample(scene, t_index)
}

/// Fraction of voxels carrying a nonzero current feature that are free in gt.
pub fn ambiguity_rate(sample: &FrameSample) -> f64 {
    let c = sample.window.current.channels();
    let data = sample.window.current.features.data();
    let (mut nonzero, mut free) = (0usize, 0usize);
    for (v, row) in data.chunks(c).enumerate() {
        if row.iter().any(|&x| x != 0.0) {
            nonzero += 1;
            if sample.gt.labels[v] == FREE {
                free += 1;
            }
        }
    }
    if nonzero == 0 {
        0.0
    } else {
        free as f64 / nonzero as f64
    }
}

/// Train and eval samples generated from one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cfg: SceneConfig,
    pub train: Vec<FrameSample>,
    pub eval: Vec<FrameSample>,
}

const TRAIN_TAG: u64 = 0x7124;
const EVAL_TAG: u64 = 0xE7A1;

pub fn generate_dataset(cfg: &SceneConfig, train: usize, eval: usize) -> Result<Dataset> {
    let world = World::new(cfg)?;
    let make = |tag: u64, n: usize| -> Result<Vec<FrameSample>> {
        (0..n)
            .into_par_iter()
            .map(|i| world.sample(derive_seed(derive_seed(cfg.seed, tag), i as u64)))
            .collect()
    };
    Ok(Dataset {
        cfg: cfg.clone(),
        train: make(TRAIN_TAG, train)?,
        eval: make(EVAL_TAG, eval)?,
    })
}
