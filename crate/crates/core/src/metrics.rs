//! IoU / mIoU over visible voxels, with near/far, speed and binary splits.

use crate::error::{Error, Result};
use crate::geometry::{voxel_to_world, GridSpec};
use crate::occupancy::{OccupancyGrid, VisibilityMask, FREE};

/// Per-class intersection and union counts, summed over samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tally {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Visible voxels per ground-truth class.
    pub gt_count: Vec<u64>,
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
            gt_count: vec![0; classes],
            correct: 0,
            total: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.union.len()
    }

    /// Adds voxels where `keep` is set. Labels are passed through `remap`.
    fn add_with(&mut self, pred: &[u8], gt: &[u8], keep: impl Fn(usize) -> bool, remap: impl Fn(u8) -> u8) {
        for v in (0..gt.len()).filter(|&v| keep(v)) {
            let (p, g) = (remap(pred[v]) as usize, remap(gt[v]) as usize);
            self.total += 1;
            self.gt_count[g] += 1;
            if p == g {
                self.correct += 1;
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                self.union[p] += 1;
            }
        }
    }

    pub fn add(&mut self, pred: &OccupancyGrid, gt: &OccupancyGrid, mask: &VisibilityMask) -> Result<()> {
        check(pred, gt, mask, self.classes())?;
        self.add_with(&pred.labels, &gt.labels, |v| mask.visible[v], |l| l);
        Ok(())
    }

    pub fn merge(&mut self, other: &Tally) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        for (a, b) in self.gt_count.iter_mut().zip(&other.gt_count) {
            *a += b;
        }
        self.correct += other.correct;
        self.total += other.total;
    }

    /// `None` for classes with zero union.
    pub fn iou(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

fn check(pred: &OccupancyGrid, gt: &OccupancyGrid, mask: &VisibilityMask, classes: usize) -> Result<()> {
    if pred.shape != gt.shape || mask.shape != gt.shape {
        return Err(Error::shape(format!(
            "prediction {:?}, labels {:?}, mask {:?}",
            pred.shape, gt.shape, mask.shape
        )));
    }
    if let Some(&bad) = pred.labels.iter().chain(&gt.labels).find(|&&l| l as usize >= classes) {
        return Err(Error::Range(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

pub fn iou_per_class(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    mask: &VisibilityMask,
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    let mut t = Tally::new(classes);
    t.add(pred, gt, mask)?;
    Ok(t.iou())
}

/// Mean IoU over present non-Free classes not in `excluded`.
pub fn miou(ious: &[Option<f64>], excluded: &[u8]) -> Option<f64> {
    let vals: Vec<f64> = ious
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(c, _)| !excluded.contains(&(*c as u8)))
        .filter_map(|(_, v)| *v)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Near (`|x| <= half_extent/2`) and far (`half_extent/2 < |x| <= half_extent`) masks.
pub fn range_masks(mask: &VisibilityMask, grid: &GridSpec) -> (VisibilityMask, VisibilityMask) {
    let half = grid.half_extent_x();
    let cx = grid.center().x;
    let mut near = mask.clone();
    let mut far = mask.clone();
    for idx in grid.indices() {
        let v = grid.linear(idx);
        let x = (voxel_to_world(idx, grid).expect("index within grid").x - cx).abs();
        near.visible[v] &= x <= half / 2.0;
        far.visible[v] &= x > half / 2.0 && x <= half;
    }
    (near, far)
}

/// One evaluated sample.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub pred: &'a OccupancyGrid,
    pub gt: &'a OccupancyGrid,
    pub mask: &'a VisibilityMask,
    pub ego_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    NearFar,
    Speed,
    Binary,
}

/// Scope shared by every metric of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScope {
    pub grid: GridSpec,
    pub classes: usize,
    pub excluded: Vec<u8>,
}

fn binary(l: u8) -> u8 {
    u8::from(l != FREE)
}

/// Median of `speeds`; samples strictly above it are "fast".
pub fn speed_threshold(speeds: &[f64]) -> f64 {
    let mut s = speeds.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => 0.0,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Two values for the split: (near, far) or (fast, slow) mIoU, or (Free, Non-Free) IoU.
pub fn split_eval(samples: &[EvalSample<'_>], split: Split, scope: &EvalScope) -> Result<(Option<f64>, Option<f64>)> {
    let mut a = Tally::new(scope.classes);
    let mut b = Tally::new(scope.classes);
    match split {
        Split::NearFar => {
            for s in samples {
                check(s.pred, s.gt, s.mask, scope.classes)?;
                let (near, far) = range_masks(s.mask, &scope.grid);
                a.add(s.pred, s.gt, &near)?;
                b.add(s.pred, s.gt, &far)?;
            }
        }
        Split::Speed => {
            let t = speed_threshold(&samples.iter().map(|s| s.ego_speed).collect::<Vec<_>>());
            for s in samples {
                let target = if s.ego_speed > t { &mut a } else { &mut b };
                target.add(s.pred, s.gt, s.mask)?;
            }
        }
        Split::Binary => {
            let mut t = Tally::new(2);
            for s in samples {
                check(s.pred, s.gt, s.mask, scope.classes)?;
                t.add_with(&s.pred.labels, &s.gt.labels, |v| s.mask.visible[v], binary);
            }
            let iou = t.iou();
            return Ok((iou[0], iou[1]));
        }
    }
    Ok((miou(&a.iou(), &scope.excluded), miou(&b.iou(), &scope.excluded)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub free_iou: Option<f64>,
    pub nonfree_iou: Option<f64>,
    pub near_miou: Option<f64>,
    pub far_miou: Option<f64>,
    pub fast_miou: Option<f64>,
    pub slow_miou: Option<f64>,
    pub accuracy: Option<f64>,
    pub speed_threshold: f64,
    pub samples: usize,
    /// Visible voxels per ground-truth class.
    pub voxel_counts: Vec<u64>,
}

pub fn evaluate(samples: &[EvalSample<'_>], scope: &EvalScope) -> Result<EvalReport> {
    let mut overall = Tally::new(scope.classes);
    for s in samples {
        overall.add(s.pred, s.gt, s.mask)?;
    }
    let per_class = overall.iou();
    let (free_iou, nonfree_iou) = split_eval(samples, Split::Binary, scope)?;
    let (near_miou, far_miou) = split_eval(samples, Split::NearFar, scope)?;
    let (fast_miou, slow_miou) = split_eval(samples, Split::Speed, scope)?;
    Ok(EvalReport {
        miou: miou(&per_class, &scope.excluded),
        per_class,
        free_iou,
        nonfree_iou,
        near_miou,
        far_miou,
        fast_miou,
        slow_miou,
        accuracy: overall.accuracy(),
        speed_threshold: speed_threshold(&samples.iter().map(|s| s.ego_speed).collect::<Vec<_>>()),
        samples: samples.len(),
        voxel_counts: overall.gt_count,
    })
}

impl EvalReport {
    /// `(section, name, value)` rows for tabular output.
    pub fn rows(&self, class_names: &[String]) -> Vec<(String, String, Option<f64>)> {
        let mut rows = Vec::new();
        for (c, iou) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
            rows.push(("class_iou".to_string(), name, *iou));
        }
        for (c, n) in self.voxel_counts.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
            rows.push(("voxel_count".to_string(), name, Some(*n as f64)));
        }
        let summary = [
            ("miou", self.miou),
            ("accuracy", self.accuracy),
            ("binary_free_iou", self.free_iou),
            ("binary_nonfree_iou", self.nonfree_iou),
            ("near_miou", self.near_miou),
            ("far_miou", self.far_miou),
            ("fast_miou", self.fast_miou),
            ("slow_miou", self.slow_miou),
            ("speed_threshold", Some(self.speed_threshold)),
            ("samples", Some(self.samples as f64)),
        ];
        for (name, v) in summary {
            rows.push(("summary".to_string(), name.to_string(), v));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_of(labels: Vec<u8>) -> OccupancyGrid {
        OccupancyGrid {
            shape: [1, 1, labels.len()],
            labels,
        }
    }

    #[test]
    fn iou_examples() {
        let gt = grid_of(vec![0, 1, 2, 2, 3]);
        let mask = VisibilityMask::all(gt.shape);
        let iou = iou_per_class(&gt, &gt, &mask, 4).unwrap();
        assert!(iou.iter().all(|v| *v == Some(1.0)));

        let a = grid_of(vec![1, 1, 0, 0]);
        let b = grid_of(vec![0, 0, 1, 1]);
        assert_eq!(iou_per_class(&a, &b, &VisibilityMask::all(a.shape), 2).unwrap()[1], Some(0.0));

        // pred {A, B}, gt {B, C}: the shared label has 1 intersection over 3 union.
        let pred = grid_of(vec![1, 1, 0]);
        let gt = grid_of(vec![0, 1, 1]);
        assert_eq!(iou_per_class(&pred, &gt, &VisibilityMask::all(pred.shape), 2).unwrap()[1], Some(1.0 / 3.0));
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[Some(1.0), Some(0.5)], &[]), Some(0.5));
        assert_eq!(miou(&[None, Some(0.2), Some(0.8)], &[]), Some(0.5));
        assert_eq!(miou(&[None, Some(0.2), Some(0.8), Some(0.0)], &[3]), Some(0.5));
        assert_eq!(miou(&[Some(1.0), None], &[]), None);
    }

    fn scope(grid: GridSpec) -> EvalScope {
        EvalScope {
            grid,
            classes: 4,
            excluded: vec![],
        }
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let grid = GridSpec::new(4, 8, 2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gts: Vec<OccupancyGrid> = (0..4)
            .map(|_| OccupancyGrid {
                shape: grid.spatial_shape(),
                labels: (0..grid.voxel_count()).map(|_| rng.gen_range(0..4)).collect(),
            })
            .collect();
        let mask = VisibilityMask::all(grid.spatial_shape());
        let samples: Vec<EvalSample> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| EvalSample {
                pred: g,
                gt: g,
                mask: &mask,
                ego_speed: i as f64,
            })
            .collect();
        let r = evaluate(&samples, &scope(grid)).unwrap();
        for v in [r.miou, r.near_miou, r.far_miou, r.fast_miou, r.slow_miou, r.nonfree_iou, r.free_iou] {
            assert_eq!(v, Some(1.0));
        }
        assert_eq!(r.speed_threshold, 1.5);
    }

    #[test]
    fn errors_only_far_leave_near_perfect() {
        let grid = GridSpec::new(2, 8, 1, 1.0).unwrap();
        let gt = OccupancyGrid {
            shape: grid.spatial_shape(),
            labels: vec![1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3, 1],
        };
        let mut pred = gt.clone();
        for idx in grid.indices() {
            let x = voxel_to_world(idx, &grid).unwrap().x.abs();
            if x > grid.half_extent_x() / 2.0 {
                let v = grid.linear(idx);
                pred.labels[v] = (pred.labels[v] % 3) + 1;
            }
        }
        let mask = VisibilityMask::all(grid.spatial_shape());
        let s = [EvalSample {
            pred: &pred,
            gt: &gt,
            mask: &mask,
            ego_speed: 1.0,
        }];
        let (near, far) = split_eval(&s, Split::NearFar, &scope(grid)).unwrap();
        assert_eq!(near, Some(1.0));
        assert!(far.unwrap() < 1.0);
    }

    #[test]
    fn binary_of_single_class_scene_is_not_below_class_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let gt = grid_of((0..30).map(|_| if rng.gen_bool(0.4) { 2 } else { 0 }).collect());
            let pred = grid_of((0..30).map(|_| if rng.gen_bool(0.4) { 2 } else { 0 }).collect());
            let mask = VisibilityMask::all(gt.shape);
            let g = GridSpec::new(1, 1, 30, 1.0).unwrap();
            let s = [EvalSample { pred: &pred, gt: &gt, mask: &mask, ego_speed: 0.0 }];
            let (_, nonfree) = split_eval(&s, Split::Binary, &scope(g)).unwrap();
            let fine = iou_per_class(&pred, &gt, &mask, 4).unwrap();
            let worst = fine.iter().skip(1).flatten().copied().fold(f64::INFINITY, f64::min);
            assert!(nonfree.unwrap() >= worst);
        }
    }

    proptest! {
        #[test]
        fn class_permutation_keeps_miou(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = grid_of((0..40).map(|_| rng.gen_range(0..4)).collect());
            let pred = grid_of((0..40).map(|_| rng.gen_range(0..4)).collect());
            let mask = VisibilityMask::all(gt.shape);
            let perm = [0u8, 3, 1, 2];
            let p = |g: &OccupancyGrid| grid_of(g.labels.iter().map(|&l| perm[l as usize]).collect());
            let a = miou(&iou_per_class(&pred, &gt, &mask, 4).unwrap(), &[]);
            let b = miou(&iou_per_class(&p(&pred), &p(&gt), &mask, 4).unwrap(), &[]);
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn masked_out_voxels_do_not_matter(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = grid_of((0..40).map(|_| rng.gen_range(0..4)).collect());
            let pred = grid_of((0..40).map(|_| rng.gen_range(0..4)).collect());
            let mask = VisibilityMask::new(gt.shape, (0..40).map(|_| rng.gen_bool(0.6)).collect()).unwrap();
            let mut other = pred.clone();
            for v in 0..40 {
                if !mask.visible[v] {
                    other.labels[v] = rng.gen_range(0..4);
                }
            }
            prop_assert_eq!(
                iou_per_class(&pred, &gt, &mask, 4).unwrap(),
                iou_per_class(&other, &gt, &mask, 4).unwrap()
            );
        }

        #[test]
        fn tallies_merge_like_one_pass(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| grid_of((0..20).map(|_| rng.gen_range(0..3)).collect());
            let (p1, g1, p2, g2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let mask = VisibilityMask::all(p1.shape);
            let mut a = Tally::new(3);
            a.add(&p1, &g1, &mask).unwrap();
            let mut b = Tally::new(3);
            b.add(&p2, &g2, &mask).unwrap();
            let mut ab = a.clone();
            ab.merge(&b);
            let mut ba = b.clone();
            ba.merge(&a);
            let mut seq = Tally::new(3);
            seq.add(&p1, &g1, &mask).unwrap();
            seq.add(&p2, &g2, &mask).unwrap();
            prop_assert_eq!(&ab, &seq);
            prop_assert_eq!(&ba, &seq);
        }
    }
}
