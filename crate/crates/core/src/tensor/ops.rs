//! Forward kernels and their adjoints.
//!
//! Volumes are `[H, W, Z, C]` with channels contiguous. Parallel loops split
//! work by `H` rows and reduce partial sums in row order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ContinuousVoxelCoord;

use super::{DenseTensor, Scalar};

/// Coordinates this close outside the node range are clamped onto it.
const EDGE_TOL: f64 = 1e-9;

fn volume_dims<T: Scalar>(volume: &DenseTensor<T>) -> Result<[usize; 4]> {
    match *volume.shape() {
        [h, w, z, c] => Ok([h, w, z, c]),
        _ => Err(Error::shape(format!(
            "expected a rank-4 volume, got {:?}",
            volume.shape()
        ))),
    }
}

#[inline]
fn axis_weights(x: f64, cells: usize) -> Option<(usize, usize, f64)> {
    let max = (cells - 1) as f64;
    if !(x >= -EDGE_TOL && x <= max + EDGE_TOL) {
        return None;
    }
    let x = x.clamp(0.0, max);
    let lo = x.floor().min(max) as usize;
    let hi = (lo + 1).min(cells - 1);
    Some((lo, hi, x - lo as f64))
}

/// Trilinear sample of `volume` (`[H, W, Z, C]`) at `coord`, written into
/// `out` (length `C`). Returns `false` and writes zeros when the coordinate
/// lies outside the cell-center lattice.
pub fn trilinear_sample_into<T: Scalar>(
    data: &[T],
    dims: [usize; 4],
    coord: ContinuousVoxelCoord,
    out: &mut [T],
) -> bool {
    let [h, w, z, c] = dims;
    let axes = (
        axis_weights(coord.v, h),
        axis_weights(coord.u, w),
        axis_weights(coord.w, z),
    );
    let (Some((y0, y1, fy)), Some((x0, x1, fx)), Some((z0, z1, fz))) = axes else {
        out.iter_mut().for_each(|o| *o = T::zero());
        return false;
    };
    out.iter_mut().for_each(|o| *o = T::zero());
    for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            if wx == 0.0 {
                continue;
            }
            for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                if wz == 0.0 {
                    continue;
                }
                let weight = T::of(wy * wx * wz);
                let base = ((yy * w + xx) * z + zz) * c;
                for (o, &v) in out.iter_mut().zip(&data[base..base + c]) {
                    *o += weight * v;
                }
            }
        }
    }
    true
}

pub fn trilinear_sample<T: Scalar>(
    volume: &DenseTensor<T>,
    coord: ContinuousVoxelCoord,
) -> Result<(Vec<T>, bool)> {
    let dims = volume_dims(volume)?;
    let mut out = vec![T::zero(); dims[3]];
    let valid = trilinear_sample_into(volume.data(), dims, coord, &mut out);
    Ok((out, valid))
}

/// Shape bookkeeping shared by the conv kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn infer<T: Scalar>(
        input: &DenseTensor<T>,
        kernel: &DenseTensor<T>,
        bias: &DenseTensor<T>,
    ) -> Result<Self> {
        let [h, w, z, cin] = volume_dims(input)?;
        let (k, kcin, cout) = match *kernel.shape() {
            [a, b, c, ci, co] if a == b && b == c => (a, ci, co),
            _ => {
                return Err(Error::shape(format!(
                    "kernel must be [k, k, k, Cin, Cout], got {:?}",
                    kernel.shape()
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::shape(format!("kernel size must be odd, got {k}")));
        }
        if kcin != cin {
            return Err(Error::shape(format!(
                "input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "bias must be [{cout}], got {:?}",
                bias.shape()
            )));
        }
        Ok(Self {
            h,
            w,
            z,
            cin,
            cout,
            k,
        })
    }

    fn radius(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Kernel taps `(tap index, dy, dx, dz)`.
    fn taps(&self) -> Vec<(usize, isize, isize, isize)> {
        let r = self.radius();
        let mut taps = Vec::with_capacity(self.k * self.k * self.k);
        for dy in -r..=r {
            for dx in -r..=r {
                for dz in -r..=r {
                    let t = (((dy + r) as usize * self.k) + (dx + r) as usize) * self.k
                        + (dz + r) as usize;
                    taps.push((t, dy, dx, dz));
                }
            }
        }
        taps
    }

    #[inline]
    fn offset(&self, y: usize, dy: isize, x: usize, dx: isize, zz: usize, dz: isize) -> Option<usize> {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        let nz = zz as isize + dz;
        if ny < 0
            || nx < 0
            || nz < 0
            || ny >= self.h as isize
            || nx >= self.w as isize
            || nz >= self.z as isize
        {
            return None;
        }
        Some((ny as usize * self.w + nx as usize) * self.z + nz as usize)
    }
}

/// Stride-1, zero-padded 3D cross-correlation.
pub fn conv3d<T: Scalar>(
    input: &DenseTensor<T>,
    kernel: &DenseTensor<T>,
    bias: &DenseTensor<T>,
) -> Result<DenseTensor<T>> {
    let d = ConvDims::infer(input, kernel, bias)?;
    let taps = d.taps();
    let (inp, ker, b) = (input.data(), kernel.data(), bias.data());
    let row = d.w * d.z * d.cout;
    let mut out = vec![T::zero(); d.h * row];
    out.par_chunks_mut(row).enumerate().for_each(|(y, out_row)| {
        for x in 0..d.w {
            for zz in 0..d.z {
                let acc = &mut out_row[(x * d.z + zz) * d.cout..][..d.cout];
                acc.copy_from_slice(b);
                for &(t, dy, dx, dz) in &taps {
                    let Some(n) = d.offset(y, dy, x, dx, zz, dz) else {
                        continue;
                    };
                    let src = &inp[n * d.cin..][..d.cin];
                    let kt = &ker[t * d.cin * d.cout..][..d.cin * d.cout];
                    for (ci, &a) in src.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        for (o, &kv) in acc.iter_mut().zip(&kt[ci * d.cout..][..d.cout]) {
                            *o += a * kv;
                        }
                    }
                }
            }
        }
    });
    let out = DenseTensor::new(vec![d.h, d.w, d.z, d.cout], out)?;
    out.check_finite("conv3d")?;
    Ok(out)
}

/// Gradients of [`conv3d`] with respect to kernel and bias, and to the
/// input when `with_input` is set.
pub struct Conv3dGrads<T> {
    pub input: Option<DenseTensor<T>>,
    pub kernel: DenseTensor<T>,
    pub bias: DenseTensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    input: &DenseTensor<T>,
    kernel: &DenseTensor<T>,
    bias: &DenseTensor<T>,
    grad_out: &DenseTensor<T>,
    with_input: bool,
) -> Result<Conv3dGrads<T>> {
    let d = ConvDims::infer(input, kernel, bias)?;
    if grad_out.shape() != [d.h, d.w, d.z, d.cout] {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match conv output [{}, {}, {}, {}]",
            grad_out.shape(),
            d.h,
            d.w,
            d.z,
            d.cout
        )));
    }
    let taps = d.taps();
    let (inp, ker, g) = (input.data(), kernel.data(), grad_out.data());
    let ksize = taps.len() * d.cin * d.cout;

    // Per-row partial kernel/bias gradients, reduced in row order.
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..d.h)
        .into_par_iter()
        .map(|y| {
            let mut dk = vec![T::zero(); ksize];
            let mut db = vec![T::zero(); d.cout];
            for x in 0..d.w {
                for zz in 0..d.z {
                    let gv = &g[((y * d.w + x) * d.z + zz) * d.cout..][..d.cout];
                    for (o, &gg) in db.iter_mut().zip(gv) {
                        *o += gg;
                    }
                    for &(t, dy, dx, dz) in &taps {
                        let Some(n) = d.offset(y, dy, x, dx, zz, dz) else {
                            continue;
                        };
                        let src = &inp[n * d.cin..][..d.cin];
                        let dkt = &mut dk[t * d.cin * d.cout..][..d.cin * d.cout];
                        for (ci, &a) in src.iter().enumerate() {
                            if a == T::zero() {
                                continue;
                            }
                            for (o, &gg) in dkt[ci * d.cout..][..d.cout].iter_mut().zip(gv) {
                                *o += a * gg;
                            }
                        }
                    }
                }
            }
            (dk, db)
        })
        .collect();
    let mut dk = vec![T::zero(); ksize];
    let mut db = vec![T::zero(); d.cout];
    for (pk, pb) in &partials {
        for (o, &v) in dk.iter_mut().zip(pk) {
            *o += v;
        }
        for (o, &v) in db.iter_mut().zip(pb) {
            *o += v;
        }
    }

    let dinput = if with_input {
        let row = d.w * d.z * d.cin;
        let mut di = vec![T::zero(); d.h * row];
        di.par_chunks_mut(row).enumerate().for_each(|(y, di_row)| {
            for x in 0..d.w {
                for zz in 0..d.z {
                    let acc = &mut di_row[(x * d.z + zz) * d.cin..][..d.cin];
                    // Input voxel u feeds output voxel u - delta through tap delta.
                    for &(t, dy, dx, dz) in &taps {
                        let Some(n) = d.offset(y, -dy, x, -dx, zz, -dz) else {
                            continue;
                        };
                        let gv = &g[n * d.cout..][..d.cout];
                        let kt = &ker[t * d.cin * d.cout..][..d.cin * d.cout];
                        for (ci, o) in acc.iter_mut().enumerate() {
                            let mut s = T::zero();
                            for (&kv, &gg) in kt[ci * d.cout..][..d.cout].iter().zip(gv) {
                                s += kv * gg;
                            }
                            *o += s;
                        }
                    }
                }
            }
        });
        Some(DenseTensor::new(vec![d.h, d.w, d.z, d.cin], di)?)
    } else {
        None
    };

    Ok(Conv3dGrads {
        input: dinput,
        kernel: DenseTensor::new(kernel.shape().to_vec(), dk)?,
        bias: DenseTensor::new(vec![d.cout], db)?,
    })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Branches keep exp() from overflowing for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &DenseTensor<T>) -> DenseTensor<T> {
    x.map(sigmoid_scalar)
}

pub fn relu<T: Scalar>(x: &DenseTensor<T>) -> DenseTensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Voxel count of `a` when `w` is a per-voxel weight for it: `w` is either
/// `a`'s shape with the channel axis dropped, or with the channel axis set to 1.
fn weight_layout<T: Scalar>(a: &DenseTensor<T>, w: &DenseTensor<T>) -> Result<(usize, usize)> {
    let (lead, c) = a.shape().split_at(a.rank().saturating_sub(1));
    let ok = w.shape() == lead || (w.rank() == a.rank() && &w.shape()[..lead.len()] == lead && w.channels() == 1);
    if a.rank() == 0 || !ok {
        return Err(Error::shape(format!(
            "weight {:?} does not broadcast over {:?}",
            w.shape(),
            a.shape()
        )));
    }
    Ok((lead.iter().product(), c[0]))
}

/// Multiplies every channel of each voxel of `a` by that voxel's weight.
pub fn elementwise_mul<T: Scalar>(a: &DenseTensor<T>, w: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let (voxels, c) = weight_layout(a, w)?;
    let mut out = a.clone();
    for v in 0..voxels {
        let wv = w.data()[v];
        for o in &mut out.data_mut()[v * c..(v + 1) * c] {
            *o *= wv;
        }
    }
    out.check_finite("elementwise_mul")?;
    Ok(out)
}

/// Adjoint of [`elementwise_mul`]: `(d a, d w)` with `d w` shaped like `w`.
pub fn elementwise_mul_backward<T: Scalar>(
    a: &DenseTensor<T>,
    w: &DenseTensor<T>,
    grad_out: &DenseTensor<T>,
) -> Result<(DenseTensor<T>, DenseTensor<T>)> {
    let (voxels, c) = weight_layout(a, w)?;
    let mut da = grad_out.clone();
    let mut dw = DenseTensor::zeros(w.shape().to_vec());
    for v in 0..voxels {
        let wv = w.data()[v];
        let mut s = T::zero();
        for ch in 0..c {
            let idx = v * c + ch;
            s += grad_out.data()[idx] * a.data()[idx];
            da.data_mut()[idx] = grad_out.data()[idx] * wv;
        }
        dw.data_mut()[v] = s;
    }
    Ok((da, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseTensor<f64> {
        DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn linear_field(h: usize, w: usize, z: usize) -> DenseTensor<f64> {
        let mut t = DenseTensor::zeros(vec![h, w, z, 1]);
        for j in 0..h {
            for i in 0..w {
                for k in 0..z {
                    t.data_mut()[(j * w + i) * z + k] = 2.0 * i as f64 + 3.0 * j as f64 + 5.0 * k as f64;
                }
            }
        }
        t
    }

    #[test]
    fn trilinear_at_nodes_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vol = random_tensor(&mut rng, vec![3, 4, 5, 2]);
        let (f, valid) = trilinear_sample(&vol, ContinuousVoxelCoord::new(2.0, 1.0, 3.0)).unwrap();
        assert!(valid);
        let base = ((4 + 2) * 5 + 3) * 2;
        assert_eq!(f, vol.data()[base..base + 2].to_vec());
    }

    #[test]
    fn trilinear_reproduces_linear_field() {
        let vol = linear_field(4, 4, 3);
        let (f, valid) = trilinear_sample(&vol, ContinuousVoxelCoord::new(1.5, 2.25, 0.5)).unwrap();
        assert!(valid);
        assert_abs_diff_eq!(f[0], 12.25, epsilon = 1e-5);
    }

    #[test]
    fn trilinear_out_of_bounds_is_zero_and_invalid() {
        let vol = linear_field(4, 4, 3);
        let (f, valid) = trilinear_sample(&vol, ContinuousVoxelCoord::new(-0.5, 0.0, 0.0)).unwrap();
        assert!(!valid);
        assert_eq!(f, vec![0.0]);
        let (_, valid) = trilinear_sample(&vol, ContinuousVoxelCoord::new(3.0, 3.0, 2.0)).unwrap();
        assert!(valid);
        let (_, valid) = trilinear_sample(&vol, ContinuousVoxelCoord::new(1.0, 1.0, 2.01)).unwrap();
        assert!(!valid);
        let (_, valid) = trilinear_sample(&vol, ContinuousVoxelCoord::new(f64::NAN, 1.0, 1.0)).unwrap();
        assert!(!valid);
    }

    #[test]
    fn trilinear_affine_fields_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w, z) = (6, 7, 5);
        let (a, b, c, d) = (0.3, -1.7, 2.2, 0.9);
        let mut vol = DenseTensor::<f64>::zeros(vec![h, w, z, 1]);
        for j in 0..h {
            for i in 0..w {
                for k in 0..z {
                    vol.data_mut()[(j * w + i) * z + k] = a * i as f64 + b * j as f64 + c * k as f64 + d;
                }
            }
        }
        for _ in 0..1000 {
            let u = rng.gen_range(0.0..(w - 1) as f64);
            let v = rng.gen_range(0.0..(h - 1) as f64);
            let ww = rng.gen_range(0.0..(z - 1) as f64);
            let (f, valid) = trilinear_sample(&vol, ContinuousVoxelCoord::new(u, v, ww)).unwrap();
            assert!(valid);
            assert_abs_diff_eq!(f[0], a * u + b * v + c * ww + d, epsilon = 1e-5);
        }
    }

    /// Sextuple-nested reference convolution.
    fn naive_conv(input: &DenseTensor<f64>, kernel: &DenseTensor<f64>, bias: &DenseTensor<f64>) -> DenseTensor<f64> {
        let [h, w, z, cin] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
        let k = kernel.shape()[0];
        let cout = kernel.shape()[4];
        let r = (k / 2) as isize;
        let mut out = DenseTensor::zeros(vec![h, w, z, cout]);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for zz in 0..z as isize {
                    for co in 0..cout {
                        let mut s = bias.data()[co];
                        for a in 0..k as isize {
                            for b in 0..k as isize {
                                for c in 0..k as isize {
                                    let (ny, nx, nz) = (y + a - r, x + b - r, zz + c - r);
                                    if ny < 0 || nx < 0 || nz < 0 || ny >= h as isize || nx >= w as isize || nz >= z as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let iv = input.data()[((ny as usize * w + nx as usize) * z + nz as usize) * cin + ci];
                                        let kv = kernel.data()[((((a as usize * k) + b as usize) * k + c as usize) * cin + ci) * cout + co];
                                        s += iv * kv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((y as usize * w + x as usize) * z + zz as usize) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, vec![3, 4, 2, 3]);
        let mut kernel = DenseTensor::zeros(vec![1, 1, 1, 3, 3]);
        for c in 0..3 {
            kernel.data_mut()[c * 3 + c] = 1.0;
        }
        let out = conv3d(&input, &kernel, &DenseTensor::zeros(vec![3])).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_impulse_response() {
        let mut input = DenseTensor::<f64>::zeros(vec![5, 5, 5, 1]);
        input.data_mut()[(2 * 5 + 2) * 5 + 2] = 1.0;
        let kernel = DenseTensor::filled(vec![3, 3, 3, 1, 1], 1.0);
        let out = conv3d(&input, &kernel, &DenseTensor::zeros(vec![1])).unwrap();
        for j in 0..5usize {
            for i in 0..5usize {
                for k in 0..5usize {
                    let inside = j.abs_diff(2) <= 1 && i.abs_diff(2) <= 1 && k.abs_diff(2) <= 1;
                    assert_eq!(out.data()[(j * 5 + i) * 5 + k], if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_tensor(&mut rng, vec![5, 5, 4, 2]);
        let kernel = random_tensor(&mut rng, vec![3, 3, 3, 2, 3]);
        let bias = random_tensor(&mut rng, vec![3]);
        let fast = conv3d(&input, &kernel, &bias).unwrap();
        assert!(fast.max_abs_diff(&naive_conv(&input, &kernel, &bias)) < 1e-5);
    }

    #[test]
    fn conv_shape_errors() {
        let input = DenseTensor::<f64>::zeros(vec![2, 2, 2, 3]);
        let bad_cin = DenseTensor::zeros(vec![3, 3, 3, 2, 1]);
        assert!(matches!(conv3d(&input, &bad_cin, &DenseTensor::zeros(vec![1])), Err(Error::Shape(_))));
        let even = DenseTensor::zeros(vec![2, 2, 2, 3, 1]);
        assert!(conv3d(&input, &even, &DenseTensor::zeros(vec![1])).is_err());
        let ok = DenseTensor::zeros(vec![1, 1, 1, 3, 2]);
        assert!(conv3d(&input, &ok, &DenseTensor::zeros(vec![3])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn conv_matches_naive_on_random_shapes(h in 1usize..=7, w in 1usize..=7, z in 1usize..=5,
                                               cin in 1usize..=3, cout in 1usize..=3,
                                               k in prop::sample::select(vec![1usize, 3, 5]),
                                               seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, vec![h, w, z, cin]);
            let kernel = random_tensor(&mut rng, vec![k, k, k, cin, cout]);
            let bias = random_tensor(&mut rng, vec![cout]);
            let fast = conv3d(&input, &kernel, &bias).unwrap();
            prop_assert!(fast.max_abs_diff(&naive_conv(&input, &kernel, &bias)) < 1e-5);
        }

        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in -30.0f64..30.0) {
            let s = sigmoid_scalar(x);
            prop_assert!(s > 0.0 && s < 1.0);
            prop_assert!((s + sigmoid_scalar(-x) - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!(sigmoid_scalar(-50.0f64) < 1e-20);
        assert!(sigmoid_scalar(50.0f64) > 1.0 - 1e-15);
        assert_abs_diff_eq!(sigmoid_scalar(3.0f64.ln()), 0.75, epsilon = 1e-7);
        let t = sigmoid(&DenseTensor::new(vec![2], vec![1.3f32, -1.3]).unwrap());
        assert_abs_diff_eq!(t.data()[0] + t.data()[1], 1.0, epsilon = 1e-7);
        assert!(sigmoid_scalar(-200.0f32) >= 0.0);
    }

    #[test]
    fn elementwise_mul_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&mut rng, vec![2, 3, 2, 4]);
        let ones = DenseTensor::filled(vec![2, 3, 2], 1.0);
        assert_eq!(elementwise_mul(&a, &ones).unwrap(), a);
        let zeros = DenseTensor::zeros(vec![2, 3, 2, 1]);
        assert!(elementwise_mul(&a, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let w = random_tensor(&mut rng, vec![2, 3, 2]);
        let out = elementwise_mul(&a, &w).unwrap();
        for v in 0..12 {
            for c in 0..4 {
                assert_abs_diff_eq!(out.data()[v * 4 + c], a.data()[v * 4 + c] * w.data()[v], epsilon = 1e-6);
            }
        }
        assert!(elementwise_mul(&a, &DenseTensor::zeros(vec![2, 3])).is_err());
        assert!(elementwise_mul(&a, &DenseTensor::zeros(vec![2, 3, 2, 2])).is_err());
    }
}
