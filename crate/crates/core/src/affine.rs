//! Affine initialization by maximizing mutual information between the
//! subject image and a scalar template in atlas space.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{apply_affine, trilinear_sample, Boundary, GridSpec, Volume, EDGE_TOL};

pub const DEFAULT_BINS: usize = 32;
const SCALE_RANGE: (f64, f64) = (0.5, 2.0);
/// Improvements smaller than this do not count as progress.
const MI_EPS: f64 = 1e-9;

/// 12-parameter affine: translation (mm), rotation (rad, applied x then y then
/// z), per-axis scale and upper-triangular shear, all about a centre point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    pub shear: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
        }
    }

    fn to_array(self) -> [f64; 12] {
        let mut a = [0.0; 12];
        a[..3].copy_from_slice(&self.translation);
        a[3..6].copy_from_slice(&self.rotation);
        a[6..9].copy_from_slice(&self.scale);
        a[9..].copy_from_slice(&self.shear);
        a
    }

    fn from_array(a: &[f64; 12]) -> Self {
        Self {
            translation: [a[0], a[1], a[2]],
            rotation: [a[3], a[4], a[5]],
            scale: [a[6], a[7], a[8]],
            shear: [a[9], a[10], a[11]],
        }
    }

    /// `x ↦ c + t + R·H·S·(x - c)`.
    pub fn to_matrix(&self, center: [f64; 3]) -> Matrix4<f64> {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), self.rotation[2])
            * Rotation3::from_axis_angle(&Vector3::y_axis(), self.rotation[1])
            * Rotation3::from_axis_angle(&Vector3::x_axis(), self.rotation[0]);
        let h = Matrix3::new(1.0, self.shear[0], self.shear[1], 0.0, 1.0, self.shear[2], 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::from(self.scale));
        let lin = r.matrix() * h * s;
        let c = Vector3::from(center);
        let off = c + Vector3::from(self.translation) - lin * c;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&off);
        m
    }
}

/// Robust intensity scaling: the 1st and 99th percentiles map to 0 and 1.
#[derive(Debug, Clone, Copy)]
struct Scaling {
    lo: f64,
    hi: f64,
    bins: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Scaling {
    fn new(vol: &Volume, bins: usize) -> Result<Self> {
        if vol.channels() != 1 {
            return Err(Error::Data("registration needs single-channel images".into()));
        }
        let mut sorted: Vec<f64> = vol.data().to_vec();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite intensity in registration image".into()));
        }
        sorted.sort_unstable_by(f64::total_cmp);
        let (mut lo, mut hi) = (percentile(&sorted, 0.01), percentile(&sorted, 0.99));
        if hi <= lo {
            lo = sorted[0];
            hi = sorted[sorted.len() - 1];
        }
        if hi <= lo {
            return Err(Error::Data("registration image is constant".into()));
        }
        Ok(Self { lo, hi, bins })
    }

    fn bin(&self, v: f64) -> u16 {
        let b = self.bins as f64;
        (((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0) * b).min(b - 1.0) as u16
    }
}

/// Moving image intensities with their histogram scaling.
struct Binned {
    grid: GridSpec,
    values: Vec<f64>,
    scaling: Scaling,
    /// Bin of the image minimum, used for samples outside the grid when padding.
    background: u16,
}

impl Binned {
    fn new(vol: &Volume, bins: usize) -> Result<Self> {
        let scaling = Scaling::new(vol, bins)?;
        let min = vol.data().iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            grid: vol.grid().clone(),
            values: vol.data().to_vec(),
            background: scaling.bin(min),
            scaling,
        })
    }
}

/// Fixed-image sample points (world mm) with their intensity bins.
struct Samples {
    world: Vec<[f64; 3]>,
    bins: Vec<u16>,
}

impl Samples {
    /// One sample at every voxel centre.
    fn centers(vol: &Volume, bins: usize) -> Result<Self> {
        let s = Scaling::new(vol, bins)?;
        let g = vol.grid();
        Ok(Self {
            world: (0..g.num_voxels()).map(|i| g.voxel_to_world(g.coords(i).map(|x| x as f64))).collect(),
            bins: vol.data().iter().map(|&v| s.bin(v)).collect(),
        })
    }

    /// One sample per voxel, displaced by a fixed pseudo-random offset of up
    /// to half a voxel and valued by trilinear interpolation. Keeps the
    /// sample points off the moving grid's nodes, where interpolation blur
    /// would otherwise vary with the sub-voxel shift.
    fn jittered(vol: &Volume, bins: usize, seed: u64) -> Result<Self> {
        let s = Scaling::new(vol, bins)?;
        let g = vol.grid();
        let dims = g.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = Vec::with_capacity(g.num_voxels());
        let mut out = Vec::with_capacity(g.num_voxels());
        for i in 0..g.num_voxels() {
            let ijk = g.coords(i);
            let p: [f64; 3] = std::array::from_fn(|a| {
                let d: f64 = rng.random::<f64>() - 0.5;
                (ijk[a] as f64 + d).clamp(0.0, (dims[a] - 1) as f64)
            });
            let v = trilinear_sample(vol, p, Boundary::Clamp)?[0];
            world.push(g.voxel_to_world(p));
            out.push(s.bin(v));
        }
        Ok(Self { world, bins: out })
    }
}

/// Joint histogram of fixed bins against the bins of the moving image
/// trilinearly interpolated at the mapped sample points. With `pad`, samples
/// outside the moving grid count as background instead of being dropped.
fn joint_histogram(fixed: &Samples, moving: &Binned, t: &Matrix4<f64>, nb: usize, pad: bool) -> Result<Vec<f64>> {
    let to_moving = moving.grid.inverse_affine() * t;
    let dims = moving.grid.dims();
    let hi = dims.map(|d| (d - 1) as f64);
    let stride = [1, dims[0], dims[0] * dims[1]];
    let n = fixed.bins.len();
    let chunk = 4096;
    let parts: Vec<(Vec<f64>, usize)> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|k| {
            let mut h = vec![0.0; nb * nb];
            let mut inside = 0;
            for i in k * chunk..((k + 1) * chunk).min(n) {
                let row = fixed.bins[i] as usize * nb;
                let p = apply_affine(&to_moving, fixed.world[i]);
                if (0..3).any(|a| p[a] < -EDGE_TOL || p[a] > hi[a] + EDGE_TOL) {
                    if pad {
                        h[row + moving.background as usize] += 1.0;
                    }
                    continue;
                }
                inside += 1;
                let mut base = 0;
                let mut frac = [0.0; 3];
                let mut step = [0; 3];
                for a in 0..3 {
                    let x = p[a].clamp(0.0, hi[a]);
                    if dims[a] > 1 {
                        let i0 = (x.floor() as usize).min(dims[a] - 2);
                        base += i0 * stride[a];
                        frac[a] = x - i0 as f64;
                        step[a] = stride[a];
                    }
                }
                let mut v = 0.0;
                for corner in 0..8 {
                    let mut idx = base;
                    let mut w = 1.0;
                    for a in 0..3 {
                        if corner >> a & 1 == 1 {
                            idx += step[a];
                            w *= frac[a];
                        } else {
                            w *= 1.0 - frac[a];
                        }
                    }
                    if w > 0.0 {
                        v += w * moving.values[idx];
                    }
                }
                h[row + moving.scaling.bin(v) as usize] += 1.0;
            }
            (h, inside)
        })
        .collect();
    let mut h = vec![0.0; nb * nb];
    let mut inside = 0;
    for (p, c) in parts {
        h.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        inside += c;
    }
    if inside == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(h)
}

fn mi_from_histogram(h: &[f64], nb: usize) -> f64 {
    let total: f64 = h.iter().sum();
    let mut pf = vec![0.0; nb];
    let mut pm = vec![0.0; nb];
    for a in 0..nb {
        for b in 0..nb {
            let p = h[a * nb + b] / total;
            pf[a] += p;
            pm[b] += p;
        }
    }
    let mut mi = 0.0;
    for a in 0..nb {
        for b in 0..nb {
            let p = h[a * nb + b] / total;
            if p > 0.0 {
                mi += p * (p / (pf[a] * pm[b])).ln();
            }
        }
    }
    mi
}

/// Mutual information (nats) between `fixed` and `moving` resampled through
/// `t` (fixed world to moving world), over the fixed voxels that land inside
/// the moving grid.
pub fn mutual_information(fixed: &Volume, moving: &Volume, t: &Matrix4<f64>, bins: usize) -> Result<f64> {
    if bins < 8 || bins > u16::MAX as usize {
        return Err(Error::Config(format!("{bins} histogram bins; need at least 8")));
    }
    let f = Samples::centers(fixed, bins)?;
    let m = Binned::new(moving, bins)?;
    Ok(mi_from_histogram(&joint_histogram(&f, &m, t, bins, false)?, bins))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationOptions {
    pub bins: usize,
    /// Pyramid levels, each halving the resolution of the previous one.
    pub levels: usize,
    /// Initial search steps: translation (mm), rotation (rad), scale, shear.
    pub initial_steps: [f64; 4],
    /// The search at a level stops once every step is below this fraction of its initial value.
    pub min_step_fraction: f64,
    pub max_sweeps: usize,
    /// Seeds the sample-point jitter.
    pub seed: u64,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            levels: 3,
            initial_steps: [2.0, 2f64.to_radians(), 0.02, 0.02],
            min_step_fraction: 1.0 / 64.0,
            max_sweeps: 500,
            seed: 0,
        }
    }
}

/// Block-average downsampling by `factor` along every axis.
pub fn downsample(vol: &Volume, factor: usize) -> Result<Volume> {
    if factor <= 1 {
        return Ok(vol.clone());
    }
    let dims = vol.grid().dims();
    let nd = dims.map(|d| d.div_ceil(factor));
    let f = factor as f64;
    let mut affine = vol.grid().affine() * Matrix4::new_nonuniform_scaling(&Vector3::new(f, f, f));
    let shift = vol.grid().affine().fixed_view::<3, 3>(0, 0) * Vector3::repeat((f - 1.0) / 2.0);
    for a in 0..3 {
        affine[(a, 3)] += shift[a];
    }
    let grid = GridSpec::new(nd, affine)?;
    let c = vol.channels();
    let mut data = vec![0.0; grid.num_voxels() * c];
    let mut count = vec![0.0; grid.num_voxels()];
    for i in 0..vol.grid().num_voxels() {
        let ijk = vol.grid().coords(i);
        let j = grid.index(ijk.map(|x| x / factor));
        count[j] += 1.0;
        for (d, s) in data[j * c..(j + 1) * c].iter_mut().zip(vol.voxel(i)) {
            *d += s;
        }
    }
    for (j, n) in count.iter().enumerate() {
        data[j * c..(j + 1) * c].iter_mut().for_each(|d| *d /= n);
    }
    Volume::new(grid, c, data)
}

fn grid_center(g: &GridSpec) -> [f64; 3] {
    g.voxel_to_world(g.dims().map(|d| (d as f64 - 1.0) / 2.0))
}

/// Affine from subject world (`fixed`) to template world (`moving`) that
/// maximizes mutual information.
///
/// Coarse-to-fine over `levels` pyramid levels; at each level a coordinate
/// search tries `±step` on every parameter in turn, keeps improvements, and
/// halves the steps after a sweep without one. The search runs over the
/// rigid parameters first and then over all twelve. If nothing beats the identity
/// the identity is returned. Fixed samples that map outside `moving` count as
/// its background intensity, so the objective cannot gain by shrinking the overlap.
pub fn register_affine_mi(fixed: &Volume, moving: &Volume, opts: &RegistrationOptions) -> Result<Matrix4<f64>> {
    let (m, _) = register_affine_params(fixed, moving, opts)?;
    Ok(m)
}

/// As [`register_affine_mi`], also returning the parameters (about the
/// centre of `fixed`).
pub fn register_affine_params(
    fixed: &Volume,
    moving: &Volume,
    opts: &RegistrationOptions,
) -> Result<(Matrix4<f64>, AffineParams)> {
    if opts.levels == 0 {
        return Err(Error::Config("registration needs at least one level".into()));
    }
    let center = grid_center(fixed.grid());
    let nb = opts.bins;
    let mut x = AffineParams::identity().to_array();
    let base_steps: [f64; 12] = std::array::from_fn(|i| opts.initial_steps[i / 3]);
    let mut identity_mi = f64::NEG_INFINITY;
    let mut best = f64::NEG_INFINITY;
    for level in (0..opts.levels).rev() {
        let factor = 1usize << level;
        let f = Samples::jittered(&downsample(fixed, factor)?, nb, opts.seed)?;
        let m = Binned::new(&downsample(moving, factor)?, nb)?;
        let eval = |p: &[f64; 12]| -> f64 {
            if p[6..9].iter().any(|s| *s < SCALE_RANGE.0 || *s > SCALE_RANGE.1) {
                return f64::NEG_INFINITY;
            }
            let t = AffineParams::from_array(p).to_matrix(center);
            match joint_histogram(&f, &m, &t, nb, true) {
                Ok(h) => mi_from_histogram(&h, nb),
                Err(_) => f64::NEG_INFINITY,
            }
        };
        if level == 0 {
            identity_mi = eval(&AffineParams::identity().to_array());
        }
        let scale = factor as f64;
        let min_steps: [f64; 12] = std::array::from_fn(|i| base_steps[i] * opts.min_step_fraction);
        best = eval(&x);
        // Hooke-Jeeves pattern search: rigid parameters first, then all twelve
        for active in [6, 12] {
            let mut steps: [f64; 12] = std::array::from_fn(|i| base_steps[i] * if i < 3 { scale } else { 1.0 });
            let explore = |mut x: [f64; 12], mut fx: f64, steps: &[f64; 12]| {
                for i in 0..active {
                    for dir in [1.0, -1.0] {
                        let mut trial = x;
                        trial[i] += dir * steps[i];
                        let v = eval(&trial);
                        if v > fx + MI_EPS {
                            fx = v;
                            x = trial;
                            break;
                        }
                    }
                }
                (x, fx)
            };
            for _ in 0..opts.max_sweeps {
                let (next, f_next) = explore(x, best, &steps);
                if f_next > best + MI_EPS {
                    let mut base = x;
                    x = next;
                    best = f_next;
                    loop {
                        let pattern: [f64; 12] = std::array::from_fn(|i| 2.0 * x[i] - base[i]);
                        let (moved, f_moved) = explore(pattern, eval(&pattern), &steps);
                        if f_moved > best + MI_EPS {
                            base = x;
                            x = moved;
                            best = f_moved;
                        } else {
                            break;
                        }
                    }
                    continue;
                }
                if steps[..active].iter().zip(&min_steps).all(|(s, m)| s <= m) {
                    break;
                }
                steps.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
        log::debug!("registration level {level}: MI {best}");
    }
    if best <= identity_mi + MI_EPS {
        log::warn!("affine registration did not improve on the identity");
        return Ok((Matrix4::identity(), AffineParams::identity()));
    }
    let p = AffineParams::from_array(&x);
    Ok((p.to_matrix(center), p))
}
