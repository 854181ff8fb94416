//! Deformable probabilistic atlas.
//!
//! The atlas is a stack of per-class probability maps in its own voxel grid.
//! Subject voxels are mapped into it by an initial affine followed by a
//! displacement field interpolated trilinearly from a coarse control grid.
//! Displacements are in millimetres in the atlas world frame.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::par::{add_into, reduce, sum_unordered, Reduction};
use crate::volume::{apply_affine, trilinear_stencil, Boundary, GridSpec, Stencil, Volume, EDGE_TOL};

/// Probabilities are floored at this value before renormalization.
pub const PRIOR_FLOOR: f64 = 1e-16;
pub const DEFAULT_STIFFNESS: f64 = 0.05;
/// Largest number of classes an atlas may hold.
pub const MAX_CLASSES: usize = 64;
/// Default control-point spacing in working-grid voxels.
pub const DEFAULT_CONTROL_SPACING: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbAtlas {
    probs: Volume,
    names: Vec<String>,
    background: Vec<bool>,
}

impl ProbAtlas {
    pub fn new(probs: Volume, names: Vec<String>) -> Result<Self> {
        let c = probs.channels();
        if c > MAX_CLASSES {
            return Err(Error::Data(format!("atlas has {c} classes, at most {MAX_CLASSES} are supported")));
        }
        if names.len() != c {
            return Err(Error::Data(format!("{} class names for {c} atlas channels", names.len())));
        }
        for (i, v) in probs.data().chunks(c).enumerate() {
            if v.iter().any(|&p| p < 0.0) {
                return Err(Error::Data(format!("negative atlas probability at voxel {i}")));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Data(format!("atlas probabilities sum to {s} at voxel {i}")));
            }
        }
        Ok(Self {
            probs,
            names,
            background: vec![false; c],
        })
    }

    /// Builds an atlas after rescaling every voxel to unit sum (for maps stored at reduced precision).
    pub fn normalized(mut probs: Volume, names: Vec<String>) -> Result<Self> {
        let c = probs.channels();
        for v in probs.data_mut().chunks_mut(c) {
            v.iter_mut().for_each(|p| *p = p.max(0.0));
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                v.iter_mut().for_each(|p| *p /= s);
            }
        }
        Self::new(probs, names)
    }

    pub fn with_background(mut self, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != self.num_classes() {
            return Err(Error::Data("background flags do not match class count".into()));
        }
        self.background = flags;
        Ok(self)
    }

    pub fn grid(&self) -> &GridSpec {
        self.probs.grid()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.channels()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn background(&self) -> &[bool] {
        &self.background
    }

    pub fn probs(&self) -> &Volume {
        &self.probs
    }

    /// Summed probability of the non-background classes (all ones when no class is background).
    pub fn foreground_mass(&self) -> Volume {
        let c = self.num_classes();
        let data = self
            .probs
            .data()
            .chunks(c)
            .map(|v| {
                v.iter()
                    .zip(&self.background)
                    .filter(|(_, &bg)| !bg)
                    .map(|(p, _)| p)
                    .sum::<f64>()
            })
            .collect();
        Volume::new(self.grid().clone(), 1, data).expect("consistent dims")
    }

    /// Scalar image `Σ_c t_c A_c` used as the moving image for affine registration.
    pub fn soft_template(&self, intensities: &[f64]) -> Result<Volume> {
        let c = self.num_classes();
        if intensities.len() != c {
            return Err(Error::Config(format!(
                "{} template intensities for {c} classes",
                intensities.len()
            )));
        }
        let data = self
            .probs
            .data()
            .chunks(c)
            .map(|v| v.iter().zip(intensities).map(|(p, t)| p * t).sum())
            .collect();
        Volume::new(self.grid().clone(), 1, data)
    }

    /// Reorders classes so that new class `k` is old class `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let c = self.num_classes();
        let data = self
            .probs
            .data()
            .chunks(c)
            .flat_map(|v| perm.iter().map(move |&k| v[k]))
            .collect();
        Ok(Self {
            probs: Volume::new(self.grid().clone(), c, data)?,
            names: perm.iter().map(|&k| self.names[k].clone()).collect(),
            background: perm.iter().map(|&k| self.background[k]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    control: GridSpec,
    displacements: Vec<Vector3<f64>>,
    stiffness: f64,
}

impl DeformationField {
    pub fn zeros(control: GridSpec, stiffness: f64) -> Result<Self> {
        if !(stiffness > 0.0 && stiffness.is_finite()) {
            return Err(Error::Config(format!("stiffness must be positive, got {stiffness}")));
        }
        let n = control.num_voxels();
        Ok(Self {
            control,
            displacements: vec![Vector3::zeros(); n],
            stiffness,
        })
    }

    /// Zero field whose control points sit every `spacing` voxels of `working`
    /// and cover it entirely.
    pub fn over_grid(working: &GridSpec, spacing: usize, stiffness: f64) -> Result<Self> {
        if spacing < 2 {
            return Err(Error::Config(format!(
                "control spacing must be at least 2 working voxels, got {spacing}"
            )));
        }
        let dims = working.dims().map(|n| (n - 1).div_ceil(spacing) + 1);
        let mut scale = Matrix4::identity();
        for a in 0..3 {
            scale[(a, a)] = spacing as f64;
        }
        let control = GridSpec::new(dims, working.affine() * scale)?;
        Self::zeros(control, stiffness)
    }

    pub fn control_grid(&self) -> &GridSpec {
        &self.control
    }

    pub fn displacements(&self) -> &[Vector3<f64>] {
        &self.displacements
    }

    pub fn displacements_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.displacements
    }

    pub fn stiffness(&self) -> f64 {
        self.stiffness
    }

    pub fn num_params(&self) -> usize {
        3 * self.displacements.len()
    }

    /// Flattened displacements, `[k * 3 + axis]`.
    pub fn params(&self) -> Vec<f64> {
        self.displacements.iter().flat_map(|d| [d.x, d.y, d.z]).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        for (d, c) in self.displacements.iter_mut().zip(p.chunks_exact(3)) {
            *d = Vector3::new(c[0], c[1], c[2]);
        }
    }

    fn stencil_at_world(&self, world: [f64; 3]) -> Stencil {
        let p = self.control.world_to_voxel(world);
        trilinear_stencil(p, self.control.dims(), Boundary::Clamp)
            .expect("clamped stencil")
            .expect("clamp never zero-fills")
    }

    fn interpolate(&self, st: &Stencil) -> Vector3<f64> {
        st.indices
            .iter()
            .zip(&st.weights)
            .fold(Vector3::zeros(), |acc, (&k, &w)| acc + self.displacements[k] * w)
    }

    /// Displacement (mm) at a subject world position.
    pub fn displacement_at_world(&self, world: [f64; 3]) -> Vector3<f64> {
        self.interpolate(&self.stencil_at_world(world))
    }
}

/// Maps subject voxel `voxel` of `working` into continuous atlas voxel
/// coordinates: initial affine, then the interpolated displacement.
pub fn deform_point(
    field: &DeformationField,
    working: &GridSpec,
    voxel: [usize; 3],
    affine_init: &Matrix4<f64>,
    atlas_grid: &GridSpec,
) -> [f64; 3] {
    let world = working.voxel_to_world(voxel.map(|x| x as f64));
    let d = field.displacement_at_world(world);
    let a = apply_affine(affine_init, world);
    atlas_grid.world_to_voxel([a[0] + d.x, a[1] + d.y, a[2] + d.z])
}

/// Samples the atlas at a continuous coordinate, floors at [`PRIOR_FLOOR`] and
/// renormalizes. When `jac` is given it receives `∂A_c/∂y` for each class.
///
/// Coordinates are clamped to the grid; outside it (beyond the stencil edge
/// tolerance) the derivative along that axis is zero.
fn sample_prior(atlas: &ProbAtlas, y: [f64; 3], out: &mut [f64], jac: Option<&mut [[f64; 3]]>) {
    let c = atlas.num_classes();
    let dims = atlas.grid().dims();
    let mut base = 0usize;
    let mut step = [0usize; 3];
    let mut frac = [0.0f64; 3];
    let mut dsign = [0.0f64; 3];
    let mut stride = 1;
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let x = y[a];
        let live = (-EDGE_TOL..=hi + EDGE_TOL).contains(&x);
        let x = x.clamp(0.0, hi);
        if dims[a] > 1 {
            let i0 = (x.floor() as usize).min(dims[a] - 2);
            base += i0 * stride;
            frac[a] = x - i0 as f64;
            step[a] = stride;
            if live {
                dsign[a] = 1.0;
            }
        }
        stride *= dims[a];
    }
    let data = atlas.probs().data();
    let want_jac = jac.is_some();
    let mut da = [[0.0f64; 3]; MAX_CLASSES];
    out.iter_mut().for_each(|o| *o = 0.0);
    for corner in 0..8 {
        let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut idx = base;
        let mut f = [0.0; 3];
        let mut df = [0.0; 3];
        for a in 0..3 {
            if step[a] == 0 {
                f[a] = if bits[a] == 0 { 1.0 } else { 0.0 };
            } else if bits[a] == 1 {
                idx += step[a];
                f[a] = frac[a];
                df[a] = dsign[a];
            } else {
                f[a] = 1.0 - frac[a];
                df[a] = -dsign[a];
            }
        }
        let w = f[0] * f[1] * f[2];
        let dw = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
        if w == 0.0 && (!want_jac || dw == [0.0; 3]) {
            continue;
        }
        let p = &data[idx * c..(idx + 1) * c];
        for j in 0..c {
            out[j] += w * p[j];
            if want_jac {
                for a in 0..3 {
                    da[j][a] += dw[a] * p[j];
                }
            }
        }
    }
    let mut active = [true; MAX_CLASSES];
    for (k, a) in out.iter_mut().enumerate() {
        if *a <= PRIOR_FLOOR {
            *a = PRIOR_FLOOR;
            active[k] = false;
        }
    }
    let mut tmp = [0.0; MAX_CLASSES];
    tmp[..c].copy_from_slice(out);
    let inv = 1.0 / sum_unordered(&mut tmp[..c]);
    out.iter_mut().for_each(|a| *a *= inv);
    if let Some(jac) = jac {
        // dA_c/dy = Σ_j m_j (δ_cj - A_c) / S · da_j/dy
        let mut total = [0.0; 3];
        for j in 0..c {
            if !active[j] {
                da[j] = [0.0; 3];
            }
        }
        for (a, t) in total.iter_mut().enumerate() {
            for j in 0..c {
                tmp[j] = da[j][a];
            }
            *t = sum_unordered(&mut tmp[..c]);
        }
        for k in 0..c {
            for a in 0..3 {
                jac[k][a] = (da[k][a] - out[k] * total[a]) * inv;
            }
        }
    }
}

/// Probability vector `A_v(θ)` at one subject voxel.
pub fn atlas_prior(
    field: &DeformationField,
    atlas: &ProbAtlas,
    working: &GridSpec,
    voxel: [usize; 3],
    affine_init: &Matrix4<f64>,
) -> Vec<f64> {
    let y = deform_point(field, working, voxel, affine_init, atlas.grid());
    let mut out = vec![0.0; atlas.num_classes()];
    sample_prior(atlas, y, &mut out, None);
    out
}

/// Discrete bending energy of the control displacements and its gradient
/// (flattened as `[k * 3 + axis]`).
///
/// Approximates `∫ Σ_ab (∂²u/∂x_a∂x_b)²` with second differences scaled by the
/// control spacing and multiplied by the control cell volume.
pub fn bending_energy(field: &DeformationField) -> (f64, Vec<f64>) {
    let grid = field.control_grid();
    let dims = grid.dims();
    let h = grid.voxel_sizes();
    let cell = h[0] * h[1] * h[2];
    let d = field.displacements();
    let mut grad = vec![Vector3::<f64>::zeros(); d.len()];
    let mut value = 0.0;
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let unit = [[1usize, 0, 0], [0, 1, 0], [0, 0, 1]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [i, j, k];
                // pure second differences
                for a in 0..3 {
                    if p[a] == 0 || p[a] + 1 >= dims[a] {
                        continue;
                    }
                    let e = unit[a];
                    let lo = idx(p[0] - e[0], p[1] - e[1], p[2] - e[2]);
                    let mid = idx(i, j, k);
                    let hi = idx(p[0] + e[0], p[1] + e[1], p[2] + e[2]);
                    let s = 1.0 / (h[a] * h[a]);
                    let q = (d[lo] - d[mid] * 2.0 + d[hi]) * s;
                    value += cell * q.norm_squared();
                    let gq = q * (2.0 * cell * s);
                    grad[lo] += gq;
                    grad[mid] -= gq * 2.0;
                    grad[hi] += gq;
                }
                // mixed differences, counted twice
                for a in 0..3 {
                    for b in a + 1..3 {
                        if p[a] + 1 >= dims[a] || p[b] + 1 >= dims[b] {
                            continue;
                        }
                        let (ea, eb) = (unit[a], unit[b]);
                        let i00 = idx(i, j, k);
                        let i10 = idx(i + ea[0], j + ea[1], k + ea[2]);
                        let i01 = idx(i + eb[0], j + eb[1], k + eb[2]);
                        let i11 = idx(i + ea[0] + eb[0], j + ea[1] + eb[1], k + ea[2] + eb[2]);
                        let s = 1.0 / (h[a] * h[b]);
                        let q = (d[i11] - d[i10] - d[i01] + d[i00]) * s;
                        value += 2.0 * cell * q.norm_squared();
                        let gq = q * (4.0 * cell * s);
                        grad[i11] += gq;
                        grad[i10] -= gq;
                        grad[i01] -= gq;
                        grad[i00] += gq;
                    }
                }
            }
        }
    }
    (value, grad.iter().flat_map(|g| [g.x, g.y, g.z]).collect())
}

/// Per-axis linear interpolation weights from one working axis onto the
/// control grid. Valid only when the two grids are axis-aligned.
#[derive(Debug, Clone)]
struct AxisTable {
    /// `(offset, step, w0, w1)` per working index; offsets include the stride.
    entries: Vec<(usize, usize, f64, f64)>,
}

fn axis_tables(working: &GridSpec, control: &GridSpec) -> Option<[AxisTable; 3]> {
    let m = control.inverse_affine() * working.affine();
    for r in 0..3 {
        for col in 0..3 {
            if r != col && m[(r, col)].abs() > 1e-12 * m[(r, r)].abs().max(1.0) {
                return None;
            }
        }
    }
    let wd = working.dims();
    let cd = control.dims();
    let mut stride = 1;
    let tables = std::array::from_fn(|a| {
        let hi = (cd[a] - 1) as f64;
        let entries = (0..wd[a])
            .map(|i| {
                let x = (m[(a, a)] * i as f64 + m[(a, 3)]).clamp(0.0, hi);
                if cd[a] == 1 {
                    (0, 0, 1.0, 0.0)
                } else {
                    let i0 = (x.floor() as usize).min(cd[a] - 2);
                    let t = x - i0 as f64;
                    (i0 * stride, stride, 1.0 - t, t)
                }
            })
            .collect();
        stride *= cd[a];
        AxisTable { entries }
    });
    Some(tables)
}

/// Control-point weights for one subject voxel.
#[derive(Debug, Clone, Copy)]
struct ControlStencil {
    indices: [usize; 8],
    weights: [f64; 8],
}

/// Geometry shared by every evaluation of the deformed atlas over a fixed set
/// of subject voxels.
#[derive(Debug, Clone)]
pub struct AtlasWarp {
    working: GridSpec,
    voxels: Vec<usize>,
    /// working voxel -> atlas voxel (initial affine only)
    to_atlas_voxel: Matrix4<f64>,
    /// atlas world -> atlas voxel, linear part
    atlas_linear: Matrix3<f64>,
}

impl AtlasWarp {
    pub fn new(working: &GridSpec, voxels: Vec<usize>, affine_init: &Matrix4<f64>, atlas_grid: &GridSpec) -> Self {
        let inv = *atlas_grid.inverse_affine();
        Self {
            working: working.clone(),
            voxels,
            to_atlas_voxel: inv * affine_init * working.affine(),
            atlas_linear: inv.fixed_view::<3, 3>(0, 0).into_owned(),
        }
    }

    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    fn stencil(&self, field: &DeformationField, tables: Option<&[AxisTable; 3]>, ijk: [usize; 3]) -> ControlStencil {
        match tables {
            Some(t) => {
                let ex = t[0].entries[ijk[0]];
                let ey = t[1].entries[ijk[1]];
                let ez = t[2].entries[ijk[2]];
                let mut st = ControlStencil { indices: [0; 8], weights: [0.0; 8] };
                for corner in 0..8 {
                    let (bx, by, bz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                    st.indices[corner] = ex.0 + bx * ex.1 + ey.0 + by * ey.1 + ez.0 + bz * ez.1;
                    let wx = if bx == 1 { ex.3 } else { ex.2 };
                    let wy = if by == 1 { ey.3 } else { ey.2 };
                    let wz = if bz == 1 { ez.3 } else { ez.2 };
                    st.weights[corner] = wx * wy * wz;
                }
                st
            }
            None => {
                let world = self.working.voxel_to_world(ijk.map(|x| x as f64));
                let s = field.stencil_at_world(world);
                ControlStencil { indices: s.indices, weights: s.weights }
            }
        }
    }

    fn locate(&self, field: &DeformationField, tables: Option<&[AxisTable; 3]>, i: usize) -> ([f64; 3], ControlStencil) {
        let ijk = self.working.coords(self.voxels[i]);
        let st = self.stencil(field, tables, ijk);
        let disp = field.displacements();
        let mut d = Vector3::zeros();
        for (&k, &w) in st.indices.iter().zip(&st.weights) {
            if w != 0.0 {
                d += disp[k] * w;
            }
        }
        let y0 = apply_affine(&self.to_atlas_voxel, ijk.map(|x| x as f64));
        let dy = self.atlas_linear * d;
        ([y0[0] + dy.x, y0[1] + dy.y, y0[2] + dy.z], st)
    }

    /// Deformed prior for every voxel, row-major `V x C`.
    pub fn priors(&self, atlas: &ProbAtlas, field: &DeformationField) -> Vec<f64> {
        use rayon::prelude::*;
        let c = atlas.num_classes();
        let tables = axis_tables(&self.working, field.control_grid());
        let mut out = vec![0.0; self.voxels.len() * c];
        out.par_chunks_mut(c).enumerate().for_each(|(i, row)| {
            let (y, _) = self.locate(field, tables.as_ref(), i);
            sample_prior(atlas, y, row, None);
        });
        out
    }

    /// `Σ_v Σ_c w_vc log w_vc`, the part of the KL term that does not depend
    /// on the deformation.
    pub fn entropy_term(w: &[f64], classes: usize) -> f64 {
        let mut tmp = [0.0; MAX_CLASSES];
        w.chunks(classes)
            .map(|row| {
                for (t, &x) in tmp.iter_mut().zip(row) {
                    *t = if x > 0.0 { x * x.ln() } else { 0.0 };
                }
                sum_unordered(&mut tmp[..classes])
            })
            .sum()
    }

    /// `Σ_v Σ_c w_vc log(w_vc / A_vc(θ)) + λ R(θ)` and its gradient with
    /// respect to the flattened control displacements.
    pub fn kl_data_term(
        &self,
        atlas: &ProbAtlas,
        field: &DeformationField,
        w: &[f64],
        mode: Reduction,
    ) -> (f64, Vec<f64>) {
        self.kl_with_entropy(atlas, field, w, Self::entropy_term(w, atlas.num_classes()), mode)
    }

    /// As [`Self::kl_data_term`] with `Σ w log w` supplied by the caller, for
    /// repeated evaluations at fixed `w`.
    pub fn kl_with_entropy(
        &self,
        atlas: &ProbAtlas,
        field: &DeformationField,
        w: &[f64],
        entropy: f64,
        mode: Reduction,
    ) -> (f64, Vec<f64>) {
        let c = atlas.num_classes();
        assert_eq!(w.len(), self.voxels.len() * c);
        let np = field.num_params();
        let jt = self.atlas_linear.transpose();
        let tables = axis_tables(&self.working, field.control_grid());
        let (cross, mut grad) = reduce(
            self.voxels.len(),
            mode,
            || (0.0, vec![0.0; np]),
            |acc, i| {
                let (y, st) = self.locate(field, tables.as_ref(), i);
                let mut a = [0.0; MAX_CLASSES];
                let mut jac = [[0.0; 3]; MAX_CLASSES];
                let (a, jac) = (&mut a[..c], &mut jac[..c]);
                sample_prior(atlas, y, a, Some(jac));
                let row = &w[i * c..(i + 1) * c];
                let mut terms = [[0.0; 4]; MAX_CLASSES];
                for k in 0..c {
                    let wk = row[k];
                    if wk > 0.0 {
                        let s = -wk / a[k];
                        terms[k] = [wk * a[k].ln(), jac[k][0] * s, jac[k][1] * s, jac[k][2] * s];
                    }
                }
                let mut tmp = [0.0; MAX_CLASSES];
                let mut sums = [0.0; 4];
                for (q, out) in sums.iter_mut().enumerate() {
                    for k in 0..c {
                        tmp[k] = terms[k][q];
                    }
                    *out = sum_unordered(&mut tmp[..c]);
                }
                acc.0 -= sums[0];
                let gy = [sums[1], sums[2], sums[3]];
                let gd = jt * Vector3::from(gy);
                for (&kp, &wt) in st.indices.iter().zip(&st.weights) {
                    if wt == 0.0 {
                        continue;
                    }
                    let g = &mut acc.1[3 * kp..3 * kp + 3];
                    g[0] += wt * gd.x;
                    g[1] += wt * gd.y;
                    g[2] += wt * gd.z;
                }
            },
            |a, b| {
                a.0 += b.0;
                add_into(&mut a.1, &b.1);
            },
        );
        let (r, rg) = bending_energy(field);
        let lambda = field.stiffness();
        for (g, r) in grad.iter_mut().zip(&rg) {
            *g += lambda * r;
        }
        (entropy + cross + lambda * r, grad)
    }
}

/// Free-function form of [`AtlasWarp::kl_data_term`] over all voxels of `working`.
pub fn kl_data_term(
    field: &DeformationField,
    w: &[f64],
    atlas: &ProbAtlas,
    working: &GridSpec,
    affine_init: &Matrix4<f64>,
) -> (f64, Vec<f64>) {
    let warp = AtlasWarp::new(working, (0..working.num_voxels()).collect(), affine_init, atlas.grid());
    warp.kl_data_term(atlas, field, w, Reduction::Deterministic)
}
