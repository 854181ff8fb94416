//! Regular-grid volumes in world (RAS millimetre) coordinates.
//!
//! Every affine in this crate maps voxel indices to world coordinates.
//! Multi-channel volumes are stored voxel-major: the channels of one voxel
//! are contiguous, and voxels are ordered with `x` varying fastest.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Smallest eigenvalue (mm²/s) admitted before a tensor's matrix logarithm.
pub const EIGEN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dims: [usize; 3],
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("zero-length axis in dims {dims:?}")));
        }
        if affine.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite affine".into()));
        }
        let linear = affine.fixed_view::<3, 3>(0, 0).into_owned();
        let det = linear.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::InvalidGrid(format!("singular affine (det {det:e})")));
        }
        let inverse = affine
            .try_inverse()
            .ok_or_else(|| Error::InvalidGrid("affine is not invertible".into()))?;
        Ok(Self {
            dims,
            affine,
            inverse,
        })
    }

    /// Axis-aligned grid with isotropic voxels whose first voxel sits at `origin`.
    pub fn isotropic(dims: [usize; 3], voxel_mm: f64, origin: [f64; 3]) -> Result<Self> {
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = voxel_mm;
            affine[(a, 3)] = origin[a];
        }
        Self::new(dims, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn inverse_affine(&self) -> &Matrix4<f64> {
        &self.inverse
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let rest = index / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, p)
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.inverse, p)
    }

    /// Voxel edge lengths in mm (column norms of the linear part).
    pub fn voxel_sizes(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.affine.fixed_view::<3, 1>(0, a).norm();
        }
        out
    }

    pub fn voxel_volume(&self) -> f64 {
        self.affine
            .fixed_view::<3, 3>(0, 0)
            .into_owned()
            .determinant()
            .abs()
    }

    pub fn same_geometry(&self, other: &GridSpec, tol: f64) -> bool {
        self.dims == other.dims && (self.affine - other.affine).amax() <= tol
    }
}

pub fn apply_affine(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
    let r = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [r[0], r[1], r[2]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Data("volume needs at least one channel".into()));
        }
        let expected = grid.num_voxels() * channels;
        if data.len() != expected {
            return Err(Error::Data(format!(
                "volume data length {} does not match {} voxels x {} channels",
                data.len(),
                grid.num_voxels(),
                channels
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at element {pos}")));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        let n = grid.num_voxels() * channels;
        Self {
            grid,
            channels,
            data: vec![0.0; n],
        }
    }

    /// Builds a volume by evaluating `f` at every voxel index; `f` writes one value per channel.
    pub fn from_fn<F>(grid: GridSpec, channels: usize, f: F) -> Self
    where
        F: Fn([usize; 3], &mut [f64]) + Sync,
    {
        let mut vol = Self::zeros(grid, channels);
        let grid = vol.grid.clone();
        vol.data
            .par_chunks_mut(channels)
            .enumerate()
            .for_each(|(i, out)| f(grid.coords(i), out));
        vol
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn get(&self, ijk: [usize; 3], channel: usize) -> f64 {
        self.data[self.grid.index(ijk) * self.channels + channel]
    }

    /// Copies one channel out as a single-channel volume.
    pub fn channel(&self, channel: usize) -> Result<Volume> {
        if channel >= self.channels {
            return Err(Error::Data(format!(
                "channel {channel} requested from a {}-channel volume",
                self.channels
            )));
        }
        let data = self
            .data
            .chunks(self.channels)
            .map(|v| v[channel])
            .collect();
        Ok(Volume {
            grid: self.grid.clone(),
            channels: 1,
            data,
        })
    }

    pub fn with_grid(self, grid: GridSpec) -> Result<Volume> {
        if grid.dims() != self.grid.dims() {
            return Err(Error::InvalidGrid("replacement grid has different dims".into()));
        }
        Ok(Volume { grid, ..self })
    }
}

/// What to do when a sample point falls outside `[0, dim - 1]` on some axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    Error,
    #[default]
    Clamp,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// The eight voxels surrounding a sample point, their weights, and the
/// derivative of each weight with respect to the continuous voxel coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub indices: [usize; 8],
    pub weights: [f64; 8],
    pub dweights: [[f64; 3]; 8],
}

impl Stencil {
    pub fn apply(&self, vol: &Volume, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&idx, &w) in self.indices.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(vol.voxel(idx)) {
                *o += w * v;
            }
        }
    }
}

pub(crate) const EDGE_TOL: f64 = 1e-9;

/// Computes the trilinear stencil at `point`. Returns `Ok(None)` for zero-fill
/// points outside the grid.
pub fn trilinear_stencil(
    point: [f64; 3],
    dims: [usize; 3],
    boundary: Boundary,
) -> Result<Option<Stencil>> {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    let mut step = [0usize; 3];
    let mut live = [true; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let mut x = point[a];
        if !x.is_finite() {
            return Err(Error::Domain(format!("non-finite sample point {point:?}")));
        }
        if x < -EDGE_TOL || x > hi + EDGE_TOL {
            match boundary {
                Boundary::Error => return Err(Error::OutOfBounds { point, dims }),
                Boundary::Zero => return Ok(None),
                Boundary::Clamp => live[a] = false,
            }
        }
        x = x.clamp(0.0, hi);
        if dims[a] == 1 {
            base[a] = 0;
            frac[a] = 0.0;
            step[a] = 0;
            live[a] = false;
        } else {
            let i0 = (x.floor() as usize).min(dims[a] - 2);
            base[a] = i0;
            frac[a] = x - i0 as f64;
            step[a] = 1;
        }
    }
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut st = Stencil {
        indices: [0; 8],
        weights: [0.0; 8],
        dweights: [[0.0; 3]; 8],
    };
    for corner in 0..8 {
        let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut idx = 0;
        let mut f = [0.0; 3];
        let mut df = [0.0; 3];
        for a in 0..3 {
            idx += (base[a] + bits[a] * step[a]) * stride[a];
            if bits[a] == 1 {
                f[a] = frac[a];
                df[a] = 1.0;
            } else {
                f[a] = 1.0 - frac[a];
                df[a] = -1.0;
            }
            if step[a] == 0 {
                // single-voxel axis: both "corners" are the same voxel
                f[a] = if bits[a] == 0 { 1.0 } else { 0.0 };
                df[a] = 0.0;
            }
            if !live[a] {
                df[a] = 0.0;
            }
        }
        st.indices[corner] = idx;
        st.weights[corner] = f[0] * f[1] * f[2];
        st.dweights[corner] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
    }
    Ok(Some(st))
}

/// Trilinear interpolation at a continuous voxel coordinate, one value per channel.
pub fn trilinear_sample(vol: &Volume, point: [f64; 3], boundary: Boundary) -> Result<Vec<f64>> {
    let mut out = vec![0.0; vol.channels()];
    if let Some(st) = trilinear_stencil(point, vol.grid().dims(), boundary)? {
        st.apply(vol, &mut out);
    }
    Ok(out)
}

fn nearest_index(point: [f64; 3], dims: [usize; 3], boundary: Boundary) -> Result<Option<[usize; 3]>> {
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let x = point[a];
        if !x.is_finite() {
            return Err(Error::Domain(format!("non-finite sample point {point:?}")));
        }
        if x < -0.5 - EDGE_TOL || x > hi + 0.5 + EDGE_TOL {
            match boundary {
                Boundary::Error => return Err(Error::OutOfBounds { point, dims }),
                Boundary::Zero => return Ok(None),
                Boundary::Clamp => {}
            }
        }
        ijk[a] = x.round().clamp(0.0, hi) as usize;
    }
    Ok(Some(ijk))
}

/// Resamples `vol` onto `target`; both grids must share a world frame.
pub fn resample(
    vol: &Volume,
    target: &GridSpec,
    mode: Interpolation,
    boundary: Boundary,
) -> Result<Volume> {
    let to_source = vol.grid().inverse_affine() * target.affine();
    let channels = vol.channels();
    let dims = vol.grid().dims();
    let mut out = Volume::zeros(target.clone(), channels);
    out.data
        .par_chunks_mut(channels)
        .enumerate()
        .try_for_each(|(i, dst)| -> Result<()> {
            let ijk = target.coords(i);
            let p = apply_affine(&to_source, [ijk[0] as f64, ijk[1] as f64, ijk[2] as f64]);
            match mode {
                Interpolation::Trilinear => {
                    if let Some(st) = trilinear_stencil(p, dims, boundary)? {
                        st.apply(vol, dst);
                    }
                }
                Interpolation::Nearest => {
                    if let Some(src) = nearest_index(p, dims, boundary)? {
                        dst.copy_from_slice(vol.voxel(vol.grid().index(src)));
                    }
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Symmetric 3x3 tensors stored as (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorVolume {
    grid: GridSpec,
    data: Vec<[f64; 6]>,
}

impl TensorVolume {
    pub fn new(grid: GridSpec, data: Vec<[f64; 6]>) -> Result<Self> {
        if data.len() != grid.num_voxels() {
            return Err(Error::Data(format!(
                "tensor volume has {} entries for {} voxels",
                data.len(),
                grid.num_voxels()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn tensors(&self) -> &[[f64; 6]] {
        &self.data
    }

    pub fn matrix(&self, index: usize) -> Matrix3<f64> {
        tensor_to_matrix(&self.data[index])
    }

    pub fn from_volume(vol: &Volume) -> Result<Self> {
        if vol.channels() != 6 {
            return Err(Error::Data(format!(
                "tensor volume needs 6 channels, got {}",
                vol.channels()
            )));
        }
        let data = vol
            .data()
            .chunks_exact(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect();
        Self::new(vol.grid().clone(), data)
    }

    pub fn to_volume(&self) -> Volume {
        let data = self.data.iter().flatten().copied().collect();
        Volume {
            grid: self.grid.clone(),
            channels: 6,
            data,
        }
    }
}

pub fn tensor_to_matrix(t: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(t[0], t[3], t[4], t[3], t[1], t[5], t[4], t[5], t[2])
}

pub fn matrix_to_tensor(m: &Matrix3<f64>) -> [f64; 6] {
    [
        m[(0, 0)],
        m[(1, 1)],
        m[(2, 2)],
        0.5 * (m[(0, 1)] + m[(1, 0)]),
        0.5 * (m[(0, 2)] + m[(2, 0)]),
        0.5 * (m[(1, 2)] + m[(2, 1)]),
    ]
}

fn spectral_map(m: &Matrix3<f64>, f: impl Fn(f64) -> f64) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let mapped = eig.eigenvalues.map(f);
    eig.eigenvectors * Matrix3::from_diagonal(&mapped) * eig.eigenvectors.transpose()
}

/// Matrix logarithm of a symmetric tensor after flooring its eigenvalues at [`EIGEN_FLOOR`].
pub fn tensor_log(t: &[f64; 6]) -> [f64; 6] {
    matrix_to_tensor(&spectral_map(&tensor_to_matrix(t), |l| l.max(EIGEN_FLOOR).ln()))
}

pub fn tensor_exp(t: &[f64; 6]) -> [f64; 6] {
    matrix_to_tensor(&spectral_map(&tensor_to_matrix(t), f64::exp))
}

/// Resamples tensors by interpolating their matrix logarithms trilinearly and
/// mapping back with the matrix exponential.
pub fn logeuclidean_resample(
    tensors: &TensorVolume,
    target: &GridSpec,
    boundary: Boundary,
) -> Result<TensorVolume> {
    if let Some(pos) = tensors
        .data
        .iter()
        .position(|t| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Data(format!("non-finite tensor at voxel {pos}")));
    }
    let logs: Vec<f64> = tensors.data.par_iter().flat_map_iter(tensor_log).collect();
    let log_vol = Volume::new(tensors.grid.clone(), 6, logs)?;
    let resampled = resample(&log_vol, target, Interpolation::Trilinear, boundary)?;
    let data = resampled
        .data()
        .par_chunks_exact(6)
        .map(|c| tensor_exp(&[c[0], c[1], c[2], c[3], c[4], c[5]]))
        .collect();
    TensorVolume::new(target.clone(), data)
}

/// Grid with the orientation and first voxel of `grid` but isotropic
/// `resolution_mm` voxels, covering the same extent. Returns `grid` itself
/// when its voxels already have that size.
pub fn regrid(grid: &GridSpec, resolution_mm: f64) -> Result<GridSpec> {
    if !(resolution_mm > 0.0 && resolution_mm.is_finite()) {
        return Err(Error::InvalidGrid(format!("resolution {resolution_mm} must be positive")));
    }
    let sizes = grid.voxel_sizes();
    if sizes.iter().all(|s| (s - resolution_mm).abs() <= 1e-9 * resolution_mm) {
        return Ok(grid.clone());
    }
    let mut affine = *grid.affine();
    let mut dims = [0; 3];
    for a in 0..3 {
        let extent = (grid.dims()[a] - 1) as f64 * sizes[a];
        dims[a] = (extent / resolution_mm + 1e-9).floor() as usize + 1;
        let col = affine.fixed_view::<3, 1>(0, a) * (resolution_mm / sizes[a]);
        affine.fixed_view_mut::<3, 1>(0, a).copy_from(&col);
    }
    GridSpec::new(dims, affine)
}

/// Axis-aligned working grid at `resolution_mm` that covers every voxel of
/// `prior` (single channel) whose value exceeds `threshold`, grown by `margin_mm`.
pub fn bounding_box(
    prior: &Volume,
    threshold: f64,
    margin_mm: f64,
    resolution_mm: f64,
) -> Result<GridSpec> {
    if prior.channels() != 1 {
        return Err(Error::Data("bounding box expects a single-channel prior".into()));
    }
    if !(resolution_mm > 0.0) || !(margin_mm >= 0.0) {
        return Err(Error::InvalidGrid(format!(
            "resolution {resolution_mm} / margin {margin_mm} must be positive"
        )));
    }
    let grid = prior.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in prior.data().iter().enumerate() {
        if v > threshold {
            any = true;
            let ijk = grid.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(ijk[a]);
                hi[a] = hi[a].max(ijk[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyRegion(threshold));
    }
    let mut wmin = [f64::INFINITY; 3];
    let mut wmax = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let p = [
            if corner & 1 == 0 { lo[0] } else { hi[0] } as f64,
            if corner & 2 == 0 { lo[1] } else { hi[1] } as f64,
            if corner & 4 == 0 { lo[2] } else { hi[2] } as f64,
        ];
        let w = grid.voxel_to_world(p);
        for a in 0..3 {
            wmin[a] = wmin[a].min(w[a]);
            wmax[a] = wmax[a].max(w[a]);
        }
    }
    let mut dims = [0usize; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        origin[a] = wmin[a] - margin_mm;
        let extent = wmax[a] + margin_mm - origin[a];
        dims[a] = (extent / resolution_mm + 1e-9).floor() as usize + 1;
    }
    GridSpec::isotropic(dims, resolution_mm, origin)
}

/// Eigenvalues (descending) and matching unit eigenvectors of a symmetric 3x3 matrix.
pub fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = order.map(|i| eig.eigenvectors.column(i).into_owned());
    (vals, vecs)
}

/// Flips `v` so that its first non-negligible component is positive.
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    for a in 0..3 {
        if v[a].abs() > 1e-12 {
            return if v[a] < 0.0 { -v } else { v };
        }
    }
    v
}
