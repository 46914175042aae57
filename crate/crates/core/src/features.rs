//! Feature maps, bilinear sampling, PCA, the pluggable descriptor source,
//! and construction of 3D-registered features.
//!
//! A [`FeatureMap`] is a patch-grid of descriptors: cell (r, c) is anchored
//! at pixel ((c + 0.5) * cell_size, (r + 0.5) * cell_size). Registered
//! features are (descriptor, object-frame point) pairs produced by rendering
//! depth through a crop camera and lifting each interior grid cell to the
//! surface. The descriptor source abstracts the image backbone: the built-in
//! [`SyntheticFeatureField`] is a smooth procedural field over the object
//! surface, and precomputed tensors enter through the FMAP reader.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{PinholeCamera, RigidTransform, Vec2, Vec3};
use crate::mesh::TriangleMesh;
use crate::render::{rasterize_depth, RenderError};

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("sample position ({u:.3}, {v:.3}) outside the interpolation domain")]
    OutOfBounds { u: f64, v: f64 },
    #[error("no grid cell passes the interior visibility mask")]
    NoVisibleSurface,
    #[error("need at least {need} descriptors, got {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("bad magic bytes (not an FMAP file)")]
    BadMagic,
    #[error("file ends before the declared payload (expected {expected} floats, got {got})")]
    TruncatedFile { expected: usize, got: usize },
    #[error("unsupported FMAP version {0}")]
    BadVersion(u32),
    #[error("camera {width}x{height} is not divisible into {cell_size}-pixel cells")]
    GridNotDivisible {
        width: u32,
        height: u32,
        cell_size: u32,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// H x W x D descriptor grid with bilinear sampling in pixel coordinates.
///
/// Data is stored row-major (row, col, channel) as f32, matching the FMAP
/// on-disk format exactly so that save/load round-trips are bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub cell_size: u32,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: u32, width: u32, dim: u32, cell_size: u32) -> Self {
        Self {
            height,
            width,
            dim,
            cell_size,
            data: vec![0.0; (height * width * dim) as usize],
        }
    }

    pub fn from_data(height: u32, width: u32, dim: u32, cell_size: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), (height * width * dim) as usize);
        Self {
            height,
            width,
            dim,
            cell_size,
            data,
        }
    }

    #[inline]
    pub fn cell(&self, row: u32, col: u32) -> &[f32] {
        let base = ((row * self.width + col) * self.dim) as usize;
        &self.data[base..base + self.dim as usize]
    }

    pub fn set_cell(&mut self, row: u32, col: u32, descriptor: &[f64]) {
        assert_eq!(descriptor.len(), self.dim as usize);
        let base = ((row * self.width + col) * self.dim) as usize;
        for (dst, &src) in self.data[base..base + self.dim as usize]
            .iter_mut()
            .zip(descriptor)
        {
            *dst = src as f32;
        }
    }

    pub fn cell_vector(&self, row: u32, col: u32) -> DVector<f64> {
        DVector::from_iterator(
            self.dim as usize,
            self.cell(row, col).iter().map(|&x| x as f64),
        )
    }

    /// Pixel coordinates of the anchor of cell (row, col).
    pub fn cell_center(&self, row: u32, col: u32) -> Vec2 {
        let cs = self.cell_size as f64;
        Vec2::new((col as f64 + 0.5) * cs, (row as f64 + 0.5) * cs)
    }

    #[inline]
    fn grid_coords(&self, uv: &Vec2) -> (f64, f64) {
        let cs = self.cell_size as f64;
        (uv[0] / cs - 0.5, uv[1] / cs - 0.5)
    }

    /// True when `uv` lies inside the bilinear interpolation domain, i.e.
    /// within half a cell of the outermost cell centers.
    pub fn in_bounds(&self, uv: &Vec2) -> bool {
        let (gx, gy) = self.grid_coords(uv);
        gx >= 0.0 && gy >= 0.0 && gx <= (self.width - 1) as f64 && gy <= (self.height - 1) as f64
    }

    /// Clamp `uv` into the interpolation domain.
    pub fn clamp_uv(&self, uv: &Vec2) -> Vec2 {
        let cs = self.cell_size as f64;
        Vec2::new(
            uv[0].clamp(0.5 * cs, (self.width as f64 - 0.5) * cs),
            uv[1].clamp(0.5 * cs, (self.height as f64 - 0.5) * cs),
        )
    }

    fn corner(&self, uv: &Vec2) -> Result<(usize, usize, f64, f64), FeatureError> {
        if !self.in_bounds(uv) {
            return Err(FeatureError::OutOfBounds { u: uv[0], v: uv[1] });
        }
        let (gx, gy) = self.grid_coords(uv);
        let x0 = (gx.floor() as usize).min(self.width as usize - 2);
        let y0 = (gy.floor() as usize).min(self.height as usize - 2);
        Ok((x0, y0, gx - x0 as f64, gy - y0 as f64))
    }

    /// Bilinear blend of the four surrounding cell descriptors at pixel
    /// coordinates `uv`. Exact at cell centers.
    pub fn sample_bilinear(&self, uv: &Vec2) -> Result<DVector<f64>, FeatureError> {
        let mut out = DVector::zeros(self.dim as usize);
        self.sample_bilinear_into(uv, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn sample_bilinear_into(&self, uv: &Vec2, out: &mut [f64]) -> Result<(), FeatureError> {
        let (x0, y0, fx, fy) = self.corner(uv)?;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let c00 = self.cell(y0 as u32, x0 as u32);
        let c10 = self.cell(y0 as u32, x0 as u32 + 1);
        let c01 = self.cell(y0 as u32 + 1, x0 as u32);
        let c11 = self.cell(y0 as u32 + 1, x0 as u32 + 1);
        for k in 0..self.dim as usize {
            out[k] = w00 * c00[k] as f64
                + w10 * c10[k] as f64
                + w01 * c01[k] as f64
                + w11 * c11[k] as f64;
        }
        Ok(())
    }

    /// Gradient d(sample)/d(uv) of the bilinear interpolant, D x 2, in units
    /// of descriptor per pixel. Piecewise constant per cell quadrant.
    pub fn sample_gradient(&self, uv: &Vec2) -> Result<DMatrix<f64>, FeatureError> {
        let (x0, y0, fx, fy) = self.corner(uv)?;
        let c00 = self.cell(y0 as u32, x0 as u32);
        let c10 = self.cell(y0 as u32, x0 as u32 + 1);
        let c01 = self.cell(y0 as u32 + 1, x0 as u32);
        let c11 = self.cell(y0 as u32 + 1, x0 as u32 + 1);
        let inv_cs = 1.0 / self.cell_size as f64;
        let mut grad = DMatrix::zeros(self.dim as usize, 2);
        for k in 0..self.dim as usize {
            let (v00, v10, v01, v11) = (c00[k] as f64, c10[k] as f64, c01[k] as f64, c11[k] as f64);
            grad[(k, 0)] = ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) * inv_cs;
            grad[(k, 1)] = ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) * inv_cs;
        }
        Ok(grad)
    }
}

/// Orthonormal top-k PCA projection fitted on descriptor samples.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// k x D_in, rows orthonormal (zero rows when rank deficient).
    pub components: DMatrix<f64>,
    pub k: usize,
    /// Number of usable (nonzero-eigenvalue) components; < k means the
    /// trailing rows of `components` are zero padding.
    pub rank: usize,
}

impl PcaBasis {
    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.k
    }

    pub fn apply(&self, d: &DVector<f64>) -> DVector<f64> {
        &self.components * (d - &self.mean)
    }

    /// Back-projection into the input space (for reconstruction tests).
    pub fn reconstruct(&self, y: &DVector<f64>) -> DVector<f64> {
        self.components.transpose() * y + &self.mean
    }
}

/// Fit a mean-centered top-`k` PCA basis.
///
/// Eigenvectors are sorted by descending eigenvalue with a deterministic
/// sign convention (the largest-magnitude entry of each component is made
/// positive). When fewer than `k` eigenvalues are effectively nonzero the
/// basis is padded with zero rows and flagged via [`PcaBasis::rank`].
pub fn fit_pca(descriptors: &[DVector<f64>], k: usize) -> Result<PcaBasis, FeatureError> {
    let n = descriptors.len();
    if n < k || n == 0 {
        return Err(FeatureError::InsufficientData { have: n, need: k });
    }
    let d_in = descriptors[0].len();
    if k > d_in {
        return Err(FeatureError::InsufficientData { have: d_in, need: k });
    }
    for d in descriptors {
        if d.len() != d_in {
            return Err(FeatureError::DimMismatch {
                expected: d_in,
                got: d.len(),
            });
        }
    }

    let mut mean = DVector::zeros(d_in);
    for d in descriptors {
        mean += d;
    }
    mean /= n as f64;

    let mut cov = DMatrix::zeros(d_in, d_in);
    for d in descriptors {
        let c = d - &mean;
        cov.syger(1.0 / n as f64, &c, &c, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..d_in {
        for j in i + 1..d_in {
            cov[(i, j)] = cov[(j, i)];
        }
    }

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let max_eig = eig.eigenvalues[order[0]].max(0.0);
    let tol = max_eig * 1e-12;
    let mut components = DMatrix::zeros(k, d_in);
    let mut rank = 0;
    for (row, &idx) in order.iter().take(k).enumerate() {
        if eig.eigenvalues[idx] <= tol {
            break;
        }
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        // Deterministic sign: largest-magnitude entry positive.
        let mut arg = 0;
        for i in 1..d_in {
            if v[i].abs() > v[arg].abs() {
                arg = i;
            }
        }
        if v[arg] < 0.0 {
            v = -v;
        }
        components.row_mut(row).copy_from(&v.transpose());
        rank += 1;
    }

    Ok(PcaBasis {
        mean,
        components,
        k,
        rank,
    })
}

/// Source of surface descriptors, evaluated at object-frame points.
pub trait DescriptorSource: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-norm descriptor at object-frame point `x`.
    fn descriptor(&self, x: &Vec3) -> DVector<f64>;
}

/// Smooth procedural descriptor field: `normalize(mixing * sin(F x + phi))`.
///
/// Deterministic in (seed, x) and Lipschitz, which gives the alignment
/// objective wide, well-behaved convergence basins.
#[derive(Debug, Clone)]
pub struct SyntheticFeatureField {
    pub object_id: String,
    pub seed: u64,
    /// m x 3 spatial frequencies (radians per length unit).
    pub frequencies: DMatrix<f64>,
    /// m phase offsets.
    pub phases: DVector<f64>,
    /// D x m mixing matrix.
    pub mixing: DMatrix<f64>,
}

impl SyntheticFeatureField {
    /// Deterministically generate a field.
    ///
    /// `freq_scale` bounds the spatial frequency magnitude; choose it
    /// relative to the object diameter (a few radians per diameter keeps
    /// the field smooth at patch scale).
    pub fn from_seed(
        object_id: impl Into<String>,
        seed: u64,
        dim: usize,
        n_components: usize,
        freq_scale: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = DMatrix::from_fn(n_components, 3, |_, _| {
            rng.gen_range(-freq_scale..freq_scale)
        });
        let phases = DVector::from_fn(n_components, |_, _| {
            rng.gen_range(0.0..std::f64::consts::TAU)
        });
        let scale = 1.0 / (n_components as f64).sqrt();
        let mixing = DMatrix::from_fn(dim, n_components, |_, _| rng.gen_range(-scale..scale));
        Self {
            object_id: object_id.into(),
            seed,
            frequencies,
            phases,
            mixing,
        }
    }

    /// Lipschitz bound of the un-normalized signal `mixing * sin(F x + phi)`
    /// (product of Frobenius norms bounds the spectral-norm product).
    pub fn lipschitz_bound(&self) -> f64 {
        self.mixing.norm() * self.frequencies.norm()
    }

    /// Un-normalized signal value; exposed for bound tests.
    pub fn raw_signal(&self, x: &Vec3) -> DVector<f64> {
        let arg = &self.frequencies * DVector::from_column_slice(&[x[0], x[1], x[2]]) + &self.phases;
        &self.mixing * arg.map(f64::sin)
    }
}

impl DescriptorSource for SyntheticFeatureField {
    fn dim(&self) -> usize {
        self.mixing.nrows()
    }

    fn descriptor(&self, x: &Vec3) -> DVector<f64> {
        let raw = self.raw_signal(x);
        let norm = raw.norm();
        if norm < 1e-12 {
            // Vanishing signal never happens for generated fields; pin an
            // arbitrary unit vector rather than dividing by ~0.
            let mut unit = DVector::zeros(self.dim());
            unit[0] = 1.0;
            return unit;
        }
        raw / norm
    }
}

/// One registered feature: descriptor plus object-frame surface point.
#[derive(Debug, Clone)]
pub struct RegisteredFeature {
    pub descriptor: DVector<f64>,
    pub point: Vec3,
}

/// Per-view set of registered features lifted from a rendered depth map.
#[derive(Debug, Clone)]
pub struct RegisteredFeatureSet {
    pub view_id: String,
    pub entries: Vec<RegisteredFeature>,
    /// Grid cell (row, col) each entry was lifted from.
    pub cells: Vec<(u32, u32)>,
}

impl RegisteredFeatureSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.descriptor.len())
    }
}

fn cell_grid_camera(cam: &PinholeCamera, cell_size: u32) -> Result<PinholeCamera, FeatureError> {
    if !cam.width.is_multiple_of(cell_size) || !cam.height.is_multiple_of(cell_size) {
        return Err(FeatureError::GridNotDivisible {
            width: cam.width,
            height: cam.height,
            cell_size,
        });
    }
    let cs = cell_size as f64;
    Ok(PinholeCamera::new(
        cam.fx / cs,
        cam.fy / cs,
        cam.cx / cs,
        cam.cy / cs,
        cam.width / cell_size,
        cam.height / cell_size,
    ))
}

/// Round descriptors through f32 so in-process values match FMAP-stored ones.
fn quantize(d: &mut DVector<f64>) {
    for x in d.iter_mut() {
        *x = *x as f32 as f64;
    }
}

fn finalize_descriptor(source: &dyn DescriptorSource, x: &Vec3, pca: Option<&PcaBasis>) -> DVector<f64> {
    let mut d = source.descriptor(x);
    let norm = d.norm();
    if norm > 1e-12 {
        d /= norm;
    }
    if let Some(basis) = pca {
        d = basis.apply(&d);
    }
    quantize(&mut d);
    d
}

/// Build the registered feature set for one view.
///
/// Renders depth with the crop camera at patch-grid resolution (each grid
/// cell samples the ray through its own center pixel), keeps cells whose 8
/// neighbors are also on the object, and lifts each kept cell center to an
/// object-frame surface point paired with the source descriptor there.
pub fn build_registered_features(
    mesh: &TriangleMesh,
    t_crop_obj: &RigidTransform,
    crop_cam: &PinholeCamera,
    cell_size: u32,
    source: &dyn DescriptorSource,
    pca: Option<&PcaBasis>,
    view_id: impl Into<String>,
) -> Result<RegisteredFeatureSet, FeatureError> {
    let grid_cam = cell_grid_camera(crop_cam, cell_size)?;
    let depth = match rasterize_depth(mesh, t_crop_obj, &grid_cam) {
        Ok(d) => d,
        Err(RenderError::FullyBehindCamera) => return Err(FeatureError::NoVisibleSurface),
    };

    let t_obj_crop = t_crop_obj.inverse();
    let mut entries = Vec::new();
    let mut cells = Vec::new();
    for row in 1..grid_cam.height.saturating_sub(1) {
        for col in 1..grid_cam.width.saturating_sub(1) {
            let interior = (-1i64..=1).all(|dr| {
                (-1i64..=1).all(|dc| {
                    depth.is_valid((row as i64 + dr) as u32, (col as i64 + dc) as u32)
                })
            });
            if !interior {
                continue;
            }
            let z = depth.get(row, col);
            let uv = Vec2::new(
                (col as f64 + 0.5) * cell_size as f64,
                (row as f64 + 0.5) * cell_size as f64,
            );
            let x_cam = crop_cam.unproject(&uv, z);
            let x_obj = t_obj_crop.transform_point(&x_cam);
            entries.push(RegisteredFeature {
                descriptor: finalize_descriptor(source, &x_obj, pca),
                point: x_obj,
            });
            cells.push((row, col));
        }
    }

    if entries.is_empty() {
        return Err(FeatureError::NoVisibleSurface);
    }
    Ok(RegisteredFeatureSet {
        view_id: view_id.into(),
        entries,
        cells,
    })
}

/// How background (off-object) cells of a synthesized query map are filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackgroundMode {
    Zeros,
    /// Independent unit-norm random descriptors, deterministic per seed.
    UnitNoise { seed: u64 },
}

/// One ground-truth object visible in a synthesized query view.
pub struct QueryObject<'a> {
    pub mesh: &'a TriangleMesh,
    pub t_wo: RigidTransform,
    pub source: &'a dyn DescriptorSource,
    pub pca: Option<&'a PcaBasis>,
}

/// Synthesize the query feature map an extractor would produce on `cam`.
///
/// All objects are depth-rendered at patch-grid resolution; the nearest
/// surface wins each cell (z-buffer semantics) and contributes the
/// descriptor of its own field at the lifted surface point. Background
/// cells are filled per `background`.
pub fn build_query_feature_map(
    objects: &[QueryObject<'_>],
    cam: &PinholeCamera,
    t_cam_w: &RigidTransform,
    cell_size: u32,
    dim: usize,
    background: BackgroundMode,
) -> Result<FeatureMap, FeatureError> {
    let grid_cam = cell_grid_camera(cam, cell_size)?;
    let (gh, gw) = (grid_cam.height, grid_cam.width);
    let mut map = FeatureMap::zeros(gh, gw, dim as u32, cell_size);

    // Nearest-object index and depth per cell.
    let mut best_z = vec![0.0f64; (gh * gw) as usize];
    let mut best_obj = vec![usize::MAX; (gh * gw) as usize];
    for (i, obj) in objects.iter().enumerate() {
        let t_cam_obj = t_cam_w.compose(&obj.t_wo);
        let depth = match rasterize_depth(obj.mesh, &t_cam_obj, &grid_cam) {
            Ok(d) => d,
            Err(RenderError::FullyBehindCamera) => continue,
        };
        for row in 0..gh {
            for col in 0..gw {
                let z = depth.get(row, col);
                if z > 0.0 {
                    let idx = (row * gw + col) as usize;
                    if best_obj[idx] == usize::MAX || z < best_z[idx] {
                        best_z[idx] = z;
                        best_obj[idx] = i;
                    }
                }
            }
        }
    }

    let mut noise_rng = match background {
        BackgroundMode::UnitNoise { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        BackgroundMode::Zeros => None,
    };

    for row in 0..gh {
        for col in 0..gw {
            let idx = (row * gw + col) as usize;
            if best_obj[idx] == usize::MAX {
                if let Some(rng) = noise_rng.as_mut() {
                    let mut d = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
                    let n = d.norm();
                    if n > 1e-12 {
                        d /= n;
                    }
                    quantize(&mut d);
                    map.set_cell(row, col, d.as_slice());
                }
                continue;
            }
            let obj = &objects[best_obj[idx]];
            let t_cam_obj = t_cam_w.compose(&obj.t_wo);
            let uv = Vec2::new(
                (col as f64 + 0.5) * cell_size as f64,
                (row as f64 + 0.5) * cell_size as f64,
            );
            let x_cam = cam.unproject(&uv, best_z[idx]);
            let x_obj = t_cam_obj.inverse().transform_point(&x_cam);
            let d = finalize_descriptor(obj.source, &x_obj, obj.pca);
            if d.len() != dim {
                return Err(FeatureError::DimMismatch {
                    expected: dim,
                    got: d.len(),
                });
            }
            map.set_cell(row, col, d.as_slice());
        }
    }
    Ok(map)
}

/// Resample a source-camera feature map onto the grid of a destination
/// camera related by a pure rotation (`x_src = r_src_from_dst * x_dst`).
///
/// Cells whose ray leaves the source map are zero-filled (background).
pub fn resample_feature_map(
    src: &FeatureMap,
    src_cam: &PinholeCamera,
    dst_cam: &PinholeCamera,
    r_src_from_dst: &nalgebra::Matrix3<f64>,
    cell_size: u32,
) -> Result<FeatureMap, FeatureError> {
    let grid_cam = cell_grid_camera(dst_cam, cell_size)?;
    let dim = src.dim;
    let mut out = FeatureMap::zeros(grid_cam.height, grid_cam.width, dim, cell_size);
    let mut buf = vec![0.0f64; dim as usize];
    for row in 0..grid_cam.height {
        for col in 0..grid_cam.width {
            let uv = Vec2::new(
                (col as f64 + 0.5) * cell_size as f64,
                (row as f64 + 0.5) * cell_size as f64,
            );
            let ray_src = r_src_from_dst * dst_cam.ray_dir(&uv);
            let Ok(uv_src) = src_cam.project(&ray_src) else {
                continue;
            };
            if src.sample_bilinear_into(&uv_src, &mut buf).is_ok() {
                out.set_cell(row, col, &buf);
            }
        }
    }
    Ok(out)
}

/// Write a feature map in the FMAP binary format: magic `FMAP`, u32
/// version=1, u32 height, u32 width, u32 dim, u32 cell_size (all
/// little-endian), then height*width*dim f32 values row-major.
pub fn write_feature_tensor<W: Write>(map: &FeatureMap, mut w: W) -> std::io::Result<()> {
    w.write_all(FMAP_MAGIC)?;
    for v in [FMAP_VERSION, map.height, map.width, map.dim, map.cell_size] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &x in &map.data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_tensor<R: Read>(mut r: R) -> Result<FeatureMap, FeatureError> {
    let io_err = |source| FeatureError::Io {
        path: "<stream>".into(),
        source,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| FeatureError::BadMagic)?;
    if &magic != FMAP_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let mut word = [0u8; 4];
    let mut header = [0u32; 5];
    for h in header.iter_mut() {
        r.read_exact(&mut word).map_err(|_| FeatureError::TruncatedFile {
            expected: 5,
            got: 0,
        })?;
        *h = u32::from_le_bytes(word);
    }
    let [version, height, width, dim, cell_size] = header;
    if version != FMAP_VERSION {
        return Err(FeatureError::BadVersion(version));
    }
    if dim == 0 || cell_size == 0 || height == 0 || width == 0 {
        return Err(FeatureError::DimMismatch {
            expected: 1,
            got: 0,
        });
    }
    let expected = (height as usize) * (width as usize) * (dim as usize);
    let mut data = Vec::with_capacity(expected);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(io_err)?;
    if buf.len() < expected * 4 {
        return Err(FeatureError::TruncatedFile {
            expected,
            got: buf.len() / 4,
        });
    }
    for chunk in buf[..expected * 4].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(FeatureMap::from_data(height, width, dim, cell_size, data))
}

pub fn save_feature_tensor(map: &FeatureMap, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_feature_tensor(map, std::io::BufWriter::new(file)).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_feature_tensor(path: impl AsRef<Path>) -> Result<FeatureMap, FeatureError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_feature_tensor(std::io::BufReader::new(file))
}

/// Fit a per-object PCA basis from descriptors gathered over `n_views`
/// rendered viewpoints (Fibonacci-sphere directions around the object).
pub fn fit_object_pca(
    mesh: &TriangleMesh,
    source: &dyn DescriptorSource,
    n_views: usize,
    k: usize,
    crop_size: u32,
    cell_size: u32,
) -> Result<PcaBasis, FeatureError> {
    let diameter = mesh.diameter();
    let distance = diameter * 3.0;
    let crop_cam = PinholeCamera::new(
        crop_size as f64 * 1.2,
        crop_size as f64 * 1.2,
        crop_size as f64 * 0.5,
        crop_size as f64 * 0.5,
        crop_size,
        crop_size,
    );
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut descriptors = Vec::new();
    for i in 0..n_views {
        // Fibonacci sphere direction.
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_views as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        let dir = Vec3::new(r * phi.cos(), y, r * phi.sin());

        // Camera looking at the object center from `distance` along dir.
        let z_axis = -dir;
        let hint = if z_axis[0].abs() < 0.9 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let x_axis = (hint - z_axis * hint.dot(&z_axis)).normalize();
        let y_axis = z_axis.cross(&x_axis);
        let rot = nalgebra::Matrix3::from_rows(&[
            x_axis.transpose(),
            y_axis.transpose(),
            z_axis.transpose(),
        ]);
        let t_cam_obj = RigidTransform::new(rot, Vec3::new(0.0, 0.0, distance));

        match build_registered_features(
            mesh,
            &t_cam_obj,
            &crop_cam,
            cell_size,
            source,
            None,
            format!("pca-{i}"),
        ) {
            Ok(set) => descriptors.extend(set.entries.into_iter().map(|e| e.descriptor)),
            Err(FeatureError::NoVisibleSurface) => continue,
            Err(e) => return Err(e),
        }
    }
    fit_pca(&descriptors, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::raycast_depth;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp_map(height: u32, width: u32, dim: u32, cell_size: u32) -> FeatureMap {
        // Channel 0 ramps along u, channel 1 along v, the rest fixed.
        let mut map = FeatureMap::zeros(height, width, dim, cell_size);
        for row in 0..height {
            for col in 0..width {
                let mut d = vec![0.25; dim as usize];
                d[0] = 3.0 * col as f64;
                if dim > 1 {
                    d[1] = -2.0 * row as f64;
                }
                map.set_cell(row, col, &d);
            }
        }
        map
    }

    fn random_map(rng: &mut ChaCha8Rng, height: u32, width: u32, dim: u32, cell: u32) -> FeatureMap {
        let mut map = FeatureMap::zeros(height, width, dim, cell);
        for row in 0..height {
            for col in 0..width {
                let d: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                map.set_cell(row, col, &d);
            }
        }
        map
    }

    #[test]
    fn sample_at_cell_center_returns_stored_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let map = random_map(&mut rng, 6, 7, 5, 14);
        for row in 0..6 {
            for col in 0..7 {
                let got = map.sample_bilinear(&map.cell_center(row, col)).unwrap();
                let want = map.cell_vector(row, col);
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn sample_midway_is_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let map = random_map(&mut rng, 4, 4, 3, 10);
        let a = map.cell_vector(1, 1);
        let b = map.cell_vector(1, 2);
        let mid = Vec2::new(20.0, 15.0); // between centers (15,15) and (25,15)
        let got = map.sample_bilinear(&mid).unwrap();
        assert_relative_eq!(got, (a + b) * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sample_matches_scalar_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let map = random_map(&mut rng, 8, 9, 4, 14);
        let cs = 14.0;
        for _ in 0..200 {
            let uv = Vec2::new(rng.gen_range(7.0..(9.0 - 0.5) * cs), rng.gen_range(7.0..(8.0 - 0.5) * cs));
            let got = map.sample_bilinear(&uv).unwrap();
            // Per-channel scalar bilinear interpolation.
            let gx = uv[0] / cs - 0.5;
            let gy = uv[1] / cs - 0.5;
            let (x0, y0) = (gx.floor() as u32, gy.floor() as u32);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            for k in 0..4usize {
                let f = |r: u32, c: u32| map.cell(r, c)[k] as f64;
                let expected = f(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + f(y0, x0 + 1) * fx * (1.0 - fy)
                    + f(y0 + 1, x0) * (1.0 - fx) * fy
                    + f(y0 + 1, x0 + 1) * fx * fy;
                assert!((got[k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_out_of_bounds_errors() {
        let map = FeatureMap::zeros(4, 4, 2, 14);
        // Less than half a cell from the image corner: outside the domain.
        assert!(matches!(
            map.sample_bilinear(&Vec2::new(3.0, 3.0)),
            Err(FeatureError::OutOfBounds { .. })
        ));
        assert!(map
            .sample_bilinear(&Vec2::new(4.0 * 14.0 - 6.9, 7.0))
            .is_err());
        assert!(map.sample_bilinear(&Vec2::new(7.0, 7.0)).is_ok());
    }

    #[test]
    fn gradient_of_constant_map_is_zero() {
        let mut map = FeatureMap::zeros(5, 5, 3, 14);
        for row in 0..5 {
            for col in 0..5 {
                map.set_cell(row, col, &[1.0, -0.5, 2.0]);
            }
        }
        let g = map.sample_gradient(&Vec2::new(30.0, 33.0)).unwrap();
        assert_eq!(g, DMatrix::zeros(3, 2));
    }

    #[test]
    fn gradient_of_linear_ramp() {
        let map = ramp_map(6, 6, 3, 14);
        // Channel 0 increases by 3 per cell = 3/14 per pixel along u.
        for uv in [Vec2::new(25.0, 30.0), Vec2::new(40.7, 61.2)] {
            let g = map.sample_gradient(&uv).unwrap();
            assert_relative_eq!(g[(0, 0)], 3.0 / 14.0, epsilon = 1e-12);
            assert_relative_eq!(g[(0, 1)], 0.0, epsilon = 1e-12);
            assert_relative_eq!(g[(1, 0)], 0.0, epsilon = 1e-12);
            assert_relative_eq!(g[(1, 1)], -2.0 / 14.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_cell_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let map = random_map(&mut rng, 8, 8, 4, 14);
        let cs = 14.0;
        let h = 0.01 * cs;
        let mut checked = 0;
        while checked < 100 {
            let uv = Vec2::new(rng.gen_range(21.0..91.0), rng.gen_range(21.0..91.0));
            // Stay clear of the piecewise-constant gradient discontinuities
            // at cell boundaries.
            let frac = |x: f64| (x / cs - 0.5).fract().abs();
            let near_edge = |f: f64| f < 0.1 || f > 0.9;
            if near_edge(frac(uv[0])) || near_edge(frac(uv[1])) {
                continue;
            }
            let g = map.sample_gradient(&uv).unwrap();
            for axis in 0..2 {
                let mut up = uv;
                let mut dn = uv;
                up[axis] += h;
                dn[axis] -= h;
                let fd = (map.sample_bilinear(&up).unwrap() - map.sample_bilinear(&dn).unwrap())
                    / (2.0 * h);
                for k in 0..4 {
                    assert!(
                        (g[(k, axis)] - fd[k]).abs() < 1e-6,
                        "gradient mismatch at {uv:?} axis {axis} ch {k}"
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn pca_recovers_line_direction() {
        let dir = DVector::from_column_slice(&[2.0, -1.0, 2.0]).normalize();
        let descriptors: Vec<DVector<f64>> = (0..40)
            .map(|i| &dir * (i as f64 * 0.1) + DVector::from_column_slice(&[5.0, 5.0, 5.0]))
            .collect();
        let basis = fit_pca(&descriptors, 1).unwrap();
        let comp = basis.components.row(0).transpose();
        assert_relative_eq!(comp.dot(&dir).abs(), 1.0, epsilon = 1e-9);
        for d in &descriptors {
            let rec = basis.reconstruct(&basis.apply(d));
            assert_relative_eq!(rec, d.clone(), epsilon = 1e-9);
        }
    }

    #[test]
    fn pca_variance_capture_matches_eigenvalue_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let d_in = 6;
        let descriptors: Vec<DVector<f64>> = (0..200)
            .map(|_| {
                DVector::from_fn(d_in, |i, _| rng.gen_range(-1.0..1.0) * (i as f64 + 1.0))
            })
            .collect();
        let k = 3;
        let basis = fit_pca(&descriptors, k).unwrap();

        // Oracle: eigendecomposition of the sample covariance.
        let n = descriptors.len() as f64;
        let mean = descriptors.iter().sum::<DVector<f64>>() / n;
        let mut cov = DMatrix::zeros(d_in, d_in);
        for d in &descriptors {
            let c = d - &mean;
            cov += &c * c.transpose();
        }
        cov /= n;
        let mut eigs: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected_ratio = eigs[..k].iter().sum::<f64>() / eigs.iter().sum::<f64>();

        let total: f64 = descriptors.iter().map(|d| (d - &mean).norm_squared()).sum();
        let residual: f64 = descriptors
            .iter()
            .map(|d| (d - basis.reconstruct(&basis.apply(d))).norm_squared())
            .sum();
        let captured = 1.0 - residual / total;
        assert_relative_eq!(captured, expected_ratio, epsilon = 1e-9);
    }

    #[test]
    fn pca_full_basis_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let descriptors: Vec<DVector<f64>> = (0..50)
            .map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let basis = fit_pca(&descriptors, 4).unwrap();
        assert!(!basis.is_rank_deficient());
        for d in descriptors.iter().take(10) {
            let once = basis.apply(d);
            // Idempotence through the full basis: re-projecting the
            // reconstruction changes nothing.
            let twice = basis.apply(&basis.reconstruct(&once));
            assert_relative_eq!(once, twice, epsilon = 1e-9);
            assert_relative_eq!(basis.reconstruct(&once), d.clone(), epsilon = 1e-9);
        }
        // Rows orthonormal.
        let gram = &basis.components * basis.components.transpose();
        assert_relative_eq!(gram, DMatrix::identity(4, 4), epsilon = 1e-9);
    }

    #[test]
    fn pca_flags_rank_deficiency() {
        // All samples on a 1-D line, but ask for 3 components.
        let dir = DVector::from_column_slice(&[1.0, 2.0, -1.0, 0.5]);
        let descriptors: Vec<DVector<f64>> =
            (0..20).map(|i| &dir * (i as f64 * 0.3)).collect();
        let basis = fit_pca(&descriptors, 3).unwrap();
        assert!(basis.is_rank_deficient());
        assert_eq!(basis.rank, 1);
        // Padded rows are zero.
        assert_eq!(basis.components.row(2).norm(), 0.0);
    }

    #[test]
    fn pca_requires_enough_samples() {
        let descriptors: Vec<DVector<f64>> =
            (0..2).map(|_| DVector::zeros(5)).collect();
        assert!(matches!(
            fit_pca(&descriptors, 3),
            Err(FeatureError::InsufficientData { .. })
        ));
    }

    #[test]
    fn synthetic_field_is_deterministic_and_unit_norm() {
        let field = SyntheticFeatureField::from_seed("obj", 7, 32, 64, 10.0);
        let again = SyntheticFeatureField::from_seed("obj", 7, 32, 64, 10.0);
        let x = Vec3::new(0.1, -0.2, 0.3);
        assert_eq!(field.descriptor(&x), again.descriptor(&x));
        for i in 0..50 {
            let p = Vec3::new(i as f64 * 0.01, (i as f64 * 0.02).sin(), -0.1);
            assert_relative_eq!(field.descriptor(&p).norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn synthetic_field_respects_lipschitz_bound() {
        let field = SyntheticFeatureField::from_seed("obj", 8, 32, 64, 10.0);
        let bound = field.lipschitz_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..200 {
            let x = Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let delta = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize()
                * 1e-6;
            let y = x + delta;
            // Strict bound for the raw signal.
            let raw_diff = (field.raw_signal(&x) - field.raw_signal(&y)).norm();
            assert!(raw_diff <= bound * delta.norm() * (1.0 + 1e-9));
            // Normalized output: first-order local bound with slack.
            let n = field.raw_signal(&x).norm().min(field.raw_signal(&y).norm());
            let norm_diff = (field.descriptor(&x) - field.descriptor(&y)).norm();
            assert!(norm_diff <= 2.0 * bound / n * delta.norm() + 1e-12);
        }
    }

    fn crop_setup() -> (TriangleMesh, RigidTransform, PinholeCamera) {
        let mesh = TriangleMesh::unit_cube("cube");
        // Cube 2 units in front of the crop camera, roughly filling the crop.
        let t_crop_obj = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 2.0));
        let cam = PinholeCamera::new(560.0, 560.0, 210.0, 210.0, 420, 420);
        (mesh, t_crop_obj, cam)
    }

    #[test]
    fn registered_features_lie_on_surface() {
        let (mesh, pose, cam) = crop_setup();
        let field = SyntheticFeatureField::from_seed("cube", 1, 16, 32, 4.0);
        let set =
            build_registered_features(&mesh, &pose, &cam, 14, &field, None, "v0").unwrap();
        assert!(!set.is_empty());
        assert!(set.len() <= (420 / 14) * (420 / 14));
        let tol = 1e-6 * mesh.diameter();
        for (entry, (row, col)) in set.entries.iter().zip(&set.cells) {
            let uv = Vec2::new((*col as f64 + 0.5) * 14.0, (*row as f64 + 0.5) * 14.0);
            let z = raycast_depth(&mesh, &pose, &cam, &uv).expect("interior cell must hit");
            let on_surface = cam.unproject(&uv, z);
            let lifted = pose.transform_point(&entry.point);
            assert!(
                (on_surface - lifted).norm() < tol,
                "lifted point off surface by {}",
                (on_surface - lifted).norm()
            );
        }
    }

    #[test]
    fn registered_features_reproject_to_cell_centers() {
        let (mesh, pose, cam) = crop_setup();
        let field = SyntheticFeatureField::from_seed("cube", 2, 16, 32, 4.0);
        let set =
            build_registered_features(&mesh, &pose, &cam, 14, &field, None, "v0").unwrap();
        for (entry, (row, col)) in set.entries.iter().zip(&set.cells) {
            let uv = cam.project(&pose.transform_point(&entry.point)).unwrap();
            let center = Vec2::new((*col as f64 + 0.5) * 14.0, (*row as f64 + 0.5) * 14.0);
            assert!((uv - center).norm() < 1e-4, "reprojection off by {}", (uv - center).norm());
        }
    }

    #[test]
    fn object_outside_crop_has_no_visible_surface() {
        let (mesh, _, cam) = crop_setup();
        let field = SyntheticFeatureField::from_seed("cube", 3, 16, 32, 4.0);
        let behind = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -3.0));
        assert!(matches!(
            build_registered_features(&mesh, &behind, &cam, 14, &field, None, "v0"),
            Err(FeatureError::NoVisibleSurface)
        ));
        let off_side = RigidTransform::from_translation(Vec3::new(50.0, 0.0, 2.0));
        assert!(matches!(
            build_registered_features(&mesh, &off_side, &cam, 14, &field, None, "v0"),
            Err(FeatureError::NoVisibleSurface)
        ));
    }

    #[test]
    fn oracle_closure_residuals_vanish_at_cell_centers() {
        let (mesh, pose, cam) = crop_setup();
        let field = SyntheticFeatureField::from_seed("cube", 4, 16, 32, 4.0);
        // Query built from the same ground-truth pose: t_cam_w = pose when
        // the object frame is taken as the world frame.
        let query = build_query_feature_map(
            &[QueryObject {
                mesh: &mesh,
                t_wo: RigidTransform::identity(),
                source: &field,
                pca: None,
            }],
            &cam,
            &pose,
            14,
            16,
            BackgroundMode::Zeros,
        )
        .unwrap();
        let set =
            build_registered_features(&mesh, &pose, &cam, 14, &field, None, "v0").unwrap();
        for entry in &set.entries {
            let uv = cam.project(&pose.transform_point(&entry.point)).unwrap();
            let sampled = query.sample_bilinear(&uv).unwrap();
            let residual = (&entry.descriptor - sampled).norm();
            assert!(residual <= 1e-6, "closure residual {residual}");
        }
    }

    #[test]
    fn nearer_object_wins_overlapping_cells() {
        let near = TriangleMesh::unit_cube("near");
        let far = TriangleMesh::unit_cube("far");
        let cam = PinholeCamera::new(560.0, 560.0, 210.0, 210.0, 420, 420);
        let f_near = SyntheticFeatureField::from_seed("near", 5, 8, 16, 2.0);
        let f_far = SyntheticFeatureField::from_seed("far", 6, 8, 16, 2.0);
        let t_near = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 2.0));
        let t_far = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 4.0));
        let query = build_query_feature_map(
            &[
                QueryObject {
                    mesh: &far,
                    t_wo: t_far,
                    source: &f_far,
                    pca: None,
                },
                QueryObject {
                    mesh: &near,
                    t_wo: t_near,
                    source: &f_near,
                    pca: None,
                },
            ],
            &cam,
            &RigidTransform::identity(),
            14,
            8,
            BackgroundMode::Zeros,
        )
        .unwrap();

        // Center cell: both objects cover it; the near cube's front face is
        // at z = 1.5, so the stored descriptor must come from f_near.
        let center_cell = query.cell_vector(15, 15);
        let uv = query.cell_center(15, 15);
        let z = raycast_depth(&near, &t_near, &cam, &uv).unwrap();
        let x_obj = t_near.inverse().transform_point(&cam.unproject(&uv, z));
        let mut expected = f_near.descriptor(&x_obj);
        quantize(&mut expected);
        assert_relative_eq!(center_cell, expected, epsilon = 1e-12);
    }

    #[test]
    fn background_modes_fill_as_specified() {
        let mesh = TriangleMesh::unit_cube("cube");
        let field = SyntheticFeatureField::from_seed("cube", 7, 8, 16, 2.0);
        let cam = PinholeCamera::new(560.0, 560.0, 210.0, 210.0, 420, 420);
        // Push the object into a corner so background cells exist.
        let t_wo = RigidTransform::from_translation(Vec3::new(0.6, 0.6, 3.0));
        let objs = [QueryObject {
            mesh: &mesh,
            t_wo,
            source: &field,
            pca: None,
        }];
        let zeros = build_query_feature_map(
            &objs,
            &cam,
            &RigidTransform::identity(),
            14,
            8,
            BackgroundMode::Zeros,
        )
        .unwrap();
        assert_eq!(zeros.cell_vector(0, 0), DVector::zeros(8));

        let noisy = build_query_feature_map(
            &objs,
            &cam,
            &RigidTransform::identity(),
            14,
            8,
            BackgroundMode::UnitNoise { seed: 99 },
        )
        .unwrap();
        assert_relative_eq!(noisy.cell_vector(0, 0).norm(), 1.0, epsilon = 1e-6);
        let again = build_query_feature_map(
            &objs,
            &cam,
            &RigidTransform::identity(),
            14,
            8,
            BackgroundMode::UnitNoise { seed: 99 },
        )
        .unwrap();
        assert_eq!(noisy, again);
    }

    #[test]
    fn fmap_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let map = random_map(&mut rng, 5, 7, 3, 14);
        let mut buf = Vec::new();
        write_feature_tensor(&map, &mut buf).unwrap();
        let back = read_feature_tensor(buf.as_slice()).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn fmap_rejects_bad_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let map = random_map(&mut rng, 2, 2, 2, 14);
        let mut buf = Vec::new();
        write_feature_tensor(&map, &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_feature_tensor(buf.as_slice()),
            Err(FeatureError::BadMagic)
        ));
    }

    #[test]
    fn fmap_detects_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let map = random_map(&mut rng, 10, 10, 32, 14);
        let mut buf = Vec::new();
        write_feature_tensor(&map, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(
            read_feature_tensor(buf.as_slice()),
            Err(FeatureError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn resampled_map_preserves_values_under_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cam = PinholeCamera::new(560.0, 560.0, 210.0, 210.0, 420, 420);
        let map = random_map(&mut rng, 30, 30, 4, 14);
        let out =
            resample_feature_map(&map, &cam, &cam, &nalgebra::Matrix3::identity(), 14).unwrap();
        // Interior cells are sampled exactly at their own centers.
        for row in 1..29 {
            for col in 1..29 {
                assert_eq!(out.cell(row, col), map.cell(row, col));
            }
        }
    }

    proptest! {
        #[test]
        fn fmap_round_trip_random(height in 1u32..6, width in 1u32..6, dim in 1u32..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(&mut rng, height, width, dim, 14);
            let mut buf = Vec::new();
            write_feature_tensor(&map, &mut buf).unwrap();
            let back = read_feature_tensor(buf.as_slice()).unwrap();
            prop_assert_eq!(map, back);
        }
    }
}
