//! Software depth rasterization.
//!
//! Z-buffered perspective rasterization of triangle meshes, used to lift
//! patch descriptors to 3D surface points. Depth is the camera-frame z of the
//! nearest surface (not ray length); pixel (i, j) samples the ray through
//! (j + 0.5, i + 0.5). No anti-aliasing.

use thiserror::Error;

use crate::geometry::{PinholeCamera, RigidTransform, Vec2, Vec3};
use crate::mesh::TriangleMesh;

/// Triangles are clipped against this camera-frame near plane.
const NEAR_Z: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("mesh is entirely behind the camera")]
    FullyBehindCamera,
}

/// Per-pixel camera-frame z values; 0 marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    depth: Vec<f64>,
}

impl DepthMap {
    fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> f64 {
        self.depth[(row * self.width + col) as usize]
    }

    #[inline]
    pub fn is_valid(&self, row: u32, col: u32) -> bool {
        self.get(row, col) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Rasterize the mesh posed by `t_co` into a depth map under `cam`.
///
/// Triangles fully behind the near plane are culled; triangles crossing it
/// are clipped. Fails only when every vertex is behind the camera.
pub fn rasterize_depth(
    mesh: &TriangleMesh,
    t_co: &RigidTransform,
    cam: &PinholeCamera,
) -> Result<DepthMap, RenderError> {
    let cam_pts: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|v| t_co.transform_point(v))
        .collect();
    if cam_pts.iter().all(|p| p[2] <= NEAR_Z) {
        return Err(RenderError::FullyBehindCamera);
    }

    let mut map = DepthMap::new(cam.width, cam.height);
    let mut clipped = Vec::with_capacity(4);
    for tri in &mesh.triangles {
        let corners = [cam_pts[tri[0]], cam_pts[tri[1]], cam_pts[tri[2]]];
        clip_near(&corners, &mut clipped);
        // Fan-triangulate the clipped polygon (convex, <= 4 vertices).
        for k in 1..clipped.len().saturating_sub(1) {
            raster_triangle(&mut map, cam, &clipped[0], &clipped[k], &clipped[k + 1]);
        }
    }
    Ok(map)
}

/// Sutherland-Hodgman clip of one triangle against z >= NEAR_Z.
fn clip_near(corners: &[Vec3; 3], out: &mut Vec<Vec3>) {
    out.clear();
    for i in 0..3 {
        let a = corners[i];
        let b = corners[(i + 1) % 3];
        let a_in = a[2] >= NEAR_Z;
        let b_in = b[2] >= NEAR_Z;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_Z - a[2]) / (b[2] - a[2]);
            out.push(a + (b - a) * t);
        }
    }
}

fn raster_triangle(map: &mut DepthMap, cam: &PinholeCamera, a: &Vec3, b: &Vec3, c: &Vec3) {
    // All three are in front of the near plane after clipping.
    let pa = project_unchecked(cam, a);
    let pb = project_unchecked(cam, b);
    let pc = project_unchecked(cam, c);

    let area = edge(&pa, &pb, &pc);
    if area.abs() < 1e-12 {
        return;
    }

    let min_x = pa[0].min(pb[0]).min(pc[0]).floor().max(0.0) as i64;
    let max_x = (pa[0].max(pb[0]).max(pc[0]).ceil() as i64).min(map.width as i64 - 1);
    let min_y = pa[1].min(pb[1]).min(pc[1]).floor().max(0.0) as i64;
    let max_y = (pa[1].max(pb[1]).max(pc[1]).ceil() as i64).min(map.height as i64 - 1);
    if min_x > max_x || min_y > max_y {
        return;
    }

    let inv_area = 1.0 / area;
    let (iza, izb, izc) = (1.0 / a[2], 1.0 / b[2], 1.0 / c[2]);
    for row in min_y..=max_y {
        for col in min_x..=max_x {
            let p = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
            // Signed barycentric weights; accept either winding.
            let w0 = edge(&pb, &pc, &p) * inv_area;
            let w1 = edge(&pc, &pa, &p) * inv_area;
            let w2 = edge(&pa, &pb, &p) * inv_area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            // 1/z is affine in screen space, so this is perspective-exact.
            let inv_z = w0 * iza + w1 * izb + w2 * izc;
            if inv_z <= 0.0 {
                continue;
            }
            let z = 1.0 / inv_z;
            let idx = (row as u32 * map.width + col as u32) as usize;
            let cur = map.depth[idx];
            if cur == 0.0 || z < cur {
                map.depth[idx] = z;
            }
        }
    }
}

#[inline]
fn project_unchecked(cam: &PinholeCamera, p: &Vec3) -> Vec2 {
    Vec2::new(
        cam.fx * p[0] / p[2] + cam.cx,
        cam.fy * p[1] / p[2] + cam.cy,
    )
}

#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Camera-frame z of the nearest mesh intersection along the ray through
/// pixel coordinates `uv`, or `None` when the ray misses. Independent
/// reference for the rasterizer and the feature-lifting tests.
pub fn raycast_depth(
    mesh: &TriangleMesh,
    t_co: &RigidTransform,
    cam: &PinholeCamera,
    uv: &Vec2,
) -> Option<f64> {
    let dir = cam.ray_dir(uv);
    let mut best: Option<f64> = None;
    for tri in &mesh.triangles {
        let a = t_co.transform_point(&mesh.vertices[tri[0]]);
        let b = t_co.transform_point(&mesh.vertices[tri[1]]);
        let c = t_co.transform_point(&mesh.vertices[tri[2]]);
        if let Some(t) = moller_trumbore(&Vec3::zeros(), &dir, &a, &b, &c) {
            // dir has unit z, so the ray parameter equals camera-frame z.
            if t > NEAR_Z && best.is_none_or(|cur| t < cur) {
                best = Some(t);
            }
        }
    }
    best
}

fn moller_trumbore(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv_det;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv_det;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    Some(e2.dot(&q) * inv_det)
}
