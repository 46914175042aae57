//! Triangle meshes: OBJ subset loading, world-frame bounding boxes, and
//! pairwise diameter.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{RigidTransform, Vec3};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}:{line}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: no faces found")]
    EmptyMesh { path: String },
    #[error("mesh has {vertices} vertices and {triangles} triangles; need at least 4 of each")]
    DegenerateMesh { vertices: usize, triangles: usize },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Indexed triangle mesh in the object frame.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub object_id: String,
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(
        object_id: impl Into<String>,
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
    ) -> Result<Self, MeshError> {
        if vertices.len() < 4 || triangles.len() < 4 {
            return Err(MeshError::DegenerateMesh {
                vertices: vertices.len(),
                triangles: triangles.len(),
            });
        }
        let n = vertices.len();
        debug_assert!(triangles.iter().all(|t| t.iter().all(|&i| i < n)));
        Ok(Self {
            object_id: object_id.into(),
            vertices,
            triangles,
        })
    }

    /// Max pairwise vertex distance. Exact O(n^2); meshes here are small.
    pub fn diameter(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }

    /// World-frame axis-aligned bounding box of the posed mesh.
    pub fn aabb_world(&self, t_wo: &RigidTransform) -> Aabb3 {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            let p = t_wo.transform_point(v);
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Aabb3 { min, max }
    }

    /// Unit axis-aligned cube centered at the origin, 12 triangles.
    pub fn unit_cube(object_id: impl Into<String>) -> Self {
        let h = 0.5;
        let vertices = vec![
            Vec3::new(-h, -h, -h),
            Vec3::new(h, -h, -h),
            Vec3::new(h, h, -h),
            Vec3::new(-h, h, -h),
            Vec3::new(-h, -h, h),
            Vec3::new(h, -h, h),
            Vec3::new(h, h, h),
            Vec3::new(-h, h, h),
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [3, 7, 6],
            [3, 6, 2],
            [0, 4, 7],
            [0, 7, 3],
            [1, 2, 6],
            [1, 6, 5],
        ];
        Self {
            object_id: object_id.into(),
            vertices,
            triangles,
        }
    }
}

/// Axis-aligned box in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb3 {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb3 {
    pub fn volume(&self) -> f64 {
        (self.max - self.min)
            .iter()
            .fold(1.0, |acc, d| acc * d.max(0.0))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn intersects(&self, other: &Aabb3) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }
}

/// Load the `v`/`f` subset of an ASCII OBJ file.
///
/// Polygonal faces are fan-triangulated; normals, texcoords, and materials
/// are ignored. Indices are 1-based; negative (relative) indices are not
/// supported.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path_str.clone(),
        source,
    })?;
    let object_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path_str.clone());
    parse_obj(&text, &path_str, object_id)
}

pub fn parse_obj(
    text: &str,
    path: &str,
    object_id: impl Into<String>,
) -> Result<TriangleMesh, MeshError> {
    let err = |line: usize, msg: String| MeshError::ParseError {
        path: path.to_string(),
        line,
        msg,
    };
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .by_ref()
                    .take(3)
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| err(line_no, format!("bad vertex coordinate `{s}`")))
                    })
                    .collect::<Result<_, _>>()?;
                if coords.len() != 3 {
                    return Err(err(line_no, "vertex needs 3 coordinates".into()));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut indices = Vec::new();
                for token in parts {
                    // `i`, `i/t`, `i//n`, `i/t/n` all start with the vertex index.
                    let head = token.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| err(line_no, format!("bad face index `{token}`")))?;
                    if i < 1 {
                        return Err(err(
                            line_no,
                            format!(
                                "face index {i} out of range (negative/relative indices unsupported)"
                            ),
                        ));
                    }
                    let i = (i - 1) as usize;
                    if i >= vertices.len() {
                        return Err(err(
                            line_no,
                            format!(
                                "face index {} exceeds vertex count {}",
                                i + 1,
                                vertices.len()
                            ),
                        ));
                    }
                    indices.push(i);
                }
                if indices.len() < 3 {
                    return Err(err(line_no, "face needs at least 3 indices".into()));
                }
                for k in 1..indices.len() - 1 {
                    triangles.push([indices[0], indices[k], indices[k + 1]]);
                }
            }
            // vn, vt, usemtl, o, g, s, mtllib ...
            _ => {}
        }
    }

    if triangles.is_empty() {
        return Err(MeshError::EmptyMesh {
            path: path.to_string(),
        });
    }
    TriangleMesh::new(object_id, vertices, triangles)
}

/// Serialize the mesh as the same OBJ subset [`load_obj`] reads.
pub fn write_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    out
}
