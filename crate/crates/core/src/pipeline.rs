//! Candidate aggregation into the world frame, 3D non-maximum suppression,
//! and the full refine-and-score pipeline.
//!
//! Per-view pose candidates are expressed in the world frame, de-duplicated
//! with greedy 3D NMS over world-axis-aligned boxes, refined jointly across
//! all views that see them, scored, and passed through a second NMS that
//! collapses candidates which converged onto the same spot.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::features::{
    build_registered_features, resample_feature_map, DescriptorSource, FeatureError, FeatureMap,
    PcaBasis,
};
use crate::geometry::{make_crop_camera, PinholeCamera, RigidTransform, Vec2, Vec3, MIN_DEPTH};
use crate::mesh::{Aabb3, TriangleMesh};
use crate::solver::{lm_refine, score_pose, RefineConfig, ScoreMode, ViewContext};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("candidate references unknown view `{0}`")]
    UnknownView(String),
    #[error("candidate references unknown object `{0}`")]
    UnknownObject(String),
    #[error("no view yields usable registered features for the candidate")]
    NoUsableViews,
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// One calibrated camera of the scene.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub view_id: String,
    pub camera: PinholeCamera,
    pub t_cw: RigidTransform,
}

/// One object type that may appear in the scene.
#[derive(Debug, Clone)]
pub struct ObjectConfig {
    pub object_id: String,
    pub mesh_path: String,
    pub diameter: Option<f64>,
    pub symmetries: Vec<RigidTransform>,
}

/// Whether NMS suppresses across different object classes or only within
/// the same class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsScope {
    InterClass,
    IntraClass,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub cameras: Vec<CameraView>,
    pub objects: Vec<ObjectConfig>,
    pub nms_iou: f64,
    pub nms_scope: NmsScope,
    pub crop_size: u32,
    pub cell_size: u32,
}

impl SceneConfig {
    pub fn camera(&self, view_id: &str) -> Option<&CameraView> {
        self.cameras.iter().find(|c| c.view_id == view_id)
    }
}

/// Single-view pose estimate: object pose in one camera's frame plus the
/// estimator's confidence.
#[derive(Debug, Clone)]
pub struct PoseCandidate {
    pub object_id: String,
    pub view_id: String,
    pub t_co: RigidTransform,
    pub score: f64,
}

/// Candidate consolidated into the world frame, the unit flowing through
/// NMS -> refine -> score.
#[derive(Debug, Clone)]
pub struct WorldCandidate {
    pub object_id: String,
    pub t_wo: RigidTransform,
    pub score: f64,
    pub source_view: String,
    pub aabb: Aabb3,
}

/// Express a camera-frame candidate in the world frame:
/// `T_WO = T_CW^-1 * T_CO`.
pub fn to_world(c: &PoseCandidate, t_cw: &RigidTransform, mesh: &TriangleMesh) -> WorldCandidate {
    let t_wo = t_cw.inverse().compose(&c.t_co);
    WorldCandidate {
        object_id: c.object_id.clone(),
        t_wo,
        score: c.score,
        source_view: c.view_id.clone(),
        aabb: mesh.aabb_world(&t_wo),
    }
}

/// Intersection-over-union of two axis-aligned boxes; 0 when disjoint.
pub fn iou3d(a: &Aabb3, b: &Aabb3) -> f64 {
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = a.min[k].max(b.min[k]);
        let hi = a.max[k].min(b.max[k]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Deterministic candidate ranking: score descending, ties broken by
/// object id, source view, then lexicographic pose entries.
fn rank_candidates(a: &WorldCandidate, b: &WorldCandidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.object_id.cmp(&b.object_id))
        .then_with(|| a.source_view.cmp(&b.source_view))
        .then_with(|| {
            let pa = a.t_wo.to_row_major();
            let pb = b.t_wo.to_row_major();
            for (x, y) in pa.iter().zip(pb.iter()) {
                match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
                    Ordering::Equal => continue,
                    other => return other,
                }
            }
            Ordering::Equal
        })
}

/// Greedy 3D NMS returning the indices of kept candidates in rank order:
/// keep the best-scored candidate, suppress any remaining candidate
/// overlapping it beyond `iou_thr` (inter-class, or only within the same
/// object id for intra-class), repeat.
pub fn nms3d_indices(candidates: &[WorldCandidate], iou_thr: f64, scope: NmsScope) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| rank_candidates(&candidates[i], &candidates[j]));
    let mut suppressed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let same_class = candidates[i].object_id == candidates[j].object_id;
            if scope == NmsScope::IntraClass && !same_class {
                continue;
            }
            if iou3d(&candidates[i].aabb, &candidates[j].aabb) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// [`nms3d_indices`] materialized into the surviving candidates.
pub fn nms3d(candidates: &[WorldCandidate], iou_thr: f64, scope: NmsScope) -> Vec<WorldCandidate> {
    nms3d_indices(candidates, iou_thr, scope)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

/// Which pipeline stages run; ablations switch individual stages off.
#[derive(Debug, Clone, Copy)]
pub struct StageToggles {
    pub nms_stage1: bool,
    pub refine: bool,
    pub nms_stage2: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            nms_stage1: true,
            refine: true,
            nms_stage2: true,
        }
    }
}

/// Immutable per-scene assets the pipeline reads: meshes, descriptor
/// sources, per-view query feature maps (full camera frame), optional
/// per-object PCA bases.
pub struct SceneAssets {
    pub meshes: BTreeMap<String, TriangleMesh>,
    pub sources: BTreeMap<String, Arc<dyn DescriptorSource>>,
    pub query_maps: BTreeMap<String, FeatureMap>,
    pub pca: BTreeMap<String, PcaBasis>,
}

/// One refined, scored output pose.
#[derive(Debug, Clone)]
pub struct RefinedCandidate {
    pub object_id: String,
    pub t_wo: RigidTransform,
    pub score: f64,
    pub converged: bool,
    pub n_views: usize,
    pub per_view_loss: BTreeMap<String, f64>,
    pub source_view: String,
}

/// Per-candidate failure record; the batch never aborts.
#[derive(Debug)]
pub struct CandidateFailure {
    pub candidate_index: usize,
    pub object_id: String,
    pub error: PipelineError,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub results: Vec<RefinedCandidate>,
    pub failures: Vec<CandidateFailure>,
    pub stage1_survivors: usize,
}

/// 2D bounding box of the world-frame AABB corners projected into a view;
/// `None` when any corner is behind the camera or the box misses the image.
fn projected_bbox(cam: &PinholeCamera, t_cw: &RigidTransform, aabb: &Aabb3) -> Option<[f64; 4]> {
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let p = Vec3::new(
            if corner & 1 == 0 { aabb.min[0] } else { aabb.max[0] },
            if corner & 2 == 0 { aabb.min[1] } else { aabb.max[1] },
            if corner & 4 == 0 { aabb.min[2] } else { aabb.max[2] },
        );
        let x_cam = t_cw.transform_point(&p);
        if x_cam[2] <= MIN_DEPTH {
            return None;
        }
        let uv = cam.project(&x_cam).ok()?;
        lo = lo.inf(&uv);
        hi = hi.sup(&uv);
    }
    if hi[0] <= 0.0 || hi[1] <= 0.0 || lo[0] >= cam.width as f64 || lo[1] >= cam.height as f64 {
        return None;
    }
    Some([lo[0], lo[1], hi[0], hi[1]])
}

/// Build the per-view solver contexts for one world candidate: one context
/// per view whose projected box intersects the image and yields registered
/// features. The crop query map is resampled from the view's full-frame map
/// through the exact rotation between the two cameras.
pub fn build_view_contexts(
    scene: &SceneConfig,
    assets: &SceneAssets,
    candidate: &WorldCandidate,
) -> Result<Vec<ViewContext>, PipelineError> {
    let mesh = assets
        .meshes
        .get(&candidate.object_id)
        .ok_or_else(|| PipelineError::UnknownObject(candidate.object_id.clone()))?;
    let source = assets
        .sources
        .get(&candidate.object_id)
        .ok_or_else(|| PipelineError::UnknownObject(candidate.object_id.clone()))?;
    let pca = assets.pca.get(&candidate.object_id);

    let mut views = Vec::new();
    for cam_view in &scene.cameras {
        let Some(full_map) = assets.query_maps.get(&cam_view.view_id) else {
            continue;
        };
        let Some(bbox) = projected_bbox(&cam_view.camera, &cam_view.t_cw, &candidate.aabb) else {
            continue;
        };
        let Ok((crop_cam, t_crop_w)) =
            make_crop_camera(&cam_view.camera, &cam_view.t_cw, &bbox, scene.crop_size)
        else {
            continue;
        };
        let registered = match build_registered_features(
            mesh,
            &t_crop_w.compose(&candidate.t_wo),
            &crop_cam,
            scene.cell_size,
            source.as_ref(),
            pca,
            cam_view.view_id.clone(),
        ) {
            Ok(set) => set,
            Err(FeatureError::NoVisibleSurface) => continue,
            Err(e) => return Err(e.into()),
        };
        // x_full = R_CW * R_WC' * x_crop
        let r_full_from_crop = cam_view.t_cw.rotation * t_crop_w.rotation.transpose();
        let query = resample_feature_map(
            full_map,
            &cam_view.camera,
            &crop_cam,
            &r_full_from_crop,
            scene.cell_size,
        )?;
        views.push(ViewContext {
            view_id: cam_view.view_id.clone(),
            crop_cam,
            t_crop_w,
            query,
            registered,
        });
    }
    if views.is_empty() {
        return Err(PipelineError::NoUsableViews);
    }
    Ok(views)
}

/// Run aggregation, stage-1 NMS, joint multi-view refinement, scoring, and
/// stage-2 NMS. Per-candidate failures are collected, never fatal; the
/// output is deterministic for identical inputs.
pub fn run_pipeline(
    scene: &SceneConfig,
    assets: &SceneAssets,
    candidates: &[PoseCandidate],
    cfg: &RefineConfig,
    score_mode: ScoreMode,
    stages: StageToggles,
) -> PipelineOutput {
    let mut failures = Vec::new();

    // Stage 0: express every candidate in the world frame.
    let mut world = Vec::new();
    for (index, c) in candidates.iter().enumerate() {
        let Some(cam_view) = scene.camera(&c.view_id) else {
            failures.push(CandidateFailure {
                candidate_index: index,
                object_id: c.object_id.clone(),
                error: PipelineError::UnknownView(c.view_id.clone()),
            });
            continue;
        };
        let Some(mesh) = assets.meshes.get(&c.object_id) else {
            failures.push(CandidateFailure {
                candidate_index: index,
                object_id: c.object_id.clone(),
                error: PipelineError::UnknownObject(c.object_id.clone()),
            });
            continue;
        };
        world.push(to_world(c, &cam_view.t_cw, mesh));
    }

    // Stage 1 NMS on coarse world candidates.
    let survivors = if stages.nms_stage1 {
        nms3d(&world, scene.nms_iou, scene.nms_scope)
    } else {
        world
    };
    let stage1_survivors = survivors.len();

    // Scoring params must be normalized; fall back to defaults when the
    // refinement cost is not saturating.
    let score_cfg = if cfg.barron.alpha < 0.0 {
        cfg.clone()
    } else {
        RefineConfig {
            barron: crate::robust::BarronParams::default(),
            ..cfg.clone()
        }
    };

    // Stage 2: refine each survivor independently (parallel, order kept).
    let refined: Vec<Result<(RefinedCandidate, Aabb3), PipelineError>> = survivors
        .par_iter()
        .map(|candidate| {
            let mesh = &assets.meshes[&candidate.object_id];
            if stages.refine {
                let views = build_view_contexts(scene, assets, candidate)?;
                let result = lm_refine(&views, &candidate.t_wo, cfg);
                let score = score_pose(&views, &result.pose, score_mode, &score_cfg);
                Ok((
                    RefinedCandidate {
                        object_id: candidate.object_id.clone(),
                        t_wo: result.pose,
                        score,
                        converged: result.converged,
                        n_views: views.len(),
                        per_view_loss: result.per_view_loss,
                        source_view: candidate.source_view.clone(),
                    },
                    mesh.aabb_world(&result.pose),
                ))
            } else {
                Ok((
                    RefinedCandidate {
                        object_id: candidate.object_id.clone(),
                        t_wo: candidate.t_wo,
                        score: candidate.score,
                        converged: false,
                        n_views: 0,
                        per_view_loss: BTreeMap::new(),
                        source_view: candidate.source_view.clone(),
                    },
                    candidate.aabb,
                ))
            }
        })
        .collect();

    let mut scored = Vec::new();
    for (i, r) in refined.into_iter().enumerate() {
        match r {
            Ok((candidate, aabb)) => scored.push((candidate, aabb)),
            Err(error) => failures.push(CandidateFailure {
                candidate_index: i,
                object_id: survivors[i].object_id.clone(),
                error,
            }),
        }
    }

    // Stage 3: NMS again with refined poses and feature-metric scores.
    let results = if stages.nms_stage2 {
        let world_again: Vec<WorldCandidate> = scored
            .iter()
            .map(|(c, aabb)| WorldCandidate {
                object_id: c.object_id.clone(),
                t_wo: c.t_wo,
                score: c.score,
                source_view: c.source_view.clone(),
                aabb: *aabb,
            })
            .collect();
        nms3d_indices(&world_again, scene.nms_iou, scene.nms_scope)
            .into_iter()
            .map(|i| scored[i].0.clone())
            .collect()
    } else {
        let mut only: Vec<RefinedCandidate> = scored.into_iter().map(|(c, _)| c).collect();
        only.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        only
    };

    PipelineOutput {
        results,
        failures,
        stage1_survivors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(min: [f64; 3], max: [f64; 3]) -> Aabb3 {
        Aabb3 {
            min: Vec3::new(min[0], min[1], min[2]),
            max: Vec3::new(max[0], max[1], max[2]),
        }
    }

    fn candidate(object_id: &str, view: &str, score: f64, aabb: Aabb3) -> WorldCandidate {
        WorldCandidate {
            object_id: object_id.into(),
            t_wo: RigidTransform::from_translation(
                (aabb.min + aabb.max) * 0.5,
            ),
            score,
            source_view: view.into(),
            aabb,
        }
    }

    #[test]
    fn to_world_with_identity_extrinsics_is_identity_map() {
        let mesh = TriangleMesh::unit_cube("cube");
        let c = PoseCandidate {
            object_id: "cube".into(),
            view_id: "v0".into(),
            t_co: RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0)),
            score: 0.7,
        };
        let w = to_world(&c, &RigidTransform::identity(), &mesh);
        assert_relative_eq!(w.t_wo.translation, c.t_co.translation, epsilon = 1e-15);
        assert_eq!(w.score, 0.7);
    }

    #[test]
    fn to_world_round_trips_through_the_kinematic_chain() {
        use crate::geometry::{exp_se3, Twist};
        let mesh = TriangleMesh::unit_cube("cube");
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..100 {
            let rand_t = |rng: &mut ChaCha8Rng| {
                exp_se3(&Twist {
                    v: Vec3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ),
                    omega: Vec3::new(
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.5..1.5),
                    ),
                })
            };
            let t_cw = rand_t(&mut rng);
            let t_co = rand_t(&mut rng);
            let c = PoseCandidate {
                object_id: "cube".into(),
                view_id: "v0".into(),
                t_co,
                score: 0.5,
            };
            let w = to_world(&c, &t_cw, &mesh);
            let back = t_cw.compose(&w.t_wo);
            assert_relative_eq!(back.rotation, t_co.rotation, epsilon = 1e-12);
            assert_relative_eq!(back.translation, t_co.translation, epsilon = 1e-12);

            // 4x4 homogeneous-matrix oracle.
            use nalgebra::Matrix4;
            let to_mat = |t: &RigidTransform| {
                let mut m = Matrix4::identity();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
                m
            };
            let oracle = to_mat(&t_cw).try_inverse().unwrap() * to_mat(&t_co);
            assert_relative_eq!(to_mat(&w.t_wo), oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let a = boxed([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        assert_relative_eq!(iou3d(&a, &a), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn half_offset_unit_cubes_iou_is_one_third() {
        let a = boxed([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let b = boxed([0.5, 0.0, 0.0], [1.5, 1.0, 1.0]);
        assert_relative_eq!(iou3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = boxed([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let b = boxed([2.0, 0.0, 0.0], [3.0, 1.0, 1.0]);
        assert_eq!(iou3d(&a, &b), 0.0);
    }

    #[test]
    fn iou_matches_monte_carlo_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..20 {
            let p1 = Vec3::new(
                rng.gen_range(-1.0..0.5),
                rng.gen_range(-1.0..0.5),
                rng.gen_range(-1.0..0.5),
            );
            let p2 = p1
                + Vec3::new(
                    rng.gen_range(0.3..1.5),
                    rng.gen_range(0.3..1.5),
                    rng.gen_range(0.3..1.5),
                );
            let q1 = Vec3::new(
                rng.gen_range(-1.0..0.5),
                rng.gen_range(-1.0..0.5),
                rng.gen_range(-1.0..0.5),
            );
            let q2 = q1
                + Vec3::new(
                    rng.gen_range(0.3..1.5),
                    rng.gen_range(0.3..1.5),
                    rng.gen_range(0.3..1.5),
                );
            let a = Aabb3 { min: p1, max: p2 };
            let b = Aabb3 { min: q1, max: q2 };

            // Monte-Carlo estimate over the union's bounding box.
            let lo = p1.inf(&q1);
            let hi = p2.sup(&q2);
            let n = 100_000;
            let mut inter = 0usize;
            let mut union = 0usize;
            for _ in 0..n {
                let p = Vec3::new(
                    rng.gen_range(lo[0]..hi[0]),
                    rng.gen_range(lo[1]..hi[1]),
                    rng.gen_range(lo[2]..hi[2]),
                );
                let in_a = a.contains(&p);
                let in_b = b.contains(&p);
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
            let mc = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            assert!(
                (iou3d(&a, &b) - mc).abs() < 0.02,
                "analytic {} vs mc {}",
                iou3d(&a, &b),
                mc
            );
        }
    }

    #[test]
    fn nms_keeps_best_of_identical_pair() {
        let a = candidate("a", "v0", 0.9, boxed([0.0; 3], [1.0; 3]));
        let b = candidate("a", "v1", 0.8, boxed([0.0; 3], [1.0; 3]));
        let kept = nms3d(&[b, a.clone()], 0.4, NmsScope::InterClass);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[0].source_view, a.source_view);
    }

    #[test]
    fn nms_keeps_disjoint_candidates_regardless_of_threshold() {
        let a = candidate("a", "v0", 0.9, boxed([0.0; 3], [1.0; 3]));
        let b = candidate("b", "v1", 0.2, boxed([5.0; 3], [6.0; 3]));
        for thr in [0.01, 0.4, 0.99] {
            assert_eq!(nms3d(&[a.clone(), b.clone()], thr, NmsScope::InterClass).len(), 2);
        }
    }

    #[test]
    fn intra_class_scope_never_suppresses_across_objects() {
        let a = candidate("a", "v0", 0.9, boxed([0.0; 3], [1.0; 3]));
        let b = candidate("b", "v1", 0.5, boxed([0.0; 3], [1.0; 3]));
        assert_eq!(nms3d(&[a.clone(), b.clone()], 0.4, NmsScope::InterClass).len(), 1);
        assert_eq!(nms3d(&[a, b], 0.4, NmsScope::IntraClass).len(), 2);
    }

    /// Exhaustive O(n^2) reference implementation of greedy NMS.
    fn nms_reference(
        candidates: &[WorldCandidate],
        iou_thr: f64,
        scope: NmsScope,
    ) -> Vec<WorldCandidate> {
        let mut pool: Vec<WorldCandidate> = candidates.to_vec();
        pool.sort_by(rank_candidates);
        let mut kept: Vec<WorldCandidate> = Vec::new();
        'outer: for c in pool {
            for k in &kept {
                let class_ok = scope == NmsScope::InterClass || k.object_id == c.object_id;
                if class_ok && iou3d(&k.aabb, &c.aabb) > iou_thr {
                    continue 'outer;
                }
            }
            kept.push(c);
        }
        kept
    }

    fn random_candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<WorldCandidate> {
        (0..n)
            .map(|i| {
                let center = Vec3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                let half = Vec3::new(
                    rng.gen_range(0.2..0.9),
                    rng.gen_range(0.2..0.9),
                    rng.gen_range(0.2..0.9),
                );
                candidate(
                    ["a", "b", "c"][i % 3],
                    &format!("v{}", i % 4),
                    rng.gen_range(0.0..1.0),
                    Aabb3 {
                        min: center - half,
                        max: center + half,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn nms_matches_exhaustive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let candidates = random_candidates(&mut rng, 200);
        for thr in [0.2, 0.4, 0.6, 0.8] {
            for scope in [NmsScope::InterClass, NmsScope::IntraClass] {
                let fast = nms3d(&candidates, thr, scope);
                let slow = nms_reference(&candidates, thr, scope);
                assert_eq!(fast.len(), slow.len());
                for (f, s) in fast.iter().zip(&slow) {
                    assert_eq!(f.t_wo.to_row_major(), s.t_wo.to_row_major());
                }
            }
        }
    }

    #[test]
    fn nms_output_is_subset_with_valid_suppression_certificates() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let candidates = random_candidates(&mut rng, 80);
        let kept = nms3d(&candidates, 0.4, NmsScope::InterClass);
        assert!(kept.len() <= candidates.len());
        // Every suppressed candidate overlaps some kept candidate with a
        // score at least as good.
        for c in &candidates {
            let was_kept = kept
                .iter()
                .any(|k| k.t_wo.to_row_major() == c.t_wo.to_row_major());
            if !was_kept {
                assert!(
                    kept.iter()
                        .any(|k| k.score >= c.score && iou3d(&k.aabb, &c.aabb) > 0.4),
                    "suppressed candidate lacks a dominating overlap"
                );
            }
        }
    }

    #[test]
    fn nms_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let candidates = random_candidates(&mut rng, 120);
        let once = nms3d(&candidates, 0.4, NmsScope::InterClass);
        let twice = nms3d(&once, 0.4, NmsScope::InterClass);
        assert_eq!(once.len(), twice.len());
    }

    #[test]
    fn nms_is_invariant_to_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut candidates = random_candidates(&mut rng, 100);
        let a = nms3d(&candidates, 0.4, NmsScope::InterClass);
        candidates.reverse();
        let b = nms3d(&candidates, 0.4, NmsScope::InterClass);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.t_wo.to_row_major(), y.t_wo.to_row_major());
        }
    }

    #[test]
    fn empty_candidate_list_yields_empty_output() {
        assert!(nms3d(&[], 0.4, NmsScope::InterClass).is_empty());
    }
}
