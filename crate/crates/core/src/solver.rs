//! Per-view feature-metric loss, its linearization, and the joint
//! multi-view Levenberg-Marquardt pose refinement.
//!
//! The objective over the world-frame object pose T_WO is the sum over views
//! of robustified per-feature costs: each registered feature (p_i, x_i) is
//! transformed by T_C'O = T_C'W * T_WO, projected into the view's query map,
//! and compared against the bilinearly sampled descriptor. The pose update is
//! a left-multiplied world-frame twist shared by all views; registered
//! features stay fixed for the whole solve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3x6, Matrix6, Vector6};

use crate::features::{FeatureMap, RegisteredFeatureSet};
use crate::geometry::{exp_se3, skew, PinholeCamera, RigidTransform, Twist, MIN_DEPTH};
use crate::robust::{rho, weight, BarronParams};

/// What to do with features whose projection leaves the query map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OobPolicy {
    /// Exclude the feature: it contributes the saturation loss to the
    /// normalized mean but no gradient.
    Drop,
    /// Clamp the sample position to the map border (zero gradient in the
    /// clamped direction).
    Clamp,
}

/// How per-view losses aggregate into a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// 1 - mean over views of the normalized loss.
    Average,
    /// 1 - worst (largest) per-view loss.
    Min,
    /// 1 - best (smallest) per-view loss.
    Max,
}

/// All per-view quantities the solver needs: crop camera, its world pose,
/// the query feature map, and the registered features built at the coarse
/// pose.
#[derive(Debug, Clone)]
pub struct ViewContext {
    pub view_id: String,
    pub crop_cam: PinholeCamera,
    pub t_crop_w: RigidTransform,
    pub query: FeatureMap,
    pub registered: RegisteredFeatureSet,
}

impl ViewContext {
    pub fn dim(&self) -> usize {
        debug_assert_eq!(self.query.dim as usize, self.registered.dim());
        self.registered.dim()
    }
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub step_tol: f64,
    pub loss_tol: f64,
    pub oob_policy: OobPolicy,
    pub barron: BarronParams,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            step_tol: 1e-6,
            loss_tol: 1e-8,
            oob_policy: OobPolicy::Drop,
            barron: BarronParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    /// Step-size or relative-decrease tolerance reached.
    Converged,
    /// Iteration budget exhausted first.
    MaxIterations,
    /// The damped normal equations became numerically singular; the best
    /// pose found so far is returned.
    SingularNormalEquations,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub pose: RigidTransform,
    pub converged: bool,
    pub status: RefineStatus,
    pub iterations: usize,
    /// Objective value at the initial pose followed by each accepted step.
    pub loss_trace: Vec<f64>,
    /// Final normalized mean loss per view.
    pub per_view_loss: BTreeMap<String, f64>,
}

/// Loss summary of one view at one pose.
#[derive(Debug, Clone, Copy)]
pub struct PerViewLoss {
    /// Sum of robust costs; excluded features contribute the saturation
    /// value when it exists (alpha < 0).
    pub sum_loss: f64,
    /// sum_loss / (n_total * rho_sup) for alpha < 0; plain mean otherwise.
    pub mean_loss: f64,
    /// True when `mean_loss` is the [0, 1]-normalized form.
    pub normalized: bool,
    pub n_inliers: usize,
    pub n_total: usize,
}

/// Evaluate one feature: sample position after the OOB policy, or `None`
/// when the feature is excluded. The second element masks gradient
/// directions zeroed by clamping (du, dv).
fn sample_position(
    view: &ViewContext,
    uv: &nalgebra::Vector2<f64>,
    policy: OobPolicy,
) -> Option<(nalgebra::Vector2<f64>, [bool; 2])> {
    if view.query.in_bounds(uv) {
        return Some((*uv, [true, true]));
    }
    match policy {
        OobPolicy::Drop => None,
        OobPolicy::Clamp => {
            let clamped = view.query.clamp_uv(uv);
            Some((clamped, [clamped[0] == uv[0], clamped[1] == uv[1]]))
        }
    }
}

/// Feature-metric loss of pose `t_wo` in one view.
pub fn per_view_loss(view: &ViewContext, t_wo: &RigidTransform, cfg: &RefineConfig) -> PerViewLoss {
    let t_crop_obj = view.t_crop_w.compose(t_wo);
    let rho_sup = cfg.barron.rho_sup();
    let n_total = view.registered.len();
    let mut sum_inlier = 0.0;
    let mut n_inliers = 0;
    let mut buf = vec![0.0f64; view.dim()];

    for feat in &view.registered.entries {
        let x_cam = t_crop_obj.transform_point(&feat.point);
        if x_cam[2] <= MIN_DEPTH {
            continue;
        }
        let Ok(uv) = view.crop_cam.project(&x_cam) else {
            continue;
        };
        let Some((uv_used, _)) = sample_position(view, &uv, cfg.oob_policy) else {
            continue;
        };
        view.query
            .sample_bilinear_into(&uv_used, &mut buf)
            .expect("clamped position is always in bounds");
        let mut norm_sq = 0.0;
        for (k, &s) in buf.iter().enumerate() {
            let d = feat.descriptor[k] - s;
            norm_sq += d * d;
        }
        sum_inlier += rho(norm_sq.sqrt(), &cfg.barron);
        n_inliers += 1;
    }

    let n_excluded = n_total - n_inliers;
    match rho_sup {
        Some(sup) => {
            let sum_loss = sum_inlier + n_excluded as f64 * sup;
            PerViewLoss {
                sum_loss,
                mean_loss: if n_total == 0 {
                    1.0
                } else {
                    sum_loss / (n_total as f64 * sup)
                },
                normalized: true,
                n_inliers,
                n_total,
            }
        }
        None => PerViewLoss {
            sum_loss: sum_inlier,
            mean_loss: if n_total == 0 {
                0.0
            } else {
                sum_inlier / n_total as f64
            },
            normalized: false,
            n_inliers,
            n_total,
        },
    }
}

/// Joint multi-view alignment objective: sum of per-view loss sums.
pub fn total_objective(views: &[ViewContext], t_wo: &RigidTransform, cfg: &RefineConfig) -> f64 {
    canonical_order(views)
        .iter()
        .map(|v| per_view_loss(v, t_wo, cfg).sum_loss)
        .sum()
}

/// IRLS-weighted residual and Jacobian stacks of one view at `t_wo`.
///
/// One D-row block per included feature: sqrt(w(|r_i|)) * r_i and
/// sqrt(w) * dr_i/dxi, with the chain dF/duv * duv/dXc * dXc/dxi and the
/// left-multiplied world twist dXc/dxi = R_C'W [I | -[X_w]x] in (v, omega)
/// block order. `J^T r` of these stacks is the exact gradient of
/// [`total_objective`]'s view term.
pub fn residuals_and_jacobian(
    view: &ViewContext,
    t_wo: &RigidTransform,
    cfg: &RefineConfig,
) -> (DVector<f64>, DMatrix<f64>) {
    let t_crop_obj = view.t_crop_w.compose(t_wo);
    let r_crop_w = view.t_crop_w.rotation;
    let dim = view.dim();
    let mut rows: Vec<f64> = Vec::new();
    let mut jac_rows: Vec<[f64; 6]> = Vec::new();
    let mut buf = vec![0.0f64; dim];

    for feat in &view.registered.entries {
        let x_world = t_wo.transform_point(&feat.point);
        let x_cam = view.t_crop_w.transform_point(&x_world);
        debug_assert!((t_crop_obj.transform_point(&feat.point) - x_cam).norm() < 1e-9);
        if x_cam[2] <= MIN_DEPTH {
            continue;
        }
        let Ok(uv) = view.crop_cam.project(&x_cam) else {
            continue;
        };
        let Some((uv_used, live)) = sample_position(view, &uv, cfg.oob_policy) else {
            continue;
        };
        view.query
            .sample_bilinear_into(&uv_used, &mut buf)
            .expect("clamped position is always in bounds");

        let mut norm_sq = 0.0;
        for (k, &s) in buf.iter().enumerate() {
            let d = feat.descriptor[k] - s;
            norm_sq += d * d;
        }
        let w_sqrt = weight(norm_sq.sqrt(), &cfg.barron).sqrt();

        // dXc/dxi = R_C'W [ I | -[X_w]x ]
        let mut d_xc = Matrix3x6::zeros();
        d_xc.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_crop_w);
        d_xc.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-r_crop_w * skew(&x_world)));
        let d_uv = view
            .crop_cam
            .project_jacobian(&x_cam)
            .expect("depth already checked");
        let mut grad_f = view
            .query
            .sample_gradient(&uv_used)
            .expect("clamped position is always in bounds");
        for (axis, live_axis) in live.iter().enumerate() {
            if !live_axis {
                grad_f.column_mut(axis).fill(0.0);
            }
        }
        // dr/dxi = -dF/duv * duv/dXc * dXc/dxi, D x 6.
        let chain = d_uv * d_xc;
        for k in 0..dim {
            rows.push(w_sqrt * (feat.descriptor[k] - buf[k]));
            let mut row = [0.0f64; 6];
            for (c, item) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..2 {
                    acc += grad_f[(k, a)] * chain[(a, c)];
                }
                *item = -w_sqrt * acc;
            }
            jac_rows.push(row);
        }
    }

    let n = rows.len();
    let residuals = DVector::from_vec(rows);
    let mut jacobian = DMatrix::zeros(n, 6);
    for (i, row) in jac_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            jacobian[(i, j)] = v;
        }
    }
    (residuals, jacobian)
}

/// Views in canonical (view_id) order so every reduction over them is
/// invariant to the caller's list order.
fn canonical_order(views: &[ViewContext]) -> Vec<&ViewContext> {
    let mut ordered: Vec<&ViewContext> = views.iter().collect();
    ordered.sort_by(|a, b| a.view_id.cmp(&b.view_id));
    ordered
}

/// Gradient of the total objective over the 6 twist coordinates.
pub fn objective_gradient(
    views: &[ViewContext],
    t_wo: &RigidTransform,
    cfg: &RefineConfig,
) -> Vector6<f64> {
    let mut g = Vector6::zeros();
    for view in canonical_order(views) {
        let (r, j) = residuals_and_jacobian(view, t_wo, cfg);
        g += j.transpose() * r;
    }
    g
}

fn normal_equations(
    views: &[&ViewContext],
    t_wo: &RigidTransform,
    cfg: &RefineConfig,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for view in views {
        let (r, j) = residuals_and_jacobian(view, t_wo, cfg);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let jtr = &jt * &r;
        for a in 0..6 {
            for b in 0..6 {
                h[(a, b)] += jtj[(a, b)];
            }
            g[a] += jtr[a];
        }
    }
    (h, g)
}

/// Levenberg-Marquardt refinement of the world pose over all views jointly.
///
/// Solves (H + lambda diag(H)) delta = -g each iteration, accepts the step
/// only when the objective decreases, and updates T <- exp(delta) * T.
/// Rejected attempts count toward `max_iters`. Terminates on step norm,
/// relative loss decrease, or the iteration budget.
pub fn lm_refine(
    views: &[ViewContext],
    t_init: &RigidTransform,
    cfg: &RefineConfig,
) -> RefineResult {
    assert!(!views.is_empty(), "refinement needs at least one view");
    let ordered = canonical_order(views);
    let mut pose = *t_init;
    let mut current = total_objective(views, &pose, cfg);
    let mut lambda = cfg.lambda_init;
    let mut trace = vec![current];
    let mut iterations = 0;
    let mut status = RefineStatus::MaxIterations;

    while iterations < cfg.max_iters {
        iterations += 1;
        let (h, g) = normal_equations(&ordered, &pose, cfg);
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)];
        }
        let delta = match damped.cholesky() {
            Some(ch) => ch.solve(&(-g)),
            None => {
                status = RefineStatus::SingularNormalEquations;
                break;
            }
        };
        if !delta.iter().all(|x| x.is_finite()) {
            status = RefineStatus::SingularNormalEquations;
            break;
        }
        if delta.norm() < cfg.step_tol {
            status = RefineStatus::Converged;
            break;
        }
        let candidate = exp_se3(&Twist::from_vector(&delta)).compose(&pose);
        let candidate_loss = total_objective(views, &candidate, cfg);
        if candidate_loss < current {
            let rel_decrease = (current - candidate_loss) / current.max(f64::MIN_POSITIVE);
            pose = candidate;
            current = candidate_loss;
            trace.push(current);
            lambda *= cfg.lambda_down;
            if rel_decrease < cfg.loss_tol {
                status = RefineStatus::Converged;
                break;
            }
        } else {
            lambda *= cfg.lambda_up;
        }
    }

    let per_view = views
        .iter()
        .map(|v| (v.view_id.clone(), per_view_loss(v, &pose, cfg).mean_loss))
        .collect();
    RefineResult {
        pose,
        converged: status == RefineStatus::Converged,
        status,
        iterations,
        loss_trace: trace,
        per_view_loss: per_view,
    }
}

/// Outcome of one analytic-vs-finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub analytic: Vector6<f64>,
    pub finite_diff: Vector6<f64>,
    /// Per-coordinate |analytic - fd| normalized by the larger gradient norm.
    pub per_coordinate_rel: [f64; 6],
    pub max_rel: f64,
}

/// Central finite-difference check of [`objective_gradient`] with step `h`
/// per twist coordinate. Errors are normalized by the gradient magnitude,
/// the scale-free measure a near-zero individual coordinate cannot inflate.
pub fn gradient_check(
    views: &[ViewContext],
    t_wo: &RigidTransform,
    cfg: &RefineConfig,
    h: f64,
) -> GradientCheck {
    let analytic = objective_gradient(views, t_wo, cfg);
    let mut finite_diff = Vector6::zeros();
    for k in 0..6 {
        let mut dp = Vector6::zeros();
        dp[k] = h;
        let up = exp_se3(&Twist::from_vector(&dp)).compose(t_wo);
        let dn = exp_se3(&Twist::from_vector(&(-dp))).compose(t_wo);
        finite_diff[k] =
            (total_objective(views, &up, cfg) - total_objective(views, &dn, cfg)) / (2.0 * h);
    }
    let scale = analytic.norm().max(finite_diff.norm()).max(1e-12);
    let mut per_coordinate_rel = [0.0f64; 6];
    let mut max_rel: f64 = 0.0;
    for k in 0..6 {
        per_coordinate_rel[k] = (analytic[k] - finite_diff[k]).abs() / scale;
        max_rel = max_rel.max(per_coordinate_rel[k]);
    }
    GradientCheck {
        analytic,
        finite_diff,
        per_coordinate_rel,
        max_rel,
    }
}

/// Feature-metric confidence of a pose: 1 minus the aggregated normalized
/// per-view loss, clamped to [0, 1].
///
/// Requires a saturating cost (alpha < 0) so the per-view losses are
/// normalized; panics otherwise.
pub fn score_pose(
    views: &[ViewContext],
    t_wo: &RigidTransform,
    mode: ScoreMode,
    cfg: &RefineConfig,
) -> f64 {
    assert!(
        cfg.barron.alpha < 0.0,
        "scoring requires a saturating cost (alpha < 0)"
    );
    let losses: Vec<f64> = canonical_order(views)
        .iter()
        .map(|v| per_view_loss(v, t_wo, cfg).mean_loss)
        .collect();
    if losses.is_empty() {
        return 0.0;
    }
    let aggregated = match mode {
        ScoreMode::Average => losses.iter().sum::<f64>() / losses.len() as f64,
        ScoreMode::Min => losses.iter().cloned().fold(f64::MIN, f64::max),
        ScoreMode::Max => losses.iter().cloned().fold(f64::MAX, f64::min),
    };
    (1.0 - aggregated).clamp(0.0, 1.0)
}
