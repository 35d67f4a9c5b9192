#pragma once

// Annotation fitting: the per-frame multi-objective optimizer over
// {theta, delta-rotation, delta-translation, per-vertex pressure}, shape
// calibration over multiple frames, the wrist-camera extrinsics
// least-squares solver, and residualized extrinsics composition.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "handpress/camera.hpp"
#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"
#include "handpress/handmodel.hpp"
#include "handpress/pressrender.hpp"

namespace handpress::annofit {

using geometry::Mat3;
using geometry::RigidTransform;
using geometry::Vec3;

inline constexpr int kNumVertices = handmodel::kNumVertices;
inline constexpr int kNumDofs = handmodel::kNumDofs;
// Free parameters: 20 theta + 3 delta-rot + 3 delta-trans + 778 raw pressure.
inline constexpr int kNumParams = kNumDofs + 3 + 3 + kNumVertices;

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline double softplus_derivative(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Inverse of softplus; y must be positive.
inline double inv_softplus(double y) {
    if (y > 30.0) return y;
    return std::log(std::expm1(std::max(y, 1e-12)));
}

/// Free parameters of the annotation optimizer. Pressure is stored as a raw
/// pre-softplus vector so non-negativity is structural.
struct AnnoParams {
    handmodel::HandPose theta;
    Vec3 delta_rot = Vec3::Zero();   // axis-angle
    Vec3 delta_trans = Vec3::Zero(); // meters
    Eigen::VectorXd pv_raw = Eigen::VectorXd::Constant(kNumVertices, -10.0);

    Eigen::VectorXd pressure() const {
        Eigen::VectorXd pv(kNumVertices);
        for (int i = 0; i < kNumVertices; ++i) pv(i) = softplus(pv_raw(i));
        return pv;
    }

    void set_pressure(const Eigen::VectorXd& pv) {
        for (int i = 0; i < kNumVertices; ++i) pv_raw(i) = inv_softplus(std::max(pv(i), 1e-9));
    }

    Eigen::VectorXd pack() const {
        Eigen::VectorXd x(kNumParams);
        x.head<kNumDofs>() = theta.theta;
        x.segment<3>(kNumDofs) = delta_rot;
        x.segment<3>(kNumDofs + 3) = delta_trans;
        x.tail(kNumVertices) = pv_raw;
        return x;
    }

    static AnnoParams unpack(const Eigen::VectorXd& x) {
        AnnoParams p;
        p.theta.theta = x.head<kNumDofs>();
        p.delta_rot = x.segment<3>(kNumDofs);
        p.delta_trans = x.segment<3>(kNumDofs + 3);
        p.pv_raw = x.tail(kNumVertices);
        return p;
    }
};

/// One frame of observations driving the optimizer. The base transform is
/// the marker-derived hand-local -> world initialization [R0 | T0].
struct FrameObservations {
    Eigen::Matrix<double, 21, 3> markers_world = Eigen::Matrix<double, 21, 3>::Zero();
    Eigen::Matrix<double, 21, 2> keypoints_2d = Eigen::Matrix<double, 21, 2>::Zero();
    std::array<bool, 21> keypoint_visible{};
    pressrender::PressureMap p_gt;
    pressrender::OrthoCamera sensor;
    RigidTransform base_transform;
    std::optional<Eigen::MatrixXd> hand_mask; // [0,1], Kinect view silhouette
    std::optional<camera::PinholeModel> kinect_pinhole;
    std::optional<RigidTransform> kinect_extrinsics; // world -> Kinect camera
};

struct OptimConfig {
    // Loss weights.
    double w_press = 1.0, w_hand = 0.1;
    double w_3d = 1e4, w_2d = 1e-2, w_mask = 1.0, w_anat = 10.0, w_reg = 1e-3;
    double lambda_kp = 1.0, lambda_rot = 1.0, lambda_trans = 1.0;
    double lambda_bce = 1.0, lambda_dice = 1.0;
    // Renderer parameters.
    double delta = 0.1, epsilon = 0.002, tau = 0.001, gamma_g = 5.0, kappa = 0.001;
    double h_max = 2000.0; // pressure scale (grams)
    // Solver controls.
    int max_iterations = 600;
    double grad_tolerance = 1e-7;
    double step_theta = 2e-3, step_rot = 2e-3, step_trans = 5e-5, step_pv = 0.5;
    bool alternate_pressure = false; // alternate theta/pose and pv blocks

    pressrender::RenderLossConfig render_config() const {
        pressrender::RenderLossConfig rc;
        rc.gamma_g = gamma_g;
        rc.delta = delta;
        rc.epsilon = epsilon;
        rc.tau = tau;
        rc.kappa = kappa;
        rc.w_press = w_press;
        rc.w_hand = w_hand;
        return rc;
    }
};

/// 3D and 2D marker consistency losses (mean squared, camera frame).
inline std::pair<double, double> marker_losses(const handmodel::HandPose& theta,
                                               const handmodel::HandShape& shape,
                                               const RigidTransform& transform,
                                               const FrameObservations& obs,
                                               const camera::PinholeModel& pinhole,
                                               const RigidTransform& kinect) {
    const auto joints_local = handmodel::forward_kinematics(theta, shape);
    double l3d = 0.0, l2d = 0.0;
    for (int j = 0; j < 21; ++j) {
        const Vec3 pred_world = transform.apply(joints_local.row(j));
        const Vec3 pred_cam = kinect.apply(pred_world);
        const Vec3 gt_cam = kinect.apply(obs.markers_world.row(j));
        l3d += (pred_cam - gt_cam).squaredNorm();
        l2d += (camera::pinhole_project(pinhole, pred_cam) -
                camera::pinhole_project(pinhole, gt_cam))
                   .squaredNorm();
    }
    return {l3d / 21.0, l2d / 21.0};
}

namespace detail {

/// Soft silhouette from splat occupancy: O = 1 - exp(-sum of weights).
/// Returns BCE+Dice loss and d loss / d camera-frame vertices.
struct SilhouetteResult {
    double loss = 0.0;
    Eigen::MatrixX3d d_verts_cam;
};

inline SilhouetteResult silhouette_loss_with_grad(const Eigen::MatrixX3d& verts_cam,
                                                  const camera::PinholeModel& pinhole,
                                                  const Eigen::MatrixXd& mask_gt,
                                                  double lambda_bce, double lambda_dice) {
    const auto rows = mask_gt.rows(), cols = mask_gt.cols();
    const auto n = verts_cam.rows();
    SilhouetteResult out;
    out.d_verts_cam = Eigen::MatrixX3d::Zero(n, 3);

    struct Proj {
        int ix, iy;
        double wx, wy;
        bool ok;
        Eigen::Matrix<double, 2, 3> jac;
    };
    std::vector<Proj> projs(n);
    Eigen::MatrixXd accum = Eigen::MatrixXd::Zero(rows, cols);
    for (Eigen::Index i = 0; i < n; ++i) {
        Proj& p = projs[i];
        p.ok = false;
        const Vec3 xc = verts_cam.row(i);
        if (xc.z() <= 1e-9) continue;
        const auto px = camera::pinhole_project(pinhole, xc);
        p.jac = camera::pinhole_project_jacobian(pinhole, xc);
        p.ix = static_cast<int>(std::floor(px.x()));
        p.iy = static_cast<int>(std::floor(px.y()));
        p.wx = px.x() - p.ix;
        p.wy = px.y() - p.iy;
        if (px.x() <= -1.0 || px.x() >= cols || px.y() <= -1.0 || px.y() >= rows) continue;
        p.ok = true;
        for (int dy = 0; dy < 2; ++dy) {
            const int y = p.iy + dy;
            if (y < 0 || y >= rows) continue;
            for (int dx = 0; dx < 2; ++dx) {
                const int x = p.ix + dx;
                if (x < 0 || x >= cols) continue;
                accum(y, x) += (dx ? p.wx : 1.0 - p.wx) * (dy ? p.wy : 1.0 - p.wy);
            }
        }
    }

    constexpr double eps = 1e-7;
    const Eigen::MatrixXd occ = 1.0 - (-accum.array()).exp();
    const Eigen::MatrixXd occ_c = occ.array().min(1.0 - eps).max(eps);

    const double inter = (occ.array() * mask_gt.array()).sum();
    const double denom = occ.sum() + mask_gt.sum();
    const double dice = denom > 0.0 ? 2.0 * inter / denom : 1.0;

    double bce = 0.0;
    for (Eigen::Index y = 0; y < rows; ++y) {
        for (Eigen::Index x = 0; x < cols; ++x) {
            const double m = mask_gt(y, x);
            bce += -(m * std::log(occ_c(y, x)) + (1.0 - m) * std::log(1.0 - occ_c(y, x)));
        }
    }
    const double npix = static_cast<double>(rows * cols);
    bce /= npix;
    out.loss = lambda_bce * bce + lambda_dice * (1.0 - dice);

    // d loss / d occupancy.
    Eigen::MatrixXd g_occ(rows, cols);
    for (Eigen::Index y = 0; y < rows; ++y) {
        for (Eigen::Index x = 0; x < cols; ++x) {
            const double m = mask_gt(y, x);
            const double o = occ_c(y, x);
            double g = lambda_bce * (-(m / o) + (1.0 - m) / (1.0 - o)) / npix;
            if (denom > 0.0) {
                g += lambda_dice * (-(2.0 * m * denom - 2.0 * inter) / (denom * denom));
            }
            g_occ(y, x) = g;
        }
    }
    // d occupancy / d accum = exp(-accum).
    const Eigen::MatrixXd g_accum = g_occ.array() * (-accum.array()).exp();

    for (Eigen::Index i = 0; i < n; ++i) {
        const Proj& p = projs[i];
        if (!p.ok) continue;
        double gx = 0.0, gy = 0.0;
        for (int dy = 0; dy < 2; ++dy) {
            const int y = p.iy + dy;
            if (y < 0 || y >= rows) continue;
            const double wyv = dy ? p.wy : 1.0 - p.wy;
            for (int dx = 0; dx < 2; ++dx) {
                const int x = p.ix + dx;
                if (x < 0 || x >= cols) continue;
                const double wxv = dx ? p.wx : 1.0 - p.wx;
                const double g = g_accum(y, x);
                gx += (dx ? wyv : -wyv) * g;
                gy += (dy ? wxv : -wxv) * g;
            }
        }
        out.d_verts_cam.row(i) += gx * p.jac.row(0) + gy * p.jac.row(1);
    }
    return out;
}

} // namespace detail

struct ObjectiveTerms {
    double markers = 0.0;
    double mask = 0.0;
    double render = 0.0;
    double anat = 0.0;
    double reg = 0.0;
};

/// Full fitting objective with analytic gradient over all free parameters.
inline std::pair<double, Eigen::VectorXd> total_objective(const AnnoParams& params,
                                                          const handmodel::HandShape& shape,
                                                          const FrameObservations& obs,
                                                          const OptimConfig& cfg,
                                                          ObjectiveTerms* terms = nullptr) {
    if (!params.pack().allFinite()) throw DegenerateInput("total_objective: non-finite params");

    handmodel::PoseJacobians jac;
    const auto mesh = handmodel::skin_mesh_with_jacobian(params.theta, shape, jac);

    const Mat3 delta_r = geometry::exp_so3(params.delta_rot);
    const Mat3 r_w = obs.base_transform.rot * delta_r;
    const Vec3 t_w = obs.base_transform.trans + params.delta_trans;

    const Eigen::MatrixX3d verts_world =
        (mesh.vertices * r_w.transpose()).rowwise() + t_w.transpose();
    Eigen::Matrix<double, 21, 3> joints_world =
        (mesh.joints * r_w.transpose()).rowwise() + t_w.transpose();

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(kNumParams);
    Eigen::MatrixX3d g_vw = Eigen::MatrixX3d::Zero(kNumVertices, 3);
    Eigen::Matrix<double, 21, 3> g_jw = Eigen::Matrix<double, 21, 3>::Zero();

    ObjectiveTerms t{};

    // Marker terms (3D always; 2D when the Kinect camera is known).
    const bool have_kinect = obs.kinect_pinhole.has_value() && obs.kinect_extrinsics.has_value();
    const RigidTransform kin = have_kinect ? *obs.kinect_extrinsics : RigidTransform::identity();
    double l3d = 0.0, l2d = 0.0;
    for (int j = 0; j < 21; ++j) {
        const Vec3 pred_cam = kin.apply(joints_world.row(j));
        const Vec3 gt_cam = kin.apply(obs.markers_world.row(j));
        const Vec3 diff = pred_cam - gt_cam;
        l3d += diff.squaredNorm() / 21.0;
        Vec3 g_cam = cfg.w_3d * (2.0 / 21.0) * diff;
        if (have_kinect && pred_cam.z() > 1e-9 && gt_cam.z() > 1e-9) {
            const auto pj = camera::pinhole_project_jacobian(*obs.kinect_pinhole, pred_cam);
            const Eigen::Vector2d d2 = camera::pinhole_project(*obs.kinect_pinhole, pred_cam) -
                                       camera::pinhole_project(*obs.kinect_pinhole, gt_cam);
            l2d += d2.squaredNorm() / 21.0;
            g_cam += cfg.w_2d * (2.0 / 21.0) * (pj.transpose() * d2);
        }
        g_jw.row(j) += (kin.rot.transpose() * g_cam).transpose();
    }
    t.markers = cfg.w_3d * l3d + cfg.w_2d * l2d;

    // Silhouette mask term (BCE + Dice on splat occupancy).
    if (obs.hand_mask && have_kinect) {
        const Eigen::MatrixX3d verts_cam =
            (verts_world * kin.rot.transpose()).rowwise() + kin.trans.transpose();
        const auto sil = detail::silhouette_loss_with_grad(verts_cam, *obs.kinect_pinhole,
                                                           *obs.hand_mask, cfg.lambda_bce,
                                                           cfg.lambda_dice);
        t.mask = cfg.w_mask * sil.loss;
        g_vw += cfg.w_mask * sil.d_verts_cam * kin.rot;
    }

    // Render losses and their vertex/pressure gradients.
    Eigen::VectorXd pv(kNumVertices), dpv_draw(kNumVertices);
    for (int i = 0; i < kNumVertices; ++i) {
        pv(i) = softplus(params.pv_raw(i));
        dpv_draw(i) = softplus_derivative(params.pv_raw(i));
    }
    const auto render = pressrender::render_losses_with_grad(verts_world, pv, obs.sensor,
                                                             obs.p_gt, cfg.render_config());
    t.render = render.losses.total;
    g_vw += render.d_verts;
    grad.tail(kNumVertices) = render.d_pv.cwiseProduct(dpv_draw);

    // Anatomical hinge and delta regularization.
    Eigen::Matrix<double, kNumDofs, 1> g_anat;
    t.anat = cfg.w_anat * handmodel::anatomical_penalty(params.theta, &g_anat);
    grad.head<kNumDofs>() += cfg.w_anat * g_anat;
    t.reg = cfg.w_reg * (params.delta_rot.squaredNorm() + params.delta_trans.squaredNorm());
    grad.segment<3>(kNumDofs) += cfg.w_reg * 2.0 * params.delta_rot;
    grad.segment<3>(kNumDofs + 3) += cfg.w_reg * 2.0 * params.delta_trans;

    // Chain world-space gradients back to theta and the delta transform.
    for (int k = 0; k < kNumDofs; ++k) {
        double acc = 0.0;
        acc += (g_vw.array() * (jac.dvertices[k] * r_w.transpose()).array()).sum();
        acc += (g_jw.array() * (jac.djoints[k] * r_w.transpose()).array()).sum();
        grad(k) += acc;
    }
    // Outer product accumulator for the rotation chain rule:
    // d/d omega_i of sum g . (R0 dexp_i p) = <R0 dexp_i, sum g p^T>.
    Mat3 outer = Mat3::Zero();
    for (int vtx = 0; vtx < kNumVertices; ++vtx) {
        outer += Vec3(g_vw.row(vtx)) * Vec3(mesh.vertices.row(vtx)).transpose();
    }
    for (int j = 0; j < 21; ++j) {
        outer += Vec3(g_jw.row(j)) * Vec3(mesh.joints.row(j)).transpose();
    }
    for (int i = 0; i < 3; ++i) {
        const Mat3 m = obs.base_transform.rot * geometry::dexp_so3(params.delta_rot, i);
        grad(kNumDofs + i) += (m.array() * outer.array()).sum();
    }
    const Vec3 g_trans = g_vw.colwise().sum().transpose() + g_jw.colwise().sum().transpose();
    grad.segment<3>(kNumDofs + 3) += g_trans;

    const double total = t.markers + t.mask + t.render + t.anat + t.reg;
    if (!std::isfinite(total)) throw NonFiniteLoss("total_objective: non-finite loss");
    if (terms) *terms = t;
    return {total, grad};
}

namespace detail {

/// Levenberg-Marquardt on (theta, delta_rot, delta_trans) over the 3D marker
/// residuals plus anatomical hinge and delta regularization. Pressure is
/// untouched; this supplies the pose for the later full-objective passes.
inline void refine_pose_lm(AnnoParams& params, const handmodel::HandShape& shape,
                           const FrameObservations& obs, const OptimConfig& cfg) {
    constexpr int kPose = kNumDofs + 6;
    const double s3d = std::sqrt(cfg.w_3d / 21.0);
    const double sreg = std::sqrt(cfg.w_reg);
    const double sanat = std::sqrt(cfg.w_anat);
    const int n_res = 63 + kNumDofs + 6;

    auto residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r,
                         Eigen::MatrixXd* jac) {
        handmodel::HandPose pose;
        pose.theta = x.head<kNumDofs>();
        const Vec3 d_rot = x.segment<3>(kNumDofs);
        const Vec3 d_trans = x.segment<3>(kNumDofs + 3);
        const Mat3 r_w = obs.base_transform.rot * geometry::exp_so3(d_rot);
        const Vec3 t_w = obs.base_transform.trans + d_trans;

        handmodel::PoseJacobians pj;
        Eigen::Matrix<double, 21, 3> joints;
        if (jac) {
            const auto mesh = handmodel::skin_mesh_with_jacobian(pose, shape, pj);
            joints = mesh.joints;
            jac->setZero(n_res, kPose);
        } else {
            joints = handmodel::forward_kinematics(pose, shape);
        }

        r.resize(n_res);
        for (int j = 0; j < 21; ++j) {
            const Vec3 pred = r_w * Vec3(joints.row(j)) + t_w;
            r.segment<3>(3 * j) = s3d * (pred - Vec3(obs.markers_world.row(j)));
            if (jac) {
                for (int k = 0; k < kNumDofs; ++k) {
                    jac->block<3, 1>(3 * j, k) = s3d * (r_w * Vec3(pj.djoints[k].row(j)));
                }
                for (int i = 0; i < 3; ++i) {
                    jac->block<3, 1>(3 * j, kNumDofs + i) =
                        s3d * (obs.base_transform.rot * geometry::dexp_so3(d_rot, i) *
                               Vec3(joints.row(j)));
                }
                jac->block<3, 3>(3 * j, kNumDofs + 3) = s3d * Mat3::Identity();
            }
        }
        for (int d = 0; d < kNumDofs; ++d) {
            double lo, hi;
            handmodel::dof_limits(d, lo, hi);
            const double th = x(d);
            const double excess = th > hi ? th - hi : (th < lo ? th - lo : 0.0);
            r(63 + d) = sanat * excess;
            if (jac && excess != 0.0) (*jac)(63 + d, d) = sanat;
        }
        for (int i = 0; i < 6; ++i) {
            r(63 + kNumDofs + i) = sreg * x(kNumDofs + i);
            if (jac) (*jac)(63 + kNumDofs + i, kNumDofs + i) = sreg;
        }
    };

    Eigen::VectorXd x(kPose);
    x.head<kNumDofs>() = params.theta.theta;
    x.segment<3>(kNumDofs) = params.delta_rot;
    x.segment<3>(kNumDofs + 3) = params.delta_trans;

    Eigen::VectorXd r;
    residuals(x, r, nullptr);
    double cost = r.squaredNorm();
    double damping = 1e-4;

    for (int it = 0; it < 100; ++it) {
        Eigen::MatrixXd jac;
        residuals(x, r, &jac);
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd jtr = jac.transpose() * r;
        if (jtr.norm() < 1e-12) break;

        bool accepted = false;
        while (damping < 1e10) {
            Eigen::MatrixXd h = jtj;
            h.diagonal() += damping * jtj.diagonal().cwiseMax(1e-12);
            const Eigen::VectorXd delta = h.ldlt().solve(-jtr);
            const Eigen::VectorXd x_new = x + delta;
            Eigen::VectorXd r_new;
            residuals(x_new, r_new, nullptr);
            const double cost_new = r_new.squaredNorm();
            if (cost_new <= cost) {
                const double improvement = cost - cost_new;
                x = x_new;
                cost = cost_new;
                damping = std::max(damping * 0.3, 1e-12);
                accepted = true;
                if (improvement < 1e-14 * (1.0 + cost) || delta.norm() < 1e-12) it = 100;
                break;
            }
            damping *= 10.0;
        }
        if (!accepted) break;
    }

    params.theta.theta = x.head<kNumDofs>();
    params.delta_rot = x.segment<3>(kNumDofs);
    params.delta_trans = x.segment<3>(kNumDofs + 3);
}

/// Pressure-only solve with the pose held fixed. The splat is linear in pv,
/// so this is non-negative linear least squares on the pressure MSE, solved
/// by projected gradient descent with a Lipschitz step.
inline void refine_pressure(AnnoParams& params, const handmodel::HandShape& shape,
                            const FrameObservations& obs, const OptimConfig& cfg,
                            int iterations = 3000) {
    const auto mesh = handmodel::skin_mesh(params.theta, shape);
    const Mat3 r_w = obs.base_transform.rot * geometry::exp_so3(params.delta_rot);
    const Vec3 t_w = obs.base_transform.trans + params.delta_trans;
    const Eigen::MatrixX3d verts_world =
        (mesh.vertices * r_w.transpose()).rowwise() + t_w.transpose();

    // Fixed splat footprint per vertex: (cell, weight) pairs.
    struct Cell {
        int idx;
        double w;
    };
    std::vector<std::vector<Cell>> cells(kNumVertices);
    const auto& cam = obs.sensor;
    for (int i = 0; i < kNumVertices; ++i) {
        const auto s = pressrender::detail::make_splat(cam, verts_world.row(i));
        pressrender::detail::for_each_cell(cam, s, [&](int r, int c, double w, double, double) {
            cells[i].push_back({r * cam.cols + c, w});
        });
    }
    const int n_cells = cam.rows * cam.cols;
    Eigen::VectorXd gt(n_cells);
    for (int r = 0; r < cam.rows; ++r) {
        for (int c = 0; c < cam.cols; ++c) gt(r * cam.cols + c) = obs.p_gt.grid(r, c);
    }

    auto apply = [&](const Eigen::VectorXd& pv, Eigen::VectorXd& out) {
        out.setZero(n_cells);
        for (int i = 0; i < kNumVertices; ++i) {
            for (const auto& cell : cells[i]) out(cell.idx) += cell.w * pv(i);
        }
    };
    auto apply_t = [&](const Eigen::VectorXd& grid, Eigen::VectorXd& out) {
        out.setZero(kNumVertices);
        for (int i = 0; i < kNumVertices; ++i) {
            for (const auto& cell : cells[i]) out(i) += cell.w * grid(cell.idx);
        }
    };

    // Power iteration for ||A||^2 (A = splat operator) to set the step size.
    Eigen::VectorXd v = Eigen::VectorXd::Ones(kNumVertices), av(n_cells), atav(kNumVertices);
    double norm2 = 1.0;
    for (int it = 0; it < 30; ++it) {
        apply(v, av);
        apply_t(av, atav);
        norm2 = atav.norm();
        if (norm2 < 1e-30) return; // hand entirely off-grid
        v = atav / norm2;
    }
    const double hw = static_cast<double>(n_cells);
    const double lipschitz = 2.0 * cfg.w_press * norm2 / hw;
    const double step = 1.0 / std::max(lipschitz, 1e-30);

    Eigen::VectorXd pv = params.pressure().cwiseMax(0.0), pred(n_cells), grad(kNumVertices);
    for (int it = 0; it < iterations; ++it) {
        apply(pv, pred);
        apply_t(pred - gt, grad);
        grad *= 2.0 * cfg.w_press / hw;
        const Eigen::VectorXd pv_new = (pv - step * grad).cwiseMax(0.0);
        if ((pv_new - pv).lpNorm<Eigen::Infinity>() < 1e-12) break;
        pv = pv_new;
    }
    params.set_pressure(pv);
}

} // namespace detail

struct FitReport {
    double final_loss = 0.0;
    int iterations = 0;
    ObjectiveTerms terms;
    double wall_ms = 0.0;
    AnnoParams params;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["final_loss"] = final_loss;
        j["iterations"] = iterations;
        j["wall_ms"] = wall_ms;
        j["terms"] = {{"markers", terms.markers},
                      {"mask", terms.mask},
                      {"render", terms.render},
                      {"anat", terms.anat},
                      {"reg", terms.reg}};
        const auto x = params.pack();
        j["params"] = {{"theta", std::vector<double>(x.data(), x.data() + kNumDofs)},
                       {"delta_rot", {params.delta_rot.x(), params.delta_rot.y(), params.delta_rot.z()}},
                       {"delta_trans",
                        {params.delta_trans.x(), params.delta_trans.y(), params.delta_trans.z()}}};
        return j;
    }
};

/// Monotone preconditioned gradient descent with backtracking line search.
inline std::pair<AnnoParams, FitReport> optimize_annotation(const AnnoParams& init,
                                                            const handmodel::HandShape& shape,
                                                            const FrameObservations& obs,
                                                            const OptimConfig& cfg) {
    const auto t_start = std::chrono::steady_clock::now();
    if (!init.pack().allFinite()) throw DegenerateInput("optimize_annotation: non-finite init");

    // Block phases: marker-driven pose solve, then pressure against the
    // sensor map, then full-objective polish over everything.
    AnnoParams staged = init;
    detail::refine_pose_lm(staged, shape, obs, cfg);
    detail::refine_pressure(staged, shape, obs, cfg);
    Eigen::VectorXd x = staged.pack();

    Eigen::VectorXd step_scale(kNumParams);
    step_scale.head<kNumDofs>().setConstant(cfg.step_theta);
    step_scale.segment<3>(kNumDofs).setConstant(cfg.step_rot);
    step_scale.segment<3>(kNumDofs + 3).setConstant(cfg.step_trans);
    step_scale.tail(kNumVertices).setConstant(cfg.step_pv);

    ObjectiveTerms terms;
    auto eval = [&](const Eigen::VectorXd& xv, ObjectiveTerms* tm) {
        return total_objective(AnnoParams::unpack(xv), shape, obs, cfg, tm);
    };

    auto [loss, grad] = eval(x, &terms);
    Eigen::VectorXd rms = Eigen::VectorXd::Constant(kNumParams, 1e-12);
    double lambda = 1.0;
    int it = 0;
    for (; it < cfg.max_iterations; ++it) {
        if (grad.norm() < cfg.grad_tolerance) break;
        rms = 0.9 * rms.array() + 0.1 * grad.array().square();
        Eigen::VectorXd dir =
            (grad.array() / (rms.array().sqrt() + 1e-9)).matrix().cwiseProduct(step_scale);
        if (cfg.alternate_pressure) {
            // Alternate pose-block and pressure-block updates between iterations.
            if (it % 2 == 0) {
                dir.tail(kNumVertices).setZero();
            } else {
                dir.head(kNumDofs + 6).setZero();
            }
        }

        bool accepted = false;
        double trial = lambda;
        for (int bt = 0; bt < 40; ++bt) {
            const Eigen::VectorXd x_new = x - trial * dir;
            ObjectiveTerms terms_new;
            double loss_new;
            Eigen::VectorXd grad_new;
            try {
                std::tie(loss_new, grad_new) = eval(x_new, &terms_new);
            } catch (const NonFiniteLoss&) {
                trial *= 0.5;
                continue;
            }
            if (loss_new <= loss) {
                x = x_new;
                loss = loss_new;
                grad = std::move(grad_new);
                terms = terms_new;
                lambda = std::min(trial * 1.4, 4.0);
                accepted = true;
                break;
            }
            trial *= 0.5;
        }
        if (!accepted) break;
    }

    FitReport report;
    report.final_loss = loss;
    report.iterations = it;
    report.terms = terms;
    report.params = AnnoParams::unpack(x);
    report.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t_start)
                         .count();
    return {report.params, report};
}

/// Joint shape/per-frame-pose calibration; beta is projected onto [0.5, 2].
inline handmodel::HandShape calibrate_shape(const std::vector<FrameObservations>& frames,
                                            const handmodel::HandShape& init_beta,
                                            const std::vector<handmodel::HandPose>& init_thetas,
                                            const OptimConfig& cfg) {
    if (frames.size() < 3) throw InsufficientFrames("calibrate_shape: need >= 3 frames");
    if (init_thetas.size() != frames.size()) {
        throw ShapeMismatch("calibrate_shape: one init pose per frame required");
    }
    const int nf = static_cast<int>(frames.size());
    const int dim = 10 + nf * kNumDofs;

    Eigen::VectorXd x(dim);
    x.head<10>() = init_beta.beta;
    for (int f = 0; f < nf; ++f) x.segment<kNumDofs>(10 + f * kNumDofs) = init_thetas[f].theta;

    auto objective = [&](const Eigen::VectorXd& xv) {
        handmodel::HandShape shape;
        shape.beta = xv.head<10>();
        double total = cfg.w_reg * (shape.beta.array() - 1.0).square().sum();
        for (int f = 0; f < nf; ++f) {
            handmodel::HandPose pose;
            pose.theta = xv.segment<kNumDofs>(10 + f * kNumDofs);
            const auto& obs = frames[f];
            const RigidTransform kin = obs.kinect_extrinsics.value_or(RigidTransform::identity());
            const auto joints = handmodel::forward_kinematics(pose, shape);
            double l3d = 0.0;
            for (int j = 0; j < 21; ++j) {
                const Vec3 pred = kin.apply(obs.base_transform.apply(joints.row(j)));
                const Vec3 gt = kin.apply(Vec3(obs.markers_world.row(j)));
                l3d += (pred - gt).squaredNorm() / 21.0;
            }
            total += cfg.w_3d * l3d;
            if (obs.kinect_pinhole && obs.kinect_extrinsics) {
                double l2d = 0.0;
                for (int j = 0; j < 21; ++j) {
                    const Vec3 pred = kin.apply(obs.base_transform.apply(joints.row(j)));
                    const Vec3 gt = kin.apply(Vec3(obs.markers_world.row(j)));
                    if (pred.z() > 1e-9 && gt.z() > 1e-9) {
                        l2d += (camera::pinhole_project(*obs.kinect_pinhole, pred) -
                                camera::pinhole_project(*obs.kinect_pinhole, gt))
                                   .squaredNorm() /
                               21.0;
                    }
                }
                total += cfg.w_2d * l2d;
                if (obs.hand_mask) {
                    const auto mesh = handmodel::skin_mesh(pose, shape);
                    const Eigen::MatrixX3d verts_world =
                        (mesh.vertices * obs.base_transform.rot.transpose()).rowwise() +
                        obs.base_transform.trans.transpose();
                    const Eigen::MatrixX3d verts_cam =
                        (verts_world * kin.rot.transpose()).rowwise() + kin.trans.transpose();
                    const auto sil = detail::silhouette_loss_with_grad(
                        verts_cam, *obs.kinect_pinhole, *obs.hand_mask, cfg.lambda_bce,
                        cfg.lambda_dice);
                    total += cfg.w_mask * sil.loss;
                }
            }
            total += cfg.w_anat * handmodel::anatomical_penalty(pose);
        }
        return total;
    };

    auto project = [](Eigen::VectorXd& xv) {
        xv.head<10>() = xv.head<10>().cwiseMax(0.5).cwiseMin(2.0);
    };

    // Finite-difference gradient; the parameter count stays small here.
    auto fd_grad = [&](const Eigen::VectorXd& xv) {
        Eigen::VectorXd g(dim);
        Eigen::VectorXd xt = xv;
        for (int i = 0; i < dim; ++i) {
            const double h = 1e-6 * std::max(1.0, std::abs(xv(i)));
            xt(i) = xv(i) + h;
            const double fp = objective(xt);
            xt(i) = xv(i) - h;
            const double fm = objective(xt);
            xt(i) = xv(i);
            g(i) = (fp - fm) / (2.0 * h);
        }
        return g;
    };

    project(x);
    double loss = objective(x);
    double step = 1e-2;
    for (int it = 0; it < 250; ++it) {
        const Eigen::VectorXd g = fd_grad(x);
        const double gn = g.norm();
        if (gn < 1e-9) break;
        bool accepted = false;
        double trial = step;
        for (int bt = 0; bt < 30; ++bt) {
            Eigen::VectorXd x_new = x - (trial / gn) * g;
            project(x_new);
            const double loss_new = objective(x_new);
            if (loss_new < loss) {
                x = x_new;
                loss = loss_new;
                step = std::min(trial * 1.5, 0.05);
                accepted = true;
                break;
            }
            trial *= 0.5;
        }
        if (!accepted) break;
    }

    handmodel::HandShape out;
    out.beta = x.head<10>();
    return out;
}

/// Levenberg-Marquardt on SO(3) x R^3 minimizing fisheye reprojection error.
/// Returns the refined transform and the RMS reprojection error in pixels.
inline std::pair<RigidTransform, double> solve_extrinsics(
    const Eigen::Matrix<double, 21, 3>& x_hand, const Eigen::Matrix<double, 21, 2>& u_px,
    const camera::FisheyeModel& model, const RigidTransform& init) {
    RigidTransform pose = init;
    pose.rot = geometry::ensure_rotation(pose.rot);

    auto residuals = [&](const RigidTransform& p, Eigen::VectorXd& r) {
        r.resize(42);
        for (int j = 0; j < 21; ++j) {
            const Vec3 xc = p.apply(x_hand.row(j));
            const auto uv = camera::fisheye_project(model, xc);
            r(2 * j) = uv.x() - u_px(j, 0);
            r(2 * j + 1) = uv.y() - u_px(j, 1);
        }
    };

    Eigen::VectorXd r;
    residuals(pose, r);
    double cost = r.squaredNorm();
    double damping = 1e-3;
    constexpr double kDampingCap = 1e12;

    for (int it = 0; it < 200; ++it) {
        Eigen::Matrix<double, Eigen::Dynamic, 6> jac(42, 6);
        for (int j = 0; j < 21; ++j) {
            const Vec3 x_local = x_hand.row(j);
            const Vec3 xc = pose.apply(x_local);
            const auto pj = camera::fisheye_project_jacobian(model, xc);
            // Right perturbation: R <- R exp([d]); d xc / d d = -R [X]x.
            Eigen::Matrix<double, 3, 6> dx;
            dx.leftCols<3>() = -pose.rot * geometry::skew(x_local);
            dx.rightCols<3>() = Mat3::Identity();
            jac.middleRows<2>(2 * j) = pj * dx;
        }
        const Eigen::Matrix<double, 6, 6> jtj = jac.transpose() * jac;
        const Eigen::Matrix<double, 6, 1> jtr = jac.transpose() * r;

        bool accepted = false;
        while (damping < kDampingCap) {
            Eigen::Matrix<double, 6, 6> h = jtj;
            h.diagonal() += damping * jtj.diagonal().cwiseMax(1e-12);
            const Eigen::Matrix<double, 6, 1> delta = h.ldlt().solve(-jtr);
            RigidTransform trial = pose;
            trial.rot = pose.rot * geometry::exp_so3(delta.head<3>());
            trial.trans = pose.trans + delta.tail<3>();
            Eigen::VectorXd r_trial;
            try {
                residuals(trial, r_trial);
            } catch (const OutOfFieldOfView&) {
                damping *= 10.0;
                continue;
            }
            const double cost_trial = r_trial.squaredNorm();
            if (cost_trial <= cost) {
                const double improvement = cost - cost_trial;
                pose = trial;
                r = std::move(r_trial);
                cost = cost_trial;
                damping = std::max(damping * 0.3, 1e-12);
                accepted = true;
                if (improvement < 1e-20 || delta.norm() < 1e-14) it = 200;
                break;
            }
            damping *= 10.0;
        }
        if (!accepted) {
            if (damping >= kDampingCap && cost > 1e-6) {
                throw DivergedSolve("solve_extrinsics: damping cap reached without progress");
            }
            break;
        }
    }
    return {pose, std::sqrt(cost / 21.0)};
}

/// Residualized extrinsics: R = exp([omega]x) base_R, t = base_t + dt.
inline RigidTransform compose_residual_extrinsics(const RigidTransform& base, const Vec3& d_omega,
                                                  const Vec3& d_t) {
    return RigidTransform{geometry::exp_so3(d_omega) * base.rot, base.trans + d_t};
}

/// 6D-rotation variant: the delta is orthonormalized first.
inline RigidTransform compose_residual_extrinsics(const RigidTransform& base,
                                                  const geometry::Vec6& d_rot6,
                                                  const Vec3& d_t) {
    return compose_residual_extrinsics(base, geometry::log_so3(geometry::rot6d_to_matrix(d_rot6)),
                                       d_t);
}

} // namespace handpress::annofit
