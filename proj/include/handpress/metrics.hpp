#pragma once

// Pose, pressure, contact-classification, and extrinsics metrics, plus the
// focal-contact and gated-pressure training losses as pure functions.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "handpress/camera.hpp"
#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"
#include "handpress/handmodel.hpp"

namespace handpress::metrics {

using geometry::RigidTransform;
using geometry::Vec3;

struct PoseMetrics {
    double mpjpe = 0.0;    // mm
    double pa_mpjpe = 0.0; // mm
    double pve = 0.0;      // mm
    double pa_pve = 0.0;   // mm
    double mjae = 0.0;     // degrees
};

struct PressureMetrics {
    double contact_iou = 0.0;
    double vol_iou = 0.0;
    double contact_acc = 0.0; // percent
    double mae_fg = 0.0;      // grams
    double mae_all = 0.0;     // grams
};

namespace detail {

inline double mean_row_distance_mm(const Eigen::MatrixX3d& a, const Eigen::MatrixX3d& b) {
    return (a - b).rowwise().norm().mean() * 1000.0;
}

/// Mean row distance after similarity alignment of pred onto gt. The
/// alignment minimizes the *squared* error, which on noisy clouds can
/// slightly increase the mean of norms; the identity stays in the candidate
/// set so alignment never reports worse than no alignment.
inline double aligned_row_distance_mm(const Eigen::MatrixX3d& pred, const Eigen::MatrixX3d& gt) {
    const auto [scale, transform] = geometry::umeyama_align(pred, gt, true);
    Eigen::MatrixX3d aligned(pred.rows(), 3);
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
        aligned.row(i) = (scale * transform.rot * pred.row(i).transpose() + transform.trans)
                             .transpose();
    }
    return std::min(mean_row_distance_mm(aligned, gt), mean_row_distance_mm(pred, gt));
}

} // namespace detail

inline PoseMetrics pose_metrics(const Eigen::Matrix<double, 21, 3>& pred_joints,
                                const Eigen::Matrix<double, 21, 3>& gt_joints,
                                const Eigen::Matrix<double, 778, 3>& pred_verts,
                                const Eigen::Matrix<double, 778, 3>& gt_verts,
                                const Eigen::Matrix<double, handmodel::kNumDofs, 1>& pred_theta,
                                const Eigen::Matrix<double, handmodel::kNumDofs, 1>& gt_theta) {
    PoseMetrics m;
    m.mpjpe = detail::mean_row_distance_mm(pred_joints, gt_joints);
    m.pve = detail::mean_row_distance_mm(pred_verts, gt_verts);
    m.pa_mpjpe = detail::aligned_row_distance_mm(pred_joints, gt_joints);
    m.pa_pve = detail::aligned_row_distance_mm(pred_verts, gt_verts);
    m.mjae = (pred_theta - gt_theta).cwiseAbs().mean() * 180.0 / M_PI;
    return m;
}

inline PressureMetrics pressure_metrics(const Eigen::VectorXd& pred_pv,
                                        const Eigen::VectorXd& gt_pv,
                                        double contact_threshold = 10.0) {
    if (pred_pv.size() != handmodel::kNumVertices || gt_pv.size() != handmodel::kNumVertices) {
        throw ShapeMismatch("pressure_metrics: need 778-vertex pressures");
    }
    if (!(contact_threshold > 0.0)) {
        throw DegenerateInput("pressure_metrics: threshold must be positive");
    }
    PressureMetrics m;
    long inter = 0, uni = 0, correct = 0;
    double sum_min = 0.0, sum_max = 0.0, abs_fg = 0.0, abs_all = 0.0;
    long n_fg = 0;
    for (Eigen::Index i = 0; i < pred_pv.size(); ++i) {
        const bool a = pred_pv(i) > contact_threshold;
        const bool b = gt_pv(i) > contact_threshold;
        inter += a && b;
        uni += a || b;
        correct += a == b;
        sum_min += std::min(pred_pv(i), gt_pv(i));
        sum_max += std::max(pred_pv(i), gt_pv(i));
        const double err = std::abs(pred_pv(i) - gt_pv(i));
        abs_all += err;
        if (gt_pv(i) > 0.0) {
            abs_fg += err;
            ++n_fg;
        }
    }
    m.contact_iou = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
    m.vol_iou = sum_max == 0.0 ? 1.0 : sum_min / sum_max;
    m.contact_acc = 100.0 * correct / static_cast<double>(pred_pv.size());
    m.mae_fg = n_fg == 0 ? 0.0 : abs_fg / n_fg;
    m.mae_all = abs_all / static_cast<double>(pred_pv.size());
    return m;
}

struct ClassificationMetrics {
    double acc = 0.0, prec = 0.0, rec = 0.0, f1 = 0.0; // percent
};

inline ClassificationMetrics contact_classification_metrics(const std::vector<bool>& pred,
                                                            const std::vector<bool>& gt) {
    if (pred.empty() || pred.size() != gt.size()) {
        throw EmptyInput("contact_classification_metrics: need equal non-empty flag vectors");
    }
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] && gt[i]) ++tp;
        else if (pred[i]) ++fp;
        else if (gt[i]) ++fn;
        else ++tn;
    }
    ClassificationMetrics m;
    m.acc = 100.0 * (tp + tn) / static_cast<double>(pred.size());
    m.prec = tp + fp == 0 ? 0.0 : 100.0 * tp / static_cast<double>(tp + fp);
    m.rec = tp + fn == 0 ? 0.0 : 100.0 * tp / static_cast<double>(tp + fn);
    m.f1 = m.prec + m.rec == 0.0 ? 0.0 : 2.0 * m.prec * m.rec / (m.prec + m.rec);
    return m;
}

struct ExtrinsicsMetrics {
    double rot_deg = 0.0;
    double trans_mm = 0.0;
    double reproj_px = 0.0;
};

inline ExtrinsicsMetrics extrinsics_metrics(const RigidTransform& pred, const RigidTransform& gt,
                                            const Eigen::Matrix<double, 21, 3>& joints,
                                            const camera::FisheyeModel& model) {
    ExtrinsicsMetrics m;
    m.rot_deg = geometry::geodesic_distance(pred.rot, gt.rot) * 180.0 / M_PI;
    m.trans_mm = (pred.trans - gt.trans).norm() * 1000.0;
    double acc = 0.0;
    for (int j = 0; j < 21; ++j) {
        const Vec3 x = joints.row(j);
        acc += (camera::fisheye_project(model, pred.apply(x)) -
                camera::fisheye_project(model, gt.apply(x)))
                   .norm();
    }
    m.reproj_px = acc / 21.0;
    return m;
}

namespace detail {

inline double log_sigmoid(double z) {
    // log sigma(z) = min(z,0) - log(1 + e^{-|z|})
    return std::min(z, 0.0) - std::log1p(std::exp(-std::abs(z)));
}

} // namespace detail

/// Focal binary cross-entropy on contact logits. Ground-truth contact is
/// c* = 1(p* * h_max > tau) with p* the normalized per-vertex pressure.
inline double focal_contact_loss(const Eigen::VectorXd& logits, const Eigen::VectorXd& gt_pv,
                                 double h_max = 2000.0, double tau = 10.0, double alpha = 0.25,
                                 double gamma = 2.0, Eigen::VectorXd* d_logits = nullptr) {
    if (logits.size() != gt_pv.size()) throw ShapeMismatch("focal_contact_loss: size mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0) || !(gamma >= 0.0)) {
        throw DegenerateInput("focal_contact_loss: alpha in [0,1], gamma >= 0");
    }
    const double n = static_cast<double>(logits.size());
    if (d_logits) d_logits->setZero(logits.size());
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        // c* = 1(p* h_max > tau) with p* = gt/h_max, i.e. grams above tau.
        const bool pos = (gt_pv(i) / h_max) * h_max > tau;
        const double z = logits(i);
        const double log_pt = pos ? detail::log_sigmoid(z) : detail::log_sigmoid(-z);
        const double pt = std::exp(log_pt);
        const double w = pos ? alpha : 1.0 - alpha;
        total += -w * std::pow(1.0 - pt, gamma) * log_pt;
        if (d_logits) {
            // dL/dpt, with the modulating term dropped when gamma = 0 so the
            // pt -> 1 limit stays finite.
            const double dmod =
                gamma > 0.0 ? -gamma * std::pow(1.0 - pt, gamma - 1.0) * log_pt : 0.0;
            const double dl_dpt = -w * (dmod + std::pow(1.0 - pt, gamma) / pt);
            const double dpt_dz = pt * (1.0 - pt) * (pos ? 1.0 : -1.0);
            (*d_logits)(i) = dl_dpt * dpt_dz / n;
        }
    }
    return total / n;
}

/// Gate-and-regress pressure loss: p_tilde = sigmoid(m)^gate_gamma *
/// softplus(p); squared error on foreground vertices plus lambda_bg times the
/// mean absolute prediction on background vertices.
inline double gated_pressure_loss(const Eigen::VectorXd& logits, const Eigen::VectorXd& raw_pressure,
                                  const Eigen::VectorXd& gt_pv, double gate_gamma = 1.0,
                                  double lambda_bg = 1.0, double h_max = 2000.0,
                                  double tau = 10.0, Eigen::VectorXd* d_logits = nullptr,
                                  Eigen::VectorXd* d_raw = nullptr) {
    if (logits.size() != raw_pressure.size() || logits.size() != gt_pv.size()) {
        throw ShapeMismatch("gated_pressure_loss: size mismatch");
    }
    if (!(lambda_bg >= 0.0)) throw DegenerateInput("gated_pressure_loss: lambda_bg >= 0");
    const Eigen::Index m = logits.size();
    long n_fg = 0, n_bg = 0;
    for (Eigen::Index i = 0; i < m; ++i) (gt_pv(i) > tau ? n_fg : n_bg)++;
    if (d_logits) d_logits->setZero(m);
    if (d_raw) d_raw->setZero(m);
    double fg = 0.0, bg = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const bool pos = gt_pv(i) > tau;
        const double sig = 1.0 / (1.0 + std::exp(-logits(i)));
        const double gate = std::pow(sig, gate_gamma);
        const double sp = raw_pressure(i) > 30.0
                              ? raw_pressure(i)
                              : std::log1p(std::exp(raw_pressure(i)));
        const double p_tilde = gate * sp;
        double dl_dpt; // d loss / d p_tilde, mean weights included
        if (pos) {
            const double d = p_tilde - gt_pv(i);
            fg += d * d;
            dl_dpt = 2.0 * d / static_cast<double>(n_fg);
        } else {
            bg += std::abs(p_tilde); // p_tilde >= 0 always: gate, softplus > 0
            dl_dpt = lambda_bg / static_cast<double>(n_bg);
        }
        if (d_logits) {
            (*d_logits)(i) = dl_dpt * gate_gamma * gate * (1.0 - sig) * sp;
        }
        if (d_raw) {
            const double dsp = raw_pressure(i) > 30.0
                                   ? 1.0
                                   : 1.0 / (1.0 + std::exp(-raw_pressure(i)));
            (*d_raw)(i) = dl_dpt * gate * dsp;
        }
    }
    const double fg_term = n_fg == 0 ? 0.0 : fg / n_fg;
    const double bg_term = n_bg == 0 ? 0.0 : bg / n_bg;
    return fg_term + lambda_bg * bg_term;
}

// ---- Reports ----

struct EvalRow {
    std::string frame_id;
    PoseMetrics pose;
    PressureMetrics pressure;
    ExtrinsicsMetrics extrinsics;
};

inline std::string eval_csv_header() {
    return "frame_id,mpjpe_mm,pa_mpjpe_mm,pve_mm,pa_pve_mm,mjae_deg,"
           "contact_iou,vol_iou,contact_acc_pct,mae_fg_g,mae_all_g,"
           "rot_err_deg,trans_err_mm,reproj_err_px";
}

inline std::string eval_csv_row(const EvalRow& r) {
    std::ostringstream os;
    os.precision(9);
    os << r.frame_id << ',' << r.pose.mpjpe << ',' << r.pose.pa_mpjpe << ',' << r.pose.pve << ','
       << r.pose.pa_pve << ',' << r.pose.mjae << ',' << r.pressure.contact_iou << ','
       << r.pressure.vol_iou << ',' << r.pressure.contact_acc << ',' << r.pressure.mae_fg << ','
       << r.pressure.mae_all << ',' << r.extrinsics.rot_deg << ',' << r.extrinsics.trans_mm << ','
       << r.extrinsics.reproj_px;
    return os.str();
}

inline nlohmann::json eval_row_to_json(const EvalRow& r) {
    return {
        {"frame_id", r.frame_id},
        {"pose",
         {{"mpjpe_mm", r.pose.mpjpe},
          {"pa_mpjpe_mm", r.pose.pa_mpjpe},
          {"pve_mm", r.pose.pve},
          {"pa_pve_mm", r.pose.pa_pve},
          {"mjae_deg", r.pose.mjae}}},
        {"pressure",
         {{"contact_iou", r.pressure.contact_iou},
          {"vol_iou", r.pressure.vol_iou},
          {"contact_acc_pct", r.pressure.contact_acc},
          {"mae_fg_g", r.pressure.mae_fg},
          {"mae_all_g", r.pressure.mae_all}}},
        {"extrinsics",
         {{"rot_err_deg", r.extrinsics.rot_deg},
          {"trans_err_mm", r.extrinsics.trans_mm},
          {"reproj_err_px", r.extrinsics.reproj_px}}},
    };
}

} // namespace handpress::metrics
