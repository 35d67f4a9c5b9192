#pragma once

// Orthographic differentiable pressure/depth rendering over the sensor
// plane: per-vertex splatting with bilinear weights, a soft-min depth pass,
// the soft contact probability, and the render loss terms, all with
// closed-form gradients w.r.t. vertex positions and per-vertex pressure.

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"

namespace handpress::pressrender {

using geometry::Vec3;

/// Virtual orthographic camera beneath the sensor plane, looking up along n.
struct OrthoCamera {
    Vec3 origin = Vec3::Zero(); // plane center
    Vec3 u = Vec3::UnitX();
    Vec3 v = Vec3::UnitY();
    Vec3 n = Vec3::UnitZ();
    int rows = 105, cols = 185;    // Sensel Morph grid
    double pitch = 0.00125;        // m per cell
    double standoff = 0.1;         // virtual camera offset below the plane

    // Continuous grid coordinates; a vertex exactly at the center of cell
    // (ix, iy) yields (gx, gy) = (ix, iy). Depth is measured from the
    // virtual camera, so height above the plane is h - standoff.
    void grid_coords(const Vec3& p, double& gx, double& gy, double& h) const {
        const Vec3 rel = p - origin;
        gx = rel.dot(u) / pitch + 0.5 * cols - 0.5;
        gy = rel.dot(v) / pitch + 0.5 * rows - 0.5;
        h = rel.dot(n) + standoff;
    }
};

struct PressureMap {
    Eigen::MatrixXd grid; // rows x cols, gram-force per cell
};

inline constexpr double kDepthSentinel = std::numeric_limits<double>::infinity();

struct DepthRender {
    Eigen::MatrixXd depth; // meters above the plane; sentinel on empty cells
    Eigen::MatrixXd mask;  // covered-cell indicator (M_hand)
    // Soft-min accumulators kept for the backward pass.
    Eigen::MatrixXd shift, sw, swh;
    double kappa = 0.001;
};

namespace detail {

struct Splat {
    int ix, iy;          // lower cell indices (unflipped grid coords)
    double wx, wy;       // fractional position within the cell
    double gx, gy, h;
    bool active;
};

inline Splat make_splat(const OrthoCamera& cam, const Vec3& p) {
    Splat s{};
    cam.grid_coords(p, s.gx, s.gy, s.h);
    s.ix = static_cast<int>(std::floor(s.gx));
    s.iy = static_cast<int>(std::floor(s.gy));
    s.wx = s.gx - s.ix;
    s.wy = s.gy - s.iy;
    s.active = s.gx > -1.0 && s.gx < cam.cols && s.gy > -1.0 && s.gy < cam.rows;
    return s;
}

/// Visits the up-to-4 covered cells with bilinear weights. Row indices are
/// already vertically flipped to the sensor raster order.
template <typename F>
inline void for_each_cell(const OrthoCamera& cam, const Splat& s, F&& fn) {
    if (!s.active) return;
    for (int dy = 0; dy < 2; ++dy) {
        const int iy = s.iy + dy;
        if (iy < 0 || iy >= cam.rows) continue;
        const double wyv = dy == 0 ? 1.0 - s.wy : s.wy;
        for (int dx = 0; dx < 2; ++dx) {
            const int ix = s.ix + dx;
            if (ix < 0 || ix >= cam.cols) continue;
            const double wxv = dx == 0 ? 1.0 - s.wx : s.wx;
            // d(weight)/d(gx), d(weight)/d(gy)
            const double dwx = dx == 0 ? -wyv : wyv;
            const double dwy = dy == 0 ? -wxv : wxv;
            fn(cam.rows - 1 - iy, ix, wxv * wyv, dwx, dwy);
        }
    }
}

inline double bce_with_logits(double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline constexpr double kCoverageMin = 1e-9;

} // namespace detail

/// Splats per-vertex pressure into the sensor grid (bilinear, vertically
/// flipped). Off-grid vertices contribute nothing; on-grid mass is conserved.
inline PressureMap render_pressure(const Eigen::MatrixX3d& verts, const Eigen::VectorXd& pv,
                                   const OrthoCamera& cam) {
    if (verts.rows() != pv.size()) throw ShapeMismatch("render_pressure: verts/pv size mismatch");
    PressureMap out;
    out.grid = Eigen::MatrixXd::Zero(cam.rows, cam.cols);
    for (Eigen::Index i = 0; i < verts.rows(); ++i) {
        const auto s = detail::make_splat(cam, verts.row(i));
        detail::for_each_cell(cam, s, [&](int r, int c, double w, double, double) {
            out.grid(r, c) += w * pv(i);
        });
    }
    return out;
}

/// Soft-min depth per covered cell plus the covered-cell mask.
inline DepthRender render_depth(const Eigen::MatrixX3d& verts, const OrthoCamera& cam,
                                double kappa = 0.001) {
    DepthRender out;
    out.kappa = kappa;
    out.depth = Eigen::MatrixXd::Constant(cam.rows, cam.cols, kDepthSentinel);
    out.mask = Eigen::MatrixXd::Zero(cam.rows, cam.cols);
    out.shift = Eigen::MatrixXd::Constant(cam.rows, cam.cols, kDepthSentinel);
    out.sw = Eigen::MatrixXd::Zero(cam.rows, cam.cols);
    out.swh = Eigen::MatrixXd::Zero(cam.rows, cam.cols);
    Eigen::MatrixXd coverage = Eigen::MatrixXd::Zero(cam.rows, cam.cols);

    for (Eigen::Index i = 0; i < verts.rows(); ++i) {
        const auto s = detail::make_splat(cam, verts.row(i));
        detail::for_each_cell(cam, s, [&](int r, int c, double w, double, double) {
            if (w <= 0.0) return;
            coverage(r, c) += w;
            double& m = out.shift(r, c);
            if (s.h < m) {
                // Re-anchor the soft-min exponentials at the new minimum.
                if (std::isfinite(m)) {
                    const double rescale = std::exp(-(m - s.h) / kappa);
                    out.sw(r, c) *= rescale;
                    out.swh(r, c) *= rescale;
                }
                m = s.h;
            }
            const double e = std::exp(-(s.h - m) / kappa);
            out.sw(r, c) += w * e;
            out.swh(r, c) += w * s.h * e;
        });
    }
    for (int r = 0; r < cam.rows; ++r) {
        for (int c = 0; c < cam.cols; ++c) {
            if (coverage(r, c) > detail::kCoverageMin) {
                out.mask(r, c) = 1.0;
                out.depth(r, c) = out.swh(r, c) / out.sw(r, c);
            }
        }
    }
    return out;
}

/// Soft contact probability C = sigmoid((eps - (depth - delta)) / tau) on
/// covered cells; zero elsewhere.
inline Eigen::MatrixXd soft_contact(const DepthRender& depth, double delta, double epsilon,
                                    double tau) {
    if (tau <= 0.0) throw DegenerateInput("soft_contact: tau must be positive");
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(depth.depth.rows(), depth.depth.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        for (Eigen::Index c = 0; c < out.cols(); ++c) {
            if (depth.mask(r, c) > 0.0) {
                const double d_rel = depth.depth(r, c) - delta;
                out(r, c) = detail::sigmoid((epsilon - d_rel) / tau);
            }
        }
    }
    return out;
}

struct RenderLossConfig {
    double gamma_g = 5.0;   // contact threshold on P_gt (grams)
    double delta = 0.1;     // calibrated depth offset
    double epsilon = 0.002; // contact band (m)
    double tau = 0.001;     // contact sharpness (m)
    double kappa = 0.001;   // depth soft-min temperature (m)
    double w_press = 1.0;
    double w_hand = 0.1;
};

struct RenderLosses {
    double total = 0.0;
    double press = 0.0;
    double hand = 0.0;
};

/// Pixel-wise pressure MSE plus the masked contact BCE term.
inline RenderLosses render_losses(const PressureMap& pred_p, const DepthRender& pred_d,
                                  const PressureMap& p_gt, const RenderLossConfig& cfg) {
    const auto rows = pred_p.grid.rows(), cols = pred_p.grid.cols();
    if (p_gt.grid.rows() != rows || p_gt.grid.cols() != cols || pred_d.depth.rows() != rows ||
        pred_d.depth.cols() != cols) {
        throw ShapeMismatch("render_losses: grid shapes differ");
    }
    RenderLosses out;
    out.press = (pred_p.grid - p_gt.grid).squaredNorm() / static_cast<double>(rows * cols);
    const double mask_sum = pred_d.mask.sum();
    if (mask_sum > 0.0) {
        double acc = 0.0;
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                if (pred_d.mask(r, c) <= 0.0) continue;
                const double z = (cfg.epsilon - (pred_d.depth(r, c) - cfg.delta)) / cfg.tau;
                const double y = p_gt.grid(r, c) > cfg.gamma_g ? 1.0 : 0.0;
                acc += detail::bce_with_logits(z, y);
            }
        }
        out.hand = acc / mask_sum;
    }
    out.total = cfg.w_press * out.press + cfg.w_hand * out.hand;
    return out;
}

struct RenderLossGradients {
    RenderLosses losses;
    Eigen::MatrixX3d d_verts; // d total / d vertex world positions
    Eigen::VectorXd d_pv;     // d total / d per-vertex pressure
};

/// Forward render losses with analytic gradients w.r.t. world vertex
/// positions and per-vertex pressure.
inline RenderLossGradients render_losses_with_grad(const Eigen::MatrixX3d& verts,
                                                   const Eigen::VectorXd& pv,
                                                   const OrthoCamera& cam,
                                                   const PressureMap& p_gt,
                                                   const RenderLossConfig& cfg) {
    RenderLossGradients out;
    const auto n = verts.rows();
    out.d_verts = Eigen::MatrixX3d::Zero(n, 3);
    out.d_pv = Eigen::VectorXd::Zero(n);

    const PressureMap pred_p = render_pressure(verts, pv, cam);
    const DepthRender pred_d = render_depth(verts, cam, cfg.kappa);
    out.losses = render_losses(pred_p, pred_d, p_gt, cfg);

    const double hw = static_cast<double>(cam.rows * cam.cols);
    const Eigen::MatrixXd g_press = (2.0 * cfg.w_press / hw) * (pred_p.grid - p_gt.grid);

    // d total / d depth(r, c) through the masked BCE term.
    const double mask_sum = pred_d.mask.sum();
    Eigen::MatrixXd g_depth = Eigen::MatrixXd::Zero(cam.rows, cam.cols);
    if (mask_sum > 0.0) {
        for (int r = 0; r < cam.rows; ++r) {
            for (int c = 0; c < cam.cols; ++c) {
                if (pred_d.mask(r, c) <= 0.0) continue;
                const double z = (cfg.epsilon - (pred_d.depth(r, c) - cfg.delta)) / cfg.tau;
                const double y = p_gt.grid(r, c) > cfg.gamma_g ? 1.0 : 0.0;
                g_depth(r, c) = cfg.w_hand * (detail::sigmoid(z) - y) * (-1.0 / cfg.tau) / mask_sum;
            }
        }
    }

    const Vec3 du = cam.u / cam.pitch, dv = cam.v / cam.pitch;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto s = detail::make_splat(cam, verts.row(i));
        double ggx = 0.0, ggy = 0.0, gh = 0.0;
        detail::for_each_cell(cam, s, [&](int r, int c, double w, double dwx, double dwy) {
            // Pressure splat path.
            const double gp = g_press(r, c);
            out.d_pv(i) += w * gp;
            ggx += dwx * pv(i) * gp;
            ggy += dwy * pv(i) * gp;
            // Depth soft-min path.
            const double gd = g_depth(r, c);
            if (gd != 0.0 && pred_d.mask(r, c) > 0.0) {
                const double e = std::exp(-(s.h - pred_d.shift(r, c)) / cfg.kappa);
                const double sw = pred_d.sw(r, c);
                const double depth = pred_d.depth(r, c);
                const double dd_dw = e * (s.h - depth) / sw;
                const double dd_dh = (w * e / sw) * (1.0 + (depth - s.h) / cfg.kappa);
                ggx += dwx * dd_dw * gd;
                ggy += dwy * dd_dw * gd;
                gh += dd_dh * gd;
            }
        });
        out.d_verts.row(i) = (ggx * du + ggy * dv + gh * cam.n).transpose();
    }
    return out;
}

// ---- Pressure-map file: "PMAP v1 <H> <W> <pitch_mm>" + H rows of grams ----

inline void save_pressure_map(const PressureMap& map, double pitch_m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path);
    os << "PMAP v1 " << map.grid.rows() << ' ' << map.grid.cols() << ' ' << pitch_m * 1000.0
       << '\n';
    for (Eigen::Index r = 0; r < map.grid.rows(); ++r) {
        for (Eigen::Index c = 0; c < map.grid.cols(); ++c) {
            os << map.grid(r, c) << (c + 1 == map.grid.cols() ? '\n' : ' ');
        }
    }
}

inline PressureMap load_pressure_map(const std::string& path, double* pitch_m = nullptr) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::string magic, version;
    int rows = 0, cols = 0;
    double pitch_mm = 0.0;
    is >> magic >> version >> rows >> cols >> pitch_mm;
    if (magic != "PMAP" || version != "v1" || rows <= 0 || cols <= 0) {
        throw ParseError("pressure map: bad header in " + path);
    }
    PressureMap map;
    map.grid.resize(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (!(is >> map.grid(r, c))) throw ParseError("pressure map: truncated " + path);
        }
    }
    if (pitch_m) *pitch_m = pitch_mm / 1000.0;
    return map;
}

} // namespace handpress::pressrender
