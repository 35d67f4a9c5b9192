#pragma once

// Fisheye (ocamcalib-style polynomial) and pinhole projection, plus the
// equirectangular-panorama-to-fisheye background synthesis used for data
// augmentation.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"

namespace handpress::camera {

using geometry::Mat3;
using geometry::Vec3;
using Vec2 = Eigen::Vector2d;

/// Polynomial fisheye model: incidence angle theta (rad, from +z) maps to
/// image radius rho(theta) = sum a_k theta^k (px), then an affine stretch
/// [[c,d],[e,1]] about the distortion center.
struct FisheyeModel {
    std::vector<double> poly; // a0..aN
    double cx = 0.0, cy = 0.0;
    double c = 1.0, d = 0.0, e = 0.0;
    int width = 0, height = 0;
    double theta_max = M_PI / 2.0 * 1.1; // 180-degree lens with margin

    double radius(double theta) const {
        double rho = 0.0;
        for (auto it = poly.rbegin(); it != poly.rend(); ++it) rho = rho * theta + *it;
        return rho;
    }

    double radius_derivative(double theta) const {
        double acc = 0.0;
        for (size_t k = poly.size(); k-- > 1;) {
            acc = acc * theta + static_cast<double>(k) * poly[k];
        }
        return acc;
    }
};

struct PinholeModel {
    double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
};

/// Row-major 8-bit image buffer.
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> data;

    Image() = default;
    Image(int w, int h, int ch, std::uint8_t fill = 0)
        : width(w), height(h), channels(ch),
          data(static_cast<size_t>(w) * h * ch, fill) {}

    std::uint8_t& at(int x, int y, int ch) {
        return data[(static_cast<size_t>(y) * width + x) * channels + ch];
    }
    std::uint8_t at(int x, int y, int ch) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + ch];
    }
};

inline Vec2 fisheye_project(const FisheyeModel& model, const Vec3& x_cam) {
    const double norm = x_cam.norm();
    if (norm < 1e-12) throw DegenerateInput("fisheye_project: zero direction");
    const double theta = std::atan2(std::hypot(x_cam.x(), x_cam.y()), x_cam.z());
    if (theta > model.theta_max) throw OutOfFieldOfView("fisheye_project: angle beyond FOV");
    const double r_xy = std::hypot(x_cam.x(), x_cam.y());
    double cos_phi = 1.0, sin_phi = 0.0;
    if (r_xy > 1e-15) {
        cos_phi = x_cam.x() / r_xy;
        sin_phi = x_cam.y() / r_xy;
    }
    const double rho = model.radius(theta);
    const double px = rho * cos_phi, py = rho * sin_phi;
    return {model.cx + model.c * px + model.d * py, model.cy + model.e * px + py};
}

/// d(u,v)/d(x_cam), for least-squares solvers.
inline Eigen::Matrix<double, 2, 3> fisheye_project_jacobian(const FisheyeModel& model,
                                                            const Vec3& x_cam) {
    const double x = x_cam.x(), y = x_cam.y(), z = x_cam.z();
    const double r_xy = std::hypot(x, y);
    Eigen::Matrix<double, 2, 3> jac = Eigen::Matrix<double, 2, 3>::Zero();
    if (r_xy < 1e-12) {
        // On-axis: rho(theta) ~ a1 * theta, theta ~ r/z.
        const double a1 = model.poly.size() > 1 ? model.poly[1] : 0.0;
        Eigen::Matrix<double, 2, 3> raw = Eigen::Matrix<double, 2, 3>::Zero();
        raw(0, 0) = a1 / z;
        raw(1, 1) = a1 / z;
        jac.row(0) = model.c * raw.row(0) + model.d * raw.row(1);
        jac.row(1) = model.e * raw.row(0) + raw.row(1);
        return jac;
    }
    const double r2 = x * x + y * y + z * z;
    const double theta = std::atan2(r_xy, z);
    const double rho = model.radius(theta);
    const double drho = model.radius_derivative(theta);
    // theta = atan2(r_xy, z)
    const Vec3 dtheta(z * x / (r_xy * r2), z * y / (r_xy * r2), -r_xy / r2);
    const double cphi = x / r_xy, sphi = y / r_xy;
    const Vec3 dcphi(sphi * sphi / r_xy, -cphi * sphi / r_xy, 0.0);
    const Vec3 dsphi(-cphi * sphi / r_xy, cphi * cphi / r_xy, 0.0);
    const Vec3 dpx = drho * cphi * dtheta + rho * dcphi;
    const Vec3 dpy = drho * sphi * dtheta + rho * dsphi;
    jac.row(0) = (model.c * dpx + model.d * dpy).transpose();
    jac.row(1) = (model.e * dpx + dpy).transpose();
    return jac;
}

/// Unit observation ray through a pixel; inverts rho(theta) by a monotone
/// bisection/Newton hybrid to 1e-10 px.
inline Vec3 fisheye_unproject(const FisheyeModel& model, const Vec2& pixel) {
    const double det = model.c - model.d * model.e;
    if (std::abs(det) < 1e-12) throw DegenerateInput("fisheye_unproject: singular affine");
    const double du = pixel.x() - model.cx, dv = pixel.y() - model.cy;
    const double px = (du - model.d * dv) / det;
    const double py = (model.c * dv - model.e * du) / det;
    const double r = std::hypot(px, py);
    if (r < 1e-12) return Vec3(0, 0, 1);
    const double r_max = model.radius(model.theta_max);
    if (r > r_max + 1e-9) throw RadiusOutOfRange("fisheye_unproject: radius beyond FOV");

    double lo = 0.0, hi = model.theta_max;
    double theta = model.theta_max * r / r_max;
    for (int it = 0; it < 200; ++it) {
        const double f = model.radius(theta) - r;
        if (std::abs(f) < 1e-10) break;
        if (f > 0.0) hi = theta; else lo = theta;
        const double df = model.radius_derivative(theta);
        double next = theta - f / df;
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        theta = next;
    }
    const double s = std::sin(theta);
    return Vec3(s * px / r, s * py / r, std::cos(theta));
}

inline Vec2 pinhole_project(const PinholeModel& model, const Vec3& x_cam) {
    if (x_cam.z() <= 1e-9) throw BehindCamera("pinhole_project: point behind camera");
    return {model.fx * x_cam.x() / x_cam.z() + model.cx,
            model.fy * x_cam.y() / x_cam.z() + model.cy};
}

inline Eigen::Matrix<double, 2, 3> pinhole_project_jacobian(const PinholeModel& model,
                                                            const Vec3& x_cam) {
    const double z = x_cam.z();
    Eigen::Matrix<double, 2, 3> jac;
    jac << model.fx / z, 0.0, -model.fx * x_cam.x() / (z * z),
           0.0, model.fy / z, -model.fy * x_cam.y() / (z * z);
    return jac;
}

namespace detail {

/// Bilinear sample with horizontal wrap and vertical clamp (equirect).
inline double sample_pano(const Image& pano, double u, double v, int ch) {
    const int w = pano.width, h = pano.height;
    const int u0 = static_cast<int>(std::floor(u));
    const int v0 = static_cast<int>(std::floor(v));
    const double fu = u - u0, fv = v - v0;
    auto wrap_u = [&](int x) { return ((x % w) + w) % w; };
    auto clamp_v = [&](int y) { return std::clamp(y, 0, h - 1); };
    const double s00 = pano.at(wrap_u(u0), clamp_v(v0), ch);
    const double s10 = pano.at(wrap_u(u0 + 1), clamp_v(v0), ch);
    const double s01 = pano.at(wrap_u(u0), clamp_v(v0 + 1), ch);
    const double s11 = pano.at(wrap_u(u0 + 1), clamp_v(v0 + 1), ch);
    return (1 - fu) * (1 - fv) * s00 + fu * (1 - fv) * s10 + (1 - fu) * fv * s01 + fu * fv * s11;
}

} // namespace detail

/// Warps an equirectangular panorama into the fisheye image plane under a
/// virtual view rotation. Out-of-FOV pixels are black.
inline Image warp_panorama_to_fisheye(const Image& pano, const FisheyeModel& model,
                                      const Mat3& r_view, int out_w, int out_h) {
    if (pano.width < 2 || pano.height < 2) throw SizeMismatch("warp: panorama too small");
    Image out(out_w, out_h, pano.channels, 0);
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            Vec3 d_cam;
            try {
                d_cam = fisheye_unproject(model, Vec2(x, y));
            } catch (const RadiusOutOfRange&) {
                continue;
            }
            const Vec3 d_world = r_view * d_cam;
            const double lambda = std::atan2(d_world.x(), d_world.z());
            const double phi = std::asin(std::clamp(d_world.y() / d_world.norm(), -1.0, 1.0));
            const double u = (lambda / (2.0 * M_PI) + 0.5) * (pano.width - 1);
            const double v = (0.5 - phi / M_PI) * (pano.height - 1);
            for (int ch = 0; ch < pano.channels; ++ch) {
                out.at(x, y, ch) = static_cast<std::uint8_t>(
                    std::clamp(std::lround(detail::sample_pano(pano, u, v, ch)), 0l, 255l));
            }
        }
    }
    return out;
}

/// out = hand * M + bg * (1 - M); the hand is preserved where the mask is 1.
/// The mask is 8-bit grayscale interpreted on [0, 1].
inline Image composite_background(const Image& bg, const Image& hand, const Image& hand_mask) {
    if (bg.width != hand.width || bg.height != hand.height || bg.channels != hand.channels ||
        hand_mask.width != bg.width || hand_mask.height != bg.height || hand_mask.channels != 1) {
        throw SizeMismatch("composite_background: image sizes must match, mask single-channel");
    }
    Image out(bg.width, bg.height, bg.channels);
    for (int y = 0; y < bg.height; ++y) {
        for (int x = 0; x < bg.width; ++x) {
            const double m = hand_mask.at(x, y, 0) / 255.0;
            for (int ch = 0; ch < bg.channels; ++ch) {
                const double v = hand.at(x, y, ch) * m + bg.at(x, y, ch) * (1.0 - m);
                out.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
            }
        }
    }
    return out;
}

// ---- Intrinsics file ----

inline nlohmann::json fisheye_to_json(const FisheyeModel& m) {
    nlohmann::json j;
    j["poly"] = m.poly;
    j["center"] = {m.cx, m.cy};
    j["affine"] = {m.c, m.d, m.e};
    j["size"] = {m.width, m.height};
    j["theta_max"] = m.theta_max;
    return j;
}

inline FisheyeModel fisheye_from_json(const nlohmann::json& j) {
    FisheyeModel m;
    m.poly = j.at("poly").get<std::vector<double>>();
    m.cx = j.at("center").at(0);
    m.cy = j.at("center").at(1);
    m.c = j.at("affine").at(0);
    m.d = j.at("affine").at(1);
    m.e = j.at("affine").at(2);
    m.width = j.at("size").at(0);
    m.height = j.at("size").at(1);
    if (j.contains("theta_max")) m.theta_max = j.at("theta_max");
    return m;
}

inline FisheyeModel load_fisheye(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
        return fisheye_from_json(j);
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("intrinsics file: ") + ex.what());
    }
}

inline void save_fisheye(const FisheyeModel& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path);
    os << fisheye_to_json(m).dump(2) << '\n';
}

} // namespace handpress::camera
