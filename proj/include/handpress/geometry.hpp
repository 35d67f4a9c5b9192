#pragma once

// Rotations, rigid transforms, canonical frames and alignment primitives
// shared by the rest of the library. All angles are radians, all lengths
// meters unless stated otherwise.

#include <cmath>
#include <Eigen/Dense>

#include "handpress/errors.hpp"

namespace handpress::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

inline Mat3 skew(const Vec3& w) {
    Mat3 s;
    s << 0.0, -w.z(), w.y(),
         w.z(), 0.0, -w.x(),
        -w.y(), w.x(), 0.0;
    return s;
}

/// Frobenius deviation of R from orthonormality.
inline double orthonormality_error(const Mat3& r) {
    return (r.transpose() * r - Mat3::Identity()).norm();
}

/// Projects m onto SO(3); throws InvalidRotation if m deviates from a proper
/// rotation by more than `tol` (measured before projection).
inline Mat3 ensure_rotation(const Mat3& m, double tol = 1e-6) {
    const double err = orthonormality_error(m);
    if (!m.allFinite() || err > tol || m.determinant() < 0.0) {
        throw InvalidRotation("matrix is not a proper rotation (err=" + std::to_string(err) + ")");
    }
    if (err == 0.0) return m;
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) {
        Mat3 u = svd.matrixU();
        u.col(2) *= -1.0;
        r = u * svd.matrixV().transpose();
    }
    return r;
}

struct RigidTransform {
    Mat3 rot = Mat3::Identity();
    Vec3 trans = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return rot * p + trans; }

    RigidTransform compose(const RigidTransform& other) const {
        // this ∘ other: apply `other` first.
        return RigidTransform{rot * other.rot, rot * other.trans + trans};
    }

    RigidTransform inverse() const {
        return RigidTransform{rot.transpose(), -(rot.transpose() * trans)};
    }

    static RigidTransform identity() { return RigidTransform{}; }
};

/// Plane with an orthonormal right-handed in-plane frame {u, v, n}.
struct TouchPlane {
    Vec3 origin = Vec3::Zero();
    Vec3 u = Vec3::UnitX();
    Vec3 v = Vec3::UnitY();
    Vec3 n = Vec3::UnitZ();

    double signed_distance(const Vec3& p) const { return (p - origin).dot(n); }
};

/// Gram-Schmidt orthonormalization of the 6D rotation encoding (the first
/// two matrix columns).
inline Mat3 rot6d_to_matrix(const Vec6& r6) {
    const Vec3 a = r6.head<3>();
    const Vec3 b = r6.tail<3>();
    const double na = a.norm();
    if (na < 1e-12) throw DegenerateInput("rot6d: first vector has near-zero norm");
    const Vec3 c1 = a / na;
    const Vec3 b_perp = b - b.dot(c1) * c1;
    if (b_perp.norm() < 1e-12) throw DegenerateInput("rot6d: vectors are parallel");
    const Vec3 c2 = b_perp.normalized();
    const Vec3 c3 = c1.cross(c2);
    Mat3 r;
    r.col(0) = c1;
    r.col(1) = c2;
    r.col(2) = c3;
    return r;
}

/// First two columns of R, flattened.
inline Vec6 matrix_to_rot6d(const Mat3& r) {
    Vec6 out;
    out.head<3>() = r.col(0);
    out.tail<3>() = r.col(1);
    return out;
}

/// Rodrigues formula. exp(0) = I exactly.
inline Mat3 exp_so3(const Vec3& omega) {
    const double theta = omega.norm();
    if (theta < 1e-12) {
        return Mat3::Identity() + skew(omega);
    }
    const Vec3 axis = omega / theta;
    const Mat3 k = skew(axis);
    return Mat3::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * k * k;
}

/// Matrix logarithm via quaternion conversion, stable near theta = pi.
inline Vec3 log_so3(const Mat3& r_in) {
    const Mat3 r = ensure_rotation(r_in);
    Eigen::Quaterniond q(r);
    if (q.w() < 0.0) q.coeffs() *= -1.0;
    const Vec3 v(q.x(), q.y(), q.z());
    const double nv = v.norm();
    const double angle = 2.0 * std::atan2(nv, q.w());
    if (nv < 1e-12) return 2.0 * v; // small-angle: omega ≈ 2*vec
    return (angle / nv) * v;
}

/// d(exp(omega))/d(omega_i), exact for any omega (Gallego & Yezzi form).
inline Mat3 dexp_so3(const Vec3& omega, int i) {
    const double theta2 = omega.squaredNorm();
    const Mat3 r = exp_so3(omega);
    Vec3 e = Vec3::Zero();
    e(i) = 1.0;
    if (theta2 < 1e-16) {
        return skew(e);
    }
    const Vec3 w = omega;
    const Vec3 cross_term = w.cross((Mat3::Identity() - r) * e);
    return (skew((w(i) * w + cross_term) / theta2)) * r;
}

/// Rotation angle of r2ᵀ r1, in [0, pi].
inline double geodesic_distance(const Mat3& r1, const Mat3& r2) {
    const Mat3 a = ensure_rotation(r1);
    const Mat3 b = ensure_rotation(r2);
    return log_so3(b.transpose() * a).norm();
}

/// Least-squares similarity/rigid alignment (Umeyama). Rows are points.
/// Returns (scale, transform) minimizing sum ||s R x + t - y||^2.
inline std::pair<double, RigidTransform> umeyama_align(const Eigen::MatrixX3d& source,
                                                       const Eigen::MatrixX3d& target,
                                                       bool with_scale) {
    const auto n = source.rows();
    if (n < 3 || target.rows() != n) {
        throw DegenerateConfiguration("umeyama: need >= 3 matched points");
    }
    const Vec3 mu_x = source.colwise().mean();
    const Vec3 mu_y = target.colwise().mean();
    const Eigen::MatrixX3d xc = source.rowwise() - mu_x.transpose();
    const Eigen::MatrixX3d yc = target.rowwise() - mu_y.transpose();
    const double var_x = xc.squaredNorm() / static_cast<double>(n);
    const Mat3 sigma = yc.transpose() * xc / static_cast<double>(n);

    Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    // Collinear or coincident points leave the rotation underdetermined.
    if (var_x < 1e-18 || sv(1) < 1e-12 * (sv(0) + 1e-300)) {
        throw DegenerateConfiguration("umeyama: degenerate point configuration");
    }
    Mat3 s_fix = Mat3::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) {
        s_fix(2, 2) = -1.0;
    }
    const Mat3 r = svd.matrixU() * s_fix * svd.matrixV().transpose();
    double scale = 1.0;
    if (with_scale) {
        scale = (sv.asDiagonal().toDenseMatrix() * s_fix).trace() / var_x;
    }
    const Vec3 t = mu_y - scale * r * mu_x;
    return {scale, RigidTransform{r, t}};
}

// 21-joint layout: wrist, then per finger {MCP, PIP, DIP, TIP} in the order
// thumb, index, middle, ring, pinky.
inline constexpr int kNumJoints = 21;
inline constexpr int kWrist = 0;
inline constexpr int joint_index(int finger, int along) { return 1 + finger * 4 + along; }
inline constexpr int kThumbMcp = joint_index(0, 0);
inline constexpr int kIndexMcp = joint_index(1, 0);
inline constexpr int kMiddleMcp = joint_index(2, 0);
inline constexpr int kPinkyMcp = joint_index(4, 0);

/// World -> hand-local canonical frame from 21 world joints. Origin at the
/// wrist, +x from the wrist to the index MCP, palm normal from the
/// wrist-index x wrist-pinky cross product, flipped when needed so that
/// n . (wrist->middle x wrist->index) >= 0.
inline RigidTransform hand_local_frame(const Eigen::Matrix<double, 21, 3>& joints) {
    const Vec3 wrist = joints.row(kWrist);
    const Vec3 to_index = Vec3(joints.row(kIndexMcp)) - wrist;
    const Vec3 to_pinky = Vec3(joints.row(kPinkyMcp)) - wrist;
    const Vec3 to_middle = Vec3(joints.row(kMiddleMcp)) - wrist;
    if (to_index.norm() < 1e-9 || to_pinky.norm() < 1e-9) {
        throw DegenerateLandmarks("hand_local_frame: coincident landmarks");
    }
    const Vec3 x = to_index.normalized();
    Vec3 n = to_index.cross(to_pinky);
    if (n.norm() < 1e-9 * to_index.norm() * to_pinky.norm()) {
        throw DegenerateLandmarks("hand_local_frame: collinear landmarks");
    }
    n.normalize();
    if (n.dot(to_middle.cross(to_index)) < 0.0) n = -n;
    const Vec3 y = n.cross(x);
    Mat3 r_local_cols; // columns are the local axes expressed in world
    r_local_cols.col(0) = x;
    r_local_cols.col(1) = y;
    r_local_cols.col(2) = n;
    // world -> local
    return RigidTransform{r_local_cols.transpose(), -(r_local_cols.transpose() * wrist)};
}

/// Least-squares plane through N points (SVD). Origin at the centroid,
/// normal chosen facing the camera (n . -z_cam >= 0), u from projecting the
/// negative camera x-axis onto the plane, v = n x u.
inline TouchPlane fit_plane_svd(const Eigen::MatrixX3d& points) {
    const auto n_pts = points.rows();
    if (n_pts < 3) throw DegenerateConfiguration("fit_plane_svd: need >= 3 points");
    const Vec3 centroid = points.colwise().mean();
    const Eigen::MatrixX3d centered = points.rowwise() - centroid.transpose();
    Eigen::JacobiSVD<Eigen::MatrixX3d> svd(centered, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv(1) < 1e-12 * (sv(0) + 1e-300)) {
        throw DegenerateConfiguration("fit_plane_svd: collinear points");
    }
    Vec3 normal = svd.matrixV().col(2);
    if (normal.dot(Vec3(0, 0, -1)) < 0.0) normal = -normal;
    Vec3 u = Vec3(-1, 0, 0) - normal * normal.dot(Vec3(-1, 0, 0));
    if (u.norm() < 1e-9) {
        // Camera x-axis is along the normal; fall back to the y-axis.
        u = Vec3(0, -1, 0) - normal * normal.dot(Vec3(0, -1, 0));
    }
    u.normalize();
    const Vec3 v = normal.cross(u);
    return TouchPlane{centroid, u, v, normal};
}

} // namespace handpress::geometry
