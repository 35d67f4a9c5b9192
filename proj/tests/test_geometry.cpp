#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "handpress/geometry.hpp"

using namespace handpress;
using geometry::Mat3;
using geometry::Vec3;
using geometry::Vec6;

namespace {

std::mt19937_64 rng(42);

Vec3 random_vec(double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    return Vec3(g(rng), g(rng), g(rng));
}

Mat3 random_rotation() {
    return geometry::exp_so3(random_vec(1.0));
}

} // namespace

TEST_CASE("exp_so3 basics") {
    CHECK(geometry::exp_so3(Vec3::Zero()).isApprox(Mat3::Identity(), 1e-15));

    // 90 degrees about z maps x to y.
    const Mat3 r = geometry::exp_so3(Vec3(0, 0, M_PI / 2));
    CHECK((r * Vec3::UnitX() - Vec3::UnitY()).norm() < 1e-12);

    // Always a proper rotation.
    for (int i = 0; i < 100; ++i) {
        const Mat3 m = geometry::exp_so3(random_vec(2.0));
        CHECK(geometry::orthonormality_error(m) < 1e-12);
        CHECK(m.determinant() == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("exp/log round trip") {
    for (int i = 0; i < 500; ++i) {
        // Keep the angle below pi where log is unique.
        Vec3 w = random_vec(1.0);
        if (w.norm() >= M_PI) w *= (M_PI - 1e-3) / w.norm();
        const Vec3 back = geometry::log_so3(geometry::exp_so3(w));
        CHECK((back - w).norm() < 1e-9);
    }
    // Near pi: the round trip must stay stable.
    const Vec3 w = (M_PI - 1e-8) * Vec3::UnitX();
    CHECK((geometry::log_so3(geometry::exp_so3(w)) - w).norm() < 1e-6);
}

TEST_CASE("geodesic distance equals trace formula and axis-angle identity") {
    for (int i = 0; i < 200; ++i) {
        const Mat3 a = random_rotation();
        const Mat3 b = random_rotation();
        const double d = geometry::geodesic_distance(a, b);
        const double tr = (b.transpose() * a).trace();
        const double oracle = std::acos(std::clamp((tr - 1.0) / 2.0, -1.0, 1.0));
        CHECK(d == Catch::Approx(oracle).margin(1e-7));
    }
    for (double angle : {0.1, 0.5, 1.0, 2.0, 3.0}) {
        const double d = geometry::geodesic_distance(
            geometry::exp_so3(angle * Vec3::UnitZ()), Mat3::Identity());
        CHECK(d == Catch::Approx(angle).margin(1e-9));
    }
}

TEST_CASE("rot6d round trip and Gram-Schmidt") {
    for (int i = 0; i < 200; ++i) {
        const Mat3 r = random_rotation();
        const Mat3 back = geometry::rot6d_to_matrix(geometry::matrix_to_rot6d(r));
        CHECK((back - r).norm() < 1e-9);
    }
    // Non-orthogonal input still yields a proper rotation.
    Vec6 r6;
    r6 << 2.0, 0.1, 0.0, 0.5, 1.5, 0.2;
    const Mat3 m = geometry::rot6d_to_matrix(r6);
    CHECK(geometry::orthonormality_error(m) < 1e-12);
    CHECK(m.determinant() > 0.0);

    Vec6 degenerate;
    degenerate << 1, 0, 0, 2, 0, 0; // parallel
    CHECK_THROWS_AS(geometry::rot6d_to_matrix(degenerate), DegenerateInput);
}

TEST_CASE("dexp_so3 matches finite differences") {
    for (int trial = 0; trial < 50; ++trial) {
        const Vec3 w = random_vec(1.2);
        for (int i = 0; i < 3; ++i) {
            const double h = 1e-6;
            Vec3 wp = w, wm = w;
            wp(i) += h;
            wm(i) -= h;
            const Mat3 fd = (geometry::exp_so3(wp) - geometry::exp_so3(wm)) / (2 * h);
            const Mat3 an = geometry::dexp_so3(w, i);
            CHECK((fd - an).norm() < 1e-6);
        }
    }
    // Zero point: derivative is the generator.
    for (int i = 0; i < 3; ++i) {
        Vec3 e = Vec3::Zero();
        e(i) = 1.0;
        CHECK((geometry::dexp_so3(Vec3::Zero(), i) - geometry::skew(e)).norm() < 1e-12);
    }
}

TEST_CASE("ensure_rotation") {
    CHECK_THROWS_AS(geometry::ensure_rotation(2.0 * Mat3::Identity()), InvalidRotation);
    Mat3 reflect = Mat3::Identity();
    reflect(2, 2) = -1.0;
    CHECK_THROWS_AS(geometry::ensure_rotation(reflect), InvalidRotation);
    const Mat3 r = random_rotation();
    CHECK(geometry::ensure_rotation(r).isApprox(r, 1e-12));
}

TEST_CASE("rigid transform algebra") {
    for (int i = 0; i < 50; ++i) {
        geometry::RigidTransform a{random_rotation(), random_vec()};
        geometry::RigidTransform b{random_rotation(), random_vec()};
        const Vec3 p = random_vec();
        CHECK((a.compose(b).apply(p) - a.apply(b.apply(p))).norm() < 1e-12);
        CHECK((a.inverse().apply(a.apply(p)) - p).norm() < 1e-12);
    }
}

TEST_CASE("umeyama exact recovery") {
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 4 + static_cast<int>(rng() % 20);
        Eigen::MatrixX3d src(n, 3);
        for (int i = 0; i < n; ++i) src.row(i) = random_vec().transpose();
        const Mat3 r_gt = random_rotation();
        const Vec3 t_gt = random_vec();
        const double s_gt = 0.5 + std::abs(g(rng));
        Eigen::MatrixX3d dst(n, 3);
        for (int i = 0; i < n; ++i) {
            dst.row(i) = (s_gt * r_gt * Vec3(src.row(i)) + t_gt).transpose();
        }
        const auto [s, tf] = geometry::umeyama_align(src, dst, true);
        CHECK(s == Catch::Approx(s_gt).margin(1e-9));
        CHECK((tf.rot - r_gt).norm() < 1e-9);
        CHECK((tf.trans - t_gt).norm() < 1e-9);
        // Residual is zero.
        for (int i = 0; i < n; ++i) {
            CHECK((s * tf.rot * Vec3(src.row(i)) + tf.trans - Vec3(dst.row(i))).norm() < 1e-9);
        }
    }
}

TEST_CASE("umeyama degenerate input") {
    Eigen::MatrixX3d collinear(4, 3);
    for (int i = 0; i < 4; ++i) collinear.row(i) = Vec3(i, 0, 0).transpose();
    CHECK_THROWS_AS(geometry::umeyama_align(collinear, collinear, false),
                    DegenerateConfiguration);
    Eigen::MatrixX3d two(2, 3);
    two.setZero();
    CHECK_THROWS_AS(geometry::umeyama_align(two, two, false), DegenerateConfiguration);
}

TEST_CASE("hand_local_frame canonicalization and rigid invariance") {
    // Build plausible joints: wrist at an arbitrary spot, MCPs spread out.
    Eigen::Matrix<double, 21, 3> joints = Eigen::Matrix<double, 21, 3>::Zero();
    joints.row(0) = Vec3(0.01, 0.02, 0.03).transpose();
    for (int f = 0; f < 5; ++f) {
        const Vec3 mcp = Vec3(0.08, -0.03 + 0.025 * f, 0.002 * f);
        for (int a = 0; a < 4; ++a) {
            joints.row(1 + 4 * f + a) = (mcp + 0.02 * a * Vec3(1, 0.1 * f, 0)).transpose();
        }
    }

    const auto frame = geometry::hand_local_frame(joints);
    // Wrist maps to the origin, index MCP to +x.
    CHECK(frame.apply(joints.row(0)).norm() < 1e-12);
    const Vec3 idx = frame.apply(joints.row(geometry::kIndexMcp));
    CHECK(idx.y() == Catch::Approx(0.0).margin(1e-12));
    CHECK(idx.z() == Catch::Approx(0.0).margin(1e-12));
    CHECK(idx.x() > 0.0);

    // Equivariance: frame(T J) = frame(J) compose T^-1.
    for (int trial = 0; trial < 50; ++trial) {
        geometry::RigidTransform t{random_rotation(), random_vec(0.1)};
        Eigen::Matrix<double, 21, 3> moved;
        for (int j = 0; j < 21; ++j) moved.row(j) = t.apply(joints.row(j)).transpose();
        const auto f_moved = geometry::hand_local_frame(moved);
        const auto expect = frame.compose(t.inverse());
        CHECK((f_moved.rot - expect.rot).norm() < 1e-9);
        CHECK((f_moved.trans - expect.trans).norm() < 1e-9);
        CHECK(f_moved.rot.determinant() == Catch::Approx(1.0).margin(1e-9));
    }

    // Degenerate: all landmarks coincident.
    Eigen::Matrix<double, 21, 3> flat = Eigen::Matrix<double, 21, 3>::Zero();
    CHECK_THROWS_AS(geometry::hand_local_frame(flat), DegenerateLandmarks);
}

TEST_CASE("fit_plane_svd") {
    // Exact plane z = 0.3.
    Eigen::MatrixX3d pts(5, 3);
    pts << 0, 0, 0.3, 0.1, 0, 0.3, 0, 0.1, 0.3, 0.1, 0.1, 0.3, 0.05, 0.02, 0.3;
    const auto plane = geometry::fit_plane_svd(pts);
    CHECK(std::abs(std::abs(plane.n.z()) - 1.0) < 1e-12);
    for (int i = 0; i < 5; ++i) {
        CHECK(std::abs(plane.signed_distance(pts.row(i))) < 1e-12);
    }
    // Orthonormal in-plane frame.
    CHECK(plane.u.norm() == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::abs(plane.u.dot(plane.n)) < 1e-12);
    CHECK((plane.n.cross(plane.u) - plane.v).norm() < 1e-12);
    // Normal faces the camera (-z half-space).
    CHECK(plane.n.dot(Vec3(0, 0, -1)) >= 0.0);

    // Noise: residual RMS bounded by the injected noise.
    std::normal_distribution<double> g(0.0, 0.001);
    Eigen::MatrixX3d noisy(30, 3);
    for (int i = 0; i < 30; ++i) {
        noisy.row(i) = Vec3(0.05 * (i % 6), 0.04 * (i / 6), 0.3 + g(rng)).transpose();
    }
    const auto fit = geometry::fit_plane_svd(noisy);
    double rms = 0.0;
    for (int i = 0; i < 30; ++i) {
        const double d = fit.signed_distance(noisy.row(i));
        rms += d * d;
    }
    rms = std::sqrt(rms / 30.0);
    CHECK(rms < 0.004);

    Eigen::MatrixX3d line(4, 3);
    for (int i = 0; i < 4; ++i) line.row(i) = Vec3(i, 2.0 * i, 0).transpose();
    CHECK_THROWS_AS(geometry::fit_plane_svd(line), DegenerateConfiguration);
}
