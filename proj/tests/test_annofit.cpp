#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "handpress/annofit.hpp"
#include "handpress/synth.hpp"

using namespace handpress;
using namespace handpress::annofit;
using geometry::Mat3;
using geometry::RigidTransform;
using geometry::Vec3;

namespace {

std::mt19937_64 rng(31);

Vec3 random_vec(double s = 1.0) {
    std::normal_distribution<double> g(0.0, s);
    return Vec3(g(rng), g(rng), g(rng));
}

// A compact random instance driving all objective terms: small sensor grid,
// Kinect view with a silhouette mask, noisy markers.
FrameObservations random_small_obs(const handmodel::HandShape& shape, bool with_kinect) {
    std::normal_distribution<double> g(0.0, 1.0);
    handmodel::HandPose gt_pose;
    for (int d = 0; d < handmodel::kNumDofs; ++d) gt_pose.theta(d) = 0.3 * std::abs(g(rng));

    FrameObservations obs;
    obs.base_transform.rot = geometry::exp_so3(random_vec(0.1));
    obs.base_transform.trans = Vec3(0.0, 0.0, 0.12) + random_vec(0.005);

    const auto joints = handmodel::forward_kinematics(gt_pose, shape);
    for (int j = 0; j < 21; ++j) {
        obs.markers_world.row(j) =
            (obs.base_transform.apply(joints.row(j)) + random_vec(0.002)).transpose();
    }

    obs.sensor.rows = 8;
    obs.sensor.cols = 8;
    obs.sensor.pitch = 0.02; // coarse cells so the hand covers the grid
    obs.sensor.origin = obs.base_transform.trans + Vec3(0.05, 0.0, -0.04);
    obs.p_gt.grid = Eigen::MatrixXd::Zero(8, 8);
    for (int r = 0; r < 8; ++r) {
        for (int c = 0; c < 8; ++c) obs.p_gt.grid(r, c) = std::abs(g(rng));
    }

    if (with_kinect) {
        camera::PinholeModel pin{40.0, 40.0, 8.0, 8.0};
        obs.kinect_pinhole = pin;
        RigidTransform kin;
        kin.rot = Mat3::Identity();
        kin.trans = Vec3(0.0, 0.0, 0.3);
        obs.kinect_extrinsics = kin;
        Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(16, 16);
        for (int r = 4; r < 12; ++r) {
            for (int c = 4; c < 12; ++c) mask(r, c) = 1.0;
        }
        obs.hand_mask = mask;
    }
    return obs;
}

AnnoParams random_params() {
    std::normal_distribution<double> g(0.0, 1.0);
    AnnoParams p;
    for (int d = 0; d < handmodel::kNumDofs; ++d) p.theta.theta(d) = 0.25 * std::abs(g(rng));
    p.delta_rot = random_vec(0.05);
    p.delta_trans = random_vec(0.003);
    for (int i = 0; i < kNumVertices; ++i) p.pv_raw(i) = -2.0 + 2.0 * g(rng);
    return p;
}

} // namespace

TEST_CASE("marker_losses exact and offset cases") {
    const handmodel::HandShape shape;
    handmodel::HandPose pose;
    pose.theta.setConstant(0.2);
    const RigidTransform transform{geometry::exp_so3(Vec3(0.1, 0.0, 0.2)), Vec3(0.01, 0.02, 0.1)};
    const camera::PinholeModel pin{500.0, 500.0, 320.0, 240.0};
    RigidTransform kin;
    kin.trans = Vec3(0.0, 0.0, 0.5);

    FrameObservations obs;
    const auto joints = handmodel::forward_kinematics(pose, shape);
    for (int j = 0; j < 21; ++j) {
        obs.markers_world.row(j) = transform.apply(joints.row(j)).transpose();
    }

    const auto [l3d, l2d] = marker_losses(pose, shape, transform, obs, pin, kin);
    CHECK(l3d < 1e-18);
    CHECK(l2d < 1e-12);

    // Uniform 1 mm offset: L3d = 1e-6 m^2 exactly.
    FrameObservations off = obs;
    for (int j = 0; j < 21; ++j) off.markers_world(j, 0) += 0.001;
    const auto [l3d_off, l2d_off] = marker_losses(pose, shape, transform, off, pin, kin);
    CHECK(l3d_off == Catch::Approx(1e-6).margin(1e-15));
    CHECK(l2d_off > 0.0);
}

TEST_CASE("marker_losses matches scalar loop") {
    const handmodel::HandShape shape;
    const camera::PinholeModel pin{450.0, 430.0, 320.0, 240.0};
    RigidTransform kin{geometry::exp_so3(Vec3(0.05, -0.1, 0.02)), Vec3(0.01, 0.0, 0.6)};

    for (int trial = 0; trial < 20; ++trial) {
        handmodel::HandPose pose;
        std::normal_distribution<double> g(0.0, 0.3);
        for (int d = 0; d < handmodel::kNumDofs; ++d) pose.theta(d) = std::abs(g(rng));
        RigidTransform transform{geometry::exp_so3(random_vec(0.2)), Vec3(0, 0, 0.1) + random_vec(0.01)};

        FrameObservations obs;
        const auto joints = handmodel::forward_kinematics(pose, shape);
        for (int j = 0; j < 21; ++j) {
            obs.markers_world.row(j) =
                (transform.apply(joints.row(j)) + random_vec(0.003)).transpose();
        }

        const auto [l3d, l2d] = marker_losses(pose, shape, transform, obs, pin, kin);

        double o3 = 0.0, o2 = 0.0;
        for (int j = 0; j < 21; ++j) {
            const Vec3 pc = kin.rot * (transform.rot * Vec3(joints.row(j)) + transform.trans) +
                            kin.trans;
            const Vec3 gc = kin.rot * Vec3(obs.markers_world.row(j)) + kin.trans;
            o3 += (pc - gc).squaredNorm();
            const Eigen::Vector2d pu(pin.fx * pc.x() / pc.z() + pin.cx,
                                     pin.fy * pc.y() / pc.z() + pin.cy);
            const Eigen::Vector2d gu(pin.fx * gc.x() / gc.z() + pin.cx,
                                     pin.fy * gc.y() / gc.z() + pin.cy);
            o2 += (pu - gu).squaredNorm();
        }
        CHECK(l3d == Catch::Approx(o3 / 21.0).margin(1e-12));
        CHECK(l2d == Catch::Approx(o2 / 21.0).margin(1e-12));
    }
}

TEST_CASE("total_objective weight linearity and finiteness") {
    const handmodel::HandShape shape;
    const auto obs = random_small_obs(shape, false);
    const auto params = random_params();
    OptimConfig cfg;

    ObjectiveTerms t1;
    total_objective(params, shape, obs, cfg, &t1);

    OptimConfig cfg2 = cfg;
    cfg2.w_press *= 2.0;
    ObjectiveTerms t2;
    total_objective(params, shape, obs, cfg2, &t2);
    // The press part of the render term doubles; isolate it with w_hand = 0.
    OptimConfig cfga = cfg, cfgb = cfg;
    cfga.w_hand = 0.0;
    cfgb.w_hand = 0.0;
    cfgb.w_press = 2.0 * cfg.w_press;
    ObjectiveTerms ta, tb;
    total_objective(params, shape, obs, cfga, &ta);
    total_objective(params, shape, obs, cfgb, &tb);
    CHECK(tb.render == Catch::Approx(2.0 * ta.render).epsilon(1e-12));

    AnnoParams bad = params;
    bad.delta_trans(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(total_objective(bad, shape, obs, cfg), DegenerateInput);
}

TEST_CASE("total_objective gradient matches finite differences") {
    const handmodel::HandShape shape;
    OptimConfig cfg;
    std::uniform_int_distribution<int> pick(0, kNumParams - 1);

    for (int trial = 0; trial < 6; ++trial) {
        const bool with_kinect = trial % 2 == 0;
        const auto obs = random_small_obs(shape, with_kinect);
        const auto params = random_params();
        const auto [loss, grad] = total_objective(params, shape, obs, cfg);
        CHECK(std::isfinite(loss));

        const Eigen::VectorXd x = params.pack();
        auto eval = [&](const Eigen::VectorXd& xv) {
            return total_objective(AnnoParams::unpack(xv), shape, obs, cfg).first;
        };

        // Deterministic subset: all pose/transform entries plus sampled pv.
        std::vector<int> idx;
        for (int i = 0; i < kNumDofs + 6; ++i) idx.push_back(i);
        for (int k = 0; k < 12; ++k) idx.push_back(kNumDofs + 6 + pick(rng) % kNumVertices);

        for (const int i : idx) {
            auto fd_at = [&](double h) {
                Eigen::VectorXd xp = x, xm = x;
                xp(i) += h;
                xm(i) -= h;
                return (eval(xp) - eval(xm)) / (2 * h);
            };
            auto close = [&](double fd) {
                const double scale = std::max({1.0, std::abs(fd), std::abs(grad(i))});
                return std::abs(fd - grad(i)) < 1e-4 * scale;
            };
            // The splat weights are piecewise linear; a stencil can straddle a
            // grid-cell kink. Shrinking h resolves those rare cases.
            const double h = 1e-6 * std::max(1.0, std::abs(x(i)));
            const bool ok = close(fd_at(h)) || close(fd_at(h * 0.1));
            CHECK(ok);
        }
    }
}

TEST_CASE("silhouette dice term matches brute force") {
    // Vertices at exact pixel centers so the occupancy is closed-form.
    const camera::PinholeModel pin{16.0, 16.0, 8.0, 8.0};
    Eigen::MatrixX3d verts(4, 3);
    auto at_pixel = [&](int px, int py) {
        return Vec3((px - pin.cx) / pin.fx, (py - pin.cy) / pin.fy, 1.0);
    };
    verts.row(0) = at_pixel(5, 5).transpose();
    verts.row(1) = at_pixel(6, 5).transpose();
    verts.row(2) = at_pixel(5, 6).transpose();
    verts.row(3) = at_pixel(10, 10).transpose();

    Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(16, 16);
    mask(5, 5) = 1.0;
    mask(5, 6) = 1.0;
    mask(11, 10) = 1.0;

    const auto res = detail::silhouette_loss_with_grad(verts, pin, mask, 0.0, 1.0);

    // Brute force: occupancy o = 1 - exp(-count) per pixel.
    Eigen::MatrixXd occ = Eigen::MatrixXd::Zero(16, 16);
    occ(5, 5) = occ(5, 6) = occ(6, 5) = occ(10, 10) = 1.0 - std::exp(-1.0);
    const double inter = (occ.array() * mask.array()).sum();
    const double dice = 2.0 * inter / (occ.sum() + mask.sum());
    CHECK(res.loss == Catch::Approx(1.0 - dice).margin(1e-9));
}

TEST_CASE("optimize_annotation stationary start") {
    const auto frame = synth::sample_scenario(1234, {0.0, 0.0, 200.0, 20.0});
    FrameObservations obs = synth::to_observations(frame);
    obs.base_transform = frame.transform; // exact markers, exact base

    AnnoParams init;
    init.theta = frame.pose;
    init.set_pressure(frame.gt_pv);

    OptimConfig cfg;
    cfg.max_iterations = 100;
    const auto [out, report] = optimize_annotation(init, frame.shape, obs, cfg);

    const auto [loss0, g0] = total_objective(init, frame.shape, obs, cfg);
    CHECK(report.final_loss <= loss0 + 1e-12);
    // Ground-truth start: the pose barely moves.
    CHECK((out.theta.theta - frame.pose.theta).cwiseAbs().maxCoeff() < 5e-3);
    CHECK(out.pressure().minCoeff() >= 0.0);
}

TEST_CASE("optimize_annotation recovers a perturbed synthetic frame") {
    std::uniform_real_distribution<double> sign(0.0, 1.0);
    const double deg = M_PI / 180.0;
    for (std::uint64_t seed : {11u, 22u, 33u}) {
        const auto frame = synth::sample_scenario(seed, {0.0, 0.0, 200.0, 20.0});
        const FrameObservations obs = synth::to_observations(frame);

        AnnoParams init;
        init.theta = frame.pose;
        for (int d = 0; d < handmodel::kNumDofs; ++d) {
            init.theta.theta(d) += (sign(rng) < 0.5 ? -1.0 : 1.0) * 10.0 * deg;
        }
        init.delta_trans = Vec3(0.005, 0.0, 0.0);

        OptimConfig cfg;
        cfg.max_iterations = 300;
        const auto [out, report] = optimize_annotation(init, frame.shape, obs, cfg);

        const Mat3 r_w = obs.base_transform.rot * geometry::exp_so3(out.delta_rot);
        const Vec3 t_w = obs.base_transform.trans + out.delta_trans;
        const auto joints = handmodel::forward_kinematics(out.theta, frame.shape);
        double mpjpe = 0.0;
        for (int j = 0; j < 21; ++j) {
            const Vec3 pred = r_w * Vec3(joints.row(j)) + t_w;
            const Vec3 gt = frame.transform.apply(
                handmodel::forward_kinematics(frame.pose, frame.shape).row(j));
            mpjpe += (pred - gt).norm();
        }
        mpjpe = mpjpe / 21.0 * 1000.0;
        CHECK(mpjpe <= 2.0);
        CHECK(out.pressure().minCoeff() >= 0.0);
    }
}

TEST_CASE("calibrate_shape guards and stationary init") {
    OptimConfig cfg;
    std::vector<FrameObservations> two(2);
    std::vector<handmodel::HandPose> poses2(2);
    CHECK_THROWS_AS(calibrate_shape(two, handmodel::HandShape{}, poses2, cfg),
                    InsufficientFrames);

    std::vector<FrameObservations> frames;
    std::vector<handmodel::HandPose> poses;
    for (std::uint64_t s : {1u, 2u, 3u}) {
        const auto f = synth::sample_scenario(s, {0.0, 0.0, 200.0, 20.0});
        auto obs = synth::to_observations(f);
        obs.base_transform = f.transform;
        frames.push_back(obs);
        poses.push_back(f.pose);
    }
    const auto out = calibrate_shape(frames, handmodel::HandShape{}, poses, cfg);
    CHECK(out.within_bounds());
    // Frames were synthesized at beta = 1; starting there stays there.
    CHECK((out.beta.array() - 1.0).abs().maxCoeff() < 1e-3);
}

TEST_CASE("calibrate_shape recovers a scaled hand") {
    OptimConfig cfg;
    handmodel::HandShape gt;
    gt.beta(0) = 1.2; // global scale only: well observed by markers

    std::vector<FrameObservations> frames;
    std::vector<handmodel::HandPose> poses;
    for (std::uint64_t s : {5u, 6u, 7u}) {
        auto f = synth::sample_scenario(s, {0.0, 0.0, 200.0, 20.0});
        FrameObservations obs;
        obs.base_transform = f.transform;
        const auto joints = handmodel::forward_kinematics(f.pose, gt);
        for (int j = 0; j < 21; ++j) {
            obs.markers_world.row(j) = f.transform.apply(joints.row(j)).transpose();
        }
        obs.sensor.rows = 4;
        obs.sensor.cols = 4;
        obs.p_gt.grid = Eigen::MatrixXd::Zero(4, 4);
        frames.push_back(obs);
        poses.push_back(f.pose);
    }
    const auto out = calibrate_shape(frames, handmodel::HandShape{}, poses, cfg);
    CHECK(std::abs(out.beta(0) - 1.2) < 0.05);
    CHECK(out.within_bounds());
}

TEST_CASE("solve_extrinsics noiseless and perturbed-init recovery") {
    const auto model = synth::default_fisheye();
    const auto joints = handmodel::forward_kinematics(handmodel::HandPose{}, handmodel::HandShape{});
    const RigidTransform gt = synth::default_mean_extrinsics();

    Eigen::Matrix<double, 21, 2> u;
    for (int j = 0; j < 21; ++j) {
        u.row(j) = camera::fisheye_project(model, gt.apply(joints.row(j))).transpose();
    }

    // Init at ground truth: machine-precision residual, output unchanged.
    const auto [exact, rms0] = solve_extrinsics(joints, u, model, gt);
    CHECK(rms0 < 1e-10);
    CHECK((exact.rot - gt.rot).norm() < 1e-10);
    CHECK((exact.trans - gt.trans).norm() < 1e-10);

    // Perturbed init: 10 degrees, 20 mm.
    RigidTransform init = gt;
    init.rot = gt.rot * geometry::exp_so3(10.0 * M_PI / 180.0 * Vec3(0.3, 0.8, 0.5).normalized());
    init.trans += Vec3(0.012, -0.01, 0.012);
    const auto [rec, rms] = solve_extrinsics(joints, u, model, init);
    CHECK(rms < 1e-8);
    CHECK(geometry::geodesic_distance(rec.rot, gt.rot) < 1e-4);
    CHECK((rec.trans - gt.trans).norm() < 1e-5);
    CHECK(rec.rot.determinant() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("compose_residual_extrinsics") {
    RigidTransform base{geometry::exp_so3(Vec3(0.2, -0.1, 0.4)), Vec3(0.01, 0.02, 0.03)};

    const auto same = compose_residual_extrinsics(base, Vec3(Vec3::Zero()), Vec3::Zero());
    CHECK((same.rot - base.rot).norm() < 1e-15);
    CHECK((same.trans - base.trans).norm() == 0.0);

    const auto z90 = compose_residual_extrinsics(RigidTransform{}, Vec3(0, 0, M_PI / 2),
                                                 Vec3::Zero());
    CHECK((z90.rot * Vec3::UnitX() - Vec3::UnitY()).norm() < 1e-12);

    // Left-invariance: geodesic distance equals the delta angle.
    for (double ang : {0.1, 0.7, 1.9, 3.0}) {
        const Vec3 w = ang * Vec3(0.2, -0.5, 0.84).normalized();
        const auto moved = compose_residual_extrinsics(base, w, Vec3::Zero());
        CHECK(geometry::geodesic_distance(moved.rot, base.rot) ==
              Catch::Approx(ang).margin(1e-7));
    }

    // 6D overload reduces to the axis-angle one.
    const geometry::Vec6 r6 = geometry::matrix_to_rot6d(geometry::exp_so3(Vec3(0.1, 0.2, 0.3)));
    const auto via6 = compose_residual_extrinsics(base, r6, Vec3(0.001, 0, 0));
    const auto direct = compose_residual_extrinsics(base, Vec3(0.1, 0.2, 0.3), Vec3(0.001, 0, 0));
    CHECK((via6.rot - direct.rot).norm() < 1e-9);
    CHECK((via6.trans - direct.trans).norm() < 1e-12);
}
