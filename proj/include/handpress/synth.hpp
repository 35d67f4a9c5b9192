#pragma once

// Synthetic ground-truth scenario generation: a sampled pose with planar
// fingertip contact, penetration-model pressure normalized to a target
// force, the rendered sensor map, noisy motion-capture markers, and noisy
// wrist-camera keypoints. Deterministic per seed.

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "handpress/annofit.hpp"
#include "handpress/camera.hpp"
#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"
#include "handpress/handmodel.hpp"
#include "handpress/pressrender.hpp"

namespace handpress::synth {

using geometry::RigidTransform;
using geometry::Vec3;

struct SynthConfig {
    double marker_noise_mm = 1.0;
    double kp_noise_px = 5.0; // per-axis sigma; mean radial error ~6.2 px
    double press_force_g = 200.0;
    double wrist_pitch_deg_range = 20.0;
};

struct SyntheticFrame {
    std::uint64_t seed = 0;
    handmodel::HandPose pose;
    handmodel::HandShape shape;
    RigidTransform transform;  // gt hand-local -> world
    RigidTransform extrinsics; // gt hand-local -> wrist camera
    Eigen::Matrix<double, 21, 3> markers_world;
    Eigen::Matrix<double, 21, 2> keypoints_2d;
    Eigen::VectorXd gt_pv; // grams, 778
    pressrender::PressureMap gt_map;
    pressrender::OrthoCamera sensor;
};

/// Mean wrist-camera extrinsics: the camera sits 28 mm behind the wrist and
/// looks down the finger direction (hand-local +x maps to camera +z).
inline RigidTransform default_mean_extrinsics() {
    RigidTransform t;
    t.rot = geometry::exp_so3(Vec3(0.0, -M_PI / 2.0, 0.0));
    t.trans = Vec3(0.0, 0.0, 0.028);
    return t;
}

/// Wide-angle wrist camera used for synthetic keypoints.
inline camera::FisheyeModel default_fisheye() {
    camera::FisheyeModel m;
    m.poly = {0.0, 300.0, 0.0, -8.0};
    m.cx = 320.0;
    m.cy = 240.0;
    m.width = 640;
    m.height = 480;
    return m;
}

inline SyntheticFrame sample_scenario(std::uint64_t seed, const SynthConfig& cfg = {}) {
    if (!(cfg.marker_noise_mm >= 0.0 && cfg.kp_noise_px >= 0.0 && cfg.press_force_g > 0.0 &&
          cfg.wrist_pitch_deg_range >= 0.0)) {
        throw DegenerateInput("sample_scenario: invalid config");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto uniform = [&](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    const double deg = M_PI / 180.0;

    SyntheticFrame frame;
    frame.seed = seed;

    // Pose comfortably inside the anatomical limits.
    for (int f = 0; f < handmodel::kNumFingers; ++f) {
        frame.pose.theta(handmodel::dof_mcp_flex(f)) = uniform(5.0 * deg, 55.0 * deg);
        frame.pose.theta(handmodel::dof_mcp_abduct(f)) = uniform(-8.0 * deg, 8.0 * deg);
        frame.pose.theta(handmodel::dof_pip_flex(f)) = uniform(10.0 * deg, 60.0 * deg);
        frame.pose.theta(handmodel::dof_dip_flex(f)) = uniform(5.0 * deg, 45.0 * deg);
    }

    // Hand-local -> world: palm down (flexion curls toward hand-local +z,
    // so rolling pi about x points the palmar side at the table), then
    // wrist pitch about y plus a small yaw and offset.
    const double pitch = uniform(-cfg.wrist_pitch_deg_range, cfg.wrist_pitch_deg_range) * deg;
    const double yaw = uniform(-10.0 * deg, 10.0 * deg);
    frame.transform.rot = geometry::exp_so3(Vec3(0.0, 0.0, yaw)) *
                          geometry::exp_so3(Vec3(0.0, pitch, 0.0)) *
                          geometry::exp_so3(Vec3(M_PI, 0.0, 0.0));
    frame.transform.trans = Vec3(uniform(-0.01, 0.01), uniform(-0.01, 0.01), 0.15);

    const auto mesh = handmodel::skin_mesh(frame.pose, frame.shape);
    const auto& regions = handmodel::fingertip_regions();

    Eigen::MatrixX3d verts_world(handmodel::kNumVertices, 3);
    for (int v = 0; v < handmodel::kNumVertices; ++v) {
        verts_world.row(v) = frame.transform.apply(mesh.vertices.row(v)).transpose();
    }

    // Contact plane just above the lowest fingertip vertices; penetration
    // pressure p = k_c * depth, normalized so the total equals the target.
    double min_z = std::numeric_limits<double>::infinity();
    for (int f = 0; f < handmodel::kNumFingers; ++f) {
        for (const int v : regions.vertex_ids[f]) min_z = std::min(min_z, verts_world(v, 2));
    }
    const double plane_height = min_z + 0.006;

    frame.gt_pv = Eigen::VectorXd::Zero(handmodel::kNumVertices);
    double total = 0.0;
    Eigen::Vector2d lo(1e9, 1e9), hi(-1e9, -1e9);
    for (int f = 0; f < handmodel::kNumFingers; ++f) {
        for (const int v : regions.vertex_ids[f]) {
            const double depth = plane_height - verts_world(v, 2);
            if (depth > 0.0) {
                frame.gt_pv(v) = depth;
                lo = lo.cwiseMin(verts_world.row(v).head<2>().transpose());
                hi = hi.cwiseMax(verts_world.row(v).head<2>().transpose());
                total += depth;
            }
        }
    }
    frame.gt_pv *= cfg.press_force_g / total;

    // Center the sensor on the contact bounding box, not the pressure
    // centroid: a lightly loaded finger far from the centroid would
    // otherwise fall off the grid and its force would never reach the map.
    // The sensor's long axis follows the wider side of the contact spread
    // (as one would physically place it), since the thumb-to-pinky span can
    // exceed the short side of the grid.
    const Eigen::Vector2d mid = 0.5 * (lo + hi);
    frame.sensor.origin = Vec3(mid.x(), mid.y(), plane_height);
    if ((hi - lo).y() > (hi - lo).x()) {
        frame.sensor.u = Vec3::UnitY();
        frame.sensor.v = -Vec3::UnitX();
    } else {
        frame.sensor.u = Vec3::UnitX();
        frame.sensor.v = Vec3::UnitY();
    }
    frame.sensor.n = Vec3::UnitZ();
    frame.gt_map = pressrender::render_pressure(verts_world, frame.gt_pv, frame.sensor);

    // Extrinsics: the dataset mean with a small per-frame perturbation.
    const RigidTransform mean = default_mean_extrinsics();
    const Vec3 d_rot(gauss(rng) * 2.0 * deg, gauss(rng) * 2.0 * deg, gauss(rng) * 2.0 * deg);
    frame.extrinsics.rot = mean.rot * geometry::exp_so3(d_rot);
    frame.extrinsics.trans =
        mean.trans + 0.002 * Vec3(gauss(rng), gauss(rng), gauss(rng));

    // Noisy markers (world) and wrist-camera keypoints (pixels).
    const auto joints_local = mesh.joints;
    const auto model = default_fisheye();
    for (int j = 0; j < 21; ++j) {
        const Vec3 world = frame.transform.apply(joints_local.row(j));
        frame.markers_world.row(j) =
            (world + cfg.marker_noise_mm * 1e-3 * Vec3(gauss(rng), gauss(rng), gauss(rng)))
                .transpose();
        const auto px = camera::fisheye_project(model, frame.extrinsics.apply(joints_local.row(j)));
        frame.keypoints_2d(j, 0) = px.x() + cfg.kp_noise_px * gauss(rng);
        frame.keypoints_2d(j, 1) = px.y() + cfg.kp_noise_px * gauss(rng);
    }

    return frame;
}

/// Observations as consumed by the annotation optimizer; the base transform
/// comes from the (noisy) markers, as in the real pipeline.
inline annofit::FrameObservations to_observations(const SyntheticFrame& frame) {
    annofit::FrameObservations obs;
    obs.markers_world = frame.markers_world;
    obs.keypoints_2d = frame.keypoints_2d;
    obs.keypoint_visible.fill(true);
    obs.p_gt = frame.gt_map;
    obs.sensor = frame.sensor;
    obs.base_transform = geometry::hand_local_frame(frame.markers_world).inverse();
    return obs;
}

// ---- Frame and manifest files ----

inline nlohmann::json transform_to_json(const RigidTransform& t) {
    std::vector<double> rot(t.rot.data(), t.rot.data() + 9); // column-major
    return {{"rot", rot}, {"trans", {t.trans.x(), t.trans.y(), t.trans.z()}}};
}

inline RigidTransform transform_from_json(const nlohmann::json& j) {
    RigidTransform t;
    const auto rot = j.at("rot").get<std::vector<double>>();
    if (rot.size() != 9) throw ParseError("transform: expected 9 rotation values");
    for (int i = 0; i < 9; ++i) t.rot.data()[i] = rot[i];
    t.rot = geometry::ensure_rotation(t.rot);
    t.trans = Vec3(j.at("trans").at(0), j.at("trans").at(1), j.at("trans").at(2));
    return t;
}

inline nlohmann::json frame_to_json(const SyntheticFrame& frame) {
    nlohmann::json j;
    j["seed"] = frame.seed;
    j["pose"] = handmodel::pose_shape_to_json(frame.pose, frame.shape);
    j["transform"] = transform_to_json(frame.transform);
    j["extrinsics"] = transform_to_json(frame.extrinsics);
    j["sensor_origin"] = {frame.sensor.origin.x(), frame.sensor.origin.y(),
                          frame.sensor.origin.z()};
    j["sensor_u"] = {frame.sensor.u.x(), frame.sensor.u.y(), frame.sensor.u.z()};
    j["sensor_v"] = {frame.sensor.v.x(), frame.sensor.v.y(), frame.sensor.v.z()};
    std::vector<std::vector<double>> markers, kps;
    for (int i = 0; i < 21; ++i) {
        markers.push_back({frame.markers_world(i, 0), frame.markers_world(i, 1),
                           frame.markers_world(i, 2)});
        kps.push_back({frame.keypoints_2d(i, 0), frame.keypoints_2d(i, 1)});
    }
    j["markers_world"] = markers;
    j["keypoints_2d"] = kps;
    j["gt_pv"] = std::vector<double>(frame.gt_pv.data(), frame.gt_pv.data() + frame.gt_pv.size());
    return j;
}

inline SyntheticFrame frame_from_json(const nlohmann::json& j) {
    SyntheticFrame frame;
    frame.seed = j.at("seed").get<std::uint64_t>();
    std::tie(frame.pose, frame.shape) = handmodel::pose_shape_from_json(j.at("pose"));
    frame.transform = transform_from_json(j.at("transform"));
    frame.extrinsics = transform_from_json(j.at("extrinsics"));
    frame.sensor.origin = Vec3(j.at("sensor_origin").at(0), j.at("sensor_origin").at(1),
                               j.at("sensor_origin").at(2));
    if (j.contains("sensor_u")) {
        frame.sensor.u = Vec3(j.at("sensor_u").at(0), j.at("sensor_u").at(1), j.at("sensor_u").at(2));
        frame.sensor.v = Vec3(j.at("sensor_v").at(0), j.at("sensor_v").at(1), j.at("sensor_v").at(2));
    }
    const auto markers = j.at("markers_world").get<std::vector<std::vector<double>>>();
    const auto kps = j.at("keypoints_2d").get<std::vector<std::vector<double>>>();
    const auto pv = j.at("gt_pv").get<std::vector<double>>();
    if (markers.size() != 21 || kps.size() != 21 || pv.size() != handmodel::kNumVertices) {
        throw ParseError("frame file: wrong array sizes");
    }
    for (int i = 0; i < 21; ++i) {
        for (int c = 0; c < 3; ++c) frame.markers_world(i, c) = markers[i].at(c);
        for (int c = 0; c < 2; ++c) frame.keypoints_2d(i, c) = kps[i].at(c);
    }
    frame.gt_pv = Eigen::Map<const Eigen::VectorXd>(pv.data(), pv.size());
    return frame;
}

struct ManifestEntry {
    std::string frame_id;
    std::uint64_t seed = 0;
    std::string frame_file;    // JSON, everything but the pressure grid
    std::string pressure_file; // PMAP
};

inline void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path);
    for (const auto& e : entries) {
        nlohmann::json j = {{"frame_id", e.frame_id},
                            {"seed", e.seed},
                            {"frame_file", e.frame_file},
                            {"pressure_file", e.pressure_file}};
        os << j.dump() << '\n';
    }
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestEntry e;
            e.frame_id = j.at("frame_id");
            e.seed = j.at("seed");
            e.frame_file = j.at("frame_file");
            e.pressure_file = j.at("pressure_file");
            entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(std::string("manifest: ") + ex.what());
        }
    }
    return entries;
}

} // namespace handpress::synth
