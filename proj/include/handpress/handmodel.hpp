#pragma once

// Procedural articulated right hand: capsule-per-bone template with exactly
// 778 vertices and 21 joints, rigid-per-bone skinning with a blend ring at
// each joint, anatomical joint limits, and analytic pose jacobians.
//
// 20 articulation DOFs, 4 per finger in the order
// {MCP flexion, MCP abduction, PIP flexion, DIP flexion}; fingers ordered
// thumb, index, middle, ring, pinky. The mesh and joints live in the
// hand-local canonical frame (wrist at the origin, index MCP on +x).

#include <array>
#include <cmath>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"

namespace handpress::handmodel {

using geometry::Mat3;
using geometry::Vec3;

inline constexpr int kNumVertices = 778;
inline constexpr int kNumJoints = 21;
inline constexpr int kNumDofs = 20;
inline constexpr int kNumFingers = 5;
inline constexpr int kNumBones = 16; // palm + 3 phalanges per finger

inline constexpr int dof_mcp_flex(int finger) { return 4 * finger; }
inline constexpr int dof_mcp_abduct(int finger) { return 4 * finger + 1; }
inline constexpr int dof_pip_flex(int finger) { return 4 * finger + 2; }
inline constexpr int dof_dip_flex(int finger) { return 4 * finger + 3; }

inline constexpr int bone_id(int finger, int phalanx) { return 1 + finger * 3 + phalanx; }

struct HandShape {
    // beta[0]: global scale; beta[1..5]: per-finger length scale;
    // beta[6]: palm width, beta[7]: palm thickness, beta[8]: palm length,
    // beta[9]: finger radius. All multipliers around 1.0, valid in [0.5, 2].
    Eigen::Matrix<double, 10, 1> beta = Eigen::Matrix<double, 10, 1>::Ones();

    bool within_bounds() const {
        return (beta.array() >= 0.5).all() && (beta.array() <= 2.0).all();
    }
};

struct HandPose {
    Eigen::Matrix<double, kNumDofs, 1> theta = Eigen::Matrix<double, kNumDofs, 1>::Zero();
};

struct HandMesh {
    Eigen::Matrix<double, kNumVertices, 3> vertices; // meters, hand-local
    std::vector<std::array<int, 3>> faces;
    Eigen::Matrix<double, kNumJoints, 3> joints;
};

struct FingertipRegions {
    std::array<std::vector<int>, kNumFingers> vertex_ids;
};

namespace detail {

struct FingerSpec {
    Vec3 mcp_raw;                  // before palm scaling
    std::array<double, 3> lengths; // proximal, middle, distal
    double r_base, r_tip;
};

inline const std::array<FingerSpec, kNumFingers>& finger_specs() {
    static const std::array<FingerSpec, kNumFingers> specs = {{
        {{0.030, -0.032, 0.0}, {0.045, 0.034, 0.028}, 0.0105, 0.0085}, // thumb
        {{0.095, 0.000, 0.0}, {0.042, 0.026, 0.020}, 0.0085, 0.0065},  // index
        {{0.092, 0.023, 0.0}, {0.046, 0.029, 0.021}, 0.0085, 0.0065},  // middle
        {{0.085, 0.045, 0.0}, {0.042, 0.027, 0.020}, 0.0080, 0.0060},  // ring
        {{0.074, 0.066, 0.0}, {0.033, 0.021, 0.017}, 0.0070, 0.0055},  // pinky
    }};
    return specs;
}

inline constexpr int kRingSegments = 8;
inline constexpr std::array<double, 3> kRingFractions = {0.15, 0.5, 0.85};
inline constexpr int kPalmGrid = 14;     // 14x14 top and bottom grids
inline constexpr int kWristRing = 21;
inline constexpr int kPalmVertexCount = 2 * kPalmGrid * kPalmGrid + kWristRing; // 413
inline constexpr int kFingerVertexCount = 9 * kRingSegments + 1;                // 73
static_assert(kPalmVertexCount + kNumFingers * kFingerVertexCount == kNumVertices);

// Topology is shape-independent: faces plus per-vertex skinning binding.
struct Topology {
    std::vector<std::array<int, 3>> faces;
    // Up to two bone influences per vertex; weight2 = 1 - weight1.
    std::array<int, kNumVertices> bone1{};
    std::array<int, kNumVertices> bone2{};
    std::array<double, kNumVertices> weight1{};
};

// Shape-dependent rest geometry, already in the canonical frame.
struct RestGeometry {
    Eigen::Matrix<double, kNumVertices, 3> vertices;
    Eigen::Matrix<double, kNumJoints, 3> joints;
    std::array<Vec3, kNumBones> bone_origin;       // rest proximal joint per bone
    std::array<Vec3, kNumFingers> ex, ey, ez;      // per-finger articulation axes
    std::array<std::array<double, 3>, kNumFingers> lengths;
};

inline const Topology& topology() {
    static const Topology topo = [] {
        Topology t;
        int v = 0;
        auto grid_base = [&](int which) { return which * kPalmGrid * kPalmGrid; };
        // Palm vertices bind rigidly to the palm bone.
        for (int i = 0; i < kPalmVertexCount; ++i) {
            t.bone1[v] = 0;
            t.bone2[v] = 0;
            t.weight1[v] = 1.0;
            ++v;
        }
        // Palm grid faces (top and bottom).
        for (int which = 0; which < 2; ++which) {
            const int base = grid_base(which);
            for (int r = 0; r + 1 < kPalmGrid; ++r) {
                for (int c = 0; c + 1 < kPalmGrid; ++c) {
                    const int a = base + r * kPalmGrid + c;
                    const int b = a + 1;
                    const int d = a + kPalmGrid;
                    const int e = d + 1;
                    t.faces.push_back({a, b, e});
                    t.faces.push_back({a, e, d});
                }
            }
        }
        for (int f = 0; f < kNumFingers; ++f) {
            const int finger_base = v;
            for (int p = 0; p < 3; ++p) {
                const int self = bone_id(f, p);
                const int parent = (p == 0) ? 0 : bone_id(f, p - 1);
                for (int ring = 0; ring < 3; ++ring) {
                    for (int s = 0; s < kRingSegments; ++s) {
                        t.bone1[v] = self;
                        // First ring of each phalanx blends with the parent bone.
                        t.bone2[v] = (ring == 0) ? parent : self;
                        t.weight1[v] = (ring == 0) ? 0.5 : 1.0;
                        ++v;
                    }
                }
            }
            // Tip cap vertex, rigid on the distal phalanx.
            t.bone1[v] = bone_id(f, 2);
            t.bone2[v] = bone_id(f, 2);
            t.weight1[v] = 1.0;
            ++v;
            // Tube faces between the 9 consecutive rings, then the tip fan.
            for (int ring = 0; ring + 1 < 9; ++ring) {
                const int a0 = finger_base + ring * kRingSegments;
                const int b0 = a0 + kRingSegments;
                for (int s = 0; s < kRingSegments; ++s) {
                    const int s1 = (s + 1) % kRingSegments;
                    t.faces.push_back({a0 + s, b0 + s, b0 + s1});
                    t.faces.push_back({a0 + s, b0 + s1, a0 + s1});
                }
            }
            const int last_ring = finger_base + 8 * kRingSegments;
            const int cap = finger_base + 9 * kRingSegments;
            for (int s = 0; s < kRingSegments; ++s) {
                t.faces.push_back({last_ring + s, last_ring + (s + 1) % kRingSegments, cap});
            }
        }
        return t;
    }();
    return topo;
}

// Canonicalizing rotation taking the raw template frame (MCPs in z=0,
// index MCP on +x) to the hand-local canonical frame.
inline const Mat3& canonical_rotation() {
    static const Mat3 c = [] {
        Eigen::Matrix<double, kNumJoints, 3> joints_raw = Eigen::Matrix<double, kNumJoints, 3>::Zero();
        const auto& specs = finger_specs();
        for (int f = 0; f < kNumFingers; ++f) {
            const Vec3 mcp = specs[f].mcp_raw;
            const Vec3 dir = mcp.normalized();
            double acc = 0.0;
            joints_raw.row(geometry::joint_index(f, 0)) = mcp;
            for (int p = 0; p < 3; ++p) {
                acc += specs[f].lengths[p];
                joints_raw.row(geometry::joint_index(f, p + 1)) = mcp + acc * dir;
            }
        }
        return geometry::hand_local_frame(joints_raw).rot;
    }();
    return c;
}

inline RestGeometry rest_geometry(const HandShape& shape) {
    const auto& specs = finger_specs();
    const Mat3& canon = canonical_rotation();
    const double g = shape.beta(0);
    const double palm_w = shape.beta(6), palm_t = shape.beta(7), palm_l = shape.beta(8);
    const double radius_scale = shape.beta(9);

    RestGeometry rest;
    rest.joints.setZero();
    rest.bone_origin[0] = Vec3::Zero();

    int v = 0;
    auto put = [&](const Vec3& p_raw) {
        rest.vertices.row(v++) = (canon * (g * p_raw)).transpose();
    };
    // Palm top / bottom grids.
    for (int which = 0; which < 2; ++which) {
        const double z = (which == 0 ? 0.010 : -0.014) * palm_t;
        for (int r = 0; r < kPalmGrid; ++r) {
            for (int c = 0; c < kPalmGrid; ++c) {
                const double x = (-0.015 + 0.100 * r / (kPalmGrid - 1)) * palm_l;
                const double y = (-0.045 + 0.120 * c / (kPalmGrid - 1)) * palm_w;
                put({x, y, z});
            }
        }
    }
    // Wrist ring (ellipse around the forearm stub).
    for (int k = 0; k < kWristRing; ++k) {
        const double phi = 2.0 * M_PI * k / kWristRing;
        put({-0.020 * palm_l, (0.015 + 0.032 * std::cos(phi)) * palm_w,
             (-0.002 + 0.013 * std::sin(phi)) * palm_t});
    }

    for (int f = 0; f < kNumFingers; ++f) {
        const auto& spec = specs[f];
        Vec3 mcp_raw(spec.mcp_raw.x() * palm_l, spec.mcp_raw.y() * palm_w, 0.0);
        const Vec3 ex_raw = mcp_raw.normalized();
        const Vec3 ez_raw(0, 0, 1);
        const Vec3 ey_raw = ez_raw.cross(ex_raw);
        const double len_scale = g * shape.beta(1 + f);
        double total_len = 0.0;
        for (int p = 0; p < 3; ++p) {
            rest.lengths[f][p] = spec.lengths[p] * len_scale;
            total_len += rest.lengths[f][p];
        }
        const Vec3 mcp = canon * (g * mcp_raw);
        rest.ex[f] = canon * ex_raw;
        rest.ey[f] = canon * ey_raw;
        rest.ez[f] = canon * ez_raw;

        rest.joints.row(geometry::joint_index(f, 0)) = mcp.transpose();
        double acc = 0.0;
        for (int p = 0; p < 3; ++p) {
            rest.bone_origin[bone_id(f, p)] = mcp + acc * rest.ex[f];
            acc += rest.lengths[f][p];
            rest.joints.row(geometry::joint_index(f, p + 1)) = (mcp + acc * rest.ex[f]).transpose();
        }

        // Tube vertices: 3 rings per phalanx plus a tip cap, tapered radius.
        double arc = 0.0;
        for (int p = 0; p < 3; ++p) {
            const Vec3 origin = rest.bone_origin[bone_id(f, p)];
            for (double frac : kRingFractions) {
                const double s = (arc + frac * rest.lengths[f][p]) / total_len;
                const double radius = radius_scale * g * (spec.r_base + s * (spec.r_tip - spec.r_base));
                const Vec3 center = origin + frac * rest.lengths[f][p] * rest.ex[f];
                for (int k = 0; k < kRingSegments; ++k) {
                    const double phi = 2.0 * M_PI * k / kRingSegments;
                    rest.vertices.row(v++) =
                        (center + radius * (std::cos(phi) * rest.ey[f] + std::sin(phi) * rest.ez[f]))
                            .transpose();
                }
            }
            arc += rest.lengths[f][p];
        }
        const double r_tip = radius_scale * g * spec.r_tip;
        const Vec3 tip = mcp + total_len * rest.ex[f];
        rest.vertices.row(v++) = (tip + r_tip * rest.ex[f]).transpose();
    }
    return rest;
}

// Per-bone posed frame and its derivatives w.r.t. the finger's DOFs.
struct BoneState {
    Mat3 rot = Mat3::Identity();
    Vec3 origin = Vec3::Zero();
    // Derivative slots indexed by DOF-within-finger {flex, abduct, pip, dip}.
    std::array<Mat3, 4> drot{};
    std::array<Vec3, 4> dorigin{};
};

struct KinematicState {
    std::array<BoneState, kNumBones> bones;
    Eigen::Matrix<double, kNumJoints, 3> joints;
    std::array<Eigen::Matrix<double, kNumJoints, 3>, kNumDofs> djoints;
};

inline KinematicState solve_kinematics(const HandPose& pose, const RestGeometry& rest) {
    KinematicState ks;
    ks.joints = rest.joints;
    for (auto& dj : ks.djoints) dj.setZero();
    for (auto& b : ks.bones) {
        for (auto& m : b.drot) m.setZero();
        for (auto& o : b.dorigin) o.setZero();
    }

    for (int f = 0; f < kNumFingers; ++f) {
        const Vec3 ex = rest.ex[f], ey = rest.ey[f], ez = rest.ez[f];
        const Mat3 sy = geometry::skew(ey), sz = geometry::skew(ez);
        const double fl1 = pose.theta(dof_mcp_flex(f));
        const double ab = pose.theta(dof_mcp_abduct(f));
        const double fl2 = pose.theta(dof_pip_flex(f));
        const double fl3 = pose.theta(dof_dip_flex(f));

        const Mat3 a = geometry::exp_so3(ab * ez);
        const Mat3 f1 = geometry::exp_so3(fl1 * ey);
        const Mat3 e2 = geometry::exp_so3(fl2 * ey);
        const Mat3 e3 = geometry::exp_so3(fl3 * ey);

        const Vec3 mcp = rest.bone_origin[bone_id(f, 0)];
        const auto& len = rest.lengths[f];

        BoneState& b0 = ks.bones[bone_id(f, 0)];
        BoneState& b1 = ks.bones[bone_id(f, 1)];
        BoneState& b2 = ks.bones[bone_id(f, 2)];

        b0.rot = a * f1;
        b0.drot[0] = b0.rot * sy; // d/d fl1 (axis fixed in the moving frame)
        b0.drot[1] = sz * b0.rot; // d/d ab
        b0.origin = mcp;

        b1.rot = b0.rot * e2;
        b1.drot[0] = b0.drot[0] * e2;
        b1.drot[1] = b0.drot[1] * e2;
        b1.drot[2] = b1.rot * sy;
        b1.origin = mcp + len[0] * (b0.rot * ex);
        for (int d : {0, 1}) b1.dorigin[d] = len[0] * (b0.drot[d] * ex);

        b2.rot = b1.rot * e3;
        for (int d : {0, 1, 2}) b2.drot[d] = b1.drot[d] * e3;
        b2.drot[3] = b2.rot * sy;
        b2.origin = b1.origin + len[1] * (b1.rot * ex);
        for (int d : {0, 1, 2}) b2.dorigin[d] = b1.dorigin[d] + len[1] * (b1.drot[d] * ex);

        const Vec3 tip = b2.origin + len[2] * (b2.rot * ex);
        ks.joints.row(geometry::joint_index(f, 1)) = b1.origin.transpose();
        ks.joints.row(geometry::joint_index(f, 2)) = b2.origin.transpose();
        ks.joints.row(geometry::joint_index(f, 3)) = tip.transpose();

        const std::array<int, 4> dof_ids = {dof_mcp_flex(f), dof_mcp_abduct(f),
                                            dof_pip_flex(f), dof_dip_flex(f)};
        for (int d = 0; d < 4; ++d) {
            auto& dj = ks.djoints[dof_ids[d]];
            dj.row(geometry::joint_index(f, 1)) = b1.dorigin[d].transpose();
            dj.row(geometry::joint_index(f, 2)) = b2.dorigin[d].transpose();
            dj.row(geometry::joint_index(f, 3)) =
                (b2.dorigin[d] + len[2] * (b2.drot[d] * ex)).transpose();
        }
    }
    return ks;
}

inline int finger_of_bone(int bone) { return bone == 0 ? -1 : (bone - 1) / 3; }

} // namespace detail

inline Eigen::Matrix<double, kNumJoints, 3> forward_kinematics(const HandPose& pose,
                                                               const HandShape& shape) {
    if (!pose.theta.allFinite()) throw DegenerateInput("forward_kinematics: non-finite pose");
    const auto rest = detail::rest_geometry(shape);
    return detail::solve_kinematics(pose, rest).joints;
}

/// d vertices / d theta and d joints / d theta, one dense block per DOF.
struct PoseJacobians {
    std::array<Eigen::Matrix<double, kNumVertices, 3>, kNumDofs> dvertices;
    std::array<Eigen::Matrix<double, kNumJoints, 3>, kNumDofs> djoints;
};

inline HandMesh skin_mesh_impl(const HandPose& pose, const HandShape& shape,
                               PoseJacobians* jac) {
    if (!pose.theta.allFinite()) throw DegenerateInput("skin_mesh: non-finite pose");
    const auto& topo = detail::topology();
    const auto rest = detail::rest_geometry(shape);
    const auto ks = detail::solve_kinematics(pose, rest);

    HandMesh mesh;
    mesh.faces = topo.faces;
    mesh.joints = ks.joints;
    if (jac) {
        for (auto& m : jac->dvertices) m.setZero();
        jac->djoints = ks.djoints;
    }

    for (int v = 0; v < kNumVertices; ++v) {
        const Vec3 p = rest.vertices.row(v);
        Vec3 out = Vec3::Zero();
        const std::array<std::pair<int, double>, 2> binds = {
            std::make_pair(topo.bone1[v], topo.weight1[v]),
            std::make_pair(topo.bone2[v], 1.0 - topo.weight1[v])};
        for (const auto& [bone, w] : binds) {
            if (w == 0.0) continue;
            if (bone == 0) {
                out += w * p;
                continue;
            }
            const auto& bs = ks.bones[bone];
            const Vec3 local = p - rest.bone_origin[bone];
            out += w * (bs.origin + bs.rot * local);
            if (jac) {
                const int f = detail::finger_of_bone(bone);
                const std::array<int, 4> dof_ids = {dof_mcp_flex(f), dof_mcp_abduct(f),
                                                    dof_pip_flex(f), dof_dip_flex(f)};
                for (int d = 0; d < 4; ++d) {
                    const Vec3 dv = w * (bs.dorigin[d] + bs.drot[d] * local);
                    jac->dvertices[dof_ids[d]].row(v) += dv.transpose();
                }
            }
        }
        mesh.vertices.row(v) = out.transpose();
    }
    return mesh;
}

inline HandMesh skin_mesh(const HandPose& pose, const HandShape& shape) {
    return skin_mesh_impl(pose, shape, nullptr);
}

inline HandMesh skin_mesh_with_jacobian(const HandPose& pose, const HandShape& shape,
                                        PoseJacobians& jac) {
    return skin_mesh_impl(pose, shape, &jac);
}

// Anatomical limits, radians.
inline constexpr double kMcpFlexLo = -10.0 * M_PI / 180.0;
inline constexpr double kMcpFlexHi = 110.0 * M_PI / 180.0;
inline constexpr double kAbductLo = -25.0 * M_PI / 180.0;
inline constexpr double kAbductHi = 25.0 * M_PI / 180.0;
inline constexpr double kInterFlexLo = 0.0;
inline constexpr double kInterFlexHi = 110.0 * M_PI / 180.0;

inline void dof_limits(int dof, double& lo, double& hi) {
    switch (dof % 4) {
    case 0: lo = kMcpFlexLo; hi = kMcpFlexHi; break;
    case 1: lo = kAbductLo; hi = kAbductHi; break;
    default: lo = kInterFlexLo; hi = kInterFlexHi; break;
    }
}

/// Quadratic hinge outside the joint limits; zero inside, unit weight.
inline double anatomical_penalty(const HandPose& pose,
                                 Eigen::Matrix<double, kNumDofs, 1>* grad = nullptr) {
    double total = 0.0;
    if (grad) grad->setZero();
    for (int d = 0; d < kNumDofs; ++d) {
        double lo, hi;
        dof_limits(d, lo, hi);
        const double th = pose.theta(d);
        if (th > hi) {
            total += (th - hi) * (th - hi);
            if (grad) (*grad)(d) = 2.0 * (th - hi);
        } else if (th < lo) {
            total += (lo - th) * (lo - th);
            if (grad) (*grad)(d) = -2.0 * (lo - th);
        }
    }
    return total;
}

/// Template vertex sets within 15 mm of each fingertip joint (beta = 1).
inline const FingertipRegions& fingertip_regions() {
    static const FingertipRegions regions = [] {
        FingertipRegions out;
        const auto rest = detail::rest_geometry(HandShape{});
        for (int f = 0; f < kNumFingers; ++f) {
            const Vec3 tip = rest.joints.row(geometry::joint_index(f, 3));
            const auto& topo = detail::topology();
            for (int v = 0; v < kNumVertices; ++v) {
                const int bone = topo.bone1[v];
                if (detail::finger_of_bone(bone) != f) continue;
                if ((Vec3(rest.vertices.row(v)) - tip).norm() <= 0.015) {
                    out.vertex_ids[f].push_back(v);
                }
            }
        }
        return out;
    }();
    return regions;
}

// ---- File formats ----

inline nlohmann::json pose_shape_to_json(const HandPose& pose, const HandShape& shape) {
    nlohmann::json j;
    j["theta"] = std::vector<double>(pose.theta.data(), pose.theta.data() + kNumDofs);
    j["beta"] = std::vector<double>(shape.beta.data(), shape.beta.data() + 10);
    return j;
}

inline std::pair<HandPose, HandShape> pose_shape_from_json(const nlohmann::json& j) {
    const auto theta = j.at("theta").get<std::vector<double>>();
    const auto beta = j.at("beta").get<std::vector<double>>();
    if (theta.size() != kNumDofs || beta.size() != 10) {
        throw ParseError("pose/shape file: expected 20 theta and 10 beta values");
    }
    HandPose pose;
    HandShape shape;
    for (int i = 0; i < kNumDofs; ++i) pose.theta(i) = theta[i];
    for (int i = 0; i < 10; ++i) shape.beta(i) = beta[i];
    return {pose, shape};
}

inline void write_obj(const HandMesh& mesh, std::ostream& os) {
    for (int v = 0; v < kNumVertices; ++v) {
        os << "v " << mesh.vertices(v, 0) << ' ' << mesh.vertices(v, 1) << ' '
           << mesh.vertices(v, 2) << '\n';
    }
    for (const auto& f : mesh.faces) {
        os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    }
}

inline void write_obj(const HandMesh& mesh, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path);
    write_obj(mesh, os);
}

} // namespace handpress::handmodel
