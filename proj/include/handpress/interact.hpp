#pragma once

// Interaction-layer geometry and task logic: virtual touchpad plane, cursor
// mapping, pinch click, fingertip pressure aggregation, the pressure-target
// trial state machine, and Fitts-law regression.

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"
#include "handpress/handmodel.hpp"

namespace handpress::interact {

using geometry::TouchPlane;
using geometry::Vec3;
using Vec2 = Eigen::Vector2d;

enum class MappingMode { kHandLocalAxes, kPlaneUv };

struct CursorMapping {
    double scale_x = 23000.0; // screen units per meter
    double scale_y = 11000.0;
    MappingMode mode = MappingMode::kHandLocalAxes;
};

inline TouchPlane define_plane_from_fingertips(const Eigen::Matrix<double, 5, 3>& tips) {
    return geometry::fit_plane_svd(tips);
}

inline Vec2 map_cursor(const Vec3& fingertip, const CursorMapping& mapping,
                       const std::optional<TouchPlane>& plane = std::nullopt) {
    if (!(mapping.scale_x > 0.0 && mapping.scale_y > 0.0)) {
        throw DegenerateInput("map_cursor: scales must be positive");
    }
    if (mapping.mode == MappingMode::kHandLocalAxes) {
        return {fingertip.x() * mapping.scale_x, fingertip.y() * mapping.scale_y};
    }
    if (!plane) throw MissingPlane("map_cursor: plane-uv mode requires a plane");
    const Vec3 rel = fingertip - plane->origin;
    return {rel.dot(plane->u) * mapping.scale_x, rel.dot(plane->v) * mapping.scale_y};
}

/// Strict inequality at the threshold: exactly 5 mm is not a pinch.
inline bool detect_pinch(const Vec3& thumb_tip, const Vec3& index_tip, double threshold = 0.005) {
    return (thumb_tip - index_tip).norm() < threshold;
}

struct FingertipPressure {
    std::array<double, 5> per_finger{}; // grams, all five fingers
    double mean = 0.0;                  // over the requested subset
};

inline FingertipPressure aggregate_fingertip_pressure(const Eigen::VectorXd& pv,
                                                      const handmodel::FingertipRegions& regions,
                                                      const std::vector<int>& fingers) {
    if (pv.size() != handmodel::kNumVertices) {
        throw ShapeMismatch("aggregate_fingertip_pressure: need 778 values");
    }
    if (fingers.empty()) throw EmptyFingerSet("aggregate_fingertip_pressure: no fingers requested");
    FingertipPressure out;
    for (int f = 0; f < 5; ++f) {
        double acc = 0.0;
        for (const int v : regions.vertex_ids[f]) acc += pv(v);
        out.per_finger[f] = acc;
    }
    double mean = 0.0;
    for (const int f : fingers) {
        if (f < 0 || f > 4) throw IndexOutOfRange("aggregate_fingertip_pressure: finger index");
        mean += out.per_finger[f];
    }
    out.mean = mean / static_cast<double>(fingers.size());
    return out;
}

/// Finger subsets used for pressure-target trials: five singles, four
/// adjacent pairs, two adjacent triples, four-finger, five-finger.
/// Reconstructed from a figure, so shipped as editable data.
inline const std::vector<std::vector<int>>& finger_combinations() {
    static const std::vector<std::vector<int>> combos = {
        {0}, {1}, {2}, {3}, {4},
        {0, 1}, {1, 2}, {2, 3}, {3, 4},
        {1, 2, 3}, {2, 3, 4},
        {1, 2, 3, 4},
        {0, 1, 2, 3, 4},
    };
    return combos;
}

struct TrialSpec {
    std::vector<int> fingers;
    double target_center = 1000.0; // grams
    double target_width = 1000.0;  // grams
    double hold_duration = 3.0;    // seconds
    double timeout = 10.0;         // seconds
};

enum class TrialPhase { kMoving, kInRange, kSucceeded, kFailed };

struct TrialState {
    TrialPhase phase = TrialPhase::kMoving;
    double clock = 0.0;
    double entered_at = 0.0;  // valid while in range
    double finished_at = 0.0; // valid once terminal
};

/// One tick of the pressure-target trial. Target range is inclusive on both
/// ends; leaving it resets the hold timer; terminal phases absorb everything
/// except the clock.
inline TrialState step_pressure_trial(const TrialState& state, const TrialSpec& spec,
                                      double reading, double t) {
    if (t < state.clock) throw NonMonotoneTime("step_pressure_trial: time went backwards");
    if (!(spec.target_width > 0.0) || spec.hold_duration > spec.timeout) {
        throw DegenerateInput("step_pressure_trial: invalid trial spec");
    }
    TrialState next = state;
    next.clock = t;
    if (state.phase == TrialPhase::kSucceeded || state.phase == TrialPhase::kFailed) return next;

    const double lo = spec.target_center - spec.target_width / 2.0;
    const double hi = spec.target_center + spec.target_width / 2.0;
    const bool in_range = reading >= lo && reading <= hi;

    if (state.phase == TrialPhase::kInRange && in_range &&
        t - state.entered_at >= spec.hold_duration &&
        state.entered_at + spec.hold_duration <= spec.timeout) {
        next.phase = TrialPhase::kSucceeded;
        next.finished_at = state.entered_at + spec.hold_duration;
        return next;
    }
    if (t >= spec.timeout) {
        next.phase = TrialPhase::kFailed;
        next.finished_at = spec.timeout;
        return next;
    }
    if (in_range) {
        if (state.phase != TrialPhase::kInRange) {
            next.phase = TrialPhase::kInRange;
            next.entered_at = t;
        }
    } else {
        next.phase = TrialPhase::kMoving;
    }
    return next;
}

struct FittsTrial {
    double distance = 0.0; // meters
    double width = 0.0;    // meters
    double mt_ms = 0.0;
};

struct FittsResult {
    double slope_ms_per_bit = 0.0;
    double intercept_ms = 0.0;
    double throughput_bits_per_s = 0.0;
    std::vector<double> ids; // bits, per trial
};

inline double index_of_difficulty(double distance, double width) {
    if (!(distance > 0.0 && width > 0.0)) {
        throw DegenerateInput("index_of_difficulty: D and W must be positive");
    }
    return std::log2(2.0 * distance / width);
}

/// Ordinary least squares MT = a + k * ID; throughput = 1000 / k.
inline FittsResult fitts_analysis(const std::vector<FittsTrial>& trials) {
    if (trials.size() < 2) throw EmptyInput("fitts_analysis: need at least 2 trials");
    FittsResult out;
    double sum_x = 0.0, sum_y = 0.0, sum_xx = 0.0, sum_xy = 0.0;
    for (const auto& t : trials) {
        const double id = index_of_difficulty(t.distance, t.width);
        out.ids.push_back(id);
        sum_x += id;
        sum_y += t.mt_ms;
        sum_xx += id * id;
        sum_xy += id * t.mt_ms;
    }
    const double n = static_cast<double>(trials.size());
    const double denom = n * sum_xx - sum_x * sum_x;
    if (std::abs(denom) < 1e-12) {
        throw DegenerateRegression("fitts_analysis: all IDs identical");
    }
    out.slope_ms_per_bit = (n * sum_xy - sum_x * sum_y) / denom;
    out.intercept_ms = (sum_y - out.slope_ms_per_bit * sum_x) / n;
    out.throughput_bits_per_s = 1000.0 / out.slope_ms_per_bit;
    return out;
}

// ---- Trial log CSV ----

struct TrialLogRow {
    int trial_id = 0;
    std::string finger_set; // e.g. "index+middle"
    double d_mm = 0.0, w_mm = 0.0;
    double target_center_g = 0.0, target_width_g = 0.0;
    std::string outcome; // "success" | "timeout"
    double mt_ms = 0.0, pst_ms = 0.0, ct_ms = 0.0;
};

inline std::string trial_csv_header() {
    return "trial_id,finger_set,D_mm,W_mm,target_center_g,target_width_g,outcome,MT_ms,PST_ms,CT_ms";
}

inline std::string trial_csv_row(const TrialLogRow& r) {
    std::ostringstream os;
    os.precision(9);
    os << r.trial_id << ',' << r.finger_set << ',' << r.d_mm << ',' << r.w_mm << ','
       << r.target_center_g << ',' << r.target_width_g << ',' << r.outcome << ',' << r.mt_ms << ','
       << r.pst_ms << ',' << r.ct_ms;
    return os.str();
}

} // namespace handpress::interact
