#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "handpress/interact.hpp"

using namespace handpress;
using namespace handpress::interact;
using geometry::Vec3;

namespace {

std::mt19937_64 rng(73);

// Brute-force trial outcome from a sampled reading trace: success at the end
// of the first in-range interval of at least `hold` seconds that completes by
// the timeout, else failure at the timeout.
struct Oracle {
    bool success;
    double finished_at;
};

Oracle brute_force_trial(const std::vector<std::pair<double, double>>& trace,
                         const TrialSpec& spec) {
    const double lo = spec.target_center - spec.target_width / 2.0;
    const double hi = spec.target_center + spec.target_width / 2.0;
    double entered = -1.0;
    for (const auto& [t, reading] : trace) {
        const bool in = reading >= lo && reading <= hi;
        if (in && entered < 0.0) entered = t;
        if (!in) entered = -1.0;
        if (entered >= 0.0 && t - entered >= spec.hold_duration &&
            entered + spec.hold_duration <= spec.timeout) {
            return {true, entered + spec.hold_duration};
        }
        if (t >= spec.timeout) return {false, spec.timeout};
    }
    return {false, spec.timeout};
}

TrialState run_trace(const std::vector<std::pair<double, double>>& trace,
                     const TrialSpec& spec) {
    TrialState state;
    for (const auto& [t, reading] : trace) {
        state = step_pressure_trial(state, spec, reading, t);
    }
    return state;
}

} // namespace

TEST_CASE("plane from fingertips") {
    Eigen::Matrix<double, 5, 3> tips;
    tips << 0.00, 0.00, 0.3, 0.05, 0.00, 0.3, 0.00, 0.04, 0.3, 0.05, 0.04, 0.3, 0.02, 0.02, 0.3;
    const auto plane = define_plane_from_fingertips(tips);
    for (int i = 0; i < 5; ++i) {
        CHECK(std::abs(plane.signed_distance(tips.row(i))) < 1e-12);
    }
    CHECK(plane.u.norm() == Catch::Approx(1.0).margin(1e-9));
    CHECK(std::abs(plane.u.dot(plane.n)) < 1e-9);
}

TEST_CASE("map_cursor hand-local and plane modes") {
    CursorMapping mapping; // defaults: 23000 x, 11000 y, hand-local mode

    const auto origin = map_cursor(Vec3::Zero(), mapping);
    CHECK(origin.x() == 0.0);
    CHECK(origin.y() == 0.0);

    // 1 cm in both axes with the published scales.
    const auto px = map_cursor(Vec3(0.01, 0.01, 0.2), mapping);
    CHECK(px.x() == Catch::Approx(230.0).margin(1e-9));
    CHECK(px.y() == Catch::Approx(110.0).margin(1e-9));

    // Linearity: mapping of the midpoint is the midpoint of mappings.
    const Vec3 a(0.013, -0.004, 0.1), b(-0.02, 0.05, 0.4);
    const auto ma = map_cursor(a, mapping);
    const auto mb = map_cursor(b, mapping);
    const auto mid = map_cursor(0.5 * (a + b), mapping);
    CHECK((mid - 0.5 * (ma + mb)).norm() < 1e-9);

    // Plane mode: displacement along u moves only screen x.
    CursorMapping pm = mapping;
    pm.mode = MappingMode::kPlaneUv;
    CHECK_THROWS_AS(map_cursor(a, pm), MissingPlane);

    geometry::TouchPlane plane;
    plane.origin = Vec3(0.1, 0.2, 0.3);
    const auto base = map_cursor(plane.origin, pm, plane);
    const auto moved = map_cursor(plane.origin + 0.01 * plane.u, pm, plane);
    CHECK(moved.x() - base.x() == Catch::Approx(0.01 * pm.scale_x).margin(1e-9));
    CHECK(moved.y() - base.y() == Catch::Approx(0.0).margin(1e-9));

    CursorMapping bad;
    bad.scale_x = -1.0;
    CHECK_THROWS_AS(map_cursor(a, bad), DegenerateInput);
}

TEST_CASE("pinch threshold boundary") {
    const Vec3 thumb(0, 0, 0);
    CHECK(detect_pinch(thumb, Vec3(0.004, 0, 0)));
    CHECK(!detect_pinch(thumb, Vec3(0.005, 0, 0))); // strict inequality
    CHECK(!detect_pinch(thumb, Vec3(0.006, 0, 0)));
}

TEST_CASE("fingertip pressure aggregation") {
    const auto& regions = handmodel::fingertip_regions();
    Eigen::VectorXd pv = Eigen::VectorXd::Zero(handmodel::kNumVertices);

    const auto zero = aggregate_fingertip_pressure(pv, regions, {0, 1, 2, 3, 4});
    for (int f = 0; f < 5; ++f) CHECK(zero.per_finger[f] == 0.0);
    CHECK(zero.mean == 0.0);

    // 100 g spread over the index region only.
    const auto& index_ids = regions.vertex_ids[1];
    for (const int v : index_ids) pv(v) = 100.0 / index_ids.size();
    const auto idx = aggregate_fingertip_pressure(pv, regions, {1});
    CHECK(idx.per_finger[1] == Catch::Approx(100.0).margin(1e-9));
    CHECK(idx.mean == Catch::Approx(100.0).margin(1e-9));

    // Add 300 g on the middle finger: mean over {index, middle} = 200.
    for (const int v : regions.vertex_ids[2]) pv(v) = 300.0 / regions.vertex_ids[2].size();
    const auto both = aggregate_fingertip_pressure(pv, regions, {1, 2});
    CHECK(both.mean == Catch::Approx(200.0).margin(1e-9));

    CHECK_THROWS_AS(aggregate_fingertip_pressure(pv, regions, {}), EmptyFingerSet);
    CHECK_THROWS_AS(aggregate_fingertip_pressure(pv, regions, {7}), IndexOutOfRange);
    CHECK_THROWS_AS(aggregate_fingertip_pressure(Eigen::VectorXd::Zero(3), regions, {0}),
                    ShapeMismatch);
}

TEST_CASE("finger combinations catalogue") {
    const auto& combos = finger_combinations();
    CHECK(combos.size() == 13);
    int singles = 0, pairs = 0, triples = 0, quads = 0, fives = 0;
    for (const auto& c : combos) {
        switch (c.size()) {
        case 1: ++singles; break;
        case 2: ++pairs; break;
        case 3: ++triples; break;
        case 4: ++quads; break;
        case 5: ++fives; break;
        }
        // Adjacent, sorted members.
        for (size_t i = 0; i + 1 < c.size(); ++i) CHECK(c[i + 1] == c[i] + 1);
    }
    CHECK(singles == 5);
    CHECK(pairs == 4);
    CHECK(triples == 2);
    CHECK(quads == 1);
    CHECK(fives == 1);
}

TEST_CASE("pressure trial: enter and hold succeeds at entry + hold") {
    TrialSpec spec; // center 1000, width 1000, hold 3, timeout 10
    std::vector<std::pair<double, double>> trace;
    for (double t = 0.0; t <= 6.0; t += 0.5) {
        trace.push_back({t, t >= 1.0 ? 1000.0 : 0.0});
    }
    const auto state = run_trace(trace, spec);
    CHECK(state.phase == TrialPhase::kSucceeded);
    CHECK(state.finished_at == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("pressure trial: exit resets the hold") {
    TrialSpec spec;
    std::vector<std::pair<double, double>> trace;
    for (double t = 0.0; t <= 7.0; t += 0.25) {
        const bool in = (t >= 1.0 && t < 2.0) || t >= 3.0;
        trace.push_back({t, in ? 1000.0 : 0.0});
    }
    const auto state = run_trace(trace, spec);
    CHECK(state.phase == TrialPhase::kSucceeded);
    CHECK(state.finished_at == Catch::Approx(6.0).margin(1e-12));
}

TEST_CASE("pressure trial: timeout fails at exactly 10 s") {
    TrialSpec spec;
    std::vector<std::pair<double, double>> trace;
    for (double t = 0.0; t <= 11.0; t += 0.5) trace.push_back({t, 0.0});
    const auto state = run_trace(trace, spec);
    CHECK(state.phase == TrialPhase::kFailed);
    CHECK(state.finished_at == 10.0);
}

TEST_CASE("pressure trial: boundary readings count as in range") {
    TrialSpec spec; // range [500, 1500] inclusive
    std::vector<std::pair<double, double>> lo_trace, hi_trace;
    for (double t = 0.0; t <= 5.0; t += 0.5) {
        lo_trace.push_back({t, 500.0});
        hi_trace.push_back({t, 1500.0});
    }
    CHECK(run_trace(lo_trace, spec).phase == TrialPhase::kSucceeded);
    CHECK(run_trace(hi_trace, spec).phase == TrialPhase::kSucceeded);

    std::vector<std::pair<double, double>> out_trace;
    for (double t = 0.0; t <= 10.5; t += 0.5) out_trace.push_back({t, 499.999});
    CHECK(run_trace(out_trace, spec).phase == TrialPhase::kFailed);
}

TEST_CASE("pressure trial: terminal states absorb") {
    TrialSpec spec;
    TrialState s;
    for (double t = 0.0; t <= 5.0; t += 0.5) s = step_pressure_trial(s, spec, 1000.0, t);
    REQUIRE(s.phase == TrialPhase::kSucceeded);
    const double finished = s.finished_at;
    // Wild readings afterwards change nothing but the clock.
    s = step_pressure_trial(s, spec, -1e6, 8.0);
    CHECK(s.phase == TrialPhase::kSucceeded);
    CHECK(s.finished_at == finished);
    CHECK(s.clock == 8.0);

    CHECK_THROWS_AS(step_pressure_trial(s, spec, 0.0, 7.0), NonMonotoneTime);

    TrialSpec bad;
    bad.hold_duration = 20.0; // hold > timeout
    CHECK_THROWS_AS(step_pressure_trial(TrialState{}, bad, 0.0, 0.0), DegenerateInput);
}

TEST_CASE("pressure trial matches brute-force checker on random traces") {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        TrialSpec spec;
        spec.target_center = 500.0 + 1000.0 * u01(rng);
        spec.target_width = 500.0 + 1000.0 * u01(rng);
        spec.hold_duration = 1.0 + 2.0 * u01(rng);
        spec.timeout = u01(rng) < 0.5 ? 10.0 : 15.0;

        std::vector<std::pair<double, double>> trace;
        double reading = 0.0;
        for (double t = 0.0; t <= spec.timeout + 2.0; t += 0.1) {
            // Piecewise-constant random walk crossing the target band.
            if (u01(rng) < 0.15) reading = 2500.0 * u01(rng);
            trace.push_back({t, reading});
        }

        const auto state = run_trace(trace, spec);
        const auto oracle = brute_force_trial(trace, spec);
        CHECK((state.phase == TrialPhase::kSucceeded) == oracle.success);
        CHECK(state.finished_at == Catch::Approx(oracle.finished_at).margin(1e-9));
    }
}

TEST_CASE("index of difficulty and noiseless regression") {
    CHECK(index_of_difficulty(0.2, 0.1) == Catch::Approx(2.0).margin(1e-12)); // D = 2W
    CHECK_THROWS_AS(index_of_difficulty(-0.1, 0.1), DegenerateInput);

    // MT = 200 + 300 * ID exactly.
    std::vector<FittsTrial> trials;
    for (double d : {0.05, 0.1, 0.2, 0.3}) {
        for (double w : {0.01, 0.02}) {
            const double id = std::log2(2.0 * d / w);
            trials.push_back({d, w, 200.0 + 300.0 * id});
        }
    }
    const auto fit = fitts_analysis(trials);
    CHECK(fit.slope_ms_per_bit == Catch::Approx(300.0).margin(1e-9));
    CHECK(fit.intercept_ms == Catch::Approx(200.0).margin(1e-9));
    CHECK(fit.throughput_bits_per_s == Catch::Approx(1000.0 / 300.0).margin(1e-9));
    CHECK(fit.ids.size() == trials.size());

    // All IDs identical: degenerate.
    std::vector<FittsTrial> same = {{0.1, 0.05, 300.0}, {0.2, 0.1, 400.0}};
    CHECK_THROWS_AS(fitts_analysis(same), DegenerateRegression);
    CHECK_THROWS_AS(fitts_analysis({{0.1, 0.05, 300.0}}), EmptyInput);
}

TEST_CASE("published slope/throughput pairs reproduce at 1 decimal") {
    const std::vector<std::pair<double, double>> pairs = {
        {132.7, 7.5}, {387.3, 2.6}, {393.1, 2.5}};
    for (const auto& [slope, tp] : pairs) {
        // Build a noiseless log with the given slope; throughput must match
        // the published value after rounding to one decimal.
        std::vector<FittsTrial> trials;
        for (double d : {0.06, 0.12, 0.24}) {
            const double id = std::log2(2.0 * d / 0.03);
            trials.push_back({d, 0.03, 100.0 + slope * id});
        }
        const auto fit = fitts_analysis(trials);
        CHECK(std::round(fit.throughput_bits_per_s * 10.0) / 10.0 == tp);
    }
}

TEST_CASE("trial log CSV schema") {
    CHECK(trial_csv_header() ==
          "trial_id,finger_set,D_mm,W_mm,target_center_g,target_width_g,outcome,MT_ms,PST_ms,CT_ms");
    TrialLogRow row;
    row.trial_id = 3;
    row.finger_set = "index+middle";
    row.outcome = "success";
    const std::string line = trial_csv_row(row);
    const std::string header = trial_csv_header();
    CHECK(std::count(line.begin(), line.end(), ',') ==
          std::count(header.begin(), header.end(), ','));
}
