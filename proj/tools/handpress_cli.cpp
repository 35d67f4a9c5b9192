// Batch front-end: synthetic data generation, annotation fitting,
// extrinsics calibration, evaluation tables, and Fitts-law analysis.
//
// Exit codes: 0 success, 1 usage/degenerate input, 2 IO or parse failure,
// 3 numeric failure. HANDPRESS_LOG=debug enables progress logging.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "handpress/annofit.hpp"
#include "handpress/camera.hpp"
#include "handpress/geometry.hpp"
#include "handpress/handmodel.hpp"
#include "handpress/interact.hpp"
#include "handpress/metrics.hpp"
#include "handpress/pressrender.hpp"
#include "handpress/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace handpress;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

bool log_enabled() {
    const char* v = std::getenv("HANDPRESS_LOG");
    return v != nullptr && std::string(v) != "" && std::string(v) != "0";
}

void log_debug(const std::string& msg) {
    if (log_enabled()) std::cerr << "[handpress] " << msg << '\n';
}

/// Write-then-rename so partial output never lands under the final name.
void atomic_write(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open " + tmp.string());
        os << content;
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

json load_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    try {
        json j;
        is >> j;
        return j;
    } catch (const json::exception& ex) {
        throw ParseError(path + ": " + ex.what());
    }
}

void apply_optim_overrides(annofit::OptimConfig& cfg, const json& j) {
    auto get = [&](const char* key, double& field) {
        if (j.contains(key)) field = j.at(key).get<double>();
    };
    get("w_press", cfg.w_press);
    get("w_hand", cfg.w_hand);
    get("w_3d", cfg.w_3d);
    get("w_2d", cfg.w_2d);
    get("w_mask", cfg.w_mask);
    get("w_anat", cfg.w_anat);
    get("w_reg", cfg.w_reg);
    get("delta", cfg.delta);
    get("epsilon", cfg.epsilon);
    get("tau", cfg.tau);
    get("gamma_g", cfg.gamma_g);
    get("kappa", cfg.kappa);
    if (j.contains("max_iterations")) cfg.max_iterations = j.at("max_iterations").get<int>();
    if (j.contains("alternate_pressure")) {
        cfg.alternate_pressure = j.at("alternate_pressure").get<bool>();
    }
}

void apply_synth_overrides(synth::SynthConfig& cfg, const json& j) {
    if (j.contains("marker_noise_mm")) cfg.marker_noise_mm = j.at("marker_noise_mm").get<double>();
    if (j.contains("kp_noise_px")) cfg.kp_noise_px = j.at("kp_noise_px").get<double>();
    if (j.contains("press_force_g")) cfg.press_force_g = j.at("press_force_g").get<double>();
    if (j.contains("wrist_pitch_deg_range")) {
        cfg.wrist_pitch_deg_range = j.at("wrist_pitch_deg_range").get<double>();
    }
}

// ---- synth ----

int cmd_synth(int n_frames, std::uint64_t seed, const std::string& out_dir,
              const synth::SynthConfig& cfg) {
    if (n_frames < 1) {
        std::cerr << "usage error: --frames must be >= 1\n";
        return kExitUsage;
    }
    fs::create_directories(out_dir);
    std::vector<synth::ManifestEntry> entries;
    for (int i = 0; i < n_frames; ++i) {
        const std::uint64_t frame_seed = seed + static_cast<std::uint64_t>(i);
        const auto frame = synth::sample_scenario(frame_seed, cfg);
        synth::ManifestEntry e;
        e.frame_id = "frame_" + std::to_string(i);
        e.seed = frame_seed;
        e.frame_file = e.frame_id + ".json";
        e.pressure_file = e.frame_id + ".pmap";
        atomic_write(fs::path(out_dir) / e.frame_file, synth::frame_to_json(frame).dump(2) + "\n");
        {
            std::ostringstream os;
            const auto& g = frame.gt_map.grid;
            os << "PMAP v1 " << g.rows() << ' ' << g.cols() << ' ' << frame.sensor.pitch * 1000.0
               << '\n';
            os.precision(12);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                for (Eigen::Index c = 0; c < g.cols(); ++c) {
                    os << g(r, c) << (c + 1 == g.cols() ? '\n' : ' ');
                }
            }
            atomic_write(fs::path(out_dir) / e.pressure_file, os.str());
        }
        entries.push_back(std::move(e));
        log_debug("synth " + entries.back().frame_id);
    }
    {
        std::ostringstream os;
        for (const auto& e : entries) {
            os << json{{"frame_id", e.frame_id},
                       {"seed", e.seed},
                       {"frame_file", e.frame_file},
                       {"pressure_file", e.pressure_file}}
                      .dump()
               << '\n';
        }
        atomic_write(fs::path(out_dir) / "manifest.jsonl", os.str());
    }
    std::cout << "wrote " << n_frames << " frames to " << out_dir << '\n';
    return kExitOk;
}

// ---- fit ----

int cmd_fit(const std::string& manifest_path, const std::string& out_dir, int threads,
            const annofit::OptimConfig& cfg) {
    const auto entries = synth::load_manifest(manifest_path);
    if (entries.empty()) {
        std::cerr << "usage error: manifest is empty\n";
        return kExitUsage;
    }
    const fs::path in_dir = fs::path(manifest_path).parent_path();
    fs::create_directories(out_dir);

    struct Row {
        std::string id;
        metrics::PoseMetrics pose;
        double force_pred = 0.0, force_gt = 0.0;
    };
    std::vector<Row> rows(entries.size());
    std::vector<json> reports(entries.size());
    std::atomic<size_t> next{0};
    std::atomic<bool> numeric_failure{false};
    std::mutex err_mutex;
    std::string failed_frame;

    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= entries.size() || numeric_failure.load()) return;
            const auto& e = entries[i];
            try {
                const auto frame =
                    synth::frame_from_json(load_json_file((in_dir / e.frame_file).string()));
                auto obs = synth::to_observations(frame);
                obs.p_gt = pressrender::load_pressure_map((in_dir / e.pressure_file).string());

                annofit::AnnoParams init; // zero pose, pressure near zero
                auto [params, report] = annofit::optimize_annotation(init, frame.shape, obs, cfg);

                const auto pred_mesh = handmodel::skin_mesh(params.theta, frame.shape);
                const auto gt_mesh = handmodel::skin_mesh(frame.pose, frame.shape);
                Row row;
                row.id = e.frame_id;
                row.pose = metrics::pose_metrics(pred_mesh.joints, gt_mesh.joints,
                                                 pred_mesh.vertices, gt_mesh.vertices,
                                                 params.theta.theta, frame.pose.theta);
                row.force_pred = params.pressure().sum();
                row.force_gt = frame.gt_pv.sum();
                rows[i] = std::move(row);
                json jr = report.to_json();
                jr["frame_id"] = e.frame_id;
                jr["seed"] = e.seed;
                reports[i] = std::move(jr);
                log_debug("fit " + e.frame_id + " mpjpe_mm=" + std::to_string(rows[i].pose.mpjpe));
            } catch (const NonFiniteLoss&) {
                std::lock_guard<std::mutex> lk(err_mutex);
                failed_frame = e.frame_id;
                numeric_failure.store(true);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int n_workers = std::max(1, threads);
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    if (numeric_failure.load()) {
        std::cerr << "numeric failure (non-finite loss) on frame " << failed_frame << '\n';
        return kExitNumeric;
    }

    std::ostringstream csv;
    csv << "frame_id,mpjpe_mm,pa_mpjpe_mm,pve_mm,mjae_deg,force_pred_g,force_gt_g\n";
    double sum_mpjpe = 0.0;
    for (size_t i = 0; i < entries.size(); ++i) {
        atomic_write(fs::path(out_dir) / (entries[i].frame_id + "_report.json"),
                     reports[i].dump(2) + "\n");
        const auto& r = rows[i];
        csv << r.id << ',' << r.pose.mpjpe << ',' << r.pose.pa_mpjpe << ',' << r.pose.pve << ','
            << r.pose.mjae << ',' << r.force_pred << ',' << r.force_gt << '\n';
        sum_mpjpe += r.pose.mpjpe;
    }
    atomic_write(fs::path(out_dir) / "summary.csv", csv.str());
    std::cout << "fit " << entries.size() << " frames, mean MPJPE "
              << sum_mpjpe / entries.size() << " mm\n";
    return kExitOk;
}

// ---- calibrate-extrinsics ----

int cmd_calibrate_extrinsics(const std::string& keypoints_path, const std::string& joints_path,
                             const std::string& intrinsics_path, const std::string& out_path) {
    const auto jk = load_json_file(keypoints_path);
    const auto jj = load_json_file(joints_path);
    const auto model = camera::load_fisheye(intrinsics_path);

    const auto kps = jk.at("keypoints_2d").get<std::vector<std::vector<double>>>();
    const auto joints = jj.at("joints").get<std::vector<std::vector<double>>>();
    if (kps.size() != 21 || joints.size() != 21) {
        throw ParseError("expected 21 keypoints and 21 joints");
    }
    Eigen::Matrix<double, 21, 2> u_px;
    Eigen::Matrix<double, 21, 3> x_hand;
    for (int i = 0; i < 21; ++i) {
        u_px(i, 0) = kps[i].at(0);
        u_px(i, 1) = kps[i].at(1);
        for (int c = 0; c < 3; ++c) x_hand(i, c) = joints[i].at(c);
    }

    geometry::RigidTransform init = synth::default_mean_extrinsics();
    if (jk.contains("init")) init = synth::transform_from_json(jk.at("init"));

    const auto [pose, rms] = annofit::solve_extrinsics(x_hand, u_px, model, init);
    json out = synth::transform_to_json(pose);
    out["rms_px"] = rms;
    if (!out_path.empty()) atomic_write(out_path, out.dump(2) + "\n");
    std::cout << "rms_px " << rms << '\n';
    return kExitOk;
}

// ---- eval ----

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out_dir) {
    auto collect = [](const std::string& dir) {
        std::map<std::string, fs::path> files;
        for (const auto& p : fs::directory_iterator(dir)) {
            if (p.path().extension() == ".json") files[p.path().stem().string()] = p.path();
        }
        return files;
    };
    const auto pred = collect(pred_dir);
    const auto gt = collect(gt_dir);
    if (pred.empty() || pred.size() != gt.size()) {
        std::cerr << "unmatched file sets between " << pred_dir << " and " << gt_dir << '\n';
        return kExitIo;
    }
    for (const auto& [id, _] : pred) {
        if (!gt.count(id)) {
            std::cerr << "no ground truth for " << id << '\n';
            return kExitIo;
        }
    }

    fs::create_directories(out_dir);
    std::ostringstream csv;
    csv << "frame_id,mpjpe_mm,pa_mpjpe_mm,pve_mm,pa_pve_mm,mjae_deg,"
           "contact_iou,vol_iou,contact_acc_pct,mae_fg_g,mae_all_g\n";
    json summary = json::array();
    for (const auto& [id, path] : pred) {
        const auto fp = synth::frame_from_json(load_json_file(path.string()));
        const auto fg = synth::frame_from_json(load_json_file(gt.at(id).string()));
        const auto mp = handmodel::skin_mesh(fp.pose, fp.shape);
        const auto mg = handmodel::skin_mesh(fg.pose, fg.shape);
        const auto pm = metrics::pose_metrics(mp.joints, mg.joints, mp.vertices, mg.vertices,
                                              fp.pose.theta, fg.pose.theta);
        const auto pr = metrics::pressure_metrics(fp.gt_pv, fg.gt_pv);
        csv << id << ',' << pm.mpjpe << ',' << pm.pa_mpjpe << ',' << pm.pve << ',' << pm.pa_pve
            << ',' << pm.mjae << ',' << pr.contact_iou << ',' << pr.vol_iou << ','
            << pr.contact_acc << ',' << pr.mae_fg << ',' << pr.mae_all << '\n';
        summary.push_back({{"frame_id", id},
                           {"mpjpe_mm", pm.mpjpe},
                           {"contact_iou", pr.contact_iou},
                           {"vol_iou", pr.vol_iou},
                           {"mae_fg_g", pr.mae_fg}});
    }
    atomic_write(fs::path(out_dir) / "eval.csv", csv.str());
    atomic_write(fs::path(out_dir) / "eval.json", summary.dump(2) + "\n");
    std::cout << "evaluated " << pred.size() << " frames\n";
    return kExitOk;
}

// ---- fitts ----

int cmd_fitts(const std::string& csv_path) {
    std::ifstream is(csv_path);
    if (!is) throw IoError("cannot open " + csv_path);
    std::string header;
    if (!std::getline(is, header)) throw ParseError("empty CSV " + csv_path);

    std::vector<std::string> cols;
    {
        std::stringstream ss(header);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
    }
    auto col_of = [&](const std::string& name) {
        for (size_t i = 0; i < cols.size(); ++i) {
            if (cols[i] == name) return static_cast<int>(i);
        }
        throw ParseError("missing column " + name + " in " + csv_path);
    };
    const int c_d = col_of("D_mm"), c_w = col_of("W_mm"), c_mt = col_of("MT_ms");

    std::vector<interact::FittsTrial> trials;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (static_cast<int>(fields.size()) <= std::max({c_d, c_w, c_mt})) {
            throw ParseError("short row in " + csv_path);
        }
        interact::FittsTrial t;
        t.distance = std::stod(fields[c_d]) / 1000.0;
        t.width = std::stod(fields[c_w]) / 1000.0;
        t.mt_ms = std::stod(fields[c_mt]);
        trials.push_back(t);
    }

    try {
        const auto res = interact::fitts_analysis(trials);
        std::cout << "slope_ms_per_bit " << res.slope_ms_per_bit << '\n'
                  << "intercept_ms " << res.intercept_ms << '\n'
                  << "throughput_bits_per_s " << res.throughput_bits_per_s << '\n';
    } catch (const DegenerateRegression& ex) {
        std::cerr << "degenerate regression: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const EmptyInput& ex) {
        std::cerr << "usage error: " << ex.what() << '\n';
        return kExitUsage;
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hand pose and pressure toolkit"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    int threads = 1;
    std::string config_path, out_dir = "out";
    app.add_option("--seed", seed, "RNG seed");
    app.add_option("--threads", threads, "worker threads");
    app.add_option("--config", config_path, "JSON config overrides");
    app.add_option("--out", out_dir, "output directory");

    int n_frames = 0;
    auto* synth_cmd = app.add_subcommand("synth", "generate synthetic frames");
    synth_cmd->add_option("--frames", n_frames, "number of frames")->required();

    std::string manifest_path;
    auto* fit_cmd = app.add_subcommand("fit", "fit annotations to a manifest");
    fit_cmd->add_option("--manifest", manifest_path, "manifest.jsonl path")->required();

    std::string kp_path, joints_path, intrinsics_path, ext_out;
    auto* calib_cmd = app.add_subcommand("calibrate-extrinsics", "solve wrist-camera extrinsics");
    calib_cmd->add_option("--keypoints", kp_path, "keypoints JSON")->required();
    calib_cmd->add_option("--joints", joints_path, "hand-local joints JSON")->required();
    calib_cmd->add_option("--intrinsics", intrinsics_path, "fisheye intrinsics JSON")->required();
    calib_cmd->add_option("--transform-out", ext_out, "output transform JSON");

    std::string pred_dir, gt_dir;
    auto* eval_cmd = app.add_subcommand("eval", "metric tables for matched frame sets");
    eval_cmd->add_option("--pred", pred_dir, "predictions directory")->required();
    eval_cmd->add_option("--gt", gt_dir, "ground-truth directory")->required();

    std::string fitts_csv;
    auto* fitts_cmd = app.add_subcommand("fitts", "Fitts-law regression on a trial log");
    fitts_cmd->add_option("--log", fitts_csv, "trial log CSV")->required();

    // Let global flags appear after the subcommand name too.
    for (auto* sub : {synth_cmd, fit_cmd, calib_cmd, eval_cmd, fitts_cmd}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        json config;
        if (!config_path.empty()) config = load_json_file(config_path);

        if (synth_cmd->parsed()) {
            synth::SynthConfig cfg;
            if (!config.is_null()) apply_synth_overrides(cfg, config);
            return cmd_synth(n_frames, seed, out_dir, cfg);
        }
        if (fit_cmd->parsed()) {
            annofit::OptimConfig cfg;
            if (!config.is_null()) apply_optim_overrides(cfg, config);
            return cmd_fit(manifest_path, out_dir, threads, cfg);
        }
        if (calib_cmd->parsed()) {
            return cmd_calibrate_extrinsics(kp_path, joints_path, intrinsics_path, ext_out);
        }
        if (eval_cmd->parsed()) return cmd_eval(pred_dir, gt_dir, out_dir);
        if (fitts_cmd->parsed()) return cmd_fitts(fitts_csv);
    } catch (const IoError& ex) {
        std::cerr << "io error: " << ex.what() << '\n';
        return kExitIo;
    } catch (const ParseError& ex) {
        std::cerr << "parse error: " << ex.what() << '\n';
        return kExitIo;
    } catch (const DivergedSolve& ex) {
        std::cerr << "numeric failure: " << ex.what() << '\n';
        return kExitNumeric;
    } catch (const NonFiniteLoss& ex) {
        std::cerr << "numeric failure: " << ex.what() << '\n';
        return kExitNumeric;
    } catch (const Error& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
