#pragma once

// Joint-aligned mesh feature extraction, codebook fitting (k-means++ with
// Lloyd iterations), nearest-neighbor quantization, position-readout
// decoding, and the token cross-entropy loss.

#include <cstdint>
#include <fstream>
#include <random>
#include <vector>

#include "handpress/errors.hpp"
#include "handpress/geometry.hpp"

namespace handpress::tokenizer {

using geometry::Vec3;

inline constexpr int kNumTokens = 21;
inline constexpr int kFeatureDim = 9;
inline constexpr int kDefaultCodebookSize = 512;

struct Codebook {
    Eigen::MatrixXd entries; // S x 9
    int size() const { return static_cast<int>(entries.rows()); }
};

struct TokenizedHand {
    std::array<int, kNumTokens> indices{};
};

/// Parent joint per 21-joint layout (wrist root = -1).
inline int joint_parent(int j) {
    if (j == 0) return -1;
    return (j - 1) % 4 == 0 ? 0 : j - 1;
}

/// First child per joint (-1 for fingertips; the wrist's first child is the
/// thumb MCP).
inline int joint_first_child(int j) {
    if (j == 0) return 1;
    return (j - 1) % 4 == 3 ? -1 : j + 1;
}

/// Per joint: [position, unit direction to parent or 0, unit direction to
/// first child or 0]. The first three components are the position, so a
/// decoder can read positions straight back out.
inline Eigen::Matrix<double, kNumTokens, kFeatureDim> joint_features(
    const Eigen::Matrix<double, kNumTokens, 3>& joints) {
    if (!joints.allFinite()) throw DegenerateInput("joint_features: non-finite joints");
    Eigen::Matrix<double, kNumTokens, kFeatureDim> out;
    for (int j = 0; j < kNumTokens; ++j) {
        const Vec3 p = joints.row(j);
        out.block<1, 3>(j, 0) = p.transpose();
        Vec3 to_parent = Vec3::Zero();
        if (const int par = joint_parent(j); par >= 0) {
            const Vec3 d = Vec3(joints.row(par)) - p;
            if (d.norm() > 1e-12) to_parent = d.normalized();
        }
        Vec3 to_child = Vec3::Zero();
        if (const int ch = joint_first_child(j); ch >= 0) {
            const Vec3 d = Vec3(joints.row(ch)) - p;
            if (d.norm() > 1e-12) to_child = d.normalized();
        }
        out.block<1, 3>(j, 3) = to_parent.transpose();
        out.block<1, 3>(j, 6) = to_child.transpose();
    }
    return out;
}

/// k-means++ seeding followed by Lloyd iterations; deterministic per seed.
inline Codebook fit_codebook_kmeans(const Eigen::MatrixXd& samples, int s, std::uint64_t seed,
                                    int max_iterations = 100,
                                    std::vector<double>* objective_trace = nullptr) {
    const auto m = samples.rows();
    if (m < s) throw TooFewSamples("fit_codebook_kmeans: fewer samples than centers");
    if (s < 2) throw DegenerateInput("fit_codebook_kmeans: need at least 2 centers");
    if (samples.cols() != kFeatureDim) {
        throw ShapeMismatch("fit_codebook_kmeans: samples must be Mx9");
    }

    std::mt19937_64 rng(seed);
    Eigen::MatrixXd centers(s, kFeatureDim);

    // k-means++ init.
    std::uniform_int_distribution<Eigen::Index> first(0, m - 1);
    centers.row(0) = samples.row(first(rng));
    Eigen::VectorXd d2 = (samples.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int k = 1; k < s; ++k) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng), acc = 0.0;
            for (Eigen::Index i = 0; i < m; ++i) {
                acc += d2(i);
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = first(rng);
        }
        centers.row(k) = samples.row(pick);
        d2 = d2.cwiseMin((samples.rowwise() - centers.row(k)).rowwise().squaredNorm());
    }

    std::vector<Eigen::Index> assign(m, 0);
    for (int it = 0; it < max_iterations; ++it) {
        double objective = 0.0;
        bool changed = false;
        for (Eigen::Index i = 0; i < m; ++i) {
            Eigen::Index best = 0;
            double best_d = (samples.row(i) - centers.row(0)).squaredNorm();
            for (int k = 1; k < s; ++k) {
                const double d = (samples.row(i) - centers.row(k)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            objective += best_d;
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (objective_trace) objective_trace->push_back(objective);
        if (!changed && it > 0) break;

        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(s, kFeatureDim);
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(s);
        for (Eigen::Index i = 0; i < m; ++i) {
            sums.row(assign[i]) += samples.row(i);
            counts(assign[i]) += 1.0;
        }
        for (int k = 0; k < s; ++k) {
            if (counts(k) > 0.0) centers.row(k) = sums.row(k) / counts(k);
        }
    }
    return Codebook{centers};
}

/// Nearest-neighbor lookup; ties break toward the lowest index.
inline TokenizedHand quantize(const Eigen::Matrix<double, kNumTokens, kFeatureDim>& features,
                              const Codebook& cb) {
    TokenizedHand out;
    for (int t = 0; t < kNumTokens; ++t) {
        int best = 0;
        double best_d = (features.row(t) - cb.entries.row(0)).squaredNorm();
        for (int k = 1; k < cb.size(); ++k) {
            const double d = (features.row(t) - cb.entries.row(k)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        out.indices[t] = best;
    }
    return out;
}

/// Position-block read-out of the selected codebook entries.
inline Eigen::Matrix<double, kNumTokens, 3> decode_tokens(const TokenizedHand& tokens,
                                                          const Codebook& cb) {
    Eigen::Matrix<double, kNumTokens, 3> joints;
    for (int t = 0; t < kNumTokens; ++t) {
        const int idx = tokens.indices[t];
        if (idx < 0 || idx >= cb.size()) {
            throw IndexOutOfRange("decode_tokens: token index out of range");
        }
        joints.row(t) = cb.entries.block<1, 3>(idx, 0);
    }
    return joints;
}

/// Mean over tokens of -log p[gt]; rows must be probability distributions.
inline double token_cross_entropy(const Eigen::MatrixXd& probs, const TokenizedHand& gt) {
    if (probs.rows() != kNumTokens) throw ShapeMismatch("token_cross_entropy: need 21 rows");
    double total = 0.0;
    for (int t = 0; t < kNumTokens; ++t) {
        if ((probs.row(t).array() < 0.0).any() || std::abs(probs.row(t).sum() - 1.0) > 1e-6) {
            throw InvalidDistribution("token_cross_entropy: row is not a distribution");
        }
        const int idx = gt.indices[t];
        if (idx < 0 || idx >= probs.cols()) {
            throw IndexOutOfRange("token_cross_entropy: gt index out of range");
        }
        total += -std::log(std::max(probs(t, idx), 1e-300));
    }
    return total / kNumTokens;
}

// ---- Codebook file: "CBK1", u32 S, u32 dim, float32 row-major ----

inline void save_codebook(const Codebook& cb, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path);
    os.write("CBK1", 4);
    const std::uint32_t s = static_cast<std::uint32_t>(cb.size());
    const std::uint32_t dim = kFeatureDim;
    os.write(reinterpret_cast<const char*>(&s), 4);
    os.write(reinterpret_cast<const char*>(&dim), 4);
    for (int r = 0; r < cb.size(); ++r) {
        for (int c = 0; c < kFeatureDim; ++c) {
            const float v = static_cast<float>(cb.entries(r, c));
            os.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
}

inline Codebook load_codebook(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "CBK1") throw ParseError("codebook: bad magic in " + path);
    std::uint32_t s = 0, dim = 0;
    is.read(reinterpret_cast<char*>(&s), 4);
    is.read(reinterpret_cast<char*>(&dim), 4);
    if (!is || dim != kFeatureDim || s < 2) throw ParseError("codebook: bad header in " + path);
    Codebook cb;
    cb.entries.resize(s, kFeatureDim);
    for (std::uint32_t r = 0; r < s; ++r) {
        for (int c = 0; c < kFeatureDim; ++c) {
            float v = 0.0f;
            is.read(reinterpret_cast<char*>(&v), 4);
            if (!is) throw ParseError("codebook: truncated " + path);
            cb.entries(r, c) = v;
        }
    }
    return cb;
}

} // namespace handpress::tokenizer
