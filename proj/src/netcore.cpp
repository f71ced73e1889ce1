#include "topiceval/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "topiceval/error.hpp"
#include "topiceval/util.hpp"

namespace topiceval {

Eigen::VectorXd linear_forward(const DenseLayer& layer, const Eigen::VectorXd& x) {
    if (x.size() != layer.in_dim())
        throw Error("linear_forward: input size " + std::to_string(x.size()) +
                    " does not match in_dim " + std::to_string(layer.in_dim()));
    return layer.W * x + layer.b;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
    if (z.size() < 1) throw Error("softmax: empty input");
    const double shift = z.maxCoeff();
    Eigen::ArrayXd e = (z.array() - shift).exp();
    return (e / e.sum()).matrix();
}

double cross_entropy(const Eigen::VectorXd& probs, Eigen::Index label) {
    if (label < 0 || label >= probs.size())
        throw Error("cross_entropy: label out of range");
    return -std::log(std::max(probs[label], 1e-12));
}

double normalized_entropy(const Eigen::VectorXd& probs) {
    const Eigen::Index k = probs.size();
    if (k < 2) return 0.0;
    double h = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
        const double p = probs[i];
        if (p > 0.0) h -= p * std::log(p);
    }
    return h / std::log(static_cast<double>(k));
}

Eigen::Index argmax(const Eigen::VectorXd& v) {
    if (v.size() < 1) throw Error("argmax: empty input");
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

Adam::Adam(AdamConfig config, std::vector<Eigen::Index> block_sizes)
    : config_(config), sizes_(std::move(block_sizes)) {
    m_.reserve(sizes_.size());
    v_.reserve(sizes_.size());
    for (Eigen::Index n : sizes_) {
        m_.push_back(Eigen::ArrayXd::Zero(n));
        v_.push_back(Eigen::ArrayXd::Zero(n));
    }
}

void Adam::step(std::span<double* const> params,
                std::span<const double* const> grads) {
    if (params.size() != sizes_.size() || grads.size() != sizes_.size())
        throw Error("adam: block count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < sizes_.size(); ++i) {
        Eigen::Map<Eigen::ArrayXd> p(params[i], sizes_[i]);
        Eigen::Map<const Eigen::ArrayXd> g(grads[i], sizes_[i]);
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.square();
        p -= config_.lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + config_.epsilon);
    }
}

double finite_diff_gradcheck(const std::function<double()>& loss,
                             std::span<const ParamBlock> blocks, std::uint64_t seed,
                             double eps, int min_coords) {
    if (eps <= 0.0) throw Error("gradcheck: eps must be positive");
    Eigen::Index total = 0;
    for (const auto& b : blocks) total += b.size;
    if (total == 0) throw Error("gradcheck: no parameters");

    std::vector<Eigen::Index> coords;
    if (total <= min_coords) {
        coords.resize(static_cast<std::size_t>(total));
        std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    } else {
        Rng rng(seed);
        std::uniform_int_distribution<Eigen::Index> dist(0, total - 1);
        // Sampling with replacement; duplicates just re-check a coordinate.
        coords.reserve(static_cast<std::size_t>(min_coords));
        for (int i = 0; i < min_coords; ++i) coords.push_back(dist(rng));
    }

    double max_rel = 0.0;
    for (Eigen::Index flat : coords) {
        Eigen::Index offset = flat;
        const ParamBlock* block = nullptr;
        for (const auto& b : blocks) {
            if (offset < b.size) {
                block = &b;
                break;
            }
            offset -= b.size;
        }
        double& theta = block->value[offset];
        const double saved = theta;
        theta = saved + eps;
        const double up = loss();
        theta = saved - eps;
        const double down = loss();
        theta = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = block->grad[offset];
        const double rel = std::abs(analytic - numeric) /
                           std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace topiceval
