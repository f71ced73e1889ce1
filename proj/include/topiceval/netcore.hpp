#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace topiceval {

struct DenseLayer {
    Eigen::MatrixXd W;  // out_dim x in_dim
    Eigen::VectorXd b;  // out_dim

    Eigen::Index in_dim() const { return W.cols(); }
    Eigen::Index out_dim() const { return W.rows(); }
};

// W*x + b; throws on dimension mismatch.
Eigen::VectorXd linear_forward(const DenseLayer& layer, const Eigen::VectorXd& x);

// Elementwise max(0, x). Returns an expression; evaluates lazily.
template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
    return x.cwiseMax(typename Derived::Scalar(0));
}

// Max-shifted softmax; entries sum to 1 within 1e-12.
Eigen::VectorXd softmax(const Eigen::VectorXd& z);

// -ln(max(p[label], 1e-12)).
double cross_entropy(const Eigen::VectorXd& probs, Eigen::Index label);

// -sum p ln p / ln(k), with 0 ln 0 = 0; k < 2 yields 0.
double normalized_entropy(const Eigen::VectorXd& probs);

// Index of the largest entry; ties resolve to the lowest index.
Eigen::Index argmax(const Eigen::VectorXd& v);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// First/second moment accumulators for a fixed set of parameter blocks.
// One step() covers all blocks and advances the shared step counter.
class Adam {
  public:
    Adam(AdamConfig config, std::vector<Eigen::Index> block_sizes);

    // params[i] and grads[i] point at block_sizes[i] doubles.
    void step(std::span<double* const> params, std::span<const double* const> grads);

    long step_count() const { return t_; }
    const AdamConfig& config() const { return config_; }

  private:
    AdamConfig config_;
    std::vector<Eigen::Index> sizes_;
    std::vector<Eigen::ArrayXd> m_;
    std::vector<Eigen::ArrayXd> v_;
    long t_ = 0;
};

// A named view of one parameter tensor and its analytic gradient, for
// gradient checking.
struct ParamBlock {
    std::string name;
    double* value = nullptr;
    const double* grad = nullptr;
    Eigen::Index size = 0;
};

// Central-difference check of analytic gradients. Samples min_coords
// coordinates (all of them when the model is smaller), perturbs each by
// +/- eps, and returns the max of |a - n| / max(|a| + |n|, 1e-8).
// loss() must recompute the loss from the current parameter values.
double finite_diff_gradcheck(const std::function<double()>& loss,
                             std::span<const ParamBlock> blocks, std::uint64_t seed,
                             double eps = 1e-5, int min_coords = 200);

}  // namespace topiceval
