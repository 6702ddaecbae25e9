#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace fedcyc {

using Vector = Eigen::VectorXd;

struct Sample {
  Vector features;
  double target = 0.0;  // regression value, +-1 label, or 0-based class index
};

enum class LossKind { LeastSquares, Logistic, Softmax };

/// Regularized convex objective family. All losses include the
/// lambda/2 * ||x||^2 term, so lambda > 0 makes every objective strongly
/// convex with modulus lambda. For Softmax the model stacks num_classes
/// blocks of feature_dim() coefficients.
struct ObjectiveSpec {
  LossKind kind = LossKind::LeastSquares;
  Eigen::Index dim = 1;  // model dimension d
  double lambda = 1.0;
  std::optional<double> projection_radius;  // when set, iterates are clipped to this ball
  int num_classes = 1;                      // Softmax only, >= 2 there

  Eigen::Index feature_dim() const {
    return kind == LossKind::Softmax ? dim / num_classes : dim;
  }
  void validate() const;  // throws std::invalid_argument
};

/// A set of samples sharing one scalar weight; weighted objectives are
/// sums of weight * (mean loss over the group).
struct WeightedGroup {
  std::span<const Sample> samples;
  double weight = 0.0;
};

struct ProblemConstants {
  double mu = 0.0;      // strong-convexity modulus (= lambda)
  double L = 0.0;       // smoothness bound
  double sigma2 = 0.0;  // empirical per-client gradient-variance estimate
  double G2 = 0.0;      // empirical squared-gradient-norm estimate
  double B2 = 0.0;      // squared parameter-ball radius used for the probes
};

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-sample loss f(x, sample) >= 0, regularizer included.
double loss(const ObjectiveSpec& spec, const Vector& model, const Sample& sample);

/// Analytic per-sample gradient of loss().
Vector gradient(const ObjectiveSpec& spec, const Vector& model, const Sample& sample);

/// Arithmetic mean of per-sample gradients, accumulated in sample order.
Vector minibatch_gradient(const ObjectiveSpec& spec, const Vector& model, std::span<const Sample> batch);

/// Same over samples[indices[0]], samples[indices[1]], ... (draws may repeat).
Vector minibatch_gradient(const ObjectiveSpec& spec, const Vector& model, std::span<const Sample> samples,
                          std::span<const std::int64_t> indices);

/// Mean loss over one group of samples, fixed summation order.
double group_mean_loss(const ObjectiveSpec& spec, const Vector& model, std::span<const Sample> samples);

/// Weighted empirical objective over client groups of one block:
/// sum_i weight_i * (mean loss over client i's samples).
double empirical_block_objective(const ObjectiveSpec& spec, const Vector& model,
                                 std::span<const WeightedGroup> block_clients);

/// Gradient of empirical_block_objective (also serves the pooled objective
/// when the groups span all blocks with weights summing to 1).
Vector weighted_gradient(const ObjectiveSpec& spec, const Vector& model, std::span<const WeightedGroup> groups);

/// Clips x to the centered ball of the given radius (no-op when inside).
Vector project_to_ball(Vector x, double radius);

struct SolveOptions {
  double grad_tol = 1e-10;
  std::int64_t max_iterations = 200000;
};

/// Exact minimizer of the weighted empirical objective. Least squares is
/// solved in closed form from the regularized normal equations; the smooth
/// classification losses run deterministic full-batch gradient descent until
/// the gradient norm drops below grad_tol. Throws OracleError when the
/// iteration cap is hit first.
Vector solve_optimum(const ObjectiveSpec& spec, std::span<const WeightedGroup> groups, SolveOptions opts = {});

struct ConstantsOptions {
  int probe_directions = 8;
  double probe_radius = 1.0;
  std::uint64_t seed = 0x5eedc0de;
};

/// mu = lambda exactly; L = lambda + the largest per-sample curvature bound;
/// sigma2 / G2 are maxima of empirical moments of the weighted per-client
/// stochastic gradients over a deterministic probe grid of models.
ProblemConstants estimate_constants(const ObjectiveSpec& spec, std::span<const WeightedGroup> clients,
                                    ConstantsOptions opts = {});

}  // namespace fedcyc
