#include "fedcyc/objectives.hpp"

#include "fedcyc/rng.hpp"

#include <cmath>
#include <string>

namespace fedcyc {
namespace {

double softplus(double z) {
  if (z > 37.0) return z;
  return std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_dims(const ObjectiveSpec& spec, const Vector& model, const Sample& sample) {
  if (model.size() != spec.dim)
    throw std::invalid_argument("objective: model has dimension " + std::to_string(model.size()) +
                                ", spec expects " + std::to_string(spec.dim));
  if (sample.features.size() != spec.feature_dim())
    throw std::invalid_argument("objective: sample has " + std::to_string(sample.features.size()) +
                                " features, spec expects " + std::to_string(spec.feature_dim()));
}

double binary_label(const Sample& sample) {
  if (sample.target != 1.0 && sample.target != -1.0)
    throw std::invalid_argument("logistic objective: targets must be +1 or -1");
  return sample.target;
}

int class_label(const ObjectiveSpec& spec, const Sample& sample) {
  const double t = sample.target;
  const int c = static_cast<int>(t);
  if (t != static_cast<double>(c) || c < 0 || c >= spec.num_classes)
    throw std::invalid_argument("softmax objective: target must be an integer class in 0..num_classes-1");
  return c;
}

// probs <- softmax of logits, numerically stable; returns log-sum-exp
double softmax_probs(const Eigen::VectorXd& logits, Eigen::VectorXd& probs) {
  const double zmax = logits.maxCoeff();
  probs = (logits.array() - zmax).exp();
  const double sum = probs.sum();
  probs /= sum;
  return zmax + std::log(sum);
}

// accum += data-term gradient (no regularizer)
void add_data_gradient(const ObjectiveSpec& spec, const Vector& model, const Sample& sample, Vector& accum) {
  const auto& a = sample.features;
  switch (spec.kind) {
    case LossKind::LeastSquares: {
      const double r = a.dot(model) - sample.target;
      accum.noalias() += r * a;
      return;
    }
    case LossKind::Logistic: {
      const double y = binary_label(sample);
      const double margin = y * a.dot(model);
      accum.noalias() += (-y * sigmoid(-margin)) * a;
      return;
    }
    case LossKind::Softmax: {
      const Eigen::Index df = spec.feature_dim();
      Eigen::VectorXd logits(spec.num_classes), probs(spec.num_classes);
      for (int c = 0; c < spec.num_classes; ++c) logits[c] = model.segment(c * df, df).dot(a);
      softmax_probs(logits, probs);
      const int k = class_label(spec, sample);
      for (int c = 0; c < spec.num_classes; ++c) {
        const double coeff = probs[c] - (c == k ? 1.0 : 0.0);
        accum.segment(c * df, df).noalias() += coeff * a;
      }
      return;
    }
  }
  throw std::logic_error("objective: unknown loss kind");
}

}  // namespace

void ObjectiveSpec::validate() const {
  if (dim < 1) throw std::invalid_argument("ObjectiveSpec: dim must be >= 1");
  if (!(lambda > 0.0)) throw std::invalid_argument("ObjectiveSpec: lambda must be > 0");
  if (projection_radius && !(*projection_radius > 0.0))
    throw std::invalid_argument("ObjectiveSpec: projection_radius must be > 0 when set");
  if (kind == LossKind::Softmax) {
    if (num_classes < 2) throw std::invalid_argument("ObjectiveSpec: softmax needs num_classes >= 2");
    if (dim % num_classes != 0)
      throw std::invalid_argument("ObjectiveSpec: softmax dim must be num_classes * feature_dim");
  }
}

double loss(const ObjectiveSpec& spec, const Vector& model, const Sample& sample) {
  check_dims(spec, model, sample);
  if (!model.allFinite()) throw std::invalid_argument("objective: model has non-finite entries");
  const double reg = 0.5 * spec.lambda * model.squaredNorm();
  const auto& a = sample.features;
  switch (spec.kind) {
    case LossKind::LeastSquares: {
      const double r = a.dot(model) - sample.target;
      return 0.5 * r * r + reg;
    }
    case LossKind::Logistic: {
      const double y = binary_label(sample);
      return softplus(-y * a.dot(model)) + reg;
    }
    case LossKind::Softmax: {
      const Eigen::Index df = spec.feature_dim();
      Eigen::VectorXd logits(spec.num_classes), probs(spec.num_classes);
      for (int c = 0; c < spec.num_classes; ++c) logits[c] = model.segment(c * df, df).dot(a);
      const double lse = softmax_probs(logits, probs);
      return lse - logits[class_label(spec, sample)] + reg;
    }
  }
  throw std::logic_error("objective: unknown loss kind");
}

Vector gradient(const ObjectiveSpec& spec, const Vector& model, const Sample& sample) {
  check_dims(spec, model, sample);
  Vector g = Vector::Zero(spec.dim);
  add_data_gradient(spec, model, sample, g);
  g.noalias() += spec.lambda * model;
  return g;
}

Vector minibatch_gradient(const ObjectiveSpec& spec, const Vector& model, std::span<const Sample> batch) {
  if (batch.empty()) throw std::invalid_argument("minibatch_gradient: empty batch");
  Vector g = Vector::Zero(spec.dim);
  for (const Sample& s : batch) {
    check_dims(spec, model, s);
    add_data_gradient(spec, model, s, g);
  }
  g /= static_cast<double>(batch.size());
  g.noalias() += spec.lambda * model;
  return g;
}

Vector minibatch_gradient(const ObjectiveSpec& spec, const Vector& model, std::span<const Sample> samples,
                          std::span<const std::int64_t> indices) {
  if (indices.empty()) throw std::invalid_argument("minibatch_gradient: empty index batch");
  Vector g = Vector::Zero(spec.dim);
  for (std::int64_t idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= samples.size())
      throw std::out_of_range("minibatch_gradient: sample index out of range");
    check_dims(spec, model, samples[idx]);
    add_data_gradient(spec, model, samples[idx], g);
  }
  g /= static_cast<double>(indices.size());
  g.noalias() += spec.lambda * model;
  return g;
}

double group_mean_loss(const ObjectiveSpec& spec, const Vector& model, std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("group_mean_loss: empty sample set");
  double acc = 0.0;
  for (const Sample& s : samples) acc += loss(spec, model, s);
  return acc / static_cast<double>(samples.size());
}

double empirical_block_objective(const ObjectiveSpec& spec, const Vector& model,
                                 std::span<const WeightedGroup> block_clients) {
  if (block_clients.empty()) throw std::invalid_argument("empirical_block_objective: no client groups");
  double acc = 0.0;
  for (const WeightedGroup& g : block_clients) acc += g.weight * group_mean_loss(spec, model, g.samples);
  return acc;
}

Vector weighted_gradient(const ObjectiveSpec& spec, const Vector& model, std::span<const WeightedGroup> groups) {
  if (groups.empty()) throw std::invalid_argument("weighted_gradient: no groups");
  Vector g = Vector::Zero(spec.dim);
  double wsum = 0.0;
  for (const WeightedGroup& grp : groups) {
    if (grp.samples.empty()) throw std::invalid_argument("weighted_gradient: empty group");
    Vector part = Vector::Zero(spec.dim);
    for (const Sample& s : grp.samples) {
      check_dims(spec, model, s);
      add_data_gradient(spec, model, s, part);
    }
    g.noalias() += (grp.weight / static_cast<double>(grp.samples.size())) * part;
    wsum += grp.weight;
  }
  g.noalias() += (wsum * spec.lambda) * model;
  return g;
}

Vector project_to_ball(Vector x, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("project_to_ball: radius must be > 0");
  const double n = x.norm();
  if (n > radius) x *= radius / n;
  return x;
}

namespace {

double curvature_bound(const ObjectiveSpec& spec, const Sample& s) {
  const double a2 = s.features.squaredNorm();
  switch (spec.kind) {
    case LossKind::LeastSquares:
      return a2;
    case LossKind::Logistic:
      return 0.25 * a2;
    case LossKind::Softmax:
      return 0.5 * a2;
  }
  throw std::logic_error("objective: unknown loss kind");
}

double smoothness_bound(const ObjectiveSpec& spec, std::span<const WeightedGroup> groups) {
  double worst = 0.0;
  for (const WeightedGroup& g : groups)
    for (const Sample& s : g.samples) worst = std::max(worst, curvature_bound(spec, s));
  return spec.lambda + worst;
}

Vector descend(const ObjectiveSpec& spec, std::span<const WeightedGroup> groups, const SolveOptions& opts,
               Vector x) {
  const double L = smoothness_bound(spec, groups);
  const double step = 2.0 / (spec.lambda + L);
  for (std::int64_t it = 0; it < opts.max_iterations; ++it) {
    Vector g = weighted_gradient(spec, x, groups);
    if (g.norm() <= opts.grad_tol) return x;
    x.noalias() -= step * g;
  }
  if (weighted_gradient(spec, x, groups).norm() <= opts.grad_tol) return x;
  throw OracleError("solve_optimum: gradient descent did not reach tolerance " +
                    std::to_string(opts.grad_tol) + " within " + std::to_string(opts.max_iterations) +
                    " iterations");
}

}  // namespace

Vector solve_optimum(const ObjectiveSpec& spec, std::span<const WeightedGroup> groups, SolveOptions opts) {
  spec.validate();
  if (groups.empty()) throw std::invalid_argument("solve_optimum: no groups");
  double wsum = 0.0;
  for (const WeightedGroup& g : groups) {
    if (g.samples.empty()) throw std::invalid_argument("solve_optimum: empty group");
    if (!(g.weight >= 0.0)) throw std::invalid_argument("solve_optimum: negative group weight");
    wsum += g.weight;
  }
  if (std::abs(wsum - 1.0) > 1e-9)
    throw std::invalid_argument("solve_optimum: group weights must sum to 1 (got " + std::to_string(wsum) + ")");

  if (spec.kind == LossKind::LeastSquares) {
    Eigen::MatrixXd A = spec.lambda * Eigen::MatrixXd::Identity(spec.dim, spec.dim);
    Vector rhs = Vector::Zero(spec.dim);
    for (const WeightedGroup& g : groups) {
      const double w = g.weight / static_cast<double>(g.samples.size());
      for (const Sample& s : g.samples) {
        A.selfadjointView<Eigen::Lower>().rankUpdate(s.features, w);
        rhs.noalias() += (w * s.target) * s.features;
      }
    }
    Vector x = A.selfadjointView<Eigen::Lower>().ldlt().solve(rhs);
    // polish away any factorization residual; usually exits immediately
    return descend(spec, groups, opts, std::move(x));
  }
  return descend(spec, groups, opts, Vector::Zero(spec.dim));
}

ProblemConstants estimate_constants(const ObjectiveSpec& spec, std::span<const WeightedGroup> clients,
                                    ConstantsOptions opts) {
  spec.validate();
  if (clients.empty()) throw std::invalid_argument("estimate_constants: no client groups");
  ProblemConstants out;
  out.mu = spec.lambda;
  out.L = smoothness_bound(spec, clients);
  const double radius = spec.projection_radius.value_or(opts.probe_radius);
  out.B2 = radius * radius;

  // deterministic probe grid: origin plus random directions at two radii
  std::vector<Vector> probes;
  probes.push_back(Vector::Zero(spec.dim));
  RngStream rng(mix_seed(opts.seed, {rng_tag::kConstantsProbe}));
  for (int i = 0; i < opts.probe_directions; ++i) {
    Vector dir(spec.dim);
    for (Eigen::Index j = 0; j < spec.dim; ++j) dir[j] = rng.normal();
    const double n = dir.norm();
    if (n > 0.0) dir /= n;
    probes.push_back(0.5 * radius * dir);
    probes.push_back(radius * dir);
  }

  const double n_clients = static_cast<double>(clients.size());
  for (const Vector& x : probes) {
    for (const WeightedGroup& g : clients) {
      if (g.samples.empty()) throw std::invalid_argument("estimate_constants: empty group");
      const double scale = g.weight * n_clients;  // weighted local objective scaling
      Vector mean = Vector::Zero(spec.dim);
      double mean_sq = 0.0;
      for (const Sample& s : g.samples) {
        Vector grad = scale * gradient(spec, x, s);
        mean_sq += grad.squaredNorm();
        mean.noalias() += grad;
      }
      const double n = static_cast<double>(g.samples.size());
      mean /= n;
      mean_sq /= n;
      out.G2 = std::max(out.G2, mean_sq);
      // E||g - E g||^2 = E||g||^2 - ||E g||^2
      out.sigma2 = std::max(out.sigma2, std::max(0.0, mean_sq - mean.squaredNorm()));
    }
  }
  return out;
}

}  // namespace fedcyc
