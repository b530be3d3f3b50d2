#pragma once

#include <cmath>
#include <numeric>

#include "sop/common.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Head selection: the marginal head scores raw features, the conditioned head
// scores features with the advantage indicator bit appended.

enum class HeadKind : uint8_t { Marginal = 0, Conditioned = 1 };

struct Head {
  HeadKind kind = HeadKind::Marginal;
  double indicator = 0.0;

  static Head marginal() { return Head{HeadKind::Marginal, 0.0}; }
  static Head conditioned(bool bit) { return Head{HeadKind::Conditioned, bit ? 1.0 : 0.0}; }
};

struct ActionDistribution {
  std::vector<double> probs;
};

// ---------------------------------------------------------------------------
// Versioned, hashable parameter set.
//
// action_weights:   [A x (F+1)] conditioned head, last column = indicator bit
// marginal_weights: [A x F]
// value_weights:    [F]
// content_hash covers dims and weights, not the version, so identical updates
// from identical states hash identically.

struct PolicyParams {
  uint64_t version = 0;
  int num_actions = 0;
  int feature_dim = 0;
  std::vector<double> action_weights;
  std::vector<double> marginal_weights;
  std::vector<double> value_weights;
  uint64_t content_hash = 0;

  static PolicyParams zeros(int num_actions, int feature_dim) {
    PolicyParams p;
    p.num_actions = num_actions;
    p.feature_dim = feature_dim;
    p.action_weights.assign(static_cast<size_t>(num_actions) * (feature_dim + 1), 0.0);
    p.marginal_weights.assign(static_cast<size_t>(num_actions) * feature_dim, 0.0);
    p.value_weights.assign(static_cast<size_t>(feature_dim), 0.0);
    p.rehash();
    return p;
  }

  void rehash() { content_hash = compute_hash(); }

  uint64_t compute_hash() const {
    ByteWriter w;
    w.put_u32(static_cast<uint32_t>(num_actions));
    w.put_u32(static_cast<uint32_t>(feature_dim));
    for (double v : action_weights) w.put_f64(v);
    for (double v : marginal_weights) w.put_f64(v);
    for (double v : value_weights) w.put_f64(v);
    return fnv1a64(w.bytes());
  }

  bool all_finite() const {
    auto ok = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    return ok(action_weights) && ok(marginal_weights) && ok(value_weights);
  }
};

// ---------------------------------------------------------------------------
// Forward pass: softmax over linear logits, max-subtracted for stability.

namespace detail {

inline void softmax_inplace(std::vector<double>& logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& z : logits) {
    z = std::exp(z - mx);
    sum += z;
  }
  for (double& z : logits) z /= sum;
}

}  // namespace detail

inline ActionDistribution forward(const PolicyParams& params,
                                  std::span<const double> features, Head head) {
  if (static_cast<int>(features.size()) != params.feature_dim)
    throw std::invalid_argument("forward: feature length does not match weights");
  const int A = params.num_actions;
  const int F = params.feature_dim;
  std::vector<double> logits(static_cast<size_t>(A), 0.0);
  if (head.kind == HeadKind::Marginal) {
    for (int a = 0; a < A; ++a) {
      const double* row = params.marginal_weights.data() + static_cast<size_t>(a) * F;
      logits[a] = std::inner_product(features.begin(), features.end(), row, 0.0);
    }
  } else {
    const int stride = F + 1;
    for (int a = 0; a < A; ++a) {
      const double* row = params.action_weights.data() + static_cast<size_t>(a) * stride;
      logits[a] = std::inner_product(features.begin(), features.end(), row, 0.0) +
                  row[F] * head.indicator;
    }
  }
  detail::softmax_inplace(logits);
  return ActionDistribution{std::move(logits)};
}

inline double value(const PolicyParams& params, std::span<const double> features) {
  if (static_cast<int>(features.size()) != params.feature_dim)
    throw std::invalid_argument("value: feature length does not match weights");
  return std::inner_product(features.begin(), features.end(),
                            params.value_weights.data(), 0.0);
}

// ---------------------------------------------------------------------------
// Negative log-likelihood loss and its exact gradient.

struct GradientItem {
  std::vector<double> features;
  int action = 0;
  Head head;
};

struct Gradient {
  std::vector<double> action_weights;    // same shape as params.action_weights
  std::vector<double> marginal_weights;  // same shape as params.marginal_weights

  bool all_finite() const {
    auto ok = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    return ok(action_weights) && ok(marginal_weights);
  }
};

inline double item_nll(const PolicyParams& params, const GradientItem& item) {
  ActionDistribution dist = forward(params, item.features, item.head);
  return -std::log(std::max(dist.probs[static_cast<size_t>(item.action)], 1e-300));
}

/// loss = mean over batch of -log pi(a|x); gradient is d(loss)/d(weights).
inline std::pair<double, Gradient> nll_grad(const PolicyParams& params,
                                            std::span<const GradientItem> batch) {
  if (batch.empty()) throw std::invalid_argument("nll_grad: empty batch");
  const int A = params.num_actions;
  const int F = params.feature_dim;
  Gradient g;
  g.action_weights.assign(params.action_weights.size(), 0.0);
  g.marginal_weights.assign(params.marginal_weights.size(), 0.0);

  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const GradientItem& item : batch) {
    if (item.action < 0 || item.action >= A)
      throw std::invalid_argument("nll_grad: action index out of range");
    ActionDistribution dist = forward(params, item.features, item.head);
    loss += -std::log(std::max(dist.probs[static_cast<size_t>(item.action)], 1e-300));
    // d(-log p_a)/dz = p - e_a, dz/dW[a',f] = x_f
    for (int a = 0; a < A; ++a) {
      double coeff = (dist.probs[static_cast<size_t>(a)] -
                      (a == item.action ? 1.0 : 0.0)) *
                     inv_n;
      if (item.head.kind == HeadKind::Marginal) {
        double* row = g.marginal_weights.data() + static_cast<size_t>(a) * F;
        for (int f = 0; f < F; ++f) row[f] += coeff * item.features[static_cast<size_t>(f)];
      } else {
        double* row = g.action_weights.data() + static_cast<size_t>(a) * (F + 1);
        for (int f = 0; f < F; ++f) row[f] += coeff * item.features[static_cast<size_t>(f)];
        row[F] += coeff * item.head.indicator;
      }
    }
  }
  return {loss * inv_n, std::move(g)};
}

// ---------------------------------------------------------------------------
// Plain SGD step; produces a new immutable value with version+1.

inline PolicyParams sgd_step(const PolicyParams& params, const Gradient& grad,
                             double lr) {
  if (lr <= 0) throw std::invalid_argument("sgd_step: lr must be positive");
  if (grad.action_weights.size() != params.action_weights.size() ||
      grad.marginal_weights.size() != params.marginal_weights.size())
    throw std::invalid_argument("sgd_step: gradient shape mismatch");
  if (!grad.all_finite())
    throw std::invalid_argument("sgd_step: non-finite gradient rejected");

  PolicyParams next = params;
  for (size_t i = 0; i < next.action_weights.size(); ++i)
    next.action_weights[i] -= lr * grad.action_weights[i];
  for (size_t i = 0; i < next.marginal_weights.size(); ++i)
    next.marginal_weights[i] -= lr * grad.marginal_weights[i];
  next.version = params.version + 1;
  next.rehash();
  return next;
}

}  // namespace sop
