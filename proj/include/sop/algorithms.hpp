#pragma once

#include "sop/policy.hpp"
#include "sop/store.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Plug-in post-training modules consumed by the learner's train loop.

enum class Origin : uint8_t { Online = 0, Offline = 1 };

/// One sampled batch element: a frame view plus its sampling provenance.
struct TrainItem {
  const Frame* frame = nullptr;
  int task = 0;
  Origin origin = Origin::Offline;
  EpisodeId episode;
};

struct AlgorithmSpec {
  enum class Kind { HGDagger, Recap };
  Kind kind = Kind::HGDagger;
  // RECAP settings; thresholds are per task since episode lengths vary.
  std::vector<double> epsilon_per_task = {0.0, 0.0, 0.0};
  double gamma = 0.99;
  double beta_rollout = 1.0;
  double beta_eval = 2.0;

  double epsilon_for(int task) const {
    if (epsilon_per_task.empty()) return 0.0;
    return epsilon_per_task[static_cast<size_t>(task) % epsilon_per_task.size()];
  }
};

struct UpdateResult {
  PolicyParams params;
  std::vector<double> per_item_loss;  // aligned with the input batch
};

// ---------------------------------------------------------------------------
// HG-DAgger: supervised NLL step on the marginal head over expert-labeled
// frames only (intervention frames and offline demos). Autonomous frames
// contribute bookkeeping losses but no gradient.

inline bool expert_labeled(const TrainItem& item) {
  return item.frame->expert_flag || item.origin == Origin::Offline;
}

inline UpdateResult hgdagger_update(const PolicyParams& params,
                                    std::span<const TrainItem> batch, double lr) {
  if (batch.empty()) throw std::invalid_argument("hgdagger_update: empty batch");

  std::vector<double> losses;
  losses.reserve(batch.size());
  std::vector<GradientItem> grad_batch;
  for (const TrainItem& item : batch) {
    GradientItem gi{item.frame->observation.features,
                    static_cast<int>(item.frame->action), Head::marginal()};
    losses.push_back(item_nll(params, gi));
    if (expert_labeled(item)) grad_batch.push_back(std::move(gi));
  }
  if (grad_batch.empty()) return {params, std::move(losses)};  // no-op update

  auto [loss, grad] = nll_grad(params, grad_batch);
  (void)loss;
  return {sgd_step(params, grad, lr), std::move(losses)};
}

// ---------------------------------------------------------------------------
// Value function: least-squares regression of features onto discounted
// Monte-Carlo returns over the offline demo buffer. Fit once, frozen after.

namespace detail {

/// Solves (X^T X + ridge I) w = X^T y via Gaussian elimination with partial
/// pivoting. Returns false if a pivot collapses.
inline bool solve_normal_equations(std::vector<double>& ata, std::vector<double>& atb,
                                   int n, double ridge) {
  for (int i = 0; i < n; ++i) ata[static_cast<size_t>(i) * n + i] += ridge;
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(ata[static_cast<size_t>(r) * n + col]) >
          std::abs(ata[static_cast<size_t>(pivot) * n + col]))
        pivot = r;
    if (std::abs(ata[static_cast<size_t>(pivot) * n + col]) < 1e-12) return false;
    if (pivot != col) {
      for (int c = 0; c < n; ++c)
        std::swap(ata[static_cast<size_t>(pivot) * n + c],
                  ata[static_cast<size_t>(col) * n + c]);
      std::swap(atb[pivot], atb[col]);
    }
    double inv = 1.0 / ata[static_cast<size_t>(col) * n + col];
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      double factor = ata[static_cast<size_t>(r) * n + col] * inv;
      if (factor == 0.0) continue;
      for (int c = col; c < n; ++c)
        ata[static_cast<size_t>(r) * n + c] -=
            factor * ata[static_cast<size_t>(col) * n + c];
      atb[r] -= factor * atb[col];
    }
  }
  for (int i = 0; i < n; ++i) atb[i] /= ata[static_cast<size_t>(i) * n + i];
  return true;
}

}  // namespace detail

inline std::vector<double> fit_value(std::span<const EpisodeRecord> offline_episodes,
                                     double gamma, int feature_dim) {
  if (gamma <= 0.0 || gamma > 1.0)
    throw std::invalid_argument("fit_value: gamma must be in (0, 1]");
  std::vector<double> ata(static_cast<size_t>(feature_dim) * feature_dim, 0.0);
  std::vector<double> atb(static_cast<size_t>(feature_dim), 0.0);
  size_t samples = 0;
  for (const EpisodeRecord& ep : offline_episodes) {
    double ret = 0.0;
    std::vector<double> returns(ep.frames.size());
    for (size_t t = ep.frames.size(); t-- > 0;) {
      ret = ep.frames[t].reward + gamma * ret;
      returns[t] = ret;
    }
    for (size_t t = 0; t < ep.frames.size(); ++t) {
      const auto& x = ep.frames[t].observation.features;
      if (static_cast<int>(x.size()) != feature_dim)
        throw std::invalid_argument("fit_value: feature length mismatch");
      for (int i = 0; i < feature_dim; ++i) {
        atb[static_cast<size_t>(i)] += x[static_cast<size_t>(i)] * returns[t];
        for (int j = 0; j < feature_dim; ++j)
          ata[static_cast<size_t>(i) * feature_dim + j] +=
              x[static_cast<size_t>(i)] * x[static_cast<size_t>(j)];
      }
      ++samples;
    }
  }
  if (samples == 0) throw std::invalid_argument("fit_value: empty offline buffer");

  auto ata_copy = ata;
  auto weights = atb;
  if (!detail::solve_normal_equations(ata_copy, weights, feature_dim, 0.0)) {
    log_warn("fit_value: degenerate design matrix, falling back to ridge 1e-6");
    ata_copy = ata;
    weights = atb;
    if (!detail::solve_normal_equations(ata_copy, weights, feature_dim, 1e-6))
      throw std::runtime_error("fit_value: ridge fallback failed");
  }
  return weights;
}

// ---------------------------------------------------------------------------
// Advantage indicator: one-step TD advantage against the frozen value
// function. Terminal frames use V(s') = 0.

inline int advantage_indicator(std::span<const double> value_weights,
                               const Frame& frame, const Frame* next_frame,
                               double gamma, double epsilon) {
  auto v = [&](const Observation& obs) {
    if (obs.features.size() != value_weights.size())
      throw std::invalid_argument("advantage_indicator: feature length mismatch");
    return std::inner_product(obs.features.begin(), obs.features.end(),
                              value_weights.begin(), 0.0);
  };
  double v_next = next_frame ? v(next_frame->observation) : 0.0;
  double advantage = frame.reward + gamma * v_next - v(frame.observation);
  return advantage > epsilon ? 1 : 0;
}

/// Stamps every frame of a record in place; the last frame is terminal.
inline void stamp_indicators(EpisodeRecord& rec, std::span<const double> value_weights,
                             double gamma, double epsilon) {
  for (size_t t = 0; t < rec.frames.size(); ++t) {
    const Frame* next = (t + 1 < rec.frames.size()) ? &rec.frames[t + 1] : nullptr;
    rec.frames[t].advantage_indicator = static_cast<int8_t>(
        advantage_indicator(value_weights, rec.frames[t], next, gamma, epsilon));
  }
}

// ---------------------------------------------------------------------------
// RECAP update: one joint NLL step, conditioned head on (features + indicator)
// and marginal head on features, over the same frames. Per-item losses are
// conditioned-head NLLs.

inline UpdateResult recap_update(const PolicyParams& params,
                                 std::span<const TrainItem> batch, double lr) {
  if (batch.empty()) throw std::invalid_argument("recap_update: empty batch");
  std::vector<GradientItem> grad_batch;
  grad_batch.reserve(batch.size() * 2);
  std::vector<double> losses;
  losses.reserve(batch.size());
  for (const TrainItem& item : batch) {
    const Frame& f = *item.frame;
    if (f.advantage_indicator < 0)
      throw std::invalid_argument("recap_update: frame missing advantage indicator");
    GradientItem cond{f.observation.features, static_cast<int>(f.action),
                      Head::conditioned(f.advantage_indicator != 0)};
    losses.push_back(item_nll(params, cond));
    grad_batch.push_back(std::move(cond));
    grad_batch.push_back(GradientItem{f.observation.features,
                                      static_cast<int>(f.action), Head::marginal()});
  }
  auto [loss, grad] = nll_grad(params, grad_batch);
  (void)loss;
  return {sgd_step(params, grad, lr), std::move(losses)};
}

// ---------------------------------------------------------------------------
// RECAP sampling distribution:
//   pi_hat(a|s) ∝ pi_ref(a|s) * (pi_ref(a|I=1,s) / pi_ref(a|s))^beta
//               = marginal^(1-beta) * conditioned^beta
// computed exactly over the discrete action set. Zero-probability actions
// stay outside the support.

inline ActionDistribution recap_sample_dist(const PolicyParams& params,
                                            std::span<const double> features,
                                            double beta) {
  if (beta < 0) throw std::invalid_argument("recap_sample_dist: beta must be >= 0");
  ActionDistribution marginal = forward(params, features, Head::marginal());
  if (beta == 0.0) return marginal;
  ActionDistribution conditioned = forward(params, features, Head::conditioned(true));

  const size_t A = marginal.probs.size();
  constexpr double kExcluded = -std::numeric_limits<double>::infinity();
  std::vector<double> log_w(A, 0.0);
  double max_log = kExcluded;
  for (size_t a = 0; a < A; ++a) {
    double m = marginal.probs[a];
    double c = conditioned.probs[a];
    bool zero = false;
    double lw = 0.0;
    if (beta != 1.0) {  // the marginal term vanishes exactly at beta == 1
      if (m <= 0.0) zero = true; else lw += (1.0 - beta) * std::log(m);
    }
    if (c <= 0.0) zero = true; else lw += beta * std::log(c);
    log_w[a] = zero ? kExcluded : lw;
    max_log = std::max(max_log, log_w[a]);
  }
  if (max_log == kExcluded)
    throw std::runtime_error("recap_sample_dist: empty support");
  std::vector<double> weights(A, 0.0);
  double sum = 0.0;
  for (size_t a = 0; a < A; ++a) {
    weights[a] = log_w[a] == kExcluded ? 0.0 : std::exp(log_w[a] - max_log);
    sum += weights[a];
  }
  for (double& w : weights) w /= sum;
  return ActionDistribution{std::move(weights)};
}

}  // namespace sop
