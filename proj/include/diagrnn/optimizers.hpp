#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "diagrnn/errors.hpp"
#include "diagrnn/tensor.hpp"
#include "diagrnn/textio.hpp"

namespace diagrnn {

enum class OptimizerKind { Adam, RmsProp };

inline const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::Adam ? "adam" : "rmsprop";
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "rmsprop") return OptimizerKind::RmsProp;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam|rmsprop)");
}

// Fixed constants: Adam uses its paper defaults, RMSprop the lecture-note
// decay. Only the learning rate (both) and momentum (RMSprop) vary.
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;
inline constexpr double kRmsDecay = 0.9;
inline constexpr double kRmsEps = 1e-8;

namespace detail {

inline void check_aligned(const std::vector<Tensor>& state, const std::vector<Tensor*>& params,
                          const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size())
    throw UsageError("optimizer: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]))
      throw UsageError("optimizer: param " + params[i]->shape() + " vs grad " + grads[i]->shape() +
                       " at index " + std::to_string(i));
    if (!state.empty() && !state[i].same_shape(*params[i]))
      throw UsageError("optimizer: state shape drifted at index " + std::to_string(i));
  }
}

inline void init_like(std::vector<Tensor>& state, const std::vector<Tensor*>& params) {
  if (!state.empty()) return;
  state.reserve(params.size());
  for (const Tensor* p : params) state.emplace_back(p->rows(), p->cols());
}

}  // namespace detail

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  long step_count = 0;
};

// theta <- theta - lr * mhat / (sqrt(vhat) + eps) with bias-corrected moments.
inline void adam_step(AdamState& state, const std::vector<Tensor*>& params,
                      const std::vector<const Tensor*>& grads, double lr) {
  if (lr < 0.0) throw ConfigError("adam: learning rate must be >= 0, got " + fmt_double(lr));
  detail::init_like(state.first_moment, params);
  detail::init_like(state.second_moment, params);
  detail::check_aligned(state.first_moment, params, grads);
  state.step_count += 1;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    for (long k = 0; k < theta.size(); ++k) {
      m[k] = kAdamBeta1 * m[k] + (1.0 - kAdamBeta1) * g[k];
      v[k] = kAdamBeta2 * v[k] + (1.0 - kAdamBeta2) * g[k] * g[k];
      theta[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + kAdamEps);
    }
  }
}

struct RmsPropState {
  std::vector<Tensor> square_avg;
  std::vector<Tensor> momentum_buf;
};

// acc <- 0.9 acc + 0.1 g^2; buf <- momentum*buf + lr*g/(sqrt(acc)+eps);
// theta <- theta - buf. momentum=0 is plain RMSprop.
inline void rmsprop_step(RmsPropState& state, const std::vector<Tensor*>& params,
                         const std::vector<const Tensor*>& grads, double lr, double momentum) {
  if (lr < 0.0) throw ConfigError("rmsprop: learning rate must be >= 0, got " + fmt_double(lr));
  if (!(momentum >= 0.0 && momentum <= 1.0))
    throw ConfigError("rmsprop: momentum must be in [0,1], got " + fmt_double(momentum));
  detail::init_like(state.square_avg, params);
  detail::init_like(state.momentum_buf, params);
  detail::check_aligned(state.square_avg, params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = *params[i];
    const Tensor& g = *grads[i];
    Tensor& acc = state.square_avg[i];
    Tensor& buf = state.momentum_buf[i];
    for (long k = 0; k < theta.size(); ++k) {
      acc[k] = kRmsDecay * acc[k] + (1.0 - kRmsDecay) * g[k] * g[k];
      buf[k] = momentum * buf[k] + lr * g[k] / (std::sqrt(acc[k]) + kRmsEps);
      theta[k] -= buf[k];
    }
  }
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double momentum = 0.0;  // RMSprop only
};

// Owns per-tensor state across steps; one instance per training run.
class Optimizer {
 public:
  explicit Optimizer(const OptimizerConfig& cfg) : cfg_(cfg) {
    if (cfg.learning_rate < 0.0) throw ConfigError("optimizer: learning rate must be >= 0");
    if (!(cfg.momentum >= 0.0 && cfg.momentum <= 1.0))
      throw ConfigError("optimizer: momentum must be in [0,1]");
  }

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (cfg_.kind == OptimizerKind::Adam)
      adam_step(adam_, params, grads, cfg_.learning_rate);
    else
      rmsprop_step(rms_, params, grads, cfg_.learning_rate, cfg_.momentum);
  }

 private:
  OptimizerConfig cfg_;
  AdamState adam_;
  RmsPropState rms_;
};

}  // namespace diagrnn
