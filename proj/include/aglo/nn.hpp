#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "aglo/tape.hpp"

namespace aglo::nn {

using ad::Mat;
using ad::ParamStore;
using ad::Tape;
using ad::Var;

enum class Activation { none, tanh, relu };

inline Var activate(Var x, Activation act) {
  switch (act) {
    case Activation::tanh: return ad::tanh(x);
    case Activation::relu: return ad::relu(x);
    case Activation::none: break;
  }
  return x;
}

struct Dense {
  std::string weight;
  std::string bias;
};

inline Dense add_dense(ParamStore& store, const std::string& prefix, Eigen::Index in, Eigen::Index out, Rng& rng,
                       double gain = 1.0) {
  store.add_weight(prefix + ".w", out, in, rng, gain);
  store.add_zeros(prefix + ".b", 1, out);
  return Dense{prefix + ".w", prefix + ".b"};
}

inline Var apply(Tape& tape, ParamStore& store, const Dense& layer, Var x) {
  return ad::linear(x, tape.param(store, layer.weight), tape.param(store, layer.bias));
}

/// Stack of dense layers sharing one hidden activation; the last layer's
/// activation is chosen separately.
struct Mlp {
  std::vector<Dense> layers;
  Activation hidden = Activation::tanh;
  Activation output = Activation::none;
};

inline Mlp add_mlp(ParamStore& store, const std::string& prefix, const std::vector<Eigen::Index>& widths, Rng& rng,
                   Activation hidden, Activation output) {
  Mlp mlp{{}, hidden, output};
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    mlp.layers.push_back(add_dense(store, prefix + "." + std::to_string(i), widths[i], widths[i + 1], rng));
  return mlp;
}

inline Var apply(Tape& tape, ParamStore& store, const Mlp& mlp, Var x) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    x = apply(tape, store, mlp.layers[i], x);
    x = activate(x, i + 1 == mlp.layers.size() ? mlp.output : mlp.hidden);
  }
  return x;
}

/// Adam, optionally with the rectified variance term (RAdam).
class AdamOptimizer {
 public:
  struct Settings {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool rectified = false;
    bool sgd_warmup = true;  // RAdam: plain momentum steps while the variance is untractable, else no update
  };

  AdamOptimizer() = default;
  AdamOptimizer(const ParamStore& params, Settings settings) : settings_(settings) {
    for (const auto& [name, p] : params) {
      first_.add_zeros(name, p.value.rows(), p.value.cols());
      second_.add_zeros(name, p.value.rows(), p.value.cols());
    }
  }

  void step(ParamStore& params) {
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double b1 = settings_.beta1, b2 = settings_.beta2;
    const double bias1 = 1.0 - std::pow(b1, t);
    const double bias2 = 1.0 - std::pow(b2, t);
    double rect = 1.0;
    bool adaptive = true;
    if (settings_.rectified) {
      const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
      const double rho_t = rho_inf - 2.0 * t * std::pow(b2, t) / bias2;
      adaptive = rho_t > 5.0;
      if (adaptive)
        rect = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }
    for (auto& [name, p] : params) {
      Mat& m = first_.at(name).value;
      Mat& v = second_.at(name).value;
      m = b1 * m + (1.0 - b1) * p.grad;
      v = b2 * v + (1.0 - b2) * p.grad.cwiseProduct(p.grad);
      if (adaptive) {
        p.value.array() -= settings_.lr * rect * (m.array() / bias1) /
                           ((v.array() / bias2).sqrt() + settings_.eps);
      } else if (settings_.sgd_warmup) {
        p.value.array() -= settings_.lr * (m.array() / bias1);
      }
    }
  }

  long steps() const { return steps_; }
  const ParamStore& first_moment() const { return first_; }
  const ParamStore& second_moment() const { return second_; }
  ParamStore& first_moment() { return first_; }
  ParamStore& second_moment() { return second_; }
  void set_steps(long s) { steps_ = s; }
  const Settings& settings() const { return settings_; }

 private:
  Settings settings_;
  ParamStore first_;
  ParamStore second_;
  long steps_ = 0;
};

/// Rescales the gradient so its global L2 norm is at most `max_norm`.
inline double clip_grad_norm(ParamStore& params, double max_norm) {
  const double norm = params.grad_norm();
  if (max_norm > 0.0 && norm > max_norm) params.scale_grad(max_norm / (norm + 1e-12));
  return norm;
}

/// Rounds every parameter through 32-bit float, the on-disk precision.
inline void round_to_float(ParamStore& params) {
  for (auto& [_, p] : params)
    p.value = p.value.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

}  // namespace aglo::nn
