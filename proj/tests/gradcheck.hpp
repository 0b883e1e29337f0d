#pragma once

// Central finite-difference oracle for tape-built losses. Independent of the
// backward closures: it only ever evaluates forward values.

#include <algorithm>
#include <cmath>
#include <functional>

#include "aglo/tape.hpp"

namespace aglo::testing {

struct GradientComparison {
  double max_abs_diff = 0.0;
  double max_abs_grad = 0.0;
  double relative() const { return max_abs_diff / std::max(max_abs_grad, 1e-300); }
};

/// Analytic gradient from the tape vs central differences with step h.
/// Relative error is the largest entrywise discrepancy divided by the largest
/// gradient magnitude (infinity-norm relative error).
inline GradientComparison compare_gradients(ad::ParamStore& store, const std::function<ad::Var(ad::Tape&)>& loss,
                                            double h = 1e-5) {
  store.zero_grad();
  {
    ad::Tape tape;
    tape.backward(loss(tape));
  }
  GradientComparison out;
  for (auto& [name, p] : store) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      p.value.data()[i] = orig + h;
      double up, down;
      {
        ad::Tape t;
        up = loss(t).scalar();
      }
      p.value.data()[i] = orig - h;
      {
        ad::Tape t;
        down = loss(t).scalar();
      }
      p.value.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad.data()[i];
      out.max_abs_diff = std::max(out.max_abs_diff, std::abs(numeric - analytic));
      out.max_abs_grad = std::max({out.max_abs_grad, std::abs(analytic), std::abs(numeric)});
    }
  }
  return out;
}

inline double gradient_error(ad::ParamStore& store, const std::function<ad::Var(ad::Tape&)>& loss, double h = 1e-5) {
  return compare_gradients(store, loss, h).relative();
}

}  // namespace aglo::testing
