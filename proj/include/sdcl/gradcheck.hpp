// Copyright 2026 The SDCL Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sdcl/tensor.hpp"

namespace sdcl {

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  // Parameter tensor holding the worst coordinate (multi-tensor checks only).
  std::size_t worst_tensor = 0;
};

namespace detail {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

inline double checked_item(const Tensor& t, const std::string& op) {
  const double v = t.item();
  if (!std::isfinite(v)) throw NumericError("grad_check(" + op + "): non-finite function value");
  return v;
}

}  // namespace detail

/// Compares the reverse-mode gradient of `fn` at `point` with central
/// differences of step h, coordinate by coordinate.
inline GradCheckReport grad_check(const std::string& op,
                                  const std::function<Tensor(const Tensor&)>& fn,
                                  const Tensor& point, double h = 1e-5) {
  std::vector<double> base(point.values().begin(), point.values().end());
  Tensor leaf(point.shape(), base, true);
  const Tensor loss = fn(leaf);
  detail::checked_item(loss, op);
  backward(loss);
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  GradCheckReport report{op, 0.0, 0, 0};
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = detail::checked_item(fn(Tensor(point.shape(), plus)), op);
    const double fm = detail::checked_item(fn(Tensor(point.shape(), minus)), op);
    const double err = detail::relative_error(analytic[i], (fp - fm) / (2.0 * h));
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_coordinate = i;
    }
  }
  return report;
}

/// Same check over every coordinate of a set of parameter leaves that `fn`
/// reads implicitly. Parameters are restored on return; their grads are
/// zeroed before the analytic pass and left holding it afterwards.
inline GradCheckReport grad_check_params(const std::string& op, const std::function<Tensor()>& fn,
                                         std::vector<Tensor> params, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  const Tensor loss = fn();
  detail::checked_item(loss, op);
  backward(loss);
  GradCheckReport report{op, 0.0, 0, 0};
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::vector<double> analytic(params[t].grad().begin(), params[t].grad().end());
    auto values = params[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double fp = detail::checked_item(fn(), op);
      values[i] = saved - h;
      const double fm = detail::checked_item(fn(), op);
      values[i] = saved;
      const double err = detail::relative_error(analytic[i], (fp - fm) / (2.0 * h));
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_coordinate = i;
        report.worst_tensor = t;
      }
    }
  }
  return report;
}

}  // namespace sdcl
