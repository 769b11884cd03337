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
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdcl/errors.hpp"
#include "sdcl/rng.hpp"

// Exact discrete structural causal model B -> S -> X -> Y with S -> Y, and
// the observational / back-door adjusted conditionals of Y given X.

namespace sdcl::scm {

using Row = std::vector<double>;
using Table = std::vector<Row>;

struct SCMSpec {
  std::vector<std::string> b_vals, s_vals, x_vals, y_vals;
  Row p_b;              // [b]
  Table p_s_given_b;    // [b][s]
  Table p_x_given_s;    // [s][x]
  std::vector<Table> p_y_given_xs;  // [x][s][y]

  std::size_t nb() const { return b_vals.size(); }
  std::size_t ns() const { return s_vals.size(); }
  std::size_t nx() const { return x_vals.size(); }
  std::size_t ny() const { return y_vals.size(); }
};

/// P(y | x) for every x (rows) and y (columns). Rows listed in `missing`
/// were estimated from incomplete strata.
struct DistTable {
  std::vector<std::string> x_vals, y_vals;
  Table prob;  // [x][y]
  std::vector<bool> missing_row;
  std::vector<std::pair<std::size_t, std::size_t>> missing_cells;  // (x, s)

  double at(std::size_t x, std::size_t y) const { return prob.at(x).at(y); }
};

namespace detail {

inline void check_row(const Row& row, std::size_t size, const std::string& what) {
  if (row.size() != size) {
    throw ConfigError(what, "expected " + std::to_string(size) + " entries, got " + std::to_string(row.size()));
  }
  double s = 0.0;
  for (double p : row) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(what, "probability outside [0, 1]");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-12) throw ConfigError(what, "row sums to " + std::to_string(s));
}

inline std::size_t draw(const Row& cdf, Rng& rng) {
  const double u = uniform01(rng);
  for (std::size_t i = 0; i + 1 < cdf.size(); ++i)
    if (u < cdf[i]) return i;
  return cdf.size() - 1;
}

inline Row cumulative(const Row& p) {
  Row c(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) c[i] = (acc += p[i]);
  return c;
}

}  // namespace detail

inline void validate(const SCMSpec& m) {
  if (m.b_vals.empty() || m.s_vals.empty() || m.x_vals.empty() || m.y_vals.empty()) {
    throw ConfigError("scm", "value sets must be nonempty");
  }
  detail::check_row(m.p_b, m.nb(), "P_B");
  if (m.p_s_given_b.size() != m.nb()) throw ConfigError("P_S_given_B", "needs one row per value of B");
  for (std::size_t b = 0; b < m.nb(); ++b) detail::check_row(m.p_s_given_b[b], m.ns(), "P_S_given_B[" + std::to_string(b) + "]");
  if (m.p_x_given_s.size() != m.ns()) throw ConfigError("P_X_given_S", "needs one row per value of S");
  for (std::size_t s = 0; s < m.ns(); ++s) detail::check_row(m.p_x_given_s[s], m.nx(), "P_X_given_S[" + std::to_string(s) + "]");
  if (m.p_y_given_xs.size() != m.nx()) throw ConfigError("P_Y_given_XS", "needs one block per value of X");
  for (std::size_t x = 0; x < m.nx(); ++x) {
    if (m.p_y_given_xs[x].size() != m.ns()) throw ConfigError("P_Y_given_XS", "needs one row per value of S");
    for (std::size_t s = 0; s < m.ns(); ++s) {
      detail::check_row(m.p_y_given_xs[x][s], m.ny(),
                        "P_Y_given_XS[" + std::to_string(x) + "][" + std::to_string(s) + "]");
    }
  }
}

/// P(s) = sum_b P(s|b) P(b).
inline Row style_marginal(const SCMSpec& m) {
  Row p(m.ns(), 0.0);
  for (std::size_t b = 0; b < m.nb(); ++b)
    for (std::size_t s = 0; s < m.ns(); ++s) p[s] += m.p_s_given_b[b][s] * m.p_b[b];
  return p;
}

inline DistTable empty_table(const SCMSpec& m) {
  DistTable t;
  t.x_vals = m.x_vals;
  t.y_vals = m.y_vals;
  t.prob.assign(m.nx(), Row(m.ny(), 0.0));
  t.missing_row.assign(m.nx(), false);
  return t;
}

/// P(Y|X=x) = sum_s P(Y|x,s) P(s|x), with P(s|x) by Bayes' rule.
inline DistTable observational_conditional(const SCMSpec& m) {
  validate(m);
  const Row ps = style_marginal(m);
  DistTable t = empty_table(m);
  for (std::size_t x = 0; x < m.nx(); ++x) {
    double px = 0.0;
    for (std::size_t s = 0; s < m.ns(); ++s) px += m.p_x_given_s[s][x] * ps[s];
    if (px <= 0.0) throw DomainError("P(X=" + m.x_vals[x] + ") is zero; P(Y|X) undefined there");
    for (std::size_t s = 0; s < m.ns(); ++s) {
      const double post = m.p_x_given_s[s][x] * ps[s] / px;
      for (std::size_t y = 0; y < m.ny(); ++y) t.prob[x][y] += m.p_y_given_xs[x][s][y] * post;
    }
  }
  return t;
}

/// P(Y|do(X=x)) = sum_s P(Y|x,s) P(s). Never reads P(X|S).
inline DistTable interventional_distribution(const SCMSpec& m) {
  validate(m);
  const Row ps = style_marginal(m);
  DistTable t = empty_table(m);
  for (std::size_t x = 0; x < m.nx(); ++x)
    for (std::size_t s = 0; s < m.ns(); ++s)
      for (std::size_t y = 0; y < m.ny(); ++y) t.prob[x][y] += m.p_y_given_xs[x][s][y] * ps[s];
  return t;
}

struct Sample {
  std::uint32_t b, s, x, y;
};

/// Ancestral sampling B -> S -> X -> Y.
inline std::vector<Sample> sample_observational(const SCMSpec& m, std::size_t count, std::uint64_t seed) {
  validate(m);
  if (count < 1) throw ConfigError("count", "must be at least 1");
  const Row cb = detail::cumulative(m.p_b);
  Table cs, cx;
  for (const auto& r : m.p_s_given_b) cs.push_back(detail::cumulative(r));
  for (const auto& r : m.p_x_given_s) cx.push_back(detail::cumulative(r));
  std::vector<Table> cy(m.nx());
  for (std::size_t x = 0; x < m.nx(); ++x)
    for (const auto& r : m.p_y_given_xs[x]) cy[x].push_back(detail::cumulative(r));
  Rng rng = make_rng(seed, "scm-samples");
  std::vector<Sample> out(count);
  for (auto& smp : out) {
    const auto b = detail::draw(cb, rng);
    const auto s = detail::draw(cs[b], rng);
    const auto x = detail::draw(cx[s], rng);
    const auto y = detail::draw(cy[x][s], rng);
    smp = {static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(x),
           static_cast<std::uint32_t>(y)};
  }
  return out;
}

/// Stratified back-door estimate from samples: P^(Y|x,s) and P^(s) from
/// counts, combined as sum_s P^(Y|x,s) P^(s). Unobserved (x, s) cells of an
/// observed stratum are listed in missing_cells; such rows are averaged over
/// the observed strata only and flagged in missing_row.
inline DistTable plugin_backdoor_estimator(const SCMSpec& m, std::span<const Sample> samples) {
  if (samples.empty()) throw ContractError("plugin_backdoor_estimator: no samples");
  const std::size_t ns = m.ns(), nx = m.nx(), ny = m.ny();
  std::vector<double> count_s(ns, 0.0), count_xs(nx * ns, 0.0), count_xsy(nx * ns * ny, 0.0);
  for (const auto& smp : samples) {
    count_s[smp.s] += 1.0;
    count_xs[smp.x * ns + smp.s] += 1.0;
    count_xsy[(smp.x * ns + smp.s) * ny + smp.y] += 1.0;
  }
  const double total = static_cast<double>(samples.size());
  DistTable t = empty_table(m);
  for (std::size_t x = 0; x < nx; ++x) {
    double weight = 0.0;
    for (std::size_t s = 0; s < ns; ++s) {
      if (count_s[s] == 0.0) continue;
      const double cell = count_xs[x * ns + s];
      if (cell == 0.0) {
        t.missing_cells.emplace_back(x, s);
        t.missing_row[x] = true;
        continue;
      }
      const double ps = count_s[s] / total;
      weight += ps;
      for (std::size_t y = 0; y < ny; ++y) t.prob[x][y] += count_xsy[(x * ns + s) * ny + y] / cell * ps;
    }
    if (weight > 0.0)
      for (auto& p : t.prob[x]) p /= weight;
  }
  return t;
}

/// Empirical P^(Y|x) without adjustment. Unobserved x rows are flagged.
inline DistTable naive_conditional(const SCMSpec& m, std::span<const Sample> samples) {
  DistTable t = empty_table(m);
  std::vector<double> count_x(m.nx(), 0.0);
  for (const auto& smp : samples) {
    count_x[smp.x] += 1.0;
    t.prob[smp.x][smp.y] += 1.0;
  }
  for (std::size_t x = 0; x < m.nx(); ++x) {
    if (count_x[x] == 0.0) {
      t.missing_row[x] = true;
      continue;
    }
    for (auto& p : t.prob[x]) p /= count_x[x];
  }
  return t;
}

/// Max over rows x of the total-variation distance between P(.|x) rows.
inline double total_variation(const DistTable& a, const DistTable& b) {
  if (a.prob.size() != b.prob.size()) throw ShapeError("total_variation: tables differ in X");
  double worst = 0.0;
  for (std::size_t x = 0; x < a.prob.size(); ++x) {
    if (a.prob[x].size() != b.prob[x].size()) throw ShapeError("total_variation: tables differ in Y");
    double tv = 0.0;
    for (std::size_t y = 0; y < a.prob[x].size(); ++y) tv += std::abs(a.prob[x][y] - b.prob[x][y]);
    worst = std::max(worst, 0.5 * tv);
  }
  return worst;
}

/// Largest |row sum - 1| of a table.
inline double normalization_error(const DistTable& t) {
  double worst = 0.0;
  for (const auto& row : t.prob) {
    double s = 0.0;
    for (double p : row) s += p;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

/// Random valid spec with cardinalities in [2, max_card] and Dirichlet(1)
/// rows.
inline SCMSpec random_scm(std::uint64_t seed, std::size_t max_card = 4) {
  Rng rng = make_rng(seed, "random-scm");
  auto card = [&] { return 2 + static_cast<std::size_t>(uniform_index(rng, max_card - 1)); };
  auto names = [](std::size_t n) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(std::to_string(i));
    return v;
  };
  auto simplex = [&](std::size_t n) {
    Row r(n);
    double s = 0.0;
    for (auto& p : r) s += (p = -std::log(1.0 - uniform01(rng)) + 1e-3);
    for (auto& p : r) p /= s;
    // Fold rounding residue into the largest entry so rows sum to 1 tightly.
    double acc = 0.0;
    for (double p : r) acc += p;
    *std::max_element(r.begin(), r.end()) += 1.0 - acc;
    return r;
  };
  SCMSpec m;
  m.b_vals = names(card());
  m.s_vals = names(card());
  m.x_vals = names(card());
  m.y_vals = names(card());
  m.p_b = simplex(m.nb());
  for (std::size_t b = 0; b < m.nb(); ++b) m.p_s_given_b.push_back(simplex(m.ns()));
  for (std::size_t s = 0; s < m.ns(); ++s) m.p_x_given_s.push_back(simplex(m.nx()));
  m.p_y_given_xs.assign(m.nx(), {});
  for (std::size_t x = 0; x < m.nx(); ++x)
    for (std::size_t s = 0; s < m.ns(); ++s) m.p_y_given_xs[x].push_back(simplex(m.ny()));
  return m;
}

// ---------------------------------------------------------------------------
// JSON

inline std::vector<std::string> value_names(const nlohmann::json& j, const std::string& key) {
  std::vector<std::string> out;
  for (const auto& v : j.at(key)) out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  return out;
}

inline SCMSpec scm_from_json(const nlohmann::json& j) {
  SCMSpec m;
  try {
    m.b_vals = value_names(j, "B_vals");
    m.s_vals = value_names(j, "S_vals");
    m.x_vals = value_names(j, "X_vals");
    m.y_vals = value_names(j, "Y_vals");
    m.p_b = j.at("P_B").get<Row>();
    m.p_s_given_b = j.at("P_S_given_B").get<Table>();
    m.p_x_given_s = j.at("P_X_given_S").get<Table>();
    m.p_y_given_xs = j.at("P_Y_given_XS").get<std::vector<Table>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scm", e.what());
  }
  validate(m);
  return m;
}

inline nlohmann::json to_json(const SCMSpec& m) {
  return {{"B_vals", m.b_vals},           {"S_vals", m.s_vals},           {"X_vals", m.x_vals},
          {"Y_vals", m.y_vals},           {"P_B", m.p_b},                 {"P_S_given_B", m.p_s_given_b},
          {"P_X_given_S", m.p_x_given_s}, {"P_Y_given_XS", m.p_y_given_xs}};
}

}  // namespace sdcl::scm
