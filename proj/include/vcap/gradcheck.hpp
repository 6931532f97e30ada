#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "vcap/tape.hpp"
#include "vcap/tensor.hpp"

namespace vcap {

struct GradCheckOptions {
  std::size_t probes = 100;  // per tensor; small tensors are checked exhaustively
  double step = 1e-3;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error instead.
  double floor = 1e-2;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string param;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  GradCheckEntry worst{};
};

/// Compare tape gradients with central differences (f(x+h) - f(x-h)) / 2h.
/// `forward(tape)` must build a scalar loss from `params` deterministically.
template <class Forward>
GradCheckReport grad_check(ParameterStore<double>& params, Forward&& forward,
                           const GradCheckOptions& opt = {}) {
  params.zero_grad();
  {
    Tape<double> tape;
    auto loss = forward(tape);
    tape.backward(loss);
  }
  std::mt19937_64 rng(opt.seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.probes) {
      std::vector<std::size_t> picked;
      std::sample(coords.begin(), coords.end(), std::back_inserter(picked), opt.probes, rng);
      coords = std::move(picked);
    }
    for (auto c : coords) {
      const double saved = p.value.data[c];
      p.value.data[c] = saved + opt.step;
      double fp, fm;
      {
        Tape<double> t(false);
        fp = forward(t).scalar();
      }
      p.value.data[c] = saved - opt.step;
      {
        Tape<double> t(false);
        fm = forward(t).scalar();
      }
      p.value.data[c] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double analytic = p.grad.data[c];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) report.worst = {p.name, c, analytic, numeric, rel};
      }
    }
  }
  params.zero_grad();
  return report;
}

}  // namespace vcap
