#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmseg/nn.hpp"
#include "cmseg/tensor.hpp"

namespace testutil {

inline cmseg::Tensor random_tensor(cmseg::Shape shape, cmseg::Rng& rng,
                                   double std = 1.0) {
  cmseg::Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, std);
  return t;
}

struct FdReport {
  double max_rel_err = 0.0;
  int checked = 0;
  std::string worst;
};

// Central finite differences on selected coordinates of `param` against the
// analytic gradient already stored in param.grad(). `eval` recomputes the
// scalar loss from current parameter values.
inline FdReport fd_check_param(cmseg::Tensor param,
                               const std::function<double()>& eval,
                               const std::vector<int64_t>& coords,
                               double step = 1e-3) {
  FdReport rep;
  for (int64_t c : coords) {
    const double orig = param.data()[c];
    param.data()[c] = orig + step;
    const double lp = eval();
    param.data()[c] = orig - step;
    const double lm = eval();
    param.data()[c] = orig;
    const double fd = (lp - lm) / (2.0 * step);
    const double an = param.grad()[c];
    const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
    double rel = std::fabs(fd - an) / denom;
    if (std::fabs(fd) < 1e-10 && std::fabs(an) < 1e-10) rel = 0.0;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst = "coord " + std::to_string(c) + " fd=" + std::to_string(fd) +
                  " an=" + std::to_string(an);
    }
    ++rep.checked;
  }
  return rep;
}

// Spread sample coordinates across a tensor deterministically.
inline std::vector<int64_t> sample_coords(int64_t numel, int64_t count,
                                          uint64_t salt = 0) {
  std::vector<int64_t> out;
  if (numel <= count) {
    for (int64_t i = 0; i < numel; ++i) out.push_back(i);
    return out;
  }
  uint64_t state = 0x9e3779b97f4a7c15ull + salt;
  for (int64_t i = 0; i < count; ++i) {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    out.push_back(static_cast<int64_t>(state % static_cast<uint64_t>(numel)));
  }
  return out;
}

}  // namespace testutil
