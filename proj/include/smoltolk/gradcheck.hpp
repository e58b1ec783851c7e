#pragma once

#include <functional>

#include "smoltolk/rng.hpp"
#include "smoltolk/tensor.hpp"

namespace smoltolk {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  i64 checked = 0;
  bool finite = true;

  bool ok(double tol) const { return finite && max_rel_err < tol; }
};

// Central-difference verification of reverse-mode gradients. `loss` must
// rebuild the scalar loss from the current parameter values on every call.
// Intended for S = double; h defaults per the 64-bit verification mode.
template <class S>
GradCheckReport grad_check(const std::function<Tensor<S>()>& loss, std::vector<Tensor<S>> params,
                           i64 min_coords = 200, S h = S(1e-5), u64 seed = 0) {
  GradCheckReport rep;

  Tensor<S> l0 = loss();
  for (auto& p : params) p.zero_grad();
  l0.backward();

  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad_values());

  i64 total = 0;
  for (auto& p : params) total += p.numel();
  if (total == 0) return rep;

  // Sample without replacement across the flattened parameter vector.
  i64 want = std::min<i64>(total, min_coords);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<i64> coords(static_cast<size_t>(total));
  for (i64 i = 0; i < total; ++i) coords[static_cast<size_t>(i)] = i;
  rng.shuffle(coords);
  coords.resize(static_cast<size_t>(want));

  double err_sum = 0.0;
  for (i64 flat : coords) {
    size_t pi = 0;
    i64 off = flat;
    while (off >= params[pi].numel()) {
      off -= params[pi].numel();
      ++pi;
    }
    S* slot = params[pi].data() + off;
    const S orig = *slot;

    *slot = orig + h;
    const S lp = loss().item();
    *slot = orig - h;
    const S lm = loss().item();
    *slot = orig;

    const double numeric = static_cast<double>(lp - lm) / (2.0 * static_cast<double>(h));
    const double exact = static_cast<double>(analytic[pi][static_cast<size_t>(off)]);
    if (!std::isfinite(numeric) || !std::isfinite(exact)) {
      rep.finite = false;
      continue;
    }
    const double denom = std::max(std::abs(numeric), std::abs(exact));
    const double rel = denom < 1e-6 ? 0.0 : std::abs(numeric - exact) / denom;
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
    err_sum += rel;
    ++rep.checked;
  }
  if (rep.checked > 0) rep.mean_rel_err = err_sum / static_cast<double>(rep.checked);
  return rep;
}

}  // namespace smoltolk
