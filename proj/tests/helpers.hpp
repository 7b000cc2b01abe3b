#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dprune/model.hpp"
#include "dprune/rng.hpp"
#include "dprune/tensor.hpp"

namespace dprune::testing {

// Small enough for exhaustive checks, large enough to have every structure.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 259;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 6;
  c.n_layers = 2;
  c.max_seq = 16;
  return c;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = false) {
  SplitMix64 rng(seed);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = lo + (hi - lo) * rng.next_uniform();
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

inline std::vector<int> random_ids(std::size_t n, int vocab, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<int> ids(n);
  for (auto& id : ids) id = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(vocab)));
  return ids;
}

// max_k |a_k - b_k| / max(|a_k|, floor)
inline double max_rel_err(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(a[i]), floor));
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Runs `build` on a recording tape, back-propagates, and compares every
// input's gradient with central differences. Returns the worst relative error.
inline double gradcheck(const std::function<Tensor(Tape&)>& build, std::vector<Tensor> inputs,
                        double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    tape.backward(build(tape));
  }
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor&) {
          Tape probe(false);
          return build(probe).item();
        },
        t, h);
    worst = std::max(worst, max_rel_err(analytic, numeric.data()));
  }
  return worst;
}

}  // namespace dprune::testing
