#include "dprune/recovery.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dprune/error.hpp"
#include "dprune/rng.hpp"

namespace dprune {

std::vector<std::string> linear_projection_names(const TransformerModel& model) {
  std::vector<std::string> out;
  for (int l = 0; l < model.n_layers(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* leaf : {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"}) out.push_back(p + leaf);
  }
  out.push_back("lm_head");
  return out;
}

void attach_lora(TransformerModel& model, int rank, double alpha,
                 const std::vector<std::string>& targets, std::uint64_t seed, bool clamp_rank) {
  const auto valid = linear_projection_names(model);
  const std::vector<std::string>& names = targets.empty() ? valid : targets;
  const std::set<std::string> allowed(valid.begin(), valid.end());
  for (const auto& name : names) {
    if (!allowed.count(name)) fail(ErrorCode::kConfig, "'" + name + "' is not a linear projection");
    if (model.adapters.count(name)) fail(ErrorCode::kConfig, "adapter already attached to '" + name + "'");
  }
  if (!(alpha > 0.0)) fail(ErrorCode::kConfig, "lora alpha must be > 0");
  for (std::size_t t = 0; t < names.size(); ++t) {
    const Tensor w = model.parameter(names[t]);
    const std::size_t d_out = w.dim(0), d_in = w.dim(1);
    const int eff = clamp_rank ? std::min(rank, static_cast<int>(std::min(d_out, d_in))) : rank;
    if (eff < 1 || static_cast<std::size_t>(eff) > std::min(d_out, d_in)) {
      fail(ErrorCode::kConfig, "lora rank " + std::to_string(rank) + " invalid for '" + names[t] +
                                   "' of shape " + shape_to_string(w.shape()));
    }
    const auto r = static_cast<std::size_t>(eff);
    // Per-target stream keyed by position in canonical order.
    SplitMix64 rng(derive_seed(seed, t));
    const double std = 1.0 / std::sqrt(static_cast<double>(d_out));
    std::vector<double> p(d_out * r);
    for (auto& x : p) x = std * rng.next_normal();
    LoraAdapter a;
    a.target = names[t];
    a.p = Tensor::from({d_out, r}, std::move(p));
    a.q = Tensor::zeros({r, d_in});
    a.rank = eff;
    a.alpha = alpha;
    model.adapters.emplace(names[t], std::move(a));
  }
}

std::size_t adapter_param_count(const TransformerModel& model) {
  std::size_t n = 0;
  for (const auto& [name, a] : model.adapters) n += a.p.numel() + a.q.numel();
  return n;
}

namespace {

struct AdapterSnapshot {
  std::vector<std::vector<double>> values;

  static AdapterSnapshot take(const TransformerModel& m) {
    AdapterSnapshot s;
    for (const auto& [name, a] : m.adapters) {
      s.values.emplace_back(a.p.data().begin(), a.p.data().end());
      s.values.emplace_back(a.q.data().begin(), a.q.data().end());
    }
    return s;
  }
  void restore(TransformerModel& m) const {
    std::size_t i = 0;
    for (auto& [name, a] : m.adapters) {
      std::copy(values[i].begin(), values[i].end(), a.p.mutable_data().begin());
      std::copy(values[i + 1].begin(), values[i + 1].end(), a.q.mutable_data().begin());
      i += 2;
    }
  }
};

}  // namespace

LoraTrace train_lora(TransformerModel& model, std::span<const int> corpus, const LoraHyper& hyper,
                     std::span<const int> eval_tokens) {
  if (model.adapters.empty()) fail(ErrorCode::kContract, "train_lora: no adapters attached");
  if (hyper.batch < 1) fail(ErrorCode::kConfig, "train_lora: batch must be >= 1");
  if (hyper.seq_len < 1 || hyper.seq_len > model.config.max_seq) {
    fail(ErrorCode::kConfig, "train_lora: seq_len must be in [1, max_seq]");
  }
  if (corpus.size() < static_cast<std::size_t>(hyper.seq_len) + 1) {
    fail(ErrorCode::kData, "train_lora: corpus shorter than seq_len+1 tokens");
  }
  const bool tracking = hyper.eval_every > 0;
  if (tracking && eval_tokens.empty()) {
    fail(ErrorCode::kData, "train_lora: eval_every set but no eval tokens given");
  }
  LoraTrace trace;
  if (hyper.steps <= 0) return trace;

  model.set_requires_grad(false);
  std::vector<Tensor> factors;
  for (auto& [name, a] : model.adapters) {
    a.p.set_requires_grad(true);
    a.q.set_requires_grad(true);
    factors.push_back(a.p);
    factors.push_back(a.q);
  }

  AdapterSnapshot best;
  double best_loss = 0.0;
  auto evaluate = [&](int step) {
    const double loss = window_nll(model, eval_tokens, hyper.eval_seq_len).mean();
    trace.eval_step.push_back(step);
    trace.eval_loss.push_back(loss);
    if (trace.eval_loss.size() == 1 || loss < best_loss) {
      best_loss = loss;
      trace.best_step = step;
      if (hyper.keep_best) best = AdapterSnapshot::take(model);
    }
  };
  if (tracking) evaluate(0);

  const double step_scale = hyper.lr / static_cast<double>(hyper.batch);
  for (int step = 0; step < hyper.steps; ++step) {
    auto windows = sample_windows(corpus, hyper.seq_len, hyper.batch,
                                  derive_seed(hyper.seed, static_cast<std::uint64_t>(step)));
    model.zero_grad();
    double total = 0.0;
    for (const auto& w : windows) {
      Tape tape;
      Tensor loss = next_token_loss(tape, model, w);
      tape.backward(loss);
      total += loss.item();
    }
    for (auto& f : factors) {
      auto data = f.mutable_data();
      auto grad = f.grad();
      if (grad.empty()) continue;
      for (std::size_t i = 0; i < data.size(); ++i) data[i] -= step_scale * grad[i];
    }
    trace.train_loss.push_back(total / static_cast<double>(hyper.batch));
    const int done = step + 1;
    if (tracking && (done % hyper.eval_every == 0 || done == hyper.steps)) evaluate(done);
  }
  model.zero_grad();
  for (auto& f : factors) f.set_requires_grad(false);
  if (tracking && hyper.keep_best) best.restore(model);
  return trace;
}

void merge_lora(TransformerModel& model) {
  for (auto& [name, a] : model.adapters) {
    Tensor w = model.parameter(name);
    const std::size_t rows = w.dim(0), cols = w.dim(1), r = static_cast<std::size_t>(a.rank);
    const double s = a.scaling();
    auto wd = w.mutable_data();
    auto p = a.p.data();
    auto q = a.q.data();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < r; ++k) acc += p[i * r + k] * q[k * cols + j];
        wd[i * cols + j] += s * acc;
      }
    }
  }
  model.adapters.clear();
}

}  // namespace dprune
