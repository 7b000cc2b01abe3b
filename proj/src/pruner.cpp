#include "dprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <utility>

#include "dprune/error.hpp"

namespace dprune {

Tensor excise(const Tensor& t, int axis, const std::vector<int>& sorted_indices) {
  const std::size_t rows = t.dim(0);
  const std::size_t cols = t.rank() > 1 ? t.dim(1) : 1;
  const std::size_t n = axis == 0 ? rows : cols;
  std::vector<char> drop(n, 0);
  for (int i : sorted_indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= n) {
      fail(ErrorCode::kPlanStale, "slice index " + std::to_string(i) + " outside live range " +
                                      std::to_string(n));
    }
    drop[static_cast<std::size_t>(i)] = 1;
  }
  auto src = t.data();
  std::vector<double> out;
  out.reserve(src.size());
  std::size_t keep_rows = 0, keep_cols = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (axis == 0 && drop[r]) continue;
    ++keep_rows;
    keep_cols = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (axis == 1 && drop[c]) continue;
      ++keep_cols;
      out.push_back(src[r * cols + c]);
    }
  }
  Shape shape = t.rank() > 1 ? Shape{keep_rows, axis == 1 ? keep_cols : cols} : Shape{keep_rows};
  return Tensor::from(std::move(shape), std::move(out), t.requires_grad());
}

namespace {

void erase_positions(std::vector<int>& live, const std::vector<int>& positions) {
  std::vector<int> kept;
  std::set<int> drop(positions.begin(), positions.end());
  for (std::size_t i = 0; i < live.size(); ++i) {
    if (!drop.count(static_cast<int>(i))) kept.push_back(live[i]);
  }
  live = std::move(kept);
}

Tensor& parameter_ref(TransformerModel& m, const std::string& name) {
  if (name == "tok_emb") return m.tok_emb;
  if (name == "pos_emb") return m.pos_emb;
  if (name == "final_norm") return m.final_norm;
  if (name == "lm_head") return m.lm_head;
  const auto dot1 = name.find('.');
  const auto dot2 = name.find('.', dot1 + 1);
  if (name.rfind("layers.", 0) == 0 && dot2 != std::string::npos) {
    const auto l = static_cast<std::size_t>(std::stoi(name.substr(dot1 + 1, dot2 - dot1 - 1)));
    if (l < m.layers.size()) {
      auto& L = m.layers[l];
      const std::string leaf = name.substr(dot2 + 1);
      if (leaf == "attn_norm") return L.attn_norm;
      if (leaf == "wq") return L.wq;
      if (leaf == "wk") return L.wk;
      if (leaf == "wv") return L.wv;
      if (leaf == "wo") return L.wo;
      if (leaf == "mlp_norm") return L.mlp_norm;
      if (leaf == "w_gate") return L.w_gate;
      if (leaf == "w_up") return L.w_up;
      if (leaf == "w_down") return L.w_down;
    }
  }
  fail(ErrorCode::kPlanStale, "plan refers to unknown parameter '" + name + "'");
}

}  // namespace

TransformerModel apply_plan(const TransformerModel& model, const PrunePlan& plan) {
  if (!model.adapters.empty()) {
    fail(ErrorCode::kContract, "apply_plan: merge or drop adapters before pruning");
  }
  TransformerModel out(model);
  if (plan.selected.empty()) return out;
  if (!(ArchShape::from_model(model) == plan.shape)) {
    fail(ErrorCode::kPlanStale, "plan was built against a different live shape");
  }

  // (tensor, axis) -> indices to drop
  std::map<std::pair<std::string, int>, std::vector<int>> cuts;
  std::map<int, std::vector<int>> heads, ffn;
  std::vector<int> channels;
  std::set<std::size_t> seen;
  for (std::size_t id : plan.selected) {
    if (id >= plan.groups.size()) fail(ErrorCode::kPlanStale, "selected group id out of range");
    if (!seen.insert(id).second) fail(ErrorCode::kContract, "group selected twice");
    const auto& g = plan.groups[id];
    for (const auto& s : g.members) {
      auto& v = cuts[{s.tensor, s.axis}];
      v.insert(v.end(), s.indices.begin(), s.indices.end());
    }
    switch (g.kind) {
      case GroupKind::kAttentionHead: heads[g.layer].push_back(g.index); break;
      case GroupKind::kMlpChannel: ffn[g.layer].push_back(g.index); break;
      case GroupKind::kEmbeddingChannel: channels.push_back(g.index); break;
    }
  }
  for (auto& [key, idx] : cuts) {
    std::sort(idx.begin(), idx.end());
    if (std::adjacent_find(idx.begin(), idx.end()) != idx.end()) {
      fail(ErrorCode::kContract, "overlapping groups on '" + key.first + "'");
    }
    Tensor& t = parameter_ref(out, key.first);
    t = excise(t, key.second, idx);
  }
  for (auto& [l, pos] : heads) {
    auto& live = out.live_heads.at(static_cast<std::size_t>(l));
    if (pos.size() >= live.size()) fail(ErrorCode::kSelection, "plan removes every head of a layer");
    erase_positions(live, pos);
  }
  for (auto& [l, pos] : ffn) {
    auto& live = out.live_ffn.at(static_cast<std::size_t>(l));
    if (pos.size() >= live.size()) {
      fail(ErrorCode::kSelection, "plan removes every MLP channel of a layer");
    }
    erase_positions(live, pos);
  }
  if (!channels.empty()) erase_positions(out.live_channels, channels);
  return out;
}

std::vector<std::string> validate_consistency(const TransformerModel& model) {
  std::vector<std::string> v;
  auto is = [](const Tensor& t, std::size_t r, std::size_t c) {
    return t.defined() && t.rank() == 2 && t.dim(0) == r && t.dim(1) == c;
  };
  auto vec = [](const Tensor& t, std::size_t n) {
    return t.defined() && t.rank() == 1 && t.dim(0) == n;
  };
  const auto& cfg = model.config;
  if (!model.tok_emb.defined() || model.tok_emb.rank() != 2) {
    return {"tok_emb: missing or not a matrix"};
  }
  const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t d = model.tok_emb.dim(1);
  const std::size_t dh = static_cast<std::size_t>(cfg.d_head());
  if (model.tok_emb.dim(0) != V) v.push_back("tok_emb: rows differ from vocab_size");
  if (!is(model.pos_emb, static_cast<std::size_t>(cfg.max_seq), d)) {
    v.push_back("pos_emb: expected [max_seq x d_model]");
  }
  if (model.live_channels.size() != d) v.push_back("live_channels: length differs from d_model");
  if (model.live_heads.size() != model.layers.size() ||
      model.live_ffn.size() != model.layers.size()) {
    v.push_back("live bookkeeping: layer count differs");
  }
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& L = model.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    if (!vec(L.attn_norm, d)) v.push_back(p + "attn_norm: length differs from d_model");
    if (!vec(L.mlp_norm, d)) v.push_back(p + "mlp_norm: length differs from d_model");
    if (!L.wq.defined() || L.wq.rank() != 2 || L.wq.dim(1) != d) {
      v.push_back(p + "wq: expected [heads*d_head x d_model]");
      continue;
    }
    const std::size_t a = L.wq.dim(0);
    if (a == 0 || a % dh != 0) v.push_back(p + "wq: rows not a positive multiple of d_head");
    if (!is(L.wk, a, d)) v.push_back(p + "wk: shape differs from wq");
    if (!is(L.wv, a, d)) v.push_back(p + "wv: shape differs from wq");
    if (!is(L.wo, d, a)) v.push_back(p + "wo: expected [d_model x heads*d_head]");
    if (l < model.live_heads.size() && model.live_heads[l].size() * dh != a) {
      v.push_back(p + "live_heads: count differs from wq rows / d_head");
    }
    if (!L.w_gate.defined() || L.w_gate.rank() != 2 || L.w_gate.dim(1) != d || L.w_gate.dim(0) == 0) {
      v.push_back(p + "w_gate: expected [d_ff x d_model]");
      continue;
    }
    const std::size_t f = L.w_gate.dim(0);
    if (!is(L.w_up, f, d)) v.push_back(p + "w_up: shape differs from w_gate");
    if (!is(L.w_down, d, f)) v.push_back(p + "w_down: expected [d_model x d_ff]");
    if (l < model.live_ffn.size() && model.live_ffn[l].size() != f) {
      v.push_back(p + "live_ffn: count differs from d_ff");
    }
  }
  if (!vec(model.final_norm, d)) v.push_back("final_norm: length differs from d_model");
  if (!is(model.lm_head, V, d)) v.push_back("lm_head: expected [vocab x d_model]");
  for (const auto& [name, a] : model.adapters) {
    if (!model.has_parameter(name)) {
      v.push_back("adapter " + name + ": no such weight");
      continue;
    }
    const Tensor w = model.parameter(name);
    if (!is(a.p, w.dim(0), static_cast<std::size_t>(a.rank)) ||
        !is(a.q, static_cast<std::size_t>(a.rank), w.dim(1))) {
      v.push_back("adapter " + name + ": factor shapes do not match the weight");
    }
  }
  if (!v.empty()) return v;

  try {
    std::vector<int> probe;
    const int n = std::min(cfg.max_seq, 8);
    for (int i = 0; i < n; ++i) probe.push_back(kByteOffset + (i * 37) % (cfg.vocab_size - kByteOffset));
    Tape tape(false);
    Tensor logits = forward(tape, model, probe);
    for (double x : logits.data()) {
      if (!std::isfinite(x)) {
        v.push_back("forward: non-finite logits on probe input");
        break;
      }
    }
  } catch (const std::exception& e) {
    v.push_back(std::string("forward: ") + e.what());
  }
  return v;
}

std::size_t count_macs(const TransformerModel& model, int seq_len) {
  const std::size_t T = static_cast<std::size_t>(seq_len);
  const std::size_t d = static_cast<std::size_t>(model.d_model());
  const std::size_t dh = static_cast<std::size_t>(model.d_head());
  const std::size_t V = model.lm_head.dim(0);
  std::size_t macs = 0;
  for (int l = 0; l < model.n_layers(); ++l) {
    const std::size_t h = static_cast<std::size_t>(model.n_heads(l));
    const std::size_t a = h * dh;
    const std::size_t f = static_cast<std::size_t>(model.d_ff(l));
    macs += 3 * T * d * a;        // q, k, v
    macs += 2 * h * T * T * dh;   // scores and context
    macs += T * a * d;            // output projection
    macs += 3 * T * d * f;        // gate, up, down
  }
  macs += T * d * V;  // lm_head
  return macs;
}

ModelStats count_stats(const TransformerModel& model, int seq_len, std::size_t reference_params) {
  ModelStats s;
  s.seq_len = seq_len;
  s.param_count = model.param_count();
  s.macs = count_macs(model, seq_len);
  s.memory_bytes = s.param_count * sizeof(double);
  if (reference_params > 0) {
    s.achieved_ratio = achieved_ratio(static_cast<double>(reference_params),
                                      static_cast<double>(s.param_count));
  }
  return s;
}

double achieved_ratio(double params_before, double params_after) {
  if (!(params_before > 0.0)) fail(ErrorCode::kContract, "achieved_ratio: empty reference model");
  return (params_before - params_after) / params_before;
}

}  // namespace dprune
