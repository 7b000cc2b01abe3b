#include "dprune/model.hpp"

#include <cmath>
#include <numeric>

#include "dprune/error.hpp"
#include "dprune/rng.hpp"

namespace dprune {

std::vector<int> tokenize(std::string_view bytes) {
  std::vector<int> ids;
  ids.reserve(bytes.size());
  for (unsigned char b : bytes) ids.push_back(static_cast<int>(b) + kByteOffset);
  return ids;
}

std::string detokenize(std::span<const int> ids, int vocab_size) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= vocab_size) {
      fail(ErrorCode::kIndex, "detokenize: id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(vocab_size));
    }
    if (id >= kByteOffset && id < kByteOffset + 256) out.push_back(static_cast<char>(id - kByteOffset));
  }
  return out;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::kConfig, "invalid model config: " + what);
  };
  require(vocab_size >= kByteOffset + 256, "vocab_size must cover 256 bytes + 3 reserved ids");
  require(d_model >= 1, "d_model must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_ff >= 1, "d_ff must be >= 1");
  require(n_layers >= 1, "n_layers must be >= 1");
  require(max_seq >= 2, "max_seq must be >= 2");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(norm_eps > 0.0, "norm_eps must be > 0");
  require(proj_init_std >= 0.0, "proj_init_std must be >= 0");
}

std::size_t ModelConfig::analytic_param_count() const {
  const std::size_t v = static_cast<std::size_t>(vocab_size);
  const std::size_t d = static_cast<std::size_t>(d_model);
  const std::size_t f = static_cast<std::size_t>(d_ff);
  const std::size_t l = static_cast<std::size_t>(n_layers);
  const std::size_t s = static_cast<std::size_t>(max_seq);
  return v * d + s * d + l * (4 * d * d + 3 * d * f + 2 * d) + d + d * v;
}

// ---------------------------------------------------------------------------
// TransformerModel

namespace {

LayerWeights clone_layer(const LayerWeights& l) {
  return LayerWeights{l.attn_norm.clone(), l.wq.clone(),     l.wk.clone(),
                      l.wv.clone(),        l.wo.clone(),     l.mlp_norm.clone(),
                      l.w_gate.clone(),    l.w_up.clone(),   l.w_down.clone()};
}

Tensor clone_if(const Tensor& t) { return t.defined() ? t.clone() : Tensor(); }

}  // namespace

TransformerModel::TransformerModel(const TransformerModel& other)
    : config(other.config),
      tok_emb(clone_if(other.tok_emb)),
      pos_emb(clone_if(other.pos_emb)),
      final_norm(clone_if(other.final_norm)),
      lm_head(clone_if(other.lm_head)),
      live_channels(other.live_channels),
      live_heads(other.live_heads),
      live_ffn(other.live_ffn) {
  layers.reserve(other.layers.size());
  for (const auto& l : other.layers) layers.push_back(clone_layer(l));
  for (const auto& [name, a] : other.adapters) {
    adapters.emplace(name, LoraAdapter{a.target, a.p.clone(), a.q.clone(), a.rank, a.alpha});
  }
}

TransformerModel& TransformerModel::operator=(const TransformerModel& other) {
  if (this != &other) {
    TransformerModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

int TransformerModel::n_heads(int layer) const {
  return static_cast<int>(layers.at(static_cast<std::size_t>(layer)).wq.dim(0)) / d_head();
}

int TransformerModel::d_ff(int layer) const {
  return static_cast<int>(layers.at(static_cast<std::size_t>(layer)).w_gate.dim(0));
}

std::vector<NamedTensor> TransformerModel::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", tok_emb});
  out.push_back({"pos_emb", pos_emb});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& w = layers[l];
    out.push_back({p + "attn_norm", w.attn_norm});
    out.push_back({p + "wq", w.wq});
    out.push_back({p + "wk", w.wk});
    out.push_back({p + "wv", w.wv});
    out.push_back({p + "wo", w.wo});
    out.push_back({p + "mlp_norm", w.mlp_norm});
    out.push_back({p + "w_gate", w.w_gate});
    out.push_back({p + "w_up", w.w_up});
    out.push_back({p + "w_down", w.w_down});
  }
  out.push_back({"final_norm", final_norm});
  out.push_back({"lm_head", lm_head});
  return out;
}

Tensor TransformerModel::parameter(const std::string& name) const {
  for (auto& nt : parameters()) {
    if (nt.name == name) return nt.tensor;
  }
  fail(ErrorCode::kConfig, "unknown parameter '" + name + "'");
}

bool TransformerModel::has_parameter(const std::string& name) const {
  for (auto& nt : parameters()) {
    if (nt.name == name) return true;
  }
  return false;
}

std::size_t TransformerModel::param_count() const {
  std::size_t n = 0;
  for (const auto& nt : parameters()) n += nt.tensor.numel();
  return n;
}

void TransformerModel::set_requires_grad(bool value) {
  for (auto& nt : parameters()) nt.tensor.set_requires_grad(value);
}

void TransformerModel::zero_grad() {
  for (auto& nt : parameters()) nt.tensor.zero_grad();
  for (auto& [name, a] : adapters) {
    a.p.zero_grad();
    a.q.zero_grad();
  }
}

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  TransformerModel m;
  m.config = config;
  m.config.seed = seed;
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff);
  const auto s = static_cast<std::size_t>(config.max_seq);

  SplitMix64 rng(seed);
  auto normal_std = [&](Shape shape, double std) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& x : t.mutable_data()) x = std * rng.next_normal();
    return t;
  };
  auto normal = [&](Shape shape) { return normal_std(std::move(shape), 0.02); };
  auto proj = [&](Shape shape) {
    const double std = config.proj_init_std > 0.0
                           ? config.proj_init_std
                           : 1.0 / std::sqrt(static_cast<double>(shape.at(1)));
    return normal_std(std::move(shape), std);
  };
  auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0, true); };

  m.tok_emb = normal({v, d});
  m.pos_emb = normal({s, d});
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm = ones(d);
    w.wq = proj({d, d});
    w.wk = proj({d, d});
    w.wv = proj({d, d});
    w.wo = proj({d, d});
    w.mlp_norm = ones(d);
    w.w_gate = proj({f, d});
    w.w_up = proj({f, d});
    w.w_down = proj({d, f});
    m.layers.push_back(std::move(w));
  }
  m.final_norm = ones(d);
  m.lm_head = normal({v, d});

  m.live_channels.resize(d);
  std::iota(m.live_channels.begin(), m.live_channels.end(), 0);
  for (int l = 0; l < config.n_layers; ++l) {
    std::vector<int> heads(static_cast<std::size_t>(config.n_heads));
    std::iota(heads.begin(), heads.end(), 0);
    std::vector<int> ffn(f);
    std::iota(ffn.begin(), ffn.end(), 0);
    m.live_heads.push_back(std::move(heads));
    m.live_ffn.push_back(std::move(ffn));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward

Tensor project(Tape& tape, const TransformerModel& model, const std::string& name,
               const Tensor& x, const Tensor& w) {
  Tensor y = linear(tape, x, w);
  auto it = model.adapters.find(name);
  if (it == model.adapters.end()) return y;
  const LoraAdapter& a = it->second;
  Tensor low = linear(tape, x, a.q);
  Tensor delta = scale(tape, linear(tape, low, a.p), a.scaling());
  return add(tape, y, delta);
}

Tensor embed_tokens(Tape& tape, const TransformerModel& model, std::span<const int> ids) {
  if (ids.empty()) fail(ErrorCode::kLength, "forward: empty sequence");
  if (ids.size() > static_cast<std::size_t>(model.config.max_seq)) {
    fail(ErrorCode::kLength, "forward: sequence of " + std::to_string(ids.size()) +
                                 " exceeds max_seq " + std::to_string(model.config.max_seq));
  }
  std::vector<int> positions(ids.size());
  std::iota(positions.begin(), positions.end(), 0);
  return add(tape, embedding(tape, model.tok_emb, ids), embedding(tape, model.pos_emb, positions));
}

Tensor run_layer(Tape& tape, const TransformerModel& model, int layer, const Tensor& x) {
  const auto& w = model.layers.at(static_cast<std::size_t>(layer));
  const std::string p = "layers." + std::to_string(layer) + ".";
  const double eps = model.config.norm_eps;
  const std::size_t dh = static_cast<std::size_t>(model.d_head());
  const std::size_t heads = w.wq.dim(0) / dh;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor h = rms_norm(tape, x, w.attn_norm, eps);
  Tensor q = project(tape, model, p + "wq", h, w.wq);
  Tensor k = project(tape, model, p + "wk", h, w.wk);
  Tensor v = project(tape, model, p + "wv", h, w.wv);
  std::vector<Tensor> contexts;
  contexts.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Tensor qh = slice_cols(tape, q, hd * dh, dh);
    Tensor kh = slice_cols(tape, k, hd * dh, dh);
    Tensor vh = slice_cols(tape, v, hd * dh, dh);
    Tensor scores = scale(tape, linear(tape, qh, kh), score_scale);
    Tensor probs = softmax(tape, scores, /*causal=*/true);
    contexts.push_back(matmul(tape, probs, vh));
  }
  Tensor ctx = heads == 1 ? contexts.front() : concat_cols(tape, contexts);
  Tensor x1 = add(tape, x, project(tape, model, p + "wo", ctx, w.wo));

  Tensor h2 = rms_norm(tape, x1, w.mlp_norm, eps);
  Tensor g = project(tape, model, p + "w_gate", h2, w.w_gate);
  Tensor u = project(tape, model, p + "w_up", h2, w.w_up);
  Tensor act = swiglu(tape, g, u);
  return add(tape, x1, project(tape, model, p + "w_down", act, w.w_down));
}

Tensor output_logits(Tape& tape, const TransformerModel& model, const Tensor& x) {
  Tensor h = rms_norm(tape, x, model.final_norm, model.config.norm_eps);
  return project(tape, model, "lm_head", h, model.lm_head);
}

Tensor forward(Tape& tape, const TransformerModel& model, std::span<const int> ids) {
  Tensor x = embed_tokens(tape, model, ids);
  for (int l = 0; l < model.n_layers(); ++l) x = run_layer(tape, model, l, x);
  return output_logits(tape, model, x);
}

Tensor next_token_loss(Tape& tape, const TransformerModel& model, std::span<const int> ids) {
  if (ids.size() < 2) fail(ErrorCode::kLength, "next_token_loss: need at least 2 tokens");
  Tensor logits = forward(tape, model, ids.first(ids.size() - 1));
  return cross_entropy(tape, logits, ids.subspan(1));
}

double next_token_loss_value(const TransformerModel& model, std::span<const int> ids) {
  Tape tape(false);
  return next_token_loss(tape, model, ids).item();
}

WindowNll window_nll(const TransformerModel& model, std::span<const int> tokens, int seq_len) {
  if (seq_len < 1 || seq_len > model.config.max_seq) {
    fail(ErrorCode::kConfig, "eval seq_len must be in [1, max_seq]");
  }
  const std::size_t n = static_cast<std::size_t>(seq_len);
  if (tokens.size() < n + 1) {
    fail(ErrorCode::kData, "eval corpus of " + std::to_string(tokens.size()) +
                               " tokens is shorter than seq_len+1 = " + std::to_string(n + 1));
  }
  WindowNll out;
  for (std::size_t off = 0; off + n + 1 <= tokens.size(); off += n) {
    out.total += next_token_loss_value(model, tokens.subspan(off, n + 1)) * static_cast<double>(n);
    out.tokens += n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

std::vector<std::vector<int>> sample_windows(std::span<const int> tokens, int seq_len, int count,
                                             std::uint64_t seed) {
  const std::size_t need = static_cast<std::size_t>(seq_len) + 1;
  if (tokens.empty()) fail(ErrorCode::kData, "empty corpus");
  if (tokens.size() < need) {
    fail(ErrorCode::kData, "corpus of " + std::to_string(tokens.size()) +
                               " tokens is shorter than seq_len+1 = " + std::to_string(need));
  }
  SplitMix64 rng(seed);
  const std::size_t span = tokens.size() - need + 1;
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::size_t off = rng.next_below(span);
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                     tokens.begin() + static_cast<std::ptrdiff_t>(off + need));
  }
  return out;
}

TrainTrace train_base(TransformerModel& model, std::span<const int> corpus,
                      const TrainHyper& hyper) {
  if (corpus.empty()) fail(ErrorCode::kData, "train_base: empty corpus");
  if (hyper.batch < 1) fail(ErrorCode::kConfig, "train_base: batch must be >= 1");
  if (hyper.seq_len < 1 || hyper.seq_len > model.config.max_seq) {
    fail(ErrorCode::kConfig, "train_base: seq_len must be in [1, max_seq]");
  }
  if (corpus.size() < static_cast<std::size_t>(hyper.seq_len) + 1) {
    fail(ErrorCode::kData, "train_base: corpus shorter than seq_len+1 tokens");
  }
  TrainTrace trace;
  if (hyper.steps <= 0) return trace;
  model.set_requires_grad(true);
  auto params = model.parameters();
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
    double factor = step_scale;
    if (hyper.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& nt : params) {
        for (double g : nt.tensor.grad()) sq += g * g;
      }
      const double norm = std::sqrt(sq) / static_cast<double>(hyper.batch);
      if (norm > hyper.clip_norm) factor *= hyper.clip_norm / norm;
    }
    for (auto& nt : params) {
      auto data = nt.tensor.mutable_data();
      auto grad = nt.tensor.grad();
      if (grad.empty()) continue;
      for (std::size_t i = 0; i < data.size(); ++i) data[i] -= factor * grad[i];
    }
    trace.loss.push_back(total / static_cast<double>(hyper.batch));
  }
  model.zero_grad();
  return trace;
}

}  // namespace dprune
