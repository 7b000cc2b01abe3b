#include "dprune/depgraph.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <set>

#include "dprune/error.hpp"

namespace dprune {

ArchShape ArchShape::from_config(const ModelConfig& config) {
  config.validate();
  ArchShape s;
  s.vocab_size = config.vocab_size;
  s.max_seq = config.max_seq;
  s.d_model = config.d_model;
  s.d_head = config.d_head();
  s.heads.assign(static_cast<std::size_t>(config.n_layers), config.n_heads);
  s.d_ff.assign(static_cast<std::size_t>(config.n_layers), config.d_ff);
  return s;
}

ArchShape ArchShape::from_model(const TransformerModel& model) {
  ArchShape s;
  s.vocab_size = model.config.vocab_size;
  s.max_seq = model.config.max_seq;
  s.d_model = model.d_model();
  s.d_head = model.d_head();
  for (int l = 0; l < model.n_layers(); ++l) {
    s.heads.push_back(model.n_heads(l));
    s.d_ff.push_back(model.d_ff(l));
  }
  return s;
}

std::size_t ArchShape::param_count() const {
  const std::size_t v = static_cast<std::size_t>(vocab_size);
  const std::size_t d = static_cast<std::size_t>(d_model);
  std::size_t n = v * d + static_cast<std::size_t>(max_seq) * d + d + d * v;
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const std::size_t a = static_cast<std::size_t>(heads[l] * d_head);
    const std::size_t f = static_cast<std::size_t>(d_ff[l]);
    n += 4 * a * d + 3 * d * f + 2 * d;
  }
  return n;
}

const char* site_name(Site site) {
  switch (site) {
    case Site::kEmbeddingChannel: return "embedding-channel";
    case Site::kAttnNormChannel: return "attn-norm-channel";
    case Site::kAttnInputChannel: return "attn-input-channel";
    case Site::kQOutputChannel: return "q-output-channel";
    case Site::kKOutputChannel: return "k-output-channel";
    case Site::kVOutputChannel: return "v-output-channel";
    case Site::kAttentionHead: return "attention-head";
    case Site::kOInputChannel: return "o-input-channel";
    case Site::kAttnOutputChannel: return "attn-output-channel";
    case Site::kMlpNormChannel: return "mlp-norm-channel";
    case Site::kMlpInputChannel: return "mlp-input-channel";
    case Site::kGateOutputChannel: return "gate-output-channel";
    case Site::kUpOutputChannel: return "up-output-channel";
    case Site::kMlpHiddenChannel: return "mlp-hidden-channel";
    case Site::kMlpOutputChannel: return "mlp-output-channel";
    case Site::kFinalNormChannel: return "final-norm-channel";
    case Site::kLmHeadInputChannel: return "lm-head-input-channel";
  }
  return "unknown";
}

const char* group_kind_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::kAttentionHead: return "attention_head";
    case GroupKind::kMlpChannel: return "mlp_channel";
    case GroupKind::kEmbeddingChannel: return "embedding_channel";
  }
  return "unknown";
}

const char* prune_unit_name(PruneUnit unit) {
  return unit == PruneUnit::kBlock ? "block" : "channel";
}

// ---------------------------------------------------------------------------
// NeuronGraph

namespace {

constexpr std::size_t kSiteCount = static_cast<std::size_t>(Site::kLmHeadInputChannel) + 1;

bool is_global(Site s) {
  return s == Site::kEmbeddingChannel || s == Site::kFinalNormChannel ||
         s == Site::kLmHeadInputChannel;
}

int site_width(Site s, int layer, const ArchShape& shape) {
  const auto l = static_cast<std::size_t>(layer < 0 ? 0 : layer);
  switch (s) {
    case Site::kQOutputChannel:
    case Site::kKOutputChannel:
    case Site::kVOutputChannel:
    case Site::kOInputChannel: return shape.heads.at(l) * shape.d_head;
    case Site::kAttentionHead: return shape.heads.at(l);
    case Site::kGateOutputChannel:
    case Site::kUpOutputChannel:
    case Site::kMlpHiddenChannel: return shape.d_ff.at(l);
    default: return shape.d_model;
  }
}

}  // namespace

NeuronGraph::NeuronGraph(ArchShape shape) : shape_(std::move(shape)) {
  const int layers = shape_.n_layers();
  base_.assign(kSiteCount, std::vector<std::size_t>(static_cast<std::size_t>(layers) + 1, 0));
  const int d = shape_.d_model;
  const int dh = shape_.d_head;

  const std::size_t emb = add(Site::kEmbeddingChannel, -1, d);
  for (int l = 0; l < layers; ++l) {
    const int heads = shape_.heads[static_cast<std::size_t>(l)];
    const int attn = heads * dh;
    const int ff = shape_.d_ff[static_cast<std::size_t>(l)];
    const std::size_t an = add(Site::kAttnNormChannel, l, d);
    const std::size_t ai = add(Site::kAttnInputChannel, l, d);
    const std::size_t qo = add(Site::kQOutputChannel, l, attn);
    const std::size_t ko = add(Site::kKOutputChannel, l, attn);
    const std::size_t vo = add(Site::kVOutputChannel, l, attn);
    const std::size_t hd = add(Site::kAttentionHead, l, heads);
    const std::size_t oi = add(Site::kOInputChannel, l, attn);
    const std::size_t ao = add(Site::kAttnOutputChannel, l, d);
    const std::size_t mn = add(Site::kMlpNormChannel, l, d);
    const std::size_t mi = add(Site::kMlpInputChannel, l, d);
    const std::size_t go = add(Site::kGateOutputChannel, l, ff);
    const std::size_t uo = add(Site::kUpOutputChannel, l, ff);
    const std::size_t mh = add(Site::kMlpHiddenChannel, l, ff);
    const std::size_t mo = add(Site::kMlpOutputChannel, l, d);

    for (int c = 0; c < d; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      connect(emb + uc, an + uc);  // residual read, elementwise norm scale
      connect(an + uc, ai + uc);
      connect(ao + uc, emb + uc);  // residual write
      connect(emb + uc, mn + uc);
      connect(mn + uc, mi + uc);
      connect(mo + uc, emb + uc);
    }
    for (int c = 0; c < attn; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      const auto head = static_cast<std::size_t>(c / dh);
      connect(qo + uc, hd + head);  // head view of the projection output
      connect(ko + uc, hd + head);
      connect(vo + uc, hd + head);
      connect(hd + head, oi + uc);  // concatenated context feeds Wo
    }
    for (int j = 0; j < ff; ++j) {
      const auto uj = static_cast<std::size_t>(j);
      connect(go + uj, mh + uj);  // silu(gate) * up
      connect(uo + uj, mh + uj);
    }
  }
  const std::size_t fn = add(Site::kFinalNormChannel, -1, d);
  const std::size_t li = add(Site::kLmHeadInputChannel, -1, d);
  for (int c = 0; c < d; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    connect(emb + uc, fn + uc);
    connect(fn + uc, li + uc);
  }
}

std::size_t NeuronGraph::add(Site site, int layer, int count) {
  const std::size_t base = neurons_.size();
  base_[static_cast<std::size_t>(site)][static_cast<std::size_t>(layer < 0 ? 0 : layer)] = base;
  for (int i = 0; i < count; ++i) neurons_.push_back(Neuron{site, layer, i});
  out_.resize(neurons_.size());
  in_.resize(neurons_.size());
  return base;
}

void NeuronGraph::connect(std::size_t from, std::size_t to) {
  out_[from].push_back(to);
  in_[to].push_back(from);
  ++edges_;
}

bool NeuronGraph::contains(const Neuron& n) const {
  if (is_global(n.site) ? n.layer != -1 : (n.layer < 0 || n.layer >= shape_.n_layers())) {
    return false;
  }
  return n.index >= 0 && n.index < site_width(n.site, n.layer, shape_);
}

std::size_t NeuronGraph::id_of(const Neuron& n) const {
  if (!contains(n)) {
    fail(ErrorCode::kIndex, std::string("neuron (") + site_name(n.site) + ", layer " +
                                std::to_string(n.layer) + ", index " + std::to_string(n.index) +
                                ") is not part of the graph");
  }
  const auto layer = static_cast<std::size_t>(n.layer < 0 ? 0 : n.layer);
  return base_[static_cast<std::size_t>(n.site)][layer] + static_cast<std::size_t>(n.index);
}

std::size_t NeuronGraph::expected_neuron_count(const ArchShape& shape) {
  const std::size_t d = static_cast<std::size_t>(shape.d_model);
  std::size_t n = 3 * d;
  for (std::size_t l = 0; l < shape.heads.size(); ++l) {
    const std::size_t h = static_cast<std::size_t>(shape.heads[l]);
    const std::size_t a = h * static_cast<std::size_t>(shape.d_head);
    n += 6 * d + 4 * a + h + 3 * static_cast<std::size_t>(shape.d_ff[l]);
  }
  return n;
}

NeuronGraph build_graph(const ModelConfig& config) {
  return NeuronGraph(ArchShape::from_config(config));
}

NeuronGraph build_graph(const ArchShape& shape) { return NeuronGraph(shape); }

// ---------------------------------------------------------------------------
// Groups

namespace {

std::string layer_name(int layer, const char* tensor) {
  return "layers." + std::to_string(layer) + "." + tensor;
}

// Weight slices a neuron owns: (tensor, axis).
std::vector<std::pair<std::string, int>> owned_slices(const Neuron& n) {
  const int l = n.layer;
  switch (n.site) {
    case Site::kEmbeddingChannel: return {{"tok_emb", 1}, {"pos_emb", 1}};
    case Site::kAttnNormChannel: return {{layer_name(l, "attn_norm"), 0}};
    case Site::kAttnInputChannel:
      return {{layer_name(l, "wq"), 1}, {layer_name(l, "wk"), 1}, {layer_name(l, "wv"), 1}};
    case Site::kQOutputChannel: return {{layer_name(l, "wq"), 0}};
    case Site::kKOutputChannel: return {{layer_name(l, "wk"), 0}};
    case Site::kVOutputChannel: return {{layer_name(l, "wv"), 0}};
    case Site::kAttentionHead: return {};
    case Site::kOInputChannel: return {{layer_name(l, "wo"), 1}};
    case Site::kAttnOutputChannel: return {{layer_name(l, "wo"), 0}};
    case Site::kMlpNormChannel: return {{layer_name(l, "mlp_norm"), 0}};
    case Site::kMlpInputChannel: return {{layer_name(l, "w_gate"), 1}, {layer_name(l, "w_up"), 1}};
    case Site::kGateOutputChannel: return {{layer_name(l, "w_gate"), 0}};
    case Site::kUpOutputChannel: return {{layer_name(l, "w_up"), 0}};
    case Site::kMlpHiddenChannel: return {{layer_name(l, "w_down"), 1}};
    case Site::kMlpOutputChannel: return {{layer_name(l, "w_down"), 0}};
    case Site::kFinalNormChannel: return {{"final_norm", 0}};
    case Site::kLmHeadInputChannel: return {{"lm_head", 1}};
  }
  return {};
}

// Position of a tensor in execution order.
int execution_rank(const std::string& name) {
  static const std::vector<std::string> kLayerOrder = {
      "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"};
  if (name == "tok_emb") return 0;
  if (name == "pos_emb") return 1;
  if (name == "final_norm") return 1 << 20;
  if (name == "lm_head") return (1 << 20) + 1;
  const auto dot1 = name.find('.');
  const auto dot2 = name.find('.', dot1 + 1);
  const int layer = std::stoi(name.substr(dot1 + 1, dot2 - dot1 - 1));
  const std::string leaf = name.substr(dot2 + 1);
  const auto it = std::find(kLayerOrder.begin(), kLayerOrder.end(), leaf);
  return 2 + layer * 16 + static_cast<int>(it - kLayerOrder.begin());
}

DependencyGroup make_group(const NeuronGraph& graph, std::vector<std::size_t> ids) {
  DependencyGroup g;
  std::map<std::pair<std::string, int>, std::set<int>> slices;
  bool head = false, hidden = false, embedding = false;
  for (auto id : ids) {
    const Neuron& n = graph.neuron(id);
    g.neurons.push_back(n);
    for (auto& [tensor, axis] : owned_slices(n)) slices[{tensor, axis}].insert(n.index);
    if (n.site == Site::kAttentionHead) {
      head = true;
      g.layer = n.layer;
      g.index = n.index;
    } else if (n.site == Site::kMlpHiddenChannel) {
      hidden = true;
      g.layer = n.layer;
      g.index = n.index;
    } else if (n.site == Site::kEmbeddingChannel) {
      embedding = true;
      g.index = n.index;
    }
  }
  std::sort(g.neurons.begin(), g.neurons.end());
  if (static_cast<int>(head) + static_cast<int>(hidden) + static_cast<int>(embedding) != 1) {
    fail(ErrorCode::kContract, "dependency closure does not match a known structure");
  }
  g.kind = head ? GroupKind::kAttentionHead
                : (hidden ? GroupKind::kMlpChannel : GroupKind::kEmbeddingChannel);
  if (embedding) g.layer = -1;
  for (auto& [key, idx] : slices) {
    g.members.push_back(Slice{key.first, key.second, std::vector<int>(idx.begin(), idx.end())});
  }
  std::stable_sort(g.members.begin(), g.members.end(), [](const Slice& a, const Slice& b) {
    return std::pair(execution_rank(a.tensor), a.axis) < std::pair(execution_rank(b.tensor), b.axis);
  });
  return g;
}

}  // namespace

DependencyGroup trigger(const NeuronGraph& graph, const Neuron& seed) {
  const std::size_t start = graph.id_of(seed);
  std::vector<char> seen(graph.size(), 0);
  std::deque<std::size_t> queue{start};
  std::vector<std::size_t> found{start};
  seen[start] = 1;
  auto activate = [&](std::size_t id) {
    if (!seen[id]) {
      seen[id] = 1;
      found.push_back(id);
      queue.push_back(id);
    }
  };
  while (!queue.empty()) {
    const std::size_t cur = queue.front();
    queue.pop_front();
    // Out-neighbors fed only by cur depend on it; so do in-neighbors feeding
    // only cur.
    for (auto j : graph.out_edges(cur)) {
      if (graph.in_degree(j) == 1) activate(j);
    }
    for (auto i : graph.in_edges(cur)) {
      if (graph.out_degree(i) == 1) activate(i);
    }
    // The same two relations read from the dependent side: cur hangs off a
    // single producer or a single consumer.
    if (graph.in_degree(cur) == 1) activate(graph.in_edges(cur).front());
    if (graph.out_degree(cur) == 1) activate(graph.out_edges(cur).front());
  }
  return make_group(graph, std::move(found));
}

std::vector<DependencyGroup> discover_groups(const NeuronGraph& graph, PruneUnit unit) {
  std::vector<DependencyGroup> groups;
  std::set<std::vector<Slice>> keys;
  std::vector<char> covered(graph.size(), 0);
  for (std::size_t id = 0; id < graph.size(); ++id) {
    if (covered[id]) continue;
    DependencyGroup g = trigger(graph, graph.neuron(id));
    for (const auto& n : g.neurons) covered[graph.id_of(n)] = 1;
    const bool block = g.kind != GroupKind::kEmbeddingChannel;
    if (block != (unit == PruneUnit::kBlock)) continue;
    if (keys.insert(g.members).second) groups.push_back(std::move(g));
  }
  std::sort(groups.begin(), groups.end(), [](const DependencyGroup& a, const DependencyGroup& b) {
    return std::tuple(a.layer, static_cast<int>(a.kind), a.index) <
           std::tuple(b.layer, static_cast<int>(b.kind), b.index);
  });
  return groups;
}

std::pair<std::size_t, std::size_t> tensor_dims(const std::string& name, const ArchShape& shape) {
  const auto v = static_cast<std::size_t>(shape.vocab_size);
  const auto d = static_cast<std::size_t>(shape.d_model);
  if (name == "tok_emb" || name == "lm_head") return {v, d};
  if (name == "pos_emb") return {static_cast<std::size_t>(shape.max_seq), d};
  if (name == "final_norm") return {d, 1};
  const auto dot1 = name.find('.');
  const auto dot2 = name.find('.', dot1 + 1);
  if (name.rfind("layers.", 0) != 0 || dot2 == std::string::npos) {
    fail(ErrorCode::kConfig, "unknown parameter '" + name + "'");
  }
  const auto layer = static_cast<std::size_t>(std::stoi(name.substr(dot1 + 1, dot2 - dot1 - 1)));
  if (layer >= shape.heads.size()) fail(ErrorCode::kConfig, "unknown parameter '" + name + "'");
  const std::string leaf = name.substr(dot2 + 1);
  const auto a = static_cast<std::size_t>(shape.heads[layer] * shape.d_head);
  const auto f = static_cast<std::size_t>(shape.d_ff[layer]);
  if (leaf == "attn_norm" || leaf == "mlp_norm") return {d, 1};
  if (leaf == "wq" || leaf == "wk" || leaf == "wv") return {a, d};
  if (leaf == "wo") return {d, a};
  if (leaf == "w_gate" || leaf == "w_up") return {f, d};
  if (leaf == "w_down") return {d, f};
  fail(ErrorCode::kConfig, "unknown parameter '" + name + "'");
}

std::size_t slice_param_count(const Slice& slice, const ArchShape& shape) {
  const auto [rows, cols] = tensor_dims(slice.tensor, shape);
  const std::size_t per = slice.axis == 0 ? cols : rows;
  return per * slice.indices.size();
}

std::size_t group_param_delta(const DependencyGroup& group, const ArchShape& shape) {
  std::size_t n = 0;
  for (const auto& s : group.members) n += slice_param_count(s, shape);
  return n;
}

}  // namespace dprune
