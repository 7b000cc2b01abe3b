#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dprune/model.hpp"

namespace dprune {

// Live dimensions of a (possibly already pruned) model. Groups are always
// discovered against live sizes, and indices in slices are live positions.
struct ArchShape {
  int vocab_size = 0;
  int max_seq = 0;
  int d_model = 0;
  int d_head = 0;
  std::vector<int> heads;  // per layer
  std::vector<int> d_ff;   // per layer

  static ArchShape from_config(const ModelConfig& config);
  static ArchShape from_model(const TransformerModel& model);
  int n_layers() const { return static_cast<int>(heads.size()); }
  std::size_t param_count() const;
  bool operator==(const ArchShape&) const = default;
};

enum class Site {
  kEmbeddingChannel,  // residual stream channel; owns embedding columns
  kAttnNormChannel,
  kAttnInputChannel,  // input column of Wq/Wk/Wv
  kQOutputChannel,
  kKOutputChannel,
  kVOutputChannel,
  kAttentionHead,
  kOInputChannel,     // input column of Wo
  kAttnOutputChannel,  // output row of Wo
  kMlpNormChannel,
  kMlpInputChannel,   // input column of W_gate/W_up
  kGateOutputChannel,
  kUpOutputChannel,
  kMlpHiddenChannel,  // SwiGLU output; input column of W_down
  kMlpOutputChannel,  // output row of W_down
  kFinalNormChannel,
  kLmHeadInputChannel,
};

const char* site_name(Site site);

struct Neuron {
  Site site;
  int layer = -1;  // -1 for sites outside the decoder layers
  int index = 0;
  bool operator==(const Neuron&) const = default;
  auto operator<=>(const Neuron&) const = default;
};

// Directed neuron-level connectivity. Only index-preserving couplings are
// edges (elementwise scaling, residual identity, head reshape, SwiGLU
// product); dense projections connect every input to every output and are
// represented by weight-slice ownership instead.
class NeuronGraph {
 public:
  explicit NeuronGraph(ArchShape shape);

  const ArchShape& shape() const { return shape_; }
  std::size_t size() const { return neurons_.size(); }
  const Neuron& neuron(std::size_t id) const { return neurons_.at(id); }
  std::size_t id_of(const Neuron& n) const;
  bool contains(const Neuron& n) const;

  const std::vector<std::size_t>& out_edges(std::size_t id) const { return out_.at(id); }
  const std::vector<std::size_t>& in_edges(std::size_t id) const { return in_.at(id); }
  std::size_t in_degree(std::size_t id) const { return in_.at(id).size(); }
  std::size_t out_degree(std::size_t id) const { return out_.at(id).size(); }
  std::size_t edge_count() const { return edges_; }

  // Closed form of size() for a shape.
  static std::size_t expected_neuron_count(const ArchShape& shape);

 private:
  std::size_t add(Site site, int layer, int count);
  void connect(std::size_t from, std::size_t to);

  ArchShape shape_;
  std::vector<Neuron> neurons_;
  std::vector<std::vector<std::size_t>> out_;
  std::vector<std::vector<std::size_t>> in_;
  // Base id of each (site, layer) block; neurons of a block are contiguous.
  std::vector<std::vector<std::size_t>> base_;
  std::size_t edges_ = 0;
};

NeuronGraph build_graph(const ModelConfig& config);
NeuronGraph build_graph(const ArchShape& shape);

// A set of coupled indices along one axis of one parameter tensor.
struct Slice {
  std::string tensor;
  int axis = 0;  // 0 = rows (output channels), 1 = columns (input channels)
  std::vector<int> indices;  // sorted, live positions
  bool operator==(const Slice&) const = default;
  auto operator<=>(const Slice&) const = default;
};

enum class GroupKind { kAttentionHead, kMlpChannel, kEmbeddingChannel };
enum class PruneUnit { kBlock, kChannel };

const char* group_kind_name(GroupKind kind);
const char* prune_unit_name(PruneUnit unit);

struct DependencyGroup {
  GroupKind kind;
  int layer = -1;  // -1 for embedding-channel groups
  int index = 0;   // head / hidden channel / embedding channel (live position)
  std::vector<Neuron> neurons;  // sorted
  // In execution order; the last entry is the last executing structure.
  std::vector<Slice> members;

  const Slice& last_member() const { return members.back(); }
  bool operator==(const DependencyGroup& o) const { return members == o.members; }
};

// Breadth-first closure from a seed under the two degree rules: an
// out-neighbor with in-degree 1 and an in-neighbor with out-degree 1 are
// dependent. A dependency edge couples both endpoints, so the closure is the
// same whichever member seeds it.
DependencyGroup trigger(const NeuronGraph& graph, const Neuron& seed);

std::vector<DependencyGroup> discover_groups(const NeuronGraph& graph, PruneUnit unit);

// Scalar parameters removed by pruning the group, at live sizes.
std::size_t group_param_delta(const DependencyGroup& group, const ArchShape& shape);

// Number of scalars a slice covers in a tensor of the given live shape.
std::size_t slice_param_count(const Slice& slice, const ArchShape& shape);
// Live [rows, cols] of a named parameter (norms and other vectors report cols = 1).
std::pair<std::size_t, std::size_t> tensor_dims(const std::string& name, const ArchShape& shape);

}  // namespace dprune
