#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dprune/tensor.hpp"

namespace dprune {

// Reserved token ids; byte b maps to b + kByteOffset.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kByteOffset = 3;

std::vector<int> tokenize(std::string_view bytes);
// Reserved ids produce no bytes. Throws an index error for ids >= vocab_size.
std::string detokenize(std::span<const int> ids, int vocab_size = 259);

struct ModelConfig {
  int vocab_size = 259;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 172;
  int n_layers = 4;
  int max_seq = 128;
  double norm_eps = 1e-5;
  // Std of the decoder projection init; 0 means 1/sqrt(fan_in). Embeddings
  // and lm_head always use 0.02.
  double proj_init_std = 0.0;
  std::uint64_t seed = 0;

  int d_head() const { return d_model / n_heads; }
  // Throws a config error naming the first violated constraint.
  void validate() const;
  // vocab*d + max_seq*d + L*(4d^2 + 3d*d_ff + 2d) + d + d*vocab
  std::size_t analytic_param_count() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv;  // [heads*d_head x d]
  Tensor wo;          // [d x heads*d_head]
  Tensor mlp_norm;    // [d]
  Tensor w_gate, w_up;  // [d_ff x d]
  Tensor w_down;        // [d x d_ff]
};

// Low-rank update for one linear projection: delta_W = (alpha / rank) * P * Q.
struct LoraAdapter {
  std::string target;
  Tensor p;  // [d_out x rank]
  Tensor q;  // [rank x d_in]
  int rank = 0;
  double alpha = 0.0;

  double scaling() const { return alpha / static_cast<double>(rank); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Pre-norm decoder-only transformer without bias terms. Weight matrices are
// stored output-major ([out x in]) so "row" means output channel and
// "column" means input channel throughout the pruning code.
//
// Copying a model deep-copies every tensor.
class TransformerModel {
 public:
  TransformerModel() = default;
  TransformerModel(const TransformerModel& other);
  TransformerModel& operator=(const TransformerModel& other);
  TransformerModel(TransformerModel&&) noexcept = default;
  TransformerModel& operator=(TransformerModel&&) noexcept = default;

  // Architecture the model was initialized with; never changes after pruning.
  ModelConfig config;

  Tensor tok_emb;  // [vocab x d]
  Tensor pos_emb;  // [max_seq x d]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d]
  Tensor lm_head;     // [vocab x d]

  // Original indices of surviving structures.
  std::vector<int> live_channels;
  std::vector<std::vector<int>> live_heads;
  std::vector<std::vector<int>> live_ffn;

  // Keyed by target weight name.
  std::map<std::string, LoraAdapter> adapters;

  int d_model() const { return static_cast<int>(tok_emb.dim(1)); }
  int d_head() const { return config.d_head(); }
  int n_heads(int layer) const;
  int d_ff(int layer) const;
  int n_layers() const { return static_cast<int>(layers.size()); }

  // Base parameters in canonical order (adapters excluded).
  std::vector<NamedTensor> parameters() const;
  Tensor parameter(const std::string& name) const;
  bool has_parameter(const std::string& name) const;
  std::size_t param_count() const;

  void set_requires_grad(bool value);
  void zero_grad();
};

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed);

// Individual forward stages, exposed so callers can cache the residual
// stream at a layer boundary.
Tensor embed_tokens(Tape& tape, const TransformerModel& model, std::span<const int> ids);
Tensor run_layer(Tape& tape, const TransformerModel& model, int layer, const Tensor& x);
Tensor output_logits(Tape& tape, const TransformerModel& model, const Tensor& x);
// x * W^T plus the adapter path when an adapter targets `name`.
Tensor project(Tape& tape, const TransformerModel& model, const std::string& name,
               const Tensor& x, const Tensor& w);

Tensor forward(Tape& tape, const TransformerModel& model, std::span<const int> ids);
// Mean next-token cross entropy over positions 0..T-2.
Tensor next_token_loss(Tape& tape, const TransformerModel& model, std::span<const int> ids);
double next_token_loss_value(const TransformerModel& model, std::span<const int> ids);

// Mean next-token NLL over non-overlapping windows: window i covers tokens
// [i*seq_len, (i+1)*seq_len] and predicts seq_len positions, so every token
// after the first is predicted exactly once (a trailing partial window is
// dropped). Throws a data error when fewer than seq_len+1 tokens are given.
struct WindowNll {
  double total = 0.0;  // summed NLL
  std::size_t tokens = 0;
  double mean() const { return total / static_cast<double>(tokens); }
};
WindowNll window_nll(const TransformerModel& model, std::span<const int> tokens, int seq_len);

struct TrainHyper {
  double lr = 0.1;
  int steps = 2000;
  int batch = 4;
  int seq_len = 64;
  std::uint64_t seed = 0;
  // Rescales the batch gradient to this global L2 norm when it is larger;
  // 0 disables clipping.
  double clip_norm = 0.0;
};

struct TrainTrace {
  std::vector<double> loss;  // mean batch loss per step
};

// Draws `count` windows of seq_len+1 tokens at seeded uniform offsets.
std::vector<std::vector<int>> sample_windows(std::span<const int> tokens, int seq_len, int count,
                                             std::uint64_t seed);

// Plain SGD on every base parameter, fixed learning rate.
TrainTrace train_base(TransformerModel& model, std::span<const int> corpus,
                      const TrainHyper& hyper);

}  // namespace dprune
