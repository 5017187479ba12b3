#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stmgt/graphs.hpp"
#include "stmgt/layers.hpp"
#include "stmgt/tensor.hpp"

namespace stmgt {

struct ModelConfig {
  std::size_t input_len = 24;        // T
  std::size_t horizon = 1;           // M
  std::size_t blocks = 3;            // k Transformer blocks
  std::size_t layers_per_block = 1;  // encoder and decoder depth inside a block
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t ffn_dim = 0;           // 0 means 4 * d_model
  std::size_t input_channels = 1;    // C
  std::size_t gcn_hidden = 8;        // H
  std::size_t gcn_filters = 16;      // F
  std::size_t weather_features = 3;  // M_w; 0 disables the weather path entirely
  std::size_t weather_dim = 4;       // width of the projected weather embedding
  bool weather_enabled = true;       // false feeds zeros through the weather path
  std::vector<Relation> relations{kAllRelations.begin(), kAllRelations.end()};
  GcnOutput gcn_output = GcnOutput::Softmax;
  std::uint64_t seed = 42;

  std::size_t ffn_width() const { return ffn_dim ? ffn_dim : 4 * d_model; }
  std::size_t d_k() const { return d_model / heads; }
  /// ConfigError on any inconsistent field.
  void validate() const;
};

/// All learnable tensors, with unique path names (see named()).
struct ModelParams {
  GcnParams gcn;
  Tensor weather_w, weather_b;
  Tensor input_w, input_b;
  Tensor decoder_start;  // (M x d_model) learned query embeddings
  std::vector<TransformerBlockParams> blocks;
  Tensor head_w, head_b;

  /// Stable order; tensors share storage with this struct.
  std::vector<std::pair<std::string, Tensor>> named(const ModelConfig& config) const;
  std::vector<Tensor> list(const ModelConfig& config) const;
};

ModelParams init_params(const ModelConfig& config);

/// Closed-form parameter count.
std::size_t count_params(const ModelConfig& config);

/// Shape each named parameter must have under `config`.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& config);

/// Single-sample forward: x (N x T), weather (T x M_w) -> (N x M).
Tensor stmgt_forward(const Tensor& x, const RelationSet& relations, const Tensor& weather,
                     const ModelParams& params, const ModelConfig& config);

/// Batched forward with node-major layout: x (N x B x T), weather
/// (B x T x M_w) -> (N x B x M). `weather` may be undefined when
/// weather_features == 0.
Tensor stmgt_forward_batch(const Tensor& x, const RelationSet& relations, const Tensor& weather,
                           const ModelParams& params, const ModelConfig& config);

}  // namespace stmgt
