#pragma once

#include <optional>
#include <vector>

#include "stmgt/graphs.hpp"
#include "stmgt/tensor.hpp"

namespace stmgt {

/// GCN output nonlinearity. Softmax is the row-wise softmax of the
/// two-layer Kipf-Welling form; Linear drops it.
enum class GcnOutput { Softmax, Linear };

/// One (W0: C x H, W1: H x F) pair per enabled relation, in RelationSet order.
struct GcnParams {
  std::vector<Tensor> w0;
  std::vector<Tensor> w1;
};

/// Head projections are stored concatenated: column block h of wq/wk/wv
/// (d_model x n*d_k) is W_h. wo maps n*d_k back to d_model.
struct AttentionParams {
  Tensor wq, wk, wv, wo;
  std::size_t heads = 1;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct EncoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams ln1;
  FfnParams ffn;
  LayerNormParams ln2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams ln1;
  AttentionParams cross_attn;
  LayerNormParams ln2;
  FfnParams ffn;
  LayerNormParams ln3;
};

struct TransformerBlockParams {
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
};

inline constexpr double kMaskValue = -1e9;

/// Spatial block. x is (N x C) for one time step, or (N x P x C) for P
/// stacked steps/samples sharing the weights. Returns (N x R*F) or
/// (N*P x R*F), relation outputs concatenated in RelationSet order.
Tensor gcn_forward(const Tensor& x, const RelationSet& relations, const GcnParams& params,
                   GcnOutput output = GcnOutput::Softmax);

/// Additive causal mask (Lq x Lk): query i may attend to keys j <= i.
Tensor causal_mask(std::size_t lq, std::size_t lk);

/// softmax(q k^T / sqrt(d_k) + mask). Works on (L x d) or batched (S x L x d).
Tensor attention_weights(const Tensor& q, const Tensor& k, const std::optional<Tensor>& mask = std::nullopt);

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const std::optional<Tensor>& mask = std::nullopt);

/// (L x d_model) or (S x L x d_model) inputs.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionParams& params,
                            const std::optional<Tensor>& mask = std::nullopt);

/// Sinusoidal encoding (T x d_model); d_model must be even.
Tensor positional_encoding(std::size_t length, std::size_t d_model);

Tensor ffn_forward(const Tensor& x, const FfnParams& params);

/// x -> LN(x + MHA(x,x,x)) -> LN(. + FFN(.)). (L x d) or (S x L x d).
Tensor encoder_layer(const Tensor& x, const EncoderLayerParams& params);

/// Causal self-attention, cross-attention over enc_out, FFN; each followed by
/// residual + layer norm.
Tensor decoder_layer(const Tensor& x, const Tensor& enc_out, const DecoderLayerParams& params);

/// Shared linear map over the feature channel: (... x d) -> (...), x.w + b.
Tensor conv1x1_head(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace stmgt
