#include "stmgt/layers.hpp"

#include <cmath>

#include "stmgt/error.hpp"
#include "stmgt/ops.hpp"

namespace stmgt {

namespace {

// Lifts (L x d) to (1 x L x d); leaves rank-3 input alone.
Tensor batched(const Tensor& x, const char* op) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
  throw DimensionError(std::string(op) + ": expected (L x d) or (S x L x d), got " + shape_str(x.shape()));
}

Tensor unbatched_like(const Tensor& y, const Tensor& like) {
  return like.rank() == 2 ? reshape(y, {y.dim(1), y.dim(2)}) : y;
}

}  // namespace

Tensor gcn_forward(const Tensor& x, const RelationSet& relations, const GcnParams& params, GcnOutput output) {
  if (relations.size() == 0) throw ConfigError("gcn_forward: empty relation set");
  if (params.w0.size() != relations.size() || params.w1.size() != relations.size())
    throw DimensionError("gcn_forward: " + std::to_string(relations.size()) + " relations but " +
                         std::to_string(params.w0.size()) + " weight pairs");
  if (x.rank() != 2 && x.rank() != 3)
    throw DimensionError("gcn_forward: expected (N x C) or (N x P x C), got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t c = x.shape().back();
  const std::size_t p = x.size() / (n * c);
  if (n != relations.n_nodes())
    throw DimensionError("gcn_forward: input has " + std::to_string(n) + " nodes, graphs have " +
                         std::to_string(relations.n_nodes()));

  auto nodes = reshape(x, {n, p * c});
  std::vector<Tensor> outs;
  for (std::size_t r = 0; r < relations.size(); ++r) {
    const auto& w0 = params.w0[r];
    const auto& w1 = params.w1[r];
    if (w0.rank() != 2 || w0.dim(0) != c || w1.rank() != 2 || w1.dim(0) != w0.dim(1))
      throw DimensionError("gcn_forward: weights " + shape_str(w0.shape()) + "/" + shape_str(w1.shape()) +
                           " do not fit " + std::to_string(c) + " input channels");
    const std::size_t h = w0.dim(1);
    const auto a_hat = relations.graphs[r].tensor();
    // A (X W0) == (A X) W0; multiplying by A on the node axis first keeps
    // every step of the batch in one product.
    auto hidden = matmul(reshape(matmul(a_hat, nodes), {n * p, c}), w0);
    hidden = relu(hidden);
    auto mixed = reshape(matmul(a_hat, reshape(hidden, {n, p * h})), {n * p, h});
    auto z = matmul(mixed, w1);
    outs.push_back(output == GcnOutput::Softmax ? softmax_rows(z) : z);
  }
  return concat_last(outs);  // rows are node-major: row = node * P + step
}

Tensor causal_mask(std::size_t lq, std::size_t lk) {
  std::vector<double> m(lq * lk, 0.0);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = i + 1; j < lk; ++j) m[i * lk + j] = kMaskValue;
  return Tensor({lq, lk}, std::move(m));
}

Tensor attention_weights(const Tensor& q, const Tensor& k, const std::optional<Tensor>& mask) {
  auto q3 = batched(q, "attention");
  auto k3 = batched(k, "attention");
  if (q3.dim(2) != k3.dim(2))
    throw DimensionError("attention: query width " + shape_str(q.shape()) + " differs from key width " +
                         shape_str(k.shape()));
  auto scores = bmm(q3, k3, true, 1.0 / std::sqrt(static_cast<double>(q3.dim(2))));
  if (mask) {
    if (mask->shape() != Shape{q3.dim(1), k3.dim(1)})
      throw DimensionError("attention: mask " + shape_str(mask->shape()) + " does not match (" +
                           std::to_string(q3.dim(1)) + "x" + std::to_string(k3.dim(1)) + ")");
    scores = add_broadcast(scores, *mask);
  }
  return unbatched_like(softmax_last(scores), q);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const std::optional<Tensor>& mask) {
  auto q3 = batched(q, "attention");
  auto k3 = batched(k, "attention");
  auto v3 = batched(v, "attention");
  if (q3.dim(2) != k3.dim(2))
    throw DimensionError("attention: query width " + shape_str(q.shape()) + " differs from key width " +
                         shape_str(k.shape()));
  if (v3.dim(1) != k3.dim(1))
    throw DimensionError("attention: " + std::to_string(k3.dim(1)) + " keys but values " + shape_str(v.shape()));
  const double scale = 1.0 / std::sqrt(static_cast<double>(q3.dim(2)));
  return unbatched_like(fused_attention(q3, k3, v3, mask ? *mask : Tensor{}, scale), q);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionParams& params,
                            const std::optional<Tensor>& mask) {
  const std::size_t heads = params.heads;
  const std::size_t d_model = params.wq.dim(0);
  if (heads == 0 || params.wq.dim(1) % heads != 0)
    throw ConfigError("multi_head_attention: projection width " + std::to_string(params.wq.dim(1)) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  auto q3 = batched(q, "multi_head_attention");
  auto k3 = batched(k, "multi_head_attention");
  auto v3 = batched(v, "multi_head_attention");
  if (q3.dim(2) != d_model || k3.dim(2) != d_model || v3.dim(2) != d_model)
    throw DimensionError("multi_head_attention: inputs " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()) + " do not have width " + std::to_string(d_model));
  auto qh = split_heads(linear(q3, params.wq), heads);
  auto kh = split_heads(linear(k3, params.wk), heads);
  auto vh = split_heads(linear(v3, params.wv), heads);
  auto heads_out = batched(scaled_dot_attention(qh, kh, vh, mask), "multi_head_attention");
  return unbatched_like(linear(merge_heads(heads_out, heads), params.wo), q);
}

Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0)
    throw ConfigError("positional_encoding: d_model must be even, got " + std::to_string(d_model));
  std::vector<double> pe(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe[pos * d_model + 2 * i] = std::sin(angle);
      pe[pos * d_model + 2 * i + 1] = std::cos(angle);
    }
  return Tensor({length, d_model}, std::move(pe));
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor encoder_layer(const Tensor& x, const EncoderLayerParams& p) {
  auto h = layer_norm(add(x, multi_head_attention(x, x, x, p.self_attn)), p.ln1.gain, p.ln1.bias);
  return layer_norm(add(h, ffn_forward(h, p.ffn)), p.ln2.gain, p.ln2.bias);
}

Tensor decoder_layer(const Tensor& x, const Tensor& enc_out, const DecoderLayerParams& p) {
  if (enc_out.shape().back() != x.shape().back())
    throw DimensionError("decoder_layer: encoder output " + shape_str(enc_out.shape()) +
                         " has a different feature width than " + shape_str(x.shape()));
  const std::size_t lq = x.rank() == 3 ? x.dim(1) : x.dim(0);
  auto h = layer_norm(add(x, multi_head_attention(x, x, x, p.self_attn, causal_mask(lq, lq))), p.ln1.gain,
                      p.ln1.bias);
  h = layer_norm(add(h, multi_head_attention(h, enc_out, enc_out, p.cross_attn)), p.ln2.gain, p.ln2.bias);
  return layer_norm(add(h, ffn_forward(h, p.ffn)), p.ln3.gain, p.ln3.bias);
}

Tensor conv1x1_head(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || w.dim(1) != 1 || b.size() != 1)
    throw DimensionError("conv1x1_head: expected (d x 1) weight and scalar bias, got " + shape_str(w.shape()) +
                         " and " + shape_str(b.shape()));
  if (x.rank() < 2)
    throw DimensionError("conv1x1_head: input " + shape_str(x.shape()) + " has no feature axis");
  auto y = linear(x, w, b);
  Shape out(x.shape().begin(), x.shape().end() - 1);
  return reshape(y, std::move(out));
}

}  // namespace stmgt
