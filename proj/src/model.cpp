#include "stmgt/model.hpp"

#include <algorithm>
#include <random>

#include "stmgt/error.hpp"
#include "stmgt/ops.hpp"
#include "stmgt/random.hpp"

namespace stmgt {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (input_len < 1) fail("input_len (T) must be >= 1");
  if (horizon < 1) fail("horizon (M) must be >= 1");
  if (blocks < 1) fail("blocks (k) must be >= 1");
  if (layers_per_block < 1) fail("layers_per_block must be >= 1");
  if (d_model < 2 || d_model % 2 != 0) fail("d_model must be even and >= 2");
  if (heads < 1 || d_model % heads != 0)
    fail("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) + " heads");
  if (input_channels < 1 || gcn_hidden < 1 || gcn_filters < 1) fail("GCN dimensions must be >= 1");
  if (weather_features > 0 && weather_dim < 1) fail("weather_dim must be >= 1");
  if (relations.empty()) fail("at least one relation must be enabled");
  for (std::size_t i = 1; i < relations.size(); ++i)
    if (static_cast<int>(relations[i]) <= static_cast<int>(relations[i - 1]))
      fail("relations must be distinct and in canonical order");
}

namespace {

struct Builder {
  const ModelConfig& cfg;
  Tensor weight(const std::string& name, Shape shape) const {
    std::mt19937_64 rng(derive_seed(cfg.seed, name));
    return glorot_uniform(shape, rng);
  }
  static Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
  static Tensor ones(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

  AttentionParams attention(const std::string& p) const {
    const auto d = cfg.d_model;
    return {weight(p + ".wq", {d, d}), weight(p + ".wk", {d, d}), weight(p + ".wv", {d, d}),
            weight(p + ".wo", {d, d}), cfg.heads};
  }
  FfnParams ffn(const std::string& p) const {
    const auto d = cfg.d_model, f = cfg.ffn_width();
    return {weight(p + ".w1", {d, f}), zeros({f}), weight(p + ".w2", {f, d}), zeros({d})};
  }
  LayerNormParams ln() const { return {ones({cfg.d_model}), zeros({cfg.d_model})}; }
};

void push_attention(std::vector<std::pair<std::string, Tensor>>& out, const std::string& p,
                    const AttentionParams& a) {
  out.emplace_back(p + ".wq", a.wq);
  out.emplace_back(p + ".wk", a.wk);
  out.emplace_back(p + ".wv", a.wv);
  out.emplace_back(p + ".wo", a.wo);
}

void push_ffn(std::vector<std::pair<std::string, Tensor>>& out, const std::string& p, const FfnParams& f) {
  out.emplace_back(p + ".w1", f.w1);
  out.emplace_back(p + ".b1", f.b1);
  out.emplace_back(p + ".w2", f.w2);
  out.emplace_back(p + ".b2", f.b2);
}

void push_ln(std::vector<std::pair<std::string, Tensor>>& out, const std::string& p, const LayerNormParams& l) {
  out.emplace_back(p + ".gain", l.gain);
  out.emplace_back(p + ".bias", l.bias);
}

std::string enc_prefix(std::size_t b, std::size_t l) {
  return "block" + std::to_string(b) + ".enc" + std::to_string(l);
}
std::string dec_prefix(std::size_t b, std::size_t l) {
  return "block" + std::to_string(b) + ".dec" + std::to_string(l);
}

}  // namespace

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  Builder b{config};
  ModelParams p;
  const auto d = config.d_model;
  for (auto r : config.relations) {
    const std::string name = std::string("gcn.") + relation_name(r);
    p.gcn.w0.push_back(b.weight(name + ".w0", {config.input_channels, config.gcn_hidden}));
    p.gcn.w1.push_back(b.weight(name + ".w1", {config.gcn_hidden, config.gcn_filters}));
  }
  std::size_t in_width = config.relations.size() * config.gcn_filters;
  if (config.weather_features > 0) {
    p.weather_w = b.weight("weather.w", {config.weather_features, config.weather_dim});
    p.weather_b = Builder::zeros({config.weather_dim});
    in_width += config.weather_dim;
  }
  p.input_w = b.weight("input.w", {in_width, d});
  p.input_b = Builder::zeros({d});
  p.decoder_start = b.weight("decoder.start", {config.horizon, d});
  for (std::size_t k = 0; k < config.blocks; ++k) {
    TransformerBlockParams block;
    for (std::size_t l = 0; l < config.layers_per_block; ++l) {
      const auto e = enc_prefix(k, l);
      block.encoder.push_back({b.attention(e + ".self_attn"), b.ln(), b.ffn(e + ".ffn"), b.ln()});
      const auto dd = dec_prefix(k, l);
      block.decoder.push_back({b.attention(dd + ".self_attn"), b.ln(), b.attention(dd + ".cross_attn"), b.ln(),
                               b.ffn(dd + ".ffn"), b.ln()});
    }
    p.blocks.push_back(std::move(block));
  }
  p.head_w = b.weight("head.w", {d, 1});
  p.head_b = Builder::zeros({1});
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named(const ModelConfig& config) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t r = 0; r < config.relations.size(); ++r) {
    const std::string name = std::string("gcn.") + relation_name(config.relations[r]);
    out.emplace_back(name + ".w0", gcn.w0.at(r));
    out.emplace_back(name + ".w1", gcn.w1.at(r));
  }
  if (config.weather_features > 0) {
    out.emplace_back("weather.w", weather_w);
    out.emplace_back("weather.b", weather_b);
  }
  out.emplace_back("input.w", input_w);
  out.emplace_back("input.b", input_b);
  out.emplace_back("decoder.start", decoder_start);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    for (std::size_t l = 0; l < blocks[k].encoder.size(); ++l) {
      const auto e = enc_prefix(k, l);
      const auto& enc = blocks[k].encoder[l];
      push_attention(out, e + ".self_attn", enc.self_attn);
      push_ln(out, e + ".ln1", enc.ln1);
      push_ffn(out, e + ".ffn", enc.ffn);
      push_ln(out, e + ".ln2", enc.ln2);
    }
    for (std::size_t l = 0; l < blocks[k].decoder.size(); ++l) {
      const auto dd = dec_prefix(k, l);
      const auto& dec = blocks[k].decoder[l];
      push_attention(out, dd + ".self_attn", dec.self_attn);
      push_ln(out, dd + ".ln1", dec.ln1);
      push_attention(out, dd + ".cross_attn", dec.cross_attn);
      push_ln(out, dd + ".ln2", dec.ln2);
      push_ffn(out, dd + ".ffn", dec.ffn);
      push_ln(out, dd + ".ln3", dec.ln3);
    }
  }
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

std::vector<Tensor> ModelParams::list(const ModelConfig& config) const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named(config)) out.push_back(t);
  return out;
}

std::size_t count_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, f = c.ffn_width(), r = c.relations.size();
  const std::size_t gcn = r * (c.input_channels * c.gcn_hidden + c.gcn_hidden * c.gcn_filters);
  const std::size_t weather = c.weather_features ? c.weather_features * c.weather_dim + c.weather_dim : 0;
  const std::size_t in_width = r * c.gcn_filters + (c.weather_features ? c.weather_dim : 0);
  const std::size_t input = in_width * d + d;
  const std::size_t start = c.horizon * d;
  const std::size_t attn = 4 * d * d;
  const std::size_t ffn = 2 * d * f + f + d;
  const std::size_t ln = 2 * d;
  const std::size_t enc = attn + ffn + 2 * ln;
  const std::size_t dec = 2 * attn + ffn + 3 * ln;
  const std::size_t head = d + 1;
  return gcn + weather + input + start + c.blocks * c.layers_per_block * (enc + dec) + head;
}

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& config) {
  // Shapes are cheap to read off a freshly initialised set.
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& [name, t] : init_params(config).named(config)) out.emplace_back(name, t.shape());
  return out;
}

Tensor stmgt_forward_batch(const Tensor& x, const RelationSet& relations, const Tensor& weather,
                           const ModelParams& params, const ModelConfig& config) {
  if (x.rank() != 3)
    throw DimensionError("stmgt_forward: expected input (N x B x T), got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), batch = x.dim(1), t = x.dim(2);
  const std::size_t d = config.d_model, m = config.horizon;
  if (t != config.input_len)
    throw DimensionError("stmgt_forward: input length " + std::to_string(t) + " differs from configured T=" +
                         std::to_string(config.input_len));
  if (n != relations.n_nodes())
    throw DimensionError("stmgt_forward: input has " + std::to_string(n) + " nodes, relation set has " +
                         std::to_string(relations.n_nodes()));
  if (relations.kinds() != config.relations)
    throw ConfigError("stmgt_forward: relation set does not match the configured relations");

  // (1) spatial block per time step, weights shared across steps.
  auto spatial = gcn_forward(reshape(x, {n, batch * t, config.input_channels}), relations, params.gcn,
                             config.gcn_output);  // (N*B*T x R*F)

  // (2) weather joins the first block's input projection.
  Tensor features = spatial;
  if (config.weather_features > 0) {
    if (!weather.defined() || weather.rank() != 3 || weather.dim(0) != batch || weather.dim(1) != t ||
        weather.dim(2) != config.weather_features)
      throw DimensionError("stmgt_forward: weather must be (" + std::to_string(batch) + "x" + std::to_string(t) +
                           "x" + std::to_string(config.weather_features) + "), got " +
                           (weather.defined() ? shape_str(weather.shape()) : std::string("none")));
    Tensor w_in = config.weather_enabled ? weather : Tensor::zeros(weather.shape());
    auto w_emb = linear(reshape(w_in, {batch * t, config.weather_features}), params.weather_w, params.weather_b);
    features = concat_last({spatial, tile_rows(w_emb, n)});
  }
  auto enc = linear(features, params.input_w, params.input_b);
  enc = add_broadcast(reshape(enc, {n * batch, t, d}), positional_encoding(t, d));

  // (3) decoder queries: learned start embeddings + positions.
  auto queries = add_broadcast(params.decoder_start, positional_encoding(m, d));
  auto dec = reshape(tile_rows(queries, n * batch), {n * batch, m, d});

  for (const auto& block : params.blocks) {
    for (const auto& layer : block.encoder) enc = encoder_layer(enc, layer);
    for (const auto& layer : block.decoder) dec = decoder_layer(dec, enc, layer);
  }

  // (4) 1x1 conv head.
  return reshape(conv1x1_head(dec, params.head_w, params.head_b), {n, batch, m});
}

Tensor stmgt_forward(const Tensor& x, const RelationSet& relations, const Tensor& weather,
                     const ModelParams& params, const ModelConfig& config) {
  if (x.rank() != 2) throw DimensionError("stmgt_forward: expected (N x T), got " + shape_str(x.shape()));
  Tensor w;
  if (config.weather_features > 0) {
    if (!weather.defined() || weather.rank() != 2 || weather.dim(0) != x.dim(1))
      throw DimensionError("stmgt_forward: weather must have one row per input step (" + std::to_string(x.dim(1)) +
                           "), got " + (weather.defined() ? shape_str(weather.shape()) : std::string("none")));
    w = reshape(weather, {1, weather.dim(0), weather.dim(1)});
  }
  auto y = stmgt_forward_batch(reshape(x, {x.dim(0), 1, x.dim(1)}), relations, w, params, config);
  return reshape(y, {x.dim(0), config.horizon});
}

}  // namespace stmgt
