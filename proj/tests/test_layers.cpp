#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gradcheck.hpp"
#include "stmgt/error.hpp"
#include "stmgt/layers.hpp"
#include "stmgt/ops.hpp"

using namespace stmgt;
using stmgt::testing::gradcheck;
using stmgt::testing::random_tensor;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t, std::size_t offset, std::size_t rows, std::size_t cols) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = t[offset + i * cols + j];
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t p = 0; p < b.size(); ++p) c[i][j] += a[i][p] * b[p][j];
  return c;
}

Mat cols(const Mat& a, std::size_t from, std::size_t count) {
  Mat out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i].assign(a[i].begin() + from, a[i].begin() + from + count);
  return out;
}

void softmax_in_place(std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0.0;
  for (auto& v : row) s += (v = std::exp(v - mx));
  for (auto& v : row) v /= s;
}

// Per-head loop reference for multi-head attention on (L x d) inputs.
Mat mha_reference(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionParams& p, std::size_t lq,
                  std::size_t lk, std::size_t d) {
  const std::size_t dk = d / p.heads;
  const Mat Q = mm(to_mat(q, 0, lq, d), to_mat(p.wq, 0, d, d));
  const Mat K = mm(to_mat(k, 0, lk, d), to_mat(p.wk, 0, d, d));
  const Mat V = mm(to_mat(v, 0, lk, d), to_mat(p.wv, 0, d, d));
  Mat concat(lq, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Mat qh = cols(Q, h * dk, dk), kh = cols(K, h * dk, dk), vh = cols(V, h * dk, dk);
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> w(lk);
      for (std::size_t j = 0; j < lk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += qh[i][c] * kh[j][c];
        w[j] = s / std::sqrt(static_cast<double>(dk));
      }
      softmax_in_place(w);
      for (std::size_t c = 0; c < dk; ++c)
        for (std::size_t j = 0; j < lk; ++j) concat[i][h * dk + c] += w[j] * vh[j][c];
    }
  }
  return mm(concat, to_mat(p.wo, 0, d, d));
}

AttentionParams random_attention(std::size_t d, std::size_t heads, std::uint64_t seed) {
  return {random_tensor({d, d}, seed, -0.5, 0.5), random_tensor({d, d}, seed + 1, -0.5, 0.5),
          random_tensor({d, d}, seed + 2, -0.5, 0.5), random_tensor({d, d}, seed + 3, -0.5, 0.5), heads};
}

FfnParams random_ffn(std::size_t d, std::size_t ff, std::uint64_t seed) {
  return {random_tensor({d, ff}, seed, -0.5, 0.5), random_tensor({ff}, seed + 1, -0.5, 0.5),
          random_tensor({ff, d}, seed + 2, -0.5, 0.5), random_tensor({d}, seed + 3, -0.5, 0.5)};
}

LayerNormParams random_ln(std::size_t d, std::uint64_t seed) {
  return {random_tensor({d}, seed, 0.5, 1.5), random_tensor({d}, seed + 1, -0.5, 0.5)};
}

LayerNormParams unit_ln(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }

EncoderLayerParams random_encoder(std::size_t d, std::size_t heads, std::uint64_t seed) {
  return {random_attention(d, heads, seed), random_ln(d, seed + 10), random_ffn(d, 2 * d, seed + 20),
          random_ln(d, seed + 30)};
}

DecoderLayerParams random_decoder(std::size_t d, std::size_t heads, std::uint64_t seed) {
  return {random_attention(d, heads, seed), random_ln(d, seed + 10), random_attention(d, heads, seed + 40),
          random_ln(d, seed + 50),          random_ffn(d, 2 * d, seed + 20), random_ln(d, seed + 30)};
}

RelationSet path_relations(std::size_t n, std::size_t count) {
  std::vector<ZoneGraph> graphs;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("n" + std::to_string(i));
  for (std::size_t r = 0; r < count; ++r) {
    std::vector<std::pair<std::string, std::string>> edges;
    for (std::size_t i = 0; i + 1 + r < n; ++i) edges.emplace_back(ids[i], ids[i + 1 + r]);
    auto g = build_adjacency_graph(edges, ids);
    g.kind = kAllRelations[r];
    graphs.push_back(g);
  }
  return fuse(graphs);
}

GcnParams random_gcn(std::size_t r, std::size_t c, std::size_t h, std::size_t f, std::uint64_t seed) {
  GcnParams p;
  for (std::size_t i = 0; i < r; ++i) {
    p.w0.push_back(random_tensor({c, h}, seed + 2 * i));
    p.w1.push_back(random_tensor({h, f}, seed + 2 * i + 1));
  }
  return p;
}

std::vector<double> hand_layer_norm(std::vector<double> row) {
  double m = 0.0, v = 0.0;
  for (double x : row) m += x;
  m /= static_cast<double>(row.size());
  for (double x : row) v += (x - m) * (x - m);
  v /= static_cast<double>(row.size());
  for (auto& x : row) x = (x - m) / std::sqrt(v + 1e-5);
  return row;
}

}  // namespace

TEST(Gcn, ShapeAndRowNormalisation) {
  auto rel = path_relations(5, 4);
  auto p = random_gcn(4, 1, 8, 16, 1);
  auto y = gcn_forward(random_tensor({5, 1}, 2, -2, 2, false), rel, p);
  ASSERT_EQ(y.shape(), (Shape{5, 64}));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t f = 0; f < 16; ++f) s += y[i * 64 + r * 16 + f];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Gcn, SingleNodeScalarChain) {
  auto rel = fuse({build_adjacency_graph({}, {"only"})});
  auto p = random_gcn(1, 1, 3, 4, 7);
  const double x = 0.7;
  auto y = gcn_forward(Tensor({1, 1}, {x}), rel, p);
  std::vector<double> hidden(3), logits(4, 0.0);
  for (std::size_t h = 0; h < 3; ++h) hidden[h] = std::max(0.0, x * p.w0[0][h]);
  for (std::size_t f = 0; f < 4; ++f)
    for (std::size_t h = 0; h < 3; ++h) logits[f] += hidden[h] * p.w1[0][h * 4 + f];
  softmax_in_place(logits);
  for (std::size_t f = 0; f < 4; ++f) EXPECT_NEAR(y[f], logits[f], 1e-14);
}

TEST(Gcn, IsolatedNodesAreIndependent) {
  auto rel = fuse({build_adjacency_graph({}, {"a", "b", "c", "d"})});
  auto p = random_gcn(1, 2, 4, 3, 9);
  auto x = random_tensor({4, 2}, 3, -2, 2, false);
  auto y = gcn_forward(x, rel, p);
  auto xv = x.vec();
  xv[2 * 2] += 1.5;  // perturb node 2
  auto y2 = gcn_forward(Tensor({4, 2}, xv), rel, p);
  for (std::size_t i : {0u, 1u, 3u})
    for (std::size_t f = 0; f < 3; ++f) EXPECT_EQ(y[i * 3 + f], y2[i * 3 + f]);
}

TEST(Gcn, StackedStepsShareWeights) {
  auto rel = path_relations(4, 2);
  auto p = random_gcn(2, 1, 5, 3, 4);
  auto x = random_tensor({4, 3, 1}, 5, -2, 2, false);
  auto y = gcn_forward(x, rel, p);
  ASSERT_EQ(y.shape(), (Shape{12, 6}));
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<double> slice;
    for (std::size_t i = 0; i < 4; ++i) slice.push_back(x[i * 3 + s]);
    auto ys = gcn_forward(Tensor({4, 1}, slice), rel, p);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(y[(i * 3 + s) * 6 + c], ys[i * 6 + c], 1e-14);
  }
}

TEST(Gcn, MismatchedNodesIsDimensionError) {
  auto rel = path_relations(5, 1);
  EXPECT_THROW(gcn_forward(Tensor::zeros({4, 1}), rel, random_gcn(1, 1, 2, 2, 1)), DimensionError);
}

TEST(Attention, Examples) {
  auto v = Tensor::matrix({{3, -1, 2}});
  EXPECT_EQ(scaled_dot_attention(Tensor::matrix({{1, 2}}), Tensor::matrix({{4, 5}}), v).vec(), v.vec());

  auto keys = Tensor::matrix({{1, 1}, {1, 1}, {1, 1}});
  auto vals = Tensor::matrix({{1, 2}, {3, 4}, {5, 9}});
  auto out = scaled_dot_attention(Tensor::matrix({{0.3, -2}}), keys, vals);
  EXPECT_NEAR(out[0], 3.0, 1e-12);
  EXPECT_NEAR(out[1], 5.0, 1e-12);

  auto q = random_tensor({4, 3}, 1, -2, 2, false);
  auto k = random_tensor({4, 3}, 2, -2, 2, false);
  auto v1 = random_tensor({4, 2}, 3, -2, 2, false);
  auto v2v = v1.vec();
  for (std::size_t i = 2; i < v2v.size(); ++i) v2v[i] += 10.0;
  auto mask = causal_mask(4, 4);
  auto o1 = scaled_dot_attention(q, k, v1, mask);
  auto o2 = scaled_dot_attention(q, k, Tensor({4, 2}, v2v), mask);
  EXPECT_EQ(o1[0], o2[0]);
  EXPECT_EQ(o1[1], o2[1]);
  EXPECT_THROW(scaled_dot_attention(q, k, v1, causal_mask(3, 4)), DimensionError);
}

TEST(Attention, WeightRowsAndMaskedEntries) {
  auto q = random_tensor({5, 4}, 4, -2, 2, false);
  auto k = random_tensor({5, 4}, 5, -2, 2, false);
  auto w = attention_weights(q, k, causal_mask(5, 5));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      s += w[i * 5 + j];
      if (j > i) EXPECT_LT(w[i * 5 + j], 1e-30);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(MultiHead, MatchesPerHeadLoop) {
  const std::size_t d = 12, lq = 5, lk = 7;
  for (std::size_t heads : {1u, 2u, 3u, 4u}) {
    auto p = random_attention(d, heads, 100 + heads);
    auto q = random_tensor({lq, d}, 1, -2, 2, false);
    auto k = random_tensor({lk, d}, 2, -2, 2, false);
    auto v = random_tensor({lk, d}, 3, -2, 2, false);
    auto got = multi_head_attention(q, k, v, p);
    ASSERT_EQ(got.shape(), (Shape{lq, d}));
    const auto want = mha_reference(q, k, v, p, lq, lk, d);
    for (std::size_t i = 0; i < lq; ++i)
      for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(got[i * d + j], want[i][j], 1e-12);
  }
}

TEST(MultiHead, SingleIdentityHeadIsPlainAttention) {
  const std::size_t d = 4;
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  AttentionParams p{Tensor({d, d}, eye), Tensor({d, d}, eye), Tensor({d, d}, eye), Tensor({d, d}, eye), 1};
  auto q = random_tensor({3, d}, 1, -2, 2, false);
  auto k = random_tensor({3, d}, 2, -2, 2, false);
  auto v = random_tensor({3, d}, 3, -2, 2, false);
  EXPECT_EQ(multi_head_attention(q, k, v, p).vec(), scaled_dot_attention(q, k, v).vec());
}

TEST(MultiHead, ShapesAndErrors) {
  auto p = random_attention(32, 4, 1);
  auto x = random_tensor({6, 32}, 2, -2, 2, false);
  EXPECT_EQ(multi_head_attention(x, x, x, p).shape(), (Shape{6, 32}));
  auto bad = random_attention(30, 4, 1);
  auto y = random_tensor({6, 30}, 2, -2, 2, false);
  EXPECT_THROW(multi_head_attention(y, y, y, bad), ConfigError);
}

TEST(PositionalEncoding, Values) {
  auto pe = positional_encoding(50, 16);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(pe[i], i % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(pe.at({1, 0}), 0.84147, 1e-5);
  EXPECT_NEAR(pe.at({1, 1}), 0.54030, 1e-5);
  EXPECT_DOUBLE_EQ(pe.at({1, 0}), std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe.at({7, 5}), std::cos(7.0 / std::pow(10000.0, 4.0 / 16.0)));
  for (double v : pe.vec()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_THROW(positional_encoding(4, 7), ConfigError);
}

TEST(PositionalEncoding, RowsDistinct) {
  auto pe = positional_encoding(10000, 8);
  std::set<std::vector<double>> rows;
  for (std::size_t t = 0; t < 10000; ++t) rows.insert(std::vector<double>(pe.vec().begin() + t * 8, pe.vec().begin() + t * 8 + 8));
  EXPECT_EQ(rows.size(), 10000u);
}

TEST(Ffn, Examples) {
  const std::size_t d = 3;
  FfnParams zero{Tensor::zeros({d, 6}), Tensor::zeros({6}), Tensor::zeros({6, d}), Tensor::zeros({d})};
  auto x = random_tensor({4, d}, 1, -2, 2, false);
  const auto zero_out = ffn_forward(x, zero);
  for (double v : zero_out.vec()) EXPECT_EQ(v, 0.0);

  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  FfnParams id{Tensor({d, d}, eye), Tensor::zeros({d}), Tensor({d, d}, eye), Tensor::zeros({d})};
  auto pos = random_tensor({4, d}, 2, 0, 2, false);
  EXPECT_EQ(ffn_forward(pos, id).vec(), pos.vec());

  auto p = random_ffn(d, 5, 9);
  auto y = ffn_forward(x, p);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> h(5);
    for (std::size_t j = 0; j < 5; ++j) {
      double s = p.b1[j];
      for (std::size_t c = 0; c < d; ++c) s += x[i * d + c] * p.w1[c * 5 + j];
      h[j] = std::max(0.0, s);
    }
    for (std::size_t c = 0; c < d; ++c) {
      double s = p.b2[c];
      for (std::size_t j = 0; j < 5; ++j) s += h[j] * p.w2[j * d + c];
      EXPECT_NEAR(y[i * d + c], s, 1e-12);
    }
  }
  EXPECT_THROW(ffn_forward(random_tensor({2, 4}, 1, -1, 1, false), p), DimensionError);
}

TEST(EncoderDecoder, ShapesCausalityAndErrors) {
  const std::size_t d = 8;
  auto enc_p = random_encoder(d, 2, 1);
  auto dec_p = random_decoder(d, 2, 2);
  for (std::size_t L : {1u, 3u, 6u}) {
    auto x = random_tensor({L, d}, L, -2, 2, false);
    EXPECT_EQ(encoder_layer(x, enc_p).shape(), x.shape());
  }
  auto enc = encoder_layer(random_tensor({5, d}, 3, -2, 2, false), enc_p);
  auto dec_in = random_tensor({4, d}, 4, -2, 2, false);
  auto out = decoder_layer(dec_in, enc, dec_p);
  EXPECT_EQ(out.shape(), dec_in.shape());
  auto changed = dec_in.vec();
  for (std::size_t i = 2 * d; i < changed.size(); ++i) changed[i] -= 3.0;  // positions 2, 3
  auto out2 = decoder_layer(Tensor({4, d}, changed), enc, dec_p);
  for (std::size_t i = 0; i < 2 * d; ++i) EXPECT_EQ(out[i], out2[i]);
  EXPECT_THROW(decoder_layer(dec_in, random_tensor({5, 6}, 1, -1, 1, false), dec_p), DimensionError);
}

TEST(EncoderDecoder, ZeroWeightsGiveDoubleLayerNorm) {
  const std::size_t d = 6;
  AttentionParams zero_attn{Tensor::zeros({d, d}), Tensor::zeros({d, d}), Tensor::zeros({d, d}),
                            Tensor::zeros({d, d}), 2};
  FfnParams zero_ffn{Tensor::zeros({d, 12}), Tensor::zeros({12}), Tensor::zeros({12, d}), Tensor::zeros({d})};
  EncoderLayerParams p{zero_attn, unit_ln(d), zero_ffn, unit_ln(d)};
  auto x = random_tensor({3, d}, 8, -2, 2, false);
  auto y = encoder_layer(x, p);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto want = hand_layer_norm(hand_layer_norm(std::vector<double>(x.vec().begin() + i * d, x.vec().begin() + (i + 1) * d)));
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(y[i * d + c], want[c], 1e-12);
  }
}

TEST(EncoderDecoder, EquivariantOverBatchAxis) {
  const std::size_t d = 8, S = 4, L = 5;
  auto enc_p = random_encoder(d, 2, 11);
  auto dec_p = random_decoder(d, 2, 12);
  auto x = random_tensor({S, L, d}, 1, -2, 2, false);
  auto q = random_tensor({S, 2, d}, 2, -2, 2, false);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permute = [&](const Tensor& t) {
    const std::size_t block = t.size() / S;
    std::vector<double> v(t.size());
    for (std::size_t s = 0; s < S; ++s) std::copy_n(t.vec().begin() + perm[s] * block, block, v.begin() + s * block);
    return Tensor(t.shape(), v);
  };
  auto enc = encoder_layer(x, enc_p);
  auto dec = decoder_layer(q, enc, dec_p);
  EXPECT_EQ(encoder_layer(permute(x), enc_p).vec(), permute(enc).vec());
  EXPECT_EQ(decoder_layer(permute(q), permute(enc), dec_p).vec(), permute(dec).vec());
}

TEST(Conv1x1Head, Examples) {
  auto x = random_tensor({10, 1, 4}, 3, -2, 2, false);
  auto e1 = Tensor({4, 1}, {1, 0, 0, 0});
  auto y = conv1x1_head(x, e1, Tensor({1}, {0.0}));
  ASSERT_EQ(y.shape(), (Shape{10, 1}));
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(y[i], x[i * 4]);
  auto c = conv1x1_head(x, Tensor::zeros({4, 1}), Tensor({1}, {3.0}));
  for (double v : c.vec()) EXPECT_EQ(v, 3.0);
  EXPECT_THROW(conv1x1_head(x, Tensor::zeros({3, 1}), Tensor({1}, {0.0})), DimensionError);
}

TEST(LayerGradients, FiniteDifferences) {
  constexpr double tol = 1e-5;
  const std::size_t d = 6;
  {
    auto rel = path_relations(4, 2);
    auto p = random_gcn(2, 2, 3, 4, 21);
    auto x = random_tensor({4, 2}, 22, -2, 2);
    for (auto mode : {GcnOutput::Softmax, GcnOutput::Linear}) {
      auto r = gradcheck([&] { return gcn_forward(x, rel, p, mode); },
                         {{"x", x}, {"w0a", p.w0[0]}, {"w1a", p.w1[0]}, {"w0b", p.w0[1]}, {"w1b", p.w1[1]}});
      EXPECT_LT(r.max_rel_error, tol) << "gcn " << r.worst_input;
    }
  }
  {
    auto q = random_tensor({3, d}, 31, -2, 2);
    auto k = random_tensor({4, d}, 32, -2, 2);
    auto v = random_tensor({4, d}, 33, -2, 2);
    auto r = gradcheck([&] { return scaled_dot_attention(q, k, v); }, {{"q", q}, {"k", k}, {"v", v}});
    EXPECT_LT(r.max_rel_error, tol) << "attention " << r.worst_input;
    auto p = random_attention(d, 3, 34);
    auto mask = causal_mask(3, 4);
    auto r2 = gradcheck([&] { return multi_head_attention(q, k, v, p, mask); },
                        {{"q", q}, {"k", k}, {"v", v}, {"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv}, {"wo", p.wo}});
    EXPECT_LT(r2.max_rel_error, tol) << "mha " << r2.worst_input;
  }
  {
    auto x = random_tensor({3, d}, 41, -2, 2);
    auto p = random_ffn(d, 10, 42);
    auto r = gradcheck([&] { return ffn_forward(x, p); }, {{"x", x}, {"w1", p.w1}, {"b1", p.b1}, {"w2", p.w2}, {"b2", p.b2}});
    EXPECT_LT(r.max_rel_error, tol) << "ffn " << r.worst_input;
  }
  {
    auto x = random_tensor({2, 3, d}, 51, -2, 2);
    auto p = random_encoder(d, 2, 52);
    auto r = gradcheck([&] { return encoder_layer(x, p); },
                       {{"x", x}, {"wq", p.self_attn.wq}, {"wo", p.self_attn.wo}, {"ln1.gain", p.ln1.gain},
                        {"ffn.w1", p.ffn.w1}, {"ffn.b2", p.ffn.b2}, {"ln2.bias", p.ln2.bias}});
    EXPECT_LT(r.max_rel_error, tol) << "encoder " << r.worst_input;
  }
  {
    auto x = random_tensor({2, 2, d}, 61, -2, 2);
    auto enc = random_tensor({2, 3, d}, 62, -2, 2);
    auto p = random_decoder(d, 2, 63);
    auto r = gradcheck([&] { return decoder_layer(x, enc, p); },
                       {{"x", x}, {"enc", enc}, {"self.wk", p.self_attn.wk}, {"cross.wq", p.cross_attn.wq},
                        {"cross.wv", p.cross_attn.wv}, {"ln3.gain", p.ln3.gain}, {"ffn.w2", p.ffn.w2}});
    EXPECT_LT(r.max_rel_error, tol) << "decoder " << r.worst_input;
  }
  {
    auto x = random_tensor({3, 2, d}, 71, -2, 2);
    auto w = random_tensor({d, 1}, 72, -2, 2);
    auto b = random_tensor({1}, 73, -2, 2);
    auto r = gradcheck([&] { return conv1x1_head(x, w, b); }, {{"x", x}, {"w", w}, {"b", b}});
    EXPECT_LT(r.max_rel_error, tol) << "head " << r.worst_input;
  }
}
