#include "stmgt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "kernels.hpp"
#include "stmgt/error.hpp"

namespace stmgt {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
}

// Parent accessors inside backward closures.
detail::Node& parent(detail::Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.data());
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, n, k](detail::Node& self) {
    auto& A = parent(self, 0);
    auto& B = parent(self, 1);
    const double* g = self.grad.data();
    if (A.requires_grad) kernels::gemm_nt(m, k, n, g, B.values.data(), A.ensure_grad().data());
    if (B.requires_grad) kernels::gemm_tn(k, n, m, A.values.data(), g, B.ensure_grad().data());
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank("linear", w, 2);
  const std::size_t k = x.shape().back(), n = w.dim(1);
  if (w.dim(0) != k)
    throw DimensionError("linear: weight " + shape_str(w.shape()) + " does not accept input " +
                         shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{n})
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match output width " +
                         std::to_string(n));
  const std::size_t m = x.size() / k;
  std::vector<double> out(m * n, 0.0);
  if (has_bias)
    for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.values().data(), n, out.data() + i * n);
  kernels::gemm_nn(m, n, k, x.values().data(), w.values().data(), out.data());
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result(std::move(shape), std::move(out), std::move(inputs), [m, n, k](detail::Node& self) {
    auto& X = parent(self, 0);
    auto& W = parent(self, 1);
    const double* g = self.grad.data();
    if (X.requires_grad) kernels::gemm_nt(m, k, n, g, W.values.data(), X.ensure_grad().data());
    if (W.requires_grad) kernels::gemm_tn(k, n, m, X.values.data(), g, W.ensure_grad().data());
    if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
      auto& gb = parent(self, 2).ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b, double alpha) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k)
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  std::vector<double> out(batch * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t s = 0; s < batch; ++s) {
    if (transpose_b)
      kernels::gemm_nt(m, n, k, av + s * m * k, bv + s * n * k, out.data() + s * m * n);
    else
      kernels::gemm_nn(m, n, k, av + s * m * k, bv + s * k * n, out.data() + s * m * n);
  }
  if (alpha != 1.0)
    for (auto& v : out) v *= alpha;
  return Tensor::make_result(
      {batch, m, n}, std::move(out), {a, b}, [batch, m, n, k, transpose_b, alpha](detail::Node& self) {
        auto& A = parent(self, 0);
        auto& B = parent(self, 1);
        std::vector<double> scaled;
        const double* g = self.grad.data();
        if (alpha != 1.0) {
          scaled.resize(self.grad.size());
          for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = self.grad[i] * alpha;
          g = scaled.data();
        }
        double* ga = A.requires_grad ? A.ensure_grad().data() : nullptr;
        double* gb = B.requires_grad ? B.ensure_grad().data() : nullptr;
        for (std::size_t s = 0; s < batch; ++s) {
          const double* gs = g + s * m * n;
          const double* as = A.values.data() + s * m * k;
          const double* bs = B.values.data() + s * k * n;
          if (transpose_b) {
            // C = A B^T: dA = G B, dB = G^T A
            if (ga) kernels::gemm_nn(m, k, n, gs, bs, ga + s * m * k);
            if (gb) kernels::gemm_tn(n, k, m, gs, as, gb + s * n * k);
          } else {
            if (ga) kernels::gemm_nt(m, k, n, gs, bs, ga + s * m * k);
            if (gb) kernels::gemm_tn(k, n, m, as, gs, gb + s * k * n);
          }
        }
      });
}

Tensor fused_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask, double scale) {
  require_rank("attention", q, 3);
  require_rank("attention", k, 3);
  require_rank("attention", v, 3);
  const std::size_t batch = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1), dv = v.dim(2);
  if (k.dim(0) != batch || v.dim(0) != batch || k.dim(2) != d || v.dim(1) != lk)
    throw DimensionError("attention: incompatible q/k/v " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  const bool masked = mask.defined();
  if (masked && mask.shape() != Shape{lq, lk})
    throw DimensionError("attention: mask " + shape_str(mask.shape()) + " does not match (" + std::to_string(lq) +
                         "x" + std::to_string(lk) + ")");
  std::shared_ptr<double[]> weights(new double[batch * lq * lk]);
  std::vector<double> out(batch * lq * dv, 0.0);
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  const double* mv = masked ? mask.values().data() : nullptr;
  std::vector<double> kt(d * lk);  // keys transposed so the inner loops run over keys
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t j = 0; j < lk; ++j)
      for (std::size_t c = 0; c < d; ++c) kt[c * lk + j] = kv[(s * lk + j) * d + c];
    for (std::size_t i = 0; i < lq; ++i) {
      const double* qi = qv + (s * lq + i) * d;
      double* p = weights.get() + (s * lq + i) * lk;
      std::fill_n(p, lk, 0.0);
      for (std::size_t c = 0; c < d; ++c) {
        const double a = qi[c];
        const double* kc = kt.data() + c * lk;
        for (std::size_t j = 0; j < lk; ++j) p[j] += a * kc[j];
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        p[j] = p[j] * scale + (masked ? mv[i * lk + j] : 0.0);
        if (std::isnan(p[j])) throw NumericError("attention: NaN score in batch " + std::to_string(s));
        mx = std::max(mx, p[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < lk; ++j) total += (p[j] = std::exp(p[j] - mx));
      double* o = out.data() + (s * lq + i) * dv;
      for (std::size_t j = 0; j < lk; ++j) {
        p[j] /= total;
        const double* vj = vv + (s * lk + j) * dv;
        for (std::size_t c = 0; c < dv; ++c) o[c] += p[j] * vj[c];
      }
    }
  }
  return Tensor::make_result(
      {batch, lq, dv}, std::move(out), {q, k, v}, [batch, lq, lk, d, dv, scale, weights](detail::Node& self) {
        auto& Q = parent(self, 0);
        auto& K = parent(self, 1);
        auto& V = parent(self, 2);
        double* gq = Q.requires_grad ? Q.ensure_grad().data() : nullptr;
        double* gk = K.requires_grad ? K.ensure_grad().data() : nullptr;
        double* gv = V.requires_grad ? V.ensure_grad().data() : nullptr;
        std::vector<double> ds(lk), vt(dv * lk);
        for (std::size_t s = 0; s < batch; ++s) {
          for (std::size_t j = 0; j < lk; ++j)
            for (std::size_t c = 0; c < dv; ++c) vt[c * lk + j] = V.values[(s * lk + j) * dv + c];
          for (std::size_t i = 0; i < lq; ++i) {
            const double* p = weights.get() + (s * lq + i) * lk;
            const double* go = self.grad.data() + (s * lq + i) * dv;
            std::fill(ds.begin(), ds.end(), 0.0);
            for (std::size_t c = 0; c < dv; ++c) {
              const double a = go[c];
              const double* vc = vt.data() + c * lk;
              for (std::size_t j = 0; j < lk; ++j) ds[j] += a * vc[j];
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < lk; ++j) {
              dot += ds[j] * p[j];
              if (gv) {
                double* gvj = gv + (s * lk + j) * dv;
                for (std::size_t c = 0; c < dv; ++c) gvj[c] += p[j] * go[c];
              }
            }
            const double* qi = Q.values.data() + (s * lq + i) * d;
            double* gqi = gq ? gq + (s * lq + i) * d : nullptr;
            for (std::size_t j = 0; j < lk; ++j) {
              const double g = p[j] * (ds[j] - dot) * scale;
              if (g == 0.0) continue;
              const double* kj = K.values.data() + (s * lk + j) * d;
              if (gqi)
                for (std::size_t c = 0; c < d; ++c) gqi[c] += g * kj[c];
              if (gk) {
                double* gkj = gk + (s * lk + j) * d;
                for (std::size_t c = 0; c < d; ++c) gkj[c] += g * qi[c];
              }
            }
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& P = parent(self, p);
      if (!P.requires_grad) continue;
      auto& g = P.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& A = parent(self, 0);
    auto& B = parent(self, 1);
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& A = parent(self, 0);
    auto& B = parent(self, 1);
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.values[i];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.values[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.begin(), ys.end(), xs.end() - ys.size()))
    throw DimensionError("add_broadcast: " + shape_str(ys) + " is not a trailing shape of " +
                         shape_str(xs));
  const std::size_t inner = y.size();
  const std::size_t outer = x.size() / inner;
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x[o * inner + i] + y[i];
  return Tensor::make_result(xs, std::move(out), {x, y}, [outer, inner](detail::Node& self) {
    auto& X = parent(self, 0);
    auto& Y = parent(self, 1);
    if (X.requires_grad) {
      auto& g = X.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (Y.requires_grad) {
      auto& g = Y.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& X = parent(self, 0);
    auto& g = X.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X.values[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor softmax_last(const Tensor& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  std::vector<double> out(x.size());
  const double* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * cols;
    double* o = out.data() + r * cols;
    double mx = row[0];
    for (std::size_t c = 0; c < cols; ++c) {
      if (std::isnan(row[c])) throw NumericError("softmax: NaN input in row " + std::to_string(r));
      mx = std::max(mx, row[c]);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, cols](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * cols;
      const double* gy = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - dot);
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank("softmax_rows", x, 2);
  return softmax_last(x);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d)
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match feature dim of " +
                         shape_str(x.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      double h = (xr[c] - mu) * inv_std[r];
      xhat[r * d + c] = h;
      out[r * d + c] = h * gain[c] + bias[c];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& X = parent(self, 0);
        auto& G = parent(self, 1);
        auto& B = parent(self, 2);
        const double* gy = self.grad.data();
        if (G.requires_grad) {
          auto& gg = G.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += gy[r * d + c] * xhat[r * d + c];
        }
        if (B.requires_grad) {
          auto& gb = B.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += gy[r * d + c];
        }
        if (X.requires_grad) {
          auto& gx = X.ensure_grad();
          std::vector<double> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              dh[c] = gy[r * d + c] * G.values[c];
              mean_dh += dh[c];
              mean_dh_h += dh[c] * xhat[r * d + c];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c)
              gx[r * d + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * d + c] * mean_dh_h);
          }
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return Tensor::make_result(std::move(shape), x.vec(), {x}, [](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return Tensor::make_result({n, m}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  if (parts.size() == 1) return parts.front();
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead)
      throw DimensionError("concat_last: leading shapes differ " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    widths.push_back(p.shape().back());
    total += widths.back();
  }
  const std::size_t rows = numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].values().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return Tensor::make_result(std::move(shape), std::move(out), parts,
                             [rows, total, widths](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 auto& P = parent(self, k);
                                 if (P.requires_grad) {
                                   auto& g = P.ensure_grad();
                                   for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t c = 0; c < widths[k]; ++c)
                                       g[r * widths[k] + c] += self.grad[r * total + off + c];
                                 }
                                 off += widths[k];
                               }
                             });
}

Tensor tile_rows(const Tensor& x, std::size_t times) {
  if (times == 0) throw DimensionError("tile_rows: zero copies");
  Shape shape = x.shape();
  shape[0] *= times;
  const std::size_t block = x.size();
  std::vector<double> out(block * times);
  for (std::size_t t = 0; t < times; ++t) std::copy_n(x.values().data(), block, out.data() + t * block);
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [times, block](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t i = 0; i < block; ++i) g[i] += self.grad[t * block + i];
  });
}

namespace {

// Index map shared by split_heads / merge_heads:
// merged (s, l, h*dk + c)  <->  split (s*n + h, l, c)
template <typename F>
void for_each_head_index(std::size_t seqs, std::size_t len, std::size_t heads, std::size_t dk, F&& f) {
  const std::size_t d = heads * dk;
  for (std::size_t s = 0; s < seqs; ++s)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t c = 0; c < dk; ++c)
          f((s * len + l) * d + h * dk + c, ((s * heads + h) * len + l) * dk + c);
}

}  // namespace

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_rank("split_heads", x, 3);
  if (heads == 0 || x.dim(2) % heads != 0)
    throw ConfigError("split_heads: feature dim " + std::to_string(x.dim(2)) +
                      " is not divisible by head count " + std::to_string(heads));
  const std::size_t seqs = x.dim(0), len = x.dim(1), dk = x.dim(2) / heads;
  std::vector<double> out(x.size());
  for_each_head_index(seqs, len, heads, dk, [&](std::size_t m, std::size_t s) { out[s] = x[m]; });
  return Tensor::make_result({seqs * heads, len, dk}, std::move(out), {x},
                             [seqs, len, heads, dk](detail::Node& self) {
                               auto& g = parent(self, 0).ensure_grad();
                               for_each_head_index(seqs, len, heads, dk, [&](std::size_t m, std::size_t s) {
                                 g[m] += self.grad[s];
                               });
                             });
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  require_rank("merge_heads", x, 3);
  if (heads == 0 || x.dim(0) % heads != 0)
    throw DimensionError("merge_heads: batch " + std::to_string(x.dim(0)) +
                         " is not a multiple of head count " + std::to_string(heads));
  const std::size_t seqs = x.dim(0) / heads, len = x.dim(1), dk = x.dim(2);
  std::vector<double> out(x.size());
  for_each_head_index(seqs, len, heads, dk, [&](std::size_t m, std::size_t s) { out[m] = x[s]; });
  return Tensor::make_result({seqs, len, heads * dk}, std::move(out), {x},
                             [seqs, len, heads, dk](detail::Node& self) {
                               auto& g = parent(self, 0).ensure_grad();
                               for_each_head_index(seqs, len, heads, dk, [&](std::size_t m, std::size_t s) {
                                 g[s] += self.grad[m];
                               });
                             });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return Tensor::make_result({1}, {total}, {x}, [](detail::Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape("mse_loss", pred, target);
  const double inv = 1.0 / static_cast<double>(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double e = pred[i] - target[i];
    total += e * e;
  }
  return Tensor::make_result({1}, {total * inv}, {pred, target}, [inv](detail::Node& self) {
    auto& P = parent(self, 0);
    auto& T = parent(self, 1);
    const double g0 = self.grad[0];
    if (P.requires_grad) {
      auto& g = P.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * (P.values[i] - T.values[i]) * inv * g0;
    }
    if (T.requires_grad) {
      auto& g = T.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= 2.0 * (P.values[i] - T.values[i]) * inv * g0;
    }
  });
}

}  // namespace stmgt
