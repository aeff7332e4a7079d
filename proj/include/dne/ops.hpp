// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op works on rank-2 tensors; scalars are
// 1x1. Each op records its own backward rule on the graph of its inputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dne/graph.hpp"
#include "dne/tolerances.hpp"

namespace dne::ops {

namespace detail {

inline Graph& same_graph(std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const auto& v : vars) {
    if (v.graph == nullptr) throw ContractError("variable is not attached to a graph");
    if (g != nullptr && g != v.graph) throw ContractError("variables live on different graphs");
    g = v.graph;
  }
  return *g;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape));
}

// Accumulates into the gradient of input `k` of node `id` if it needs one.
template <class F>
void with_input_grad(Graph& g, std::size_t id, std::size_t k, F&& f) {
  const auto in = g.inputs(id)[k];
  if (!g.node_requires_grad(in)) return;
  f(g.grad_buffer(in));
}

inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double gaussian_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double gaussian_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace detail

/// c = a * b.
inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  if (B.shape[0] != k)
    throw ShapeError("matmul: inner dimensions differ: " + shape_string(A.shape) + " * " +
                     shape_string(B.shape));
  Tensor C = Tensor::matrix(m, n);
  detail::gemm(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  g.add_macs(static_cast<std::uint64_t>(m) * k * n);
  return g.record("matmul", std::move(C), {a.id, b.id}, [m, k, n](Graph& gr, std::size_t id) {
    const auto& gc = gr.out_grad(id);
    const auto& A = gr.node_value(gr.inputs(id)[0]).data;
    const auto& B = gr.node_value(gr.inputs(id)[1]).data;
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& ga) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += gc[i * n + j] * B[p * n + j];
          ga[i * k + p] += s;
        }
    });
    detail::with_input_grad(gr, id, 1, [&](std::vector<double>& gb) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gc[i * n + j];
        }
    });
  });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape != B.shape)
    throw ShapeError("add: shapes differ: " + shape_string(A.shape) + " vs " +
                     shape_string(B.shape));
  Tensor C = A;
  for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
  return g.record("add", std::move(C), {a.id, b.id}, [](Graph& gr, std::size_t id) {
    const auto& gc = gr.out_grad(id);
    for (std::size_t k = 0; k < 2; ++k)
      detail::with_input_grad(gr, id, k, [&](std::vector<double>& gx) {
        for (std::size_t i = 0; i < gc.size(); ++i) gx[i] += gc[i];
      });
  });
}

/// Adds a [1 x n] (or [n]) row vector to every row of x.
inline Var add_bias(Var x, Var bias) {
  Graph& g = detail::same_graph({x, bias});
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  detail::require_matrix(X, "add_bias");
  const std::size_t m = X.shape[0], n = X.shape[1];
  if (b.numel() != n)
    throw ShapeError("add_bias: bias " + shape_string(b.shape) + " for input " +
                     shape_string(X.shape));
  Tensor Y = X;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] += b.data[j];
  return g.record("add_bias", std::move(Y), {x.id, bias.id}, [m, n](Graph& gr, std::size_t id) {
    const auto& gy = gr.out_grad(id);
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
    detail::with_input_grad(gr, id, 1, [&](std::vector<double>& gb) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
    });
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape != B.shape)
    throw ShapeError("mul: shapes differ: " + shape_string(A.shape) + " vs " +
                     shape_string(B.shape));
  Tensor C = A;
  for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] *= B.data[i];
  return g.record("mul", std::move(C), {a.id, b.id}, [](Graph& gr, std::size_t id) {
    const auto& gc = gr.out_grad(id);
    const auto& A = gr.node_value(gr.inputs(id)[0]).data;
    const auto& B = gr.node_value(gr.inputs(id)[1]).data;
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& ga) {
      for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] * B[i];
    });
    detail::with_input_grad(gr, id, 1, [&](std::vector<double>& gb) {
      for (std::size_t i = 0; i < gc.size(); ++i) gb[i] += gc[i] * A[i];
    });
  });
}

inline Var scale(Var x, double factor) {
  Graph& g = detail::same_graph({x});
  Tensor Y = x.value();
  for (auto& v : Y.data) v *= factor;
  return g.record("scale", std::move(Y), {x.id}, [factor](Graph& gr, std::size_t id) {
    const auto& gy = gr.out_grad(id);
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
    });
  });
}

/// Gaussian error linear unit, exact form x * Phi(x).
inline Var gelu(Var x) {
  Graph& g = detail::same_graph({x});
  Tensor Y = x.value();
  for (auto& v : Y.data) v = v * detail::gaussian_cdf(v);
  return g.record("gelu", std::move(Y), {x.id}, [](Graph& gr, std::size_t id) {
    const auto& gy = gr.out_grad(id);
    const auto& X = gr.node_value(gr.inputs(id)[0]).data;
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double v = X[i];
        gx[i] += gy[i] * (detail::gaussian_cdf(v) + v * detail::gaussian_pdf(v));
      }
    });
  });
}

/// Per-row normalization with population variance, then gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = Tolerances::layer_norm_eps) {
  Graph& g = detail::same_graph({x, gain, bias});
  const Tensor& X = x.value();
  detail::require_matrix(X, "layer_norm");
  const std::size_t m = X.shape[0], d = X.shape[1];
  if (gain.value().numel() != d || bias.value().numel() != d)
    throw ShapeError("layer_norm: gain/bias " + shape_string(gain.value().shape) + "/" +
                     shape_string(bias.value().shape) + " for width " + std::to_string(d));
  const auto& G = gain.value().data;
  const auto& B = bias.value().data;
  Tensor Y = Tensor::matrix(m, d);
  std::vector<double> xhat(m * d), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * inv_std[i];
      xhat[i * d + j] = h;
      Y.data[i * d + j] = h * G[j] + B[j];
    }
  }
  return g.record("layer_norm", std::move(Y), {x.id, gain.id, bias.id},
                  [m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr,
                                                                              std::size_t id) {
                    const auto& gy = gr.out_grad(id);
                    const auto& G = gr.node_value(gr.inputs(id)[1]).data;
                    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
                      for (std::size_t i = 0; i < m; ++i) {
                        double mean_g = 0.0, mean_gx = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                          const double gh = gy[i * d + j] * G[j];
                          mean_g += gh;
                          mean_gx += gh * xhat[i * d + j];
                        }
                        mean_g /= static_cast<double>(d);
                        mean_gx /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                          const double gh = gy[i * d + j] * G[j];
                          gx[i * d + j] += inv_std[i] * (gh - mean_g - xhat[i * d + j] * mean_gx);
                        }
                      }
                    });
                    detail::with_input_grad(gr, id, 1, [&](std::vector<double>& gg) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < d; ++j)
                          gg[j] += gy[i * d + j] * xhat[i * d + j];
                    });
                    detail::with_input_grad(gr, id, 2, [&](std::vector<double>& gb) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < d; ++j) gb[j] += gy[i * d + j];
                    });
                  });
}

/// Boolean mask over softmax columns. Row r of the input uses mask row
/// r % rows(), so one pattern can serve every group of a batched attention.
struct SoftmaxMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<char> allowed;

  bool operator()(std::size_t r, std::size_t c) const {
    return allowed[(r % rows) * cols + c] != 0;
  }
};

/// Row-wise softmax of x / temperature, max-subtracted. Masked entries are
/// excluded from the normalization and come out as exactly zero.
inline Var softmax_rows(Var x, double temperature = 1.0,
                        const std::optional<SoftmaxMask>& mask = std::nullopt) {
  Graph& g = detail::same_graph({x});
  const Tensor& X = x.value();
  detail::require_matrix(X, "softmax_rows");
  if (!(temperature > 0.0)) throw ContractError("softmax_rows: temperature must be positive");
  const std::size_t m = X.shape[0], n = X.shape[1];
  if (mask && mask->cols != n)
    throw ShapeError("softmax_rows: mask width " + std::to_string(mask->cols) +
                     " for input " + shape_string(X.shape));
  Tensor Y = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      const double v = X.data[i * n + j];
      if (!std::isfinite(v))
        throw NumericError("softmax_rows: non-finite input at (" + std::to_string(i) + ", " +
                           std::to_string(j) + ")");
      mx = std::max(mx, v / temperature);
    }
    if (mx == -std::numeric_limits<double>::infinity())
      throw ContractError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      const double e = std::exp(X.data[i * n + j] / temperature - mx);
      Y.data[i * n + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] /= sum;
  }
  return g.record("softmax_rows", std::move(Y), {x.id}, [m, n, temperature](Graph& gr,
                                                                           std::size_t id) {
    const auto& gy = gr.out_grad(id);
    const auto& Y = gr.node_value(id).data;
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += Y[i * n + j] * gy[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += Y[i * n + j] * (gy[i * n + j] - dot) / temperature;
      }
    });
  });
}

/// Batched score matrix. q is [G*Nq x d], k is [G*Nk x d]; output row
/// (g, i) holds the dot products of query (g, i) with every key of group g.
inline Var grouped_scores(Var q, Var k, std::size_t groups) {
  Graph& g = detail::same_graph({q, k});
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  detail::require_matrix(Q, "grouped_scores");
  detail::require_matrix(K, "grouped_scores");
  if (groups == 0 || Q.shape[0] % groups || K.shape[0] % groups || Q.shape[1] != K.shape[1])
    throw ShapeError("grouped_scores: " + shape_string(Q.shape) + " vs " +
                     shape_string(K.shape) + " in " + std::to_string(groups) + " groups");
  const std::size_t nq = Q.shape[0] / groups, nk = K.shape[0] / groups, d = Q.shape[1];
  Tensor S = Tensor::matrix(groups * nq, nk);
  for (std::size_t b = 0; b < groups; ++b)
    for (std::size_t i = 0; i < nq; ++i) {
      const double* qr = Q.data.data() + (b * nq + i) * d;
      for (std::size_t j = 0; j < nk; ++j) {
        const double* kr = K.data.data() + (b * nk + j) * d;
        double s = 0.0;
        for (std::size_t p = 0; p < d; ++p) s += qr[p] * kr[p];
        S.data[(b * nq + i) * nk + j] = s;
      }
    }
  g.add_macs(static_cast<std::uint64_t>(groups) * nq * nk * d);
  return g.record("grouped_scores", std::move(S), {q.id, k.id},
                  [groups, nq, nk, d](Graph& gr, std::size_t id) {
                    const auto& gs = gr.out_grad(id);
                    const auto& Q = gr.node_value(gr.inputs(id)[0]).data;
                    const auto& K = gr.node_value(gr.inputs(id)[1]).data;
                    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gq) {
                      for (std::size_t b = 0; b < groups; ++b)
                        for (std::size_t i = 0; i < nq; ++i)
                          for (std::size_t j = 0; j < nk; ++j) {
                            const double gv = gs[(b * nq + i) * nk + j];
                            for (std::size_t p = 0; p < d; ++p)
                              gq[(b * nq + i) * d + p] += gv * K[(b * nk + j) * d + p];
                          }
                    });
                    detail::with_input_grad(gr, id, 1, [&](std::vector<double>& gk) {
                      for (std::size_t b = 0; b < groups; ++b)
                        for (std::size_t i = 0; i < nq; ++i)
                          for (std::size_t j = 0; j < nk; ++j) {
                            const double gv = gs[(b * nq + i) * nk + j];
                            for (std::size_t p = 0; p < d; ++p)
                              gk[(b * nk + j) * d + p] += gv * Q[(b * nq + i) * d + p];
                          }
                    });
                  });
}

/// Batched weighted sum. w is [G*Nq x Nk], v is [G*Nk x dv]; output row
/// (g, i) is sum_j w[(g,i), j] * v[(g, j)].
inline Var grouped_mix(Var w, Var v, std::size_t groups) {
  Graph& g = detail::same_graph({w, v});
  const Tensor& W = w.value();
  const Tensor& V = v.value();
  detail::require_matrix(W, "grouped_mix");
  detail::require_matrix(V, "grouped_mix");
  if (groups == 0 || W.shape[0] % groups || V.shape[0] != groups * W.shape[1])
    throw ShapeError("grouped_mix: " + shape_string(W.shape) + " vs " + shape_string(V.shape) +
                     " in " + std::to_string(groups) + " groups");
  const std::size_t nq = W.shape[0] / groups, nk = W.shape[1], dv = V.shape[1];
  Tensor O = Tensor::matrix(groups * nq, dv);
  for (std::size_t b = 0; b < groups; ++b)
    detail::gemm(W.data.data() + b * nq * nk, V.data.data() + b * nk * dv,
                 O.data.data() + b * nq * dv, nq, nk, dv);
  g.add_macs(static_cast<std::uint64_t>(groups) * nq * nk * dv);
  return g.record("grouped_mix", std::move(O), {w.id, v.id},
                  [groups, nq, nk, dv](Graph& gr, std::size_t id) {
                    const auto& go = gr.out_grad(id);
                    const auto& W = gr.node_value(gr.inputs(id)[0]).data;
                    const auto& V = gr.node_value(gr.inputs(id)[1]).data;
                    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gw) {
                      for (std::size_t b = 0; b < groups; ++b)
                        for (std::size_t i = 0; i < nq; ++i)
                          for (std::size_t j = 0; j < nk; ++j) {
                            double s = 0.0;
                            for (std::size_t p = 0; p < dv; ++p)
                              s += go[(b * nq + i) * dv + p] * V[(b * nk + j) * dv + p];
                            gw[(b * nq + i) * nk + j] += s;
                          }
                    });
                    detail::with_input_grad(gr, id, 1, [&](std::vector<double>& gv) {
                      for (std::size_t b = 0; b < groups; ++b)
                        for (std::size_t i = 0; i < nq; ++i)
                          for (std::size_t j = 0; j < nk; ++j) {
                            const double wv = W[(b * nq + i) * nk + j];
                            if (wv == 0.0) continue;
                            for (std::size_t p = 0; p < dv; ++p)
                              gv[(b * nk + j) * dv + p] += wv * go[(b * nq + i) * dv + p];
                          }
                    });
                  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: nothing to concatenate");
  Graph& g = *parts[0].graph;
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::same_graph({parts[0], p});
    const Tensor& t = p.value();
    detail::require_matrix(t, "concat_cols");
    if (t.shape[0] != m)
      throw ShapeError("concat_cols: row counts differ: " + shape_string(parts[0].value().shape) +
                       " vs " + shape_string(t.shape));
    widths.push_back(t.shape[1]);
    ids.push_back(p.id);
    total += t.shape[1];
  }
  Tensor Y = Tensor::matrix(m, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(t.data.data() + i * widths[k], widths[k], Y.data.data() + i * total + off);
    off += widths[k];
  }
  return g.record("concat_cols", std::move(Y), ids,
                  [m, total, widths](Graph& gr, std::size_t id) {
                    const auto& gy = gr.out_grad(id);
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                      detail::with_input_grad(gr, id, k, [&](std::vector<double>& gx) {
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < widths[k]; ++j)
                            gx[i * widths[k] + j] += gy[i * total + off + j];
                      });
                      off += widths[k];
                    }
                  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat_cols(std::span<const Var>(v));
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Graph& g = detail::same_graph({x});
  const Tensor& X = x.value();
  detail::require_matrix(X, "slice_cols");
  const std::size_t m = X.shape[0], n = X.shape[1];
  if (count == 0 || begin + count > n)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + shape_string(X.shape));
  Tensor Y = Tensor::matrix(m, count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(X.data.data() + i * n + begin, count, Y.data.data() + i * count);
  return g.record("slice_cols", std::move(Y), {x.id}, [m, n, begin, count](Graph& gr,
                                                                          std::size_t id) {
    const auto& gy = gr.out_grad(id);
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += gy[i * count + j];
    });
  });
}

/// Row-major reinterpretation; the data order is unchanged.
inline Var reshape(Var x, std::size_t rows, std::size_t cols) {
  Graph& g = detail::same_graph({x});
  const Tensor& X = x.value();
  if (rows * cols != X.numel())
    throw ShapeError("reshape: " + shape_string(X.shape) + " to [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  Tensor Y({rows, cols}, X.data);
  return g.record("reshape", std::move(Y), {x.id}, [](Graph& gr, std::size_t id) {
    const auto& gy = gr.out_grad(id);
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  });
}

/// Tiles a single row m times.
inline Var repeat_rows(Var x, std::size_t m) {
  Graph& g = detail::same_graph({x});
  const Tensor& X = x.value();
  detail::require_matrix(X, "repeat_rows");
  if (X.shape[0] != 1) throw ShapeError("repeat_rows: expected one row, got " + shape_string(X.shape));
  const std::size_t n = X.shape[1];
  Tensor Y = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(X.data.data(), n, Y.data.data() + i * n);
  return g.record("repeat_rows", std::move(Y), {x.id}, [m, n](Graph& gr, std::size_t id) {
    const auto& gy = gr.out_grad(id);
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[j] += gy[i * n + j];
    });
  });
}

/// Multiplies column block j (width `block`) by scale[j].
inline Var scale_col_blocks(Var x, Var scales, std::size_t block) {
  Graph& g = detail::same_graph({x, scales});
  const Tensor& X = x.value();
  const Tensor& L = scales.value();
  detail::require_matrix(X, "scale_col_blocks");
  const std::size_t m = X.shape[0], n = X.shape[1];
  if (block == 0 || n != block * L.numel())
    throw ShapeError("scale_col_blocks: " + shape_string(X.shape) + " with " +
                     std::to_string(L.numel()) + " blocks of " + std::to_string(block));
  Tensor Y = X;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] *= L.data[j / block];
  return g.record("scale_col_blocks", std::move(Y), {x.id, scales.id},
                  [m, n, block](Graph& gr, std::size_t id) {
                    const auto& gy = gr.out_grad(id);
                    const auto& X = gr.node_value(gr.inputs(id)[0]).data;
                    const auto& L = gr.node_value(gr.inputs(id)[1]).data;
                    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                          gx[i * n + j] += gy[i * n + j] * L[j / block];
                    });
                    detail::with_input_grad(gr, id, 1, [&](std::vector<double>& gl) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                          gl[j / block] += gy[i * n + j] * X[i * n + j];
                    });
                  });
}

/// Sum of all entries as a 1x1 tensor.
inline Var sum(Var x) {
  Graph& g = detail::same_graph({x});
  const Tensor& X = x.value();
  double s = 0.0;
  for (double v : X.data) s += v;
  return g.record("sum", Tensor::matrix(1, 1, s), {x.id}, [](Graph& gr, std::size_t id) {
    const double gs = gr.out_grad(id)[0];
    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gx) {
      for (auto& v : gx) v += gs;
    });
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

/// Mean softmax cross-entropy of logits [B x C] against class indices.
inline Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Graph& g = detail::same_graph({logits});
  const Tensor& Z = logits.value();
  detail::require_matrix(Z, "cross_entropy");
  const std::size_t b = Z.shape[0], c = Z.shape[1];
  if (labels.size() != b)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     shape_string(Z.shape));
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c)
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " >= " +
                          std::to_string(c) + " classes");
    const double* z = Z.data.data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(z[j] - lse);
    loss += lse - z[labels[i]];
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return g.record("cross_entropy", Tensor::matrix(1, 1, loss), {logits.id},
                  [b, c, probs = std::move(probs), lab = std::move(lab)](Graph& gr,
                                                                         std::size_t id) {
                    const double gl = gr.out_grad(id)[0] / static_cast<double>(b);
                    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gz) {
                      for (std::size_t i = 0; i < b; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                          gz[i * c + j] += gl * (probs[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
                    });
                  });
}

/// Batch mean of KL(softmax(p_logits) || softmax(q_logits)), where the
/// second distribution is a fixed target.
inline Var kl_divergence_rows(Var p_logits, const Tensor& q_logits) {
  Graph& g = detail::same_graph({p_logits});
  const Tensor& Z = p_logits.value();
  detail::require_matrix(Z, "kl_divergence_rows");
  if (q_logits.shape != Z.shape)
    throw ShapeError("kl_divergence_rows: " + shape_string(Z.shape) + " vs " +
                     shape_string(q_logits.shape));
  const std::size_t b = Z.shape[0], c = Z.shape[1];
  auto log_softmax = [c](const double* z, double* out) {
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[j] = z[j] - lse;
  };
  std::vector<double> logp(b * c), logq(b * c), row_kl(b);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    log_softmax(Z.data.data() + i * c, logp.data() + i * c);
    log_softmax(q_logits.data.data() + i * c, logq.data() + i * c);
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      kl += std::exp(logp[i * c + j]) * (logp[i * c + j] - logq[i * c + j]);
    row_kl[i] = kl;
    total += kl;
  }
  total /= static_cast<double>(b);
  return g.record("kl_divergence_rows", Tensor::matrix(1, 1, total), {p_logits.id},
                  [b, c, logp = std::move(logp), logq = std::move(logq),
                   row_kl = std::move(row_kl)](Graph& gr, std::size_t id) {
                    const double gl = gr.out_grad(id)[0] / static_cast<double>(b);
                    detail::with_input_grad(gr, id, 0, [&](std::vector<double>& gz) {
                      for (std::size_t i = 0; i < b; ++i)
                        for (std::size_t j = 0; j < c; ++j) {
                          const double p = std::exp(logp[i * c + j]);
                          gz[i * c + j] +=
                              gl * p * (logp[i * c + j] - logq[i * c + j] - row_kl[i]);
                        }
                    });
                  });
}

/// Affine map x * w + b with w [in x out] and b [1 x out].
inline Var linear(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

}  // namespace dne::ops
