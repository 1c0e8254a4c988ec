#include "d2p/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "d2p/rng.hpp"

namespace d2p {

using detail::Node;
using detail::NodePtr;

namespace {

NodePtr make_node(const Shape& shape, DType dtype, const char* op,
                  std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->dtype = dtype;
  n->value = detail::make_buffer(dtype, shape_numel(shape));
  n->grad = detail::make_buffer(dtype, 0);
  n->is_leaf = false;
  n->op = op;
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  n->requires_grad = rg;
  if (rg) n->parents = std::move(parents);
  return n;
}

void same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) +
                        " vs " + dtype_name(b.dtype()));
  }
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() >= big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1 && a.rank() >= b.rank()) return a.shape();
  if (a.numel() == 1 && b.rank() >= a.rank()) return b.shape();
  if (is_suffix(b.shape(), a.shape())) return a.shape();
  if (is_suffix(a.shape(), b.shape())) return b.shape();
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) +
                   " with " + shape_str(b.shape()));
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  same_dtype(a, b, name);
  const Shape out_shape = broadcast_shape(a, b, name);
  auto out = make_node(out_shape, a.dtype(), name, {a.node_ptr(), b.node_ptr()});
  dispatch(a.dtype(), [&]<class T>(T) {
    const auto& x = a.node().values<T>();
    const auto& y = b.node().values<T>();
    auto& z = out->values<T>();
    const std::size_t n = z.size(), na = x.size(), nb = y.size();
    for (std::size_t i = 0; i < n; ++i) {
      const T u = x[i % na], v = y[i % nb];
      switch (op) {
        case BinOp::kAdd: z[i] = u + v; break;
        case BinOp::kSub: z[i] = u - v; break;
        case BinOp::kMul: z[i] = u * v; break;
        case BinOp::kDiv: z[i] = u / v; break;
      }
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [op](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.grads<T>();
        const auto& x = pa.values<T>();
        const auto& y = pb.values<T>();
        const std::size_t n = g.size(), na = x.size(), nb = y.size();
        if (pa.requires_grad) {
          auto& ga = pa.grads<T>();
          for (std::size_t i = 0; i < n; ++i) {
            switch (op) {
              case BinOp::kAdd:
              case BinOp::kSub: ga[i % na] += g[i]; break;
              case BinOp::kMul: ga[i % na] += g[i] * y[i % nb]; break;
              case BinOp::kDiv: ga[i % na] += g[i] / y[i % nb]; break;
            }
          }
        }
        if (pb.requires_grad) {
          auto& gb = pb.grads<T>();
          for (std::size_t i = 0; i < n; ++i) {
            switch (op) {
              case BinOp::kAdd: gb[i % nb] += g[i]; break;
              case BinOp::kSub: gb[i % nb] -= g[i]; break;
              case BinOp::kMul: gb[i % nb] += g[i] * x[i % na]; break;
              case BinOp::kDiv: {
                const T v = y[i % nb];
                gb[i % nb] -= g[i] * x[i % na] / (v * v);
                break;
              }
            }
          }
        }
      });
    };
  }
  return Tensor(out);
}

// Elementwise unary op given forward f(x) and derivative df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  auto out = make_node(x.shape(), x.dtype(), name, {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = static_cast<T>(f(in[i]));
  });
  if (out->requires_grad) {
    out->backward_fn = [df](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        Node& p = *self.parents[0];
        const auto& g = self.grads<T>();
        const auto& in = p.values<T>();
        const auto& o = self.values<T>();
        auto& gp = p.grads<T>();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gp[i] += g[i] * static_cast<T>(df(in[i], o[i]));
        }
      });
    };
  }
  return Tensor(out);
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1");
  return x.shape().back();
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  same_dtype(a, b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_node({m, n}, a.dtype(), "matmul", {a.node_ptr(), b.node_ptr()});
  dispatch(a.dtype(), [&]<class T>(T) {
    const T* x = a.node().values<T>().data();
    const T* y = b.node().values<T>().data();
    T* z = out->values<T>().data();
    for (std::size_t i = 0; i < m; ++i) {
      T* zi = z + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T xip = x[i * k + p];
        const T* yp = y + p * n;
        for (std::size_t j = 0; j < n; ++j) zi[j] += xip * yp[j];
      }
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [m, k, n](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const T* g = self.grads<T>().data();
        const T* x = pa.values<T>().data();
        const T* y = pb.values<T>().data();
        if (pa.requires_grad) {
          T* ga = pa.grads<T>().data();
          for (std::size_t i = 0; i < m; ++i) {
            const T* gi = g + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const T* yp = y + p * n;
              T acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += gi[j] * yp[j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (pb.requires_grad) {
          T* gb = pb.grads<T>().data();
          for (std::size_t i = 0; i < m; ++i) {
            const T* gi = g + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const T xip = x[i * k + p];
              T* gbp = gb + p * n;
              for (std::size_t j = 0; j < n; ++j) gbp[j] += xip * gi[j];
            }
          }
        }
      });
    };
  }
  return Tensor(out);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kDiv, "div"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](auto v) { return v * factor; },
      [factor](auto, auto) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](auto v) { return v + value; },
      [](auto, auto) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](auto v) { return v > 0 ? v : decltype(v){0}; },
      [](auto v, auto) { return v > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](auto v) { return std::log(v); },
      [](auto v, auto) { return 1.0 / static_cast<double>(v); });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, "sqrt", [](auto v) { return std::sqrt(v); },
      [](auto, auto y) { return 0.5 / static_cast<double>(y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](auto v) { return std::tanh(v); },
      [](auto, auto y) { return 1.0 - static_cast<double>(y) * y; });
}

Tensor clamp_min(const Tensor& x, double floor) {
  return unary(
      x, "clamp_min",
      [floor](auto v) { return v > floor ? v : static_cast<decltype(v)>(floor); },
      [floor](auto v, auto) { return v > floor ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  auto out = make_node({}, x.dtype(), "sum", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    out->values<T>()[0] = std::accumulate(in.begin(), in.end(), T{0});
  });
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const T g = self.grads<T>()[0];
        for (auto& v : self.parents[0]->grads<T>()) v += g;
      });
    };
  }
  return Tensor(out);
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_last(const Tensor& x) {
  const std::size_t n = last_dim(x, "sum_last");
  const std::size_t rows = x.numel() / n;
  auto out = make_node(drop_last(x.shape()), x.dtype(), "sum_last", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += in[r * n + j];
      o[r] = acc;
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [rows, n](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gp[r * n + j] += g[r];
      });
    };
  }
  return Tensor(out);
}

Tensor mean_last(const Tensor& x) {
  return scale(sum_last(x), 1.0 / static_cast<double>(last_dim(x, "mean_last")));
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = last_dim(x, "softmax_rows");
  const std::size_t rows = x.numel() / n;
  auto out = make_node(x.shape(), x.dtype(), "softmax_rows", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = in.data() + r * n;
      T* yr = o.data() + r * n;
      T mx = xr[0];
      for (std::size_t j = 0; j < n; ++j) {
        if (std::isnan(xr[j])) throw NumericError("softmax_rows: NaN input");
        mx = std::max(mx, xr[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) total += (yr[j] = std::exp(xr[j] - mx));
      for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [rows, n](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        const auto& y = self.values<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
          for (std::size_t j = 0; j < n; ++j)
            gp[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
      });
    };
  }
  return Tensor(out);
}

Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t n = last_dim(x, "log_softmax_rows");
  const std::size_t rows = x.numel() / n;
  auto out = make_node(x.shape(), x.dtype(), "log_softmax_rows", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = in.data() + r * n;
      T* yr = o.data() + r * n;
      T mx = xr[0];
      for (std::size_t j = 0; j < n; ++j) {
        if (std::isnan(xr[j])) throw NumericError("log_softmax_rows: NaN input");
        mx = std::max(mx, xr[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) total += std::exp(xr[j] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] - lse;
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [rows, n](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        const auto& y = self.values<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t r = 0; r < rows; ++r) {
          T gsum = 0;
          for (std::size_t j = 0; j < n; ++j) gsum += g[r * n + j];
          for (std::size_t j = 0; j < n; ++j)
            gp[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gsum;
        }
      });
    };
  }
  return Tensor(out);
}

Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> blocked,
                           std::vector<std::size_t>* flagged_rows) {
  const std::size_t n = last_dim(x, "masked_softmax_rows");
  const std::size_t rows = x.numel() / n;
  if (blocked.size() != x.numel()) {
    throw ShapeError("masked_softmax_rows: mask has " + std::to_string(blocked.size()) +
                     " entries for tensor " + shape_str(x.shape()));
  }
  auto out = make_node(x.shape(), x.dtype(), "masked_softmax_rows", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = in.data() + r * n;
      const std::uint8_t* br = blocked.data() + r * n;
      T* yr = o.data() + r * n;
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < n; ++j) {
        if (br[j]) continue;
        if (std::isnan(xr[j])) throw NumericError("masked_softmax_rows: NaN input");
        mx = std::max(mx, xr[j]);
        any = true;
      }
      if (!any) {
        if (flagged_rows) flagged_rows->push_back(r);
        continue;  // row stays zero
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!br[j]) total += (yr[j] = std::exp(xr[j] - mx));
      }
      for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
    }
  });
  if (out->requires_grad) {
    // Blocked entries have y == 0, so the plain softmax rule leaves them at zero.
    out->backward_fn = [rows, n](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        const auto& y = self.values<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
          for (std::size_t j = 0; j < n; ++j)
            gp[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
      });
    };
  }
  return Tensor(out);
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps) {
  same_dtype(x, gamma, "layer_norm_rows");
  same_dtype(x, beta, "layer_norm_rows");
  const std::size_t n = last_dim(x, "layer_norm_rows");
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layer_norm_rows: gain/bias must be [" + std::to_string(n) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / n;
  auto out = make_node(x.shape(), x.dtype(), "layer_norm_rows",
                       {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()});
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    const auto& ga = gamma.node().values<T>();
    const auto& be = beta.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      double mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += in[r * n + j];
      mu /= static_cast<double>(n);
      double var = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = in[r * n + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double rs = 1.0 / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (std::size_t j = 0; j < n; ++j) {
        const double h = (in[r * n + j] - mu) * rs;
        (*xhat)[r * n + j] = h;
        o[r * n + j] = static_cast<T>(ga[j] * h + be[j]);
      }
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [rows, n, xhat, rstd](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const auto& g = self.grads<T>();
        const auto& ga = pg.values<T>();
        if (pg.requires_grad) {
          auto& gg = pg.grads<T>();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j)
              gg[j] += static_cast<T>(g[r * n + j] * (*xhat)[r * n + j]);
        }
        if (pb.requires_grad) {
          auto& gb = pb.grads<T>();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (px.requires_grad) {
          auto& gx = px.grads<T>();
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = static_cast<double>(g[r * n + j]) * ga[j];
              m1 += dh;
              m2 += dh * (*xhat)[r * n + j];
            }
            m1 /= static_cast<double>(n);
            m2 /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = static_cast<double>(g[r * n + j]) * ga[j];
              gx[r * n + j] +=
                  static_cast<T>((*rstd)[r] * (dh - m1 - (*xhat)[r * n + j] * m2));
            }
          }
        }
      });
    };
  }
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Tensor& first = parts.front();
  if (axis >= first.rank()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(first.shape()));
  }
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    same_dtype(first, p, "concat");
    bool ok = p.rank() == first.rank();
    for (std::size_t d = 0; ok && d < p.rank(); ++d) {
      ok = d == axis || p.shape()[d] == first.shape()[d];
    }
    if (!ok) {
      throw ShapeError("concat: shape " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(first.shape()) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += p.shape()[axis];
    extents.push_back(p.shape()[axis]);
    nodes.push_back(p.node_ptr());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
  for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
  const std::size_t total = out_shape[axis];
  auto out = make_node(out_shape, first.dtype(), "concat", nodes);
  dispatch(first.dtype(), [&]<class T>(T) {
    auto& o = out->values<T>();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto& in = parts[k].node().values<T>();
      const std::size_t chunk = extents[k] * inner;
      for (std::size_t r = 0; r < outer; ++r) {
        std::copy_n(in.begin() + r * chunk, chunk, o.begin() + r * total * inner + offset);
      }
      offset += chunk;
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [extents, outer, inner, total](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
          const std::size_t chunk = extents[k] * inner;
          Node& p = *self.parents[k];
          if (p.requires_grad) {
            auto& gp = p.grads<T>();
            for (std::size_t r = 0; r < outer; ++r)
              for (std::size_t i = 0; i < chunk; ++i)
                gp[r * chunk + i] += g[r * total * inner + offset + i];
          }
          offset += chunk;
        }
      });
    };
  }
  return Tensor(out);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.shape()[axis]) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") on axis " + std::to_string(axis) +
                     " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  const std::size_t full = x.shape()[axis];
  auto out = make_node(out_shape, x.dtype(), "slice", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t r = 0; r < outer; ++r) {
      std::copy_n(in.begin() + (r * full + start) * inner, length * inner,
                  o.begin() + r * length * inner);
    }
  });
  if (out->requires_grad) {
    out->backward_fn = [outer, inner, full, start, length](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t i = 0; i < length * inner; ++i)
            gp[(r * full + start) * inner + i] += g[r * length * inner + i];
      });
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto out = make_node(shape, x.dtype(), "reshape", {x.node_ptr()});
  out->value = x.node().value;
  if (out->requires_grad) {
    out->backward_fn = [](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
      });
    };
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: rank-2 only, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto out = make_node({c, r}, x.dtype(), "transpose", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o[j * r + i] = in[i * c + j];
  });
  if (out->requires_grad) {
    out->backward_fn = [r, c](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[j * r + i];
      });
    };
  }
  return Tensor(out);
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) {
    throw ShapeError("embedding_lookup: table must be rank 2, got " +
                     shape_str(table.shape()));
  }
  if (ids.empty()) throw ContractError("embedding_lookup: empty id sequence");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ContractError("embedding_lookup: id " + std::to_string(id) +
                          " outside vocabulary of " + std::to_string(vocab));
    }
  }
  std::vector<int> idv(ids.begin(), ids.end());
  auto out = make_node({ids.size(), d}, table.dtype(), "embedding", {table.node_ptr()});
  dispatch(table.dtype(), [&]<class T>(T) {
    const auto& t = table.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t i = 0; i < idv.size(); ++i)
      std::copy_n(t.begin() + static_cast<std::size_t>(idv[i]) * d, d, o.begin() + i * d);
  });
  if (out->requires_grad) {
    out->backward_fn = [idv = std::move(idv), d](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t i = 0; i < idv.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            gp[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
      });
    };
  }
  return Tensor(out);
}

Tensor pick_rows(const Tensor& x, std::span<const int> targets) {
  if (x.rank() != 2 || x.dim(0) != targets.size()) {
    throw ShapeError("pick_rows: " + shape_str(x.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t v = x.dim(1);
  std::vector<int> tv(targets.begin(), targets.end());
  for (int t : tv) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ContractError("pick_rows: target " + std::to_string(t) + " outside [0, " +
                          std::to_string(v) + ")");
    }
  }
  auto out = make_node({tv.size()}, x.dtype(), "pick_rows", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t i = 0; i < tv.size(); ++i) o[i] = in[i * v + static_cast<std::size_t>(tv[i])];
  });
  if (out->requires_grad) {
    out->backward_fn = [tv = std::move(tv), v](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t i = 0; i < tv.size(); ++i)
          gp[i * v + static_cast<std::size_t>(tv[i])] += g[i];
      });
    };
  }
  return Tensor(out);
}

Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  Rng rng(seed);
  auto keep = std::make_shared<std::vector<double>>(x.numel());
  const double s = 1.0 / (1.0 - p);
  for (auto& k : *keep) k = rng.uniform() >= p ? s : 0.0;
  auto out = make_node(x.shape(), x.dtype(), "dropout", {x.node_ptr()});
  dispatch(x.dtype(), [&]<class T>(T) {
    const auto& in = x.node().values<T>();
    auto& o = out->values<T>();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] * static_cast<T>((*keep)[i]);
  });
  if (out->requires_grad) {
    out->backward_fn = [keep](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        const auto& g = self.grads<T>();
        auto& gp = self.parents[0]->grads<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * static_cast<T>((*keep)[i]);
      });
    };
  }
  return Tensor(out);
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              const Conv2dOptions& opt) {
  same_dtype(x, kernel, "conv2d");
  if (x.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d: expects rank-4 input and kernel, got " + shape_str(x.shape()) +
                     " and " + shape_str(kernel.shape()));
  }
  if (opt.groups == 0 || opt.stride == 0) {
    throw ConfigError("conv2d: groups and stride must be positive");
  }
  const std::size_t B = x.dim(0), cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t G = opt.groups;
  if (cin % G != 0 || cout % G != 0) {
    throw ConfigError("conv2d: channels (in " + std::to_string(cin) + ", out " +
                      std::to_string(cout) + ") not divisible by groups " +
                      std::to_string(G));
  }
  const std::size_t cin_g = cin / G, cout_g = cout / G;
  if (kernel.dim(1) != cin_g) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)) + " input channels per group, input has " +
                     std::to_string(cin_g));
  }
  const std::size_t Hp = H + opt.pad_top + opt.pad_bottom;
  const std::size_t Wp = W + opt.pad_left + opt.pad_right;
  if (Hp < kh || Wp < kw) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + std::to_string(Hp) + "x" +
                     std::to_string(Wp));
  }
  const std::size_t Ho = (Hp - kh) / opt.stride + 1;
  const std::size_t Wo = (Wp - kw) / opt.stride + 1;
  const bool has_bias = bias.defined();
  std::vector<NodePtr> parents{x.node_ptr(), kernel.node_ptr()};
  if (has_bias) {
    same_dtype(x, bias, "conv2d");
    if (bias.shape() != Shape{cout}) {
      throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " +
                       std::to_string(cout) + " output channels");
    }
    parents.push_back(bias.node_ptr());
  }
  auto out = make_node({B, cout, Ho, Wo}, x.dtype(), "conv2d", parents);

  // Visits every (output pixel, input pixel, weight) triple in a fixed order.
  struct Geometry {
    std::size_t B, cin_g, cout_g, G, H, W, kh, kw, Ho, Wo, stride, pt, pl;
  };
  const Geometry geo{B, cin_g, cout_g, G, H, W, kh, kw, Ho, Wo, opt.stride, opt.pad_top,
                     opt.pad_left};
  auto for_each_tap = [](const Geometry& g, auto&& fn) {
    for (std::size_t b = 0; b < g.B; ++b)
      for (std::size_t grp = 0; grp < g.G; ++grp)
        for (std::size_t oc = grp * g.cout_g; oc < (grp + 1) * g.cout_g; ++oc)
          for (std::size_t icl = 0; icl < g.cin_g; ++icl) {
            const std::size_t ic = grp * g.cin_g + icl;
            for (std::size_t ki = 0; ki < g.kh; ++ki)
              for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const std::size_t widx = ((oc * g.cin_g + icl) * g.kh + ki) * g.kw + kj;
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                  const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pt);
                  if (ih < 0 || ih >= static_cast<long>(g.H)) continue;
                  // ow range with iw = ow*stride + kj - pl inside [0, W)
                  for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                    const long iw =
                        static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pl);
                    if (iw < 0 || iw >= static_cast<long>(g.W)) continue;
                    const std::size_t xidx =
                        ((b * g.G * g.cin_g + ic) * g.H + static_cast<std::size_t>(ih)) * g.W +
                        static_cast<std::size_t>(iw);
                    const std::size_t oidx = ((b * g.G * g.cout_g + oc) * g.Ho + oh) * g.Wo + ow;
                    fn(xidx, widx, oidx);
                  }
                }
              }
          }
  };

  dispatch(x.dtype(), [&]<class T>(T) {
    const T* in = x.node().values<T>().data();
    const T* w = kernel.node().values<T>().data();
    T* o = out->values<T>().data();
    if (has_bias) {
      const auto& bv = bias.node().values<T>();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oc = 0; oc < cout; ++oc)
          std::fill_n(o + (b * cout + oc) * Ho * Wo, Ho * Wo, bv[oc]);
    }
    for_each_tap(geo, [&](std::size_t xi, std::size_t wi, std::size_t oi) {
      o[oi] += w[wi] * in[xi];
    });
  });
  if (out->requires_grad) {
    out->backward_fn = [geo, has_bias, for_each_tap](Node& self) {
      dispatch(self.dtype, [&]<class T>(T) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        const T* g = self.grads<T>().data();
        const T* in = px.values<T>().data();
        const T* w = pw.values<T>().data();
        if (px.requires_grad) {
          T* gx = px.grads<T>().data();
          for_each_tap(geo, [&](std::size_t xi, std::size_t wi, std::size_t oi) {
            gx[xi] += w[wi] * g[oi];
          });
        }
        if (pw.requires_grad) {
          T* gw = pw.grads<T>().data();
          for_each_tap(geo, [&](std::size_t xi, std::size_t wi, std::size_t oi) {
            gw[wi] += in[xi] * g[oi];
          });
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grads<T>();
          const std::size_t cout = geo.G * geo.cout_g, plane = geo.Ho * geo.Wo;
          for (std::size_t b = 0; b < geo.B; ++b)
            for (std::size_t oc = 0; oc < cout; ++oc)
              for (std::size_t i = 0; i < plane; ++i) gb[oc] += g[(b * cout + oc) * plane + i];
        }
      });
    };
  }
  return Tensor(out);
}

}  // namespace d2p
