#include "compprobe/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "compprobe/error.hpp"

namespace compprobe::tensor {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

template <typename T>
std::shared_ptr<Node<T>> make_node(Shape shape, const char* op, std::initializer_list<std::shared_ptr<Node<T>>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(numel(shape), T(0));
  n->shape = std::move(shape);
  n->op = op;
  n->is_leaf = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  }
  if (n->requires_grad) n->parents.assign(parents.begin(), parents.end());
  return n;
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(numel(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  require(values.size() == numel(shape), "value count " + std::to_string(values.size()) + " does not match shape " +
                                             shape_string(shape));
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(values);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  require(size() == 1, "item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul shape mismatch " + shape_string(a.shape()) + " @ " + shape_string(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  auto out = make_node<T>({a.dim(0), b.dim(1)}, "matmul", {a.handle(), b.handle()});
  Map<T>(out->value.data(), m, n).noalias() = MapC<T>(a.data().data(), m, k) * MapC<T>(b.data().data(), k, n);
  if (out->requires_grad) {
    out->backward = [m, k, n](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      MapC<T> dc(self.grad.data(), m, n);
      if (pa.requires_grad) Map<T>(pa.ensure_grad().data(), m, k).noalias() += dc * MapC<T>(pb.value.data(), k, n).transpose();
      if (pb.requires_grad) Map<T>(pb.ensure_grad().data(), k, n).noalias() += MapC<T>(pa.value.data(), m, k).transpose() * dc;
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "bmm shape mismatch " + shape_string(a.shape()) + " @ " + shape_string(b.shape()));
  const std::size_t g = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(transpose_b ? b.dim(1) : b.dim(2));
  require(static_cast<Eigen::Index>(transpose_b ? b.dim(2) : b.dim(1)) == k,
          "bmm inner dimension mismatch " + shape_string(a.shape()) + " @ " + shape_string(b.shape()));
  auto out = make_node<T>({g, a.dim(1), static_cast<std::size_t>(n)}, "bmm", {a.handle(), b.handle()});
  const std::size_t sa = static_cast<std::size_t>(m * k), sb = static_cast<std::size_t>(k * n),
                    sc = static_cast<std::size_t>(m * n);
  for (std::size_t i = 0; i < g; ++i) {
    MapC<T> ai(a.data().data() + i * sa, m, k);
    Map<T> ci(out->value.data() + i * sc, m, n);
    if (transpose_b) {
      ci.noalias() = ai * MapC<T>(b.data().data() + i * sb, n, k).transpose();
    } else {
      ci.noalias() = ai * MapC<T>(b.data().data() + i * sb, k, n);
    }
  }
  if (out->requires_grad) {
    out->backward = [g, m, k, n, sa, sb, sc, transpose_b](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
      T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
      for (std::size_t i = 0; i < g; ++i) {
        MapC<T> dc(self.grad.data() + i * sc, m, n);
        MapC<T> ai(pa.value.data() + i * sa, m, k);
        if (transpose_b) {
          MapC<T> bi(pb.value.data() + i * sb, n, k);
          if (ga) Map<T>(ga + i * sa, m, k).noalias() += dc * bi;
          if (gb) Map<T>(gb + i * sb, n, k).noalias() += dc.transpose() * ai;
        } else {
          MapC<T> bi(pb.value.data() + i * sb, k, n);
          if (ga) Map<T>(ga + i * sa, m, k).noalias() += dc * bi.transpose();
          if (gb) Map<T>(gb + i * sb, k, n).noalias() += ai.transpose() * dc;
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  auto out = make_node<T>(a.shape(), "add", {a.handle(), b.handle()});
  const T* x = a.data().data();
  const T* y = b.data().data();
  T* z = out->value.data();
  for (std::size_t i = 0, n = out->value.size(); i < n; ++i) z[i] = x[i] + y[i];
  if (out->requires_grad) {
    out->backward = [](Node<T>& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require(x.rank() >= 1 && bias.rank() == 1 && x.shape().back() == bias.dim(0),
          "add_bias shape mismatch " + shape_string(x.shape()) + " + " + shape_string(bias.shape()));
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.size() / n;
  auto out = make_node<T>(x.shape(), "add_bias", {x.handle(), bias.handle()});
  const T* xv = x.data().data();
  const T* bv = bias.data().data();
  T* z = out->value.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) z[r * n + j] = xv[r * n + j] + bv[j];
  if (out->requires_grad) {
    out->backward = [rows, n](Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pb = *self.parents[1];
      if (px.requires_grad) {
        auto& g = px.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  auto out = make_node<T>(a.shape(), "mul", {a.handle(), b.handle()});
  const T* x = a.data().data();
  const T* y = b.data().data();
  T* z = out->value.data();
  for (std::size_t i = 0, n = out->value.size(); i < n; ++i) z[i] = x[i] * y[i];
  if (out->requires_grad) {
    out->backward = [](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto out = make_node<T>(x.shape(), "scale", {x.handle()});
  const T* xv = x.data().data();
  T* z = out->value.data();
  for (std::size_t i = 0, n = out->value.size(); i < n; ++i) z[i] = xv[i] * factor;
  if (out->requires_grad) {
    out->backward = [factor](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = make_node<T>(x.shape(), "relu", {x.handle()});
  const T* xv = x.data().data();
  T* z = out->value.data();
  for (std::size_t i = 0, n = out->value.size(); i < n; ++i) z[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (out->requires_grad) {
    out->backward = [](Node<T>& self) {
      auto& p = *self.parents[0];
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (p.value[i] > T(0)) g[i] += self.grad[i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require(x.rank() >= 1 && gain.rank() == 1 && bias.rank() == 1 && gain.dim(0) == x.shape().back() &&
              bias.dim(0) == x.shape().back(),
          "layer_norm shape mismatch " + shape_string(x.shape()));
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  auto out = make_node<T>(x.shape(), "layer_norm", {x.handle(), gain.handle(), bias.handle()});
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const T* xv = x.data().data();
  const T* gv = gain.data().data();
  const T* bv = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mean) * is;
      out->value[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  if (out->requires_grad) {
    out->backward = [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      const T* dy = self.grad.data();
      if (pg.requires_grad) {
        auto& g = pg.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[j] += dy[r * n + j] * xhat[r * n + j];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[j] += dy[r * n + j];
      }
      if (px.requires_grad) {
        auto& g = px.ensure_grad();
        const T* gain = pg.value.data();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T d = dy[r * n + j] * gain[j];
            mean_d += d;
            mean_dx += d * xhat[r * n + j];
          }
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T d = dy[r * n + j] * gain[j];
            g[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "softmax axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  auto out = make_node<T>(x.shape(), "softmax", {x.handle()});
  const T* xv = x.data().data();
  T* y = out->value.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      T total = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(xv[base + i * inner] - mx);
        y[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) y[base + i * inner] /= total;
    }
  }
  if (out->requires_grad) {
    out->backward = [outer, inner, len](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      const T* yv = self.value.data();
      const T* dy = self.grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t base = o * len * inner + j;
          T dot = 0;
          for (std::size_t i = 0; i < len; ++i) dot += dy[base + i * inner] * yv[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) g[base + i * inner] += yv[base + i * inner] * (dy[base + i * inner] - dot);
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require(table.rank() == 2, "embedding table must be rank 2, got " + shape_string(table.shape()));
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<int> rows(ids.begin(), ids.end());
  for (int id : rows) require(id >= 0 && static_cast<std::size_t>(id) < v, "embedding id " + std::to_string(id) + " out of range");
  auto out = make_node<T>({rows.size(), d}, "embedding", {table.handle()});
  const T* tv = table.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(tv + static_cast<std::size_t>(rows[i]) * d, d, out->value.data() + i * d);
  if (out->requires_grad) {
    out->backward = [d, rows = std::move(rows)](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        T* dst = g.data() + static_cast<std::size_t>(rows[i]) * d;
        const T* src = self.grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require(logits.rank() == 2 && logits.dim(0) == targets.size(),
          "cross_entropy expects logits [n, v] with n targets, got " + shape_string(logits.shape()));
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  for (int t : tgt) {
    require(t < static_cast<int>(v), "cross_entropy target " + std::to_string(t) + " out of range");
    if (t >= 0) ++count;
  }
  if (count == 0) throw ShapeError("cross_entropy with every position masked as padding");
  auto out = make_node<T>({}, "cross_entropy", {logits.handle()});
  std::vector<T> probs(n * v, T(0));
  const T* lv = logits.data().data();
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (tgt[r] < 0) continue;
    const T* row = lv + r * v;
    T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += -(row[tgt[r]] - mx - std::log(z));
  }
  out->value[0] = total / static_cast<T>(count);
  if (out->requires_grad) {
    out->backward = [n, v, count, tgt = std::move(tgt), probs = std::move(probs)](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      const T s = self.grad[0] / static_cast<T>(count);
      for (std::size_t r = 0; r < n; ++r) {
        if (tgt[r] < 0) continue;
        for (std::size_t j = 0; j < v; ++j) g[r * v + j] += s * probs[r * v + j];
        g[r * v + static_cast<std::size_t>(tgt[r])] -= s;
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::span<const std::size_t> order) {
  const std::size_t rank = x.rank();
  require(order.size() == rank, "permute order length does not match rank");
  std::vector<bool> seen(rank, false);
  for (std::size_t a : order) {
    require(a < rank && !seen[a], "permute order is not a permutation");
    seen[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(order[i]);
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  // source[k] = flat input index feeding flat output index k
  std::vector<std::size_t> source(x.size());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t k = 0; k < source.size(); ++k) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_stride[order[i]];
    source[k] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto out = make_node<T>(out_shape, "permute", {x.handle()});
  const T* xv = x.data().data();
  for (std::size_t k = 0; k < source.size(); ++k) out->value[k] = xv[source[k]];
  if (out->requires_grad) {
    out->backward = [source = std::move(source)](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t k = 0; k < source.size(); ++k) g[source[k]] += self.grad[k];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  auto out = make_node<T>(std::move(shape), "reshape", {x.handle()});
  std::copy(x.data().begin(), x.data().end(), out->value.begin());
  if (out->requires_grad) {
    out->backward = [](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = make_node<T>({}, "sum", {x.handle()});
  T total = 0;
  for (T v : x.data()) total += v;
  out->value[0] = total;
  if (out->requires_grad) {
    out->backward = [](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (auto& gi : g) gi += self.grad[0];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
std::size_t backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return 0;

  // Iterative post-order DFS: every node lands after all of its parents.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (Node<T>* n : order)
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  if (loss.node()->is_leaf) {
    loss.node()->ensure_grad()[0] += T(1);
  } else {
    loss.node()->grad.assign(1, T(1));
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
  return order.size();
}

#define COMPPROBE_INSTANTIATE(T)                                                                 \
  template class Tensor<T>;                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> permute(const Tensor<T>&, std::span<const std::size_t>);                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template std::size_t backward(const Tensor<T>&);

COMPPROBE_INSTANTIATE(float)
COMPPROBE_INSTANTIATE(double)

#undef COMPPROBE_INSTANTIATE

}  // namespace compprobe::tensor
