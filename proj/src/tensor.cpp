#include "qada/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace qada {

using detail::Node;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) throw std::out_of_range("Tensor::dim: axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

std::span<const double> Tensor::grad() const { return node_->grad_buffer(); }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  if (numel() != 1) throw std::invalid_argument("backward: root must hold a single value");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior nodes start from zero on every pass; leaves accumulate.
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Op helpers

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Parent i of a node, or nullptr when it does not need a gradient.
Node* want(Node& n, std::size_t i) {
  Node* p = n.parents[i].get();
  return p->requires_grad ? p : nullptr;
}

void check_suffix(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw std::invalid_argument(std::string(op) + ": shape " + shape_str(sb) +
                                " is not a suffix of " + shape_str(sa));
  }
}

std::size_t last_dim(const Tensor& t) {
  if (t.rank() == 0) throw std::invalid_argument("op needs rank >= 1");
  return t.shape().back();
}

}  // namespace

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  check_suffix(a, b, "add");
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(n);
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % m];
  return make_result(a.shape(), std::move(out), {a, b}, [n, m](Node& r) {
    if (Node* pa = want(r, 0)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += r.grad[i];
    }
    if (Node* pb = want(r, 1)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i % m] += r.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check_suffix(a, b, "mul");
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(n);
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % m];
  return make_result(a.shape(), std::move(out), {a, b}, [n, m](Node& r) {
    const auto& av = r.parents[0]->value;
    const auto& bv = r.parents[1]->value;
    if (Node* pa = want(r, 0)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += r.grad[i] * bv[i % m];
    }
    if (Node* pb = want(r, 1)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i % m] += r.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [s](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * r.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return make_result(a.shape(), std::move(out), {a}, [](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += r.grad[i];
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += r.grad[i] * r.value[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  return make_result(a.shape(), std::move(out), {a}, [](Node& r) {
    const auto& xv = r.parents[0]->value;
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = xv[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      g[i] += r.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(av[i], lo);
  return make_result(a.shape(), std::move(out), {a}, [lo](Node& r) {
    const auto& xv = r.parents[0]->value;
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > lo) g[i] += r.grad[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& w) {
  if (w.rank() != 2) throw std::invalid_argument("matmul: weight must be rank 2");
  const std::size_t k = last_dim(a);
  if (w.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t m = a.numel() / k, n = w.dim(1);
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(w.data().data(), k, n);
  return make_result(std::move(shape), std::move(out), {a, w}, [m, k, n](Node& r) {
    MapC g(r.grad.data(), m, n);
    if (Node* pa = want(r, 0)) {
      Map(pa->grad_buffer().data(), m, k).noalias() += g * MapC(r.parents[1]->value.data(), k, n).transpose();
    }
    if (Node* pw = want(r, 1)) {
      Map(pw->grad_buffer().data(), k, n).noalias() += MapC(r.parents[0]->value.data(), m, k).transpose() * g;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("bmm: expects [G,M,K] and [G,K,N]");
  }
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (bk != k) throw std::invalid_argument("bmm: inner dims differ");
  std::vector<double> out(groups * m * n);
  for (std::size_t g = 0; g < groups; ++g) {
    MapC ag(a.data().data() + g * m * k, m, k);
    Map og(out.data() + g * m * n, m, n);
    if (transpose_b) {
      og.noalias() = ag * MapC(b.data().data() + g * n * k, n, k).transpose();
    } else {
      og.noalias() = ag * MapC(b.data().data() + g * k * n, k, n);
    }
  }
  return make_result({groups, m, n}, std::move(out), {a, b}, [groups, m, k, n, transpose_b](Node& r) {
    Node* pa = want(r, 0);
    Node* pb = want(r, 1);
    const auto& av = r.parents[0]->value;
    const auto& bv = r.parents[1]->value;
    for (std::size_t g = 0; g < groups; ++g) {
      MapC go(r.grad.data() + g * m * n, m, n);
      if (pa) {
        Map ga(pa->grad_buffer().data() + g * m * k, m, k);
        if (transpose_b) {
          ga.noalias() += go * MapC(bv.data() + g * n * k, n, k);
        } else {
          ga.noalias() += go * MapC(bv.data() + g * k * n, k, n).transpose();
        }
      }
      if (pb) {
        MapC ag(av.data() + g * m * k, m, k);
        if (transpose_b) {
          Map(pb->grad_buffer().data() + g * n * k, n, k).noalias() += go.transpose() * ag;
        } else {
          Map(pb->grad_buffer().data() + g * k * n, k, n).noalias() += ag.transpose() * go;
        }
      }
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += r.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t rank = a.rank();
  if (perm.size() != rank) throw std::invalid_argument("permute: wrong permutation length");
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.dim(perm[i]);

  // src[j] is the input offset feeding output element j.
  auto src = std::make_shared<std::vector<std::size_t>>(a.numel());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t j = 0; j < src->size(); ++j) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_strides[perm[i]];
    (*src)[j] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = av[(*src)[j]];
  return make_result(std::move(out_shape), std::move(out), {a}, [src](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < src->size(); ++j) g[(*src)[j]] += r.grad[j];
  });
}

namespace {

// Probabilities of each masked row; shared by softmax and log_softmax.
std::vector<double> row_softmax(std::span<const double> x, std::span<const std::uint8_t> mask, std::size_t n) {
  if (mask.size() != x.size()) throw std::invalid_argument("softmax: mask size differs from input");
  std::vector<double> p(x.size(), 0.0);
  for (std::size_t row = 0; row * n < x.size(); ++row) {
    const std::size_t base = row * n;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (mask[base + j]) top = std::max(top, x[base + j]);
    }
    if (top == -std::numeric_limits<double>::infinity()) {
      throw std::invalid_argument("softmax: row " + std::to_string(row) + " has no unmasked entry");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask[base + j]) {
        p[base + j] = std::exp(x[base + j] - top);
        total += p[base + j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) p[base + j] /= total;
  }
  return p;
}

}  // namespace

Tensor softmax(const Tensor& a, std::span<const std::uint8_t> mask) {
  const std::size_t n = last_dim(a);
  auto p = row_softmax(a.data(), mask, n);
  return make_result(a.shape(), std::move(p), {a}, [n](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t base = 0; base < g.size(); base += n) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += r.grad[base + j] * r.value[base + j];
      for (std::size_t j = 0; j < n; ++j) g[base + j] += r.value[base + j] * (r.grad[base + j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a, std::span<const std::uint8_t> mask) {
  const std::size_t n = last_dim(a);
  auto p = std::make_shared<std::vector<double>>(row_softmax(a.data(), mask, n));
  std::vector<double> out(a.numel(), -std::numeric_limits<double>::infinity());
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (keep[i]) out[i] = std::log((*p)[i]);
  }
  return make_result(a.shape(), std::move(out), {a}, [n, p, keep = std::move(keep)](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t base = 0; base < g.size(); base += n) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (keep[base + j]) total += r.grad[base + j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (keep[base + j]) g[base + j] += r.grad[base + j] - (*p)[base + j] * total;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = last_dim(x);
  if (gamma.numel() != d || beta.numel() != d) throw std::invalid_argument("layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [d, rows, xhat, rstd](Node& r) {
    const auto& gv = r.parents[1]->value;
    Node* px = want(r, 0);
    Node* pg = want(r, 1);
    Node* pb = want(r, 2);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < rows; ++i) {
      const double* go = r.grad.data() + i * d;
      const double* h = xhat->data() + i * d;
      if (pg) {
        auto& g = pg->grad_buffer();
        for (std::size_t j = 0; j < d; ++j) g[j] += go[j] * h[j];
      }
      if (pb) {
        auto& g = pb->grad_buffer();
        for (std::size_t j = 0; j < d; ++j) g[j] += go[j];
      }
      if (px) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dxhat[j] = go[j] * gv[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * h[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        auto& g = px->grad_buffer();
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += (*rstd)[i] * (dxhat[j] - m1 - h[j] * m2);
      }
    }
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::span<const std::uint8_t> row_mask, BatchNormStats& stats, bool training,
                  bool update_running) {
  if (x.rank() != 2) throw std::invalid_argument("batch_norm: expects [N, d]");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (row_mask.size() != rows) throw std::invalid_argument("batch_norm: row mask size mismatch");
  if (gamma.numel() != d || beta.numel() != d) throw std::invalid_argument("batch_norm: affine size mismatch");
  if (stats.running_mean.size() != d) {
    stats.running_mean.assign(d, 0.0);
    stats.running_var.assign(d, 1.0);
  }
  auto xv = x.data();
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < rows; ++i) count += row_mask[i] ? 1 : 0;
  if (training) {
    if (count == 0) throw std::invalid_argument("batch_norm: no rows to normalise");
    for (std::size_t i = 0; i < rows; ++i) {
      if (!row_mask[i]) continue;
      for (std::size_t j = 0; j < d; ++j) mu[j] += xv[i * d + j];
    }
    for (double& m : mu) m /= static_cast<double>(count);
    for (std::size_t i = 0; i < rows; ++i) {
      if (!row_mask[i]) continue;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xv[i * d + j] - mu[j];
        var[j] += c * c;
      }
    }
    for (double& v : var) v /= static_cast<double>(count);
    if (update_running) {
      const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
      for (std::size_t j = 0; j < d; ++j) {
        stats.running_mean[j] = (1.0 - stats.momentum) * stats.running_mean[j] + stats.momentum * mu[j];
        stats.running_var[j] = (1.0 - stats.momentum) * stats.running_var[j] + stats.momentum * var[j] * unbias;
      }
    }
  } else {
    mu = stats.running_mean;
    var = stats.running_var;
  }
  auto rstd = std::make_shared<std::vector<double>>(d);
  for (std::size_t j = 0; j < d; ++j) (*rstd)[j] = 1.0 / std::sqrt(var[j] + stats.eps);
  auto centred = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  auto gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mu[j];
      (*centred)[i * d + j] = c;
      out[i * d + j] = c * (*rstd)[j] * gv[j] + bv[j];
    }
  }
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, d, count, training, rstd, centred, mask = std::move(mask)](Node& r) {
                       const auto& gv = r.parents[1]->value;
                       Node* px = want(r, 0);
                       Node* pg = want(r, 1);
                       Node* pb = want(r, 2);
                       std::vector<double> s1(d, 0.0), s2(d, 0.0);
                       for (std::size_t i = 0; i < rows; ++i) {
                         for (std::size_t j = 0; j < d; ++j) {
                           const double go = r.grad[i * d + j];
                           const double c = (*centred)[i * d + j];
                           if (pg) pg->grad_buffer()[j] += go * c * (*rstd)[j];
                           if (pb) pb->grad_buffer()[j] += go;
                           const double dxhat = go * gv[j];
                           s1[j] += dxhat;
                           s2[j] += dxhat * c;
                         }
                       }
                       if (!px) return;
                       auto& g = px->grad_buffer();
                       const double n = static_cast<double>(count);
                       for (std::size_t i = 0; i < rows; ++i) {
                         for (std::size_t j = 0; j < d; ++j) {
                           const double rs = (*rstd)[j];
                           double v = r.grad[i * d + j] * gv[j] * rs;
                           if (training && mask[i]) {
                             const double dvar = -0.5 * rs * rs * rs * s2[j];
                             const double dmu = -rs * s1[j];
                             v += dvar * 2.0 * (*centred)[i * d + j] / n + dmu / n;
                           }
                           g[i * d + j] += v;
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, std::span<const std::size_t> override_rows,
                 std::span<const double> override_values) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be [V, d]");
  const std::size_t vocab = table.dim(0), d = table.dim(1), n = ids.size();
  if (override_values.size() != override_rows.size() * d) {
    throw std::invalid_argument("embedding: override values do not match rows x dim");
  }
  std::vector<std::uint8_t> overridden(n, 0);
  std::vector<double> out(n * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary");
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  for (std::size_t k = 0; k < override_rows.size(); ++k) {
    const std::size_t row = override_rows[k];
    if (row >= n) throw std::out_of_range("embedding: override row outside input");
    overridden[row] = 1;
    std::copy_n(override_values.data() + k * d, d, out.data() + row * d);
  }
  std::vector<std::int64_t> id_copy(ids.begin(), ids.end());
  return make_result({n, d}, std::move(out), {table},
                     [d, id_copy = std::move(id_copy), overridden = std::move(overridden)](Node& r) {
                       auto& g = r.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < id_copy.size(); ++i) {
                         if (overridden[i]) continue;
                         double* dst = g.data() + id_copy[i] * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += r.grad[i * d + j];
                       }
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: expects [N, d]");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(rows.size() * d);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= n) throw std::out_of_range("gather_rows: row out of range");
    std::copy_n(x.data().data() + rows[k] * d, d, out.data() + k * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), d}, std::move(out), {x}, [d, idx = std::move(idx)](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      for (std::size_t j = 0; j < d; ++j) g[idx[k] * d + j] += r.grad[k * d + j];
    }
  });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> flat_indices) {
  std::vector<double> out(flat_indices.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (flat_indices[k] >= x.numel()) throw std::out_of_range("pick: index out of range");
    out[k] = x.data()[flat_indices[k]];
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  return make_result({idx.size()}, std::move(out), {x}, [idx](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < idx.size(); ++k) g[idx[k]] += r.grad[k];
  });
}

Tensor scale_rows(const Tensor& x, std::span<const double> factors) {
  if (x.rank() != 2 || x.dim(0) != factors.size()) throw std::invalid_argument("scale_rows: expects [N, d] and N factors");
  const std::size_t d = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < factors.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] * factors[i];
  }
  std::vector<double> f(factors.begin(), factors.end());
  return make_result(x.shape(), std::move(out), {x}, [d, f = std::move(f)](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += r.grad[i * d + j] * f[i];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().dim(1);
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != d) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const std::size_t count = parts.size();
  return make_result({rows, d}, std::move(out), parts, [count](Node& r) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < count; ++k) {
      Node* p = r.parents[k].get();
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += r.grad[offset + i];
      }
      offset += n;
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {a}, [](Node& r) {
    auto& g = r.parents[0]->grad_buffer();
    for (double& v : g) v += r.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sq_dist(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw std::invalid_argument("sq_dist: expects [n, d] and [m, d]");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  std::vector<double> out(n * m);
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = av[i * d + c] - bv[j * d + c];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  }
  return make_result({n, m}, std::move(out), {a, b}, [n, m, d](Node& r) {
    const auto& av = r.parents[0]->value;
    const auto& bv = r.parents[1]->value;
    Node* pa = want(r, 0);
    Node* pb = want(r, 1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double go = 2.0 * r.grad[i * m + j];
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = av[i * d + c] - bv[j * d + c];
          if (pa) pa->grad_buffer()[i * d + c] += go * diff;
          if (pb) pb->grad_buffer()[j * d + c] -= go * diff;
        }
      }
    }
  });
}

}  // namespace ops

std::vector<double> masked_softmax(std::span<const double> logits, const std::vector<bool>& mask) {
  if (logits.size() != mask.size()) throw std::invalid_argument("masked_softmax: mask size differs from logits");
  double top = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    any = true;
    top = std::max(top, logits[i]);
  }
  if (!any) throw std::invalid_argument("masked_softmax: mask selects no position");
  std::vector<double> p(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    p[i] = std::exp(logits[i] - top);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

}  // namespace qada
