#include "tsal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tsal/common.hpp"

namespace tsal {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b,
                             const std::string& why = {}) {
  std::string msg = std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                    shape_str(b);
  if (!why.empty()) msg += " (" + why + ")";
  throw ShapeError(msg);
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": invalid shape " + shape_str(a) + " (" + why + ")");
}

template <typename Real>
using NodeP = std::shared_ptr<detail::Node<Real>>;

// Creates the output node, wiring parents and the requires_grad flag.
template <typename Real>
NodeP<Real> make_node(const char* op, Shape shape,
                      std::initializer_list<const BasicTensor<Real>*> parents) {
  auto n = std::make_shared<detail::Node<Real>>();
  n->op = op;
  n->data.assign(shape_numel(shape), Real(0));
  n->shape = std::move(shape);
  for (const auto* p : parents) {
    if (!p || !p->defined()) continue;
    n->parents.push_back(p->node());
    n->requires_grad = n->requires_grad || p->requires_grad();
  }
  return n;
}

template <typename Real>
NodeP<Real> make_node_v(const char* op, Shape shape, const std::vector<BasicTensor<Real>>& parents) {
  auto n = std::make_shared<detail::Node<Real>>();
  n->op = op;
  n->data.assign(shape_numel(shape), Real(0));
  n->shape = std::move(shape);
  for (const auto& p : parents) {
    n->parents.push_back(p.node());
    n->requires_grad = n->requires_grad || p.requires_grad();
  }
  return n;
}

template <typename Real>
detail::Node<Real>* tracked(const BasicTensor<Real>& t) {
  return t.defined() && t.requires_grad() ? t.node().get() : nullptr;
}

bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size() || b.empty()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

bool is_prefix(const Shape& a, const Shape& b) {
  if (b.size() > a.size() || b.empty()) return false;
  return std::equal(b.begin(), b.end(), a.begin());
}

enum class Bcast { kSame, kSuffix, kPrefix };

// Elementwise binary op with the restricted broadcast rules. Returns output node.
template <typename Real, typename Fwd, typename BackA, typename BackB>
BasicTensor<Real> binary(const char* op, const BasicTensor<Real>& a, const BasicTensor<Real>& b,
                         Bcast mode, Fwd fwd, BackA back_a, BackB back_b) {
  const std::size_t n = a.numel();
  const std::size_t m = b.numel();
  auto out = make_node<Real>(op, a.shape(), {&a, &b});
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  Real* po = out->data.data();
  // index of b for flat index i of a
  const auto bi = [mode, m, n](std::size_t i) -> std::size_t {
    switch (mode) {
      case Bcast::kSame: return i;
      case Bcast::kSuffix: return i % m;
      case Bcast::kPrefix: return i / (n / m);
    }
    return i;
  };
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[bi(i)]);
  if (out->requires_grad) {
    auto* self = out.get();
    auto* na = tracked(a);
    auto* nb = tracked(b);
    auto* nbv = b.node().get();
    auto* nav = a.node().get();
    out->backward = [self, na, nb, nav, nbv, bi, n, back_a, back_b] {
      const Real* g = self->grad.data();
      if (na) {
        Real* ga = na->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += back_a(g[i], nav->data[i], nbv->data[bi(i)]);
      }
      if (nb) {
        std::vector<double> acc(nbv->data.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
          acc[bi(i)] += back_b(g[i], nav->data[i], nbv->data[bi(i)]);
        Real* gb = nb->grad_buffer();
        for (std::size_t j = 0; j < acc.size(); ++j) gb[j] += static_cast<Real>(acc[j]);
      }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
Bcast suffix_mode(const char* op, const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (is_suffix(a.shape(), b.shape())) return Bcast::kSuffix;
  shape_fail(op, a.shape(), b.shape(), "b must equal a or its trailing dims");
}

template <typename Real>
Bcast prefix_mode(const char* op, const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (is_prefix(a.shape(), b.shape())) return Bcast::kPrefix;
  shape_fail(op, a.shape(), b.shape(), "b must equal a or its leading dims");
}

template <typename Real>
BasicTensor<Real> unary(const char* op, const BasicTensor<Real>& x, Real (*fwd)(Real),
                        double (*dydx)(Real x, Real y)) {
  auto out = make_node<Real>(op, x.shape(), {&x});
  const auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) out->data[i] = fwd(xs[i]);
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [self, nx, dydx] {
      Real* gx = nx->grad_buffer();
      for (std::size_t i = 0; i < self->data.size(); ++i)
        gx[i] += static_cast<Real>(self->grad[i] * dydx(nx->data[i], self->data[i]));
    };
  }
  return BasicTensor<Real>::wrap(out);
}

// Splits shape around axis into (outer, len, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---- BasicTensor ------------------------------------------------------------

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, Real fill, bool requires_grad)
    : node_(std::make_shared<detail::Node<Real>>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, std::vector<Real> values, bool requires_grad)
    : node_(std::make_shared<detail::Node<Real>>()) {
  if (values.size() != shape_numel(shape))
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Real>
void BasicTensor<Real>::zero_grad() {
  node_->grad.assign(node_->data.size(), Real(0));
}

template <typename Real>
Real BasicTensor<Real>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

template <typename Real>
void BasicTensor<Real>::backward() const {
  if (numel() != 1)
    throw ShapeError("backward: loss of shape " + shape_str(shape()) + " is not scalar");
  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node<Real>*> order;
  std::unordered_set<detail::Node<Real>*> seen;
  std::vector<std::pair<detail::Node<Real>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      auto* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->backward && n->grad.size() == n->data.size()) n->backward();
  }
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::detach() const {
  return BasicTensor<Real>(node_->shape, node_->data, false);
}

// ---- ops ----------------------------------------------------------------------

template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b, bool transpose_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() == 2) {
    if (sa.empty()) shape_fail("matmul", sa, sb, "a must have rank >= 1");
    const std::size_t K = sa.back();
    const std::size_t N = transpose_b ? sb[0] : sb[1];
    if ((transpose_b ? sb[1] : sb[0]) != K) shape_fail("matmul", sa, sb, "inner dims differ");
    const std::size_t R = a.numel() / K;
    Shape so = sa;
    so.back() = N;
    auto out = make_node<Real>("matmul", so, {&a, &b});
    const Real* A = a.data().data();
    const Real* B = b.data().data();
    std::vector<double> acc(N);
    for (std::size_t r = 0; r < R; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0);
      if (transpose_b) {
        for (std::size_t n = 0; n < N; ++n) {
          double s = 0.0;
          for (std::size_t k = 0; k < K; ++k) s += static_cast<double>(A[r * K + k]) * B[n * K + k];
          acc[n] = s;
        }
      } else {
        for (std::size_t k = 0; k < K; ++k) {
          const double av = A[r * K + k];
          const Real* brow = B + k * N;
          for (std::size_t n = 0; n < N; ++n) acc[n] += av * brow[n];
        }
      }
      for (std::size_t n = 0; n < N; ++n) out->data[r * N + n] = static_cast<Real>(acc[n]);
    }
    if (out->requires_grad) {
      auto* self = out.get();
      auto* na = tracked(a);
      auto* nb = tracked(b);
      auto* av = a.node().get();
      auto* bv = b.node().get();
      out->backward = [=] {
        const Real* G = self->grad.data();
        const Real* Av = av->data.data();
        const Real* Bv = bv->data.data();
        if (na) {
          Real* GA = na->grad_buffer();
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t k = 0; k < K; ++k) {
              double s = 0.0;
              for (std::size_t n = 0; n < N; ++n)
                s += static_cast<double>(G[r * N + n]) * (transpose_b ? Bv[n * K + k] : Bv[k * N + n]);
              GA[r * K + k] += static_cast<Real>(s);
            }
        }
        if (nb) {
          std::vector<double> acc(K * N, 0.0);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t k = 0; k < K; ++k) {
              const double aval = Av[r * K + k];
              if (transpose_b) {
                for (std::size_t n = 0; n < N; ++n) acc[n * K + k] += aval * G[r * N + n];
              } else {
                for (std::size_t n = 0; n < N; ++n) acc[k * N + n] += aval * G[r * N + n];
              }
            }
          Real* GB = nb->grad_buffer();
          for (std::size_t i = 0; i < acc.size(); ++i) GB[i] += static_cast<Real>(acc[i]);
        }
      };
    }
    return BasicTensor<Real>::wrap(out);
  }
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0])
    shape_fail("matmul", sa, sb, "expected (K,N) or matching batched rank-3 operands");
  const std::size_t Bn = sa[0], M = sa[1], K = sa[2];
  const std::size_t N = transpose_b ? sb[1] : sb[2];
  if ((transpose_b ? sb[2] : sb[1]) != K) shape_fail("matmul", sa, sb, "inner dims differ");
  auto out = make_node<Real>("matmul", Shape{Bn, M, N}, {&a, &b});
  const Real* A = a.data().data();
  const Real* B = b.data().data();
  // element (b, k, n) of the logical right operand
  const auto bidx = [=](std::size_t bb, std::size_t k, std::size_t n) {
    return transpose_b ? (bb * N + n) * K + k : (bb * K + k) * N + n;
  };
  for (std::size_t bb = 0; bb < Bn; ++bb)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k)
          s += static_cast<double>(A[(bb * M + m) * K + k]) * B[bidx(bb, k, n)];
        out->data[(bb * M + m) * N + n] = static_cast<Real>(s);
      }
  if (out->requires_grad) {
    auto* self = out.get();
    auto* na = tracked(a);
    auto* nb = tracked(b);
    auto* av = a.node().get();
    auto* bv = b.node().get();
    out->backward = [=] {
      const Real* G = self->grad.data();
      if (na) {
        Real* GA = na->grad_buffer();
        for (std::size_t bb = 0; bb < Bn; ++bb)
          for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k) {
              double s = 0.0;
              for (std::size_t n = 0; n < N; ++n)
                s += static_cast<double>(G[(bb * M + m) * N + n]) * bv->data[bidx(bb, k, n)];
              GA[(bb * M + m) * K + k] += static_cast<Real>(s);
            }
      }
      if (nb) {
        Real* GB = nb->grad_buffer();
        for (std::size_t bb = 0; bb < Bn; ++bb)
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t n = 0; n < N; ++n) {
              double s = 0.0;
              for (std::size_t m = 0; m < M; ++m)
                s += static_cast<double>(av->data[(bb * M + m) * K + k]) * G[(bb * M + m) * N + n];
              GB[bidx(bb, k, n)] += static_cast<Real>(s);
            }
      }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return binary<Real>(
      "add", a, b, suffix_mode("add", a, b), [](Real x, Real y) { return x + y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return double(g); });
}

template <typename Real>
BasicTensor<Real> add_prefix(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return binary<Real>(
      "add_prefix", a, b, prefix_mode("add_prefix", a, b), [](Real x, Real y) { return x + y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return double(g); });
}

template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return binary<Real>(
      "mul", a, b, suffix_mode("mul", a, b), [](Real x, Real y) { return x * y; },
      [](Real g, Real, Real y) { return g * y; },
      [](Real g, Real x, Real) { return double(g) * x; });
}

template <typename Real>
BasicTensor<Real> mul_prefix(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  return binary<Real>(
      "mul_prefix", a, b, prefix_mode("mul_prefix", a, b), [](Real x, Real y) { return x * y; },
      [](Real g, Real, Real y) { return g * y; },
      [](Real g, Real x, Real) { return double(g) * x; });
}

template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& a, double s) {
  auto out = make_node<Real>("scale", a.shape(), {&a});
  for (std::size_t i = 0; i < a.numel(); ++i) out->data[i] = static_cast<Real>(a.data()[i] * s);
  if (out->requires_grad) {
    auto* self = out.get();
    auto* na = a.node().get();
    out->backward = [self, na, s] {
      Real* g = na->grad_buffer();
      for (std::size_t i = 0; i < self->grad.size(); ++i) g[i] += static_cast<Real>(self->grad[i] * s);
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> relu(const BasicTensor<Real>& x) {
  return unary<Real>(
      "relu", x, [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? 1.0 : 0.0; });
}

template <typename Real>
BasicTensor<Real> sigmoid(const BasicTensor<Real>& x) {
  return unary<Real>(
      "sigmoid", x,
      [](Real v) {
        // split by sign to avoid overflow in exp
        if (v >= Real(0)) return static_cast<Real>(1.0 / (1.0 + std::exp(-double(v))));
        const double e = std::exp(double(v));
        return static_cast<Real>(e / (1.0 + e));
      },
      [](Real, Real y) { return double(y) * (1.0 - double(y)); });
}

template <typename Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) shape_fail("softmax", x.shape(), "axis out of range");
  const AxisSplit s = split_axis(x.shape(), axis);
  auto out = make_node<Real>("softmax", x.shape(), {&x});
  const Real* X = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, double(X[base + k * s.inner]));
      double z = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) z += std::exp(X[base + k * s.inner] - mx);
      for (std::size_t k = 0; k < s.len; ++k)
        out->data[base + k * s.inner] = static_cast<Real>(std::exp(X[base + k * s.inner] - mx) / z);
    }
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [self, nx, s] {
      Real* gx = nx->grad_buffer();
      const Real* y = self->data.data();
      const Real* g = self->grad.data();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < s.len; ++k)
            dot += double(g[base + k * s.inner]) * y[base + k * s.inner];
          for (std::size_t k = 0; k < s.len; ++k) {
            const std::size_t j = base + k * s.inner;
            gx[j] += static_cast<Real>(double(y[j]) * (double(g[j]) - dot));
          }
        }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, std::size_t norm_size,
                             const BasicTensor<Real>& gamma, const BasicTensor<Real>& beta,
                             double eps) {
  if (norm_size == 0 || x.numel() % norm_size != 0)
    shape_fail("layer_norm", x.shape(), "numel not divisible by norm_size " + std::to_string(norm_size));
  if (gamma.defined() && gamma.numel() != norm_size)
    shape_fail("layer_norm", x.shape(), gamma.shape(), "gamma size");
  if (beta.defined() && beta.numel() != norm_size)
    shape_fail("layer_norm", x.shape(), beta.shape(), "beta size");
  const std::size_t groups = x.numel() / norm_size;
  auto out = make_node<Real>("layer_norm", x.shape(), {&x, &gamma, &beta});
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(groups);
  const Real* X = x.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    const Real* row = X + g * norm_size;
    double mu = 0.0;
    for (std::size_t i = 0; i < norm_size; ++i) mu += row[i];
    mu /= norm_size;
    double var = 0.0;
    for (std::size_t i = 0; i < norm_size; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= norm_size;
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < norm_size; ++i) {
      const double h = (row[i] - mu) * inv_std[g];
      xhat[g * norm_size + i] = h;
      const double gm = gamma.defined() ? double(gamma.data()[i]) : 1.0;
      const double bt = beta.defined() ? double(beta.data()[i]) : 0.0;
      out->data[g * norm_size + i] = static_cast<Real>(h * gm + bt);
    }
  }
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = tracked(x);
    auto* ng = tracked(gamma);
    auto* nb = tracked(beta);
    auto* gv = gamma.defined() ? gamma.node().get() : nullptr;
    out->backward = [self, nx, ng, nb, gv, norm_size, groups, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)] {
      const Real* G = self->grad.data();
      std::vector<double> dg(norm_size, 0.0), db(norm_size, 0.0);
      Real* gx = nx ? nx->grad_buffer() : nullptr;
      std::vector<double> dh(norm_size);
      for (std::size_t g = 0; g < groups; ++g) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t i = 0; i < norm_size; ++i) {
          const std::size_t j = g * norm_size + i;
          const double gm = gv ? double(gv->data[i]) : 1.0;
          dh[i] = G[j] * gm;
          m1 += dh[i];
          m2 += dh[i] * xhat[j];
          dg[i] += G[j] * xhat[j];
          db[i] += G[j];
        }
        m1 /= norm_size;
        m2 /= norm_size;
        if (gx) {
          for (std::size_t i = 0; i < norm_size; ++i) {
            const std::size_t j = g * norm_size + i;
            gx[j] += static_cast<Real>(inv_std[g] * (dh[i] - m1 - xhat[j] * m2));
          }
        }
      }
      if (ng) {
        Real* p = ng->grad_buffer();
        for (std::size_t i = 0; i < norm_size; ++i) p[i] += static_cast<Real>(dg[i]);
      }
      if (nb) {
        Real* p = nb->grad_buffer();
        for (std::size_t i = 0; i < norm_size; ++i) p[i] += static_cast<Real>(db[i]);
      }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& weight,
                         const BasicTensor<Real>& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0)
    shape_fail("conv2d", sx, sw, "expected x (N,Ci,H,W) and weight (Co,Ci,k,k), k odd");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != sw[0]))
    shape_fail("conv2d", sw, bias.shape(), "bias must be (Co)");
  const std::size_t N = sx[0], Ci = sx[1], H = sx[2], W = sx[3], Co = sw[0], K = sw[2];
  const long pad = static_cast<long>(K / 2);
  auto out = make_node<Real>("conv2d", Shape{N, Co, H, W}, {&x, &weight, &bias});
  const Real* X = x.data().data();
  const Real* Wt = weight.data().data();
  const std::size_t plane = H * W;
  // For tap offset d along an axis of length L, valid output range is [lo, hi).
  const auto range = [](long d, std::size_t L, std::size_t& lo, std::size_t& hi) {
    lo = static_cast<std::size_t>(std::max(0L, -d));
    hi = static_cast<std::size_t>(std::min(static_cast<long>(L), static_cast<long>(L) - d));
    if (hi < lo) hi = lo;
  };
  parallel_for(N * Co, [&](std::size_t nc) {
    const std::size_t n = nc / Co, co = nc % Co;
    std::vector<double> acc(plane, bias.defined() ? double(bias.data()[co]) : 0.0);
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const Real* in = X + (n * Ci + ci) * plane;
      for (std::size_t ky = 0; ky < K; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        std::size_t ylo, yhi;
        range(dy, H, ylo, yhi);
        for (std::size_t kx = 0; kx < K; ++kx) {
          const long dx = static_cast<long>(kx) - pad;
          std::size_t xlo, xhi;
          range(dx, W, xlo, xhi);
          const double wv = Wt[((co * Ci + ci) * K + ky) * K + kx];
          if (wv == 0.0) continue;
          for (std::size_t y = ylo; y < yhi; ++y) {
            const Real* src = in + (y + dy) * W + dx;
            double* dst = acc.data() + y * W;
            for (std::size_t xx = xlo; xx < xhi; ++xx) dst[xx] += wv * src[xx];
          }
        }
      }
    }
    Real* o = out->data.data() + (n * Co + co) * plane;
    for (std::size_t i = 0; i < plane; ++i) o[i] = static_cast<Real>(acc[i]);
  });
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = tracked(x);
    auto* nw = tracked(weight);
    auto* nb = tracked(bias);
    auto* xv = x.node().get();
    auto* wv_node = weight.node().get();
    out->backward = [=] {
      const Real* G = self->grad.data();
      const Real* Xv = xv->data.data();
      const Real* Wv = wv_node->data.data();
      if (nb) {
        Real* gb = nb->grad_buffer();
        for (std::size_t co = 0; co < Co; ++co) {
          double s = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const Real* g = G + (n * Co + co) * plane;
            for (std::size_t i = 0; i < plane; ++i) s += g[i];
          }
          gb[co] += static_cast<Real>(s);
        }
      }
      if (nw) {
        Real* gw = nw->grad_buffer();
        parallel_for(Co, [&](std::size_t co) {
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t ky = 0; ky < K; ++ky) {
              const long dy = static_cast<long>(ky) - pad;
              std::size_t ylo, yhi;
              range(dy, H, ylo, yhi);
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long dx = static_cast<long>(kx) - pad;
                std::size_t xlo, xhi;
                range(dx, W, xlo, xhi);
                double s = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                  const Real* g = G + (n * Co + co) * plane;
                  const Real* in = Xv + (n * Ci + ci) * plane;
                  for (std::size_t y = ylo; y < yhi; ++y)
                    for (std::size_t xx = xlo; xx < xhi; ++xx)
                      s += double(g[y * W + xx]) * in[(y + dy) * W + xx + dx];
                }
                gw[((co * Ci + ci) * K + ky) * K + kx] += static_cast<Real>(s);
              }
            }
        });
      }
      if (nx) {
        Real* gx = nx->grad_buffer();
        parallel_for(N * Ci, [&](std::size_t nci) {
          const std::size_t n = nci / Ci, ci = nci % Ci;
          std::vector<double> acc(plane, 0.0);
          for (std::size_t co = 0; co < Co; ++co) {
            const Real* g = G + (n * Co + co) * plane;
            for (std::size_t ky = 0; ky < K; ++ky) {
              const long dy = static_cast<long>(ky) - pad;
              std::size_t ylo, yhi;
              range(dy, H, ylo, yhi);
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long dx = static_cast<long>(kx) - pad;
                std::size_t xlo, xhi;
                range(dx, W, xlo, xhi);
                const double w = Wv[((co * Ci + ci) * K + ky) * K + kx];
                if (w == 0.0) continue;
                for (std::size_t y = ylo; y < yhi; ++y)
                  for (std::size_t xx = xlo; xx < xhi; ++xx)
                    acc[(y + dy) * W + xx + dx] += w * g[y * W + xx];
              }
            }
          }
          Real* dst = gx + (n * Ci + ci) * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] += static_cast<Real>(acc[i]);
        });
      }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> avg_pool2d(const BasicTensor<Real>& x, std::size_t k) {
  const Shape& s = x.shape();
  if (s.size() < 2 || k == 0 || s[s.size() - 2] % k != 0 || s.back() % k != 0)
    shape_fail("avg_pool2d", s, "spatial dims must be divisible by kernel " + std::to_string(k));
  const std::size_t H = s[s.size() - 2], W = s.back(), oh = H / k, ow = W / k;
  const std::size_t planes = x.numel() / (H * W);
  Shape so = s;
  so[so.size() - 2] = oh;
  so.back() = ow;
  auto out = make_node<Real>("avg_pool2d", so, {&x});
  const Real* X = x.data().data();
  const double inv = 1.0 / double(k * k);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) acc += X[p * H * W + (y * k + dy) * W + xx * k + dx];
        out->data[(p * oh + y) * ow + xx] = static_cast<Real>(acc * inv);
      }
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [=] {
      Real* gx = nx->grad_buffer();
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const double g = self->grad[(p * oh + y) * ow + xx] * inv;
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx)
                gx[p * H * W + (y * k + dy) * W + xx * k + dx] += static_cast<Real>(g);
          }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

namespace {

struct LerpTap {
  std::size_t i0 = 0, i1 = 0;
  double a = 0.0;
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = double(in) / double(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double f = std::max(0.0, (o + 0.5) * scale - 0.5);
    const std::size_t i0 = std::min(static_cast<std::size_t>(f), in - 1);
    taps[o] = {i0, std::min(i0 + 1, in - 1), f - double(i0)};
  }
  return taps;
}

}  // namespace

template <typename Real>
BasicTensor<Real> bilinear_upsample(const BasicTensor<Real>& x, std::size_t out_h,
                                    std::size_t out_w) {
  const Shape& s = x.shape();
  if (s.size() < 2 || out_h == 0 || out_w == 0)
    shape_fail("bilinear_upsample", s, "need rank >= 2 and a non-empty output");
  const std::size_t H = s[s.size() - 2], W = s.back();
  const std::size_t planes = x.numel() / (H * W);
  Shape so = s;
  so[so.size() - 2] = out_h;
  so.back() = out_w;
  auto out = make_node<Real>("bilinear_upsample", so, {&x});
  const auto ty = lerp_taps(H, out_h);
  const auto tx = lerp_taps(W, out_w);
  const Real* X = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* in = X + p * H * W;
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto& a = ty[y];
        const auto& b = tx[xx];
        const double v00 = in[a.i0 * W + b.i0], v01 = in[a.i0 * W + b.i1];
        const double v10 = in[a.i1 * W + b.i0], v11 = in[a.i1 * W + b.i1];
        const double top = v00 + b.a * (v01 - v00);
        const double bot = v10 + b.a * (v11 - v10);
        out->data[(p * out_h + y) * out_w + xx] = static_cast<Real>(top + a.a * (bot - top));
      }
  }
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [=] {
      Real* gx = nx->grad_buffer();
      for (std::size_t p = 0; p < planes; ++p) {
        Real* g = gx + p * H * W;
        for (std::size_t y = 0; y < out_h; ++y)
          for (std::size_t xx = 0; xx < out_w; ++xx) {
            const auto& a = ty[y];
            const auto& b = tx[xx];
            const double go = self->grad[(p * out_h + y) * out_w + xx];
            g[a.i0 * W + b.i0] += static_cast<Real>(go * (1 - a.a) * (1 - b.a));
            g[a.i0 * W + b.i1] += static_cast<Real>(go * (1 - a.a) * b.a);
            g[a.i1 * W + b.i0] += static_cast<Real>(go * a.a * (1 - b.a));
            g[a.i1 * W + b.i1] += static_cast<Real>(go * a.a * b.a);
          }
      }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> concat(const std::vector<BasicTensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_fail("concat", s0, "axis out of range");
  Shape so = s0;
  so[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) shape_fail("concat", s0, s, "dims other than the concat axis must agree");
    so[axis] += s[axis];
  }
  auto out = make_node_v<Real>("concat", so, parts);
  const AxisSplit os = split_axis(so, axis);
  std::vector<std::size_t> starts;
  std::size_t at = 0;
  for (const auto& p : parts) {
    starts.push_back(at);
    const std::size_t len = p.shape()[axis];
    const Real* src = p.data().data();
    for (std::size_t o = 0; o < os.outer; ++o)
      std::copy(src + o * len * os.inner, src + (o + 1) * len * os.inner,
                out->data.begin() + static_cast<std::ptrdiff_t>((o * os.len + at) * os.inner));
    at += len;
  }
  if (out->requires_grad) {
    auto* self = out.get();
    std::vector<detail::Node<Real>*> nodes;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
      nodes.push_back(tracked(p));
      lens.push_back(p.shape()[axis]);
    }
    out->backward = [self, nodes, lens, starts, os] {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!nodes[k]) continue;
        Real* g = nodes[k]->grad_buffer();
        const std::size_t len = lens[k];
        for (std::size_t o = 0; o < os.outer; ++o)
          for (std::size_t i = 0; i < len * os.inner; ++i)
            g[o * len * os.inner + i] += self->grad[(o * os.len + starts[k]) * os.inner + i];
      }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> embed(const BasicTensor<Real>& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) shape_fail("embed", table.shape(), "table must be (V, D)");
  const std::size_t V = table.dim(0), D = table.dim(1);
  for (std::size_t idx : indices)
    if (idx >= V) shape_fail("embed", table.shape(), "index " + std::to_string(idx) + " out of range");
  auto out = make_node<Real>("embed", Shape{indices.size(), D}, {&table});
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * D), D,
                out->data.begin() + static_cast<std::ptrdiff_t>(r * D));
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nt = table.node().get();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    out->backward = [self, nt, idx, D] {
      Real* g = nt->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t d = 0; d < D; ++d) g[idx[r] * D + d] += self->grad[r * D + d];
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape, "element count");
  auto out = make_node<Real>("reshape", std::move(shape), {&x});
  std::copy(x.data().begin(), x.data().end(), out->data.begin());
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [self, nx] {
      Real* g = nx->grad_buffer();
      for (std::size_t i = 0; i < self->grad.size(); ++i) g[i] += self->grad[i];
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> permute(const BasicTensor<Real>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) shape_fail("permute", s, "permutation rank");
  std::vector<bool> used(s.size(), false);
  for (std::size_t p : perm) {
    if (p >= s.size() || used[p]) shape_fail("permute", s, "invalid permutation");
    used[p] = true;
  }
  Shape so(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) so[i] = s[perm[i]];
  std::vector<std::size_t> in_stride(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  // source flat index for each output flat index
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(so.size(), 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < so.size(); ++d) off += idx[d] * in_stride[perm[d]];
    src[o] = off;
    for (std::size_t d = so.size(); d-- > 0;) {
      if (++idx[d] < so[d]) break;
      idx[d] = 0;
    }
  }
  auto out = make_node<Real>("permute", so, {&x});
  for (std::size_t o = 0; o < src.size(); ++o) out->data[o] = x.data()[src[o]];
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [self, nx, src = std::move(src)] {
      Real* g = nx->grad_buffer();
      for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self->grad[o];
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> select(const BasicTensor<Real>& x, std::size_t axis, std::size_t index) {
  if (axis >= x.rank() || index >= x.dim(axis))
    shape_fail("select", x.shape(), "axis/index out of range");
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape so = x.shape();
  so.erase(so.begin() + static_cast<std::ptrdiff_t>(axis));
  auto out = make_node<Real>("select", so, {&x});
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i)
      out->data[o * s.inner + i] = x.data()[(o * s.len + index) * s.inner + i];
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [self, nx, s, index] {
      Real* g = nx->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i)
          g[(o * s.len + index) * s.inner + i] += self->grad[o * s.inner + i];
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x) {
  auto out = make_node<Real>("sum", Shape{}, {&x});
  double acc = 0.0;
  for (Real v : x.data()) acc += v;
  out->data[0] = static_cast<Real>(acc);
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    out->backward = [self, nx] {
      Real* g = nx->grad_buffer();
      for (std::size_t i = 0; i < nx->data.size(); ++i) g[i] += self->grad[0];
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x) {
  return scale(sum(x), 1.0 / double(x.numel()));
}

template <typename Real>
BasicTensor<Real> resample(const BasicTensor<Real>& x, const ResamplePlan& plan) {
  if (x.numel() != plan.cols)
    shape_fail("resample", x.shape(), Shape{plan.cols}, "input size must match plan columns");
  auto out = make_node<Real>("resample", Shape{plan.rows}, {&x});
  const Real* X = x.data().data();
  for (std::size_t r = 0; r < plan.rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = plan.offsets[r]; k < plan.offsets[r + 1]; ++k)
      acc += plan.weights[k] * X[plan.indices[k]];
    out->data[r] = static_cast<Real>(acc);
  }
  if (out->requires_grad) {
    auto* self = out.get();
    auto* nx = x.node().get();
    const ResamplePlan* p = &plan;  // plan must outlive the graph
    out->backward = [self, nx, p] {
      Real* g = nx->grad_buffer();
      for (std::size_t r = 0; r < p->rows; ++r) {
        const double go = self->grad[r];
        for (std::size_t k = p->offsets[r]; k < p->offsets[r + 1]; ++k)
          g[p->indices[k]] += static_cast<Real>(p->weights[k] * go);
      }
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> kld_loss(const BasicTensor<Real>& pred, const BasicTensor<Real>& gt) {
  if (pred.numel() != gt.numel()) shape_fail("kld_loss", pred.shape(), gt.shape());
  const std::size_t n = pred.numel();
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sp += pred.data()[i];
    sq += gt.data()[i];
  }
  constexpr double eps = kKldEpsilon;
  std::vector<double> P(n), Q(n);
  for (std::size_t i = 0; i < n; ++i) {
    P[i] = sp > 0.0 ? pred.data()[i] / sp : 0.0;
    Q[i] = sq > 0.0 ? gt.data()[i] / sq : 0.0;
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) loss += Q[i] * std::log(Q[i] / (P[i] + eps) + eps);
  auto out = make_node<Real>("kld_loss", Shape{}, {&pred});
  out->data[0] = static_cast<Real>(loss);
  if (out->requires_grad && sp > 0.0) {
    auto* self = out.get();
    auto* np = pred.node().get();
    out->backward = [self, np, P = std::move(P), Q = std::move(Q), sp, n] {
      std::vector<double> h(n);
      double hp = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = Q[i] / (P[i] + eps);
        h[i] = Q[i] / (r + eps) * (-Q[i] / ((P[i] + eps) * (P[i] + eps)));
        hp += h[i] * P[i];
      }
      Real* g = np->grad_buffer();
      const double go = self->grad[0];
      for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<Real>(go * (h[i] - hp) / sp);
    };
  }
  return BasicTensor<Real>::wrap(out);
}

template <typename Real>
BasicTensor<Real> cc_loss(const BasicTensor<Real>& pred, const BasicTensor<Real>& gt) {
  if (pred.numel() != gt.numel()) shape_fail("cc_loss", pred.shape(), gt.shape());
  const std::size_t n = pred.numel();
  double mp = 0.0, mq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += pred.data()[i];
    mq += gt.data()[i];
  }
  mp /= n;
  mq /= n;
  std::vector<double> pc(n), qc(n);
  double spp = 0.0, sqq = 0.0, spq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pc[i] = pred.data()[i] - mp;
    qc[i] = gt.data()[i] - mq;
    spp += pc[i] * pc[i];
    sqq += qc[i] * qc[i];
    spq += pc[i] * qc[i];
  }
  const double denom = std::sqrt(spp * sqq);
  const double cc = denom > 0.0 ? spq / denom : 0.0;
  auto out = make_node<Real>("cc_loss", Shape{}, {&pred});
  out->data[0] = static_cast<Real>(1.0 - cc);
  if (out->requires_grad && denom > 0.0) {
    auto* self = out.get();
    auto* np = pred.node().get();
    out->backward = [self, np, pc = std::move(pc), qc = std::move(qc), denom, cc, spp, n] {
      Real* g = np->grad_buffer();
      const double go = self->grad[0];
      for (std::size_t i = 0; i < n; ++i)
        g[i] += static_cast<Real>(-go * (qc[i] / denom - cc * pc[i] / spp));
    };
  }
  return BasicTensor<Real>::wrap(out);
}

#define TSAL_INSTANTIATE(R)                                                                       \
  template class BasicTensor<R>;                                                                  \
  template BasicTensor<R> matmul(const BasicTensor<R>&, const BasicTensor<R>&, bool);             \
  template BasicTensor<R> add(const BasicTensor<R>&, const BasicTensor<R>&);                      \
  template BasicTensor<R> add_prefix(const BasicTensor<R>&, const BasicTensor<R>&);               \
  template BasicTensor<R> mul(const BasicTensor<R>&, const BasicTensor<R>&);                      \
  template BasicTensor<R> mul_prefix(const BasicTensor<R>&, const BasicTensor<R>&);               \
  template BasicTensor<R> scale(const BasicTensor<R>&, double);                                   \
  template BasicTensor<R> relu(const BasicTensor<R>&);                                            \
  template BasicTensor<R> sigmoid(const BasicTensor<R>&);                                         \
  template BasicTensor<R> softmax(const BasicTensor<R>&, std::size_t);                            \
  template BasicTensor<R> layer_norm(const BasicTensor<R>&, std::size_t, const BasicTensor<R>&,   \
                                     const BasicTensor<R>&, double);                              \
  template BasicTensor<R> conv2d(const BasicTensor<R>&, const BasicTensor<R>&,                    \
                                 const BasicTensor<R>&);                                          \
  template BasicTensor<R> avg_pool2d(const BasicTensor<R>&, std::size_t);                         \
  template BasicTensor<R> bilinear_upsample(const BasicTensor<R>&, std::size_t, std::size_t);     \
  template BasicTensor<R> concat(const std::vector<BasicTensor<R>>&, std::size_t);                \
  template BasicTensor<R> embed(const BasicTensor<R>&, std::span<const std::size_t>);             \
  template BasicTensor<R> reshape(const BasicTensor<R>&, Shape);                                  \
  template BasicTensor<R> permute(const BasicTensor<R>&, const std::vector<std::size_t>&);        \
  template BasicTensor<R> select(const BasicTensor<R>&, std::size_t, std::size_t);                \
  template BasicTensor<R> sum(const BasicTensor<R>&);                                             \
  template BasicTensor<R> mean(const BasicTensor<R>&);                                            \
  template BasicTensor<R> resample(const BasicTensor<R>&, const ResamplePlan&);                   \
  template BasicTensor<R> kld_loss(const BasicTensor<R>&, const BasicTensor<R>&);                 \
  template BasicTensor<R> cc_loss(const BasicTensor<R>&, const BasicTensor<R>&);

TSAL_INSTANTIATE(float)
TSAL_INSTANTIATE(double)

#undef TSAL_INSTANTIATE

}  // namespace tsal
