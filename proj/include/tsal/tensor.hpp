#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tsal/geometry.hpp"

namespace tsal {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  Real* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    return grad.data();
  }
};

}  // namespace detail

/// Row-major dense tensor with reverse-mode autodiff. Copies share storage;
/// use detach() for an independent copy. Real is float for the engine and
/// double for gradient-check shadows.
template <typename Real>
class BasicTensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<detail::Node<Real>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Real fill = Real(0), bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const Real> data() const { return node_->data; }
  /// Mutable view. Only for leaves outside a live graph (optimizer updates, init).
  std::span<Real> mutable_data() { return node_->data; }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad();

  Real item() const;

  /// Populates grad of every tracked tensor reachable from this scalar.
  void backward() const;

  /// Same values, no history, independent storage.
  BasicTensor detach() const;

  template <typename Other>
  BasicTensor<Other> cast() const {
    std::vector<Other> v(node_->data.begin(), node_->data.end());
    return BasicTensor<Other>(node_->shape, std::move(v), node_->requires_grad);
  }

  const NodePtr& node() const { return node_; }
  static BasicTensor wrap(NodePtr node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// ---- forward ops ------------------------------------------------------------
// All reductions accumulate in double. Shape errors name the op and shapes.

/// a (..., K) x b (K, N) -> (..., N); or batched a (B, M, K) x b (B, K, N).
/// With transpose_b, b is stored as (N, K) / (B, N, K).
template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b,
                         bool transpose_b = false);

/// Same shape, or b equal to the trailing dims of a (bias add).
template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b);
/// b equal to the leading dims of a, broadcast over the rest.
template <typename Real>
BasicTensor<Real> add_prefix(const BasicTensor<Real>& a, const BasicTensor<Real>& b);
template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b);
template <typename Real>
BasicTensor<Real> mul_prefix(const BasicTensor<Real>& a, const BasicTensor<Real>& b);
template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& a, double s);

template <typename Real>
BasicTensor<Real> relu(const BasicTensor<Real>& x);
template <typename Real>
BasicTensor<Real> sigmoid(const BasicTensor<Real>& x);
template <typename Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x, std::size_t axis);

/// Normalizes each contiguous group of norm_size elements (the trailing
/// dims). gamma/beta are optional and, when given, have norm_size elements.
template <typename Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, std::size_t norm_size,
                             const BasicTensor<Real>& gamma = {},
                             const BasicTensor<Real>& beta = {}, double eps = 1e-5);

/// x (N, Ci, H, W), weight (Co, Ci, k, k) with odd k, bias (Co) optional.
/// Stride 1, zero padding k/2.
template <typename Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& weight,
                         const BasicTensor<Real>& bias = {});

/// Non-overlapping k x k mean over the last two dims.
template <typename Real>
BasicTensor<Real> avg_pool2d(const BasicTensor<Real>& x, std::size_t k);

/// Bilinear resize of the last two dims, half-pixel centers.
template <typename Real>
BasicTensor<Real> bilinear_upsample(const BasicTensor<Real>& x, std::size_t out_h,
                                    std::size_t out_w);

template <typename Real>
BasicTensor<Real> concat(const std::vector<BasicTensor<Real>>& parts, std::size_t axis);

/// Rows of table (V, D) at indices -> (n, D).
template <typename Real>
BasicTensor<Real> embed(const BasicTensor<Real>& table, std::span<const std::size_t> indices);

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape);
template <typename Real>
BasicTensor<Real> permute(const BasicTensor<Real>& x, const std::vector<std::size_t>& perm);
/// Drops axis, keeping position index.
template <typename Real>
BasicTensor<Real> select(const BasicTensor<Real>& x, std::size_t axis, std::size_t index);

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x);
template <typename Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x);

/// Applies a sparse linear map to the flattened input; output shape (rows).
template <typename Real>
BasicTensor<Real> resample(const BasicTensor<Real>& x, const ResamplePlan& plan);

inline constexpr double kKldEpsilon = 1e-7;

/// sum Q ln(Q / (P + eps) + eps) with P = pred / sum(pred), Q = gt / sum(gt).
template <typename Real>
BasicTensor<Real> kld_loss(const BasicTensor<Real>& pred, const BasicTensor<Real>& gt);

/// 1 - Pearson correlation between pred and gt.
template <typename Real>
BasicTensor<Real> cc_loss(const BasicTensor<Real>& pred, const BasicTensor<Real>& gt);

}  // namespace tsal
