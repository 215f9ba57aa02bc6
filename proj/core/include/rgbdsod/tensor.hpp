#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace rgbdsod {

/// Dense NCHW shape. Scalars are {1,1,1,1}, per-channel vectors {1,C,1,1},
/// single maps {1,1,H,W}.
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;

  Shape() = default;
  Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Plain dense array, no autograd attached. The exchange type between the
/// data pipeline, the metrics, and the training engine.
template <typename T>
struct ArrayT {
  Shape shape;
  std::vector<T> v;

  ArrayT() = default;
  explicit ArrayT(Shape s, T fill = T(0))
      : shape(s), v(static_cast<std::size_t>(s.numel()), fill) {}

  std::int64_t numel() const { return shape.numel(); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  std::int64_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::int64_t>(n) * shape.c + c) * shape.h + y) * shape.w + x;
  }
  T& at(int n, int c, int y, int x) { return v[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return v[index(n, c, y, x)]; }

  template <typename U>
  ArrayT<U> cast() const {
    ArrayT<U> out(shape);
    for (std::int64_t i = 0; i < numel(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

using FArray = ArrayT<float>;
using DArray = ArrayT<double>;

namespace detail {
template <typename T>
struct NodeT {
  ArrayT<T> value;
  ArrayT<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backward_fn;

  void accumulate(const ArrayT<T>& g);
};
}  // namespace detail

/// Reverse-mode autodiff tensor. Value semantics on a shared graph node;
/// building expressions records the tape, backward() walks it once.
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;
  explicit TensorT(ArrayT<T> value, bool requires_grad = false);
  explicit TensorT(std::shared_ptr<detail::NodeT<T>> node) : node_(std::move(node)) {}

  static TensorT zeros(Shape s, bool requires_grad = false);
  static TensorT full(Shape s, T fill, bool requires_grad = false);
  static TensorT scalar(T v);

  bool defined() const { return node_ != nullptr; }
  Shape shape() const;
  std::int64_t numel() const { return shape().numel(); }

  const ArrayT<T>& value() const;
  ArrayT<T>& mutable_value();  // in-place parameter updates (leaves)
  const ArrayT<T>& grad() const;
  bool has_grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);  // leaves only
  void zero_grad();

  /// Backpropagate from this scalar tensor through the recorded graph.
  void backward() const;

  T item() const;

  const std::shared_ptr<detail::NodeT<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::NodeT<T>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---- elementwise ops (shapes broadcast per-dim where one side is 1) ----
template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> add_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> mul_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> neg(const TensorT<T>& a);
template <typename T> TensorT<T> abs(const TensorT<T>& a);  // subgradient 0 at 0
template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& a);
template <typename T> TensorT<T> exp(const TensorT<T>& a);
template <typename T> TensorT<T> log(const TensorT<T>& a);

// ---- reductions ----
template <typename T> TensorT<T> sum(const TensorT<T>& a);
template <typename T> TensorT<T> mean(const TensorT<T>& a);

// ---- structured ops ----

/// 2-D convolution, zero padding. weight is {out_ch, in_ch/groups, kh, kw};
/// bias (optional, may be undefined) is {1, out_ch, 1, 1}.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight,
                  const TensorT<T>& bias, int stride, int pad, int groups = 1);

/// 2x2 max pooling with stride 2. Requires even spatial dims.
template <typename T> TensorT<T> max_pool2(const TensorT<T>& x);

/// Bilinear resize (half-pixel centers, clamped sampling).
template <typename T> TensorT<T> upsample_bilinear(const TensorT<T>& x, int oh, int ow);

template <typename T> TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs);

template <typename T> TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <typename T> TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <typename T> TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }

// ---- plain array helpers shared across modules ----
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
ArrayT<T> reduce_to(const ArrayT<T>& g, const Shape& target);

template <typename T>
ArrayT<T> bilinear_resize(const ArrayT<T>& x, int oh, int ow);

}  // namespace rgbdsod
