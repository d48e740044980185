#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a 2-D matrix. A Var is a handle to a graph node; nodes keep
// shared ownership of their parents, so a graph lives exactly as long as the
// Vars that reach it. Parameters are leaf nodes created once and reused across
// graphs; their gradients accumulate until zeroed.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace medslip::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Mat value;
  Mat grad;  // empty until touched by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  Mat& grad_ref() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  /// Gradient accumulated by backward(); zero-filled if never touched.
  const Mat& grad() const { return node_->grad_ref(); }
  Mat& mutable_grad() { return node_->grad_ref(); }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Mat value);
Var parameter(Mat value);

/// Build an op node. `backward` is only invoked when some parent requires grad.
Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Seed d(root)/d(root) = seed_scale and propagate to all reachable nodes.
/// `root` must be 1x1.
void backward(const Var& root, double seed_scale = 1.0);

// Elementwise / linear algebra.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);        // Hadamard
Var scale(const Var& a, double s);
Var scale_by(const Var& a, const Var& s);   // s is 1x1
Var add_row(const Var& a, const Var& row);  // broadcast 1xC row over rows
Var linear(const Var& x, const Var& weight, const Var& bias);  // x W + b
Var transpose(const Var& a);

Var relu(const Var& a);
Var sigmoid(const Var& a);

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);

Var softmax_rows(const Var& a);
/// Each row divided by max(||row||, eps).
Var l2_normalize_rows(const Var& a, double eps = 1e-8);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
Var mean_rows(const Var& a);  // -> 1 x C
Var sum_all(const Var& a);    // -> 1 x 1
Var mean_all(const Var& a);   // -> 1 x 1

/// Spatial tensors are stored as (H*W) x C matrices, pixel (y, x) at row y*W + x.
struct Spatial {
  Var value;
  int height = 0;
  int width = 0;
  Eigen::Index channels() const { return value.cols(); }
};

/// 2-D convolution. `weight` is (k*k*Cin) x Cout with row index (ky*k + kx)*Cin + c.
Spatial conv2d(const Spatial& x, const Var& weight, const Var& bias, int kernel, int stride,
               int pad);
Spatial upsample2x_nearest(const Spatial& x);
/// Crop to the top-left (h, w) window; used to match skip connection shapes.
Spatial crop(const Spatial& x, int height, int width);
Spatial concat_channels(const Spatial& a, const Spatial& b);

inline int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace medslip::ag
