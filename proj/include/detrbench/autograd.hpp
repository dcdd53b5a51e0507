#pragma once

#include "detrbench/types.hpp"

#include <functional>
#include <vector>

namespace detrbench::ag {

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
  int id = -1;
};

struct ConvShape {
  int height = 0;
  int width = 0;
  int channels = 0;
};

/// Reverse-mode tape over row-major matrices. Nodes are appended in
/// evaluation order, so a reverse sweep is a valid topological order.
///
/// Activations of spatial layers are stored as (H*W) x C matrices with the
/// pixel index y*W + x on the rows.
class Tape {
 public:
  Var constant(Mat value);
  Var leaf(Mat value);

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  /// Empty matrix when no gradient reached the node.
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Adds `g` to the gradient of `v` before a backward sweep.
  void seed(Var v, const Mat& g);
  void backward();

  Var add(Var a, Var b);
  Var matmul(Var a, Var b);
  /// x * w + b with w: in x out and b: 1 x out.
  Var linear(Var x, Var w, Var b);
  Var silu(Var x);
  /// Per-column x * scale + shift; scale and shift are fixed constants.
  Var affine_columns(Var x, const std::vector<double>& scale, const std::vector<double>& shift);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  /// k x k convolution. weight is (k*k*Cin) x Cout with rows ordered
  /// (ky, kx, cin); `out_shape` receives the output geometry.
  Var conv2d(Var x, const ConvShape& in_shape, Var weight, Var bias, int kernel, int stride, int pad,
             ConvShape* out_shape);
  /// Scaled dot-product attention over `heads` column groups. When
  /// `mean_weights` is non-null it receives the head-averaged n x m weights.
  Var attention(Var q, Var k, Var v, int heads, Mat* mean_weights = nullptr);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var push(Mat value, bool needs_grad, std::function<void()> backward = {});
  Mat& grad_slot(int id);

  std::vector<Node> nodes_;
};

}  // namespace detrbench::ag
