#include "detrbench/autograd.hpp"

#include "detrbench/errors.hpp"

#include <cmath>
#include <memory>

namespace detrbench::ag {

namespace {

using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;

void softmax_rows_inplace(Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

}  // namespace

Var Tape::push(Mat value, bool needs_grad, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(backward)});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad_slot(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::constant(Mat value) { return push(std::move(value), false); }

Var Tape::leaf(Mat value) { return push(std::move(value), true); }

void Tape::seed(Var v, const Mat& g) {
  if (g.rows() != value(v).rows() || g.cols() != value(v).cols())
    throw InputError("seed gradient shape does not match node value");
  if (!nodes_[v.id].needs_grad) return;
  grad_slot(v.id) += g;
}

void Tape::backward() {
  for (auto i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.grad.size() != 0 && n.backward) n.backward();
  }
}

Var Tape::add(Var a, Var b) {
  const bool ng = needs_grad(a) || needs_grad(b);
  Var out = push(value(a) + value(b), ng);
  if (ng) {
    nodes_[out.id].backward = [this, a, b, o = out.id] {
      const Mat& g = nodes_[o].grad;
      if (needs_grad(a)) grad_slot(a.id) += g;
      if (needs_grad(b)) grad_slot(b.id) += g;
    };
  }
  return out;
}

Var Tape::matmul(Var a, Var b) {
  const bool ng = needs_grad(a) || needs_grad(b);
  Var out = push(value(a) * value(b), ng);
  if (ng) {
    nodes_[out.id].backward = [this, a, b, o = out.id] {
      const Mat& g = nodes_[o].grad;
      if (needs_grad(a)) grad_slot(a.id).noalias() += g * value(b).transpose();
      if (needs_grad(b)) grad_slot(b.id).noalias() += value(a).transpose() * g;
    };
  }
  return out;
}

Var Tape::linear(Var x, Var w, Var b) {
  const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
  Mat y = value(x) * value(w);
  y.rowwise() += value(b).row(0);
  Var out = push(std::move(y), ng);
  if (ng) {
    nodes_[out.id].backward = [this, x, w, b, o = out.id] {
      const Mat& g = nodes_[o].grad;
      if (needs_grad(x)) grad_slot(x.id).noalias() += g * value(w).transpose();
      if (needs_grad(w)) grad_slot(w.id).noalias() += value(x).transpose() * g;
      if (needs_grad(b)) grad_slot(b.id) += g.colwise().sum();
    };
  }
  return out;
}

Var Tape::silu(Var x) {
  const Mat& xv = value(x);
  Mat sig = (1.0 / (1.0 + (-xv.array()).exp())).matrix();
  Mat y = (xv.array() * sig.array()).matrix();
  const bool ng = needs_grad(x);
  Var out = push(std::move(y), ng);
  if (ng) {
    auto s = std::make_shared<Mat>(std::move(sig));
    nodes_[out.id].backward = [this, x, s, o = out.id] {
      const Mat& g = nodes_[o].grad;
      const auto sa = s->array();
      grad_slot(x.id).array() += g.array() * sa * (1.0 + value(x).array() * (1.0 - sa));
    };
  }
  return out;
}

Var Tape::affine_columns(Var x, const std::vector<double>& scale, const std::vector<double>& shift) {
  const Mat& xv = value(x);
  if (static_cast<Eigen::Index>(scale.size()) != xv.cols() ||
      static_cast<Eigen::Index>(shift.size()) != xv.cols())
    throw InputError("affine_columns: coefficient count does not match columns");
  RowArray sc = Eigen::Map<const RowArray>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  RowArray sh = Eigen::Map<const RowArray>(shift.data(), static_cast<Eigen::Index>(shift.size()));
  Mat y = ((xv.array().rowwise() * sc).rowwise() + sh).matrix();
  const bool ng = needs_grad(x);
  Var out = push(std::move(y), ng);
  if (ng) {
    nodes_[out.id].backward = [this, x, sc, o = out.id] {
      grad_slot(x.id).array() += nodes_[o].grad.array().rowwise() * sc;
    };
  }
  return out;
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Mat& xv = value(x);
  const Eigen::Index n = xv.rows();
  const Eigen::Index d = xv.cols();
  auto xhat = std::make_shared<Mat>(n, d);
  auto inv = std::make_shared<Eigen::VectorXd>(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    (*inv)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mean) * (*inv)(r);
  }
  Mat y = (xhat->array().rowwise() * value(gamma).row(0).array()).matrix();
  y.rowwise() += value(beta).row(0);
  const bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  Var out = push(std::move(y), ng);
  if (ng) {
    nodes_[out.id].backward = [this, x, gamma, beta, xhat, inv, o = out.id] {
      const Mat& g = nodes_[o].grad;
      if (needs_grad(gamma)) grad_slot(gamma.id) += (g.array() * xhat->array()).matrix().colwise().sum();
      if (needs_grad(beta)) grad_slot(beta.id) += g.colwise().sum();
      if (needs_grad(x)) {
        Mat dxhat = (g.array().rowwise() * value(gamma).row(0).array()).matrix();
        Mat& gx = grad_slot(x.id);
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
          const double m1 = dxhat.row(r).mean();
          const double m2 = (dxhat.row(r).array() * xhat->row(r).array()).mean();
          gx.row(r).array() += (*inv)(r) * (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
        }
      }
    };
  }
  return out;
}

Var Tape::conv2d(Var x, const ConvShape& in, Var weight, Var bias, int kernel, int stride, int pad,
                 ConvShape* out_shape) {
  const Mat& xv = value(x);
  if (xv.rows() != static_cast<Eigen::Index>(in.height) * in.width || xv.cols() != in.channels)
    throw InputError("conv2d: activation shape does not match declared geometry");
  const Eigen::Index patch = static_cast<Eigen::Index>(kernel) * kernel * in.channels;
  if (value(weight).rows() != patch) throw InputError("conv2d: weight rows do not match kernel patch");

  const int ho = (in.height + 2 * pad - kernel) / stride + 1;
  const int wo = (in.width + 2 * pad - kernel) / stride + 1;
  auto cols = std::make_shared<Mat>(Mat::Zero(static_cast<Eigen::Index>(ho) * wo, patch));
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= in.width) continue;
          cols->block(row, (static_cast<Eigen::Index>(ky) * kernel + kx) * in.channels, 1, in.channels) =
              xv.row(static_cast<Eigen::Index>(iy) * in.width + ix);
        }
      }
    }
  }
  Mat y = (*cols) * value(weight);
  y.rowwise() += value(bias).row(0);
  if (out_shape) *out_shape = ConvShape{ho, wo, static_cast<int>(y.cols())};

  const bool ng = needs_grad(x) || needs_grad(weight) || needs_grad(bias);
  Var out = push(std::move(y), ng);
  if (ng) {
    nodes_[out.id].backward = [this, x, weight, bias, cols, in, kernel, stride, pad, ho, wo, o = out.id] {
      const Mat& g = nodes_[o].grad;
      if (needs_grad(weight)) grad_slot(weight.id).noalias() += cols->transpose() * g;
      if (needs_grad(bias)) grad_slot(bias.id) += g.colwise().sum();
      if (!needs_grad(x)) return;
      const Mat dcols = g * value(weight).transpose();
      Mat& gx = grad_slot(x.id);
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= in.width) continue;
              gx.row(static_cast<Eigen::Index>(iy) * in.width + ix) +=
                  dcols.block(row, (static_cast<Eigen::Index>(ky) * kernel + kx) * in.channels, 1, in.channels);
            }
          }
        }
      }
    };
  }
  return out;
}

Var Tape::attention(Var q, Var k, Var v, int heads, Mat* mean_weights) {
  const Mat& qv = value(q);
  const Mat& kv = value(k);
  const Mat& vv = value(v);
  const Eigen::Index d = qv.cols();
  if (heads < 1 || d % heads != 0 || kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows())
    throw InputError("attention: incompatible query/key/value shapes");
  const Eigen::Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto weights = std::make_shared<std::vector<Mat>>();
  weights->reserve(heads);
  Mat y(qv.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Mat s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * scale;
    softmax_rows_inplace(s);
    y.middleCols(h * dh, dh).noalias() = s * vv.middleCols(h * dh, dh);
    weights->push_back(std::move(s));
  }
  if (mean_weights) {
    *mean_weights = Mat::Zero(qv.rows(), kv.rows());
    for (const Mat& w : *weights) *mean_weights += w;
    *mean_weights /= static_cast<double>(heads);
  }

  const bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
  Var out = push(std::move(y), ng);
  if (ng) {
    nodes_[out.id].backward = [this, q, k, v, weights, heads, dh, scale, o = out.id] {
      const Mat& g = nodes_[o].grad;
      for (int h = 0; h < heads; ++h) {
        const Mat& a = (*weights)[h];
        const auto gh = g.middleCols(h * dh, dh);
        const Mat da = gh * value(v).middleCols(h * dh, dh).transpose();
        if (needs_grad(v)) grad_slot(v.id).middleCols(h * dh, dh).noalias() += a.transpose() * gh;
        Eigen::VectorXd rs = (da.array() * a.array()).rowwise().sum();
        Mat ds = (a.array() * (da.array().colwise() - rs.array())).matrix() * scale;
        if (needs_grad(q)) grad_slot(q.id).middleCols(h * dh, dh).noalias() += ds * value(k).middleCols(h * dh, dh);
        if (needs_grad(k))
          grad_slot(k.id).middleCols(h * dh, dh).noalias() += ds.transpose() * value(q).middleCols(h * dh, dh);
      }
    };
  }
  return out;
}

}  // namespace detrbench::ag
