#include "medslip/autograd.hpp"

#include <unordered_set>

#include "medslip/errors.hpp"

namespace medslip::ag {

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline bool needs(const std::shared_ptr<Node>& n) { return n->requires_grad; }

}  // namespace

Var constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var parameter(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward_fn = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& root, double seed_scale) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be 1x1");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !p->parents.empty() && visited.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads start from zero on every call; leaf grads accumulate.
  for (Node* n : order) n->grad.resize(0, 0);
  root.node()->grad_ref()(0, 0) += seed_scale;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Mat out = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (needs(pa)) pa->grad_ref().noalias() += self.grad * pb->value.transpose();
    if (needs(pb)) pb->grad_ref().noalias() += pa->value.transpose() * self.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  Mat out = a.value() * b.value().transpose();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (needs(pa)) pa->grad_ref().noalias() += self.grad * pb->value;
    if (needs(pb)) pb->grad_ref().noalias() += self.grad.transpose() * pa->value;
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (needs(p)) p->grad_ref() += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& self) {
    if (needs(self.parents[0])) self.parents[0]->grad_ref() += self.grad;
    if (needs(self.parents[1])) self.parents[1]->grad_ref() -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (needs(pa)) pa->grad_ref() += self.grad.cwiseProduct(pb->value);
    if (needs(pb)) pb->grad_ref() += self.grad.cwiseProduct(pa->value);
  });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](Node& self) {
    self.parents[0]->grad_ref() += self.grad * s;
  });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scale_by: scale must be 1x1");
  return make_op(a.value() * s.scalar(), {a, s}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& ps = self.parents[1];
    if (needs(pa)) pa->grad_ref() += self.grad * ps->value(0, 0);
    if (needs(ps)) ps->grad_ref()(0, 0) += self.grad.cwiseProduct(pa->value).sum();
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  Mat out = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(out), {a, row}, [](Node& self) {
    if (needs(self.parents[0])) self.parents[0]->grad_ref() += self.grad;
    if (needs(self.parents[1])) self.parents[1]->grad_ref() += self.grad.colwise().sum();
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (x.cols() != weight.rows()) throw ShapeError("linear: input width does not match weight");
  if (bias.rows() != 1 || bias.cols() != weight.cols()) throw ShapeError("linear: bias shape");
  Mat out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return make_op(std::move(out), {x, weight, bias}, [](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    if (needs(px)) px->grad_ref().noalias() += self.grad * pw->value.transpose();
    if (needs(pw)) pw->grad_ref().noalias() += px->value.transpose() * self.grad;
    if (needs(pb)) pb->grad_ref() += self.grad.colwise().sum();
  });
}

Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a}, [](Node& self) {
    self.parents[0]->grad_ref() += self.grad.transpose();
  });
}

Var relu(const Var& a) {
  return make_op(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    auto& p = self.parents[0];
    p->grad_ref() += (p->value.array() > 0.0).select(self.grad, 0.0);
  });
}

Var sigmoid(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return make_op(std::move(out), {a}, [](Node& self) {
    const auto& s = self.value.array();
    self.parents[0]->grad_ref().array() += self.grad.array() * s * (1.0 - s);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: range");
  Mat out = a.value().middleCols(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& self) {
    self.parents[0]->grad_ref().middleCols(start, count) += self.grad;
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return make_op(std::move(out), parts, [](Node& self) {
    Eigen::Index o = 0;
    for (auto& p : self.parents) {
      const auto c = p->value.cols();
      if (needs(p)) p->grad_ref() += self.grad.middleCols(o, c);
      o += c;
    }
  });
}

Var softmax_rows(const Var& a) {
  Mat out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return make_op(std::move(out), {a}, [](Node& self) {
    // dx = s * (g - sum(g * s))
    const Mat& s = self.value;
    Eigen::VectorXd dot = (self.grad.cwiseProduct(s)).rowwise().sum();
    Mat gx = s.cwiseProduct(self.grad - dot.replicate(1, s.cols()));
    self.parents[0]->grad_ref() += gx;
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  const Mat& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm().cwiseMax(eps);
  Mat out = x.array().colwise() / norms.array();
  Eigen::VectorXd raw = x.rowwise().norm();
  return make_op(std::move(out), {a}, [norms, raw, eps](Node& self) {
    const Mat& u = self.value;
    Mat gx(u.rows(), u.cols());
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
      if (raw(r) > eps) {
        const double dot = u.row(r).dot(self.grad.row(r));
        gx.row(r) = (self.grad.row(r) - u.row(r) * dot) / norms(r);
      } else {
        gx.row(r) = self.grad.row(r) / eps;
      }
    }
    self.parents[0]->grad_ref() += gx;
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  const auto c = a.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw ShapeError("layer_norm_rows: affine parameter shape");
  const Mat& x = a.value();
  Mat xhat(x.rows(), c);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make_op(std::move(out), {a, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   auto& px = self.parents[0];
                   auto& pg = self.parents[1];
                   auto& pb = self.parents[2];
                   const Mat& g = self.grad;
                   if (needs(pg)) pg->grad_ref() += g.cwiseProduct(xhat).colwise().sum();
                   if (needs(pb)) pb->grad_ref() += g.colwise().sum();
                   if (needs(px)) {
                     const double n = static_cast<double>(xhat.cols());
                     Mat gh = g.array().rowwise() * pg->value.row(0).array();
                     Mat gx(gh.rows(), gh.cols());
                     for (Eigen::Index r = 0; r < gh.rows(); ++r) {
                       const double m1 = gh.row(r).sum() / n;
                       const double m2 = gh.row(r).cwiseProduct(xhat.row(r)).sum() / n;
                       gx.row(r) =
                           (gh.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                     }
                     px->grad_ref() += gx;
                   }
                 });
}

Var mean_rows(const Var& a) {
  const double n = static_cast<double>(a.rows());
  Mat out = a.value().colwise().mean();
  return make_op(std::move(out), {a}, [n](Node& self) {
    auto& p = self.parents[0];
    p->grad_ref().rowwise() += self.grad.row(0) / n;
  });
}

Var sum_all(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(std::move(out), {a}, [](Node& self) {
    self.parents[0]->grad_ref().array() += self.grad(0, 0);
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

namespace {

// Gather kxk patches: rows = output pixels, cols = (ky*k + kx)*C + c.
Mat im2col(const Mat& x, int h, int w, int k, int stride, int pad, int oh, int ow) {
  const auto c = x.cols();
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(oh) * ow, k * k * c);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          cols.row(r).segment((ky * k + kx) * c, c) = x.row(static_cast<Eigen::Index>(iy) * w + ix);
        }
      }
    }
  }
  return cols;
}

void col2im_add(const Mat& gcols, Mat& gx, int h, int w, int k, int stride, int pad, int oh,
                int ow) {
  const auto c = gx.cols();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          gx.row(static_cast<Eigen::Index>(iy) * w + ix) += gcols.row(r).segment((ky * k + kx) * c, c);
        }
      }
    }
  }
}

}  // namespace

Spatial conv2d(const Spatial& x, const Var& weight, const Var& bias, int kernel, int stride,
               int pad) {
  const auto cin = x.channels();
  if (x.value.rows() != static_cast<Eigen::Index>(x.height) * x.width)
    throw ShapeError("conv2d: spatial size does not match row count");
  if (weight.rows() != kernel * kernel * cin) throw ShapeError("conv2d: weight rows");
  if (bias.rows() != 1 || bias.cols() != weight.cols()) throw ShapeError("conv2d: bias shape");
  const int h = x.height, w = x.width;
  const int oh = conv_out_size(h, kernel, stride, pad);
  const int ow = conv_out_size(w, kernel, stride, pad);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: input smaller than kernel");

  Mat cols = im2col(x.value.value(), h, w, kernel, stride, pad, oh, ow);
  Mat out = cols * weight.value();
  out.rowwise() += bias.value().row(0);
  Var y = make_op(std::move(out), {x.value, weight, bias},
                  [cols = std::move(cols), h, w, kernel, stride, pad, oh, ow](Node& self) {
                    auto& px = self.parents[0];
                    auto& pw = self.parents[1];
                    auto& pb = self.parents[2];
                    if (needs(pw)) pw->grad_ref().noalias() += cols.transpose() * self.grad;
                    if (needs(pb)) pb->grad_ref() += self.grad.colwise().sum();
                    if (needs(px)) {
                      Mat gcols = self.grad * pw->value.transpose();
                      col2im_add(gcols, px->grad_ref(), h, w, kernel, stride, pad, oh, ow);
                    }
                  });
  return {y, oh, ow};
}

Spatial upsample2x_nearest(const Spatial& x) {
  const int h = x.height, w = x.width, oh = 2 * h, ow = 2 * w;
  const Mat& v = x.value.value();
  Mat out(static_cast<Eigen::Index>(oh) * ow, v.cols());
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx)
      out.row(static_cast<Eigen::Index>(y) * ow + xx) = v.row(static_cast<Eigen::Index>(y / 2) * w + xx / 2);
  Var r = make_op(std::move(out), {x.value}, [h, w, oh, ow](Node& self) {
    Mat& g = self.parents[0]->grad_ref();
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        g.row(static_cast<Eigen::Index>(y / 2) * w + xx / 2) += self.grad.row(static_cast<Eigen::Index>(y) * ow + xx);
    (void)h;
  });
  return {r, oh, ow};
}

Spatial crop(const Spatial& x, int height, int width) {
  if (height > x.height || width > x.width) throw ShapeError("crop: window larger than input");
  if (height == x.height && width == x.width) return x;
  const int w = x.width;
  const Mat& v = x.value.value();
  Mat out(static_cast<Eigen::Index>(height) * width, v.cols());
  for (int y = 0; y < height; ++y)
    out.middleRows(static_cast<Eigen::Index>(y) * width, width) =
        v.middleRows(static_cast<Eigen::Index>(y) * w, width);
  Var r = make_op(std::move(out), {x.value}, [height, width, w](Node& self) {
    Mat& g = self.parents[0]->grad_ref();
    for (int y = 0; y < height; ++y)
      g.middleRows(static_cast<Eigen::Index>(y) * w, width) +=
          self.grad.middleRows(static_cast<Eigen::Index>(y) * width, width);
  });
  return {r, height, width};
}

Spatial concat_channels(const Spatial& a, const Spatial& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("concat_channels: spatial size");
  return {concat_cols({a.value, b.value}), a.height, a.width};
}

}  // namespace medslip::ag
