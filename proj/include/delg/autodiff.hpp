#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "delg/tensor.hpp"

namespace delg {

enum class Padding { same, valid };

using MatRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// One vertex of the reverse-mode tape. Nodes are created in evaluation order,
// so node ids already form a topological order of the graph.
struct Node {
  Tensor value;
  Tensor grad;  // zero-initialized, same shape as value
  std::vector<Node*> parents;
  std::function<void()> backprop;  // scatters this node's grad to parents
  bool barrier = false;            // stop-gradient: never propagates upstream
  size_t id = 0;
};

namespace detail {

struct ConvGeometry {
  int out_h = 0, out_w = 0;
  int pad_top = 0, pad_left = 0;
};

// 'same' pads (k-1) in total, split low/high, which keeps the output size at
// ceil(in/stride) for every kernel size and makes the receptive-field offsets
// independent of the input size.
inline ConvGeometry conv_geometry(int in_h, int in_w, int kh, int kw,
                                  int stride, Padding pad) {
  ConvGeometry g;
  if (pad == Padding::same) {
    g.pad_top = (kh - 1) / 2;
    g.pad_left = (kw - 1) / 2;
    g.out_h = (in_h + stride - 1) / stride;
    g.out_w = (in_w + stride - 1) / stride;
  } else {
    if (in_h < kh || in_w < kw)
      fail(ErrorKind::shape, "conv2d: kernel " + std::to_string(kh) + "x" +
                                 std::to_string(kw) +
                                 " larger than input " + std::to_string(in_h) +
                                 "x" + std::to_string(in_w));
    g.out_h = (in_h - kh) / stride + 1;
    g.out_w = (in_w - kw) / stride + 1;
  }
  return g;
}

inline void im2col(const double* x, int n_batch, int in_h, int in_w, int ch,
                   int kh, int kw, int stride, const ConvGeometry& g,
                   double* col) {
  const int64_t row_len = int64_t(kh) * kw * ch;
  int64_t row = 0;
  for (int n = 0; n < n_batch; ++n) {
    const double* img = x + int64_t(n) * in_h * in_w * ch;
    for (int oh = 0; oh < g.out_h; ++oh) {
      for (int ow = 0; ow < g.out_w; ++ow, ++row) {
        double* dst = col + row * row_len;
        for (int ki = 0; ki < kh; ++ki) {
          const int ih = oh * stride - g.pad_top + ki;
          for (int kj = 0; kj < kw; ++kj, dst += ch) {
            const int iw = ow * stride - g.pad_left + kj;
            if (ih < 0 || ih >= in_h || iw < 0 || iw >= in_w) {
              std::fill(dst, dst + ch, 0.0);
            } else {
              const double* src = img + (int64_t(ih) * in_w + iw) * ch;
              std::copy(src, src + ch, dst);
            }
          }
        }
      }
    }
  }
}

// transpose of im2col: accumulates column-matrix gradients back into the
// input gradient buffer
inline void col2im_add(const double* col, int n_batch, int in_h, int in_w,
                       int ch, int kh, int kw, int stride,
                       const ConvGeometry& g, double* xgrad) {
  const int64_t row_len = int64_t(kh) * kw * ch;
  int64_t row = 0;
  for (int n = 0; n < n_batch; ++n) {
    double* img = xgrad + int64_t(n) * in_h * in_w * ch;
    for (int oh = 0; oh < g.out_h; ++oh) {
      for (int ow = 0; ow < g.out_w; ++ow, ++row) {
        const double* src = col + row * row_len;
        for (int ki = 0; ki < kh; ++ki) {
          const int ih = oh * stride - g.pad_top + ki;
          for (int kj = 0; kj < kw; ++kj, src += ch) {
            const int iw = ow * stride - g.pad_left + kj;
            if (ih < 0 || ih >= in_h || iw < 0 || iw >= in_w) continue;
            double* dst = img + (int64_t(ih) * in_w + iw) * ch;
            for (int c = 0; c < ch; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// acos input clamp; its derivative diverges at the endpoints
constexpr double kCosineClamp = 1.0 - 1e-7;

}  // namespace detail

// Reverse-mode tape over Tensors. One graph per forward pass; parameters are
// copied in as leaves each time and their gradients read back after
// backward(). Not shareable across threads while in use.
class Graph {
 public:
  Node* leaf(Tensor value) { return make(std::move(value), {}); }

  // --- convolution -------------------------------------------------------

  // Cross-correlation over NHWC (rank-4) or HWC (rank-3) input with a
  // [kh,kw,Cin,Cout] kernel. Differentiable in both input and kernel.
  Node* conv2d(Node* x, Node* kernel, int stride, Padding pad) {
    const Tensor& xv = x->value;
    const Tensor& kv = kernel->value;
    const bool batched = xv.rank() == 4;
    if (xv.rank() != 3 && xv.rank() != 4)
      fail(ErrorKind::shape, "conv2d: input must be HWC or NHWC, got " +
                                 xv.shape_str());
    if (kv.rank() != 4)
      fail(ErrorKind::shape,
           "conv2d: kernel must be [kh,kw,Cin,Cout], got " + kv.shape_str());
    if (stride < 1) fail(ErrorKind::precondition, "conv2d: stride must be >= 1");
    const int n_batch = batched ? xv.dim(0) : 1;
    const int in_h = xv.dim(batched ? 1 : 0);
    const int in_w = xv.dim(batched ? 2 : 1);
    const int ch_in = xv.dim(batched ? 3 : 2);
    const int kh = kv.dim(0), kw = kv.dim(1);
    if (kv.dim(2) != ch_in)
      fail(ErrorKind::shape, "conv2d: input channels mismatch, input " +
                                 xv.shape_str() + " vs kernel " +
                                 kv.shape_str());
    const int ch_out = kv.dim(3);
    const auto g = detail::conv_geometry(in_h, in_w, kh, kw, stride, pad);

    const int64_t rows = int64_t(n_batch) * g.out_h * g.out_w;
    const int64_t k_len = int64_t(kh) * kw * ch_in;
    std::vector<double> col(size_t(rows * k_len));
    detail::im2col(xv.data.data(), n_batch, in_h, in_w, ch_in, kh, kw, stride,
                   g, col.data());

    std::vector<int> out_shape =
        batched ? std::vector<int>{n_batch, g.out_h, g.out_w, ch_out}
                : std::vector<int>{g.out_h, g.out_w, ch_out};
    Tensor out(out_shape);
    {
      CMapRM cmat(col.data(), rows, k_len);
      CMapRM kmat(kv.data.data(), k_len, ch_out);
      MapRM omat(out.data.data(), rows, ch_out);
      omat.noalias() = cmat * kmat;
    }

    Node* node = make(std::move(out), {x, kernel});
    node->backprop = [node, x, kernel, n_batch, in_h, in_w, ch_in, kh, kw,
                      stride, g, rows, k_len]() {
      // col is recomputed here; it is cheaper to rebuild than to keep per
      // node for the lifetime of the tape
      std::vector<double> col(size_t(rows * k_len));
      detail::im2col(x->value.data.data(), n_batch, in_h, in_w, ch_in, kh, kw,
                     stride, g, col.data());
      const int ch_out = kernel->value.dim(3);
      CMapRM gmat(node->grad.data.data(), rows, ch_out);
      {
        CMapRM cmat(col.data(), rows, k_len);
        MapRM kgrad(kernel->grad.data.data(), k_len, ch_out);
        kgrad.noalias() += cmat.transpose() * gmat;
      }
      std::vector<double> col_grad(size_t(rows * k_len));
      {
        CMapRM kmat(kernel->value.data.data(), k_len, ch_out);
        MapRM cgrad(col_grad.data(), rows, k_len);
        cgrad.noalias() = gmat * kmat.transpose();
      }
      detail::col2im_add(col_grad.data(), n_batch, in_h, in_w, ch_in, kh, kw,
                         stride, g, x->grad.data.data());
    };
    return node;
  }

  // --- elementwise -------------------------------------------------------

  Node* relu(Node* x) {
    Tensor out = x->value;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Node* node = make(std::move(out), {x});
    node->backprop = [node, x]() {
      const int64_t n = x->value.numel();
      for (int64_t i = 0; i < n; ++i)
        if (x->value[i] > 0.0) x->grad[i] += node->grad[i];
    };
    return node;
  }

  Node* softplus(Node* x) {
    Tensor out = x->value;
    for (double& v : out.data)
      v = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    Node* node = make(std::move(out), {x});
    node->backprop = [node, x]() {
      const int64_t n = x->value.numel();
      for (int64_t i = 0; i < n; ++i)
        x->grad[i] += node->grad[i] * detail::stable_sigmoid(x->value[i]);
    };
    return node;
  }

  Node* add(Node* a, Node* b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    Node* node = make(std::move(out), {a, b});
    node->backprop = [node, a, b]() {
      for (int64_t i = 0; i < node->grad.numel(); ++i) {
        a->grad[i] += node->grad[i];
        b->grad[i] += node->grad[i];
      }
    };
    return node;
  }

  // adds a per-channel bias over the last dimension
  Node* bias_add(Node* x, Node* bias) {
    const int ch = x->value.dim(x->value.rank() - 1);
    if (bias->value.rank() != 1 || bias->value.dim(0) != ch)
      fail(ErrorKind::shape, "bias_add: bias " + bias->value.shape_str() +
                                 " does not match channels of " +
                                 x->value.shape_str());
    Tensor out = x->value;
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] += bias->value[i % ch];
    Node* node = make(std::move(out), {x, bias});
    node->backprop = [node, x, bias, ch]() {
      const int64_t n = node->grad.numel();
      for (int64_t i = 0; i < n; ++i) {
        x->grad[i] += node->grad[i];
        bias->grad[i % ch] += node->grad[i];
      }
    };
    return node;
  }

  // --- pooling and projections -------------------------------------------

  // generalized-mean pooling of a non-negative HWC map to one value per
  // channel: ((1/HW) * sum x^p)^(1/p). p == 1 takes the plain-mean path so
  // it is bit-identical to average pooling.
  Node* gem_pool(Node* x, double power) {
    const Tensor& xv = x->value;
    if (xv.rank() != 3)
      fail(ErrorKind::shape, "gem_pool: expected HWC map, got " + xv.shape_str());
    if (power < 1.0)
      fail(ErrorKind::precondition,
           "gem_pool: power must be >= 1, got " + std::to_string(power));
    for (double v : xv.data)
      if (v < 0.0)
        fail(ErrorKind::precondition,
             "gem_pool: negative activation " + std::to_string(v) +
                 " (map must be post-ReLU)");
    const int spatial = xv.dim(0) * xv.dim(1);
    const int ch = xv.dim(2);
    Tensor out({ch});
    Tensor powered_mean({ch});
    for (int c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (int s = 0; s < spatial; ++s) acc += powv(xv[int64_t(s) * ch + c], power);
      const double m = acc / spatial;
      powered_mean[c] = m;
      out[c] = power == 1.0 ? m : std::pow(m, 1.0 / power);
    }
    Node* node = make(std::move(out), {x});
    node->backprop = [node, x, power, spatial, ch,
                      pm = std::move(powered_mean)]() {
      for (int c = 0; c < ch; ++c) {
        if (pm[c] <= 0.0) continue;  // all-zero channel: subgradient 0
        const double coef = node->grad[c] * node->value[c] / (spatial * pm[c]);
        for (int s = 0; s < spatial; ++s) {
          const int64_t i = int64_t(s) * ch + c;
          x->grad[i] += coef * powv(x->value[i], power - 1.0);
        }
      }
    };
    return node;
  }

  // y = W x, W is [rows, cols], x is [cols]
  Node* matvec(Node* w, Node* x) {
    const Tensor& wv = w->value;
    const Tensor& xv = x->value;
    if (wv.rank() != 2 || xv.rank() != 1 || wv.dim(1) != xv.dim(0))
      fail(ErrorKind::shape, "matvec: incompatible shapes " + wv.shape_str() +
                                 " and " + xv.shape_str());
    const int rows = wv.dim(0), cols = wv.dim(1);
    Tensor out({rows});
    CMapRM wm(wv.data.data(), rows, cols);
    Eigen::Map<const Eigen::VectorXd> xm(xv.data.data(), cols);
    Eigen::Map<Eigen::VectorXd>(out.data.data(), rows).noalias() = wm * xm;
    Node* node = make(std::move(out), {w, x});
    node->backprop = [node, w, x, rows, cols]() {
      CMapRM wm(w->value.data.data(), rows, cols);
      Eigen::Map<const Eigen::VectorXd> xm(x->value.data.data(), cols);
      Eigen::Map<const Eigen::VectorXd> gm(node->grad.data.data(), rows);
      MapRM wg(w->grad.data.data(), rows, cols);
      wg.noalias() += gm * xm.transpose();
      Eigen::Map<Eigen::VectorXd>(x->grad.data.data(), cols).noalias() +=
          wm.transpose() * gm;
    };
    return node;
  }

  // y = W x + b
  Node* fully_connected(Node* x, Node* w, Node* bias) {
    const Tensor& wv = w->value;
    if (bias->value.rank() != 1 || bias->value.dim(0) != wv.dim(0))
      fail(ErrorKind::shape, "fully_connected: bias " +
                                 bias->value.shape_str() +
                                 " does not match weight " + wv.shape_str());
    return add(matvec(w, x), bias);
  }

  Node* l2_normalize(Node* x) {
    const double norm = x->value.l2_norm();
    if (norm <= 1e-12)
      fail(ErrorKind::precondition,
           "l2_normalize: vector norm " + std::to_string(norm) +
               " below 1e-12");
    Tensor out = x->value;
    for (double& v : out.data) v /= norm;
    Node* node = make(std::move(out), {x});
    node->backprop = [node, x, norm]() {
      const int64_t n = node->grad.numel();
      double dot = 0.0;
      for (int64_t i = 0; i < n; ++i) dot += node->grad[i] * node->value[i];
      for (int64_t i = 0; i < n; ++i)
        x->grad[i] += (node->grad[i] - dot * node->value[i]) / norm;
    };
    return node;
  }

  // Identity forward, zero backward: the barrier that keeps the local-feature
  // losses from reaching the backbone.
  Node* stop_gradient(Node* x) {
    Node* node = make(x->value, {x});
    node->barrier = true;
    return node;
  }

  Node* reshape(Node* x, std::vector<int> dims) {
    if (Tensor::checked_numel(dims) != x->value.numel())
      fail(ErrorKind::shape, "reshape: cannot view " + x->value.shape_str() +
                                 " as " + Tensor::shape_str(dims));
    Tensor out = x->value;
    out.shape = std::move(dims);
    Node* node = make(std::move(out), {x});
    node->backprop = [node, x]() {
      for (int64_t i = 0; i < node->grad.numel(); ++i)
        x->grad[i] += node->grad[i];
    };
    return node;
  }

  // extracts sample n from a batched [N,...] tensor
  Node* slice_batch(Node* x, int n) {
    const Tensor& xv = x->value;
    if (xv.rank() < 2 || n < 0 || n >= xv.dim(0))
      fail(ErrorKind::shape, "slice_batch: index " + std::to_string(n) +
                                 " out of " + xv.shape_str());
    std::vector<int> dims(xv.shape.begin() + 1, xv.shape.end());
    const int64_t len = Tensor::checked_numel(dims);
    Tensor out(dims);
    std::copy_n(xv.data.begin() + int64_t(n) * len, len, out.data.begin());
    Node* node = make(std::move(out), {x});
    node->backprop = [node, x, n, len]() {
      for (int64_t i = 0; i < len; ++i)
        x->grad[int64_t(n) * len + i] += node->grad[i];
    };
    return node;
  }

  // y = s * x with a learnable scalar s
  Node* scale_by(Node* x, Node* scalar) {
    if (scalar->value.numel() != 1)
      fail(ErrorKind::shape,
           "scale_by: scale must be scalar, got " + scalar->value.shape_str());
    const double s = scalar->value[0];
    Tensor out = x->value;
    for (double& v : out.data) v *= s;
    Node* node = make(std::move(out), {x, scalar});
    node->backprop = [node, x, scalar, s]() {
      double acc = 0.0;
      for (int64_t i = 0; i < node->grad.numel(); ++i) {
        x->grad[i] += s * node->grad[i];
        acc += node->grad[i] * x->value[i];
      }
      scalar->grad[0] += acc;
    };
    return node;
  }

  // Additive angular margin on the target logit of a cosine vector; the
  // non-target entries pass through unchanged.
  Node* arcface_adjust(Node* cosines, int target, double margin) {
    const Tensor& uv = cosines->value;
    if (uv.rank() != 1)
      fail(ErrorKind::shape,
           "arcface_adjust: expected cosine vector, got " + uv.shape_str());
    if (target < 0 || target >= uv.dim(0))
      fail(ErrorKind::precondition,
           "arcface_adjust: target " + std::to_string(target) + " out of " +
               uv.shape_str());
    Tensor out = uv;
    const double uc =
        std::clamp(uv[target], -detail::kCosineClamp, detail::kCosineClamp);
    const double angle = std::acos(uc) + margin;
    out[target] = std::cos(angle);
    Node* node = make(std::move(out), {cosines});
    node->backprop = [node, cosines, target, angle, uc]() {
      const int64_t n = node->grad.numel();
      for (int64_t i = 0; i < n; ++i) {
        if (i == target) {
          if (std::abs(cosines->value[i]) < detail::kCosineClamp) {
            cosines->grad[i] += node->grad[i] * std::sin(angle) /
                                std::sqrt(1.0 - uc * uc);
          }
          // saturated: clamp derivative is zero
        } else {
          cosines->grad[i] += node->grad[i];
        }
      }
    };
    return node;
  }

  // -log softmax(logits)[target], stable log-sum-exp
  Node* cross_entropy(Node* logits, int target) {
    const Tensor& zv = logits->value;
    if (zv.rank() != 1)
      fail(ErrorKind::shape,
           "cross_entropy: expected logit vector, got " + zv.shape_str());
    if (target < 0 || target >= zv.dim(0))
      fail(ErrorKind::precondition,
           "cross_entropy: target " + std::to_string(target) + " out of " +
               zv.shape_str());
    const int n = zv.dim(0);
    const double zmax = *std::max_element(zv.data.begin(), zv.data.end());
    double sum = 0.0;
    for (double z : zv.data) sum += std::exp(z - zmax);
    const double lse = zmax + std::log(sum);
    Node* node = make(Tensor::scalar(lse - zv[target]), {logits});
    node->backprop = [node, logits, target, zmax, sum, n]() {
      const double g = node->grad[0];
      for (int i = 0; i < n; ++i) {
        const double p = std::exp(logits->value[i] - zmax) / sum;
        logits->grad[i] += g * (p - (i == target ? 1.0 : 0.0));
      }
    };
    return node;
  }

  // mean squared error over all entries
  Node* mse(Node* a, Node* b) {
    require_same_shape(a->value, b->value, "mse");
    const int64_t n = a->value.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = a->value[i] - b->value[i];
      acc += d * d;
    }
    Node* node = make(Tensor::scalar(acc / double(n)), {a, b});
    node->backprop = [node, a, b, n]() {
      const double coef = 2.0 * node->grad[0] / double(n);
      for (int64_t i = 0; i < n; ++i) {
        const double d = a->value[i] - b->value[i];
        a->grad[i] += coef * d;
        b->grad[i] -= coef * d;
      }
    };
    return node;
  }

  // spatially weighted sum: out_c = sum_hw weights[h,w] * features[h,w,c]
  Node* attention_pool(Node* features, Node* weights) {
    const Tensor& fv = features->value;
    const Tensor& wv = weights->value;
    if (fv.rank() != 3 || wv.rank() != 2 || fv.dim(0) != wv.dim(0) ||
        fv.dim(1) != wv.dim(1))
      fail(ErrorKind::shape, "attention_pool: features " + fv.shape_str() +
                                 " vs weights " + wv.shape_str());
    const int spatial = fv.dim(0) * fv.dim(1);
    const int ch = fv.dim(2);
    Tensor out({ch});
    for (int s = 0; s < spatial; ++s)
      for (int c = 0; c < ch; ++c)
        out[c] += wv[s] * fv[int64_t(s) * ch + c];
    Node* node = make(std::move(out), {features, weights});
    node->backprop = [node, features, weights, spatial, ch]() {
      for (int s = 0; s < spatial; ++s) {
        double wg = 0.0;
        for (int c = 0; c < ch; ++c) {
          const int64_t i = int64_t(s) * ch + c;
          features->grad[i] += weights->value[s] * node->grad[c];
          wg += features->value[i] * node->grad[c];
        }
        weights->grad[s] += wg;
      }
    };
    return node;
  }

  // linear combination of scalar nodes
  Node* weighted_sum(const std::vector<std::pair<double, Node*>>& terms) {
    double acc = 0.0;
    std::vector<Node*> parents;
    for (const auto& [coef, term] : terms) {
      if (term->value.numel() != 1)
        fail(ErrorKind::shape, "weighted_sum: non-scalar term " +
                                   term->value.shape_str());
      acc += coef * term->value[0];
      parents.push_back(term);
    }
    Node* node = make(Tensor::scalar(acc), parents);
    std::vector<double> coefs;
    for (const auto& [coef, term] : terms) coefs.push_back(coef);
    node->backprop = [node, coefs]() {
      for (size_t i = 0; i < coefs.size(); ++i)
        node->parents[i]->grad[0] += coefs[i] * node->grad[0];
    };
    return node;
  }

  // --- backward ----------------------------------------------------------

  // Populates grad on every node the loss depends on. Each node is visited
  // exactly once, in reverse creation order (a valid reverse topological
  // order by construction). Nodes behind a barrier keep bitwise-zero grads.
  void backward(Node* loss) {
    if (loss->value.numel() != 1)
      fail(ErrorKind::precondition, "backward: loss must be scalar, got " +
                                        loss->value.shape_str());
    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<Node*> stack{loss};
    reachable[loss->id] = 1;
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (n->barrier) continue;  // do not walk through the barrier
      for (Node* p : n->parents) {
        if (!reachable[p->id]) {
          reachable[p->id] = 1;
          stack.push_back(p);
        }
      }
    }
    loss->grad[0] = 1.0;
    for (size_t i = loss->id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (reachable[n.id] && !n.barrier && n.backprop) n.backprop();
    }
  }

  size_t size() const { return nodes_.size(); }

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

 private:
  static double powv(double base, double exponent) {
    if (exponent == 1.0) return base;
    if (exponent == 2.0) return base * base;
    if (exponent == 3.0) return base * base * base;
    return std::pow(base, exponent);
  }

  Node* make(Tensor value, std::vector<Node*> parents) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.grad = Tensor(value.shape);  // rank-0 shape yields a scalar zero
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.id = nodes_.size() - 1;
    return &n;
  }

  std::deque<Node> nodes_;
};

}  // namespace delg
