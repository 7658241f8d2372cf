#include "nextscale/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace nextscale {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
bool wants(const Node<T>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}

template <class T>
std::vector<T>& grad_of(Node<T>& n, std::size_t i) {
  return n.parents[i]->grad_buffer();
}

template <class T>
const Tensor<T>& value_of(const Node<T>& n, std::size_t i) {
  return n.parents[i]->value;
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(s));
}

template <class T, class Fwd, class Deriv>
Var<T> unary(const char* op, const Var<T>& a, Fwd fwd, Deriv deriv) {
  Tensor<T> out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = fwd(x[i]);
  }
  return make_result<T>(op, std::move(out), {a}, [deriv](Node<T>& n) {
    const auto& xv = value_of(n, 0).data;
    auto& ga = grad_of(n, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      ga[i] += n.grad[i] * deriv(xv[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution geometry. Column matrices are [C * k * k, B * Ho * Wo] with the
// column index ordered (b, oy, ox).
struct ConvGeom {
  std::size_t batch, channels, height, width, kernel, stride, pad, out_h, out_w;
  [[nodiscard]] std::size_t rows() const { return channels * kernel * kernel; }
  [[nodiscard]] std::size_t cols() const { return batch * out_h * out_w; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* plane = x + (b * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            T* dst = row + (b * g.out_h + oy) * g.out_w;
            if (iy < 0 || iy >= static_cast<long>(g.height)) {
              std::fill(dst, dst + g.out_w, T(0));
              continue;
            }
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width))
                            ? T(0)
                            : plane[static_cast<std::size_t>(iy) * g.width +
                                    static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* plane = x + (b * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) {
              continue;
            }
            const T* src = row + (b * g.out_h + oy) * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.width)) {
                plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] +=
                    src[ox];
              }
            }
          }
        }
      }
    }
  }
}

// [B, C, HW] <-> [C, B * HW]
template <class T>
void batch_to_channel_major(const T* src, std::size_t batch, std::size_t channels,
                            std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy_n(src + (b * channels + c) * plane, plane, dst + (c * batch + b) * plane);
    }
  }
}

template <class T>
void channel_major_to_batch_add(const T* src, std::size_t batch, std::size_t channels,
                                std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* s = src + (c * batch + b) * plane;
      T* d = dst + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        d[i] += s[i];
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] + b.value()[i];
  }
  return make_result<T>("add", std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (wants(n, p)) {
        auto& g = grad_of(n, p);
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += n.grad[i];
        }
      }
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] - b.value()[i];
  }
  return make_result<T>("sub", std::move(out), {a, b}, [](Node<T>& n) {
    if (wants(n, 0)) {
      auto& g = grad_of(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += n.grad[i];
      }
    }
    if (wants(n, 1)) {
      auto& g = grad_of(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] -= n.grad[i];
      }
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] * b.value()[i];
  }
  return make_result<T>("mul", std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = value_of(n, 0).data;
    const auto& bv = value_of(n, 1).data;
    if (wants(n, 0)) {
      auto& g = grad_of(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += n.grad[i] * bv[i];
      }
    }
    if (wants(n, 1)) {
      auto& g = grad_of(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += n.grad[i] * av[i];
      }
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] * factor;
  }
  return make_result<T>("scale", std::move(out), {a}, [factor](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += n.grad[i] * factor;
    }
  });
}

template <class T>
Var<T> add_constant(const Var<T>& a, const Tensor<T>& offset) {
  require_same(a.shape(), offset.shape, "add_constant");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] + offset[i];
  }
  return make_result<T>("add_constant", std::move(out), {a}, [](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += n.grad[i];
    }
  });
}

template <class T>
Var<T> stop_gradient(const Var<T>& a) {
  return Var<T>::constant(a.value());
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return unary<T>(
      "silu", a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary<T>(
      "gelu", a,
      [](T x) {
        const T u = T(kC) * (x + T(kA) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
      },
      [](T x) {
        const T u = T(kC) * (x + T(kA) * x * x * x);
        const T t = std::tanh(u);
        const T du = T(kC) * (T(1) + T(3 * kA) * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
      });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(numel(shape) == a.size(),
          "reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  Tensor<T> out(std::move(shape), a.value().data);
  return make_result<T>("reshape", std::move(out), {a}, [](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().data) {
    total += v;
  }
  return make_result<T>("sum", Tensor<T>({1}, {total}), {a}, [](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (auto& v : g) {
      v += n.grad[0];
    }
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  require(a.size() > 0, "mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "mse");
  const std::size_t n = a.size();
  require(n > 0, "mse: empty tensor");
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    total += d * d;
  }
  return make_result<T>("mse", Tensor<T>({1}, {total / static_cast<T>(n)}), {a, b}, [n](Node<T>& nd) {
    const auto& av = value_of(nd, 0).data;
    const auto& bv = value_of(nd, 1).data;
    const T k = T(2) * nd.grad[0] / static_cast<T>(n);
    if (wants(nd, 0)) {
      auto& g = grad_of(nd, 0);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] += k * (av[i] - bv[i]);
      }
    }
    if (wants(nd, 1)) {
      auto& g = grad_of(nd, 1);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] -= k * (av[i] - bv[i]);
      }
    }
  });
}

template <class T>
Var<T> cross_entropy_sum(const Var<T>& logits, const std::vector<int>& targets) {
  require_rank(logits.shape(), 2, "cross_entropy_sum");
  const std::size_t rows = logits.shape()[0];
  const std::size_t vocab = logits.shape()[1];
  require(targets.size() == rows, "cross_entropy_sum: " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(rows) + " rows");
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    require(t >= 0 && static_cast<std::size_t>(t) < vocab,
            "cross_entropy_sum: target " + std::to_string(t) + " outside [0, " +
                std::to_string(vocab) + ")");
    const T* z = logits.value().data.data() + r * vocab;
    T* p = probs->data() + r * vocab;
    const T zmax = *std::max_element(z, z + vocab);
    T s = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(z[j] - zmax);
      s += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] /= s;
    }
    total += zmax + std::log(s) - z[t];
  }
  return make_result<T>("cross_entropy_sum", Tensor<T>({1}, {total}), {logits},
                        [probs, targets, vocab](Node<T>& n) {
                          auto& g = grad_of(n, 0);
                          const T up = n.grad[0];
                          for (std::size_t r = 0; r < targets.size(); ++r) {
                            for (std::size_t j = 0; j < vocab; ++j) {
                              g[r * vocab + j] += up * (*probs)[r * vocab + j];
                            }
                            g[r * vocab + static_cast<std::size_t>(targets[r])] -= up;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Dense layers

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], nn = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
  Tensor<T> out({m, nn});
  MatMap<T>(out.data.data(), m, nn).noalias() =
      ConstMatMap<T>(a.value().data.data(), m, k) * ConstMatMap<T>(b.value().data.data(), k, nn);
  return make_result<T>("matmul", std::move(out), {a, b}, [m, k, nn](Node<T>& n) {
    ConstMatMap<T> g(n.grad.data(), m, nn);
    if (wants(n, 0)) {
      MatMap<T>(grad_of(n, 0).data(), m, k).noalias() +=
          g * ConstMatMap<T>(value_of(n, 1).data.data(), k, nn).transpose();
    }
    if (wants(n, 1)) {
      MatMap<T>(grad_of(n, 1).data(), k, nn).noalias() +=
          ConstMatMap<T>(value_of(n, 0).data.data(), m, k).transpose() * g;
    }
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require(x.shape().size() >= 1, "linear: scalar input");
  require_rank(weight.shape(), 2, "linear");
  const std::size_t in = weight.shape()[0], outd = weight.shape()[1];
  require(x.shape().back() == in, "linear: input width " + std::to_string(x.shape().back()) +
                                      " does not match weight " + shape_str(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.shape() == Shape{outd}, "linear: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor<T> out(out_shape);
  MatMap<T> y(out.data.data(), rows, outd);
  y.noalias() = ConstMatMap<T>(x.value().data.data(), rows, in) *
                ConstMatMap<T>(weight.value().data.data(), in, outd);
  if (has_bias) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data.data(),
                                                                          outd);
  }
  std::vector<Var<T>> parents{x, weight};
  if (has_bias) {
    parents.push_back(bias);
  }
  return make_result<T>("linear", std::move(out), std::move(parents),
                        [rows, in, outd, has_bias](Node<T>& n) {
                          ConstMatMap<T> g(n.grad.data(), rows, outd);
                          if (wants(n, 0)) {
                            MatMap<T>(grad_of(n, 0).data(), rows, in).noalias() +=
                                g * ConstMatMap<T>(value_of(n, 1).data.data(), in, outd).transpose();
                          }
                          if (wants(n, 1)) {
                            MatMap<T>(grad_of(n, 1).data(), in, outd).noalias() +=
                                ConstMatMap<T>(value_of(n, 0).data.data(), rows, in).transpose() * g;
                          }
                          if (has_bias && wants(n, 2)) {
                            // Row-ordered loop, see conv2d.
                            auto& gb = grad_of(n, 2);
                            for (std::size_t r = 0; r < rows; ++r) {
                              const T* gr = n.grad.data() + r * outd;
                              for (std::size_t j = 0; j < outd; ++j) gb[j] += gr[j];
                            }
                          }
                        });
}

template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  require_rank(a.shape(), 3, "bmm");
  require_rank(b.shape(), 3, "bmm");
  const std::size_t groups = a.shape()[0];
  require(b.shape()[0] == groups, "bmm: group counts differ");
  const std::size_t m = trans_a ? a.shape()[2] : a.shape()[1];
  const std::size_t k = trans_a ? a.shape()[1] : a.shape()[2];
  const std::size_t kb = trans_b ? b.shape()[2] : b.shape()[1];
  const std::size_t nn = trans_b ? b.shape()[1] : b.shape()[2];
  require(k == kb, "bmm: inner dimensions differ " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  const std::size_t ar = a.shape()[1], ac = a.shape()[2];
  const std::size_t br = b.shape()[1], bc = b.shape()[2];
  Tensor<T> out({groups, m, nn});
  for (std::size_t g = 0; g < groups; ++g) {
    ConstMatMap<T> am(a.value().data.data() + g * ar * ac, ar, ac);
    ConstMatMap<T> bm(b.value().data.data() + g * br * bc, br, bc);
    MatMap<T> y(out.data.data() + g * m * nn, m, nn);
    if (trans_a && trans_b) {
      y.noalias() = am.transpose() * bm.transpose();
    } else if (trans_a) {
      y.noalias() = am.transpose() * bm;
    } else if (trans_b) {
      y.noalias() = am * bm.transpose();
    } else {
      y.noalias() = am * bm;
    }
  }
  return make_result<T>(
      "bmm", std::move(out), {a, b}, [=](Node<T>& n) {
        for (std::size_t g = 0; g < groups; ++g) {
          ConstMatMap<T> gy(n.grad.data() + g * m * nn, m, nn);
          ConstMatMap<T> am(value_of(n, 0).data.data() + g * ar * ac, ar, ac);
          ConstMatMap<T> bm(value_of(n, 1).data.data() + g * br * bc, br, bc);
          if (wants(n, 0)) {
            MatMap<T> ga(grad_of(n, 0).data() + g * ar * ac, ar, ac);
            // op(A) = A or A^T; dL/dop(A) = gy * op(B)^T
            if (!trans_a && !trans_b) ga.noalias() += gy * bm.transpose();
            if (!trans_a && trans_b) ga.noalias() += gy * bm;
            if (trans_a && !trans_b) ga.noalias() += bm * gy.transpose();
            if (trans_a && trans_b) ga.noalias() += bm.transpose() * gy.transpose();
          }
          if (wants(n, 1)) {
            MatMap<T> gb(grad_of(n, 1).data() + g * br * bc, br, bc);
            if (!trans_a && !trans_b) gb.noalias() += am.transpose() * gy;
            if (!trans_a && trans_b) gb.noalias() += gy.transpose() * am;
            if (trans_a && !trans_b) gb.noalias() += am * gy;
            if (trans_a && trans_b) gb.noalias() += gy.transpose() * am.transpose();
          }
        }
      });
}

template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& indices) {
  require_rank(table.shape(), 2, "embedding");
  const std::size_t rows = table.shape()[0], width = table.shape()[1];
  Tensor<T> out({indices.size(), width});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    require(idx >= 0 && static_cast<std::size_t>(idx) < rows,
            "embedding: index " + std::to_string(idx) + " outside [0, " + std::to_string(rows) + ")");
    std::copy_n(table.value().data.data() + static_cast<std::size_t>(idx) * width, width,
                out.data.data() + i * width);
  }
  return make_result<T>("embedding", std::move(out), {table}, [indices, width](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      T* dst = g.data() + static_cast<std::size_t>(indices[i]) * width;
      for (std::size_t j = 0; j < width; ++j) {
        dst[j] += n.grad[i * width + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and conditioning

template <class T>
Var<T> layer_norm(const Var<T>& x, T eps) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mu) * is;
  }
  auto y = std::make_shared<std::vector<T>>(out.data);
  return make_result<T>("layer_norm", std::move(out), {x}, [inv_std, y, d, rows](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gy = n.grad.data() + r * d;
      const T* yr = y->data() + r * d;
      T mg = 0, mgy = 0;
      for (std::size_t j = 0; j < d; ++j) {
        mg += gy[j];
        mgy += gy[j] * yr[j];
      }
      mg /= static_cast<T>(d);
      mgy /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) {
        g[r * d + j] += (*inv_std)[r] * (gy[j] - mg - yr[j] * mgy);
      }
    }
  });
}

template <class T>
Var<T> l2_normalize(const Var<T>& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data.data() + r * d;
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += xr[j] * xr[j];
    const T nrm = std::sqrt(s);
    (*norms)[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = nrm > T(0) ? xr[j] / nrm : T(0);
  }
  auto y = std::make_shared<std::vector<T>>(out.data);
  return make_result<T>("l2_normalize", std::move(out), {x}, [norms, y, d, rows](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T nrm = (*norms)[r];
      if (nrm == T(0)) continue;
      const T* gy = n.grad.data() + r * d;
      const T* yr = y->data() + r * d;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += gy[j] * yr[j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - yr[j] * dot) / nrm;
    }
  });
}

template <class T>
Var<T> modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scl) {
  require_rank(x.shape(), 3, "modulate");
  const std::size_t b = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
  require(shift.shape() == Shape{b, d} && scl.shape() == Shape{b, d},
          "modulate: shift/scale must be " + shape_str({b, d}));
  Tensor<T> out(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t li = 0; li < l; ++li) {
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = (bi * l + li) * d + j;
        out[i] = x.value()[i] * (T(1) + scl.value()[bi * d + j]) + shift.value()[bi * d + j];
      }
    }
  }
  return make_result<T>("modulate", std::move(out), {x, shift, scl}, [b, l, d](Node<T>& n) {
    const auto& xv = value_of(n, 0).data;
    const auto& sv = value_of(n, 2).data;
    const bool gx = wants(n, 0), gsh = wants(n, 1), gsc = wants(n, 2);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t li = 0; li < l; ++li) {
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t i = (bi * l + li) * d + j;
          const T gy = n.grad[i];
          if (gx) grad_of(n, 0)[i] += gy * (T(1) + sv[bi * d + j]);
          if (gsh) grad_of(n, 1)[bi * d + j] += gy;
          if (gsc) grad_of(n, 2)[bi * d + j] += gy * xv[i];
        }
      }
    }
  });
}

template <class T>
Var<T> mul_rows(const Var<T>& x, const Var<T>& gate) {
  require_rank(x.shape(), 3, "mul_rows");
  const std::size_t b = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
  require(gate.shape() == Shape{b, d}, "mul_rows: gate must be " + shape_str({b, d}));
  Tensor<T> out(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t li = 0; li < l; ++li)
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = (bi * l + li) * d + j;
        out[i] = x.value()[i] * gate.value()[bi * d + j];
      }
  return make_result<T>("mul_rows", std::move(out), {x, gate}, [b, l, d](Node<T>& n) {
    const auto& xv = value_of(n, 0).data;
    const auto& gv = value_of(n, 1).data;
    const bool gx = wants(n, 0), gg = wants(n, 1);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t li = 0; li < l; ++li)
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t i = (bi * l + li) * d + j;
          if (gx) grad_of(n, 0)[i] += n.grad[i] * gv[bi * d + j];
          if (gg) grad_of(n, 1)[bi * d + j] += n.grad[i] * xv[i];
        }
  });
}

template <class T>
Var<T> chunk(const Var<T>& x, std::size_t index, std::size_t count) {
  require_rank(x.shape(), 2, "chunk");
  const std::size_t b = x.shape()[0], total = x.shape()[1];
  require(count > 0 && total % count == 0 && index < count,
          "chunk: cannot take block " + std::to_string(index) + " of " + std::to_string(count) +
              " from " + shape_str(x.shape()));
  const std::size_t d = total / count;
  Tensor<T> out({b, d});
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::copy_n(x.value().data.data() + bi * total + index * d, d, out.data.data() + bi * d);
  }
  return make_result<T>("chunk", std::move(out), {x}, [b, d, total, index](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t j = 0; j < d; ++j) g[bi * total + index * d + j] += n.grad[bi * d + j];
  });
}

template <class T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& e) {
  require_rank(x.shape(), 3, "add_broadcast");
  const std::size_t b = x.shape()[0], ld = x.shape()[1] * x.shape()[2];
  require(e.shape() == Shape{x.shape()[1], x.shape()[2]},
          "add_broadcast: expected " + shape_str({x.shape()[1], x.shape()[2]}) + ", got " +
              shape_str(e.shape()));
  Tensor<T> out(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < ld; ++i) out[bi * ld + i] = x.value()[bi * ld + i] + e.value()[i];
  return make_result<T>("add_broadcast", std::move(out), {x, e}, [b, ld](Node<T>& n) {
    if (wants(n, 0)) {
      auto& g = grad_of(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants(n, 1)) {
      auto& g = grad_of(n, 1);
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < ld; ++i) g[i] += n.grad[bi * ld + i];
    }
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  require(!x.shape().empty() && begin <= end && end <= x.shape()[0],
          "slice_rows: bad range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") for " + shape_str(x.shape()));
  const std::size_t row = x.size() / x.shape()[0];
  Shape s = x.shape();
  s[0] = end - begin;
  Tensor<T> out(s);
  std::copy_n(x.value().data.data() + begin * row, (end - begin) * row, out.data.data());
  return make_result<T>("slice_rows", std::move(out), {x}, [begin, row](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin * row + i] += n.grad[i];
  });
}

template <class T>
Var<T> concat_seq(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_seq: nothing to concatenate");
  const std::size_t b = parts[0].shape().at(0), d = parts[0].shape().at(2);
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 3, "concat_seq");
    require(p.shape()[0] == b && p.shape()[2] == d, "concat_seq: batch/width mismatch");
    lens.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor<T> out({b, total, d});
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      std::copy_n(parts[k].value().data.data() + bi * lens[k] * d, lens[k] * d,
                  out.data.data() + (bi * total + off) * d);
      off += lens[k];
    }
  }
  return make_result<T>("concat_seq", std::move(out), parts, [b, d, total, lens](Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      if (wants(n, k)) {
        auto& g = grad_of(n, k);
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t i = 0; i < lens[k] * d; ++i)
            g[bi * lens[k] * d + i] += n.grad[(bi * total + off) * d + i];
      }
      off += lens[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <class T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  require_rank(x.shape(), 3, "split_heads");
  const std::size_t b = x.shape()[0], l = x.shape()[1], w = x.shape()[2];
  require(heads > 0 && w % heads == 0, "split_heads: width not divisible by heads");
  const std::size_t dh = w / heads;
  Tensor<T> out({b, heads, l, dh});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t li = 0; li < l; ++li)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(x.value().data.data() + (bi * l + li) * w + h * dh, dh,
                    out.data.data() + ((bi * heads + h) * l + li) * dh);
  return make_result<T>("split_heads", std::move(out), {x}, [b, l, w, heads, dh](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t li = 0; li < l; ++li)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j)
            g[(bi * l + li) * w + h * dh + j] += n.grad[((bi * heads + h) * l + li) * dh + j];
  });
}

template <class T>
Var<T> merge_heads(const Var<T>& x) {
  require_rank(x.shape(), 4, "merge_heads");
  const std::size_t b = x.shape()[0], heads = x.shape()[1], l = x.shape()[2], dh = x.shape()[3];
  const std::size_t w = heads * dh;
  Tensor<T> out({b, l, w});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t li = 0; li < l; ++li)
        std::copy_n(x.value().data.data() + ((bi * heads + h) * l + li) * dh, dh,
                    out.data.data() + (bi * l + li) * w + h * dh);
  return make_result<T>("merge_heads", std::move(out), {x}, [b, l, w, heads, dh](Node<T>& n) {
    auto& g = grad_of(n, 0);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t li = 0; li < l; ++li)
          for (std::size_t j = 0; j < dh; ++j)
            g[((bi * heads + h) * l + li) * dh + j] += n.grad[(bi * l + li) * w + h * dh + j];
  });
}

template <class T>
Var<T> scale_heads(const Var<T>& scores, const Var<T>& temperature) {
  require_rank(scores.shape(), 4, "scale_heads");
  const std::size_t b = scores.shape()[0], heads = scores.shape()[1];
  const std::size_t block = scores.shape()[2] * scores.shape()[3];
  require(temperature.shape() == Shape{heads}, "scale_heads: temperature must be [heads]");
  Tensor<T> out(scores.shape());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h) {
      const T t = temperature.value()[h];
      const std::size_t base = (bi * heads + h) * block;
      for (std::size_t i = 0; i < block; ++i) out[base + i] = scores.value()[base + i] * t;
    }
  return make_result<T>("scale_heads", std::move(out), {scores, temperature},
                        [b, heads, block](Node<T>& n) {
                          const auto& sv = value_of(n, 0).data;
                          const auto& tv = value_of(n, 1).data;
                          for (std::size_t bi = 0; bi < b; ++bi)
                            for (std::size_t h = 0; h < heads; ++h) {
                              const std::size_t base = (bi * heads + h) * block;
                              if (wants(n, 0)) {
                                auto& g = grad_of(n, 0);
                                for (std::size_t i = 0; i < block; ++i)
                                  g[base + i] += n.grad[base + i] * tv[h];
                              }
                              if (wants(n, 1)) {
                                T acc = 0;
                                for (std::size_t i = 0; i < block; ++i)
                                  acc += n.grad[base + i] * sv[base + i];
                                grad_of(n, 1)[h] += acc;
                              }
                            }
                        });
}

template <class T>
Var<T> masked_softmax(const Var<T>& scores, const std::vector<std::uint8_t>& allow) {
  const auto& s = scores.shape();
  require(s.size() >= 2, "masked_softmax: need at least rank 2");
  const std::size_t l = s[s.size() - 2], lk = s.back();
  require(allow.size() == l * lk, "masked_softmax: mask size " + std::to_string(allow.size()) +
                                      " does not match " + std::to_string(l) + "x" +
                                      std::to_string(lk));
  const std::size_t groups = scores.size() / (l * lk);
  Tensor<T> out(s);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < l; ++i) {
      const T* x = scores.value().data.data() + (g * l + i) * lk;
      T* y = out.data.data() + (g * l + i) * lk;
      const std::uint8_t* a = allow.data() + i * lk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lk; ++j)
        if (a[j]) mx = std::max(mx, x[j]);
      if (!std::isfinite(mx)) continue;  // no allowed entry: row stays zero
      T total = 0;
      for (std::size_t j = 0; j < lk; ++j) {
        y[j] = a[j] ? std::exp(x[j] - mx) : T(0);
        total += y[j];
      }
      for (std::size_t j = 0; j < lk; ++j) y[j] /= total;
    }
  }
  auto probs = std::make_shared<std::vector<T>>(out.data);
  return make_result<T>("masked_softmax", std::move(out), {scores}, [probs, lk](Node<T>& n) {
    auto& g = grad_of(n, 0);
    const std::size_t rows = g.size() / lk;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = probs->data() + r * lk;
      const T* gy = n.grad.data() + r * lk;
      T dot = 0;
      for (std::size_t j = 0; j < lk; ++j) dot += p[j] * gy[j];
      for (std::size_t j = 0; j < lk; ++j) g[r * lk + j] += p[j] * (gy[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
  require_rank(x.shape(), 4, "conv2d");
  require_rank(weight.shape(), 4, "conv2d");
  const std::size_t b = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t co = weight.shape()[0], k = weight.shape()[2];
  require(weight.shape()[1] == ci && weight.shape()[3] == k,
          "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
              shape_str(x.shape()));
  require(stride >= 1 && h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: kernel larger than input");
  require(bias.shape() == Shape{co}, "conv2d: bias must be [" + std::to_string(co) + "]");
  const ConvGeom geom{b, ci, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1,
                      (w + 2 * pad - k) / stride + 1};
  const std::size_t plane = geom.out_h * geom.out_w;
  auto cols = std::make_shared<std::vector<T>>(geom.rows() * geom.cols());
  im2col(x.value().data.data(), geom, cols->data());
  std::vector<T> ym(co * geom.cols());
  MatMap<T> y(ym.data(), co, geom.cols());
  y.noalias() = ConstMatMap<T>(weight.value().data.data(), co, geom.rows()) *
                ConstMatMap<T>(cols->data(), geom.rows(), geom.cols());
  y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.value().data.data(), co);
  Tensor<T> out({b, co, geom.out_h, geom.out_w});
  channel_major_to_batch_add(ym.data(), b, co, plane, out.data.data());
  return make_result<T>("conv2d", std::move(out), {x, weight, bias}, [geom, co, cols](Node<T>& n) {
    const std::size_t plane = geom.out_h * geom.out_w;
    std::vector<T> gm(co * geom.cols());
    batch_to_channel_major(n.grad.data(), geom.batch, co, plane, gm.data());
    ConstMatMap<T> g(gm.data(), co, geom.cols());
    if (wants(n, 1)) {
      MatMap<T>(grad_of(n, 1).data(), co, geom.rows()).noalias() +=
          g * ConstMatMap<T>(cols->data(), geom.rows(), geom.cols()).transpose();
    }
    if (wants(n, 2)) {
      // Plain loop: Eigen's vectorized reductions peel by buffer alignment, so
      // their summation order would depend on heap addresses.
      auto& gb = grad_of(n, 2);
      for (std::size_t c = 0; c < co; ++c) {
        T acc = T(0);
        for (std::size_t j = 0; j < geom.cols(); ++j) acc += gm[c * geom.cols() + j];
        gb[c] += acc;
      }
    }
    if (wants(n, 0)) {
      std::vector<T> dcols(geom.rows() * geom.cols());
      MatMap<T>(dcols.data(), geom.rows(), geom.cols()).noalias() =
          ConstMatMap<T>(value_of(n, 1).data.data(), co, geom.rows()).transpose() * g;
      col2im_add(dcols.data(), geom, grad_of(n, 0).data());
    }
  });
}

template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        std::size_t stride, std::size_t pad) {
  require_rank(x.shape(), 4, "conv_transpose2d");
  require_rank(weight.shape(), 4, "conv_transpose2d");
  const std::size_t b = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t co = weight.shape()[1], k = weight.shape()[2];
  require(weight.shape()[0] == ci && weight.shape()[3] == k,
          "conv_transpose2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
              shape_str(x.shape()));
  require(stride >= 1 && (h - 1) * stride + k > 2 * pad && (w - 1) * stride + k > 2 * pad,
          "conv_transpose2d: empty output");
  require(bias.shape() == Shape{co}, "conv_transpose2d: bias must be [" + std::to_string(co) + "]");
  const std::size_t oh = (h - 1) * stride + k - 2 * pad;
  const std::size_t ow = (w - 1) * stride + k - 2 * pad;
  // The adjoint of a conv over the output grid whose result has extent h x w.
  const ConvGeom geom{b, co, oh, ow, k, stride, pad, h, w};
  const std::size_t in_plane = h * w, out_plane = oh * ow;
  auto xm = std::make_shared<std::vector<T>>(ci * geom.cols());
  batch_to_channel_major(x.value().data.data(), b, ci, in_plane, xm->data());
  std::vector<T> cols(geom.rows() * geom.cols());
  MatMap<T>(cols.data(), geom.rows(), geom.cols()).noalias() =
      ConstMatMap<T>(weight.value().data.data(), ci, geom.rows()).transpose() *
      ConstMatMap<T>(xm->data(), ci, geom.cols());
  Tensor<T> out({b, co, oh, ow});
  col2im_add(cols.data(), geom, out.data.data());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t c = 0; c < co; ++c) {
      T* p = out.data.data() + (bi * co + c) * out_plane;
      const T bv = bias.value()[c];
      for (std::size_t i = 0; i < out_plane; ++i) p[i] += bv;
    }
  return make_result<T>("conv_transpose2d", std::move(out), {x, weight, bias},
                        [geom, ci, co, xm, in_plane, out_plane](Node<T>& n) {
                          std::vector<T> gcols(geom.rows() * geom.cols());
                          im2col(n.grad.data(), geom, gcols.data());
                          ConstMatMap<T> gc(gcols.data(), geom.rows(), geom.cols());
                          if (wants(n, 0)) {
                            std::vector<T> dxm(ci * geom.cols());
                            MatMap<T>(dxm.data(), ci, geom.cols()).noalias() =
                                ConstMatMap<T>(value_of(n, 1).data.data(), ci, geom.rows()) * gc;
                            channel_major_to_batch_add(dxm.data(), geom.batch, ci, in_plane,
                                                       grad_of(n, 0).data());
                          }
                          if (wants(n, 1)) {
                            MatMap<T>(grad_of(n, 1).data(), ci, geom.rows()).noalias() +=
                                ConstMatMap<T>(xm->data(), ci, geom.cols()) * gc.transpose();
                          }
                          if (wants(n, 2)) {
                            auto& gb = grad_of(n, 2);
                            for (std::size_t bi = 0; bi < geom.batch; ++bi)
                              for (std::size_t c = 0; c < co; ++c) {
                                const T* p = n.grad.data() + (bi * co + c) * out_plane;
                                T acc = 0;
                                for (std::size_t i = 0; i < out_plane; ++i) acc += p[i];
                                gb[c] += acc;
                              }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Resampling

std::vector<double> bilinear_weights(std::size_t in, std::size_t out) {
  require(in >= 1 && out >= 1, "bilinear_weights: extents must be positive");
  std::vector<double> m(out * in, 0.0);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double frac = src - static_cast<double>(i0);
    m[i * in + i0] += 1.0 - frac;
    m[i * in + i1] += frac;
  }
  return m;
}

template <class T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x.shape(), 4, "resize_bilinear");
  const std::size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: target extent must be positive");
  if (h == out_h && w == out_w) {
    return reshape(x, x.shape());
  }
  auto wy = std::make_shared<RowMat<T>>(ConstMatMap<double>(bilinear_weights(h, out_h).data(), out_h, h).template cast<T>());
  auto wx = std::make_shared<RowMat<T>>(ConstMatMap<double>(bilinear_weights(w, out_w).data(), out_w, w).template cast<T>());
  Tensor<T> out({b, c, out_h, out_w});
  for (std::size_t p = 0; p < b * c; ++p) {
    MatMap<T>(out.data.data() + p * out_h * out_w, out_h, out_w).noalias() =
        (*wy) * ConstMatMap<T>(x.value().data.data() + p * h * w, h, w) * wx->transpose();
  }
  return make_result<T>("resize_bilinear", std::move(out), {x},
                        [wy, wx, b, c, h, w, out_h, out_w](Node<T>& n) {
                          auto& g = grad_of(n, 0);
                          for (std::size_t p = 0; p < b * c; ++p) {
                            MatMap<T>(g.data() + p * h * w, h, w).noalias() +=
                                wy->transpose() *
                                ConstMatMap<T>(n.grad.data() + p * out_h * out_w, out_h, out_w) *
                                (*wx);
                          }
                        });
}

// ---------------------------------------------------------------------------

#define NEXTSCALE_INSTANTIATE_OPS(T)                                                           \
  template Var<T> add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, T);                                                     \
  template Var<T> add_constant(const Var<T>&, const Tensor<T>&);                               \
  template Var<T> stop_gradient(const Var<T>&);                                                \
  template Var<T> relu(const Var<T>&);                                                         \
  template Var<T> silu(const Var<T>&);                                                         \
  template Var<T> gelu(const Var<T>&);                                                         \
  template Var<T> exp(const Var<T>&);                                                          \
  template Var<T> reshape(const Var<T>&, Shape);                                               \
  template Var<T> sum(const Var<T>&);                                                          \
  template Var<T> mean(const Var<T>&);                                                         \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                           \
  template Var<T> cross_entropy_sum(const Var<T>&, const std::vector<int>&);                   \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool, bool);                               \
  template Var<T> embedding(const Var<T>&, const std::vector<int>&);                           \
  template Var<T> layer_norm(const Var<T>&, T);                                                \
  template Var<T> l2_normalize(const Var<T>&);                                                 \
  template Var<T> modulate(const Var<T>&, const Var<T>&, const Var<T>&);                       \
  template Var<T> mul_rows(const Var<T>&, const Var<T>&);                                      \
  template Var<T> chunk(const Var<T>&, std::size_t, std::size_t);                              \
  template Var<T> add_broadcast(const Var<T>&, const Var<T>&);                                 \
  template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                         \
  template Var<T> concat_seq(const std::vector<Var<T>>&);                                      \
  template Var<T> split_heads(const Var<T>&, std::size_t);                                     \
  template Var<T> merge_heads(const Var<T>&);                                                  \
  template Var<T> scale_heads(const Var<T>&, const Var<T>&);                                   \
  template Var<T> masked_softmax(const Var<T>&, const std::vector<std::uint8_t>&);             \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t); \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,   \
                                   std::size_t);                                               \
  template Var<T> resize_bilinear(const Var<T>&, std::size_t, std::size_t);

NEXTSCALE_INSTANTIATE_OPS(float)
NEXTSCALE_INSTANTIATE_OPS(double)

#undef NEXTSCALE_INSTANTIATE_OPS

}  // namespace nextscale
