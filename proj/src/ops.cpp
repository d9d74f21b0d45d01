#include "cmseg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cmseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  CMSEG_CHECK_INPUT(same_shape(a.shape(), b.shape()),
                    std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  std::vector<double> v(a.values());
  for (size_t i = 0; i < v.size(); ++i) v[i] += b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same(a, b, "sub");
  std::vector<double> v(a.values());
  for (size_t i = 0; i < v.size(); ++i) v[i] -= b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same(a, b, "mul");
  std::vector<double> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same(a, b, "div");
  std::vector<double> v(a.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] / b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i] -= self.grad[i] * self.value[i] / pb.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.values());
  for (double& x : v) x *= c;
  return make_op(a.shape(), std::move(v), {a}, [c](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.values());
  for (double& x : v) x += c;
  return make_op(a.shape(), std::move(v), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor add_suffix(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  CMSEG_CHECK_INPUT(bs.size() <= as.size() &&
                        std::equal(bs.begin(), bs.end(), as.end() - bs.size()),
                    "add_suffix: " + shape_str(bs) + " is not a suffix of " +
                        shape_str(as));
  const int64_t bn = b.numel();
  std::vector<double> v(a.values());
  for (int64_t i = 0; i < a.numel(); ++i) v[i] += b.values()[i % bn];
  return make_op(a.shape(), std::move(v), {a, b}, [bn](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i % bn] += self.grad[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> v(x.values());
  for (double& e : v) e = e > 0.0 ? e : 0.0;
  return make_op(x.shape(), std::move(v), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

Tensor gelu(const Tensor& x) {
  // Exact erf form.
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
  std::vector<double> v(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) {
    double e = x.values()[i];
    v[i] = e * 0.5 * (1.0 + std::erf(e * inv_sqrt2));
  }
  return make_op(x.shape(), std::move(v), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double e = p.value[i];
      double cdf = 0.5 * (1.0 + std::erf(e * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * e * e);
      p.grad[i] += self.grad[i] * (cdf + e * pdf);
    }
  });
}

Tensor tanh_op(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) v[i] = std::tanh(x.values()[i]);
  return make_op(x.shape(), std::move(v), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.value[i];
      p.grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

// ------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  CMSEG_CHECK_INPUT(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                    "matmul: bad shapes " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> v(static_cast<size_t>(M * N));
  {
    CMapMat A(a.data(), M, K), B(b.data(), K, N);
    MapMat C(v.data(), M, N);
    C.noalias() = A * B;
  }
  return make_op({M, N}, std::move(v), {a, b}, [M, K, N](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    CMapMat G(self.grad.data(), M, N);
    if (pa.requires_grad) {
      pa.ensure_grad();
      CMapMat B(pb.value.data(), K, N);
      MapMat dA(pa.grad.data(), M, K);
      dA.noalias() += G * B.transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      CMapMat A(pa.value.data(), M, K);
      MapMat dB(pb.grad.data(), K, N);
      dB.noalias() += A.transpose() * G;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  CMSEG_CHECK_INPUT(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) &&
                        a.dim(2) == b.dim(1),
                    "bmm: bad shapes");
  const int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<double> v(static_cast<size_t>(B * M * N));
  for (int64_t i = 0; i < B; ++i) {
    CMapMat A(a.data() + i * M * K, M, K), Bm(b.data() + i * K * N, K, N);
    MapMat C(v.data() + i * M * N, M, N);
    C.noalias() = A * Bm;
  }
  return make_op({B, M, N}, std::move(v), {a, b}, [B, M, K, N](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t i = 0; i < B; ++i) {
      CMapMat G(self.grad.data() + i * M * N, M, N);
      if (pa.requires_grad) {
        CMapMat Bm(pb.value.data() + i * K * N, K, N);
        MapMat dA(pa.grad.data() + i * M * K, M, K);
        dA.noalias() += G * Bm.transpose();
      }
      if (pb.requires_grad) {
        CMapMat A(pa.value.data() + i * M * K, M, K);
        MapMat dB(pb.grad.data() + i * K * N, K, N);
        dB.noalias() += A.transpose() * G;
      }
    }
  });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  CMSEG_CHECK_INPUT(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) &&
                        a.dim(2) == b.dim(2),
                    "bmm_nt: bad shapes");
  const int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
  std::vector<double> v(static_cast<size_t>(B * M * N));
  for (int64_t i = 0; i < B; ++i) {
    CMapMat A(a.data() + i * M * K, M, K), Bm(b.data() + i * N * K, N, K);
    MapMat C(v.data() + i * M * N, M, N);
    C.noalias() = A * Bm.transpose();
  }
  return make_op({B, M, N}, std::move(v), {a, b}, [B, M, K, N](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t i = 0; i < B; ++i) {
      CMapMat G(self.grad.data() + i * M * N, M, N);
      if (pa.requires_grad) {
        CMapMat Bm(pb.value.data() + i * N * K, N, K);
        MapMat dA(pa.grad.data() + i * M * K, M, K);
        dA.noalias() += G * Bm;
      }
      if (pb.requires_grad) {
        CMapMat A(pa.value.data() + i * M * K, M, K);
        MapMat dB(pb.grad.data() + i * N * K, N, K);
        dB.noalias() += G.transpose() * A;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  CMSEG_CHECK_INPUT(W.ndim() == 2, "linear: weight must be 2D");
  const int64_t Cin = W.dim(0), Cout = W.dim(1);
  CMSEG_CHECK_CONFIG(x.dim(x.ndim() - 1) == Cin,
                     "linear: input width " + std::to_string(x.dim(x.ndim() - 1)) +
                         " does not match weight " + shape_str(W.shape()));
  const int64_t R = x.numel() / Cin;
  const bool has_bias = b.defined();
  if (has_bias)
    CMSEG_CHECK_CONFIG(b.numel() == Cout, "linear: bias size mismatch");
  std::vector<double> v(static_cast<size_t>(R * Cout));
  {
    CMapMat X(x.data(), R, Cin), Wm(W.data(), Cin, Cout);
    MapMat Y(v.data(), R, Cout);
    Y.noalias() = X * Wm;
    if (has_bias) {
      Eigen::Map<const Eigen::RowVectorXd> bias(b.data(), Cout);
      Y.rowwise() += bias;
    }
  }
  Shape out_shape(x.shape());
  out_shape.back() = Cout;
  std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, W, b}
                                         : std::vector<Tensor>{x, W};
  return make_op(std::move(out_shape), std::move(v), parents,
                 [R, Cin, Cout, has_bias](detail::Node& self) {
                   auto& px = *self.parents[0];
                   auto& pw = *self.parents[1];
                   CMapMat G(self.grad.data(), R, Cout);
                   if (px.requires_grad) {
                     px.ensure_grad();
                     CMapMat Wm(pw.value.data(), Cin, Cout);
                     MapMat dX(px.grad.data(), R, Cin);
                     dX.noalias() += G * Wm.transpose();
                   }
                   if (pw.requires_grad) {
                     pw.ensure_grad();
                     CMapMat X(px.value.data(), R, Cin);
                     MapMat dW(pw.grad.data(), Cin, Cout);
                     dW.noalias() += X.transpose() * G;
                   }
                   if (has_bias) {
                     auto& pb = *self.parents[2];
                     if (pb.requires_grad) {
                       pb.ensure_grad();
                       Eigen::Map<Eigen::RowVectorXd> db(pb.grad.data(), Cout);
                       db += G.colwise().sum();
                     }
                   }
                 });
}

// ------------------------------------------------------------------- shape

Tensor reshape(const Tensor& x, Shape shape) {
  CMSEG_CHECK_INPUT(shape_numel(shape) == x.numel(),
                    "reshape to incompatible size " + shape_str(shape));
  std::vector<double> v(x.values());
  return make_op(std::move(shape), std::move(v), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  CMSEG_CHECK_INPUT(a.ndim() == 4 && b.ndim() == 4 && a.dim(0) == b.dim(0) &&
                        a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                    "concat_channels: incompatible shapes " +
                        shape_str(a.shape()) + " / " + shape_str(b.shape()));
  const int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2),
                W = a.dim(3);
  const int64_t hw = H * W;
  std::vector<double> v(static_cast<size_t>(B * (Ca + Cb) * hw));
  for (int64_t n = 0; n < B; ++n) {
    std::memcpy(v.data() + n * (Ca + Cb) * hw, a.data() + n * Ca * hw,
                sizeof(double) * Ca * hw);
    std::memcpy(v.data() + n * (Ca + Cb) * hw + Ca * hw, b.data() + n * Cb * hw,
                sizeof(double) * Cb * hw);
  }
  return make_op({B, Ca + Cb, H, W}, std::move(v), {a, b},
                 [B, Ca, Cb, hw](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   for (int64_t n = 0; n < B; ++n) {
                     const double* g = self.grad.data() + n * (Ca + Cb) * hw;
                     if (pa.requires_grad) {
                       pa.ensure_grad();
                       for (int64_t i = 0; i < Ca * hw; ++i)
                         pa.grad[n * Ca * hw + i] += g[i];
                     }
                     if (pb.requires_grad) {
                       pb.ensure_grad();
                       for (int64_t i = 0; i < Cb * hw; ++i)
                         pb.grad[n * Cb * hw + i] += g[Ca * hw + i];
                     }
                   }
                 });
}

Tensor slice_dim1(const Tensor& x, int64_t c) {
  CMSEG_CHECK_INPUT(x.ndim() == 4 && c >= 0 && c < x.dim(1),
                    "slice_dim1: bad channel");
  const int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> v(static_cast<size_t>(B * hw));
  for (int64_t n = 0; n < B; ++n)
    std::memcpy(v.data() + n * hw, x.data() + (n * C + c) * hw,
                sizeof(double) * hw);
  return make_op({B, x.dim(2), x.dim(3)}, std::move(v), {x},
                 [B, C, c, hw](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (int64_t n = 0; n < B; ++n)
                     for (int64_t i = 0; i < hw; ++i)
                       p.grad[(n * C + c) * hw + i] += self.grad[n * hw + i];
                 });
}

namespace {

// Generic data permutation op: out[i] = in[perm[i]].
Tensor permute_op(const Tensor& x, Shape out_shape, std::vector<int64_t> perm) {
  std::vector<double> v(static_cast<size_t>(x.numel()));
  for (size_t i = 0; i < v.size(); ++i) v[i] = x.values()[perm[i]];
  return make_op(std::move(out_shape), std::move(v), {x},
                 [perm = std::move(perm)](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     p.grad[perm[i]] += self.grad[i];
                 });
}

}  // namespace

Tensor nchw_to_tokens(const Tensor& x) {
  CMSEG_CHECK_INPUT(x.ndim() == 4, "nchw_to_tokens: need 4D");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<int64_t> perm(static_cast<size_t>(x.numel()));
  int64_t o = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < H * W; ++p)
      for (int64_t c = 0; c < C; ++c) perm[o++] = ((b * C + c) * H * W) + p;
  return permute_op(x, {B, H * W, C}, std::move(perm));
}

Tensor tokens_to_nchw(const Tensor& x, int64_t h, int64_t w) {
  CMSEG_CHECK_INPUT(x.ndim() == 3 && x.dim(1) == h * w,
                    "tokens_to_nchw: token count mismatch");
  const int64_t B = x.dim(0), C = x.dim(2);
  std::vector<int64_t> perm(static_cast<size_t>(x.numel()));
  int64_t o = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < h * w; ++p) perm[o++] = (b * h * w + p) * C + c;
  return permute_op(x, {B, C, h, w}, std::move(perm));
}

Tensor split_heads(const Tensor& x, int64_t heads) {
  CMSEG_CHECK_INPUT(x.ndim() == 3 && x.dim(2) % heads == 0,
                    "split_heads: width not divisible by head count");
  const int64_t B = x.dim(0), T = x.dim(1), C = x.dim(2), d = C / heads;
  std::vector<int64_t> perm(static_cast<size_t>(x.numel()));
  int64_t o = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t g = 0; g < heads; ++g)
      for (int64_t t = 0; t < T; ++t)
        for (int64_t e = 0; e < d; ++e) perm[o++] = (b * T + t) * C + g * d + e;
  return permute_op(x, {B * heads, T, d}, std::move(perm));
}

Tensor merge_heads(const Tensor& x, int64_t heads) {
  CMSEG_CHECK_INPUT(x.ndim() == 3 && x.dim(0) % heads == 0,
                    "merge_heads: batch not divisible by head count");
  const int64_t B = x.dim(0) / heads, T = x.dim(1), d = x.dim(2);
  std::vector<int64_t> perm(static_cast<size_t>(x.numel()));
  int64_t o = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t g = 0; g < heads; ++g)
        for (int64_t e = 0; e < d; ++e)
          perm[o++] = ((b * heads + g) * T + t) * d + e;
  return permute_op(x, {B, T, heads * d}, std::move(perm));
}

Tensor space_to_depth2(const Tensor& x) {
  CMSEG_CHECK_INPUT(x.ndim() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                    "space_to_depth2: odd spatial dims");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H / 2, Wo = W / 2;
  std::vector<int64_t> perm(static_cast<size_t>(x.numel()));
  int64_t o = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t g = 0; g < 4; ++g) {
      const int64_t dy = g / 2, dx = g % 2;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < Ho; ++i)
          for (int64_t j = 0; j < Wo; ++j)
            perm[o++] = ((b * C + c) * H + (2 * i + dy)) * W + (2 * j + dx);
    }
  return permute_op(x, {B, 4 * C, Ho, Wo}, std::move(perm));
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op({1}, {s}, {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  return make_op({1}, {s / n}, {x}, [n](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0] / n;
  });
}

Tensor sum_spatial(const Tensor& x) {
  CMSEG_CHECK_INPUT(x.ndim() == 3, "sum_spatial: need (B,H,W)");
  const int64_t B = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<double> v(static_cast<size_t>(B), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < hw; ++i) v[b] += x.values()[b * hw + i];
  return make_op({B}, std::move(v), {x}, [B, hw](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < hw; ++i) p.grad[b * hw + i] += self.grad[b];
  });
}

Tensor global_avg_pool(const Tensor& x) {
  CMSEG_CHECK_INPUT(x.ndim() == 4, "global_avg_pool: need (B,C,H,W)");
  const int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> v(static_cast<size_t>(B * C), 0.0);
  for (int64_t bc = 0; bc < B * C; ++bc) {
    for (int64_t i = 0; i < hw; ++i) v[bc] += x.values()[bc * hw + i];
    v[bc] /= static_cast<double>(hw);
  }
  return make_op({B, C}, std::move(v), {x}, [B, C, hw](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t i = 0; i < hw; ++i)
        p.grad[bc * hw + i] += self.grad[bc] / static_cast<double>(hw);
  });
}

// ------------------------------------------------------------- normalization

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const int64_t C = x.dim(x.ndim() - 1);
  CMSEG_CHECK_CONFIG(gamma.numel() == C && beta.numel() == C,
                     "layer_norm: affine size mismatch");
  const int64_t R = x.numel() / C;
  std::vector<double> v(static_cast<size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<size_t>(R)), mean(static_cast<size_t>(R));
  for (int64_t r = 0; r < R; ++r) {
    const double* row = x.data() + r * C;
    double m = 0.0;
    for (int64_t c = 0; c < C; ++c) m += row[c];
    m /= C;
    double var = 0.0;
    for (int64_t c = 0; c < C; ++c) var += (row[c] - m) * (row[c] - m);
    var /= C;
    const double is = 1.0 / std::sqrt(var + eps);
    mean[r] = m;
    inv_std[r] = is;
    for (int64_t c = 0; c < C; ++c)
      v[r * C + c] = (row[c] - m) * is * gamma.values()[c] + beta.values()[c];
  }
  return make_op(
      x.shape(), std::move(v), {x, gamma, beta},
      [R, C, mean = std::move(mean), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
          const double* row = px.value.data() + r * C;
          const double* g = self.grad.data() + r * C;
          const double is = inv_std[r], m = mean[r];
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int64_t c = 0; c < C; ++c) {
            const double xh = (row[c] - m) * is;
            const double dxh = g[c] * pg.value[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            if (pg.requires_grad) pg.grad[c] += g[c] * xh;
            if (pb.requires_grad) pb.grad[c] += g[c];
          }
          if (px.requires_grad) {
            for (int64_t c = 0; c < C; ++c) {
              const double xh = (row[c] - m) * is;
              const double dxh = g[c] * pg.value[c];
              px.grad[r * C + c] +=
                  is * (dxh - sum_dxh / C - xh * sum_dxh_xh / C);
            }
          }
        }
      });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum, double eps) {
  CMSEG_CHECK_INPUT(x.ndim() == 4, "batch_norm2d: need (B,C,H,W)");
  const int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  CMSEG_CHECK_CONFIG(gamma.numel() == C && beta.numel() == C &&
                         running_mean.numel() == C && running_var.numel() == C,
                     "batch_norm2d: channel mismatch");
  const int64_t R = B * hw;
  std::vector<double> mean(static_cast<size_t>(C), 0.0),
      var(static_cast<size_t>(C), 0.0);
  if (training) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double* p = x.data() + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) mean[c] += p[i];
      }
    for (int64_t c = 0; c < C; ++c) mean[c] /= R;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double* p = x.data() + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i)
          var[c] += (p[i] - mean[c]) * (p[i] - mean[c]);
      }
    for (int64_t c = 0; c < C; ++c) var[c] /= R;
    // Biased variance in the running buffers as well; documented.
    for (int64_t c = 0; c < C; ++c) {
      running_mean.data()[c] =
          (1.0 - momentum) * running_mean.data()[c] + momentum * mean[c];
      running_var.data()[c] =
          (1.0 - momentum) * running_var.data()[c] + momentum * var[c];
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      var[c] = running_var.data()[c];
    }
  }
  std::vector<double> v(static_cast<size_t>(x.numel()));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double is = 1.0 / std::sqrt(var[c] + eps);
      const double* p = x.data() + (b * C + c) * hw;
      double* o = v.data() + (b * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i)
        o[i] = (p[i] - mean[c]) * is * gamma.values()[c] + beta.values()[c];
    }
  return make_op(
      x.shape(), std::move(v), {x, gamma, beta},
      [B, C, hw, R, training, mean = std::move(mean),
       var = std::move(var), eps](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
          const double is = 1.0 / std::sqrt(var[c] + eps);
          double sum_d = 0.0, sum_d_xh = 0.0;
          for (int64_t b = 0; b < B; ++b) {
            const double* xv = px.value.data() + (b * C + c) * hw;
            const double* g = self.grad.data() + (b * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              const double xh = (xv[i] - mean[c]) * is;
              sum_d += g[i];
              sum_d_xh += g[i] * xh;
            }
          }
          if (pg.requires_grad) pg.grad[c] += sum_d_xh;
          if (pb.requires_grad) pb.grad[c] += sum_d;
          if (px.requires_grad) {
            const double gm = pg.value[c];
            for (int64_t b = 0; b < B; ++b) {
              const double* xv = px.value.data() + (b * C + c) * hw;
              const double* g = self.grad.data() + (b * C + c) * hw;
              double* dx = px.grad.data() + (b * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                if (training) {
                  const double xh = (xv[i] - mean[c]) * is;
                  dx[i] += gm * is * (g[i] - sum_d / R - xh * sum_d_xh / R);
                } else {
                  dx[i] += gm * is * g[i];
                }
              }
            }
          }
        }
      });
}

// ------------------------------------------------------------------ softmax

Tensor softmax_lastdim(const Tensor& x, const std::vector<uint8_t>* key_mask,
                       int64_t batch) {
  const int64_t K = x.dim(x.ndim() - 1);
  const int64_t R = x.numel() / K;
  int64_t rows_per_batch = 0;
  if (key_mask) {
    CMSEG_CHECK_INPUT(batch > 0 && R % batch == 0 &&
                          static_cast<int64_t>(key_mask->size()) == batch * K,
                      "softmax_lastdim: bad mask layout");
    rows_per_batch = R / batch;
  }
  std::vector<double> v(static_cast<size_t>(x.numel()), 0.0);
  for (int64_t r = 0; r < R; ++r) {
    const uint8_t* m =
        key_mask ? key_mask->data() + (r / rows_per_batch) * K : nullptr;
    const double* row = x.data() + r * K;
    double* out = v.data() + r * K;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k < K; ++k)
      if (!m || m[k]) mx = std::max(mx, row[k]);
    if (!std::isfinite(mx)) continue;  // fully masked row stays zero
    double sum = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      if (m && !m[k]) continue;
      out[k] = std::exp(row[k] - mx);
      sum += out[k];
    }
    for (int64_t k = 0; k < K; ++k) out[k] /= sum;
  }
  return make_op(x.shape(), std::move(v), {x}, [R, K](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const double* y = self.value.data() + r * K;
      const double* g = self.grad.data() + r * K;
      double dot = 0.0;
      for (int64_t k = 0; k < K; ++k) dot += y[k] * g[k];
      for (int64_t k = 0; k < K; ++k)
        p.grad[r * K + k] += y[k] * (g[k] - dot);
    }
  });
}

Tensor softmax_dim1(const Tensor& x) {
  CMSEG_CHECK_INPUT(x.ndim() == 4, "softmax_dim1: need (B,C,H,W)");
  const int64_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> v(static_cast<size_t>(x.numel()));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < C; ++c)
        mx = std::max(mx, x.values()[(b * C + c) * hw + i]);
      double sum = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        double e = std::exp(x.values()[(b * C + c) * hw + i] - mx);
        v[(b * C + c) * hw + i] = e;
        sum += e;
      }
      for (int64_t c = 0; c < C; ++c) v[(b * C + c) * hw + i] /= sum;
    }
  return make_op(x.shape(), std::move(v), {x}, [B, C, hw](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < hw; ++i) {
        double dot = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          const int64_t k = (b * C + c) * hw + i;
          dot += self.value[k] * self.grad[k];
        }
        for (int64_t c = 0; c < C; ++c) {
          const int64_t k = (b * C + c) * hw + i;
          p.grad[k] += self.value[k] * (self.grad[k] - dot);
        }
      }
  });
}

// ------------------------------------------------------------ conv/resample

namespace {

struct ConvDims {
  int64_t B, Cin, H, W, Cout, kh, kw, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Shape& w, int64_t stride, int64_t pad,
                   bool per_sample) {
  CMSEG_CHECK_INPUT(x.ndim() == 4, "conv2d: input must be (B,C,H,W)");
  ConvDims d;
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  size_t off = per_sample ? 1 : 0;
  d.Cout = w[off + 0];
  d.kh = w[off + 2];
  d.kw = w[off + 3];
  CMSEG_CHECK_CONFIG(w[off + 1] == d.Cin,
                     "conv2d: kernel expects " + std::to_string(w[off + 1]) +
                         " input channels, got " + std::to_string(d.Cin));
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  CMSEG_CHECK_INPUT(d.Ho > 0 && d.Wo > 0, "conv2d: kernel larger than input");
  return d;
}

// im2col for one sample: (Ho*Wo, Cin*kh*kw) row-major.
void im2col(const double* x, const ConvDims& d, int64_t stride, int64_t pad,
            double* cols) {
  const int64_t patch = d.Cin * d.kh * d.kw;
  for (int64_t oh = 0; oh < d.Ho; ++oh)
    for (int64_t ow = 0; ow < d.Wo; ++ow) {
      double* row = cols + (oh * d.Wo + ow) * patch;
      int64_t idx = 0;
      for (int64_t c = 0; c < d.Cin; ++c)
        for (int64_t ky = 0; ky < d.kh; ++ky)
          for (int64_t kx = 0; kx < d.kw; ++kx) {
            const int64_t iy = oh * stride - pad + ky;
            const int64_t ix = ow * stride - pad + kx;
            row[idx++] = (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                             ? x[(c * d.H + iy) * d.W + ix]
                             : 0.0;
          }
    }
}

void col2im_acc(const double* cols, const ConvDims& d, int64_t stride,
                int64_t pad, double* dx) {
  const int64_t patch = d.Cin * d.kh * d.kw;
  for (int64_t oh = 0; oh < d.Ho; ++oh)
    for (int64_t ow = 0; ow < d.Wo; ++ow) {
      const double* row = cols + (oh * d.Wo + ow) * patch;
      int64_t idx = 0;
      for (int64_t c = 0; c < d.Cin; ++c)
        for (int64_t ky = 0; ky < d.kh; ++ky)
          for (int64_t kx = 0; kx < d.kw; ++kx) {
            const int64_t iy = oh * stride - pad + ky;
            const int64_t ix = ow * stride - pad + kx;
            if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
              dx[(c * d.H + iy) * d.W + ix] += row[idx];
            ++idx;
          }
    }
}

Tensor conv2d_impl(const Tensor& x, const Tensor& W, const Tensor& b,
                   int64_t stride, int64_t pad, bool per_sample) {
  const ConvDims d = conv_dims(x, W.shape(), stride, pad, per_sample);
  const int64_t patch = d.Cin * d.kh * d.kw;
  const bool has_bias = b.defined();
  if (has_bias)
    CMSEG_CHECK_CONFIG(b.numel() == d.Cout, "conv2d: bias size mismatch");
  std::vector<double> v(static_cast<size_t>(d.B * d.Cout * d.Ho * d.Wo));
  std::vector<double> cols(static_cast<size_t>(d.Ho * d.Wo * patch));
  // out[b] (Cout, Ho*Wo) = W (Cout, patch) * cols(b)^T
  for (int64_t n = 0; n < d.B; ++n) {
    im2col(x.data() + n * d.Cin * d.H * d.W, d, stride, pad, cols.data());
    CMapMat C(cols.data(), d.Ho * d.Wo, patch);
    CMapMat Wm(W.data() + (per_sample ? n * d.Cout * patch : 0), d.Cout, patch);
    MapMat O(v.data() + n * d.Cout * d.Ho * d.Wo, d.Cout, d.Ho * d.Wo);
    O.noalias() = Wm * C.transpose();
    if (has_bias)
      for (int64_t co = 0; co < d.Cout; ++co)
        O.row(co).array() += b.values()[static_cast<size_t>(co)];
  }
  std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, W, b}
                                         : std::vector<Tensor>{x, W};
  return make_op(
      {d.B, d.Cout, d.Ho, d.Wo}, std::move(v), parents,
      [d, stride, pad, patch, per_sample, has_bias](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        std::vector<double> cols(static_cast<size_t>(d.Ho * d.Wo * patch));
        std::vector<double> dcols(cols.size());
        for (int64_t n = 0; n < d.B; ++n) {
          CMapMat G(self.grad.data() + n * d.Cout * d.Ho * d.Wo, d.Cout,
                    d.Ho * d.Wo);
          const int64_t woff = per_sample ? n * d.Cout * patch : 0;
          if (pw.requires_grad || px.requires_grad)
            im2col(px.value.data() + n * d.Cin * d.H * d.W, d, stride, pad,
                   cols.data());
          if (pw.requires_grad) {
            CMapMat C(cols.data(), d.Ho * d.Wo, patch);
            MapMat dW(pw.grad.data() + woff, d.Cout, patch);
            dW.noalias() += G * C;
          }
          if (px.requires_grad) {
            CMapMat Wm(pw.value.data() + woff, d.Cout, patch);
            MapMat dC(dcols.data(), d.Ho * d.Wo, patch);
            dC.noalias() = G.transpose() * Wm;
            col2im_acc(dcols.data(), d, stride, pad,
                       px.grad.data() + n * d.Cin * d.H * d.W);
          }
        }
        if (has_bias) {
          auto& pb = *self.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t n = 0; n < d.B; ++n)
              for (int64_t co = 0; co < d.Cout; ++co) {
                const double* g =
                    self.grad.data() + (n * d.Cout + co) * d.Ho * d.Wo;
                for (int64_t i = 0; i < d.Ho * d.Wo; ++i) pb.grad[co] += g[i];
              }
          }
        }
      });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& W, const Tensor& b, int64_t stride,
              int64_t pad) {
  CMSEG_CHECK_INPUT(W.ndim() == 4, "conv2d: kernel must be (Cout,Cin,kh,kw)");
  return conv2d_impl(x, W, b, stride, pad, false);
}

Tensor conv2d_per_sample(const Tensor& x, const Tensor& W, const Tensor& b,
                         int64_t stride, int64_t pad) {
  CMSEG_CHECK_INPUT(W.ndim() == 5 && W.dim(0) == x.dim(0),
                    "conv2d_per_sample: kernel must be (B,Cout,Cin,kh,kw)");
  return conv2d_impl(x, W, b, stride, pad, true);
}

Tensor rotate_kernel3x3(const Tensor& W, const Tensor& theta) {
  CMSEG_CHECK_INPUT(W.ndim() == 4 && W.dim(2) == 3 && W.dim(3) == 3,
                    "rotate_kernel3x3: kernel must be (Cout,Cin,3,3)");
  CMSEG_CHECK_INPUT(theta.ndim() == 1, "rotate_kernel3x3: theta must be (B)");
  const int64_t B = theta.dim(0), Co = W.dim(0), Ci = W.dim(1);
  const int64_t planes = Co * Ci;
  std::vector<double> v(static_cast<size_t>(B * planes * 9), 0.0);

  auto base_at = [&](int64_t plane, int64_t r, int64_t c) -> double {
    if (r < -1 || r > 1 || c < -1 || c > 1) return 0.0;
    return W.values()[plane * 9 + (r + 1) * 3 + (c + 1)];
  };

  for (int64_t b = 0; b < B; ++b) {
    const double th = theta.values()[b];
    const double cs = std::cos(th), sn = std::sin(th);
    for (int64_t tap = 0; tap < 9; ++tap) {
      const double y = tap / 3 - 1, x = tap % 3 - 1;
      // Rotated kernel reads the base kernel at the inverse-rotated point.
      const double u = x * cs + y * sn;   // col
      const double w = -x * sn + y * cs;  // row
      const int64_t c0 = static_cast<int64_t>(std::floor(u));
      const int64_t r0 = static_cast<int64_t>(std::floor(w));
      const double fu = u - c0, fw = w - r0;
      for (int64_t pl = 0; pl < planes; ++pl) {
        const double s =
            (1 - fw) * ((1 - fu) * base_at(pl, r0, c0) + fu * base_at(pl, r0, c0 + 1)) +
            fw * ((1 - fu) * base_at(pl, r0 + 1, c0) + fu * base_at(pl, r0 + 1, c0 + 1));
        v[(b * planes + pl) * 9 + tap] = s;
      }
    }
  }
  return make_op(
      {B, Co, Ci, 3, 3}, std::move(v), {W, theta},
      [B, planes](detail::Node& self) {
        auto& pw = *self.parents[0];
        auto& pt = *self.parents[1];
        if (pw.requires_grad) pw.ensure_grad();
        if (pt.requires_grad) pt.ensure_grad();
        auto base_at = [&](int64_t plane, int64_t r, int64_t c) -> double {
          if (r < -1 || r > 1 || c < -1 || c > 1) return 0.0;
          return pw.value[plane * 9 + (r + 1) * 3 + (c + 1)];
        };
        auto in_grid = [](int64_t r, int64_t c) {
          return r >= -1 && r <= 1 && c >= -1 && c <= 1;
        };
        for (int64_t b = 0; b < B; ++b) {
          const double th = pt.value[b];
          const double cs = std::cos(th), sn = std::sin(th);
          double dth = 0.0;
          for (int64_t tap = 0; tap < 9; ++tap) {
            const double y = tap / 3 - 1, x = tap % 3 - 1;
            const double u = x * cs + y * sn;
            const double w = -x * sn + y * cs;
            const double du_dth = -x * sn + y * cs;
            const double dw_dth = -x * cs - y * sn;
            const int64_t c0 = static_cast<int64_t>(std::floor(u));
            const int64_t r0 = static_cast<int64_t>(std::floor(w));
            const double fu = u - c0, fw = w - r0;
            for (int64_t pl = 0; pl < planes; ++pl) {
              const double g = self.grad[(b * planes + pl) * 9 + tap];
              if (g == 0.0) continue;
              const double v00 = base_at(pl, r0, c0), v01 = base_at(pl, r0, c0 + 1);
              const double v10 = base_at(pl, r0 + 1, c0),
                           v11 = base_at(pl, r0 + 1, c0 + 1);
              if (pw.requires_grad) {
                if (in_grid(r0, c0))
                  pw.grad[pl * 9 + (r0 + 1) * 3 + (c0 + 1)] += g * (1 - fw) * (1 - fu);
                if (in_grid(r0, c0 + 1))
                  pw.grad[pl * 9 + (r0 + 1) * 3 + (c0 + 2)] += g * (1 - fw) * fu;
                if (in_grid(r0 + 1, c0))
                  pw.grad[pl * 9 + (r0 + 2) * 3 + (c0 + 1)] += g * fw * (1 - fu);
                if (in_grid(r0 + 1, c0 + 1))
                  pw.grad[pl * 9 + (r0 + 2) * 3 + (c0 + 2)] += g * fw * fu;
              }
              if (pt.requires_grad) {
                const double ds_du = (1 - fw) * (v01 - v00) + fw * (v11 - v10);
                const double ds_dw = (1 - fu) * (v10 - v00) + fu * (v11 - v01);
                dth += g * (ds_du * du_dth + ds_dw * dw_dth);
              }
            }
          }
          if (pt.requires_grad) pt.grad[b] += dth;
        }
      });
}

Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  CMSEG_CHECK_INPUT(x.ndim() == 4, "upsample_bilinear: need (B,C,H,W)");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  // align_corners=false convention.
  auto src_idx = [](int64_t dst, int64_t in, int64_t out, int64_t& i0,
                    int64_t& i1, double& f) {
    double s = (dst + 0.5) * static_cast<double>(in) / out - 0.5;
    if (s < 0) s = 0;
    i0 = static_cast<int64_t>(std::floor(s));
    if (i0 > in - 1) i0 = in - 1;
    i1 = std::min(i0 + 1, in - 1);
    f = s - i0;
  };
  std::vector<int64_t> y0(out_h), y1(out_h), x0(out_w), x1(out_w);
  std::vector<double> fy(out_h), fx(out_w);
  for (int64_t i = 0; i < out_h; ++i) src_idx(i, H, out_h, y0[i], y1[i], fy[i]);
  for (int64_t j = 0; j < out_w; ++j) src_idx(j, W, out_w, x0[j], x1[j], fx[j]);
  std::vector<double> v(static_cast<size_t>(B * C * out_h * out_w));
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* in = x.data() + bc * H * W;
    double* out = v.data() + bc * out_h * out_w;
    for (int64_t i = 0; i < out_h; ++i)
      for (int64_t j = 0; j < out_w; ++j) {
        const double a = in[y0[i] * W + x0[j]], bb = in[y0[i] * W + x1[j]];
        const double c = in[y1[i] * W + x0[j]], dd = in[y1[i] * W + x1[j]];
        out[i * out_w + j] = (1 - fy[i]) * ((1 - fx[j]) * a + fx[j] * bb) +
                             fy[i] * ((1 - fx[j]) * c + fx[j] * dd);
      }
  }
  return make_op(
      {B, C, out_h, out_w}, std::move(v), {x},
      [B, C, H, W, out_h, out_w, y0 = std::move(y0), y1 = std::move(y1),
       x0 = std::move(x0), x1 = std::move(x1), fy = std::move(fy),
       fx = std::move(fx)](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc) {
          double* dx = p.grad.data() + bc * H * W;
          const double* g = self.grad.data() + bc * out_h * out_w;
          for (int64_t i = 0; i < out_h; ++i)
            for (int64_t j = 0; j < out_w; ++j) {
              const double gg = g[i * out_w + j];
              dx[y0[i] * W + x0[j]] += gg * (1 - fy[i]) * (1 - fx[j]);
              dx[y0[i] * W + x1[j]] += gg * (1 - fy[i]) * fx[j];
              dx[y1[i] * W + x0[j]] += gg * fy[i] * (1 - fx[j]);
              dx[y1[i] * W + x1[j]] += gg * fy[i] * fx[j];
            }
        }
      });
}

// -------------------------------------------------------- indexing / losses

Tensor embedding(const std::vector<int64_t>& ids, Shape ids_shape,
                 const Tensor& table) {
  CMSEG_CHECK_INPUT(table.ndim() == 2, "embedding: table must be 2D");
  const int64_t V = table.dim(0), C = table.dim(1);
  for (int64_t id : ids)
    CMSEG_CHECK_INPUT(id >= 0 && id < V,
                      "embedding: token id " + std::to_string(id) +
                          " out of vocabulary (size " + std::to_string(V) + ")");
  std::vector<double> v(ids.size() * static_cast<size_t>(C));
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(v.data() + i * C, table.data() + ids[i] * C,
                sizeof(double) * C);
  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(C);
  return make_op(std::move(out_shape), std::move(v), {table},
                 [ids, C](detail::Node& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < ids.size(); ++i)
                     for (int64_t c = 0; c < C; ++c)
                       p.grad[ids[i] * C + c] += self.grad[i * C + c];
                 });
}

Tensor cross_entropy2(const Tensor& logits, const std::vector<uint8_t>& target) {
  CMSEG_CHECK_INPUT(logits.ndim() == 4 && logits.dim(1) == 2,
                    "cross_entropy2: logits must be (B,2,H,W)");
  const int64_t B = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  CMSEG_CHECK_INPUT(static_cast<int64_t>(target.size()) == B * hw,
                    "cross_entropy2: target size mismatch");
  for (uint8_t t : target)
    CMSEG_CHECK_INPUT(t <= 1, "cross_entropy2: target values must be 0 or 1");
  const int64_t n = B * hw;
  double loss = 0.0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      const double z0 = logits.values()[(b * 2 + 0) * hw + i];
      const double z1 = logits.values()[(b * 2 + 1) * hw + i];
      const double mx = std::max(z0, z1);
      const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
      const double zt = target[b * hw + i] ? z1 : z0;
      loss += lse - zt;
    }
  loss /= n;
  return make_op({1}, {loss}, {logits}, [B, hw, n, target](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0] / n;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < hw; ++i) {
        const double z0 = p.value[(b * 2 + 0) * hw + i];
        const double z1 = p.value[(b * 2 + 1) * hw + i];
        const double mx = std::max(z0, z1);
        const double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
        const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
        const int t = target[b * hw + i];
        p.grad[(b * 2 + 0) * hw + i] += g * (p0 - (t == 0 ? 1.0 : 0.0));
        p.grad[(b * 2 + 1) * hw + i] += g * (p1 - (t == 1 ? 1.0 : 0.0));
      }
  });
}

}  // namespace cmseg
