#pragma once

#include <optional>
#include <vector>

#include "cmseg/tensor.hpp"

// Differentiable op library. All ops are pure: they return fresh tensors and
// record the graph when grad mode is on. Layouts: images are (B,C,H,W),
// token sequences are (B,T,C), batched matrices are (B,M,N).
namespace cmseg {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// a + b with b broadcast over leading dims (b.shape must be a suffix of
// a.shape); covers biases and positional tables.
Tensor add_suffix(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor tanh_op(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);        // (M,K)x(K,N)
Tensor bmm(const Tensor& a, const Tensor& b);           // (B,M,K)x(B,K,N)
Tensor bmm_nt(const Tensor& a, const Tensor& b);        // (B,M,K)x(B,N,K) -> (B,M,N)
// x (...,Cin) -> (...,Cout); W is (Cin,Cout), b optional (Cout).
Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b = Tensor());

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_channels(const Tensor& a, const Tensor& b);   // dim 1 of NCHW
Tensor slice_dim1(const Tensor& x, int64_t c);              // (B,C,H,W) -> (B,H,W)
Tensor nchw_to_tokens(const Tensor& x);                     // (B,C,H,W) -> (B,HW,C)
Tensor tokens_to_nchw(const Tensor& x, int64_t h, int64_t w);
Tensor split_heads(const Tensor& x, int64_t heads);         // (B,T,C) -> (B*h,T,C/h)
Tensor merge_heads(const Tensor& x, int64_t heads);         // (B*h,T,d) -> (B,T,h*d)
Tensor space_to_depth2(const Tensor& x);                    // (B,C,H,W) -> (B,4C,H/2,W/2)

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_spatial(const Tensor& x);        // (B,H,W) -> (B)
Tensor global_avg_pool(const Tensor& x);    // (B,C,H,W) -> (B,C)

// ---- normalization ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// Training mode uses batch statistics and updates the running buffers in
// place; eval mode normalizes with the buffers.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

// ---- attention pieces ----
// Softmax over the last dim of (R,Q,K). `key_mask`, when given, is (B,K) with
// 1=real key, 0=masked; R must be a multiple of B. Masked keys get exactly
// zero weight.
Tensor softmax_lastdim(const Tensor& x,
                       const std::vector<uint8_t>* key_mask = nullptr,
                       int64_t batch = 0);
// Softmax over channel dim of (B,C,H,W).
Tensor softmax_dim1(const Tensor& x);

// ---- conv / resampling ----
Tensor conv2d(const Tensor& x, const Tensor& W, const Tensor& b,
              int64_t stride = 1, int64_t pad = 0);
// Per-sample kernels: W is (B,Cout,Cin,kh,kw).
Tensor conv2d_per_sample(const Tensor& x, const Tensor& W, const Tensor& b,
                         int64_t stride = 1, int64_t pad = 0);
// Rotate a (Cout,Cin,3,3) kernel by a per-sample angle (radians) via
// bilinear resampling on the tap grid; zero outside. angle 0 is exact
// identity.
Tensor rotate_kernel3x3(const Tensor& W, const Tensor& theta);
Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);

// ---- indexing / losses ----
Tensor embedding(const std::vector<int64_t>& ids, Shape ids_shape,
                 const Tensor& table);
// Mean over pixels of 2-class cross entropy; logits (B,2,H,W),
// target (B,H,W) in {0,1}.
Tensor cross_entropy2(const Tensor& logits, const std::vector<uint8_t>& target);

}  // namespace cmseg
