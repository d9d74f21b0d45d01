#pragma once

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmseg/ops.hpp"
#include "cmseg/tensor.hpp"

namespace cmseg {

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(uint64_t seed) : gen(seed) {}
  double normal(double mean = 0.0, double std = 1.0) {
    return std::normal_distribution<double>(mean, std)(gen);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  int64_t randint(int64_t lo, int64_t hi) {  // inclusive range
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen);
  }
};

// Flat registry of named parameters and buffers. Creation order is the
// checkpoint order; names use dotted paths (e.g. smgam.stage2.lgvla.wq).
class ParamStore {
 public:
  // Trainable leaf initialized by `init(rng)` per element.
  Tensor param(const std::string& name, Shape shape, Rng& rng, double std);
  Tensor param_zeros(const std::string& name, Shape shape);
  Tensor param_const(const std::string& name, Shape shape, double v);
  // Non-trainable state (BN running stats).
  Tensor buffer(const std::string& name, Shape shape, double fill);

  bool has(const std::string& name) const { return map_.count(name) > 0; }
  Tensor get(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  bool is_buffer(const std::string& name) const { return buffer_.at(name); }

  std::vector<Tensor> trainable() const;
  const std::vector<std::string>& trainable_names() const { return trainable_names_; }
  int64_t total_parameters() const;  // trainable elements
  void zero_grad();
  // FNV hash over all values; used for determinism checks.
  uint64_t value_checksum() const;

 private:
  Tensor insert(const std::string& name, Tensor t, bool buffer);
  std::vector<std::string> order_;
  std::vector<std::string> trainable_names_;
  std::unordered_map<std::string, Tensor> map_;
  std::unordered_map<std::string, bool> buffer_;
};

// ---- reusable layers (thin wrappers that own their tensors) ----

struct Linear {
  Tensor W, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out,
         Rng& rng, bool bias = true, double init_std = -1.0);
  Tensor forward(const Tensor& x) const { return linear(x, W, b); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& prefix, int64_t dim);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct BatchNorm2d {
  Tensor gamma, beta, running_mean, running_var;
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& ps, const std::string& prefix, int64_t channels);
  Tensor forward(const Tensor& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training);
  }
};

struct AttentionResult {
  Tensor output;      // (B,Tq,C)
  Tensor similarity;  // (B,heads,Tq,Tk) softmax weights; undefined on the
                      // chunked inference path
};

// Scaled dot-product attention over already-projected q/k/v, per-head scale
// sqrt(C/heads). key_mask (B,Tk): 1 = real key. Uses a query-chunked
// streaming path when grad recording is off so big token counts stay cheap.
AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          int64_t heads,
                          const std::vector<uint8_t>* key_mask = nullptr,
                          bool want_similarity = false);

// Standard multi-head attention block: four projections around attention().
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int64_t heads = 1;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& prefix, int64_t dim,
                     int64_t kv_dim, int64_t n_heads, Rng& rng);
  Tensor forward(const Tensor& x_q, const Tensor& x_kv,
                 const std::vector<uint8_t>* key_mask = nullptr) const;
};

}  // namespace cmseg
