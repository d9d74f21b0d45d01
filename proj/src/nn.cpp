#include "cmseg/nn.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <limits>

namespace cmseg {

Tensor ParamStore::insert(const std::string& name, Tensor t, bool buffer) {
  CMSEG_CHECK_USAGE(!map_.count(name), "duplicate parameter name: " + name);
  order_.push_back(name);
  map_.emplace(name, t);
  buffer_.emplace(name, buffer);
  if (!buffer) {
    t.set_requires_grad(true);
    trainable_names_.push_back(name);
  }
  return t;
}

Tensor ParamStore::param(const std::string& name, Shape shape, Rng& rng,
                         double std) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, std);
  return insert(name, std::move(t), false);
}

Tensor ParamStore::param_zeros(const std::string& name, Shape shape) {
  return insert(name, Tensor(std::move(shape), 0.0), false);
}

Tensor ParamStore::param_const(const std::string& name, Shape shape, double v) {
  return insert(name, Tensor(std::move(shape), v), false);
}

Tensor ParamStore::buffer(const std::string& name, Shape shape, double fill) {
  return insert(name, Tensor(std::move(shape), fill), true);
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = map_.find(name);
  CMSEG_CHECK_USAGE(it != map_.end(), "unknown parameter: " + name);
  return it->second;
}

std::vector<Tensor> ParamStore::trainable() const {
  std::vector<Tensor> out;
  out.reserve(trainable_names_.size());
  for (const auto& n : trainable_names_) out.push_back(map_.at(n));
  return out;
}

int64_t ParamStore::total_parameters() const {
  int64_t n = 0;
  for (const auto& name : trainable_names_) n += map_.at(name).numel();
  return n;
}

void ParamStore::zero_grad() {
  for (const auto& name : trainable_names_) {
    Tensor t = map_.at(name);
    t.zero_grad();
  }
}

uint64_t ParamStore::value_checksum() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& name : order_) {
    const Tensor& t = map_.at(name);
    for (int64_t i = 0; i < t.numel(); ++i) {
      uint64_t bits;
      double v = t.data()[i];
      std::memcpy(&bits, &v, sizeof(bits));
      for (int s = 0; s < 64; s += 8) {
        h ^= (bits >> s) & 0xff;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

Linear::Linear(ParamStore& ps, const std::string& prefix, int64_t in,
               int64_t out, Rng& rng, bool bias, double init_std) {
  const double std = init_std >= 0.0 ? init_std : std::sqrt(2.0 / (in + out));
  W = ps.param(prefix + ".weight", {in, out}, rng, std);
  if (bias) b = ps.param_zeros(prefix + ".bias", {out});
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& prefix, int64_t dim) {
  gamma = ps.param_const(prefix + ".gamma", {dim}, 1.0);
  beta = ps.param_zeros(prefix + ".beta", {dim});
}

BatchNorm2d::BatchNorm2d(ParamStore& ps, const std::string& prefix,
                         int64_t channels) {
  gamma = ps.param_const(prefix + ".gamma", {channels}, 1.0);
  beta = ps.param_zeros(prefix + ".beta", {channels});
  running_mean = ps.buffer(prefix + ".running_mean", {channels}, 0.0);
  running_var = ps.buffer(prefix + ".running_var", {channels}, 1.0);
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Streaming attention used at inference: never materializes the full
// (Tq x Tk) map for all heads at once.
Tensor attention_nograd(const Tensor& q, const Tensor& k, const Tensor& v,
                        int64_t heads, const std::vector<uint8_t>* key_mask) {
  const int64_t B = q.dim(0), Tq = q.dim(1), C = q.dim(2), Tk = k.dim(1);
  const int64_t d = C / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out({B, Tq, C});
  // ~8 MB of scores per chunk.
  const int64_t chunk = std::max<int64_t>(1, (1 << 20) / std::max<int64_t>(1, Tk));
  std::vector<double> scores;
  for (int64_t b = 0; b < B; ++b) {
    const uint8_t* mask = key_mask ? key_mask->data() + b * Tk : nullptr;
    for (int64_t g = 0; g < heads; ++g) {
      for (int64_t q0 = 0; q0 < Tq; q0 += chunk) {
        const int64_t qn = std::min(chunk, Tq - q0);
        scores.assign(static_cast<size_t>(qn * Tk), 0.0);
        for (int64_t i = 0; i < qn; ++i) {
          const double* qr = q.data() + ((b * Tq + q0 + i) * C) + g * d;
          double* sr = scores.data() + i * Tk;
          for (int64_t j = 0; j < Tk; ++j) {
            const double* kr = k.data() + ((b * Tk + j) * C) + g * d;
            double s = 0.0;
            for (int64_t e = 0; e < d; ++e) s += qr[e] * kr[e];
            sr[j] = s * scl;
          }
          double mx = -std::numeric_limits<double>::infinity();
          for (int64_t j = 0; j < Tk; ++j)
            if (!mask || mask[j]) mx = std::max(mx, sr[j]);
          double sum = 0.0;
          for (int64_t j = 0; j < Tk; ++j) {
            if (mask && !mask[j]) {
              sr[j] = 0.0;
              continue;
            }
            sr[j] = std::exp(sr[j] - mx);
            sum += sr[j];
          }
          double* orow = out.data() + ((b * Tq + q0 + i) * C) + g * d;
          for (int64_t j = 0; j < Tk; ++j) {
            const double w = sr[j] / sum;
            if (w == 0.0) continue;
            const double* vr = v.data() + ((b * Tk + j) * C) + g * d;
            for (int64_t e = 0; e < d; ++e) orow[e] += w * vr[e];
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          int64_t heads, const std::vector<uint8_t>* key_mask,
                          bool want_similarity) {
  CMSEG_CHECK_INPUT(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3,
                    "attention: q/k/v must be (B,T,C)");
  CMSEG_CHECK_CONFIG(q.dim(2) == k.dim(2) && k.dim(2) == v.dim(2),
                     "attention: q/k/v width mismatch");
  CMSEG_CHECK_CONFIG(q.dim(2) % heads == 0,
                     "attention: width " + std::to_string(q.dim(2)) +
                         " not divisible by " + std::to_string(heads) + " heads");
  CMSEG_CHECK_INPUT(k.dim(1) == v.dim(1) && k.dim(0) == q.dim(0),
                    "attention: key/value length mismatch");
  const int64_t B = q.dim(0), Tq = q.dim(1), Tk = k.dim(1);
  const int64_t d = q.dim(2) / heads;

  if (!GradMode::enabled() && !want_similarity) {
    AttentionResult r;
    r.output = attention_nograd(q, k, v, heads, key_mask);
    return r;
  }

  Tensor qh = split_heads(q, heads);  // (B*h, Tq, d)
  Tensor kh = split_heads(k, heads);
  Tensor vh = split_heads(v, heads);
  Tensor logits = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = softmax_lastdim(logits, key_mask, B);  // (B*h, Tq, Tk)
  Tensor ctx = bmm(weights, vh);
  AttentionResult r;
  r.output = merge_heads(ctx, heads);
  if (want_similarity) r.similarity = reshape(weights, {B, heads, Tq, Tk});
  return r;
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& prefix,
                                       int64_t dim, int64_t kv_dim,
                                       int64_t n_heads, Rng& rng)
    : heads(n_heads) {
  CMSEG_CHECK_CONFIG(dim % n_heads == 0,
                     prefix + ": width not divisible by head count");
  wq = Linear(ps, prefix + ".wq", dim, dim, rng);
  wk = Linear(ps, prefix + ".wk", kv_dim, dim, rng);
  wv = Linear(ps, prefix + ".wv", kv_dim, dim, rng);
  wo = Linear(ps, prefix + ".wo", dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& x_q, const Tensor& x_kv,
                                   const std::vector<uint8_t>* key_mask) const {
  Tensor q = wq.forward(x_q);
  Tensor k = wk.forward(x_kv);
  Tensor v = wv.forward(x_kv);
  AttentionResult r = attention(q, k, v, heads, key_mask, false);
  return wo.forward(r.output);
}

}  // namespace cmseg
