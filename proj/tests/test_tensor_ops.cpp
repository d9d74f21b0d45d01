#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cmseg/nn.hpp"
#include "cmseg/ops.hpp"
#include "test_helpers.hpp"

using namespace cmseg;
using testutil::fd_check_param;
using testutil::random_tensor;
using testutil::sample_coords;

namespace {

// Runs fd vs analytic for a scalar-producing graph over one input tensor.
void check_grad(Tensor input, const std::function<Tensor()>& graph,
                double tol = 1e-6, double step = 1e-4) {
  input.set_requires_grad(true);
  input.zero_grad();
  Tensor loss = graph();
  loss.backward();
  auto eval = [&]() { return graph().item(); };
  auto rep = fd_check_param(input, eval, sample_coords(input.numel(), 16), step);
  CAPTURE(rep.worst);
  CHECK(rep.max_rel_err < tol);
}

}  // namespace

TEST_CASE("add/sub/mul/div forward and grads") {
  Rng rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  for (int64_t i = 0; i < b.numel(); ++i) b.data()[i] += 3.0;  // keep /b sane

  CHECK(add(a, b).at({1, 2}) == doctest::Approx(a.at({1, 2}) + b.at({1, 2})));
  CHECK(sub(a, b).at({2, 1}) == doctest::Approx(a.at({2, 1}) - b.at({2, 1})));
  CHECK(mul(a, b).at({0, 3}) == doctest::Approx(a.at({0, 3}) * b.at({0, 3})));
  CHECK(div(a, b).at({2, 3}) == doctest::Approx(a.at({2, 3}) / b.at({2, 3})));

  check_grad(a, [&] { return mean_all(mul(add(a, b), div(a, b))); });
  check_grad(b, [&] { return mean_all(mul(sub(a, b), div(a, b))); });
}

TEST_CASE("scale / add_scalar / add_suffix") {
  Rng rng(2);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  Tensor table = random_tensor({3, 4}, rng);

  Tensor y = add_suffix(a, bias);
  CHECK(y.at({1, 2, 3}) == doctest::Approx(a.at({1, 2, 3}) + bias.at({3})));
  Tensor z = add_suffix(a, table);
  CHECK(z.at({1, 2, 3}) == doctest::Approx(a.at({1, 2, 3}) + table.at({2, 3})));

  check_grad(a, [&] { return mean_all(scale(add_scalar(add_suffix(a, bias), 0.5), 2.0)); });
  check_grad(bias, [&] { return mean_all(mul(add_suffix(a, bias), add_suffix(a, bias))); });
  check_grad(table, [&] { return sum_all(add_suffix(a, table)); });
}

TEST_CASE("activations match references and grads") {
  Rng rng(3);
  Tensor x = random_tensor({4, 5}, rng);

  Tensor r = relu(x), g = gelu(x), t = tanh_op(x);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    CHECK(r.data()[i] == doctest::Approx(std::max(0.0, v)));
    CHECK(g.data()[i] ==
          doctest::Approx(v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)))));
    CHECK(t.data()[i] == doctest::Approx(std::tanh(v)));
  }
  check_grad(x, [&] { return mean_all(gelu(x)); });
  check_grad(x, [&] { return mean_all(tanh_op(x)); });
  // relu kink: keep inputs away from zero for fd
  Tensor far = random_tensor({4, 5}, rng);
  for (int64_t i = 0; i < far.numel(); ++i)
    if (std::fabs(far.data()[i]) < 0.05) far.data()[i] = 0.5;
  check_grad(far, [&] { return mean_all(relu(far)); });
}

TEST_CASE("matmul / bmm / bmm_nt / linear") {
  Rng rng(4);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);
  double manual = 0.0;
  for (int64_t k = 0; k < 4; ++k) manual += a.at({1, k}) * b.at({k, 2});
  CHECK(c.at({1, 2}) == doctest::Approx(manual));

  check_grad(a, [&] { return mean_all(matmul(a, b)); });
  check_grad(b, [&] { return mean_all(mul(matmul(a, b), matmul(a, b))); });

  Tensor ba = random_tensor({2, 3, 4}, rng);
  Tensor bb = random_tensor({2, 4, 5}, rng);
  Tensor bc = bmm(ba, bb);
  manual = 0.0;
  for (int64_t k = 0; k < 4; ++k) manual += ba.at({1, 2, k}) * bb.at({1, k, 3});
  CHECK(bc.at({1, 2, 3}) == doctest::Approx(manual));
  check_grad(ba, [&] { return mean_all(bmm(ba, bb)); });
  check_grad(bb, [&] { return mean_all(bmm(ba, bb)); });

  Tensor bn = random_tensor({2, 5, 4}, rng);
  Tensor nt = bmm_nt(ba, bn);
  manual = 0.0;
  for (int64_t k = 0; k < 4; ++k) manual += ba.at({0, 1, k}) * bn.at({0, 3, k});
  CHECK(nt.at({0, 1, 3}) == doctest::Approx(manual));
  check_grad(ba, [&] { return mean_all(bmm_nt(ba, bn)); });
  check_grad(bn, [&] { return mean_all(bmm_nt(ba, bn)); });

  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor W = random_tensor({4, 6}, rng);
  Tensor bias = random_tensor({6}, rng);
  Tensor y = linear(x, W, bias);
  CHECK(y.shape() == Shape{2, 3, 6});
  manual = bias.at({5});
  for (int64_t k = 0; k < 4; ++k) manual += x.at({1, 2, k}) * W.at({k, 5});
  CHECK(y.at({1, 2, 5}) == doctest::Approx(manual));
  check_grad(x, [&] { return mean_all(linear(x, W, bias)); });
  check_grad(W, [&] { return mean_all(linear(x, W, bias)); });
  check_grad(bias, [&] { return mean_all(mul(linear(x, W, bias), linear(x, W, bias))); });
}

TEST_CASE("shape ops round-trip and route grads") {
  Rng rng(5);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);

  Tensor tok = nchw_to_tokens(x);
  CHECK(tok.shape() == Shape{2, 16, 3});
  CHECK(tok.at({1, 5, 2}) == doctest::Approx(x.at({1, 2, 1, 1})));
  Tensor back = tokens_to_nchw(tok, 4, 4);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(back.data()[i] == doctest::Approx(x.data()[i]));

  Tensor heads = split_heads(tok, 3);
  CHECK(heads.shape() == Shape{6, 16, 1});
  Tensor merged = merge_heads(heads, 3);
  for (int64_t i = 0; i < tok.numel(); ++i)
    CHECK(merged.data()[i] == doctest::Approx(tok.data()[i]));

  Tensor s2d = space_to_depth2(x);
  CHECK(s2d.shape() == Shape{2, 12, 2, 2});
  CHECK(s2d.at({0, 0, 1, 1}) == doctest::Approx(x.at({0, 0, 2, 2})));
  CHECK(s2d.at({0, 3 + 1, 0, 0}) == doctest::Approx(x.at({0, 1, 0, 1})));

  check_grad(x, [&] { return mean_all(mul(space_to_depth2(x), space_to_depth2(x))); });
  check_grad(x, [&] {
    return mean_all(mul(nchw_to_tokens(x), nchw_to_tokens(x)));
  });

  Tensor a = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2, 4, 3, 3}, rng);
  Tensor cat = concat_channels(a, b);
  CHECK(cat.shape() == Shape{2, 6, 3, 3});
  CHECK(cat.at({1, 1, 2, 2}) == doctest::Approx(a.at({1, 1, 2, 2})));
  CHECK(cat.at({1, 3, 0, 1}) == doctest::Approx(b.at({1, 1, 0, 1})));
  check_grad(a, [&] { return mean_all(mul(concat_channels(a, b), concat_channels(a, b))); });
  check_grad(b, [&] { return mean_all(mul(concat_channels(a, b), concat_channels(a, b))); });

  Tensor sl = slice_dim1(b, 2);
  CHECK(sl.shape() == Shape{2, 3, 3});
  CHECK(sl.at({0, 1, 1}) == doctest::Approx(b.at({0, 2, 1, 1})));
  check_grad(b, [&] { return mean_all(mul(slice_dim1(b, 2), slice_dim1(b, 2))); });
}

TEST_CASE("reductions") {
  Rng rng(6);
  Tensor x = random_tensor({2, 3, 4}, rng);
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x.data()[i];
  CHECK(sum_all(x).item() == doctest::Approx(s));
  CHECK(mean_all(x).item() == doctest::Approx(s / 24.0));

  Tensor bhw = random_tensor({2, 3, 3}, rng);
  Tensor ss = sum_spatial(bhw);
  double m = 0.0;
  for (int64_t i = 0; i < 9; ++i) m += bhw.data()[9 + i];
  CHECK(ss.at({1}) == doctest::Approx(m));
  check_grad(bhw, [&] { return mean_all(mul(sum_spatial(bhw), sum_spatial(bhw))); });

  Tensor img = random_tensor({2, 3, 4, 4}, rng);
  Tensor gap = global_avg_pool(img);
  CHECK(gap.shape() == Shape{2, 3});
  double acc = 0.0;
  for (int64_t i = 0; i < 16; ++i) acc += img.data()[(1 * 3 + 2) * 16 + i];
  CHECK(gap.at({1, 2}) == doctest::Approx(acc / 16.0));
  check_grad(img, [&] { return mean_all(mul(global_avg_pool(img), global_avg_pool(img))); });
}

TEST_CASE("layer_norm statistics and grads") {
  Rng rng(7);
  Tensor x = random_tensor({3, 8}, rng, 2.0);
  Tensor gamma = random_tensor({8}, rng);
  Tensor beta = random_tensor({8}, rng);
  Tensor y = layer_norm(x, gamma, beta);

  // with gamma=1, beta=0 each row is standardized
  Tensor ones({8}, 1.0), zeros({8}, 0.0);
  Tensor yn = layer_norm(x, ones, zeros);
  for (int64_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (int64_t c = 0; c < 8; ++c) m += yn.at({r, c});
    m /= 8;
    for (int64_t c = 0; c < 8; ++c) v += (yn.at({r, c}) - m) * (yn.at({r, c}) - m);
    CHECK(m == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(v / 8 == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(y.at({1, 3}) == doctest::Approx(yn.at({1, 3}) * gamma.at({3}) + beta.at({3})));

  check_grad(x, [&] { return mean_all(mul(layer_norm(x, gamma, beta), layer_norm(x, gamma, beta))); });
  check_grad(gamma, [&] { return mean_all(mul(layer_norm(x, gamma, beta), layer_norm(x, gamma, beta))); });
  check_grad(beta, [&] { return mean_all(mul(layer_norm(x, gamma, beta), layer_norm(x, gamma, beta))); });
}

TEST_CASE("batch_norm2d train/eval behavior and grads") {
  Rng rng(8);
  Tensor x = random_tensor({2, 3, 4, 4}, rng, 1.5);
  Tensor gamma = random_tensor({3}, rng), beta = random_tensor({3}, rng);
  Tensor rm({3}, 0.0), rv({3}, 1.0);

  Tensor y = batch_norm2d(x, gamma, beta, rm, rv, true);
  // batch statistics removed per channel
  Tensor ones({3}, 1.0), zeros({3}, 0.0);
  Tensor rm2({3}, 0.0), rv2({3}, 1.0);
  Tensor yn = batch_norm2d(x, ones, zeros, rm2, rv2, true);
  for (int64_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t i = 0; i < 16; ++i) m += yn.at({b, c, i / 4, i % 4});
    CHECK(m / 32.0 == doctest::Approx(0.0).epsilon(1e-9));
  }
  // running buffers moved toward batch stats
  CHECK(rm.at({0}) != doctest::Approx(0.0).epsilon(1e-12));

  // weight the output by a fixed random map so the loss is not (nearly)
  // invariant to x through the normalization
  Tensor wmap = random_tensor({2, 3, 4, 4}, rng);
  auto graph_train = [&] {
    Tensor rma({3}, 0.0), rva({3}, 1.0);
    Tensor bn = batch_norm2d(x, gamma, beta, rma, rva, true);
    return mean_all(mul(mul(bn, bn), wmap));
  };
  check_grad(x, graph_train);
  check_grad(gamma, graph_train);
  check_grad(beta, graph_train);

  auto graph_eval = [&] {
    return mean_all(mul(batch_norm2d(x, gamma, beta, rm, rv, false),
                        batch_norm2d(x, gamma, beta, rm, rv, false)));
  };
  check_grad(x, graph_eval);
  check_grad(gamma, graph_eval);
}

TEST_CASE("softmax rows sum to one; masked keys get exactly zero") {
  Rng rng(9);
  Tensor x = random_tensor({4, 3, 5}, rng, 2.0);
  std::vector<uint8_t> mask = {1, 1, 0, 1, 0,   1, 1, 1, 1, 1};
  Tensor y = softmax_lastdim(x, &mask, 2);
  for (int64_t r = 0; r < 12; ++r) {
    double s = 0.0;
    for (int64_t k = 0; k < 5; ++k) s += y.data()[r * 5 + k];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // rows 0..5 belong to batch 0: keys 2 and 4 masked
  for (int64_t r = 0; r < 6; ++r) {
    CHECK(y.data()[r * 5 + 2] == 0.0);
    CHECK(y.data()[r * 5 + 4] == 0.0);
  }
  check_grad(x, [&] {
    return mean_all(mul(softmax_lastdim(x, &mask, 2), softmax_lastdim(x, &mask, 2)));
  });

  Tensor l = random_tensor({2, 2, 3, 3}, rng);
  Tensor sm = softmax_dim1(l);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 9; ++i)
      CHECK(sm.data()[(b * 2 + 0) * 9 + i] + sm.data()[(b * 2 + 1) * 9 + i] ==
            doctest::Approx(1.0));
  check_grad(l, [&] { return mean_all(mul(softmax_dim1(l), softmax_dim1(l))); });
}

TEST_CASE("conv2d matches naive loop reference") {
  Rng rng(10);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor W = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);

  for (auto [stride, pad] : {std::pair<int64_t, int64_t>{1, 1}, {2, 1}, {1, 0}, {4, 0}}) {
    if (stride == 4) continue;  // kernel 3 stride 4 not used
    Tensor y = conv2d(x, W, b, stride, pad);
    const int64_t Ho = (6 + 2 * pad - 3) / stride + 1;
    CHECK(y.dim(2) == Ho);
    // naive reference
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t co = 0; co < 4; ++co)
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Ho; ++ow) {
            double acc = b.at({co});
            for (int64_t ci = 0; ci < 3; ++ci)
              for (int64_t ky = 0; ky < 3; ++ky)
                for (int64_t kx = 0; kx < 3; ++kx) {
                  int64_t iy = oh * stride - pad + ky, ix = ow * stride - pad + kx;
                  if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
                  acc += x.at({n, ci, iy, ix}) * W.at({co, ci, ky, kx});
                }
            CHECK(y.at({n, co, oh, ow}) == doctest::Approx(acc).epsilon(1e-10));
          }
  }

  check_grad(x, [&] { return mean_all(mul(conv2d(x, W, b, 1, 1), conv2d(x, W, b, 1, 1))); });
  check_grad(W, [&] { return mean_all(mul(conv2d(x, W, b, 1, 1), conv2d(x, W, b, 1, 1))); });
  check_grad(b, [&] { return mean_all(mul(conv2d(x, W, b, 1, 1), conv2d(x, W, b, 1, 1))); });

  // patch-embed style: kernel 4 stride 4
  Tensor Wp = random_tensor({5, 3, 4, 4}, rng);
  Tensor yp = conv2d(x, Wp, Tensor(), 4, 0);
  CHECK(yp.shape() == Shape{2, 5, 1, 1});
  check_grad(Wp, [&] { return mean_all(conv2d(x, Wp, Tensor(), 4, 0)); });
}

TEST_CASE("conv2d_per_sample uses each sample's kernel") {
  Rng rng(11);
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor W = random_tensor({2, 3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor y = conv2d_per_sample(x, W, b, 1, 1);
  // sample 1 with kernel slice 1 must equal shared conv on that sample
  Tensor x1(Shape{1, 2, 4, 4});
  std::copy(x.data() + 32, x.data() + 64, x1.data());
  Tensor W1(Shape{3, 2, 3, 3});
  std::copy(W.data() + 54, W.data() + 108, W1.data());
  Tensor y1 = conv2d(x1, W1, b, 1, 1);
  for (int64_t i = 0; i < y1.numel(); ++i)
    CHECK(y.data()[y1.numel() + i] == doctest::Approx(y1.data()[i]));

  check_grad(x, [&] { return mean_all(mul(conv2d_per_sample(x, W, b, 1, 1), conv2d_per_sample(x, W, b, 1, 1))); });
  check_grad(W, [&] { return mean_all(mul(conv2d_per_sample(x, W, b, 1, 1), conv2d_per_sample(x, W, b, 1, 1))); });
}

TEST_CASE("rotate_kernel3x3: identity at zero, grid mapping at 90 degrees") {
  Rng rng(12);
  Tensor W = random_tensor({2, 3, 3, 3}, rng);

  Tensor theta0({2}, 0.0);
  Tensor r0 = rotate_kernel3x3(W, theta0);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < W.numel(); ++i)
      CHECK(r0.data()[b * W.numel() + i] == doctest::Approx(W.data()[i]).epsilon(1e-12));

  // 90 degrees maps taps onto taps: value at (y,x) comes from (x at -y) spot
  Tensor theta90({1}, M_PI / 2);
  Tensor W1 = random_tensor({1, 1, 3, 3}, rng);
  Tensor r90 = rotate_kernel3x3(W1, theta90);
  // new(y,x) = old(row=-x, col=y)
  for (int64_t y = -1; y <= 1; ++y)
    for (int64_t x = -1; x <= 1; ++x)
      CHECK(r90.at({0, 0, 0, y + 1, x + 1}) ==
            doctest::Approx(W1.at({0, 0, -x + 1, y + 1})).epsilon(1e-9));

  // single-tap kernel at 45 degrees: corner tap spreads bilinearly
  Tensor Wt(Shape{1, 1, 3, 3});
  Wt.data()[0 * 3 + 1] = 1.0;  // tap at (row 0, col 1) = offset (y=-1, x=0)
  Tensor th({1}, M_PI / 4);
  Tensor r45 = rotate_kernel3x3(Wt, th);
  // target tap (y,x) samples base at u=x c+y s, w=-x s+y c with c=s=1/sqrt2.
  // For target (y=-1,x=0): u=-0.7071, w=-0.7071; bilinear corners around it
  // include the base tap at (row=-1, col=0) i.e. (w=-1,u=0) with weight
  // (1-0.2929)*(0.2929)... verify against direct formula:
  const double c = std::cos(M_PI / 4), s = std::sin(M_PI / 4);
  for (int64_t y = -1; y <= 1; ++y)
    for (int64_t x = -1; x <= 1; ++x) {
      const double u = x * c + y * s, w = -x * s + y * c;
      const int64_t c0 = static_cast<int64_t>(std::floor(u));
      const int64_t rr0 = static_cast<int64_t>(std::floor(w));
      const double fu = u - c0, fw = w - rr0;
      auto base = [&](int64_t r, int64_t cc) {
        if (r != -1 || cc != 0) return 0.0;  // the single tap
        return 1.0;
      };
      const double expect =
          (1 - fw) * ((1 - fu) * base(rr0, c0) + fu * base(rr0, c0 + 1)) +
          fw * ((1 - fu) * base(rr0 + 1, c0) + fu * base(rr0 + 1, c0 + 1));
      CHECK(r45.at({0, 0, 0, y + 1, x + 1}) == doctest::Approx(expect).epsilon(1e-12));
    }

  // grads (generic angle away from grid corners)
  Tensor theta = random_tensor({2}, rng, 0.3);
  for (int64_t i = 0; i < 2; ++i) theta.data()[i] += 0.45;
  check_grad(W, [&] { return mean_all(mul(rotate_kernel3x3(W, theta), rotate_kernel3x3(W, theta))); });
  check_grad(theta, [&] { return mean_all(mul(rotate_kernel3x3(W, theta), rotate_kernel3x3(W, theta))); });
}

TEST_CASE("upsample_bilinear: constant preserved, exact 2x midpoints, grads") {
  Rng rng(13);
  Tensor flat({1, 1, 2, 2}, {3.0, 3.0, 3.0, 3.0});
  Tensor up = upsample_bilinear(flat, 4, 4);
  for (int64_t i = 0; i < up.numel(); ++i) CHECK(up.data()[i] == doctest::Approx(3.0));

  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor y = upsample_bilinear(x, 8, 8);
  CHECK(y.shape() == Shape{2, 3, 8, 8});
  // dst 1 samples src (1+0.5)*4/8-0.5 = 0.25, so weights are 0.75/0.25
  const double f = 0.25;
  CHECK(y.at({0, 0, 1, 1}) ==
        doctest::Approx((1 - f) * (1 - f) * x.at({0, 0, 0, 0}) +
                        (1 - f) * f * x.at({0, 0, 0, 1}) +
                        f * (1 - f) * x.at({0, 0, 1, 0}) +
                        f * f * x.at({0, 0, 1, 1})));
  check_grad(x, [&] { return mean_all(mul(upsample_bilinear(x, 8, 8), upsample_bilinear(x, 8, 8))); });
  check_grad(x, [&] { return mean_all(upsample_bilinear(x, 3, 5)); });
}

TEST_CASE("embedding gathers rows and scatters grads") {
  Rng rng(14);
  Tensor table = random_tensor({7, 4}, rng);
  std::vector<int64_t> ids = {1, 3, 1, 0};
  Tensor e = embedding(ids, {2, 2}, table);
  CHECK(e.shape() == Shape{2, 2, 4});
  CHECK(e.at({0, 1, 2}) == doctest::Approx(table.at({3, 2})));
  CHECK(e.at({1, 0, 1}) == doctest::Approx(table.at({1, 1})));
  CHECK_THROWS_AS(embedding({9}, {1}, table), InputError);
  check_grad(table, [&] { return mean_all(mul(embedding(ids, {2, 2}, table), embedding(ids, {2, 2}, table))); });
}

TEST_CASE("cross_entropy2: uniform logits give ln 2; grads check out") {
  Tensor logits({1, 2, 2, 2}, 0.0);
  std::vector<uint8_t> target = {0, 1, 1, 0};
  CHECK(cross_entropy2(logits, target).item() == doctest::Approx(std::log(2.0)));

  Rng rng(15);
  Tensor z = random_tensor({2, 2, 3, 3}, rng);
  std::vector<uint8_t> t(18);
  for (size_t i = 0; i < t.size(); ++i) t[i] = (i * 7 % 3) == 0 ? 1 : 0;
  check_grad(z, [&] { return cross_entropy2(z, t); });
  CHECK_THROWS_AS(cross_entropy2(z, std::vector<uint8_t>{2}), InputError);
}

TEST_CASE("attention: grad path equals nograd streaming path") {
  Rng rng(16);
  Tensor q = random_tensor({2, 5, 8}, rng);
  Tensor k = random_tensor({2, 7, 8}, rng);
  Tensor v = random_tensor({2, 7, 8}, rng);
  std::vector<uint8_t> mask = {1, 1, 1, 0, 1, 0, 1,  1, 1, 1, 1, 1, 1, 0};

  AttentionResult with_graph = attention(q, k, v, 2, &mask, true);
  Tensor streamed;
  {
    NoGradGuard ng;
    streamed = attention(q, k, v, 2, &mask, false).output;
  }
  REQUIRE(with_graph.output.shape() == streamed.shape());
  for (int64_t i = 0; i < streamed.numel(); ++i)
    CHECK(with_graph.output.data()[i] == doctest::Approx(streamed.data()[i]).epsilon(1e-12));

  // similarity rows over real keys sum to 1, masked keys exactly 0
  const Tensor& sim = with_graph.similarity;
  REQUIRE(sim.shape() == Shape{2, 2, 5, 7});
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t qq = 0; qq < 5; ++qq) {
        double s = 0.0;
        for (int64_t kk = 0; kk < 7; ++kk) {
          const double w = sim.at({b, h, qq, kk});
          if (!mask[b * 7 + kk]) CHECK(w == 0.0);
          s += w;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }

  check_grad(q, [&] { return mean_all(attention(q, k, v, 2, &mask).output); });
  check_grad(k, [&] { return mean_all(mul(attention(q, k, v, 2, &mask).output, attention(q, k, v, 2, &mask).output)); });
  check_grad(v, [&] { return mean_all(mul(attention(q, k, v, 2, &mask).output, attention(q, k, v, 2, &mask).output)); });
}

TEST_CASE("single-key attention rows are exactly 1") {
  Rng rng(17);
  Tensor q = random_tensor({1, 4, 6}, rng);
  Tensor k = random_tensor({1, 1, 6}, rng);
  Tensor v = random_tensor({1, 1, 6}, rng);
  AttentionResult r = attention(q, k, v, 3, nullptr, true);
  for (int64_t h = 0; h < 3; ++h)
    for (int64_t i = 0; i < 4; ++i) CHECK(r.similarity.at({0, h, i, 0}) == 1.0);
}

TEST_CASE("backward accumulates across reuse of the same tensor") {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Tensor y = add(mul(x, x), x);  // x^2 + x -> d/dx = 2x + 1
  Tensor s = sum_all(y);
  s.backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(5.0));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  NoGradGuard ng;
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}
