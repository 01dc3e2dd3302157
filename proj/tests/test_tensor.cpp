// Copyright (c) 2026 emovc authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>

#include "emovc/nn.hpp"
#include "emovc/tensor.hpp"
#include "test_util.hpp"

namespace emovc {
namespace {

using ad::Tensor;
using testutil::grad_check;

Tensor<double> randt(Rng& rng, std::vector<int> shape, bool param = true) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return param ? Tensor<double>::param(shape, v) : Tensor<double>::from_data(shape, v);
}

TEST(Tensor, ElementwiseGrads) {
  Rng rng(1);
  auto a = randt(rng, {3, 4});
  auto b = randt(rng, {3, 4});
  grad_check({a, b}, [&] {
    auto x = ad::add(ad::mul(ad::silu(a), ad::tanh_(b)), ad::square(ad::sub(a, b)));
    auto y = ad::add(x, ad::sigmoid(ad::scale(a, 0.5)));
    auto z = ad::add(y, ad::exp_(ad::scale(b, 0.1)));
    return ad::mean_all(ad::mul(z, z));
  });
}

TEST(Tensor, DivAndScalarGrads) {
  Rng rng(2);
  auto a = randt(rng, {5});
  auto b = randt(rng, {5});
  for (auto& x : b.values()) x = std::abs(x) + 1.0;
  grad_check({a, b}, [&] {
    auto q = ad::div(a, b);
    return ad::sum_all(ad::square(ad::add_scalar(q, 0.3)));
  });
}

TEST(Tensor, MatmulMatchesEigenAndGrads) {
  Rng rng(3);
  auto a = randt(rng, {4, 6});
  auto b = randt(rng, {6, 5});
  auto c = ad::matmul(a, b);
  // direct check of one entry
  double c00 = 0;
  for (int k = 0; k < 6; ++k) c00 += a.values()[k] * b.values()[k * 5];
  EXPECT_NEAR(c.values()[0], c00, 1e-12);
  grad_check({a, b}, [&] { return ad::mean_all(ad::square(ad::matmul(a, b))); });
}

TEST(Tensor, Conv2dMatchesNaive) {
  Rng rng(4);
  const int B = 2, Cin = 3, H = 5, W = 7, Cout = 4, kh = 3, kw = 3;
  const int sh = 2, sw = 1, ph = 1, pw = 1;
  auto x = randt(rng, {B, Cin, H, W});
  auto w = randt(rng, {Cout, Cin, kh, kw});
  auto bias = randt(rng, {Cout});
  auto y = ad::conv2d(x, w, bias, sh, sw, ph, pw);
  const int OH = (H + 2 * ph - kh) / sh + 1;
  const int OW = (W + 2 * pw - kw) / sw + 1;
  ASSERT_EQ(y.shape(), (std::vector<int>{B, Cout, OH, OW}));
  // brute-force conv as the oracle
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = bias.values()[co];
          for (int ci = 0; ci < Cin; ++ci)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                int ih = oh * sh - ph + i, iw = ow * sw - pw + j;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.values()[((b * Cin + ci) * H + ih) * W + iw] *
                       w.values()[((co * Cin + ci) * kh + i) * kw + j];
              }
          EXPECT_NEAR(y.values()[((b * Cout + co) * OH + oh) * OW + ow], acc, 1e-10);
        }
}

TEST(Tensor, Conv2dGrads) {
  Rng rng(5);
  auto x = randt(rng, {2, 2, 4, 6});
  auto w = randt(rng, {3, 2, 3, 3});
  auto bias = randt(rng, {3});
  grad_check({x, w, bias}, [&] {
    return ad::mean_all(ad::square(ad::conv2d(x, w, bias, 1, 2, 1, 1)));
  });
}

TEST(Tensor, UpsampleConcatSelectGrads) {
  Rng rng(6);
  auto x = randt(rng, {2, 3, 2, 3});
  auto y = randt(rng, {2, 2, 4, 6});
  grad_check({x, y}, [&] {
    auto up = ad::upsample2(x);                 // [2,3,4,6]
    auto cat = ad::concat_dim1(up, y);          // [2,5,4,6]
    auto flat = ad::reshape(cat, {2, 5 * 4, 6});
    auto sel = ad::select_time(flat, 2);        // [2,20]
    return ad::mean_all(ad::square(sel));
  });
}

TEST(Tensor, ChannelBroadcastGrads) {
  Rng rng(7);
  auto x = randt(rng, {2, 3, 4, 2});
  auto y = randt(rng, {2, 3});
  auto gamma = randt(rng, {3});
  auto beta = randt(rng, {3});
  grad_check({x, y, gamma, beta}, [&] {
    auto a = ad::add_channel(x, y);
    auto b = ad::mul_channel(a, ad::square(y));
    auto c = ad::sub_channel(b, y);
    auto d = ad::affine_channel(c, gamma, beta);
    auto m = ad::mean_spatial(d);
    auto inv = ad::rsqrt_eps(ad::square(m), 0.3);
    return ad::mean_all(ad::mul(inv, inv));
  });
}

TEST(Tensor, InstanceNormNormalizesAndGrads) {
  Rng rng(8);
  nn::InstanceNorm<double> norm(3);
  auto x = randt(rng, {2, 3, 4, 5});
  auto y = norm.forward(x);
  // unit gamma, zero beta: per-(b,c) mean ~0, var ~1
  for (int bc = 0; bc < 6; ++bc) {
    double m = 0, v = 0;
    for (int j = 0; j < 20; ++j) m += y.values()[bc * 20 + j];
    m /= 20;
    for (int j = 0; j < 20; ++j) {
      double d = y.values()[bc * 20 + j] - m;
      v += d * d;
    }
    v /= 20;
    EXPECT_NEAR(m, 0.0, 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
  grad_check({x, norm.gamma, norm.beta},
             [&] { return ad::mean_all(ad::square(norm.forward(x))); });
}

TEST(Tensor, CrossEntropyMatchesBruteForceSoftmax) {
  // 3-class toy head: NLL == -log softmax probability of the true class.
  Rng rng(9);
  auto logits = randt(rng, {4, 3});
  std::vector<int> labels = {0, 2, 1, 2};
  auto loss = ad::cross_entropy(logits, labels);
  double expect = 0;
  for (int i = 0; i < 4; ++i) {
    double z = 0;
    for (int k = 0; k < 3; ++k) z += std::exp(logits.values()[i * 3 + k]);
    expect += -std::log(std::exp(logits.values()[i * 3 + labels[i]]) / z);
  }
  expect /= 4;
  EXPECT_NEAR(loss.item(), expect, 1e-12);
  EXPECT_GE(loss.item(), 0.0);
  grad_check({logits}, [&] { return ad::cross_entropy(logits, labels); });
}

TEST(Tensor, CrossEntropyPerfectClassifierIsZero) {
  std::vector<double> v(2 * 3, 0.0);
  v[0] = 1e4;   // class 0 for row 0
  v[3 + 2] = 1e4;  // class 2 for row 1
  auto logits = Tensor<double>::from_data({2, 3}, v);
  auto loss = ad::cross_entropy(logits, {0, 2});
  EXPECT_NEAR(loss.item(), 0.0, 1e-12);
}

TEST(Tensor, WeightedLossesValuesAndGrads) {
  Rng rng(10);
  auto p = randt(rng, {3, 4});
  auto t = randt(rng, {3, 4}, false);
  std::vector<double> w = {0.5, 1.0, 2.0};
  auto mse = ad::weighted_mse(p, t, w);
  auto mae = ad::weighted_mae(p, t, w);
  double emse = 0, emae = 0;
  for (int i = 0; i < 3; ++i) {
    double a = 0, b = 0;
    for (int j = 0; j < 4; ++j) {
      double d = p.values()[i * 4 + j] - t.values()[i * 4 + j];
      a += d * d;
      b += std::abs(d);
    }
    emse += w[i] * a / 4;
    emae += w[i] * b / 4;
  }
  EXPECT_NEAR(mse.item(), emse / 3, 1e-12);
  EXPECT_NEAR(mae.item(), emae / 3, 1e-12);
  grad_check({p}, [&] { return ad::weighted_mse(p, t, w); });
  grad_check({p}, [&] { return ad::weighted_mae(p, t, w); });
}

TEST(Tensor, GaussianLogqMatrixValueAndGrads) {
  Rng rng(11);
  const int N = 3, D = 2;
  auto mu = randt(rng, {N, D});
  auto logv = randt(rng, {N, D});
  auto e = randt(rng, {N, D});
  auto m = ad::gaussian_logq_matrix(mu, logv, e);
  // direct density computation
  const double log2pi = std::log(2 * 3.14159265358979323846);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0;
      for (int d = 0; d < D; ++d) {
        double lv = logv.values()[i * D + d];
        double r = e.values()[j * D + d] - mu.values()[i * D + d];
        acc += -0.5 * (r * r * std::exp(-lv) + lv + log2pi);
      }
      EXPECT_NEAR(m.values()[i * N + j], acc, 1e-10);
    }
  grad_check({mu, logv, e}, [&] {
    auto q = ad::gaussian_logq_matrix(mu, logv, e);
    return ad::add(ad::diag_mean(q), ad::scale(ad::mean_all(q), -0.7));
  });
}

TEST(Tensor, L2NormalizeAndPersampleAffineGrads) {
  Rng rng(12);
  auto x = randt(rng, {3, 5});
  auto s = randt(rng, {2, 6});
  auto c = randt(rng, {2, 6}, false);
  std::vector<double> a = {0.7, -1.3};
  grad_check({x}, [&] { return ad::mean_all(ad::square(ad::l2_normalize_rows(x))); });
  grad_check({s}, [&] {
    return ad::mean_all(ad::square(ad::persample_affine(s, a, c)));
  });
  auto y = ad::l2_normalize_rows(x);
  for (int i = 0; i < 3; ++i) {
    double n2 = 0;
    for (int j = 0; j < 5; ++j) n2 += y.values()[i * 5 + j] * y.values()[i * 5 + j];
    EXPECT_NEAR(n2, 1.0, 1e-9);
  }
}

TEST(Tensor, ClampAndBscalarGrads) {
  Rng rng(13);
  auto x = randt(rng, {8});
  auto s = randt(rng, {1});
  grad_check({x, s}, [&] {
    auto c = ad::clamp(x, -0.5, 0.5);
    auto y = ad::add_bscalar(ad::square(c), s);
    return ad::mean_all(ad::mul(y, y));
  });
}

TEST(Tensor, GruPoolGrads) {
  Rng rng(14);
  nn::GruPool<double> gru(3, 4, rng);
  auto x = randt(rng, {2, 3, 5});
  nn::ParamList<double> ps;
  gru.collect(ps, "gru");
  std::vector<Tensor<double>> tensors = {x};
  for (auto& p : ps) tensors.push_back(p.tensor);
  grad_check(tensors, [&] { return ad::mean_all(ad::square(gru.forward(x))); },
             1e-5, 1e-5, 16);
}

TEST(Tensor, MultiConsumerAccumulation) {
  // z used by two heads: gradients add up.
  auto z = Tensor<double>::param({2}, {1.0, 2.0});
  auto a = ad::scale(z, 3.0);
  auto b = ad::square(z);
  auto loss = ad::sum_all(ad::add(a, b));  // d/dz = 3 + 2z
  loss.backward();
  EXPECT_NEAR(z.grad()[0], 5.0, 1e-12);
  EXPECT_NEAR(z.grad()[1], 7.0, 1e-12);
}

TEST(Tensor, NoGradModeBuildsNoGraph) {
  auto z = Tensor<double>::param({2}, {1.0, 2.0});
  ad::NoGradGuard ng;
  auto y = ad::square(z);
  EXPECT_FALSE(y.n->back);
  EXPECT_TRUE(y.n->parents.empty());
}

TEST(Tensor, AdamMinimizesQuadratic) {
  auto x = Tensor<float>::param({3}, {5.0f, -4.0f, 2.0f});
  nn::Adam<float> opt({{"x", x}}, 0.1);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    auto loss = ad::mean_all(ad::square(x));
    loss.backward();
    opt.step();
  }
  for (auto v : x.values()) EXPECT_NEAR(v, 0.0f, 1e-2f);
}

TEST(Tensor, AdamClipsGlobalNorm) {
  auto x = Tensor<float>::param({2}, {1.0f, 1.0f});
  nn::Adam<float> opt({{"x", x}}, 0.0, 0.9, 0.999, 1e-8, /*clip=*/1.0);
  opt.zero_grad();
  auto loss = ad::sum_all(ad::scale(x, 100.0f));
  loss.backward();
  double gnorm = opt.step();
  EXPECT_NEAR(gnorm, std::sqrt(2.0) * 100.0, 1e-3);
}

}  // namespace
}  // namespace emovc
