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

#ifndef EMOVC_NN_HPP_
#define EMOVC_NN_HPP_

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "emovc/common.hpp"
#include "emovc/io.hpp"
#include "emovc/tensor.hpp"

namespace emovc::nn {

using ad::Tensor;

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

// ---------------------------------------------------------------------------
// Initializers. All draw from a caller-provided stream so that model init is
// a pure function of the seed.

template <class T>
std::vector<T> normal_init(Rng& rng, int64_t n, double sd) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, sd));
  return v;
}

template <class T>
std::vector<T> kaiming_init(Rng& rng, int64_t n, int64_t fan_in) {
  return normal_init<T>(rng, n, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// ---------------------------------------------------------------------------
// Layers.

template <class T>
struct Linear {
  Tensor<T> w;  // [In, Out]
  Tensor<T> b;  // [Out]
  int in = 0, out = 0;

  Linear() = default;
  Linear(int in_dim, int out_dim, Rng& rng) : in(in_dim), out(out_dim) {
    w = Tensor<T>::param({in, out},
                         normal_init<T>(rng, int64_t(in) * out, std::sqrt(1.0 / in)));
    b = Tensor<T>::param({out}, std::vector<T>(out, T(0)));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return ad::add_rowvec(ad::matmul(x, w), b);
  }

  void collect(ParamList<T>& out_params, const std::string& prefix) {
    out_params.push_back({prefix + ".w", w});
    out_params.push_back({prefix + ".b", b});
  }
};

template <class T>
struct Conv2d {
  Tensor<T> w;  // [Cout, Cin, kh, kw]
  Tensor<T> b;  // [Cout]
  int sh = 1, sw = 1, ph = 0, pw = 0;

  Conv2d() = default;
  Conv2d(int cin, int cout, int kh, int kw, int stride_h, int stride_w,
         int pad_h, int pad_w, Rng& rng)
      : sh(stride_h), sw(stride_w), ph(pad_h), pw(pad_w) {
    const int64_t fan_in = int64_t(cin) * kh * kw;
    w = Tensor<T>::param({cout, cin, kh, kw},
                         kaiming_init<T>(rng, int64_t(cout) * fan_in, fan_in));
    b = Tensor<T>::param({cout}, std::vector<T>(cout, T(0)));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return ad::conv2d(x, w, b, sh, sw, ph, pw);
  }

  void collect(ParamList<T>& out_params, const std::string& prefix) {
    out_params.push_back({prefix + ".w", w});
    out_params.push_back({prefix + ".b", b});
  }
};

// Instance norm over spatial dims with learnable per-channel affine, built
// from primitive ops so the backward pass needs no bespoke derivation.
template <class T>
struct InstanceNorm {
  Tensor<T> gamma, beta;
  T eps = T(1e-5);

  InstanceNorm() = default;
  explicit InstanceNorm(int channels) {
    gamma = Tensor<T>::param({channels}, std::vector<T>(channels, T(1)));
    beta = Tensor<T>::param({channels}, std::vector<T>(channels, T(0)));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto m = ad::mean_spatial(x);                    // [B,C]
    auto xc = ad::sub_channel(x, m);                 // centered
    auto var = ad::mean_spatial(ad::square(xc));     // [B,C]
    auto inv = ad::rsqrt_eps(var, eps);              // [B,C]
    return ad::affine_channel(ad::mul_channel(xc, inv), gamma, beta);
  }

  void collect(ParamList<T>& out_params, const std::string& prefix) {
    out_params.push_back({prefix + ".gamma", gamma});
    out_params.push_back({prefix + ".beta", beta});
  }
};

// Single-layer GRU over [B, C, Tlen]; returns the mean of hidden states,
// i.e. the temporal pooling the encoders use.
template <class T>
struct GruPool {
  int in = 0, hidden = 0;
  Linear<T> wz, wr, wh;  // act on concat(x_t, h_{t-1})

  GruPool() = default;
  GruPool(int in_dim, int hidden_dim, Rng& rng) : in(in_dim), hidden(hidden_dim) {
    wz = Linear<T>(in + hidden, hidden, rng);
    wr = Linear<T>(in + hidden, hidden, rng);
    wh = Linear<T>(in + hidden, hidden, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const auto& s = x.shape();
    const int B = s[0], Tlen = s[2];
    Tensor<T> h = Tensor<T>::zeros({B, hidden});
    Tensor<T> acc = Tensor<T>::zeros({B, hidden});
    for (int t = 0; t < Tlen; ++t) {
      auto xt = ad::select_time(x, t);
      auto xh = ad::concat_dim1(xt, h);
      auto z = ad::sigmoid(wz.forward(xh));
      auto r = ad::sigmoid(wr.forward(xh));
      auto xrh = ad::concat_dim1(xt, ad::mul(r, h));
      auto cand = ad::tanh_(wh.forward(xrh));
      // h = (1-z)*h + z*cand
      auto one_minus_z = ad::add_scalar(ad::scale(z, T(-1)), T(1));
      h = ad::add(ad::mul(one_minus_z, h), ad::mul(z, cand));
      acc = ad::add(acc, h);
    }
    return ad::scale(acc, T(1) / static_cast<T>(Tlen));
  }

  void collect(ParamList<T>& out_params, const std::string& prefix) {
    wz.collect(out_params, prefix + ".wz");
    wr.collect(out_params, prefix + ".wr");
    wh.collect(out_params, prefix + ".wh");
  }
};

// ---------------------------------------------------------------------------
// Adam with global-norm gradient clipping.

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamList<T> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8, double clip_norm = 0.0)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps),
        clip_(clip_norm) {
    for (auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
    }
  }

  // Returns the pre-clip global gradient norm.
  double step() {
    ++t_;
    double norm_sq = 0;
    for (auto& p : params_) {
      auto& g = p.tensor.grad();
      for (auto x : g) norm_sq += double(x) * double(x);
    }
    const double gnorm = std::sqrt(norm_sq);
    double scale = 1.0;
    if (clip_ > 0 && gnorm > clip_) scale = clip_ / gnorm;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& val = params_[i].tensor.values();
      auto& g = params_[i].tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < val.size(); ++j) {
        const double gj = double(g[j]) * scale;
        m[j] = T(b1_ * m[j] + (1 - b1_) * gj);
        v[j] = T(b2_ * v[j] + (1 - b2_) * gj * gj);
        const double mh = m[j] / bc1, vh = v[j] / bc2;
        val[j] -= T(lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
    return gnorm;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  int64_t step_count() const { return t_; }
  const ParamList<T>& params() const { return params_; }

  // Optimizer state round-trips through checkpoints so a resumed run
  // continues the exact trajectory.
  void save_state(BlobMap& out, const std::string& prefix) const {
    std::vector<double> meta = {double(t_)};
    out[prefix + ".step"] = Blob::from_f64({1}, meta);
    for (size_t i = 0; i < params_.size(); ++i) {
      std::vector<float> m(m_[i].begin(), m_[i].end());
      std::vector<float> v(v_[i].begin(), v_[i].end());
      out[prefix + "." + params_[i].name + ".m"] =
          Blob::from_f32({int64_t(m.size())}, std::move(m));
      out[prefix + "." + params_[i].name + ".v"] =
          Blob::from_f32({int64_t(v.size())}, std::move(v));
    }
  }

  void load_state(const BlobMap& in, const std::string& prefix) {
    auto it = in.find(prefix + ".step");
    if (it == in.end()) throw DataError("optimizer state missing: " + prefix);
    t_ = int64_t(it->second.f64.at(0));
    for (size_t i = 0; i < params_.size(); ++i) {
      const auto& mb = in.at(prefix + "." + params_[i].name + ".m");
      const auto& vb = in.at(prefix + "." + params_[i].name + ".v");
      m_[i].assign(mb.f32.begin(), mb.f32.end());
      v_[i].assign(vb.f32.begin(), vb.f32.end());
    }
  }

 private:
  ParamList<T> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_ = 1e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8, clip_ = 0.0;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Parameter (de)serialization.

template <class T>
void params_to_blobs(const ParamList<T>& params, BlobMap& out) {
  for (const auto& p : params) {
    const auto& v = p.tensor.values();
    std::vector<float> data(v.begin(), v.end());
    std::vector<int64_t> dims(p.tensor.shape().begin(), p.tensor.shape().end());
    out[p.name] = Blob::from_f32(std::move(dims), std::move(data));
  }
}

template <class T>
void params_from_blobs(ParamList<T>& params, const BlobMap& in) {
  for (auto& p : params) {
    auto it = in.find(p.name);
    if (it == in.end()) throw DataError("missing parameter in checkpoint: " + p.name);
    if (it->second.numel() != p.tensor.numel())
      throw DataError("parameter size mismatch: " + p.name);
    auto& v = p.tensor.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = T(it->second.f32[i]);
  }
}

template <class T>
uint64_t params_checksum(const ParamList<T>& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    h = fnv1a64(p.name, h);
    std::vector<float> data(p.tensor.values().begin(), p.tensor.values().end());
    h = fnv1a64(data.data(), data.size() * sizeof(float), h);
  }
  return h;
}

// Sinusoidal embedding for a scalar in [0,1]; computed outside the graph.
template <class T>
std::vector<T> time_embedding(double t, int dim) {
  std::vector<T> e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double f = std::pow(1000.0, double(i) / std::max(1, half - 1));
    e[2 * i] = T(std::sin(t * f));
    e[2 * i + 1] = T(std::cos(t * f));
  }
  return e;
}

}  // namespace emovc::nn

#endif  // EMOVC_NN_HPP_
