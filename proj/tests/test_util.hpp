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

#ifndef EMOVC_TESTS_TEST_UTIL_HPP_
#define EMOVC_TESTS_TEST_UTIL_HPP_

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "emovc/common.hpp"
#include "emovc/tensor.hpp"

namespace emovc::testutil {

// Central finite differences against reverse-mode gradients, in double.
// loss_fn rebuilds the graph from the current parameter values.
inline void grad_check(std::vector<ad::Tensor<double>> params,
                       const std::function<ad::Tensor<double>()>& loss_fn,
                       double h = 1e-5, double tol = 1e-6,
                       int max_coords_per_param = 64, uint64_t seed = 1234) {
  for (auto& p : params) p.zero_grad();
  auto loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> grads;
  for (auto& p : params) grads.push_back(p.grad());

  Rng rng(seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].values();
    const int64_t n = static_cast<int64_t>(vals.size());
    std::vector<int64_t> coords;
    if (n <= max_coords_per_param) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<int64_t>(rng.randint(n)));
    }
    for (int64_t c : coords) {
      const double orig = vals[c];
      double fplus, fminus;
      {
        ad::NoGradGuard ng;
        vals[c] = orig + h;
        fplus = loss_fn().item();
        vals[c] = orig - h;
        fminus = loss_fn().item();
        vals[c] = orig;
      }
      const double fd = (fplus - fminus) / (2 * h);
      const double adv = grads[pi][c];
      const double denom = std::max({1.0, std::abs(fd), std::abs(adv)});
      EXPECT_NEAR(adv, fd, tol * denom)
          << "param " << pi << " coord " << c << " ad=" << adv << " fd=" << fd;
    }
  }
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("emovc_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string str() const { return path_.string(); }
  std::filesystem::path path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace emovc::testutil

#endif  // EMOVC_TESTS_TEST_UTIL_HPP_
