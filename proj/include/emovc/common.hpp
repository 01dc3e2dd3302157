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

#ifndef EMOVC_COMMON_HPP_
#define EMOVC_COMMON_HPP_

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace emovc {

// Error classes map to CLI exit codes: config/validation errors exit 3,
// anything else exits 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& m) : std::runtime_error(m) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

inline std::string strfmt(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  char buf[1024];
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Deterministic RNG streams.
//
// Every stochastic stage derives an independent stream from (seed, tags).
// This keeps generation a pure function of (config, seed): parallel and
// serial execution, or kill/resume at any step, draw identical numbers.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  uint64_t h = splitmix64(seed ^ 0x6d6f76656d6f7663ULL);
  h = splitmix64(h ^ splitmix64(a));
  h = splitmix64(h ^ splitmix64(b + 0x9e3779b97f4a7c15ULL));
  return h;
}

// mt19937_64 with explicit uniform/normal mappings. std::*_distribution is
// implementation-defined, so we map bits ourselves to keep byte-identical
// output a portable contract.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, cosine branch only.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  double normal(double mean, double sd) { return mean + sd * normal(); }

  // integer in [0, n)
  uint64_t randint(uint64_t n) {
    // rejection-free modulo is fine here; n is tiny vs 2^64
    return eng_() % n;
  }

  uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit, used for config hashes and artifact checksums.

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) { return strfmt("%016llx", (unsigned long long)h); }

// ---------------------------------------------------------------------------
// Flat key/value config with CLI-override precedence (CLI > file > defaults).
// Lines are "key = value"; '#' starts a comment.

class KvConfig {
 public:
  void set(const std::string& k, const std::string& v) { kv_[k] = v; }
  void set(const std::string& k, double v) { kv_[k] = format_double(v); }
  void set(const std::string& k, int64_t v) { kv_[k] = std::to_string(v); }

  bool has(const std::string& k) const { return kv_.count(k) > 0; }

  std::string get_str(const std::string& k, const std::string& dflt) const {
    auto it = kv_.find(k);
    return it == kv_.end() ? dflt : it->second;
  }
  double get_f(const std::string& k, double dflt) const {
    auto it = kv_.find(k);
    if (it == kv_.end()) return dflt;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + k + "' is not numeric: " + it->second);
    }
  }
  int64_t get_i(const std::string& k, int64_t dflt) const {
    auto it = kv_.find(k);
    if (it == kv_.end()) return dflt;
    try {
      return std::stoll(it->second);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + k + "' is not an integer: " + it->second);
    }
  }

  void parse_line(const std::string& line) {
    std::string s = line.substr(0, line.find('#'));
    auto eq = s.find('=');
    if (eq == std::string::npos) {
      if (s.find_first_not_of(" \t\r\n") != std::string::npos)
        throw ConfigError("bad config line: " + line);
      return;
    }
    auto trim = [](std::string t) {
      auto b = t.find_first_not_of(" \t\r\n");
      auto e = t.find_last_not_of(" \t\r\n");
      return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
    };
    std::string k = trim(s.substr(0, eq)), v = trim(s.substr(eq + 1));
    if (k.empty()) throw ConfigError("empty key in config line: " + line);
    kv_[k] = v;
  }

  void parse_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) parse_line(line);
  }

  // Canonical text: sorted keys, one per line. Basis for the config hash.
  std::string canonical_text() const {
    std::ostringstream out;
    for (const auto& [k, v] : kv_) out << k << " = " << v << "\n";
    return out.str();
  }

  uint64_t hash() const { return fnv1a64(canonical_text()); }

  const std::map<std::string, std::string>& items() const { return kv_; }

  void merge_overrides(const KvConfig& higher) {
    for (const auto& [k, v] : higher.kv_) kv_[k] = v;
  }

 private:
  static std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  }
  std::map<std::string, std::string> kv_;
};

// Pairwise summation; order-independent aggregation within 1e-9 for the
// sizes we ever aggregate.
inline double pairwise_sum(const double* x, size_t n) {
  if (n <= 8) {
    double s = 0;
    for (size_t i = 0; i < n; ++i) s += x[i];
    return s;
  }
  size_t h = n / 2;
  return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

inline double pairwise_mean(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  return pairwise_sum(x.data(), x.size()) / static_cast<double>(x.size());
}

}  // namespace emovc

#endif  // EMOVC_COMMON_HPP_
