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

#ifndef EMOVC_IO_HPP_
#define EMOVC_IO_HPP_

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "emovc/common.hpp"

namespace emovc {

// ---------------------------------------------------------------------------
// 16 kHz mono PCM16 wav.

inline void write_wav(const std::string& path, const std::vector<float>& x,
                      int sample_rate) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write wav: " + path);
  const uint32_t n = static_cast<uint32_t>(x.size());
  const uint32_t data_bytes = n * 2;
  const uint32_t byte_rate = static_cast<uint32_t>(sample_rate) * 2;
  auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto w16 = [&](uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
  f.write("RIFF", 4);
  w32(36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  w32(16);
  w16(1);  // PCM
  w16(1);  // mono
  w32(static_cast<uint32_t>(sample_rate));
  w32(byte_rate);
  w16(2);   // block align
  w16(16);  // bits
  f.write("data", 4);
  w32(data_bytes);
  for (uint32_t i = 0; i < n; ++i) {
    float v = std::max(-1.0f, std::min(1.0f, x[i]));
    int16_t s = static_cast<int16_t>(std::lrintf(v * 32767.0f));
    f.write(reinterpret_cast<const char*>(&s), 2);
  }
}

inline std::vector<float> read_wav(const std::string& path, int* sample_rate) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read wav: " + path);
  char tag[5] = {0};
  auto r32 = [&]() { uint32_t v; f.read(reinterpret_cast<char*>(&v), 4); return v; };
  auto r16 = [&]() { uint16_t v; f.read(reinterpret_cast<char*>(&v), 2); return v; };
  f.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw DataError("not a RIFF file: " + path);
  r32();
  f.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw DataError("not a WAVE file: " + path);
  uint16_t channels = 0, bits = 0;
  uint32_t sr = 0;
  std::vector<float> out;
  while (f.read(tag, 4)) {
    uint32_t sz = r32();
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      uint16_t fmt = r16();
      channels = r16();
      sr = r32();
      r32();
      r16();
      bits = r16();
      if (sz > 16) f.seekg(sz - 16, std::ios::cur);
      if (fmt != 1 || channels != 1 || bits != 16)
        throw DataError("expected mono PCM16 wav: " + path);
    } else if (std::strncmp(tag, "data", 4) == 0) {
      uint32_t n = sz / 2;
      out.resize(n);
      for (uint32_t i = 0; i < n; ++i) {
        int16_t s;
        f.read(reinterpret_cast<char*>(&s), 2);
        out[i] = static_cast<float>(s) / 32767.0f;
      }
      break;
    } else {
      f.seekg(sz, std::ios::cur);
    }
  }
  if (sample_rate) *sample_rate = static_cast<int>(sr);
  return out;
}

// ---------------------------------------------------------------------------
// Named-array container ("EMVB"), used for checkpoints, mel dumps, alignment
// arrays and embedding matrices. Each entry: name, dtype, dims, raw data.

struct Blob {
  enum class Dtype : uint32_t { f32 = 0, f64 = 1, i32 = 2 };
  Dtype dtype = Dtype::f32;
  std::vector<int64_t> dims;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<int32_t> i32;

  int64_t numel() const {
    int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  static Blob from_f32(std::vector<int64_t> dims, std::vector<float> v) {
    Blob b;
    b.dtype = Dtype::f32;
    b.dims = std::move(dims);
    b.f32 = std::move(v);
    return b;
  }
  static Blob from_f64(std::vector<int64_t> dims, std::vector<double> v) {
    Blob b;
    b.dtype = Dtype::f64;
    b.dims = std::move(dims);
    b.f64 = std::move(v);
    return b;
  }
  static Blob from_i32(std::vector<int64_t> dims, std::vector<int32_t> v) {
    Blob b;
    b.dtype = Dtype::i32;
    b.dims = std::move(dims);
    b.i32 = std::move(v);
    return b;
  }
};

using BlobMap = std::map<std::string, Blob>;

inline constexpr uint32_t kBlobMagic = 0x42564d45;  // "EMVB"
inline constexpr uint32_t kBlobVersion = 1;

inline void save_blobs(const std::string& path, const BlobMap& blobs,
                       uint64_t config_hash = 0) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write: " + path);
  auto w = [&](const void* p, size_t n) { f.write(static_cast<const char*>(p), n); };
  uint32_t magic = kBlobMagic, ver = kBlobVersion;
  uint64_t count = blobs.size();
  w(&magic, 4);
  w(&ver, 4);
  w(&config_hash, 8);
  w(&count, 8);
  for (const auto& [name, b] : blobs) {
    uint32_t nl = static_cast<uint32_t>(name.size());
    w(&nl, 4);
    w(name.data(), nl);
    uint32_t dt = static_cast<uint32_t>(b.dtype);
    w(&dt, 4);
    uint32_t rank = static_cast<uint32_t>(b.dims.size());
    w(&rank, 4);
    for (auto d : b.dims) w(&d, 8);
    switch (b.dtype) {
      case Blob::Dtype::f32: w(b.f32.data(), b.f32.size() * 4); break;
      case Blob::Dtype::f64: w(b.f64.data(), b.f64.size() * 8); break;
      case Blob::Dtype::i32: w(b.i32.data(), b.i32.size() * 4); break;
    }
  }
}

inline BlobMap load_blobs(const std::string& path, uint64_t* config_hash = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read: " + path);
  auto r = [&](void* p, size_t n) {
    f.read(static_cast<char*>(p), n);
    if (!f) throw DataError("truncated blob file: " + path);
  };
  uint32_t magic, ver;
  uint64_t hash, count;
  r(&magic, 4);
  r(&ver, 4);
  r(&hash, 8);
  r(&count, 8);
  if (magic != kBlobMagic) throw DataError("bad magic in " + path);
  if (ver != kBlobVersion) throw DataError(strfmt("unsupported blob version %u in ", ver) + path);
  if (config_hash) *config_hash = hash;
  BlobMap out;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t nl;
    r(&nl, 4);
    std::string name(nl, '\0');
    r(name.data(), nl);
    uint32_t dt, rank;
    r(&dt, 4);
    r(&rank, 4);
    Blob b;
    b.dtype = static_cast<Blob::Dtype>(dt);
    b.dims.resize(rank);
    for (auto& d : b.dims) r(&d, 8);
    int64_t n = b.numel();
    switch (b.dtype) {
      case Blob::Dtype::f32: b.f32.resize(n); r(b.f32.data(), n * 4); break;
      case Blob::Dtype::f64: b.f64.resize(n); r(b.f64.data(), n * 8); break;
      case Blob::Dtype::i32: b.i32.resize(n); r(b.i32.data(), n * 4); break;
    }
    out.emplace(std::move(name), std::move(b));
  }
  return out;
}

inline uint64_t file_checksum(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
  }
  return h;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write: " + path);
  f << text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace emovc

#endif  // EMOVC_IO_HPP_
