#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sdflow/common.hpp"

namespace sdflow {

struct FlowField {
  int64_t width = 0, height = 0;
  std::vector<float> u, v;       // H*W, row-major
  std::vector<uint8_t> valid;    // H*W

  static FlowField constant(int64_t width, int64_t height, float fu, float fv) {
    FlowField f;
    f.width = width;
    f.height = height;
    size_t n = static_cast<size_t>(width * height);
    f.u.assign(n, fu);
    f.v.assign(n, fv);
    f.valid.assign(n, 1);
    return f;
  }

  int64_t valid_count() const {
    int64_t n = 0;
    for (uint8_t m : valid) n += m != 0;
    return n;
  }
};

constexpr float kFloMagic = 202021.25f;
constexpr float kFloUnknown = 1e9f;  // Middlebury convention for missing flow

namespace detail {

inline void flo_write_f32(std::ostream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 4);
}

inline float flo_read_f32(std::istream& in) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(buf[i]) << (8 * i);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void flo_write_i32(std::ostream& out, int32_t v) {
  flo_write_f32(out, [] (int32_t x) { float f; std::memcpy(&f, &x, 4); return f; }(v));
}

inline int32_t flo_read_i32(std::istream& in) {
  float f = flo_read_f32(in);
  int32_t v;
  std::memcpy(&v, &f, 4);
  return v;
}

}  // namespace detail

// Middlebury .flo: magic float 202021.25, i32 width, i32 height, then
// interleaved f32 (u, v) row-major. Invalid pixels carry the 1e9 sentinel.
inline void write_flo(const std::string& path, const FlowField& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write flow file: " + path);
  detail::flo_write_f32(out, kFloMagic);
  detail::flo_write_i32(out, static_cast<int32_t>(f.width));
  detail::flo_write_i32(out, static_cast<int32_t>(f.height));
  for (int64_t i = 0; i < f.width * f.height; ++i) {
    bool ok = f.valid[static_cast<size_t>(i)] != 0;
    detail::flo_write_f32(out, ok ? f.u[static_cast<size_t>(i)] : kFloUnknown);
    detail::flo_write_f32(out, ok ? f.v[static_cast<size_t>(i)] : kFloUnknown);
  }
}

inline FlowField read_flo(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open flow file: " + path);
  float magic = detail::flo_read_f32(in);
  if (!in || magic != kFloMagic) throw DataError(path + ": bad magic, not a .flo file");
  int32_t w = detail::flo_read_i32(in);
  int32_t h = detail::flo_read_i32(in);
  if (w <= 0 || h <= 0) throw DataError(path + ": bad dimensions");
  FlowField f;
  f.width = w;
  f.height = h;
  size_t n = static_cast<size_t>(w) * static_cast<size_t>(h);
  f.u.resize(n);
  f.v.resize(n);
  f.valid.resize(n);
  for (size_t i = 0; i < n; ++i) {
    float fu = detail::flo_read_f32(in);
    float fv = detail::flo_read_f32(in);
    if (!in) throw DataError(path + ": truncated flow data");
    bool ok = std::isfinite(fu) && std::isfinite(fv) && std::fabs(fu) < kFloUnknown &&
              std::fabs(fv) < kFloUnknown;
    f.u[i] = ok ? fu : 0.0f;
    f.v[i] = ok ? fv : 0.0f;
    f.valid[i] = ok ? 1 : 0;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Color-wheel rendering (hue = direction, saturation = magnitude), written
// as a binary PPM. Magnitude is normalized by the 99th percentile.
// ---------------------------------------------------------------------------

inline void flow_to_rgb(const FlowField& f, std::vector<uint8_t>& rgb) {
  size_t n = static_cast<size_t>(f.width * f.height);
  std::vector<float> mags;
  mags.reserve(n);
  for (size_t i = 0; i < n; ++i)
    if (f.valid[i]) mags.push_back(std::hypot(f.u[i], f.v[i]));
  float norm = 1.0f;
  if (!mags.empty()) {
    size_t k = static_cast<size_t>(0.99 * static_cast<double>(mags.size() - 1));
    std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k), mags.end());
    norm = std::max(mags[k], 1e-6f);
  }
  rgb.assign(n * 3, 0);
  for (size_t i = 0; i < n; ++i) {
    if (!f.valid[i]) continue;
    float mag = std::min(std::hypot(f.u[i], f.v[i]) / norm, 1.0f);
    float ang = std::atan2(-f.v[i], -f.u[i]) / 3.14159265358979323846f;  // [-1,1]
    float hue = (ang + 1.0f) / 2.0f;                                     // [0,1]
    // HSV (hue, sat=mag, val=1) to RGB.
    float hh = hue * 6.0f;
    int sector = static_cast<int>(hh) % 6;
    float frac = hh - std::floor(hh);
    float p = 1.0f - mag;
    float q = 1.0f - mag * frac;
    float t = 1.0f - mag * (1.0f - frac);
    float r, g, b;
    switch (sector) {
      case 0: r = 1; g = t; b = p; break;
      case 1: r = q; g = 1; b = p; break;
      case 2: r = p; g = 1; b = t; break;
      case 3: r = p; g = q; b = 1; break;
      case 4: r = t; g = p; b = 1; break;
      default: r = 1; g = p; b = q; break;
    }
    rgb[i * 3 + 0] = static_cast<uint8_t>(std::lround(255.0f * r));
    rgb[i * 3 + 1] = static_cast<uint8_t>(std::lround(255.0f * g));
    rgb[i * 3 + 2] = static_cast<uint8_t>(std::lround(255.0f * b));
  }
}

inline void write_flow_ppm(const std::string& path, const FlowField& f) {
  std::vector<uint8_t> rgb;
  flow_to_rgb(f, rgb);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image: " + path);
  out << "P6\n" << f.width << " " << f.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

}  // namespace sdflow
