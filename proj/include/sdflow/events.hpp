#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sdflow/tensor.hpp"

namespace sdflow {

struct Event {
  int32_t x = 0;
  int32_t y = 0;
  int64_t t_us = 0;
  int8_t p = 1;  // -1 or +1
};

struct EventStream {
  std::vector<Event> events;  // ordered by non-decreasing timestamp
  int32_t width = 0;
  int32_t height = 0;

  int64_t t_first() const { return events.empty() ? 0 : events.front().t_us; }
  int64_t t_last() const { return events.empty() ? 0 : events.back().t_us; }
};

enum class EventFormat { Csv, BinV1 };

namespace detail {

inline void check_stream_invariants(EventStream& s, const std::string& where) {
  int64_t prev_t = INT64_MIN;
  size_t i = 0;
  for (const Event& e : s.events) {
    ++i;
    if (e.t_us < prev_t)
      throw DataError(where + ": out-of-order timestamp at record " + std::to_string(i));
    prev_t = e.t_us;
    if (e.x < 0 || e.x >= s.width || e.y < 0 || e.y >= s.height)
      throw DataError(where + ": event (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                      ") outside sensor " + std::to_string(s.width) + "x" +
                      std::to_string(s.height) + " at record " + std::to_string(i));
  }
}

template <typename T>
void read_le(std::istream& in, T& out) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  std::memcpy(&out, &v, sizeof(T));
}

template <typename T>
void write_le(std::ostream& out, T value) {
  uint64_t v = 0;
  std::memcpy(&v, &value, sizeof(T));
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

}  // namespace detail

// CSV: one event per line "x,y,t_us,p" with p in {0,1} (0 -> -1, 1 -> +1).
// Sensor dims are inferred from the coordinate maxima.
inline EventStream parse_events_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open event file: " + path);
  EventStream s;
  std::string line;
  size_t line_no = 0;
  int32_t max_x = -1, max_y = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Event e;
    long long x, y, t, p;
    if (std::sscanf(line.c_str(), "%lld,%lld,%lld,%lld", &x, &y, &t, &p) != 4)
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed event line '" + line +
                      "'");
    if (p != 0 && p != 1)
      throw DataError(path + ":" + std::to_string(line_no) + ": polarity must be 0 or 1, got " +
                      std::to_string(p));
    if (x < 0 || y < 0)
      throw DataError(path + ":" + std::to_string(line_no) + ": negative pixel coordinate");
    e.x = static_cast<int32_t>(x);
    e.y = static_cast<int32_t>(y);
    e.t_us = t;
    e.p = p == 1 ? 1 : -1;
    max_x = std::max(max_x, e.x);
    max_y = std::max(max_y, e.y);
    s.events.push_back(e);
  }
  if (s.events.empty()) throw DataError(path + ": no events");
  s.width = max_x + 1;
  s.height = max_y + 1;
  detail::check_stream_invariants(s, path);
  return s;
}

// bin_v1: little-endian header (magic "EVT1", u32 width, u32 height,
// u64 count) then count records of (u16 x, u16 y, u64 t, i8 p), p in {0,1}.
inline EventStream parse_events_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open event file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "EVT1", 4) != 0)
    throw DataError(path + ": bad magic, not a bin_v1 event file");
  uint32_t width, height;
  uint64_t count;
  detail::read_le(in, width);
  detail::read_le(in, height);
  detail::read_le(in, count);
  if (!in) throw DataError(path + ": truncated header");
  if (count == 0) throw DataError(path + ": no events");
  EventStream s;
  s.width = static_cast<int32_t>(width);
  s.height = static_cast<int32_t>(height);
  s.events.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint16_t x, y;
    uint64_t t;
    int8_t p;
    detail::read_le(in, x);
    detail::read_le(in, y);
    detail::read_le(in, t);
    in.read(reinterpret_cast<char*>(&p), 1);
    if (!in) throw DataError(path + ": truncated at record " + std::to_string(i + 1));
    if (p != 0 && p != 1)
      throw DataError(path + ": polarity must be 0 or 1 at record " + std::to_string(i + 1));
    Event e;
    e.x = x;
    e.y = y;
    e.t_us = static_cast<int64_t>(t);
    e.p = p == 1 ? 1 : -1;
    s.events.push_back(e);
  }
  detail::check_stream_invariants(s, path);
  return s;
}

inline EventStream parse_events(const std::string& path, EventFormat format) {
  return format == EventFormat::Csv ? parse_events_csv(path) : parse_events_bin(path);
}

inline void write_events_bin(const std::string& path, const EventStream& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write event file: " + path);
  out.write("EVT1", 4);
  detail::write_le(out, static_cast<uint32_t>(s.width));
  detail::write_le(out, static_cast<uint32_t>(s.height));
  detail::write_le(out, static_cast<uint64_t>(s.events.size()));
  for (const Event& e : s.events) {
    detail::write_le(out, static_cast<uint16_t>(e.x));
    detail::write_le(out, static_cast<uint16_t>(e.y));
    detail::write_le(out, static_cast<uint64_t>(e.t_us));
    int8_t p = e.p > 0 ? 1 : 0;
    out.write(reinterpret_cast<const char*>(&p), 1);
  }
}

// ---------------------------------------------------------------------------
// Discretized voxel volume
// ---------------------------------------------------------------------------

struct VoxelGrid {
  Tensor data;  // (B, H, W)
  int64_t bins = 0;
};

// Each event inside [t_start, t_end] (closed interval) deposits
// p * k(dx) * k(dy) * k(dt) onto neighboring integer cells, with
// k(a) = max(0, 1 - |a|) and timestamps scaled to [0, B-1] over the window.
inline VoxelGrid voxelize(const EventStream& stream, int64_t bins, int64_t t_start,
                          int64_t t_end) {
  SDFLOW_CHECK(bins >= 2, "voxelize needs at least 2 bins, got " << bins);
  SDFLOW_CHECK(t_end >= t_start, "voxelize window is empty: [" << t_start << "," << t_end << "]");
  int64_t H = stream.height, W = stream.width;
  SDFLOW_CHECK(H > 0 && W > 0, "voxelize on a stream without sensor dims");
  std::vector<float> grid(static_cast<size_t>(bins * H * W), 0.0f);
  double duration = static_cast<double>(t_end - t_start);
  for (const Event& e : stream.events) {
    if (e.t_us < t_start || e.t_us > t_end) continue;
    double tf = duration > 0.0
                    ? static_cast<double>(bins - 1) * static_cast<double>(e.t_us - t_start) /
                          duration
                    : 0.0;
    double xf = static_cast<double>(e.x);
    double yf = static_cast<double>(e.y);
    int64_t t0 = static_cast<int64_t>(std::floor(tf));
    int64_t x0 = static_cast<int64_t>(std::floor(xf));
    int64_t y0 = static_cast<int64_t>(std::floor(yf));
    for (int64_t dt = 0; dt <= 1; ++dt) {
      int64_t tb = t0 + dt;
      if (tb < 0 || tb >= bins) continue;
      float wt = static_cast<float>(std::max(0.0, 1.0 - std::fabs(tf - static_cast<double>(tb))));
      if (wt == 0.0f) continue;
      for (int64_t dy = 0; dy <= 1; ++dy) {
        int64_t yb = y0 + dy;
        if (yb < 0 || yb >= H) continue;
        float wy =
            static_cast<float>(std::max(0.0, 1.0 - std::fabs(yf - static_cast<double>(yb))));
        if (wy == 0.0f) continue;
        for (int64_t dx = 0; dx <= 1; ++dx) {
          int64_t xb = x0 + dx;
          if (xb < 0 || xb >= W) continue;
          float wx =
              static_cast<float>(std::max(0.0, 1.0 - std::fabs(xf - static_cast<double>(xb))));
          if (wx == 0.0f) continue;
          grid[static_cast<size_t>((tb * H + yb) * W + xb)] +=
              static_cast<float>(e.p) * wt * wy * wx;
        }
      }
    }
  }
  VoxelGrid v;
  v.data = Tensor::from_data({bins, H, W}, std::move(grid));
  v.bins = bins;
  return v;
}

// ---------------------------------------------------------------------------
// Chunked spike-input layout: (T, C, H, W) with T = B/n, C = 2n
// ---------------------------------------------------------------------------

struct SpikeInput {
  Tensor data;  // (T, C, H, W)
  int64_t bins = 0;
  int64_t blocks = 0;
};

// Time step t owns bins [t*n, t*n + n); within a step the n bins occupy
// channel pairs in bin order: (bin0-pos, bin0-neg, bin1-pos, bin1-neg, ...).
inline SpikeInput chunk_to_spike_input(const VoxelGrid& v, int64_t n_blocks) {
  SDFLOW_CHECK(n_blocks >= 1, "chunking needs at least 1 block");
  SDFLOW_CHECK(v.bins % n_blocks == 0,
               "bins " << v.bins << " not divisible by blocks " << n_blocks);
  int64_t B = v.bins, T = B / n_blocks, C = 2 * n_blocks;
  int64_t H = v.data.dim(1), W = v.data.dim(2);
  std::vector<float> out(static_cast<size_t>(T * C * H * W), 0.0f);
  const float* g = v.data.data().data();
  int64_t plane = H * W;
  for (int64_t t = 0; t < T; ++t)
    for (int64_t j = 0; j < n_blocks; ++j) {
      const float* src = g + (t * n_blocks + j) * plane;
      float* pos = out.data() + (t * C + 2 * j) * plane;
      float* neg = out.data() + (t * C + 2 * j + 1) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        float val = src[i];
        pos[i] = val > 0.0f ? val : 0.0f;
        neg[i] = val < 0.0f ? -val : 0.0f;
      }
    }
  SpikeInput si;
  si.data = Tensor::from_data({T, C, H, W}, std::move(out));
  si.bins = B;
  si.blocks = n_blocks;
  return si;
}

}  // namespace sdflow
