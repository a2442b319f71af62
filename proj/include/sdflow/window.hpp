#pragma once

#include <vector>

#include "sdflow/ops.hpp"

namespace sdflow {

struct WindowConfig {
  int64_t t_w = 2, h_w = 4, w_w = 4;                 // window extents
  int64_t shift_t = 0, shift_h = 0, shift_w = 0;     // cyclic shift offsets
  int64_t heads = 1;

  int64_t tokens() const { return t_w * h_w * w_w; }
  bool shifted() const { return shift_t != 0 || shift_h != 0 || shift_w != 0; }

  WindowConfig with_half_shift() const {
    WindowConfig c = *this;
    c.shift_t = t_w / 2;
    c.shift_h = h_w / 2;
    c.shift_w = w_w / 2;
    return c;
  }

  WindowConfig without_shift() const {
    WindowConfig c = *this;
    c.shift_t = c.shift_h = c.shift_w = 0;
    return c;
  }

  void validate() const {
    SDFLOW_CHECK(t_w >= 1 && h_w >= 1 && w_w >= 1, "window extents must be positive");
    SDFLOW_CHECK(shift_t >= 0 && shift_t < t_w && shift_h >= 0 && shift_h < h_w &&
                     shift_w >= 0 && shift_w < w_w,
                 "window shift must satisfy 0 <= shift < extent");
    SDFLOW_CHECK(heads >= 1, "head count must be positive");
  }
};

// Sizes padded up to multiples of the window extents.
inline void padded_dims(int64_t T, int64_t H, int64_t W, const WindowConfig& cfg, int64_t& Tp,
                        int64_t& Hp, int64_t& Wp) {
  auto round_up = [](int64_t v, int64_t m) { return (v + m - 1) / m * m; };
  Tp = round_up(T, cfg.t_w);
  Hp = round_up(H, cfg.h_w);
  Wp = round_up(W, cfg.w_w);
}

// Drops the shift on axes the window fully covers: a single window per axis
// already mixes every token, and rolling would only force masking.
inline WindowConfig effective_window(const WindowConfig& cfg, int64_t T, int64_t H, int64_t W) {
  int64_t Tp, Hp, Wp;
  padded_dims(T, H, W, cfg, Tp, Hp, Wp);
  WindowConfig e = cfg;
  if (Tp == cfg.t_w) e.shift_t = 0;
  if (Hp == cfg.h_w) e.shift_h = 0;
  if (Wp == cfg.w_w) e.shift_w = 0;
  return e;
}

// x: (T,H,W,D) with dims multiples of the window extents. Output
// (N_w, N_t, D); windows enumerated row-major in (t,h,w), tokens row-major
// inside a window.
inline Tensor window_partition(const Tensor& x, const WindowConfig& cfg) {
  cfg.validate();
  SDFLOW_CHECK(x.ndim() == 4, "window_partition expects (T,H,W,D), got " << shape_str(x.shape()));
  int64_t T = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
  SDFLOW_CHECK(T % cfg.t_w == 0 && H % cfg.h_w == 0 && W % cfg.w_w == 0,
               "dims " << shape_str(x.shape()) << " not multiples of window " << cfg.t_w << "x"
                       << cfg.h_w << "x" << cfg.w_w);
  int64_t nt = T / cfg.t_w, nh = H / cfg.h_w, nw = W / cfg.w_w;
  Tensor y = op_reshape(x, {nt, cfg.t_w, nh, cfg.h_w, nw, cfg.w_w, D});
  y = op_permute(y, {0, 2, 4, 1, 3, 5, 6});
  return op_reshape(y, {nt * nh * nw, cfg.tokens(), D});
}

inline Tensor window_reverse(const Tensor& windows, const WindowConfig& cfg, int64_t T, int64_t H,
                             int64_t W) {
  cfg.validate();
  SDFLOW_CHECK(windows.ndim() == 3, "window_reverse expects (N_w,N_t,D)");
  int64_t nt = T / cfg.t_w, nh = H / cfg.h_w, nw = W / cfg.w_w;
  int64_t D = windows.dim(2);
  SDFLOW_CHECK(windows.dim(0) == nt * nh * nw && windows.dim(1) == cfg.tokens(),
               "window_reverse shape mismatch for target " << T << "x" << H << "x" << W);
  Tensor y = op_reshape(windows, {nt, nh, nw, cfg.t_w, cfg.h_w, cfg.w_w, D});
  y = op_permute(y, {0, 3, 1, 4, 2, 5, 6});
  return op_reshape(y, {T, H, W, D});
}

// Roll of (T,H,W,D) by -shift (forward) or +shift (inverse).
inline Tensor cyclic_shift(const Tensor& x, const WindowConfig& cfg, bool inverse = false) {
  SDFLOW_CHECK(x.ndim() == 4, "cyclic_shift expects (T,H,W,D)");
  if (!cfg.shifted()) return x;
  int64_t sgn = inverse ? 1 : -1;
  return op_roll(x, {sgn * cfg.shift_t, sgn * cfg.shift_h, sgn * cfg.shift_w, 0});
}

namespace detail {

// Region index along one axis of the shifted grid (swin mask slices):
// [0, L-win), [L-win, L-shift), [L-shift, L).
inline int region_of(int64_t c, int64_t size, int64_t win, int64_t shift) {
  if (shift == 0) return 0;
  if (c < size - win) return 0;
  if (c < size - shift) return 1;
  return 2;
}

// Per-token region ids on the padded, shifted grid. Padding cells (beyond the
// valid extents, located before shifting) receive a sentinel id.
inline std::vector<int> token_region_ids(int64_t Tp, int64_t Hp, int64_t Wp,
                                         const WindowConfig& cfg, int64_t T_valid,
                                         int64_t H_valid, int64_t W_valid) {
  constexpr int kPadId = 27;
  std::vector<int> grid(static_cast<size_t>(Tp * Hp * Wp));
  for (int64_t ct = 0; ct < Tp; ++ct)
    for (int64_t ch = 0; ch < Hp; ++ch)
      for (int64_t cw = 0; cw < Wp; ++cw) {
        // Cell (ct,ch,cw) of the shifted grid came from this original cell:
        int64_t ot = (ct + cfg.shift_t) % Tp;
        int64_t oh = (ch + cfg.shift_h) % Hp;
        int64_t ow = (cw + cfg.shift_w) % Wp;
        int id;
        if (ot >= T_valid || oh >= H_valid || ow >= W_valid) {
          id = kPadId;
        } else {
          id = (region_of(ct, Tp, cfg.t_w, cfg.shift_t) * 3 +
                region_of(ch, Hp, cfg.h_w, cfg.shift_h)) *
                   3 +
               region_of(cw, Wp, cfg.w_w, cfg.shift_w);
        }
        grid[static_cast<size_t>((ct * Hp + ch) * Wp + cw)] = id;
      }
  // Partition the id grid with the same window enumeration.
  int64_t nt = Tp / cfg.t_w, nh = Hp / cfg.h_w, nw = Wp / cfg.w_w;
  std::vector<int> ids(static_cast<size_t>(nt * nh * nw * cfg.tokens()));
  size_t out = 0;
  for (int64_t wt = 0; wt < nt; ++wt)
    for (int64_t wh = 0; wh < nh; ++wh)
      for (int64_t ww = 0; ww < nw; ++ww)
        for (int64_t it = 0; it < cfg.t_w; ++it)
          for (int64_t ih = 0; ih < cfg.h_w; ++ih)
            for (int64_t iw = 0; iw < cfg.w_w; ++iw) {
              int64_t ct = wt * cfg.t_w + it;
              int64_t ch = wh * cfg.h_w + ih;
              int64_t cw = ww * cfg.w_w + iw;
              ids[out++] = grid[static_cast<size_t>((ct * Hp + ch) * Wp + cw)];
            }
  return ids;
}

}  // namespace detail

// Pair mask (N_w, N_t, N_t) with 1 where two tokens of a window may attend.
// Valid extents mark the unpadded region; tokens from padding are isolated
// from valid tokens. Dimensions are the padded grid sizes.
inline Tensor make_pair_mask(int64_t Tp, int64_t Hp, int64_t Wp, const WindowConfig& cfg,
                             int64_t T_valid, int64_t H_valid, int64_t W_valid) {
  cfg.validate();
  auto ids = detail::token_region_ids(Tp, Hp, Wp, cfg, T_valid, H_valid, W_valid);
  int64_t n_tok = cfg.tokens();
  int64_t n_win = static_cast<int64_t>(ids.size()) / n_tok;
  std::vector<float> mask(static_cast<size_t>(n_win * n_tok * n_tok));
  for (int64_t w = 0; w < n_win; ++w) {
    const int* wid = ids.data() + w * n_tok;
    float* m = mask.data() + w * n_tok * n_tok;
    for (int64_t i = 0; i < n_tok; ++i)
      for (int64_t j = 0; j < n_tok; ++j) m[i * n_tok + j] = wid[i] == wid[j] ? 1.0f : 0.0f;
  }
  return Tensor::from_data({n_win, n_tok, n_tok}, std::move(mask));
}

// Token mask (N_w, N_t, 1) with 1 where the token originates from the valid
// (unpadded) region.
inline Tensor make_token_mask(int64_t Tp, int64_t Hp, int64_t Wp, const WindowConfig& cfg,
                              int64_t T_valid, int64_t H_valid, int64_t W_valid) {
  cfg.validate();
  int64_t n_tok = cfg.tokens();
  int64_t nt = Tp / cfg.t_w, nh = Hp / cfg.h_w, nw = Wp / cfg.w_w;
  int64_t n_win = nt * nh * nw;
  std::vector<float> mask(static_cast<size_t>(n_win * n_tok));
  size_t out = 0;
  for (int64_t wt = 0; wt < nt; ++wt)
    for (int64_t wh = 0; wh < nh; ++wh)
      for (int64_t ww = 0; ww < nw; ++ww)
        for (int64_t it = 0; it < cfg.t_w; ++it)
          for (int64_t ih = 0; ih < cfg.h_w; ++ih)
            for (int64_t iw = 0; iw < cfg.w_w; ++iw) {
              int64_t ct = wt * cfg.t_w + it;
              int64_t ch = wh * cfg.h_w + ih;
              int64_t cw = ww * cfg.w_w + iw;
              int64_t ot = (ct + cfg.shift_t) % Tp;
              int64_t oh = (ch + cfg.shift_h) % Hp;
              int64_t ow = (cw + cfg.shift_w) % Wp;
              mask[out++] = (ot < T_valid && oh < H_valid && ow < W_valid) ? 1.0f : 0.0f;
            }
  return Tensor::from_data({n_win, n_tok, 1}, std::move(mask));
}

// Relative-position index map for a window: flat offsets into a bias table of
// side (2t_w-1)(2h_w-1)(2w_w-1), one entry per ordered token pair.
inline std::vector<int64_t> relative_position_index(const WindowConfig& cfg) {
  int64_t n_tok = cfg.tokens();
  std::vector<int64_t> coords(static_cast<size_t>(n_tok) * 3);
  size_t c = 0;
  for (int64_t it = 0; it < cfg.t_w; ++it)
    for (int64_t ih = 0; ih < cfg.h_w; ++ih)
      for (int64_t iw = 0; iw < cfg.w_w; ++iw) {
        coords[c * 3 + 0] = it;
        coords[c * 3 + 1] = ih;
        coords[c * 3 + 2] = iw;
        ++c;
      }
  int64_t span_h = 2 * cfg.h_w - 1, span_w = 2 * cfg.w_w - 1;
  std::vector<int64_t> idx(static_cast<size_t>(n_tok * n_tok));
  for (int64_t i = 0; i < n_tok; ++i)
    for (int64_t j = 0; j < n_tok; ++j) {
      int64_t dt = coords[i * 3 + 0] - coords[j * 3 + 0] + cfg.t_w - 1;
      int64_t dh = coords[i * 3 + 1] - coords[j * 3 + 1] + cfg.h_w - 1;
      int64_t dw = coords[i * 3 + 2] - coords[j * 3 + 2] + cfg.w_w - 1;
      idx[static_cast<size_t>(i * n_tok + j)] = (dt * span_h + dh) * span_w + dw;
    }
  return idx;
}

inline int64_t relative_position_table_size(const WindowConfig& cfg) {
  return (2 * cfg.t_w - 1) * (2 * cfg.h_w - 1) * (2 * cfg.w_w - 1);
}

// Window-local token index of every cell of the (padded) grid, matching the
// partition enumeration. Used to paint per-token parameters onto the grid.
inline std::vector<int64_t> grid_token_index(int64_t Tp, int64_t Hp, int64_t Wp,
                                             const WindowConfig& cfg) {
  std::vector<int64_t> idx(static_cast<size_t>(Tp * Hp * Wp));
  for (int64_t ct = 0; ct < Tp; ++ct)
    for (int64_t ch = 0; ch < Hp; ++ch)
      for (int64_t cw = 0; cw < Wp; ++cw) {
        int64_t it = ct % cfg.t_w, ih = ch % cfg.h_w, iw = cw % cfg.w_w;
        idx[static_cast<size_t>((ct * Hp + ch) * Wp + cw)] =
            (it * cfg.h_w + ih) * cfg.w_w + iw;
      }
  return idx;
}

}  // namespace sdflow
