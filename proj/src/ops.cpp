#include "plunet/ops.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>
#include <string>

#include "plunet/parallel.hpp"

namespace plunet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string dims_str(std::int64_t a, std::int64_t b) {
  return std::to_string(a) + "x" + std::to_string(b);
}

template <class T>
void debug_check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) throw std::runtime_error(std::string("non-finite value produced by ") + op);
#endif
}

void check_per_channel(const Shape& s, std::int64_t c, const char* what) {
  if (s != Shape{1, c, 1, 1}) {
    fail(std::string(what) + " must have shape (1," + std::to_string(c) + ",1,1), got " + s.str());
  }
}

}  // namespace

ConvSpec ConvSpec::same(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t dilation,
                        bool bias) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = {k, k};
  s.dilation = {dilation, dilation};
  s.padding = {dilation * (k - 1) / 2, dilation * (k - 1) / 2};
  s.bias = bias;
  return s;
}

ConvSpec ConvSpec::pointwise(std::int64_t in, std::int64_t out, bool bias) {
  return same(in, out, 1, 1, bias);
}

ConvSpec ConvSpec::up2x2(std::int64_t in, std::int64_t out, bool bias) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = {2, 2};
  s.stride = {2, 2};
  s.bias = bias;
  return s;
}

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) fail("conv channel counts must be positive");
  if (groups < 1) fail("conv groups must be positive");
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    fail("groups " + std::to_string(groups) + " must divide channels " +
         std::to_string(in_channels) + " -> " + std::to_string(out_channels));
  }
  for (int a = 0; a < 2; ++a) {
    if (kernel[a] < 1 || stride[a] < 1 || dilation[a] < 1 || padding[a] < 0) {
      fail("invalid conv geometry: kernel " + dims_str(kernel[0], kernel[1]) + ", stride " +
           dims_str(stride[0], stride[1]) + ", dilation " + dims_str(dilation[0], dilation[1]) +
           ", padding " + dims_str(padding[0], padding[1]));
    }
  }
}

Shape ConvSpec::weight_shape() const {
  return Shape{out_channels, in_channels / groups, kernel[0], kernel[1]};
}

Shape ConvSpec::output_shape(const Shape& in) const {
  validate();
  if (in.c != in_channels) {
    fail("conv expects " + std::to_string(in_channels) + " input channels, got " + std::to_string(in.c));
  }
  const std::int64_t hn = in.h + 2 * padding[0] - effective_extent(0);
  const std::int64_t wn = in.w + 2 * padding[1] - effective_extent(1);
  if (hn < 0 || wn < 0) {
    fail("conv output would be empty for input " + in.str() + " (effective kernel " +
         dims_str(effective_extent(0), effective_extent(1)) + ")");
  }
  return Shape{in.n, out_channels, hn / stride[0] + 1, wn / stride[1] + 1};
}

namespace ops {

namespace {

// Copy of x with `ph` / `pw` zero rows / columns on each side.
template <class T>
Tensor<T> zero_pad(const Tensor<T>& x, std::int64_t ph, std::int64_t pw) {
  if (ph == 0 && pw == 0) return x;
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, s.h + 2 * ph, s.w + 2 * pw});
  const std::int64_t wp = s.w + 2 * pw;
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x.ptr() + nc * s.plane();
    T* dst = out.ptr() + nc * out.shape().plane();
    for (std::int64_t i = 0; i < s.h; ++i) {
      std::copy(src + i * s.w, src + (i + 1) * s.w, dst + (i + ph) * wp + pw);
    }
  }
  return out;
}

constexpr int kTile = 16;

struct ConvGeom {
  std::int64_t cin_g, kh, kw, dh, dw, sh, sw, plane, wp;
};

// Accumulates OB output channels over one row tile of `jt` <= kTile outputs.
// Order per output element: c, then u, then v.
template <class T, int OB>
inline void conv_tile(const T* xbase, const T* wpk, const ConvGeom& g, std::int64_t jt,
                      T (&acc)[OB][kTile]) {
  for (int ob = 0; ob < OB; ++ob) {
    for (int jj = 0; jj < kTile; ++jj) acc[ob][jj] = T(0);
  }
  const bool full = jt == kTile && g.sw == 1;
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    const T* xc = xbase + c * g.plane;
    for (std::int64_t u = 0; u < g.kh; ++u) {
      const T* xr = xc + u * g.dh * g.wp;
      for (std::int64_t v = 0; v < g.kw; ++v) {
        const T* xv = xr + v * g.dw;
        const T* wv = wpk + ((c * g.kh + u) * g.kw + v) * OB;
        if (full) {
          for (int ob = 0; ob < OB; ++ob) {
            const T wgt = wv[ob];
            for (int jj = 0; jj < kTile; ++jj) acc[ob][jj] += wgt * xv[jj];
          }
        } else {
          for (int ob = 0; ob < OB; ++ob) {
            const T wgt = wv[ob];
            for (std::int64_t jj = 0; jj < jt; ++jj) acc[ob][jj] += wgt * xv[jj * g.sw];
          }
        }
      }
    }
  }
}

// Computes output channels [o0, o0 + OB) of group `grp` for sample n.
template <class T, int OB>
void conv_block_channels(const Tensor<T>& xp, const Tensor<T>& w, const Tensor<T>* b,
                         const ConvSpec& spec, const ConvGeom& g, std::int64_t n, std::int64_t grp,
                         std::int64_t o0, Tensor<T>& out) {
  const Shape os = out.shape();
  // Pack weights as [c][u][v][ob].
  std::vector<T> wpk(static_cast<std::size_t>(g.cin_g * g.kh * g.kw * OB));
  const std::int64_t per_o = g.cin_g * g.kh * g.kw;
  for (int ob = 0; ob < OB; ++ob) {
    const T* wo = w.ptr() + (o0 + ob) * per_o;
    for (std::int64_t k = 0; k < per_o; ++k) wpk[static_cast<std::size_t>(k * OB + ob)] = wo[k];
  }
  const T* xg = xp.plane(n, grp * g.cin_g);
  T acc[OB][kTile];
  for (std::int64_t i = 0; i < os.h; ++i) {
    const T* xrow = xg + i * g.sh * g.wp;
    for (std::int64_t j0 = 0; j0 < os.w; j0 += kTile) {
      const std::int64_t jt = std::min<std::int64_t>(kTile, os.w - j0);
      conv_tile<T, OB>(xrow + j0 * g.sw, wpk.data(), g, jt, acc);
      for (int ob = 0; ob < OB; ++ob) {
        T* dst = out.plane(n, o0 + ob) + i * os.w + j0;
        const T bias = (b != nullptr) ? (*b)[o0 + ob] : T(0);
        for (std::int64_t jj = 0; jj < jt; ++jj) dst[jj] = acc[ob][jj] + bias;
      }
    }
  }
  (void)spec;
}

template <class T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, const ConvSpec& spec) {
  spec.validate();
  if (x.shape().c != spec.in_channels) {
    fail("conv2d: input has " + std::to_string(x.shape().c) + " channels, spec expects " +
         std::to_string(spec.in_channels));
  }
  if (w.shape() != spec.weight_shape()) {
    fail("conv2d: weight shape " + w.shape().str() + " != expected " + spec.weight_shape().str());
  }
  if (b != nullptr) check_per_channel(b->shape(), spec.out_channels, "conv2d bias");
}

// Forward core on an already padded input.
template <class T>
Tensor<T> conv2d_padded(const Tensor<T>& xp, const Tensor<T>& w, const Tensor<T>* b,
                        const ConvSpec& spec, const Shape& out_shape) {
  Tensor<T> out(out_shape);
  const Shape ps = xp.shape();
  const ConvGeom g{spec.in_channels / spec.groups, spec.kernel[0], spec.kernel[1],
                   spec.dilation[0], spec.dilation[1], spec.stride[0], spec.stride[1],
                   ps.plane(), ps.w};
  const std::int64_t cout_g = spec.out_channels / spec.groups;
  // Work items: (n, group, block of up to 8 output channels).
  const std::int64_t blocks_per_group = (cout_g + 7) / 8;
  const std::int64_t items = out_shape.n * spec.groups * blocks_per_group;
  parallel_for(items, [&](std::int64_t item) {
    const std::int64_t n = item / (spec.groups * blocks_per_group);
    const std::int64_t rem = item % (spec.groups * blocks_per_group);
    const std::int64_t grp = rem / blocks_per_group;
    std::int64_t o = grp * cout_g + (rem % blocks_per_group) * 8;
    const std::int64_t o_end = std::min(o + 8, (grp + 1) * cout_g);
    while (o < o_end) {
      const std::int64_t left = o_end - o;
      if (left >= 8) {
        conv_block_channels<T, 8>(xp, w, b, spec, g, n, grp, o, out);
        o += 8;
      } else if (left >= 4) {
        conv_block_channels<T, 4>(xp, w, b, spec, g, n, grp, o, out);
        o += 4;
      } else {
        conv_block_channels<T, 1>(xp, w, b, spec, g, n, grp, o, out);
        o += 1;
      }
    }
  });
  return out;
}

// Deterministic dot product with 16 fixed partial sums.
template <class T>
inline T dot_strided(const T* a, const T* b, std::int64_t len, std::int64_t bstride) {
  T lanes[kTile] = {};
  std::int64_t j = 0;
  if (bstride == 1) {
    for (; j + kTile <= len; j += kTile) {
      for (int l = 0; l < kTile; ++l) lanes[l] += a[j + l] * b[j + l];
    }
  }
  for (; j < len; ++j) lanes[j % kTile] += a[j] * b[j * bstride];
  T s = T(0);
  for (int l = 0; l < kTile; ++l) s += lanes[l];
  return s;
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, const ConvSpec& spec) {
  check_conv_args(x, w, b, spec);
  const Shape out_shape = spec.output_shape(x.shape());
  const Tensor<T> xp = zero_pad(x, spec.padding[0], spec.padding[1]);
  Tensor<T> out = conv2d_padded(xp, w, b, spec, out_shape);
  debug_check_finite(out, "conv2d");
  return out;
}

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                             const Tensor<T>& dy, bool need_dx, bool need_dw, bool need_db) {
  check_conv_args<T>(x, w, nullptr, spec);
  const Shape xs = x.shape();
  const Shape os = spec.output_shape(xs);
  if (dy.shape() != os) fail("conv2d_backward: gradient shape " + dy.shape().str() + " != " + os.str());
  const std::int64_t cin_g = spec.in_channels / spec.groups;
  const std::int64_t cout_g = spec.out_channels / spec.groups;
  const std::int64_t kh = spec.kernel[0], kw = spec.kernel[1];
  const std::int64_t dh = spec.dilation[0], dw = spec.dilation[1];
  const std::int64_t sh = spec.stride[0], sw = spec.stride[1];
  const std::int64_t ph = spec.padding[0], pw = spec.padding[1];
  ConvGrads<T> g;

  if (need_db) {
    g.db = Tensor<T>(spec.bias_shape());
    for (std::int64_t o = 0; o < spec.out_channels; ++o) {
      T s = T(0);
      for (std::int64_t n = 0; n < os.n; ++n) {
        const T* d = dy.plane(n, o);
        T lanes[kTile] = {};
        for (std::int64_t k = 0; k < os.plane(); ++k) lanes[k % kTile] += d[k];
        for (T l : lanes) s += l;
      }
      g.db[o] = s;
    }
  }

  if (need_dw) {
    const Tensor<T> xp = zero_pad(x, ph, pw);
    const std::int64_t wp = xp.shape().w;
    g.dw = Tensor<T>(spec.weight_shape());
    parallel_for(spec.out_channels, [&](std::int64_t o) {
      const std::int64_t grp = o / cout_g;
      for (std::int64_t c = 0; c < cin_g; ++c) {
        for (std::int64_t u = 0; u < kh; ++u) {
          for (std::int64_t v = 0; v < kw; ++v) {
            T s = T(0);
            for (std::int64_t n = 0; n < os.n; ++n) {
              const T* d = dy.plane(n, o);
              const T* xc = xp.plane(n, grp * cin_g + c);
              for (std::int64_t i = 0; i < os.h; ++i) {
                s += dot_strided(d + i * os.w, xc + (i * sh + u * dh) * wp + v * dw, os.w, sw);
              }
            }
            g.dw.at(o, c, u, v) = s;
          }
        }
      }
    });
  }

  if (need_dx) {
    const std::int64_t qh = dh * (kh - 1) - ph;
    const std::int64_t qw = dw * (kw - 1) - pw;
    if (sh == 1 && sw == 1 && qh >= 0 && qw >= 0) {
      // Stride 1: dx is a convolution of dy with the flipped, transposed kernel.
      ConvSpec back = spec;
      back.in_channels = spec.out_channels;
      back.out_channels = spec.in_channels;
      back.padding = {qh, qw};
      back.bias = false;
      Tensor<T> wt(back.weight_shape());
      for (std::int64_t grp = 0; grp < spec.groups; ++grp) {
        for (std::int64_t c = 0; c < cin_g; ++c) {
          for (std::int64_t o = 0; o < cout_g; ++o) {
            for (std::int64_t u = 0; u < kh; ++u) {
              for (std::int64_t v = 0; v < kw; ++v) {
                wt.at(grp * cin_g + c, o, u, v) = w.at(grp * cout_g + o, c, kh - 1 - u, kw - 1 - v);
              }
            }
          }
        }
      }
      const Tensor<T> dyp = zero_pad(dy, qh, qw);
      g.dx = conv2d_padded<T>(dyp, wt, nullptr, back, xs);
    } else {
      // General case: scatter into a padded buffer, then crop.
      const std::int64_t hp = xs.h + 2 * ph, wp = xs.w + 2 * pw;
      g.dx = Tensor<T>(xs);
      parallel_for(xs.n * spec.in_channels, [&](std::int64_t item) {
        const std::int64_t n = item / spec.in_channels;
        const std::int64_t cg = item % spec.in_channels;
        const std::int64_t grp = cg / cin_g;
        const std::int64_t c = cg % cin_g;
        std::vector<T> buf(static_cast<std::size_t>(hp * wp), T(0));
        for (std::int64_t ol = 0; ol < cout_g; ++ol) {
          const std::int64_t o = grp * cout_g + ol;
          const T* d = dy.plane(n, o);
          for (std::int64_t u = 0; u < kh; ++u) {
            for (std::int64_t v = 0; v < kw; ++v) {
              const T wgt = w.at(o, c, u, v);
              for (std::int64_t i = 0; i < os.h; ++i) {
                T* row = buf.data() + (i * sh + u * dh) * wp + v * dw;
                const T* dr = d + i * os.w;
                for (std::int64_t j = 0; j < os.w; ++j) row[j * sw] += wgt * dr[j];
              }
            }
          }
        }
        T* dst = g.dx.plane(n, cg);
        for (std::int64_t i = 0; i < xs.h; ++i) {
          std::copy(buf.begin() + (i + ph) * wp + pw, buf.begin() + (i + ph) * wp + pw + xs.w,
                    dst + i * xs.w);
        }
      });
    }
  }
  return g;
}

ConvSpec depthwise_stage(const ConvSpec& spec) {
  ConvSpec d = spec;
  d.out_channels = spec.in_channels;
  d.groups = spec.in_channels;
  return d;
}

ConvSpec pointwise_stage(const ConvSpec& spec) {
  return ConvSpec::pointwise(spec.in_channels, spec.out_channels, spec.bias);
}

template <class T>
Tensor<T> conv2d_depthwise_separable(const Tensor<T>& x, const Tensor<T>& w_depth,
                                     const Tensor<T>* b_depth, const Tensor<T>& w_point,
                                     const Tensor<T>* b_point, const ConvSpec& spec) {
  if (spec.groups != 1) fail("depthwise separable spec must describe an ungrouped in -> out map");
  const Tensor<T> mid = conv2d(x, w_depth, b_depth, depthwise_stage(spec));
  return conv2d(mid, w_point, b_point, pointwise_stage(spec));
}

namespace {

void check_up_spec(const ConvSpec& spec) {
  spec.validate();
  if (spec.kernel != std::array<std::int64_t, 2>{2, 2} || spec.stride != std::array<std::int64_t, 2>{2, 2} ||
      spec.padding != std::array<std::int64_t, 2>{0, 0} ||
      spec.dilation != std::array<std::int64_t, 2>{1, 1} || spec.groups != 1) {
    fail("conv_transpose2d supports only kernel 2x2, stride 2, no padding, dilation 1, groups 1");
  }
}

template <class T>
void check_up_args(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec) {
  check_up_spec(spec);
  if (x.shape().c != spec.in_channels) {
    fail("conv_transpose2d: input has " + std::to_string(x.shape().c) + " channels, spec expects " +
         std::to_string(spec.in_channels));
  }
  const Shape ws{spec.in_channels, spec.out_channels, 2, 2};
  if (w.shape() != ws) fail("conv_transpose2d: weight shape " + w.shape().str() + " != " + ws.str());
}

}  // namespace

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                           const ConvSpec& spec) {
  check_up_args(x, w, spec);
  if (b != nullptr) check_per_channel(b->shape(), spec.out_channels, "conv_transpose2d bias");
  const Shape xs = x.shape();
  const Shape os{xs.n, spec.out_channels, 2 * xs.h, 2 * xs.w};
  Tensor<T> out(os);
  const std::int64_t cin = spec.in_channels, cout = spec.out_channels;
  parallel_for(xs.n * cout, [&](std::int64_t item) {
    const std::int64_t n = item / cout;
    const std::int64_t o = item % cout;
    const T bias = (b != nullptr) ? (*b)[o] : T(0);
    std::vector<T> acc(static_cast<std::size_t>(xs.w));
    T* dst = out.plane(n, o);
    for (std::int64_t u = 0; u < 2; ++u) {
      for (std::int64_t v = 0; v < 2; ++v) {
        for (std::int64_t i = 0; i < xs.h; ++i) {
          std::fill(acc.begin(), acc.end(), T(0));
          for (std::int64_t c = 0; c < cin; ++c) {
            const T wgt = w.at(c, o, u, v);
            const T* xr = x.plane(n, c) + i * xs.w;
            for (std::int64_t j = 0; j < xs.w; ++j) acc[static_cast<std::size_t>(j)] += wgt * xr[j];
          }
          T* row = dst + (2 * i + u) * os.w + v;
          for (std::int64_t j = 0; j < xs.w; ++j) row[2 * j] = acc[static_cast<std::size_t>(j)] + bias;
        }
      }
    }
  });
  debug_check_finite(out, "conv_transpose2d");
  return out;
}

template <class T>
ConvGrads<T> conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                                       const Tensor<T>& dy, bool need_dx, bool need_dw,
                                       bool need_db) {
  check_up_args(x, w, spec);
  const Shape xs = x.shape();
  const Shape os{xs.n, spec.out_channels, 2 * xs.h, 2 * xs.w};
  if (dy.shape() != os) fail("conv_transpose2d_backward: gradient shape " + dy.shape().str() + " != " + os.str());
  const std::int64_t cin = spec.in_channels, cout = spec.out_channels;
  ConvGrads<T> g;
  if (need_db) {
    g.db = Tensor<T>(spec.bias_shape());
    for (std::int64_t o = 0; o < cout; ++o) {
      T s = T(0);
      for (std::int64_t n = 0; n < os.n; ++n) {
        const T* d = dy.plane(n, o);
        for (std::int64_t k = 0; k < os.plane(); ++k) s += d[k];
      }
      g.db[o] = s;
    }
  }
  if (need_dw) {
    g.dw = Tensor<T>(Shape{cin, cout, 2, 2});
    parallel_for(cin, [&](std::int64_t c) {
      for (std::int64_t o = 0; o < cout; ++o) {
        for (std::int64_t u = 0; u < 2; ++u) {
          for (std::int64_t v = 0; v < 2; ++v) {
            T s = T(0);
            for (std::int64_t n = 0; n < xs.n; ++n) {
              const T* xc = x.plane(n, c);
              const T* d = dy.plane(n, o);
              for (std::int64_t i = 0; i < xs.h; ++i) {
                s += dot_strided(xc + i * xs.w, d + (2 * i + u) * os.w + v, xs.w, 2);
              }
            }
            g.dw.at(c, o, u, v) = s;
          }
        }
      }
    });
  }
  if (need_dx) {
    g.dx = Tensor<T>(xs);
    parallel_for(xs.n * cin, [&](std::int64_t item) {
      const std::int64_t n = item / cin;
      const std::int64_t c = item % cin;
      T* dst = g.dx.plane(n, c);
      for (std::int64_t o = 0; o < cout; ++o) {
        const T* d = dy.plane(n, o);
        for (std::int64_t u = 0; u < 2; ++u) {
          for (std::int64_t v = 0; v < 2; ++v) {
            const T wgt = w.at(c, o, u, v);
            for (std::int64_t i = 0; i < xs.h; ++i) {
              const T* dr = d + (2 * i + u) * os.w + v;
              T* xr = dst + i * xs.w;
              for (std::int64_t j = 0; j < xs.w; ++j) xr[j] += wgt * dr[2 * j];
            }
          }
        }
      }
    });
  }
  return g;
}

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, BatchNormMode mode,
                      const BatchNormOptions& opt, BatchNormSaved<T>* saved) {
  const Shape s = x.shape();
  check_per_channel(gamma.shape(), s.c, "batchnorm gamma");
  check_per_channel(beta.shape(), s.c, "batchnorm beta");
  check_per_channel(running_mean.shape(), s.c, "batchnorm running_mean");
  check_per_channel(running_var.shape(), s.c, "batchnorm running_var");
  const std::int64_t m = s.n * s.plane();
  if (mode == BatchNormMode::train && m == 1) {
    fail("batchnorm2d in train mode needs more than one value per channel (N*H*W == 1)");
  }
  std::vector<double> mean(static_cast<std::size_t>(s.c)), invstd(static_cast<std::size_t>(s.c));
  for (std::int64_t c = 0; c < s.c; ++c) {
    double mu, var;
    if (mode == BatchNormMode::train) {
      double sum = 0.0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = x.plane(n, c);
        for (std::int64_t k = 0; k < s.plane(); ++k) sum += p[k];
      }
      mu = sum / static_cast<double>(m);
      double sq = 0.0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = x.plane(n, c);
        for (std::int64_t k = 0; k < s.plane(); ++k) {
          const double d = p[k] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(m);
      running_mean[c] = static_cast<T>((1.0 - opt.momentum) * running_mean[c] + opt.momentum * mu);
      running_var[c] = static_cast<T>((1.0 - opt.momentum) * running_var[c] + opt.momentum * var);
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    mean[static_cast<std::size_t>(c)] = mu;
    invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + opt.eps);
  }
  Tensor<T> y(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const T scale = static_cast<T>(gamma[c] * invstd[static_cast<std::size_t>(c)]);
      const T shift = static_cast<T>(beta[c] - gamma[c] * mean[static_cast<std::size_t>(c)] *
                                                   invstd[static_cast<std::size_t>(c)]);
      const T* p = x.plane(n, c);
      T* q = y.plane(n, c);
      for (std::int64_t k = 0; k < s.plane(); ++k) q[k] = p[k] * scale + shift;
    }
  }
  if (saved != nullptr) {
    saved->mean = std::move(mean);
    saved->invstd = std::move(invstd);
  }
  debug_check_finite(y, "batchnorm2d");
  return y;
}

template <class T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                       const BatchNormSaved<T>& saved, BatchNormMode mode,
                                       const Tensor<T>& dy) {
  const Shape s = x.shape();
  if (dy.shape() != s) fail("batchnorm2d_backward: gradient shape mismatch");
  const double m = static_cast<double>(s.n * s.plane());
  BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(Shape{1, s.c, 1, 1}), Tensor<T>(Shape{1, s.c, 1, 1})};
  for (std::int64_t c = 0; c < s.c; ++c) {
    const double mu = saved.mean[static_cast<std::size_t>(c)];
    const double is = saved.invstd[static_cast<std::size_t>(c)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, c);
      const T* d = dy.plane(n, c);
      for (std::int64_t k = 0; k < s.plane(); ++k) {
        sum_dy += d[k];
        sum_dy_xhat += d[k] * (p[k] - mu) * is;
      }
    }
    g.dbeta[c] = static_cast<T>(sum_dy);
    g.dgamma[c] = static_cast<T>(sum_dy_xhat);
    const double gi = gamma[c] * is;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, c);
      const T* d = dy.plane(n, c);
      T* q = g.dx.plane(n, c);
      if (mode == BatchNormMode::train) {
        const double mean_dy = sum_dy / m;
        const double mean_dy_xhat = sum_dy_xhat / m;
        for (std::int64_t k = 0; k < s.plane(); ++k) {
          const double xhat = (p[k] - mu) * is;
          q[k] = static_cast<T>(gi * (d[k] - mean_dy - xhat * mean_dy_xhat));
        }
      } else {
        for (std::int64_t k = 0; k < s.plane(); ++k) q[k] = static_cast<T>(gi * d[k]);
      }
    }
  }
  return g;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* p = x.ptr();
  T* q = y.ptr();
  for (std::int64_t i = 0; i < x.numel(); ++i) q[i] = p[i] > T(0) ? p[i] : T(0);
  return y;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  if (dy.shape() != x.shape()) fail("relu_backward: gradient shape mismatch");
  Tensor<T> dx(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
  return dx;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    if (v >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <class T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  if (dy.shape() != y.shape()) fail("sigmoid_backward: gradient shape mismatch");
  Tensor<T> dx(y.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
  return dx;
}

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::vector<std::int64_t>* argmax) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    fail("maxpool2d needs even spatial extents, got " + dims_str(s.h, s.w));
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> y(os);
  if (argmax != nullptr) argmax->assign(static_cast<std::size_t>(os.numel()), 0);
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const std::int64_t base = nc * s.plane();
    for (std::int64_t i = 0; i < os.h; ++i) {
      for (std::int64_t j = 0; j < os.w; ++j) {
        const std::int64_t taps[4] = {base + 2 * i * s.w + 2 * j, base + 2 * i * s.w + 2 * j + 1,
                                      base + (2 * i + 1) * s.w + 2 * j,
                                      base + (2 * i + 1) * s.w + 2 * j + 1};
        std::int64_t best = taps[0];
        for (int k = 1; k < 4; ++k) {
          if (x[taps[k]] > x[best]) best = taps[k];
        }
        const std::int64_t oi = nc * os.plane() + i * os.w + j;
        y[oi] = x[best];
        if (argmax != nullptr) (*argmax)[static_cast<std::size_t>(oi)] = best;
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::int64_t>& argmax,
                             const Tensor<T>& dy) {
  if (static_cast<std::int64_t>(argmax.size()) != dy.numel()) fail("maxpool2d_backward: argmax size mismatch");
  Tensor<T> dx(input_shape);
  for (std::int64_t i = 0; i < dy.numel(); ++i) dx[argmax[static_cast<std::size_t>(i)]] += dy[i];
  return dx;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, 1, 1});
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = x.ptr() + nc * s.plane();
    double sum = 0.0;
    for (std::int64_t k = 0; k < s.plane(); ++k) sum += p[k];
    y[nc] = static_cast<T>(sum / static_cast<double>(s.plane()));
  }
  return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& dy) {
  if (dy.shape() != Shape{input_shape.n, input_shape.c, 1, 1}) fail("global_avg_pool_backward: gradient shape mismatch");
  Tensor<T> dx(input_shape);
  const T inv = T(1) / static_cast<T>(input_shape.plane());
  for (std::int64_t nc = 0; nc < input_shape.n * input_shape.c; ++nc) {
    T* q = dx.ptr() + nc * input_shape.plane();
    const T v = dy[nc] * inv;
    for (std::int64_t k = 0; k < input_shape.plane(); ++k) q[k] = v;
  }
  return dx;
}

template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> xs) {
  if (xs.empty()) fail("concat_channels needs at least one input");
  const Shape first = xs.front()->shape();
  std::int64_t channels = 0;
  for (const Tensor<T>* t : xs) {
    const Shape s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      fail("concat_channels: spatial/batch mismatch " + s.str() + " vs " + first.str());
    }
    channels += s.c;
  }
  Tensor<T> y(Shape{first.n, channels, first.h, first.w});
  for (std::int64_t n = 0; n < first.n; ++n) {
    std::int64_t c0 = 0;
    for (const Tensor<T>* t : xs) {
      const std::int64_t len = t->shape().c * first.plane();
      std::copy(t->plane(n, 0), t->plane(n, 0) + len, y.plane(n, c0));
      c0 += t->shape().c;
    }
  }
  return y;
}

template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& dy, std::span<const std::int64_t> extents) {
  const Shape s = dy.shape();
  std::int64_t total = 0;
  for (auto e : extents) total += e;
  if (total != s.c) fail("split_channels: extents do not sum to channel count");
  std::vector<Tensor<T>> out;
  std::int64_t c0 = 0;
  for (auto e : extents) {
    Tensor<T> part(Shape{s.n, e, s.h, s.w});
    for (std::int64_t n = 0; n < s.n; ++n) {
      std::copy(dy.plane(n, c0), dy.plane(n, c0) + e * s.plane(), part.plane(n, 0));
    }
    out.push_back(std::move(part));
    c0 += e;
  }
  return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
  const Shape xs = x.shape(), ws = w.shape();
  if (xs.h != 1 || xs.w != 1) fail("linear expects input (N,C,1,1), got " + xs.str());
  if (ws.h != 1 || ws.w != 1 || ws.c != xs.c) {
    fail("linear: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  if (b != nullptr) check_per_channel(b->shape(), ws.n, "linear bias");
  Tensor<T> y(Shape{xs.n, ws.n, 1, 1});
  for (std::int64_t n = 0; n < xs.n; ++n) {
    for (std::int64_t o = 0; o < ws.n; ++o) {
      T s = T(0);
      for (std::int64_t i = 0; i < xs.c; ++i) s += w[o * ws.c + i] * x[n * xs.c + i];
      y[n * ws.n + o] = s + (b != nullptr ? (*b)[o] : T(0));
    }
  }
  return y;
}

template <class T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, bool need_dx) {
  const Shape xs = x.shape(), ws = w.shape();
  if (dy.shape() != Shape{xs.n, ws.n, 1, 1}) fail("linear_backward: gradient shape mismatch");
  LinearGrads<T> g{Tensor<T>(), Tensor<T>(ws), Tensor<T>(Shape{1, ws.n, 1, 1})};
  for (std::int64_t o = 0; o < ws.n; ++o) {
    T sb = T(0);
    for (std::int64_t n = 0; n < xs.n; ++n) sb += dy[n * ws.n + o];
    g.db[o] = sb;
    for (std::int64_t i = 0; i < xs.c; ++i) {
      T s = T(0);
      for (std::int64_t n = 0; n < xs.n; ++n) s += dy[n * ws.n + o] * x[n * xs.c + i];
      g.dw[o * ws.c + i] = s;
    }
  }
  if (need_dx) {
    g.dx = Tensor<T>(xs);
    for (std::int64_t n = 0; n < xs.n; ++n) {
      for (std::int64_t i = 0; i < xs.c; ++i) {
        T s = T(0);
        for (std::int64_t o = 0; o < ws.n; ++o) s += w[o * ws.c + i] * dy[n * ws.n + o];
        g.dx[n * xs.c + i] = s;
      }
    }
  }
  return g;
}

template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  const Shape xs = x.shape();
  if (s.shape() != Shape{xs.n, xs.c, 1, 1}) {
    fail("scale_channels: scale shape " + s.shape().str() + " incompatible with " + xs.str());
  }
  Tensor<T> y(xs);
  for (std::int64_t nc = 0; nc < xs.n * xs.c; ++nc) {
    const T* p = x.ptr() + nc * xs.plane();
    T* q = y.ptr() + nc * xs.plane();
    const T f = s[nc];
    for (std::int64_t k = 0; k < xs.plane(); ++k) q[k] = p[k] * f;
  }
  return y;
}

#define PLUNET_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, const ConvSpec&); \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const ConvSpec&,        \
                                        const Tensor<T>&, bool, bool, bool);                        \
  template Tensor<T> conv2d_depthwise_separable(const Tensor<T>&, const Tensor<T>&,                 \
                                                const Tensor<T>*, const Tensor<T>&,                  \
                                                const Tensor<T>*, const ConvSpec&);                  \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,         \
                                      const ConvSpec&);                                              \
  template ConvGrads<T> conv_transpose2d_backward(const Tensor<T>&, const Tensor<T>&,               \
                                                  const ConvSpec&, const Tensor<T>&, bool, bool,     \
                                                  bool);                                             \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,  \
                                 Tensor<T>&, BatchNormMode, const BatchNormOptions&,                 \
                                 BatchNormSaved<T>*);                                                \
  template BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>&, const Tensor<T>&,               \
                                                  const BatchNormSaved<T>&, BatchNormMode,           \
                                                  const Tensor<T>&);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                         \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                      \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> maxpool2d(const Tensor<T>&, std::vector<std::int64_t>*);                        \
  template Tensor<T> maxpool2d_backward(const Shape&, const std::vector<std::int64_t>&,              \
                                        const Tensor<T>&);                                           \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                              \
  template Tensor<T> global_avg_pool_backward(const Shape&, const Tensor<T>&);                       \
  template Tensor<T> concat_channels(std::span<const Tensor<T>* const>);                             \
  template std::vector<Tensor<T>> split_channels(const Tensor<T>&, std::span<const std::int64_t>);   \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                   \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                          bool);                                                     \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);

PLUNET_INSTANTIATE_OPS(float)
PLUNET_INSTANTIATE_OPS(double)

#undef PLUNET_INSTANTIATE_OPS

}  // namespace ops
}  // namespace plunet
