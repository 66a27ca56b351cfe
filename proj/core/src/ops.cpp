#include "ctdense/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ctdense/errors.hpp"

namespace ctdense {

namespace {

constexpr std::size_t kColumnTile = 256;

// C[M×N] += A[M×K] · B[K×N], all row-major.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColumnTile) {
    const std::size_t j1 = std::min(n, j0 + kColumnTile);
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// C[M×K] += A · Bᵀ  (A: M×N, B: K×N).
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      // Eight fixed partial sums: vectorizable and still order-deterministic.
      T acc[8] = {};
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        for (int u = 0; u < 8; ++u) acc[u] += arow[j + u] * brow[j + u];
      }
      T tail = 0;
      for (; j < n; ++j) tail += arow[j] * brow[j];
      c[i * k + p] += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
    }
  }
}

// C[K×N] += Aᵀ · B  (A: M×K, B: M×N).
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColumnTile) {
    const std::size_t j1 = std::min(n, j0 + kColumnTile);
    for (std::size_t i = 0; i < m; ++i) {
      const T* brow = b + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        T* crow = c + p * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

struct ConvGeometry {
  std::int64_t channels, height, width;
  std::int64_t kernel_h, kernel_w;
  std::int64_t out_h, out_w;
  int stride, padding;

  bool is_pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
  std::size_t rows() const { return static_cast<std::size_t>(channels * kernel_h * kernel_w); }
  std::size_t cols() const { return static_cast<std::size_t>(out_h * out_w); }
};

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        T* dst = col + static_cast<std::size_t>((c * g.kernel_h + ki) * g.kernel_w + kj) * cols;
        const T* plane = image + c * g.height * g.width;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki;
          T* out = dst + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* row = plane + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj;
            out[ow] = (iw >= 0 && iw < g.width) ? row[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t cols = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* src = col + static_cast<std::size_t>((c * g.kernel_h + ki) * g.kernel_w + kj) * cols;
        T* plane = image + c * g.height * g.width;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          T* row = plane + ih * g.width;
          const T* in = src + oh * g.out_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj;
            if (iw >= 0 && iw < g.width) row[iw] += in[ow];
          }
        }
      }
    }
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* name) {
  if (t.ndim() != rank) {
    throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::int64_t window_output_size(std::int64_t in, int kernel, int stride, int padding) {
  const std::int64_t span = in + 2 * static_cast<std::int64_t>(padding) - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

// ---- conv2d -------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 Conv2dParams params) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (params.stride < 1) throw GeometryError("conv2d: stride must be >= 1");
  if (params.padding < 0) throw GeometryError("conv2d: padding must be >= 0");
  const auto n = input.dim(0);
  const auto out_channels = weight.dim(0);
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) + " channels but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != out_channels)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(out_channels) + " output channels");
  }
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), 0, 0,
                 params.stride, params.padding};
  g.out_h = window_output_size(g.height, static_cast<int>(g.kernel_h), g.stride, g.padding);
  g.out_w = window_output_size(g.width, static_cast<int>(g.kernel_w), g.stride, g.padding);
  if (g.out_h <= 0 || g.out_w <= 0) {
    throw GeometryError("conv2d: kernel " + std::to_string(g.kernel_h) + "x" + std::to_string(g.kernel_w) +
                        " with padding " + std::to_string(g.padding) + " does not fit input " +
                        shape_str(input.shape()));
  }

  auto out = Tensor<T>::zeros({n, out_channels, g.out_h, g.out_w});
  const std::size_t rows = g.rows();
  const std::size_t cols = g.cols();
  const std::size_t in_plane = static_cast<std::size_t>(g.channels * g.height * g.width);
  const std::size_t out_plane = static_cast<std::size_t>(out_channels) * cols;
  const T* x = input.data().data();
  const T* w = weight.data().data();
  T* y = out.mutable_data().data();

  std::vector<T> col(g.is_pointwise() ? 0 : rows * cols);
  for (std::int64_t s = 0; s < n; ++s) {
    const T* image = x + s * in_plane;
    const T* columns = image;
    if (!g.is_pointwise()) {
      im2col(image, g, col.data());
      columns = col.data();
    }
    T* dst = y + s * out_plane;
    if (bias) {
      const T* b = bias->data().data();
      for (std::int64_t o = 0; o < out_channels; ++o) std::fill(dst + o * cols, dst + (o + 1) * cols, b[o]);
    }
    gemm_nn(static_cast<std::size_t>(out_channels), cols, rows, w, columns, dst);
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  if (!should_record<T>({input, weight}) && !(bias && bias->requires_grad())) return out;

  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias ? bias->impl() : nullptr;
  auto yi = out.impl();
  record<T>(out, inputs, [xi, wi, bi, yi, g, n, out_channels] {
    const std::size_t rows = g.rows();
    const std::size_t cols = g.cols();
    const std::size_t in_plane = static_cast<std::size_t>(g.channels * g.height * g.width);
    const std::size_t out_plane = static_cast<std::size_t>(out_channels) * cols;
    const T* dy = yi->grad.data();
    T* dx = xi->grad_buffer();
    T* dw = wi->grad_buffer();
    T* db = bi ? bi->grad_buffer() : nullptr;
    std::vector<T> col(rows * cols);
    std::vector<T> dcol(g.is_pointwise() ? 0 : rows * cols);
    for (std::int64_t s = 0; s < n; ++s) {
      const T* dys = dy + s * out_plane;
      if (db) {
        for (std::int64_t o = 0; o < out_channels; ++o) {
          T acc = 0;
          for (std::size_t j = 0; j < cols; ++j) acc += dys[o * cols + j];
          db[o] += acc;
        }
      }
      const T* image = xi->data.data() + s * in_plane;
      if (dw) {
        const T* columns = image;
        if (!g.is_pointwise()) {
          im2col(image, g, col.data());
          columns = col.data();
        }
        gemm_nt(static_cast<std::size_t>(out_channels), rows, cols, dys, columns, dw);
      }
      if (dx) {
        T* dimage = dx + s * in_plane;
        if (g.is_pointwise()) {
          gemm_tn(static_cast<std::size_t>(out_channels), rows, cols, wi->data.data(), dys, dimage);
        } else {
          std::fill(dcol.begin(), dcol.end(), T(0));
          gemm_tn(static_cast<std::size_t>(out_channels), rows, cols, wi->data.data(), dys, dcol.data());
          col2im(dcol.data(), g, dimage);
        }
      }
    }
  });
  return out;
}

// ---- batchnorm2d --------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, BatchNormParams params) {
  require_rank(input, 4, "batchnorm2d", "input");
  const auto n = input.dim(0);
  const auto channels = input.dim(1);
  const auto plane = input.dim(2) * input.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->ndim() != 1 || p->dim(0) != channels) {
      throw ShapeError("batchnorm2d: per-channel parameter of shape " + shape_str(p->shape()) + " does not match " +
                       std::to_string(channels) + " channels");
    }
  }
  const std::int64_t count = n * plane;
  if (params.training && count < 2) {
    throw DegenerateStatisticsError("batchnorm2d: training mode needs at least 2 values per channel, got " +
                                    std::to_string(count));
  }

  auto out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.mutable_data().data();
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  std::vector<double> mean(static_cast<std::size_t>(channels));
  std::vector<double> invstd(static_cast<std::size_t>(channels));

  for (std::int64_t c = 0; c < channels; ++c) {
    double mu;
    double var;
    if (params.training) {
      double acc = 0;
      for (std::int64_t s = 0; s < n; ++s) {
        const T* p = x + (s * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      mu = acc / static_cast<double>(count);
      double sq = 0;
      for (std::int64_t s = 0; s < n; ++s) {
        const T* p = x + (s * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const double unbiased = sq / static_cast<double>(count - 1);
      rm[c] = static_cast<T>((1.0 - params.momentum) * rm[c] + params.momentum * mu);
      rv[c] = static_cast<T>((1.0 - params.momentum) * rv[c] + params.momentum * unbiased);
    } else {
      mu = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const double inv = 1.0 / std::sqrt(var + params.eps);
    mean[c] = mu;
    invstd[c] = inv;
    const double scale = gm[c] * inv;
    const double shift = bt[c] - mu * scale;
    for (std::int64_t s = 0; s < n; ++s) {
      const T* p = x + (s * channels + c) * plane;
      T* q = y + (s * channels + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) q[i] = static_cast<T>(p[i] * scale + shift);
    }
  }

  if (!should_record<T>({input, gamma, beta})) return out;

  auto xi = input.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  auto yi = out.impl();
  const bool training = params.training;
  record<T>(out, {input, gamma, beta},
            [xi, gi, bi, yi, mean = std::move(mean), invstd = std::move(invstd), n, channels, plane, training] {
              const T* x = xi->data.data();
              const T* dy = yi->grad.data();
              T* dx = xi->grad_buffer();
              T* dg = gi->grad_buffer();
              T* db = bi->grad_buffer();
              const double count = static_cast<double>(n * plane);
              for (std::int64_t c = 0; c < channels; ++c) {
                double sum_dy = 0;
                double sum_dy_xhat = 0;
                for (std::int64_t s = 0; s < n; ++s) {
                  const std::int64_t base = (s * channels + c) * plane;
                  for (std::int64_t i = 0; i < plane; ++i) {
                    const double xhat = (x[base + i] - mean[c]) * invstd[c];
                    sum_dy += dy[base + i];
                    sum_dy_xhat += dy[base + i] * xhat;
                  }
                }
                if (dg) dg[c] += static_cast<T>(sum_dy_xhat);
                if (db) db[c] += static_cast<T>(sum_dy);
                if (!dx) continue;
                const double g = gi->data[c];
                for (std::int64_t s = 0; s < n; ++s) {
                  const std::int64_t base = (s * channels + c) * plane;
                  for (std::int64_t i = 0; i < plane; ++i) {
                    if (training) {
                      const double xhat = (x[base + i] - mean[c]) * invstd[c];
                      dx[base + i] += static_cast<T>(g * invstd[c] / count *
                                                     (count * dy[base + i] - sum_dy - xhat * sum_dy_xhat));
                    } else {
                      dx[base + i] += static_cast<T>(g * invstd[c] * dy[base + i]);
                    }
                  }
                }
              }
            });
  return out;
}

// ---- relu ---------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  auto out = Tensor<T>::zeros(input.shape());
  const auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] < T(0) ? T(0) : x[i];  // NaN passes through
  if (!should_record<T>({input})) return out;
  auto xi = input.impl();
  auto yi = out.impl();
  record<T>(out, {input}, [xi, yi] {
    T* dx = xi->grad_buffer();
    if (!dx) return;
    for (std::size_t i = 0; i < yi->grad.size(); ++i) {
      if (xi->data[i] > T(0)) dx[i] += yi->grad[i];
    }
  });
  return out;
}

// ---- pool2d -------------------------------------------------------------------

template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, Pool2dParams params) {
  require_rank(input, 4, "pool2d", "input");
  const auto n = input.dim(0);
  const auto channels = input.dim(1);
  const auto h = input.dim(2);
  const auto w = input.dim(3);
  const std::int64_t planes = n * channels;
  const T* x = input.data().data();

  if (params.mode == PoolMode::GlobalAverage) {
    if (h * w == 0) throw GeometryError("pool2d: global average over an empty plane");
    auto out = Tensor<T>::zeros({n, channels, 1, 1});
    T* y = out.mutable_data().data();
    for (std::int64_t p = 0; p < planes; ++p) {
      double acc = 0;
      for (std::int64_t i = 0; i < h * w; ++i) acc += x[p * h * w + i];
      y[p] = static_cast<T>(acc / static_cast<double>(h * w));
    }
    if (!should_record<T>({input})) return out;
    auto xi = input.impl();
    auto yi = out.impl();
    record<T>(out, {input}, [xi, yi, planes, area = h * w] {
      T* dx = xi->grad_buffer();
      if (!dx) return;
      for (std::int64_t p = 0; p < planes; ++p) {
        const T g = static_cast<T>(yi->grad[p] / static_cast<double>(area));
        for (std::int64_t i = 0; i < area; ++i) dx[p * area + i] += g;
      }
    });
    return out;
  }

  if (params.kernel < 1 || params.stride < 1 || params.padding < 0) {
    throw GeometryError("pool2d: kernel and stride must be >= 1, padding >= 0");
  }
  if (params.kernel > h || params.kernel > w) {
    throw GeometryError("pool2d: kernel " + std::to_string(params.kernel) + " larger than spatial extent " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
  if (2 * params.padding > params.kernel) throw GeometryError("pool2d: padding exceeds half the kernel");
  const auto oh = window_output_size(h, params.kernel, params.stride, params.padding);
  const auto ow = window_output_size(w, params.kernel, params.stride, params.padding);
  if (oh <= 0 || ow <= 0) throw GeometryError("pool2d: empty output for input " + shape_str(input.shape()));

  auto out = Tensor<T>::zeros({n, channels, oh, ow});
  T* y = out.mutable_data().data();
  const int k = params.kernel;
  const int stride = params.stride;
  const int pad = params.padding;

  if (params.mode == PoolMode::Max) {
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(planes * oh * ow));
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* plane = x + p * h * w;
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
          std::int64_t best = -1;
          T best_value = 0;
          for (int ki = 0; ki < k; ++ki) {
            const std::int64_t r = i * stride - pad + ki;
            if (r < 0 || r >= h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const std::int64_t c = j * stride - pad + kj;
              if (c < 0 || c >= w) continue;
              const T v = plane[r * w + c];
              if (best < 0 || v > best_value || std::isnan(v)) {
                best = r * w + c;
                best_value = v;
              }
            }
          }
          const std::int64_t o = (p * oh + i) * ow + j;
          y[o] = best_value;
          argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
    if (!should_record<T>({input})) return out;
    auto xi = input.impl();
    auto yi = out.impl();
    record<T>(out, {input}, [xi, yi, argmax = std::move(argmax), planes, hw = h * w, ohw = oh * ow] {
      T* dx = xi->grad_buffer();
      if (!dx) return;
      for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t o = 0; o < ohw; ++o) {
          dx[p * hw + argmax[static_cast<std::size_t>(p * ohw + o)]] += yi->grad[static_cast<std::size_t>(p * ohw + o)];
        }
      }
    });
    return out;
  }

  // Average: padded positions count toward the divisor.
  const double divisor = static_cast<double>(k) * k;
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* plane = x + p * h * w;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        double acc = 0;
        for (int ki = 0; ki < k; ++ki) {
          const std::int64_t r = i * stride - pad + ki;
          if (r < 0 || r >= h) continue;
          for (int kj = 0; kj < k; ++kj) {
            const std::int64_t c = j * stride - pad + kj;
            if (c >= 0 && c < w) acc += plane[r * w + c];
          }
        }
        y[(p * oh + i) * ow + j] = static_cast<T>(acc / divisor);
      }
    }
  }
  if (!should_record<T>({input})) return out;
  auto xi = input.impl();
  auto yi = out.impl();
  record<T>(out, {input}, [xi, yi, planes, h, w, oh, ow, k, stride, pad, divisor] {
    T* dx = xi->grad_buffer();
    if (!dx) return;
    for (std::int64_t p = 0; p < planes; ++p) {
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
          const T g = static_cast<T>(yi->grad[static_cast<std::size_t>((p * oh + i) * ow + j)] / divisor);
          for (int ki = 0; ki < k; ++ki) {
            const std::int64_t r = i * stride - pad + ki;
            if (r < 0 || r >= h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const std::int64_t c = j * stride - pad + kj;
              if (c >= 0 && c < w) dx[p * h * w + r * w + c] += g;
            }
          }
        }
      }
    }
  });
  return out;
}

// ---- concat / slice -------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: empty input list");
  const auto& first = inputs.front();
  require_rank(first, 4, "concat_channels", "input");
  const auto n = first.dim(0);
  const auto h = first.dim(2);
  const auto w = first.dim(3);
  std::int64_t total = 0;
  for (const auto& t : inputs) {
    require_rank(t, 4, "concat_channels", "input");
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: " + shape_str(t.shape()) + " does not match " + shape_str(first.shape()) +
                       " outside the channel axis");
    }
    total += t.dim(1);
  }
  auto out = Tensor<T>::zeros({n, total, h, w});
  T* y = out.mutable_data().data();
  const std::int64_t plane = h * w;
  for (std::int64_t s = 0; s < n; ++s) {
    std::int64_t offset = 0;
    for (const auto& t : inputs) {
      const auto c = t.dim(1);
      const T* src = t.data().data() + s * c * plane;
      std::copy(src, src + c * plane, y + (s * total + offset) * plane);
      offset += c;
    }
  }
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;

  std::vector<detail::ImplPtr<T>> impls;
  impls.reserve(inputs.size());
  for (const auto& t : inputs) impls.push_back(t.impl());
  auto yi = out.impl();
  record<T>(out, inputs, [impls, yi, n, total, plane] {
    for (std::int64_t s = 0; s < n; ++s) {
      std::int64_t offset = 0;
      for (const auto& xi : impls) {
        const auto c = xi->shape[1];
        if (T* dx = xi->grad_buffer()) {
          const T* src = yi->grad.data() + (s * total + offset) * plane;
          T* dst = dx + s * c * plane;
          for (std::int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
        offset += c;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t begin, std::int64_t end) {
  require_rank(input, 4, "slice_channels", "input");
  const auto n = input.dim(0);
  const auto channels = input.dim(1);
  if (begin < 0 || end > channels || begin >= end) {
    throw BoundsError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                      ") invalid for " + std::to_string(channels) + " channels");
  }
  const std::int64_t plane = input.dim(2) * input.dim(3);
  const std::int64_t width = end - begin;
  auto out = Tensor<T>::zeros({n, width, input.dim(2), input.dim(3)});
  T* y = out.mutable_data().data();
  for (std::int64_t s = 0; s < n; ++s) {
    const T* src = input.data().data() + (s * channels + begin) * plane;
    std::copy(src, src + width * plane, y + s * width * plane);
  }
  if (!should_record<T>({input})) return out;
  auto xi = input.impl();
  auto yi = out.impl();
  record<T>(out, {input}, [xi, yi, n, channels, begin, width, plane] {
    T* dx = xi->grad_buffer();
    if (!dx) return;
    for (std::int64_t s = 0; s < n; ++s) {
      const T* src = yi->grad.data() + s * width * plane;
      T* dst = dx + (s * channels + begin) * plane;
      for (std::int64_t i = 0; i < width * plane; ++i) dst[i] += src[i];
    }
  });
  return out;
}

// ---- linear -------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const auto n = input.dim(0);
  const auto features = input.dim(1);
  const auto outputs = weight.dim(0);
  if (weight.dim(1) != features) {
    throw ShapeError("linear: input has " + std::to_string(features) + " features but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != outputs)) {
    throw ShapeError("linear: bias shape " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(outputs) + " outputs");
  }
  auto out = Tensor<T>::zeros({n, outputs});
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  T* y = out.mutable_data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t d = 0; d < outputs; ++d) {
      T acc = bias ? bias->data()[d] : T(0);
      for (std::int64_t f = 0; f < features; ++f) acc += x[i * features + f] * wt[d * features + f];
      y[i * outputs + d] = acc;
    }
  }
  std::vector<Tensor<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  if (!should_record<T>({input, weight}) && !(bias && bias->requires_grad())) return out;

  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias ? bias->impl() : nullptr;
  auto yi = out.impl();
  record<T>(out, inputs, [xi, wi, bi, yi, n, features, outputs] {
    const T* dy = yi->grad.data();
    if (T* dx = xi->grad_buffer()) {
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t d = 0; d < outputs; ++d) {
          const T g = dy[i * outputs + d];
          for (std::int64_t f = 0; f < features; ++f) dx[i * features + f] += g * wi->data[d * features + f];
        }
      }
    }
    if (T* dw = wi->grad_buffer()) {
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t d = 0; d < outputs; ++d) {
          const T g = dy[i * outputs + d];
          for (std::int64_t f = 0; f < features; ++f) dw[d * features + f] += g * xi->data[i * features + f];
        }
      }
    }
    if (T* db = bi ? bi->grad_buffer() : nullptr) {
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t d = 0; d < outputs; ++d) db[d] += dy[i * outputs + d];
      }
    }
  });
  return out;
}

// ---- elementwise / reductions -------------------------------------------------

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  auto out = Tensor<T>::zeros(input.shape());
  const auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      y[i] = e / (T(1) + e);
    }
  }
  if (!should_record<T>({input})) return out;
  auto xi = input.impl();
  auto yi = out.impl();
  record<T>(out, {input}, [xi, yi] {
    T* dx = xi->grad_buffer();
    if (!dx) return;
    for (std::size_t i = 0; i < yi->data.size(); ++i) {
      const T s = yi->data[i];
      dx[i] += yi->grad[i] * s * (T(1) - s);
    }
  });
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& input) {
  if (input.ndim() < 1) throw ShapeError("flatten: rank-0 input");
  const auto n = input.dim(0);
  const auto rest = n == 0 ? 0 : static_cast<std::int64_t>(input.numel()) / n;
  return input.reshape({n, rest});
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  double acc = 0;
  for (T v : input.data()) acc += v;
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  if (!should_record<T>({input})) return out;
  auto xi = input.impl();
  auto yi = out.impl();
  record<T>(out, {input}, [xi, yi] {
    T* dx = xi->grad_buffer();
    if (!dx) return;
    for (std::size_t i = 0; i < xi->data.size(); ++i) dx[i] += yi->grad[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& input) {
  if (input.numel() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0;
  for (T v : input.data()) acc += v;
  const double count = static_cast<double>(input.numel());
  auto out = Tensor<T>::scalar(static_cast<T>(acc / count));
  if (!should_record<T>({input})) return out;
  auto xi = input.impl();
  auto yi = out.impl();
  record<T>(out, {input}, [xi, yi, count] {
    T* dx = xi->grad_buffer();
    if (!dx) return;
    const T g = static_cast<T>(yi->grad[0] / count);
    for (std::size_t i = 0; i < xi->data.size(); ++i) dx[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto out = Tensor<T>::zeros(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  if (!should_record<T>({a, b})) return out;
  auto ai = a.impl();
  auto bi = b.impl();
  auto yi = out.impl();
  record<T>(out, {a, b}, [ai, bi, yi] {
    // Both buffers are fetched first so mul(x, x) accumulates twice into one buffer.
    T* da = ai->grad_buffer();
    T* db = bi->grad_buffer();
    for (std::size_t i = 0; i < yi->grad.size(); ++i) {
      const T g = yi->grad[i];
      if (da) da[i] += g * bi->data[i];
      if (db) db[i] += g * ai->data[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto out = Tensor<T>::zeros(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  if (!should_record<T>({a, b})) return out;
  auto ai = a.impl();
  auto bi = b.impl();
  auto yi = out.impl();
  record<T>(out, {a, b}, [ai, bi, yi] {
    T* da = ai->grad_buffer();
    T* db = bi->grad_buffer();
    for (std::size_t i = 0; i < yi->grad.size(); ++i) {
      if (da) da[i] += yi->grad[i];
      if (db) db[i] += yi->grad[i];
    }
  });
  return out;
}

#define CTDENSE_INSTANTIATE(T)                                                                                    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&, Conv2dParams); \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,  \
                                    BatchNormParams);                                                             \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> pool2d<T>(const Tensor<T>&, Pool2dParams);                                                   \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                                           \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::int64_t, std::int64_t);                             \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);              \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                                \
  template Tensor<T> flatten<T>(const Tensor<T>&);                                                                \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                    \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);

CTDENSE_INSTANTIATE(float)
CTDENSE_INSTANTIATE(double)

#undef CTDENSE_INSTANTIATE

}  // namespace ctdense
