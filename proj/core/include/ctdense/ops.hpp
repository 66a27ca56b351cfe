#pragma once

// Differentiable operators over NCHW tensors.
//
// Every operator has an analytic backward rule recorded on the active tape.
// Reductions run in a fixed order, so repeated calls are bit-identical.

#include <optional>
#include <vector>

#include "ctdense/tensor.hpp"

namespace ctdense {

struct Conv2dParams {
  int stride = 1;
  int padding = 0;
};

// input N×C×H×W, weight O×C×kh×kw, optional bias O -> N×O×H'×W'.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 Conv2dParams params);

struct BatchNormParams {
  double eps = 1e-5;
  double momentum = 0.1;
  bool training = true;
};

// Per-channel batch normalization.
//
// Training mode normalizes with the biased batch variance and folds the batch
// statistics into the running buffers (unbiased variance):
//   running = (1 - momentum) * running + momentum * batch.
// Evaluation mode normalizes with the running buffers and leaves them alone.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, BatchNormParams params);

// max(x, 0); the gradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& input);

enum class PoolMode { Max, Average, GlobalAverage };

struct Pool2dParams {
  PoolMode mode = PoolMode::Max;
  int kernel = 2;
  int stride = 2;
  // Max mode only: padded positions never win.
  int padding = 0;
};

// Max ties route the gradient to the first maximum in scan order.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& input, Pool2dParams params);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs);

// Channels [begin, end) of an N×C×H×W tensor; inverse of concat_channels.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t begin, std::int64_t end);

// input N×F, weight D×F, optional bias D -> N×D.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias);

// Overflow-safe logistic function.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

// N×C×1×1 (or any N×...) -> N×F.
template <typename T>
Tensor<T> flatten(const Tensor<T>& input);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

template <typename T>
Tensor<T> mean(const Tensor<T>& input);

// Elementwise product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// Output spatial extent of a sliding window: floor((in + 2p - k) / s) + 1.
// Returns a value <= 0 when the window does not fit.
std::int64_t window_output_size(std::int64_t in, int kernel, int stride, int padding);

}  // namespace ctdense
