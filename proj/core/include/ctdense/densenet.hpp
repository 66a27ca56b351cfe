#pragma once

// DenseNet-BC classifiers for single-channel CT slices.
//
//   stem:        7x7 conv s2 p3 -> BN -> ReLU -> 3x3 max pool s2 p1
//   dense block: L layers of BN -> ReLU -> 1x1 conv (bottleneck * k)
//                               -> BN -> ReLU -> 3x3 conv p1 (k maps),
//                each layer reading the concatenation of everything before it
//   transition:  BN -> ReLU -> 1x1 conv (floor(theta * C)) -> 2x2 avg pool s2
//   head:        BN -> ReLU -> global average pool -> fully connected

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ctdense/tensor.hpp"

namespace ctdense {

enum class Connectivity {
  Dense,  // every layer sees all earlier feature maps of its block
  Chain,  // every layer sees only the previous layer (ablation)
};

struct DenseNetConfig {
  std::string name = "custom";
  int growth_rate = 32;
  int init_features = 64;
  std::vector<int> block_layers{6, 12, 24, 16};
  double compression = 0.5;
  int bottleneck_width = 4;
  int num_outputs = 2;
  int input_channels = 1;
  int input_size = 224;
  Connectivity connectivity = Connectivity::Dense;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  static DenseNetConfig densenet121();
  static DenseNetConfig densenet169();
  // Small network for tests: blocks [1,2,2,1], k = 8, 32x32 input.
  static DenseNetConfig reduced();
  // "densenet121", "densenet169" or "reduced"; throws ConfigError otherwise.
  static DenseNetConfig preset(const std::string& name);

  // Throws ConfigError on any violated invariant, including a compression
  // that leaves a transition with zero channels.
  void validate() const;

  bool operator==(const DenseNetConfig&) const = default;
};

enum class Mode { Train, Eval };

struct PlanRow {
  std::string stage;
  std::int64_t spatial = 0;
  std::int64_t channels = 0;

  bool operator==(const PlanRow&) const = default;
};

// One row per stage of the architecture table: conv, pool, block1,
// transition1, ..., block4, classifier.
std::vector<PlanRow> feature_map_plan(const DenseNetConfig& config);

// 1 stem conv + 2 convs per dense layer + one conv per transition + 1 FC.
int weighted_layer_count(const DenseNetConfig& config);

// L(L+1)/2 direct connections in an L-layer densely connected stack.
std::int64_t count_connections(std::int64_t num_layers);

// Filled by forward() when passed in; records what the network actually did.
struct ForwardProbe {
  std::vector<PlanRow> stages;
  // layer_inputs[b][l] = channel width consumed by layer l of block b.
  std::vector<std::vector<std::int64_t>> layer_inputs;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
struct DenseLayer {
  std::int64_t in_channels = 0;
  BatchNormLayer<T> norm1;
  Tensor<T> conv1;  // (bottleneck * k) x in x 1 x 1
  BatchNormLayer<T> norm2;
  Tensor<T> conv2;  // k x (bottleneck * k) x 3 x 3
};

template <typename T>
struct TransitionLayer {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  BatchNormLayer<T> norm;
  Tensor<T> conv;
};

template <typename T>
class DenseNet {
 public:
  // Deterministic initialization from `seed`: conv and FC weights from
  // N(0, 2 / fan_in) and N(0, 1 / fan_in) respectively, BN gamma = 1,
  // beta = 0, running stats (0, 1), FC bias 0.
  static DenseNet build(const DenseNetConfig& config, std::uint64_t seed);

  const DenseNetConfig& config() const { return config_; }

  // batch: N x input_channels x input_size x input_size. Returns raw logits
  // N x num_outputs. Train mode updates BN running statistics.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode, ForwardProbe* probe = nullptr);

  // Trainable tensors in a stable order. Names follow the
  // features.denseblockB.denselayerL.* convention.
  std::vector<NamedTensor<T>> parameters() const;
  // BN running statistics, same naming scheme.
  std::vector<NamedTensor<T>> buffers() const;
  // parameters() followed by buffers(); this is what a checkpoint stores.
  std::vector<NamedTensor<T>> state() const;

  void zero_grad();

  const std::vector<std::vector<DenseLayer<T>>>& blocks() const { return blocks_; }
  const std::vector<TransitionLayer<T>>& transitions() const { return transitions_; }
  Tensor<T>& classifier_weight() { return fc_weight_; }
  Tensor<T>& classifier_bias() { return fc_bias_; }

 private:
  explicit DenseNet(DenseNetConfig config) : config_(std::move(config)) {}

  Tensor<T> norm_relu(const Tensor<T>& x, BatchNormLayer<T>& norm, Mode mode) const;

  DenseNetConfig config_;
  Tensor<T> stem_conv_;
  BatchNormLayer<T> stem_norm_;
  std::vector<std::vector<DenseLayer<T>>> blocks_;
  std::vector<TransitionLayer<T>> transitions_;
  BatchNormLayer<T> final_norm_;
  Tensor<T> fc_weight_;
  Tensor<T> fc_bias_;
};

// Exact number of trainable scalars (running statistics excluded).
template <typename T>
std::int64_t count_params(const DenseNet<T>& model) {
  std::int64_t total = 0;
  for (const auto& p : model.parameters()) total += static_cast<std::int64_t>(p.tensor.numel());
  return total;
}

}  // namespace ctdense
