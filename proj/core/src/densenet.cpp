#include "ctdense/densenet.hpp"

#include <cmath>

#include "ctdense/errors.hpp"
#include "ctdense/ops.hpp"
#include "ctdense/rng.hpp"

namespace ctdense {

namespace {

constexpr int kStemKernel = 7;
constexpr int kStemStride = 2;
constexpr int kStemPadding = 3;
constexpr int kStemPoolKernel = 3;
constexpr int kStemPoolStride = 2;
constexpr int kStemPoolPadding = 1;
constexpr int kTransitionPool = 2;

std::int64_t transition_width(double compression, std::int64_t channels) {
  return static_cast<std::int64_t>(std::floor(compression * static_cast<double>(channels)));
}

// Width of a block's output given its entry width and layer count.
std::int64_t block_exit_width(const DenseNetConfig& c, std::int64_t entry, int layers) {
  if (c.connectivity == Connectivity::Dense) return entry + static_cast<std::int64_t>(layers) * c.growth_rate;
  return layers > 0 ? c.growth_rate : entry;
}

std::int64_t layer_input_width(const DenseNetConfig& c, std::int64_t entry, int layer_index) {
  if (c.connectivity == Connectivity::Dense) return entry + static_cast<std::int64_t>(layer_index) * c.growth_rate;
  return layer_index == 0 ? entry : c.growth_rate;
}

}  // namespace

// ---- configuration ------------------------------------------------------------

DenseNetConfig DenseNetConfig::densenet121() {
  DenseNetConfig c;
  c.name = "densenet121";
  c.block_layers = {6, 12, 24, 16};
  return c;
}

DenseNetConfig DenseNetConfig::densenet169() {
  DenseNetConfig c;
  c.name = "densenet169";
  c.block_layers = {6, 12, 32, 32};
  return c;
}

DenseNetConfig DenseNetConfig::reduced() {
  DenseNetConfig c;
  c.name = "reduced";
  c.growth_rate = 8;
  c.init_features = 16;
  c.block_layers = {1, 2, 2, 1};
  c.input_size = 32;
  return c;
}

DenseNetConfig DenseNetConfig::preset(const std::string& name) {
  if (name == "densenet121") return densenet121();
  if (name == "densenet169") return densenet169();
  if (name == "reduced") return reduced();
  throw ConfigError("unknown model preset '" + name + "' (expected densenet121, densenet169 or reduced)");
}

void DenseNetConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (block_layers.size() != 4) fail("block_layers needs exactly 4 entries, got " + std::to_string(block_layers.size()));
  for (int n : block_layers) {
    if (n < 1) fail("block layer counts must be positive");
  }
  if (growth_rate < 1) fail("growth_rate must be positive");
  if (init_features < 1) fail("init_features must be positive");
  if (!(compression > 0.0 && compression <= 1.0)) fail("compression must lie in (0, 1]");
  if (bottleneck_width < 1) fail("bottleneck_width must be positive");
  if (num_outputs < 1) fail("num_outputs must be positive");
  if (input_channels < 1) fail("input_channels must be positive");
  if (input_size < 1) fail("input_size must be positive");
  if (!(bn_eps > 0.0)) fail("bn_eps must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must lie in (0, 1]");

  std::int64_t spatial = window_output_size(input_size, kStemKernel, kStemStride, kStemPadding);
  if (spatial < kStemPoolKernel) fail("input_size " + std::to_string(input_size) + " too small for the stem");
  spatial = window_output_size(spatial, kStemPoolKernel, kStemPoolStride, kStemPoolPadding);
  std::int64_t width = init_features;
  for (std::size_t b = 0; b < block_layers.size(); ++b) {
    width = block_exit_width(*this, width, block_layers[b]);
    if (b + 1 == block_layers.size()) break;
    width = transition_width(compression, width);
    if (width < 1) fail("compression leaves transition " + std::to_string(b + 1) + " with zero channels");
    if (spatial < kTransitionPool) fail("input_size " + std::to_string(input_size) + " too small for 4 blocks");
    spatial = window_output_size(spatial, kTransitionPool, kTransitionPool, 0);
  }
}

std::vector<PlanRow> feature_map_plan(const DenseNetConfig& config) {
  config.validate();
  std::vector<PlanRow> plan;
  std::int64_t spatial = window_output_size(config.input_size, kStemKernel, kStemStride, kStemPadding);
  std::int64_t width = config.init_features;
  plan.push_back({"conv", spatial, width});
  spatial = window_output_size(spatial, kStemPoolKernel, kStemPoolStride, kStemPoolPadding);
  plan.push_back({"pool", spatial, width});
  for (std::size_t b = 0; b < config.block_layers.size(); ++b) {
    width = block_exit_width(config, width, config.block_layers[b]);
    plan.push_back({"block" + std::to_string(b + 1), spatial, width});
    if (b + 1 == config.block_layers.size()) break;
    width = transition_width(config.compression, width);
    spatial = window_output_size(spatial, kTransitionPool, kTransitionPool, 0);
    plan.push_back({"transition" + std::to_string(b + 1), spatial, width});
  }
  plan.push_back({"classifier", 1, width});
  return plan;
}

int weighted_layer_count(const DenseNetConfig& config) {
  int dense = 0;
  for (int n : config.block_layers) dense += n;
  const int transitions = config.block_layers.empty() ? 0 : static_cast<int>(config.block_layers.size()) - 1;
  return 1 + 2 * dense + transitions + 1;
}

std::int64_t count_connections(std::int64_t num_layers) {
  if (num_layers < 1) throw ConfigError("count_connections: need at least one layer");
  return num_layers * (num_layers + 1) / 2;
}

// ---- model --------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> he_normal(Rng& rng, Shape shape, double variance_numerator) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double stddev = std::sqrt(variance_numerator / static_cast<double>(fan_in));
  std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
  auto t = Tensor<T>::from_vector(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
BatchNormLayer<T> make_norm(std::int64_t channels) {
  BatchNormLayer<T> bn{Tensor<T>::full({channels}, T(1)), Tensor<T>::zeros({channels}), Tensor<T>::zeros({channels}),
                       Tensor<T>::full({channels}, T(1))};
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  return bn;
}

template <typename T>
void push_norm_params(std::vector<NamedTensor<T>>& out, const std::string& prefix, const BatchNormLayer<T>& bn) {
  out.push_back({prefix + ".weight", bn.gamma});
  out.push_back({prefix + ".bias", bn.beta});
}

template <typename T>
void push_norm_buffers(std::vector<NamedTensor<T>>& out, const std::string& prefix, const BatchNormLayer<T>& bn) {
  out.push_back({prefix + ".running_mean", bn.running_mean});
  out.push_back({prefix + ".running_var", bn.running_var});
}

std::string layer_prefix(std::size_t block, std::size_t layer) {
  return "features.denseblock" + std::to_string(block + 1) + ".denselayer" + std::to_string(layer + 1);
}

std::string transition_prefix(std::size_t index) {
  return "features.transition" + std::to_string(index + 1);
}

}  // namespace

template <typename T>
DenseNet<T> DenseNet<T>::build(const DenseNetConfig& config, std::uint64_t seed) {
  config.validate();
  DenseNet model(config);
  Rng rng(seed);
  const std::int64_t k = config.growth_rate;
  const std::int64_t inner = static_cast<std::int64_t>(config.bottleneck_width) * k;

  // Draw order follows parameters() so the stream is stable.
  model.stem_conv_ = he_normal<T>(rng, {config.init_features, config.input_channels, kStemKernel, kStemKernel}, 2.0);
  model.stem_norm_ = make_norm<T>(config.init_features);

  std::int64_t width = config.init_features;
  for (std::size_t b = 0; b < config.block_layers.size(); ++b) {
    std::vector<DenseLayer<T>> block;
    for (int l = 0; l < config.block_layers[b]; ++l) {
      DenseLayer<T> layer;
      layer.in_channels = layer_input_width(config, width, l);
      layer.norm1 = make_norm<T>(layer.in_channels);
      layer.conv1 = he_normal<T>(rng, {inner, layer.in_channels, 1, 1}, 2.0);
      layer.norm2 = make_norm<T>(inner);
      layer.conv2 = he_normal<T>(rng, {k, inner, 3, 3}, 2.0);
      block.push_back(std::move(layer));
    }
    model.blocks_.push_back(std::move(block));
    width = block_exit_width(config, width, config.block_layers[b]);
    if (b + 1 == config.block_layers.size()) break;
    TransitionLayer<T> transition;
    transition.in_channels = width;
    transition.out_channels = transition_width(config.compression, width);
    transition.norm = make_norm<T>(width);
    transition.conv = he_normal<T>(rng, {transition.out_channels, width, 1, 1}, 2.0);
    model.transitions_.push_back(std::move(transition));
    width = model.transitions_.back().out_channels;
  }
  model.final_norm_ = make_norm<T>(width);
  model.fc_weight_ = he_normal<T>(rng, {config.num_outputs, width}, 1.0);
  model.fc_bias_ = Tensor<T>::zeros({config.num_outputs});
  model.fc_bias_.set_requires_grad(true);
  return model;
}

template <typename T>
Tensor<T> DenseNet<T>::norm_relu(const Tensor<T>& x, BatchNormLayer<T>& norm, Mode mode) const {
  BatchNormParams params{config_.bn_eps, config_.bn_momentum, mode == Mode::Train};
  return relu(batchnorm2d(x, norm.gamma, norm.beta, norm.running_mean, norm.running_var, params));
}

template <typename T>
Tensor<T> DenseNet<T>::forward(const Tensor<T>& batch, Mode mode, ForwardProbe* probe) {
  const auto size = static_cast<std::int64_t>(config_.input_size);
  if (batch.ndim() != 4 || batch.dim(1) != config_.input_channels || batch.dim(2) != size || batch.dim(3) != size) {
    throw ShapeError("densenet: expected input N x " + std::to_string(config_.input_channels) + " x " +
                     std::to_string(size) + " x " + std::to_string(size) + ", got " + shape_str(batch.shape()));
  }
  auto note = [probe](const std::string& stage, const Tensor<T>& t) {
    if (probe) probe->stages.push_back({stage, t.dim(2), t.dim(1)});
  };
  if (probe) {
    probe->stages.clear();
    probe->layer_inputs.assign(blocks_.size(), {});
  }

  auto x = conv2d<T>(batch, stem_conv_, std::nullopt, {kStemStride, kStemPadding});
  note("conv", x);
  x = norm_relu(x, stem_norm_, mode);
  x = pool2d(x, Pool2dParams{PoolMode::Max, kStemPoolKernel, kStemPoolStride, kStemPoolPadding});
  note("pool", x);

  const bool dense = config_.connectivity == Connectivity::Dense;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    std::vector<Tensor<T>> features{x};
    for (auto& layer : blocks_[b]) {
      Tensor<T> input = dense ? (features.size() == 1 ? features.front() : concat_channels(features)) : features.back();
      if (probe) probe->layer_inputs[b].push_back(input.dim(1));
      auto h = conv2d<T>(norm_relu(input, layer.norm1, mode), layer.conv1, std::nullopt, {1, 0});
      h = conv2d<T>(norm_relu(h, layer.norm2, mode), layer.conv2, std::nullopt, {1, 1});
      features.push_back(std::move(h));
    }
    x = dense ? concat_channels(features) : features.back();
    note("block" + std::to_string(b + 1), x);
    if (b < transitions_.size()) {
      auto& t = transitions_[b];
      x = conv2d<T>(norm_relu(x, t.norm, mode), t.conv, std::nullopt, {1, 0});
      x = pool2d(x, Pool2dParams{PoolMode::Average, kTransitionPool, kTransitionPool, 0});
      note("transition" + std::to_string(b + 1), x);
    }
  }

  x = norm_relu(x, final_norm_, mode);
  x = pool2d(x, Pool2dParams{PoolMode::GlobalAverage, 0, 0, 0});
  note("classifier", x);
  return linear<T>(flatten(x), fc_weight_, fc_bias_);
}

template <typename T>
std::vector<NamedTensor<T>> DenseNet<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"features.conv0.weight", stem_conv_});
  push_norm_params(out, "features.norm0", stem_norm_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t l = 0; l < blocks_[b].size(); ++l) {
      const auto& layer = blocks_[b][l];
      const auto prefix = layer_prefix(b, l);
      push_norm_params(out, prefix + ".norm1", layer.norm1);
      out.push_back({prefix + ".conv1.weight", layer.conv1});
      push_norm_params(out, prefix + ".norm2", layer.norm2);
      out.push_back({prefix + ".conv2.weight", layer.conv2});
    }
    if (b < transitions_.size()) {
      push_norm_params(out, transition_prefix(b) + ".norm", transitions_[b].norm);
      out.push_back({transition_prefix(b) + ".conv.weight", transitions_[b].conv});
    }
  }
  push_norm_params(out, "features.norm5", final_norm_);
  out.push_back({"classifier.weight", fc_weight_});
  out.push_back({"classifier.bias", fc_bias_});
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> DenseNet<T>::buffers() const {
  std::vector<NamedTensor<T>> out;
  push_norm_buffers(out, "features.norm0", stem_norm_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t l = 0; l < blocks_[b].size(); ++l) {
      const auto prefix = layer_prefix(b, l);
      push_norm_buffers(out, prefix + ".norm1", blocks_[b][l].norm1);
      push_norm_buffers(out, prefix + ".norm2", blocks_[b][l].norm2);
    }
    if (b < transitions_.size()) push_norm_buffers(out, transition_prefix(b) + ".norm", transitions_[b].norm);
  }
  push_norm_buffers(out, "features.norm5", final_norm_);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> DenseNet<T>::state() const {
  auto out = parameters();
  for (auto& b : buffers()) out.push_back(std::move(b));
  return out;
}

template <typename T>
void DenseNet<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template class DenseNet<float>;
template class DenseNet<double>;

}  // namespace ctdense
