#include "icsinet/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

namespace icsinet {

void ModelConfig::validate() const {
  if (depth < 1) throw ConfigError("model.depth must be at least 1");
  if (channels.size() != depth + 1) {
    throw ConfigError("model.channels needs depth + 1 = " + std::to_string(depth + 1) + " entries, got " +
                      std::to_string(channels.size()));
  }
  for (auto c : channels) {
    if (c == 0) throw ConfigError("model.channels entries must be positive");
  }
  if (input_size == 0 || input_size % (std::size_t{1} << depth) != 0) {
    throw ConfigError("model.input_size " + std::to_string(input_size) + " is not divisible by 2^depth = " +
                      std::to_string(std::size_t{1} << depth));
  }
  if (seg_classes == 0) throw ConfigError("model.seg_classes must be positive");
}

namespace {

// He-uniform: U(-b, b) with b = sqrt(6 / fan_in). Draws are made in double so
// float and double models built from one seed hold the same values.
template <typename T>
void he_uniform(ConvParams<T>& p, std::mt19937_64& rng) {
  const double fan_in = double(p.in_channels() * p.kernel() * p.kernel());
  const double bound = std::sqrt(6.0 / fan_in);
  for (auto& w : p.weight.data()) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    w = T((2.0 * u - 1.0) * bound);
  }
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const auto& ch = cfg_.channels;
  auto conv = [&rng](std::size_t in, std::size_t out, std::size_t k) {
    auto p = ConvParams<T>::create(in, out, k);
    he_uniform(p, rng);
    return p;
  };

  for (std::size_t i = 0; i <= cfg_.depth; ++i) {
    const std::size_t in = i == 0 ? 1 : ch[i - 1];
    EncoderLevel level;
    level.conv1 = conv(in, ch[i], 3);
    level.conv2 = conv(ch[i], ch[i], 3);
    level.bn = BatchNormParams<T>::create(ch[i]);
    encoder_.push_back(std::move(level));
  }
  for (std::size_t j = 1; j <= cfg_.depth; ++j) {
    for (std::size_t i = 0; i + j <= cfg_.depth; ++i) {
      DecoderNode node;
      node.level = i;
      node.column = j;
      node.up_conv1 = conv(ch[i + 1], ch[i], 3);
      node.up_conv2 = conv(ch[i], ch[i], 3);
      node.conv1 = conv(ch[i] * j + ch[i], ch[i], 3);
      node.conv2 = conv(ch[i], ch[i], 3);
      node.bn = BatchNormParams<T>::create(ch[i]);
      decoder_.push_back(std::move(node));
    }
  }
  seg_head_ = conv(ch[0], cfg_.seg_classes, 3);
  needle_head_ = conv(ch[cfg_.depth], 1, 1);
}

template <typename T>
void Model<T>::check_input(const Tensor<T>& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.input_size || s[3] != cfg_.input_size) {
    throw ShapeError("model input must be [N,1," + std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "], got " + shape_str(s));
  }
}

template <typename T>
std::vector<Tensor<T>> Model<T>::run_encoder(const Tensor<T>& x, Mode mode) {
  check_input(x);
  std::vector<Tensor<T>> levels;
  Tensor<T> h = x;
  for (std::size_t i = 0; i <= cfg_.depth; ++i) {
    auto& L = encoder_[i];
    if (i > 0) h = maxpool2x2(levels.back());
    h = relu(conv2d(h, L.conv1));
    h = relu(conv2d(h, L.conv2));
    levels.push_back(batchnorm2d(h, L.bn, mode));
  }
  return levels;
}

template <typename T>
Tensor<T> Model<T>::encode(const Tensor<T>& x, Mode mode) {
  return run_encoder(x, mode).back();
}

template <typename T>
ModelOutput<T> Model<T>::forward(const Tensor<T>& x, Mode mode) {
  const std::size_t depth = cfg_.depth;
  // grid[i][j] holds X(i, j).
  std::vector<std::vector<Tensor<T>>> grid(depth + 1);
  auto levels = run_encoder(x, mode);
  for (std::size_t i = 0; i <= depth; ++i) grid[i].push_back(levels[i]);

  for (auto& node : decoder_) {
    const std::size_t i = node.level, j = node.column;
    auto u = upsample_bilinear2x(grid[i + 1][j - 1]);
    u = relu(conv2d(u, node.up_conv1));
    u = relu(conv2d(u, node.up_conv2));
    std::vector<Tensor<T>> parts(grid[i].begin(), grid[i].begin() + static_cast<long>(j));
    parts.push_back(u);
    auto cat = concat_channels(parts);
    if (cat.dim(1) != cfg_.channels[i] * j + cfg_.channels[i]) {
      throw ContractError("decoder node X(" + std::to_string(i) + "," + std::to_string(j) +
                          ") concatenation width mismatch: " + shape_str(cat.shape()));
    }
    auto h = relu(conv2d(cat, node.conv1));
    h = relu(conv2d(h, node.conv2));
    grid[i].push_back(batchnorm2d(h, node.bn, mode));
  }

  ModelOutput<T> out;
  out.seg.values = sigmoid(conv2d(grid[0][depth], seg_head_));
  out.heatmap = spatial_softmax(conv2d(grid[depth][0], needle_head_));
  out.coords = dsnt(out.heatmap);
  return out;
}

template <typename T>
std::vector<NamedParam<T>> Model<T>::parameters() const {
  std::vector<NamedParam<T>> out;
  auto add_conv = [&out](const std::string& prefix, const ConvParams<T>& p) {
    out.push_back({prefix + ".weight", p.weight});
    out.push_back({prefix + ".bias", p.bias});
  };
  auto add_bn = [&out](const std::string& prefix, const BatchNormParams<T>& p) {
    out.push_back({prefix + ".gamma", p.gamma});
    out.push_back({prefix + ".beta", p.beta});
  };
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string prefix = "enc" + std::to_string(i);
    add_conv(prefix + ".conv1", encoder_[i].conv1);
    add_conv(prefix + ".conv2", encoder_[i].conv2);
    add_bn(prefix + ".bn", encoder_[i].bn);
  }
  for (const auto& node : decoder_) {
    const std::string prefix = "dec" + std::to_string(node.level) + "_" + std::to_string(node.column);
    add_conv(prefix + ".up_conv1", node.up_conv1);
    add_conv(prefix + ".up_conv2", node.up_conv2);
    add_conv(prefix + ".conv1", node.conv1);
    add_conv(prefix + ".conv2", node.conv2);
    add_bn(prefix + ".bn", node.bn);
  }
  add_conv("seg_head", seg_head_);
  add_conv("needle_head", needle_head_);
  return out;
}

template <typename T>
std::vector<NamedBuffer<std::vector<T>>> Model<T>::buffers() {
  std::vector<NamedBuffer<std::vector<T>>> out;
  for (const auto& b : std::as_const(*this).buffers()) {
    out.push_back({b.name, const_cast<std::vector<T>*>(b.values)});
  }
  return out;
}

template <typename T>
std::vector<NamedBuffer<const std::vector<T>>> Model<T>::buffers() const {
  std::vector<NamedBuffer<const std::vector<T>>> out;
  auto add_bn = [&out](const std::string& prefix, const BatchNormParams<T>& p) {
    out.push_back({prefix + ".running_mean", &p.running_mean});
    out.push_back({prefix + ".running_var", &p.running_var});
  };
  for (std::size_t i = 0; i < encoder_.size(); ++i) add_bn("enc" + std::to_string(i) + ".bn", encoder_[i].bn);
  for (const auto& node : decoder_) {
    add_bn("dec" + std::to_string(node.level) + "_" + std::to_string(node.column) + ".bn", node.bn);
  }
  return out;
}

template <typename T>
std::size_t Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename To, typename From>
void copy_state(Model<To>& dst, const Model<From>& src) {
  auto dp = dst.parameters();
  const auto sp = src.parameters();
  if (dp.size() != sp.size()) throw ConfigError("copy_state: models have different layouts");
  for (std::size_t k = 0; k < dp.size(); ++k) {
    if (dp[k].name != sp[k].name || dp[k].tensor.shape() != sp[k].tensor.shape()) {
      throw ConfigError("copy_state: parameter mismatch at " + dp[k].name);
    }
    auto out = dp[k].tensor.data();
    const auto in = sp[k].tensor.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = To(in[i]);
  }
  auto db = dst.buffers();
  const auto sb = src.buffers();
  for (std::size_t k = 0; k < db.size(); ++k) {
    db[k].values->resize(sb[k].values->size());
    std::transform(sb[k].values->begin(), sb[k].values->end(), db[k].values->begin(),
                   [](From v) { return To(v); });
  }
}

template class Model<float>;
template class Model<double>;
template void copy_state<float, float>(Model<float>&, const Model<float>&);
template void copy_state<double, float>(Model<double>&, const Model<float>&);
template void copy_state<float, double>(Model<float>&, const Model<double>&);
template void copy_state<double, double>(Model<double>&, const Model<double>&);

}  // namespace icsinet
