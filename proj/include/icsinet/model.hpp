#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "icsinet/nn_ops.hpp"
#include "icsinet/tensor.hpp"

namespace icsinet {

struct ModelConfig {
  std::size_t input_size = 512;
  std::size_t depth = 3;  // number of 2x2 poolings
  std::vector<std::size_t> channels{32, 64, 128, 256};
  std::size_t seg_classes = 2;  // oolemma, pipette
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t bottleneck_size() const { return input_size >> depth; }
};

/// Per-class sigmoid masks [N, classes, S, S].
template <typename T>
struct SegMasks {
  Tensor<T> values;
};

template <typename T>
struct ModelOutput {
  SegMasks<T> seg;
  Heatmap<T> heatmap;
  TipCoords<T> coords;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Non-trainable state (batchnorm running statistics). Vec is std::vector<T> or its const form.
template <typename Vec>
struct NamedBuffer {
  std::string name;
  Vec* values;
};

/// Multi-head nested U-Net.
///
/// Encoder level i applies two 3x3 conv + relu and a batchnorm; levels below
/// `depth` are followed by 2x2 max pooling. Decoder node X(i,j) upsamples
/// X(i+1,j-1), applies two conv + relu, concatenates X(i,0..j-1) in order with
/// that result, applies two more conv + relu and a batchnorm. The segmentation
/// head is a 3x3 conv + sigmoid on X(0,depth); the needle head is a 1x1 conv on
/// the bottleneck followed by spatial softmax and DSNT.
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  ModelOutput<T> forward(const Tensor<T>& x, Mode mode);
  /// Encoder only; returns the bottleneck activation X(depth, 0).
  Tensor<T> encode(const Tensor<T>& x, Mode mode);

  std::vector<NamedParam<T>> parameters() const;
  std::vector<NamedBuffer<std::vector<T>>> buffers();
  std::vector<NamedBuffer<const std::vector<T>>> buffers() const;
  std::size_t param_count() const;

 private:
  struct EncoderLevel {
    ConvParams<T> conv1, conv2;
    BatchNormParams<T> bn;
  };
  struct DecoderNode {
    std::size_t level = 0, column = 0;
    ConvParams<T> up_conv1, up_conv2, conv1, conv2;
    BatchNormParams<T> bn;
  };

  void check_input(const Tensor<T>& x) const;
  std::vector<Tensor<T>> run_encoder(const Tensor<T>& x, Mode mode);

  ModelConfig cfg_;
  std::vector<EncoderLevel> encoder_;
  std::vector<DecoderNode> decoder_;  // column-major order: j = 1..depth, then i
  ConvParams<T> seg_head_;
  ConvParams<T> needle_head_;
};

/// Total trainable scalars (conv weights and biases, batchnorm gamma and beta).
template <typename T>
std::size_t param_count(const Model<T>& m) {
  return m.param_count();
}

/// Copies parameters and running statistics between models of identical configuration.
template <typename To, typename From>
void copy_state(Model<To>& dst, const Model<From>& src);

}  // namespace icsinet
