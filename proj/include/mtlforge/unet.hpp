#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtlforge/nn_ops.hpp"
#include "mtlforge/tensor.hpp"

namespace mtlforge {

struct UNetConfig {
  int levels = 3;         // encoder depth; the last block is the bottleneck
  int base_channels = 8;  // channels at level 0, doubled per level
  int input_size = 32;    // square single-channel input, power of two >= 16
  int num_classes = 10;
  int cls_hidden = 64;    // width of the hidden fully connected layer
  bool use_up_conv = true;  // 3x3 conv after each nearest-neighbor upsample

  int channels_at(int level) const { return base_channels << level; }
  int bottleneck_channels() const { return channels_at(levels - 1); }
  void validate() const;  // throws TensorError on violation

  bool operator==(const UNetConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// U-Net with a shared encoder, a depth-regression decoder, and a fully
// connected classification branch fed from the globally averaged bottleneck.
class MultitaskNet {
 public:
  enum class Head { both, classification, depth };

  struct Output {
    Tensor depth;   // [B,1,S,S] (undefined when head == classification)
    Tensor logits;  // [B,num_classes] (undefined when head == depth)
  };

  // He-uniform weights drawn from the seed in registration order, zero biases.
  static MultitaskNet build(const UNetConfig& cfg, std::uint64_t seed);

  Output forward(const Tensor& x, Tape* tape = nullptr, Head head = Head::both) const;

  // Globally averaged bottleneck activation, [B, bottleneck_channels].
  Tensor bottleneck_features(const Tensor& x, Tape* tape = nullptr) const;

  const UNetConfig& config() const { return config_; }
  const std::vector<Tensor>& encoder_params() const { return encoder_params_; }
  const std::vector<Tensor>& decoder_params() const { return decoder_params_; }
  const std::vector<Tensor>& cls_params() const { return cls_params_; }
  std::vector<Tensor> all_params() const;
  const std::vector<NamedTensor>& named_params() const { return named_params_; }
  std::size_t param_count() const;

  // Copies values into the parameter with the given name; shape must match.
  void load_param(const std::string& name, const std::vector<double>& values);

 private:
  MultitaskNet() = default;

  struct Block {
    Conv2dParams conv1;
    Conv2dParams conv2;
  };
  struct DecoderStage {
    Conv2dParams up;  // used only when config.use_up_conv
    Block block;
  };

  Tensor run_block(const Block& b, const Tensor& x, Tape* tape) const;

  UNetConfig config_;
  std::vector<Block> encoder_;
  std::vector<DecoderStage> decoder_;
  Conv2dParams depth_head_;  // 1x1 conv to one channel
  Tensor cls_w1_, cls_b1_, cls_w2_, cls_b2_;

  std::vector<Tensor> encoder_params_, decoder_params_, cls_params_;
  std::vector<NamedTensor> named_params_;
};

}  // namespace mtlforge
