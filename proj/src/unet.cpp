#include "mtlforge/unet.hpp"

#include <cmath>

#include "mtlforge/rng.hpp"

namespace mtlforge {

void UNetConfig::validate() const {
  if (levels < 2) throw TensorError("UNetConfig: levels must be >= 2");
  if (base_channels < 4) throw TensorError("UNetConfig: base_channels must be >= 4");
  if (num_classes < 2) throw TensorError("UNetConfig: num_classes must be >= 2");
  if (cls_hidden < 1) throw TensorError("UNetConfig: cls_hidden must be >= 1");
  if (input_size < 16 || (input_size & (input_size - 1)) != 0) {
    throw TensorError("UNetConfig: input_size must be a power of two >= 16, got " +
                      std::to_string(input_size));
  }
  if (input_size % (1 << levels) != 0) {
    throw TensorError("UNetConfig: input_size " + std::to_string(input_size) +
                      " not divisible by 2^levels");
  }
}

namespace {

Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.next_double(-bound, bound);
  return Tensor(std::move(shape), std::move(d), true);
}

Conv2dParams make_conv(int in_ch, int out_ch, int k, int pad, Rng& rng) {
  Conv2dParams p;
  p.weight = he_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng);
  p.bias = Tensor::zeros({out_ch}, true);
  p.stride = 1;
  p.padding = pad;
  return p;
}

}  // namespace

MultitaskNet MultitaskNet::build(const UNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MultitaskNet net;
  net.config_ = cfg;
  Rng rng(seed);

  auto reg = [&net](const std::string& name, const Tensor& t, std::vector<Tensor>& group) {
    group.push_back(t);
    net.named_params_.push_back({name, t});
  };
  auto reg_conv = [&reg](const std::string& prefix, const Conv2dParams& p,
                         std::vector<Tensor>& group) {
    reg(prefix + ".weight", p.weight, group);
    reg(prefix + ".bias", p.bias, group);
  };

  for (int i = 0; i < cfg.levels; ++i) {
    const int in_ch = i == 0 ? 1 : cfg.channels_at(i - 1);
    const int out_ch = cfg.channels_at(i);
    Block b;
    b.conv1 = make_conv(in_ch, out_ch, 3, 1, rng);
    b.conv2 = make_conv(out_ch, out_ch, 3, 1, rng);
    const std::string prefix = "enc" + std::to_string(i);
    reg_conv(prefix + ".conv1", b.conv1, net.encoder_params_);
    reg_conv(prefix + ".conv2", b.conv2, net.encoder_params_);
    net.encoder_.push_back(std::move(b));
  }

  for (int i = cfg.levels - 2; i >= 0; --i) {
    const int hi_ch = cfg.channels_at(i + 1);
    const int lo_ch = cfg.channels_at(i);
    DecoderStage st;
    const std::string prefix = "dec" + std::to_string(i);
    int merged = 0;
    if (cfg.use_up_conv) {
      st.up = make_conv(hi_ch, lo_ch, 3, 1, rng);
      reg_conv(prefix + ".up", st.up, net.decoder_params_);
      merged = 2 * lo_ch;
    } else {
      merged = hi_ch + lo_ch;
    }
    st.block.conv1 = make_conv(merged, lo_ch, 3, 1, rng);
    st.block.conv2 = make_conv(lo_ch, lo_ch, 3, 1, rng);
    reg_conv(prefix + ".conv1", st.block.conv1, net.decoder_params_);
    reg_conv(prefix + ".conv2", st.block.conv2, net.decoder_params_);
    net.decoder_.push_back(std::move(st));
  }
  net.depth_head_ = make_conv(cfg.base_channels, 1, 1, 0, rng);
  reg_conv("depth_head", net.depth_head_, net.decoder_params_);

  const int cb = cfg.bottleneck_channels();
  net.cls_w1_ = he_uniform({cb, cfg.cls_hidden}, cb, rng);
  net.cls_b1_ = Tensor::zeros({cfg.cls_hidden}, true);
  net.cls_w2_ = he_uniform({cfg.cls_hidden, cfg.num_classes}, cfg.cls_hidden, rng);
  net.cls_b2_ = Tensor::zeros({cfg.num_classes}, true);
  reg("cls.fc1.weight", net.cls_w1_, net.cls_params_);
  reg("cls.fc1.bias", net.cls_b1_, net.cls_params_);
  reg("cls.fc2.weight", net.cls_w2_, net.cls_params_);
  reg("cls.fc2.bias", net.cls_b2_, net.cls_params_);

  return net;
}

Tensor MultitaskNet::run_block(const Block& b, const Tensor& x, Tape* tape) const {
  Tensor h = relu(conv2d(x, b.conv1, tape), tape);
  return relu(conv2d(h, b.conv2, tape), tape);
}

MultitaskNet::Output MultitaskNet::forward(const Tensor& x, Tape* tape, Head head) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != config_.input_size ||
      x.dim(3) != config_.input_size) {
    throw TensorError("forward: expected [B,1," + std::to_string(config_.input_size) + "," +
                      std::to_string(config_.input_size) + "], got " + shape_str(x.shape()));
  }

  std::vector<Tensor> skips;
  Tensor h = x;
  for (int i = 0; i < config_.levels; ++i) {
    h = run_block(encoder_[static_cast<std::size_t>(i)], h, tape);
    if (i < config_.levels - 1) {
      skips.push_back(h);
      h = max_pool2d(h, tape).output;
    }
  }
  const Tensor bottleneck = h;

  Output out;
  if (head != Head::classification) {
    Tensor d = bottleneck;
    for (std::size_t s = 0; s < decoder_.size(); ++s) {
      const DecoderStage& st = decoder_[s];
      d = upsample_nn(d, 2, tape);
      if (config_.use_up_conv) d = conv2d(d, st.up, tape);
      const Tensor& skip = skips[skips.size() - 1 - s];
      d = run_block(st.block, concat_channels(d, skip, tape), tape);
    }
    out.depth = conv2d(d, depth_head_, tape);
  }
  if (head != Head::depth) {
    Tensor f = global_avg_pool(bottleneck, tape);
    Tensor hidden = relu(linear(f, cls_w1_, cls_b1_, tape), tape);
    out.logits = linear(hidden, cls_w2_, cls_b2_, tape);
  }
  return out;
}

Tensor MultitaskNet::bottleneck_features(const Tensor& x, Tape* tape) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != config_.input_size ||
      x.dim(3) != config_.input_size) {
    throw TensorError("bottleneck_features: bad input shape " + shape_str(x.shape()));
  }
  Tensor h = x;
  for (int i = 0; i < config_.levels; ++i) {
    h = run_block(encoder_[static_cast<std::size_t>(i)], h, tape);
    if (i < config_.levels - 1) h = max_pool2d(h, tape).output;
  }
  return global_avg_pool(h, tape);
}

std::vector<Tensor> MultitaskNet::all_params() const {
  std::vector<Tensor> all;
  all.reserve(named_params_.size());
  for (const NamedTensor& nt : named_params_) all.push_back(nt.tensor);
  return all;
}

std::size_t MultitaskNet::param_count() const {
  std::size_t n = 0;
  for (const NamedTensor& nt : named_params_) n += nt.tensor.numel();
  return n;
}

void MultitaskNet::load_param(const std::string& name, const std::vector<double>& values) {
  for (NamedTensor& nt : named_params_) {
    if (nt.name == name) {
      if (nt.tensor.numel() != values.size()) {
        throw TensorError("load_param: size mismatch for " + name);
      }
      nt.tensor.mutable_data() = values;
      return;
    }
  }
  throw TensorError("load_param: unknown parameter " + name);
}

}  // namespace mtlforge
