#pragma once

#include <memory>
#include <vector>

#include "mtlforge/tensor.hpp"

namespace mtlforge {

// 2-D convolution parameters. weight is [out_ch, in_ch, kh, kw], bias [out_ch].
struct Conv2dParams {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;
};

// Per-class loss weights for the classification task.
struct ClassWeights {
  std::vector<double> weights;
};

// w_c = total / (C * max(count_c, 1)); balanced counts give all-ones.
ClassWeights compute_class_weights(const std::vector<long>& counts);

// Cross-correlation (no kernel flip) plus bias. x is [B,Cin,H,W], output
// [B,Cout,H',W'] with H' = floor((H + 2*padding - kh)/stride) + 1. Per output
// element the reduction runs over (ci, ki, kj) ascending with the accumulator
// seeded by the bias; padded positions contribute nothing.
Tensor conv2d(const Tensor& x, const Conv2dParams& p, Tape* tape = nullptr);

struct PoolResult {
  Tensor output;
  std::shared_ptr<const std::vector<int>> argmax;  // flat input index per output element
};

// 2x2 max pooling, stride 2. Ties break to the first element in row-major
// window scan; backward routes gradient only to the stored argmax positions.
PoolResult max_pool2d(const Tensor& x, Tape* tape = nullptr);

// Nearest-neighbor upsampling by an integer factor; each pixel becomes a
// factor x factor block. Backward sums the block gradients.
Tensor upsample_nn(const Tensor& x, int factor = 2, Tape* tape = nullptr);

// Channel concatenation of [B,C1,H,W] and [B,C2,H,W].
Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// x[B,In] * w[In,Out] + bias[Out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias, Tape* tape = nullptr);

// Mean over spatial positions: [B,C,H,W] -> [B,C].
Tensor global_avg_pool(const Tensor& x, Tape* tape = nullptr);

// Mean over the batch of w[y] * (-log softmax(logits)[y]); softmax uses
// max-subtraction. labels are class ids in [0, C).
Tensor weighted_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                              const ClassWeights& w, Tape* tape = nullptr);

// Mean of squared differences over every element.
Tensor mse_loss(const Tensor& pred, const Tensor& target, Tape* tape = nullptr);

// Row-wise stable softmax of a [B,C] tensor (evaluation helper, not recorded).
Tensor softmax_rows(const Tensor& logits);

// Every differentiable op kind the engine registers on tapes.
const std::vector<const char*>& all_op_kinds();

}  // namespace mtlforge
