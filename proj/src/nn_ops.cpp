#include "mtlforge/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

namespace mtlforge {

ClassWeights compute_class_weights(const std::vector<long>& counts) {
  if (counts.empty()) throw TensorError("compute_class_weights: empty counts");
  long total = 0;
  for (long c : counts) {
    if (c < 0) throw TensorError("compute_class_weights: negative count");
    total += c;
  }
  if (total <= 0) throw TensorError("compute_class_weights: total count is zero");
  const double c_classes = static_cast<double>(counts.size());
  ClassWeights w;
  w.weights.reserve(counts.size());
  for (long c : counts) {
    w.weights.push_back(static_cast<double>(total) / (c_classes * static_cast<double>(std::max(c, 1L))));
  }
  return w;
}

namespace {

void check_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4) {
    throw TensorError(std::string(op) + ": expected rank-4 input, got " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2dParams& p, Tape* tape) {
  check_rank4(x, "conv2d");
  check_rank4(p.weight, "conv2d weight");
  if (p.bias.rank() != 1 || p.bias.dim(0) != p.weight.dim(0)) {
    throw TensorError("conv2d: bias shape " + shape_str(p.bias.shape()) +
                      " does not match weight " + shape_str(p.weight.shape()));
  }
  if (p.stride < 1) throw TensorError("conv2d: stride must be >= 1");
  if (p.padding < 0) throw TensorError("conv2d: padding must be >= 0");
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = p.weight.dim(0), kh = p.weight.dim(2), kw = p.weight.dim(3);
  if (p.weight.dim(1) != Cin) {
    throw TensorError("conv2d: input channels " + std::to_string(Cin) +
                      " do not match weight in_ch " + std::to_string(p.weight.dim(1)));
  }
  const int s = p.stride, pad = p.padding;
  const int OH = (H + 2 * pad - kh) / s + 1;
  const int OW = (W + 2 * pad - kw) / s + 1;
  if (OH < 1 || OW < 1) {
    throw TensorError("conv2d: output size below 1 for input " + shape_str(x.shape()) +
                      " kernel " + shape_str(p.weight.shape()));
  }

  std::vector<double> out(static_cast<std::size_t>(B) * Cout * OH * OW);
  const double* xd = x.data().data();
  const double* wd = p.weight.data().data();
  const double* bd = p.bias.data().data();

  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Cout; ++co) {
      double* oplane = out.data() + (static_cast<std::size_t>(b) * Cout + co) * OH * OW;
      const double bias = bd[co];
      for (int i = 0; i < OH * OW; ++i) oplane[i] = bias;
      for (int ci = 0; ci < Cin; ++ci) {
        const double* xplane = xd + (static_cast<std::size_t>(b) * Cin + ci) * H * W;
        const double* wplane = wd + (static_cast<std::size_t>(co) * Cin + ci) * kh * kw;
        for (int ki = 0; ki < kh; ++ki) {
          for (int kj = 0; kj < kw; ++kj) {
            const double wv = wplane[ki * kw + kj];
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * s + ki - pad;
              if (ih < 0 || ih >= H) continue;
              const double* xrow = xplane + static_cast<std::size_t>(ih) * W;
              double* orow = oplane + static_cast<std::size_t>(oh) * OW;
              // iw = ow*s + kj - pad must land in [0, W)
              int ow_lo = 0, ow_hi = OW;
              while (ow_lo < OW && ow_lo * s + kj - pad < 0) ++ow_lo;
              while (ow_hi > ow_lo && (ow_hi - 1) * s + kj - pad >= W) --ow_hi;
              if (s == 1) {
                const double* xr = xrow + kj - pad;
                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * xr[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * xrow[ow * s + kj - pad];
              }
            }
          }
        }
      }
    }
  }

  Tensor r({B, Cout, OH, OW}, std::move(out));
  const bool need = tape && (x.requires_grad() || p.weight.requires_grad() || p.bias.requires_grad());
  if (need) {
    int ix = x.requires_grad() ? tape->watch(x) : -1;
    int iw = p.weight.requires_grad() ? tape->watch(p.weight) : -1;
    int ib = p.bias.requires_grad() ? tape->watch(p.bias) : -1;
    auto vx = x.shared_data();
    auto vw = p.weight.shared_data();
    auto fn = [ix, iw, ib, vx, vw, B, Cin, Cout, H, W, kh, kw, s, pad, OH,
               OW](Tape& t, const std::vector<double>& up) {
      const double* xd = vx->data();
      const double* wd = vw->data();
      if (ix >= 0) {
        std::vector<double>& dx = t.grad_buffer(ix);
        for (int b = 0; b < B; ++b) {
          for (int co = 0; co < Cout; ++co) {
            const double* uplane = up.data() + (static_cast<std::size_t>(b) * Cout + co) * OH * OW;
            for (int ci = 0; ci < Cin; ++ci) {
              double* dxplane = dx.data() + (static_cast<std::size_t>(b) * Cin + ci) * H * W;
              const double* wplane = wd + (static_cast<std::size_t>(co) * Cin + ci) * kh * kw;
              for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj) {
                  const double wv = wplane[ki * kw + kj];
                  for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * s + ki - pad;
                    if (ih < 0 || ih >= H) continue;
                    double* dxrow = dxplane + static_cast<std::size_t>(ih) * W;
                    const double* urow = uplane + static_cast<std::size_t>(oh) * OW;
                    int ow_lo = 0, ow_hi = OW;
                    while (ow_lo < OW && ow_lo * s + kj - pad < 0) ++ow_lo;
                    while (ow_hi > ow_lo && (ow_hi - 1) * s + kj - pad >= W) --ow_hi;
                    if (s == 1) {
                      double* dxr = dxrow + kj - pad;
                      for (int ow = ow_lo; ow < ow_hi; ++ow) dxr[ow] += wv * urow[ow];
                    } else {
                      for (int ow = ow_lo; ow < ow_hi; ++ow) {
                        dxrow[ow * s + kj - pad] += wv * urow[ow];
                      }
                    }
                  }
                }
              }
            }
          }
        }
      }
      if (iw >= 0) {
        std::vector<double>& dw = t.grad_buffer(iw);
        for (int b = 0; b < B; ++b) {
          for (int co = 0; co < Cout; ++co) {
            const double* uplane = up.data() + (static_cast<std::size_t>(b) * Cout + co) * OH * OW;
            for (int ci = 0; ci < Cin; ++ci) {
              const double* xplane = xd + (static_cast<std::size_t>(b) * Cin + ci) * H * W;
              double* dwplane = dw.data() + (static_cast<std::size_t>(co) * Cin + ci) * kh * kw;
              for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj) {
                  double acc = 0.0;
                  for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * s + ki - pad;
                    if (ih < 0 || ih >= H) continue;
                    const double* xrow = xplane + static_cast<std::size_t>(ih) * W;
                    const double* urow = uplane + static_cast<std::size_t>(oh) * OW;
                    int ow_lo = 0, ow_hi = OW;
                    while (ow_lo < OW && ow_lo * s + kj - pad < 0) ++ow_lo;
                    while (ow_hi > ow_lo && (ow_hi - 1) * s + kj - pad >= W) --ow_hi;
                    for (int ow = ow_lo; ow < ow_hi; ++ow) {
                      acc += xrow[ow * s + kj - pad] * urow[ow];
                    }
                  }
                  dwplane[ki * kw + kj] += acc;
                }
              }
            }
          }
        }
      }
      if (ib >= 0) {
        std::vector<double>& db = t.grad_buffer(ib);
        for (int b = 0; b < B; ++b) {
          for (int co = 0; co < Cout; ++co) {
            const double* uplane = up.data() + (static_cast<std::size_t>(b) * Cout + co) * OH * OW;
            double acc = 0.0;
            for (int i = 0; i < OH * OW; ++i) acc += uplane[i];
            db[co] += acc;
          }
        }
      }
    };
    r.set_requires_grad(true);
    int node = tape->record("conv2d", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return r;
}

PoolResult max_pool2d(const Tensor& x, Tape* tape) {
  check_rank4(x, "max_pool2d");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw TensorError("max_pool2d: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const int OH = H / 2, OW = W / 2;
  std::vector<double> out(static_cast<std::size_t>(B) * C * OH * OW);
  auto argmax = std::make_shared<std::vector<int>>(out.size());
  const double* xd = x.data().data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* plane = xd + static_cast<std::size_t>(bc) * H * W;
    double* oplane = out.data() + static_cast<std::size_t>(bc) * OH * OW;
    int* aplane = argmax->data() + static_cast<std::size_t>(bc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        const int i0 = (oh * 2) * W + ow * 2;
        // row-major window scan; strictly-greater keeps the first maximum
        int best = i0;
        double bv = plane[i0];
        if (plane[i0 + 1] > bv) { best = i0 + 1; bv = plane[i0 + 1]; }
        if (plane[i0 + W] > bv) { best = i0 + W; bv = plane[i0 + W]; }
        if (plane[i0 + W + 1] > bv) { best = i0 + W + 1; bv = plane[i0 + W + 1]; }
        oplane[oh * OW + ow] = bv;
        aplane[oh * OW + ow] = bc * H * W + best;
      }
    }
  }
  Tensor r({B, C, OH, OW}, std::move(out));
  if (tape && x.requires_grad()) {
    int ix = tape->watch(x);
    auto am = argmax;
    const std::size_t n = am->size();
    auto fn = [ix, am, n](Tape& t, const std::vector<double>& up) {
      std::vector<double>& dx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < n; ++i) dx[static_cast<std::size_t>((*am)[i])] += up[i];
    };
    r.set_requires_grad(true);
    int node = tape->record("max_pool2d", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return PoolResult{std::move(r), std::move(argmax)};
}

Tensor upsample_nn(const Tensor& x, int factor, Tape* tape) {
  check_rank4(x, "upsample_nn");
  if (factor < 1) throw TensorError("upsample_nn: factor must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = H * factor, OW = W * factor;
  std::vector<double> out(static_cast<std::size_t>(B) * C * OH * OW);
  const double* xd = x.data().data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* plane = xd + static_cast<std::size_t>(bc) * H * W;
    double* oplane = out.data() + static_cast<std::size_t>(bc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh) {
      const double* xrow = plane + static_cast<std::size_t>(oh / factor) * W;
      double* orow = oplane + static_cast<std::size_t>(oh) * OW;
      for (int ow = 0; ow < OW; ++ow) orow[ow] = xrow[ow / factor];
    }
  }
  Tensor r({B, C, OH, OW}, std::move(out));
  if (tape && x.requires_grad()) {
    int ix = tape->watch(x);
    auto fn = [ix, B, C, H, W, factor, OH, OW](Tape& t, const std::vector<double>& up) {
      std::vector<double>& dx = t.grad_buffer(ix);
      for (int bc = 0; bc < B * C; ++bc) {
        double* dplane = dx.data() + static_cast<std::size_t>(bc) * H * W;
        const double* uplane = up.data() + static_cast<std::size_t>(bc) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          double* drow = dplane + static_cast<std::size_t>(oh / factor) * W;
          const double* urow = uplane + static_cast<std::size_t>(oh) * OW;
          for (int ow = 0; ow < OW; ++ow) drow[ow / factor] += urow[ow];
        }
      }
    };
    r.set_requires_grad(true);
    int node = tape->record("upsample_nn", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return r;
}

Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape) {
  check_rank4(a, "concat_channels");
  check_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw TensorError("concat_channels: batch/spatial mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
  const int B = a.dim(0), C1 = a.dim(1), C2 = b.dim(1), H = a.dim(2), W = a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> out(static_cast<std::size_t>(B) * (C1 + C2) * plane);
  for (int bi = 0; bi < B; ++bi) {
    double* dst = out.data() + static_cast<std::size_t>(bi) * (C1 + C2) * plane;
    const double* pa = a.data().data() + static_cast<std::size_t>(bi) * C1 * plane;
    const double* pb = b.data().data() + static_cast<std::size_t>(bi) * C2 * plane;
    std::copy(pa, pa + C1 * plane, dst);
    std::copy(pb, pb + C2 * plane, dst + C1 * plane);
  }
  Tensor r({B, C1 + C2, H, W}, std::move(out));
  if (tape && (a.requires_grad() || b.requires_grad())) {
    int ia = a.requires_grad() ? tape->watch(a) : -1;
    int ib = b.requires_grad() ? tape->watch(b) : -1;
    auto fn = [ia, ib, B, C1, C2, plane](Tape& t, const std::vector<double>& up) {
      for (int bi = 0; bi < B; ++bi) {
        const double* src = up.data() + static_cast<std::size_t>(bi) * (C1 + C2) * plane;
        if (ia >= 0) {
          std::vector<double>& da = t.grad_buffer(ia);
          double* dst = da.data() + static_cast<std::size_t>(bi) * C1 * plane;
          for (std::size_t i = 0; i < C1 * plane; ++i) dst[i] += src[i];
        }
        if (ib >= 0) {
          std::vector<double>& db = t.grad_buffer(ib);
          double* dst = db.data() + static_cast<std::size_t>(bi) * C2 * plane;
          const double* s2 = src + C1 * plane;
          for (std::size_t i = 0; i < C2 * plane; ++i) dst[i] += s2[i];
        }
      }
    };
    r.set_requires_grad(true);
    int node = tape->record("concat_channels", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return r;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias, Tape* tape) {
  if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1) {
    throw TensorError("linear: expected x[B,I], w[I,O], bias[O]; got " + shape_str(x.shape()) +
                      ", " + shape_str(w.shape()) + ", " + shape_str(bias.shape()));
  }
  if (x.dim(1) != w.dim(0) || w.dim(1) != bias.dim(0)) {
    throw TensorError("linear: dimension mismatch " + shape_str(x.shape()) + " * " +
                      shape_str(w.shape()) + " + " + shape_str(bias.shape()));
  }
  const int B = x.dim(0), I = x.dim(1), O = w.dim(1);
  std::vector<double> out(static_cast<std::size_t>(B) * O);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  const double* bd = bias.data().data();
  for (int b = 0; b < B; ++b) {
    double* orow = out.data() + static_cast<std::size_t>(b) * O;
    for (int o = 0; o < O; ++o) orow[o] = bd[o];
    const double* xrow = xd + static_cast<std::size_t>(b) * I;
    for (int i = 0; i < I; ++i) {
      const double xv = xrow[i];
      const double* wrow = wd + static_cast<std::size_t>(i) * O;
      for (int o = 0; o < O; ++o) orow[o] += xv * wrow[o];
    }
  }
  Tensor r({B, O}, std::move(out));
  const bool need = tape && (x.requires_grad() || w.requires_grad() || bias.requires_grad());
  if (need) {
    int ix = x.requires_grad() ? tape->watch(x) : -1;
    int iw = w.requires_grad() ? tape->watch(w) : -1;
    int ib = bias.requires_grad() ? tape->watch(bias) : -1;
    auto vx = x.shared_data();
    auto vw = w.shared_data();
    auto fn = [ix, iw, ib, vx, vw, B, I, O](Tape& t, const std::vector<double>& up) {
      if (ix >= 0) {
        std::vector<double>& dx = t.grad_buffer(ix);
        for (int b = 0; b < B; ++b) {
          const double* urow = up.data() + static_cast<std::size_t>(b) * O;
          double* drow = dx.data() + static_cast<std::size_t>(b) * I;
          for (int i = 0; i < I; ++i) {
            const double* wrow = vw->data() + static_cast<std::size_t>(i) * O;
            double acc = 0.0;
            for (int o = 0; o < O; ++o) acc += urow[o] * wrow[o];
            drow[i] += acc;
          }
        }
      }
      if (iw >= 0) {
        std::vector<double>& dw = t.grad_buffer(iw);
        for (int b = 0; b < B; ++b) {
          const double* xrow = vx->data() + static_cast<std::size_t>(b) * I;
          const double* urow = up.data() + static_cast<std::size_t>(b) * O;
          for (int i = 0; i < I; ++i) {
            const double xv = xrow[i];
            double* drow = dw.data() + static_cast<std::size_t>(i) * O;
            for (int o = 0; o < O; ++o) drow[o] += xv * urow[o];
          }
        }
      }
      if (ib >= 0) {
        std::vector<double>& db = t.grad_buffer(ib);
        for (int b = 0; b < B; ++b) {
          const double* urow = up.data() + static_cast<std::size_t>(b) * O;
          for (int o = 0; o < O; ++o) db[o] += urow[o];
        }
      }
    };
    r.set_requires_grad(true);
    int node = tape->record("linear", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return r;
}

Tensor global_avg_pool(const Tensor& x, Tape* tape) {
  check_rank4(x, "global_avg_pool");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double inv = 1.0 / static_cast<double>(plane);
  std::vector<double> out(static_cast<std::size_t>(B) * C);
  const double* xd = x.data().data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* p = xd + static_cast<std::size_t>(bc) * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    out[static_cast<std::size_t>(bc)] = acc * inv;
  }
  Tensor r({B, C}, std::move(out));
  if (tape && x.requires_grad()) {
    int ix = tape->watch(x);
    auto fn = [ix, B, C, plane, inv](Tape& t, const std::vector<double>& up) {
      std::vector<double>& dx = t.grad_buffer(ix);
      for (int bc = 0; bc < B * C; ++bc) {
        const double g = up[static_cast<std::size_t>(bc)] * inv;
        double* p = dx.data() + static_cast<std::size_t>(bc) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += g;
      }
    };
    r.set_requires_grad(true);
    int node = tape->record("global_avg_pool", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return r;
}

namespace {

// Stable row softmax into `probs`.
void softmax_into(const double* logits, double* probs, int B, int C) {
  for (int b = 0; b < B; ++b) {
    const double* row = logits + static_cast<std::size_t>(b) * C;
    double* prow = probs + static_cast<std::size_t>(b) * C;
    double m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (int c = 0; c < C; ++c) {
      prow[c] = std::exp(row[c] - m);
      z += prow[c];
    }
    const double invz = 1.0 / z;
    for (int c = 0; c < C; ++c) prow[c] *= invz;
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw TensorError("softmax_rows: expected [B,C], got " + shape_str(logits.shape()));
  }
  std::vector<double> probs(logits.numel());
  softmax_into(logits.data().data(), probs.data(), logits.dim(0), logits.dim(1));
  return Tensor(logits.shape(), std::move(probs));
}

Tensor weighted_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                              const ClassWeights& w, Tape* tape) {
  if (logits.rank() != 2) {
    throw TensorError("weighted_cross_entropy: expected [B,C], got " + shape_str(logits.shape()));
  }
  const int B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw TensorError("weighted_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for batch " + std::to_string(B));
  }
  if (static_cast<int>(w.weights.size()) != C) {
    throw TensorError("weighted_cross_entropy: " + std::to_string(w.weights.size()) +
                      " class weights for " + std::to_string(C) + " classes");
  }
  for (int y : labels) {
    if (y < 0 || y >= C) {
      throw TensorError("weighted_cross_entropy: label " + std::to_string(y) +
                        " out of range [0," + std::to_string(C) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  softmax_into(logits.data().data(), probs->data(), B, C);
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double p = (*probs)[static_cast<std::size_t>(b) * C + labels[static_cast<std::size_t>(b)]];
    loss += w.weights[static_cast<std::size_t>(labels[static_cast<std::size_t>(b)])] * (-std::log(p));
  }
  loss /= static_cast<double>(B);
  Tensor r({1}, {loss});
  if (tape && logits.requires_grad()) {
    int il = tape->watch(logits);
    auto lw = std::make_shared<std::vector<double>>(w.weights);
    auto ly = std::make_shared<std::vector<int>>(labels);
    auto fn = [il, probs, lw, ly, B, C](Tape& t, const std::vector<double>& up) {
      std::vector<double>& dl = t.grad_buffer(il);
      const double g = up[0] / static_cast<double>(B);
      for (int b = 0; b < B; ++b) {
        const int y = (*ly)[static_cast<std::size_t>(b)];
        const double wy = (*lw)[static_cast<std::size_t>(y)] * g;
        const double* prow = probs->data() + static_cast<std::size_t>(b) * C;
        double* drow = dl.data() + static_cast<std::size_t>(b) * C;
        for (int c = 0; c < C; ++c) drow[c] += wy * (prow[c] - (c == y ? 1.0 : 0.0));
      }
    };
    r.set_requires_grad(true);
    int node = tape->record("weighted_cross_entropy", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return r;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target, Tape* tape) {
  if (pred.shape() != target.shape()) {
    throw TensorError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                      shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  double acc = 0.0;
  const double* pd = pred.data().data();
  const double* td = target.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pd[i] - td[i];
    acc += d * d;
  }
  const double invn = 1.0 / static_cast<double>(n);
  Tensor r({1}, {acc * invn});
  if (tape && (pred.requires_grad() || target.requires_grad())) {
    int ip = pred.requires_grad() ? tape->watch(pred) : -1;
    int it = target.requires_grad() ? tape->watch(target) : -1;
    auto vp = pred.shared_data();
    auto vt = target.shared_data();
    auto fn = [ip, it, vp, vt, n, invn](Tape& t, const std::vector<double>& up) {
      const double g = 2.0 * up[0] * invn;
      if (ip >= 0) {
        std::vector<double>& dp = t.grad_buffer(ip);
        for (std::size_t i = 0; i < n; ++i) dp[i] += g * ((*vp)[i] - (*vt)[i]);
      }
      if (it >= 0) {
        std::vector<double>& dt = t.grad_buffer(it);
        for (std::size_t i = 0; i < n; ++i) dt[i] -= g * ((*vp)[i] - (*vt)[i]);
      }
    };
    r.set_requires_grad(true);
    int node = tape->record("mse_loss", r.shape(), std::move(fn));
    tape->bind(r, node);
  }
  return r;
}

const std::vector<const char*>& all_op_kinds() {
  static const std::vector<const char*> kinds = {
      "add",        "sub",         "mul",
      "scale",      "relu",        "matmul",
      "sum",        "conv2d",      "max_pool2d",
      "upsample_nn", "concat_channels", "linear",
      "global_avg_pool", "weighted_cross_entropy", "mse_loss",
  };
  return kinds;
}

}  // namespace mtlforge
