#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stylemorph/core/ops.hpp"
#include "stylemorph/core/rng.hpp"
#include "stylemorph/core/tensor.hpp"

namespace stylemorph::nets {

// Parameters in registration order, named module/block_i/layer/kind.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

constexpr double kLReluSlope = 0.2;
constexpr double kResidualScale = 0.7071067811865476;  // 1/sqrt(2)

namespace detail {

inline void he_fill(Tensor& weight, int fan_in, SeededRng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : weight.data()) v = rng.normal() * std;
}

}  // namespace detail

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  double bias_fill = 0.0;

  Linear() = default;
  Linear(int out, int in, double bias_fill = 0.0)
      : weight(Tensor::zeros({out, in}, true)),
        bias(Tensor::zeros({out}, true)),
        bias_fill(bias_fill) {}

  void init(SeededRng& rng) {
    detail::he_fill(weight, weight.dim(1), rng);
    std::fill(bias.data().begin(), bias.data().end(), bias_fill);
  }

  Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + "/weight", weight);
    out.emplace_back(prefix + "/bias", bias);
  }
};

struct Conv2d {
  Tensor weight;  // [oc, ic, k, k]
  Tensor bias;    // [oc]; undefined for bias-free shortcuts
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(int oc, int ic, int k, int stride, int pad, bool with_bias = true)
      : weight(Tensor::zeros({oc, ic, k, k}, true)), stride(stride), pad(pad) {
    if (with_bias) bias = Tensor::zeros({oc}, true);
  }

  void init(SeededRng& rng) {
    const int fan_in = weight.dim(1) * weight.dim(2) * weight.dim(3);
    detail::he_fill(weight, fan_in, rng);
    if (bias.defined()) std::fill(bias.data().begin(), bias.data().end(), 0.0);
  }

  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + "/weight", weight);
    if (bias.defined()) out.emplace_back(prefix + "/bias", bias);
  }
};

// Style-conditioned normalization: per-channel spatial standardization with
// style-derived scale and shift. The scale affine starts at bias 1 so a zero
// style code reduces it to plain instance normalization.
struct AdaIN {
  Linear scale;
  Linear shift;

  AdaIN() = default;
  AdaIN(int channels, int style_width)
      : scale(channels, style_width, 1.0), shift(channels, style_width, 0.0) {}

  void init(SeededRng& rng) {
    scale.init(rng);
    shift.init(rng);
  }

  Tensor forward(const Tensor& x, const Tensor& s) const {
    Tensor xn = ops::instance_norm(x);
    const int h = x.dim(2), w = x.dim(3);
    Tensor sc = ops::bcast_nc(scale.forward(s), h, w);
    Tensor sh = ops::bcast_nc(shift.forward(s), h, w);
    return ops::add(ops::mul(xn, sc), sh);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    scale.collect(out, prefix + "_scale");
    shift.collect(out, prefix + "_shift");
  }
};

// Pre-activation residual block for encoder-style paths. conv1 keeps width,
// conv2 changes it; the 1x1 shortcut appears only on width changes and
// carries no bias. Residual sum is scaled by 1/sqrt(2).
struct ResBlock {
  bool normalize = false;
  bool downsample = false;
  Conv2d conv1;
  Conv2d conv2;
  std::optional<Conv2d> shortcut;

  ResBlock() = default;
  ResBlock(int in, int out, bool normalize, bool downsample)
      : normalize(normalize),
        downsample(downsample),
        conv1(in, in, 3, 1, 1),
        conv2(out, in, 3, 1, 1) {
    if (in != out) shortcut.emplace(out, in, 1, 1, 0, /*with_bias=*/false);
  }

  void init(SeededRng& rng) {
    conv1.init(rng);
    conv2.init(rng);
    if (shortcut) shortcut->init(rng);
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    if (normalize) h = ops::instance_norm(h);
    h = ops::lrelu(h, kLReluSlope);
    h = conv1.forward(h);
    if (downsample) h = ops::avgpool2(h);
    if (normalize) h = ops::instance_norm(h);
    h = ops::lrelu(h, kLReluSlope);
    h = conv2.forward(h);

    Tensor sc = x;
    if (shortcut) sc = shortcut->forward(sc);
    if (downsample) sc = ops::avgpool2(sc);
    return ops::mul_scalar(ops::add(h, sc), kResidualScale);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    conv1.collect(out, prefix + "/conv1");
    conv2.collect(out, prefix + "/conv2");
    if (shortcut) shortcut->collect(out, prefix + "/shortcut");
  }
};

// Decoder-side residual block: style-conditioned (AdaIN) or plain instance
// norm for the concat-conditioned ablation. Resampling is nearest-neighbor
// upsampling before conv1, which changes width (conv2 keeps it).
struct UpResBlock {
  bool upsample = false;
  bool use_adain = true;
  std::optional<AdaIN> norm1;
  std::optional<AdaIN> norm2;
  Conv2d conv1;
  Conv2d conv2;
  std::optional<Conv2d> shortcut;

  UpResBlock() = default;
  UpResBlock(int in, int out, int style_width, bool use_adain, bool upsample)
      : upsample(upsample),
        use_adain(use_adain),
        conv1(out, in, 3, 1, 1),
        conv2(out, out, 3, 1, 1) {
    if (use_adain) {
      norm1.emplace(in, style_width);
      norm2.emplace(out, style_width);
    }
    if (in != out) shortcut.emplace(out, in, 1, 1, 0, /*with_bias=*/false);
  }

  void init(SeededRng& rng) {
    if (norm1) norm1->init(rng);
    conv1.init(rng);
    if (norm2) norm2->init(rng);
    conv2.init(rng);
    if (shortcut) shortcut->init(rng);
  }

  Tensor forward(const Tensor& x, const Tensor& s) const {
    Tensor h = use_adain ? norm1->forward(x, s) : ops::instance_norm(x);
    h = ops::lrelu(h, kLReluSlope);
    if (upsample) h = ops::upsample2(h);
    h = conv1.forward(h);
    h = use_adain ? norm2->forward(h, s) : ops::instance_norm(h);
    h = ops::lrelu(h, kLReluSlope);
    h = conv2.forward(h);

    Tensor sc = x;
    if (upsample) sc = ops::upsample2(sc);
    if (shortcut) sc = shortcut->forward(sc);
    return ops::mul_scalar(ops::add(h, sc), kResidualScale);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    if (norm1) norm1->collect(out, prefix + "/adain1");
    conv1.collect(out, prefix + "/conv1");
    if (norm2) norm2->collect(out, prefix + "/adain2");
    conv2.collect(out, prefix + "/conv2");
    if (shortcut) shortcut->collect(out, prefix + "/shortcut");
  }
};

// ===================== label plumbing =====================

inline void check_labels(const std::vector<int>& labels, int num_classes, const char* where) {
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument(std::string(where) + ": label " + std::to_string(y) +
                                  " out of range [0, " + std::to_string(num_classes) + ")");
}

// Constant one-hot matrix [N, K] for a label vector.
inline Tensor onehot_rows(const std::vector<int>& labels, int num_classes) {
  check_labels(labels, num_classes, "onehot_rows");
  Tensor out = Tensor::zeros({static_cast<int>(labels.size()), num_classes});
  for (size_t i = 0; i < labels.size(); ++i)
    out.data()[i * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[i])] = 1.0;
  return out;
}

// Picks row i from branch_outputs[labels[i]]. Masking keeps the selection
// inside the graph and sends exactly-zero gradients into unused branches.
inline Tensor select_branch(const std::vector<Tensor>& branch_outputs,
                            const std::vector<int>& labels) {
  const int k = static_cast<int>(branch_outputs.size());
  check_labels(labels, k, "select_branch");
  const int n = branch_outputs[0].dim(0);
  const int width = branch_outputs[0].dim(1);
  if (n != static_cast<int>(labels.size()))
    throw std::invalid_argument("select_branch: batch/label size mismatch");
  Tensor sel;
  for (int b = 0; b < k; ++b) {
    Tensor mask = Tensor::zeros({n});
    bool any = false;
    for (int i = 0; i < n; ++i)
      if (labels[static_cast<size_t>(i)] == b) {
        mask.data()[static_cast<size_t>(i)] = 1.0;
        any = true;
      }
    if (!any) continue;  // untouched branches stay out of the graph entirely
    Tensor term = ops::mul(branch_outputs[static_cast<size_t>(b)], ops::bcast1(mask, width));
    sel = sel.defined() ? ops::add(sel, term) : term;
  }
  return sel;
}

}  // namespace stylemorph::nets
