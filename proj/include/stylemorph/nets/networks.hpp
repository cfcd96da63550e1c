#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "stylemorph/nets/modules.hpp"

namespace stylemorph::nets {

// Image-to-image translator. Encode: stem conv, `updown` downsampling
// residual blocks, then half of the intermediate blocks. Decode: the other
// half of the intermediate blocks and `updown` upsampling blocks, all
// style-conditioned, then a 1x1 projection to RGB under tanh.
//
// Two conditioning modes:
//   adain:  cond is a style matrix [N, style_width] injected via AdaIN.
//   concat: cond is a one-hot matrix [N, num_domains] tiled across space and
//           appended to the input channels; decode blocks fall back to plain
//           instance norm.
struct Generator {
  int image_size = 0;
  int style_width = 0;
  int num_domains = 0;
  bool use_adain = true;
  int updown = 4;

  Conv2d stem;
  std::vector<ResBlock> down;
  std::vector<ResBlock> mid_enc;
  std::vector<UpResBlock> mid_dec;
  std::vector<UpResBlock> up;
  Conv2d head;

  Generator() = default;
  Generator(int image_size, int base_channels, int max_channels, int style_width,
            int num_domains, bool use_adain, int updown_blocks = 4,
            int intermediate_blocks = 4)
      : image_size(image_size),
        style_width(style_width),
        num_domains(num_domains),
        use_adain(use_adain),
        updown(updown_blocks) {
    if (image_size % (1 << updown_blocks) != 0)
      throw std::invalid_argument("Generator: image_size must be divisible by 2^" +
                                  std::to_string(updown_blocks));
    const int in_channels = 3 + (use_adain ? 0 : num_domains);
    stem = Conv2d(base_channels, in_channels, 3, 1, 1);

    int c = base_channels;
    std::vector<int> down_out;
    for (int i = 0; i < updown_blocks; ++i) {
      const int nc = std::min(c * 2, max_channels);
      down.emplace_back(c, nc, /*normalize=*/true, /*downsample=*/true);
      down_out.push_back(nc);
      c = nc;
    }
    const int enc_mid = intermediate_blocks / 2;
    for (int i = 0; i < enc_mid; ++i)
      mid_enc.emplace_back(c, c, /*normalize=*/true, /*downsample=*/false);
    for (int i = 0; i < intermediate_blocks - enc_mid; ++i)
      mid_dec.emplace_back(c, c, style_width, use_adain, /*upsample=*/false);
    for (int i = updown_blocks - 1; i >= 0; --i) {
      const int nc = (i == 0) ? base_channels : down_out[static_cast<size_t>(i - 1)];
      up.emplace_back(c, nc, style_width, use_adain, /*upsample=*/true);
      c = nc;
    }
    head = Conv2d(3, c, 1, 1, 0);
  }

  void init(SeededRng& rng) {
    stem.init(rng);
    for (auto& b : down) b.init(rng);
    for (auto& b : mid_enc) b.init(rng);
    for (auto& b : mid_dec) b.init(rng);
    for (auto& b : up) b.init(rng);
    head.init(rng);
  }

  Tensor forward(const Tensor& x, const Tensor& cond) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
      throw std::invalid_argument("Generator: expected input [N,3,H,W]");
    if (x.dim(2) % (1 << updown) != 0 || x.dim(3) % (1 << updown) != 0)
      throw std::invalid_argument("Generator: H,W must be divisible by 2^" +
                                  std::to_string(updown));
    const int expected = use_adain ? style_width : num_domains;
    if (cond.ndim() != 2 || cond.dim(0) != x.dim(0) || cond.dim(1) != expected)
      throw std::invalid_argument("Generator: conditioning must be [N," +
                                  std::to_string(expected) + "]");

    Tensor h = x;
    if (!use_adain) h = ops::concat_c(h, ops::bcast_nc(cond, x.dim(2), x.dim(3)));
    h = stem.forward(h);
    for (const auto& b : down) h = b.forward(h);
    for (const auto& b : mid_enc) h = b.forward(h);
    for (const auto& b : mid_dec) h = b.forward(h, cond);
    for (const auto& b : up) h = b.forward(h, cond);
    return ops::tanh(head.forward(h));
  }

  void collect(ParamList& out, const std::string& prefix = "generator") const {
    stem.collect(out, prefix + "/stem/conv");
    for (size_t i = 0; i < down.size(); ++i)
      down[i].collect(out, prefix + "/down_" + std::to_string(i));
    for (size_t i = 0; i < mid_enc.size(); ++i)
      mid_enc[i].collect(out, prefix + "/mid_" + std::to_string(i));
    for (size_t i = 0; i < mid_dec.size(); ++i)
      mid_dec[i].collect(out, prefix + "/mid_" + std::to_string(mid_enc.size() + i));
    for (size_t i = 0; i < up.size(); ++i)
      up[i].collect(out, prefix + "/up_" + std::to_string(i));
    head.collect(out, prefix + "/head/conv");
  }
};

// Latent-to-style mapper: a shared fully connected trunk followed by one
// branch of fully connected layers per domain; the batch is routed through
// the branches named by its labels.
struct MappingNetwork {
  int latent_dim = 0;
  int style_dim = 0;

  std::vector<Linear> shared;
  std::vector<std::vector<Linear>> branches;

  MappingNetwork() = default;
  MappingNetwork(int latent_dim, int hidden_dim, int style_dim, int num_domains,
                 int shared_layers = 4, int branch_layers = 4)
      : latent_dim(latent_dim), style_dim(style_dim) {
    int w = latent_dim;
    for (int i = 0; i < shared_layers; ++i) {
      shared.emplace_back(hidden_dim, w);
      w = hidden_dim;
    }
    branches.resize(static_cast<size_t>(num_domains));
    for (auto& branch : branches) {
      for (int i = 0; i < branch_layers - 1; ++i) branch.emplace_back(hidden_dim, hidden_dim);
      branch.emplace_back(style_dim, hidden_dim);
    }
  }

  void init(SeededRng& rng) {
    for (auto& fc : shared) fc.init(rng);
    for (auto& branch : branches)
      for (auto& fc : branch) fc.init(rng);
  }

  Tensor forward(const Tensor& z, const std::vector<int>& labels) const {
    if (z.ndim() != 2 || z.dim(1) != latent_dim)
      throw std::invalid_argument("MappingNetwork: expected latents [N," +
                                  std::to_string(latent_dim) + "]");
    Tensor h = z;
    for (const auto& fc : shared) h = ops::lrelu(fc.forward(h), 0.0);
    std::vector<Tensor> outs;
    outs.reserve(branches.size());
    for (const auto& branch : branches) {
      Tensor b = h;
      for (size_t i = 0; i + 1 < branch.size(); ++i) b = ops::lrelu(branch[i].forward(b), 0.0);
      b = branch.back().forward(b);
      outs.push_back(b);
    }
    return select_branch(outs, labels);
  }

  void collect(ParamList& out, const std::string& prefix = "mapping") const {
    for (size_t i = 0; i < shared.size(); ++i)
      shared[i].collect(out, prefix + "/shared/fc_" + std::to_string(i));
    for (size_t k = 0; k < branches.size(); ++k)
      for (size_t i = 0; i < branches[k].size(); ++i)
        branches[k][i].collect(out, prefix + "/branch_" + std::to_string(k) + "/fc_" +
                                        std::to_string(i));
  }
};

// Convolutional trunk shared by the style encoder and discriminator: stem
// conv, residual blocks that halve the spatial extent while it is at least
// 8 and double channels up to the cap, then a 4x4 valid conv and a flatten.
// No global pooling anywhere.
struct ImageTrunk {
  Conv2d stem;
  std::vector<ResBlock> blocks;
  Conv2d final_conv;
  int flat_dim = 0;

  ImageTrunk() = default;
  ImageTrunk(int image_size, int base_channels, int max_channels, int num_blocks = 6) {
    stem = Conv2d(base_channels, 3, 3, 1, 1);
    int c = base_channels;
    int s = image_size;
    for (int i = 0; i < num_blocks; ++i) {
      const int nc = std::min(c * 2, max_channels);
      const bool down = s >= 8;
      blocks.emplace_back(c, nc, /*normalize=*/false, down);
      if (down) s /= 2;
      c = nc;
    }
    final_conv = Conv2d(c, c, 4, 1, 0);
    const int q = s - 3;
    if (q < 1)
      throw std::invalid_argument("ImageTrunk: image_size too small for the trunk");
    flat_dim = c * q * q;
  }

  void init(SeededRng& rng) {
    stem.init(rng);
    for (auto& b : blocks) b.init(rng);
    final_conv.init(rng);
  }

  Tensor forward(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
      throw std::invalid_argument("ImageTrunk: expected input [N,3,H,W]");
    Tensor h = stem.forward(x);
    for (const auto& b : blocks) h = b.forward(h);
    h = ops::lrelu(h, kLReluSlope);
    h = final_conv.forward(h);
    h = ops::lrelu(h, kLReluSlope);
    return ops::reshape(h, {x.dim(0), flat_dim});
  }

  void collect(ParamList& out, const std::string& prefix) const {
    stem.collect(out, prefix + "/stem/conv");
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + "/block_" + std::to_string(i));
    final_conv.collect(out, prefix + "/final/conv");
  }
};

// Image-to-style extractor: shared trunk plus one linear head per domain.
// The head count and output width are free so the latent-reconstruction
// ablation can re-encode images to latent space through a single head.
struct StyleEncoder {
  int out_width = 0;

  ImageTrunk trunk;
  std::vector<Linear> heads;

  StyleEncoder() = default;
  StyleEncoder(int image_size, int base_channels, int max_channels, int out_width,
               int num_heads)
      : out_width(out_width), trunk(image_size, base_channels, max_channels) {
    for (int i = 0; i < num_heads; ++i) heads.emplace_back(out_width, trunk.flat_dim);
  }

  void init(SeededRng& rng) {
    trunk.init(rng);
    for (auto& h : heads) h.init(rng);
  }

  Tensor forward(const Tensor& x, const std::vector<int>& labels) const {
    Tensor h = trunk.forward(x);
    std::vector<Tensor> outs;
    outs.reserve(heads.size());
    for (const auto& head : heads) outs.push_back(head.forward(h));
    return select_branch(outs, labels);
  }

  void collect(ParamList& out, const std::string& prefix = "encoder") const {
    trunk.collect(out, prefix);
    for (size_t i = 0; i < heads.size(); ++i)
      heads[i].collect(out, prefix + "/head_" + std::to_string(i));
  }
};

// Discriminator over real/fake. Multi-task mode holds one scalar logit head
// per domain and answers only for the queried domain. The auxiliary-classifier
// mode keeps a single unconditional logit plus a domain classification head.
struct Discriminator {
  bool multitask = true;
  int num_domains = 0;

  ImageTrunk trunk;
  std::vector<Linear> heads;  // multitask: K heads of width 1
  Linear rf;                  // acgan only
  Linear cls;                 // acgan only

  Discriminator() = default;
  Discriminator(int image_size, int base_channels, int max_channels, int num_domains,
                bool multitask)
      : multitask(multitask),
        num_domains(num_domains),
        trunk(image_size, base_channels, max_channels) {
    if (multitask) {
      for (int i = 0; i < num_domains; ++i) heads.emplace_back(1, trunk.flat_dim);
    } else {
      rf = Linear(1, trunk.flat_dim);
      cls = Linear(num_domains, trunk.flat_dim);
    }
  }

  void init(SeededRng& rng) {
    trunk.init(rng);
    if (multitask) {
      for (auto& h : heads) h.init(rng);
    } else {
      rf.init(rng);
      cls.init(rng);
    }
  }

  // Scalar logit per sample: the labeled head in multi-task mode, the
  // unconditional real/fake logit otherwise.
  Tensor forward(const Tensor& x, const std::vector<int>& labels) const {
    Tensor h = trunk.forward(x);
    Tensor logit;
    if (multitask) {
      std::vector<Tensor> outs;
      outs.reserve(heads.size());
      for (const auto& head : heads) outs.push_back(head.forward(h));
      logit = select_branch(outs, labels);
    } else {
      check_labels(labels, num_domains, "Discriminator::forward");
      logit = rf.forward(h);
    }
    return ops::reshape(logit, {x.dim(0)});
  }

  // All K logits in multi-task mode, classification logits otherwise.
  Tensor forward_all(const Tensor& x) const {
    Tensor h = trunk.forward(x);
    if (multitask) {
      Tensor all = heads[0].forward(h);
      for (size_t i = 1; i < heads.size(); ++i)
        all = ops::concat_cols(all, heads[i].forward(h));
      return all;
    }
    return cls.forward(h);
  }

  void collect(ParamList& out, const std::string& prefix = "discriminator") const {
    trunk.collect(out, prefix);
    if (multitask) {
      for (size_t i = 0; i < heads.size(); ++i)
        heads[i].collect(out, prefix + "/head_" + std::to_string(i));
    } else {
      rf.collect(out, prefix + "/rf");
      cls.collect(out, prefix + "/cls");
    }
  }
};

// Learned per-domain style table for the conditioning ablation that has no
// mapping network: the style code for domain y is row y.
struct DomainEmbedding {
  Tensor table;  // [K, style_dim]

  DomainEmbedding() = default;
  DomainEmbedding(int num_domains, int style_dim)
      : table(Tensor::zeros({num_domains, style_dim}, true)) {}

  void init(SeededRng& rng) {
    for (double& v : table.data()) v = rng.normal();
  }

  Tensor forward(const std::vector<int>& labels) const {
    return ops::matmul(onehot_rows(labels, table.dim(0)), table);
  }

  void collect(ParamList& out, const std::string& prefix = "embedding") const {
    out.emplace_back(prefix + "/table/weight", table);
  }
};

// Copies parameter values between two structurally identical networks,
// matching entries by name. Used for EMA shadows and checkpoint restore.
inline void copy_parameters(const ParamList& src, const ParamList& dst) {
  if (src.size() != dst.size())
    throw std::invalid_argument("copy_parameters: parameter count mismatch");
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first)
      throw std::invalid_argument("copy_parameters: name mismatch at " + src[i].first +
                                  " vs " + dst[i].first);
    if (src[i].second.shape() != dst[i].second.shape())
      throw std::invalid_argument("copy_parameters: shape mismatch at " + src[i].first);
    Tensor target = dst[i].second;  // shared handle, the copy aliases the node
    target.data() = src[i].second.data();
  }
}

}  // namespace stylemorph::nets
