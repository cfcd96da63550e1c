#pragma once

// Two-phase adversarial training: each iteration updates the discriminator on
// one batch, then the generator side (generator plus whichever style sources
// the ablation rung trains), then folds the live weights into EMA shadows.
// Inference always reads the shadows.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stylemorph/config.hpp"
#include "stylemorph/core/autograd.hpp"
#include "stylemorph/core/ops.hpp"
#include "stylemorph/core/rng.hpp"
#include "stylemorph/core/tensor.hpp"
#include "stylemorph/data.hpp"
#include "stylemorph/losses.hpp"
#include "stylemorph/nets/networks.hpp"
#include "stylemorph/train/checkpoint.hpp"
#include "stylemorph/train/optim.hpp"

namespace stylemorph::train {

// How the generator is told which output to produce. The ablation ladder
// walks concat -> embedding -> latent -> full; each value fixes which of the
// style networks exist.
//   kConcat:    one-hot label appended to the input channels, no style nets.
//   kEmbedding: learned per-domain style table, adain conditioning.
//   kLatent:    style is [z; onehot], a single-head encoder recovers z.
//   kFull:      mapping network and multi-head style encoder.
enum class StylePath { kConcat, kEmbedding, kLatent, kFull };

inline StylePath style_path(const ExperimentConfig& cfg) {
  const AblationConfig& ab = cfg.ablation;
  if (ab.conditioning == "concat") {
    if (ab.recon_mode != "none")
      throw ConfigError("conditioning=concat has no style code to reconstruct; use recon_mode=none");
    if (ab.use_ds)
      throw ConfigError("conditioning=concat produces one output per domain; the diversity loss needs use_ds=false");
    return StylePath::kConcat;
  }
  if (ab.recon_mode == "none") {
    if (ab.use_ds)
      throw ConfigError("recon_mode=none conditions on one embedding per domain, so the diversity loss is identically zero; use use_ds=false");
    return StylePath::kEmbedding;
  }
  return ab.recon_mode == "latent" ? StylePath::kLatent : StylePath::kFull;
}

namespace detail {

inline std::vector<Tensor> param_tensors(const nets::ParamList& ps) {
  std::vector<Tensor> out;
  out.reserve(ps.size());
  for (const auto& [name, t] : ps) out.push_back(t);
  return out;
}

inline double mean_sigmoid(const Tensor& logits) {
  const auto& v = logits.data();
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += 1.0 / (1.0 + std::exp(-x));
  return s / static_cast<double>(v.size());
}

}  // namespace detail

// All networks of one experiment. Shadow copies (_ema suffix) track an
// exponential moving average of every generator-side network; the
// discriminator is never averaged. Only the networks the style path calls
// for are populated; the rest stay default-constructed and empty.
struct ModelBundle {
  ExperimentConfig cfg;
  StylePath path = StylePath::kFull;
  long iteration = 0;

  nets::Generator g, g_ema;
  nets::MappingNetwork f, f_ema;
  nets::StyleEncoder e, e_ema;
  nets::DomainEmbedding emb, emb_ema;
  nets::Discriminator d;

  bool has_mapping() const { return path == StylePath::kFull; }
  bool has_embedding() const { return path == StylePath::kEmbedding; }
  bool has_encoder() const { return path == StylePath::kLatent || path == StylePath::kFull; }

  nets::ParamList g_params() const {
    nets::ParamList p;
    g.collect(p);
    return p;
  }
  // The mapping slot holds whichever label-to-style table the path trains:
  // the mapping network for kFull, the embedding table for kEmbedding.
  nets::ParamList f_params() const {
    nets::ParamList p;
    if (has_mapping()) f.collect(p);
    else if (has_embedding()) emb.collect(p);
    return p;
  }
  nets::ParamList e_params() const {
    nets::ParamList p;
    if (has_encoder()) e.collect(p);
    return p;
  }
  nets::ParamList d_params() const {
    nets::ParamList p;
    d.collect(p);
    return p;
  }

  // Live/shadow parameter pairs in matching order, for EMA folding and
  // checkpointing.
  nets::ParamList ema_live() const {
    nets::ParamList p = g_params();
    const nets::ParamList fp = f_params();
    const nets::ParamList ep = e_params();
    p.insert(p.end(), fp.begin(), fp.end());
    p.insert(p.end(), ep.begin(), ep.end());
    return p;
  }
  nets::ParamList ema_shadow() const {
    nets::ParamList p;
    g_ema.collect(p);
    if (has_mapping()) f_ema.collect(p);
    else if (has_embedding()) emb_ema.collect(p);
    if (has_encoder()) e_ema.collect(p);
    return p;
  }
};

inline ModelBundle make_model_bundle(const ExperimentConfig& cfg) {
  const auto problems = validate_config(cfg);
  if (!problems.empty()) throw ConfigError(problems.front());

  ModelBundle b;
  b.cfg = cfg;
  b.path = style_path(cfg);
  const bool adain = cfg.ablation.conditioning == "adain";
  int style_width = cfg.style_dim;
  if (b.path == StylePath::kConcat) style_width = cfg.num_domains;
  if (b.path == StylePath::kLatent) style_width = cfg.latent_dim + cfg.num_domains;

  auto seeded = [&cfg](const char* name) { return SeededRng::stream(cfg.seed, name); };

  b.g = nets::Generator(cfg.image_size, cfg.base_channels, cfg.max_channels, style_width,
                        cfg.num_domains, adain, ExperimentConfig::kGeneratorUpdownBlocks,
                        ExperimentConfig::kGeneratorIntermediateBlocks);
  b.g_ema = nets::Generator(cfg.image_size, cfg.base_channels, cfg.max_channels, style_width,
                            cfg.num_domains, adain, ExperimentConfig::kGeneratorUpdownBlocks,
                            ExperimentConfig::kGeneratorIntermediateBlocks);
  {
    SeededRng r = seeded("init/generator");
    b.g.init(r);
  }

  if (b.has_mapping()) {
    b.f = nets::MappingNetwork(cfg.latent_dim, cfg.hidden_dim, cfg.style_dim, cfg.num_domains);
    b.f_ema = nets::MappingNetwork(cfg.latent_dim, cfg.hidden_dim, cfg.style_dim, cfg.num_domains);
    SeededRng r = seeded("init/mapping");
    b.f.init(r);
  }
  if (b.has_embedding()) {
    b.emb = nets::DomainEmbedding(cfg.num_domains, cfg.style_dim);
    b.emb_ema = nets::DomainEmbedding(cfg.num_domains, cfg.style_dim);
    SeededRng r = seeded("init/embedding");
    b.emb.init(r);
  }
  if (b.has_encoder()) {
    const int out_width = b.path == StylePath::kLatent ? cfg.latent_dim : cfg.style_dim;
    const int heads = b.path == StylePath::kLatent ? 1 : cfg.num_domains;
    b.e = nets::StyleEncoder(cfg.image_size, cfg.base_channels, cfg.max_channels, out_width, heads);
    b.e_ema = nets::StyleEncoder(cfg.image_size, cfg.base_channels, cfg.max_channels, out_width,
                                 heads);
    SeededRng r = seeded("init/encoder");
    b.e.init(r);
  }
  {
    const bool multitask = cfg.ablation.discriminator_head == "multitask";
    b.d = nets::Discriminator(cfg.image_size, cfg.base_channels, cfg.max_channels,
                              cfg.num_domains, multitask);
    SeededRng r = seeded("init/discriminator");
    b.d.init(r);
  }
  nets::copy_parameters(b.ema_live(), b.ema_shadow());
  return b;
}

inline OptimizerSet make_optimizers(const ModelBundle& b) {
  const ExperimentConfig& c = b.cfg;
  OptimizerSet opt;
  opt.g = Adam(b.g_params(), c.lr_gde, c.adam_beta1, c.adam_beta2);
  if (b.has_mapping()) {
    opt.f = Adam(b.f_params(), c.lr_f, c.adam_beta1, c.adam_beta2);
  } else if (b.has_embedding()) {
    // The embedding table is shallow, so it takes the ordinary rate rather
    // than the reduced one the deep mapping network needs.
    opt.f = Adam(b.f_params(), c.lr_gde, c.adam_beta1, c.adam_beta2);
  }
  if (b.has_encoder()) opt.e = Adam(b.e_params(), c.lr_gde, c.adam_beta1, c.adam_beta2);
  opt.d = Adam(b.d_params(), c.lr_gde, c.adam_beta1, c.adam_beta2);
  return opt;
}

// Style for translating toward `labels` driven by latent z. For kConcat the
// "style" is the one-hot label itself; z is ignored by the paths that have
// no use for it.
inline Tensor latent_style(const ModelBundle& b, const Tensor& z, const std::vector<int>& labels,
                           bool ema = false) {
  switch (b.path) {
    case StylePath::kConcat:
      return nets::onehot_rows(labels, b.cfg.num_domains);
    case StylePath::kEmbedding:
      return (ema ? b.emb_ema : b.emb).forward(labels);
    case StylePath::kLatent:
      return ops::concat_cols(z, nets::onehot_rows(labels, b.cfg.num_domains));
    case StylePath::kFull:
      return (ema ? b.f_ema : b.f).forward(z, labels);
  }
  throw ConfigError("latent_style: unreachable");
}

// Raw encoder output for an image; only defined for paths with an encoder.
// The single-head latent encoder ignores the domain, so it is queried with
// head index zero.
inline Tensor encoder_out(const ModelBundle& b, const Tensor& x, const std::vector<int>& labels,
                          bool ema = false) {
  if (!b.has_encoder()) throw ConfigError("encoder_out: this style path has no encoder");
  const nets::StyleEncoder& enc = ema ? b.e_ema : b.e;
  if (b.path == StylePath::kLatent)
    return enc.forward(x, std::vector<int>(labels.size(), 0));
  return enc.forward(x, labels);
}

// Style extracted from an image of domain `labels`, used for cycles and
// reference-guided translation. Falls back to the label-derived style on the
// paths without an encoder.
inline Tensor image_style(const ModelBundle& b, const Tensor& x, const std::vector<int>& labels,
                          bool ema = false) {
  switch (b.path) {
    case StylePath::kConcat:
      return nets::onehot_rows(labels, b.cfg.num_domains);
    case StylePath::kEmbedding:
      return (ema ? b.emb_ema : b.emb).forward(labels);
    case StylePath::kLatent:
      return ops::concat_cols(encoder_out(b, x, labels, ema),
                              nets::onehot_rows(labels, b.cfg.num_domains));
    case StylePath::kFull:
      return encoder_out(b, x, labels, ema);
  }
  throw ConfigError("image_style: unreachable");
}

// One discriminator step: non-saturating loss on a real batch and on a fake
// produced with style s1, plus the gradient penalty on the reals. s1 must be
// graph-free; the generator is used purely as a sampler here.
inline void discriminator_update(ModelBundle& b, OptimizerSet& opt, const Tensor& x,
                                 const std::vector<int>& y_org, const std::vector<int>& y_trg,
                                 const Tensor& s1, losses::LossReport& rep) {
  // The real pass tracks its input so the penalty can differentiate the
  // logits with respect to the pixels.
  Tensor xr = x.clone(/*requires_grad=*/true);
  Tensor real_logit = b.d.forward(xr, y_org);
  Tensor fake;
  {
    NoGradGuard ng;
    fake = b.g.forward(x, s1);
  }
  Tensor fake_logit = b.d.forward(fake, y_trg);

  losses::DiscriminatorParts parts;
  parts.adv = losses::adv_loss_d(real_logit, fake_logit);
  parts.r1 = losses::r1_penalty(real_logit, xr, b.cfg.r1_gamma);
  if (b.cfg.ablation.discriminator_head == "acgan")
    parts.cls = losses::classification_loss(b.d.forward_all(x), y_org);

  Tensor total = losses::assemble_discriminator_objective(parts, b.cfg, b.iteration, rep);
  rep.real_sigma = detail::mean_sigmoid(real_logit);
  opt.d.step(autograd::grad(total, detail::param_tensors(opt.d.params())));
}

// Inputs assembled by the per-mode wrappers below. s1 drives the translation
// and stays in the graph when the style source should learn from it; fake2,
// when defined, is a graph-free second translation for the diversity term;
// recon_target is what the encoder output of the fake is pulled toward.
struct GeneratorPhase {
  Tensor s1;
  Tensor fake2;
  Tensor recon_target;
  bool update_mapping = false;
  bool update_encoder = false;
};

inline void generator_update(ModelBundle& b, OptimizerSet& opt, const Tensor& x,
                             const std::vector<int>& y_org, const std::vector<int>& y_trg,
                             const GeneratorPhase& ph, losses::LossReport& rep) {
  losses::GeneratorParts parts;
  Tensor fake = b.g.forward(x, ph.s1);
  parts.adv = losses::adv_loss_g(b.d.forward(fake, y_trg));
  if (b.cfg.ablation.discriminator_head == "acgan")
    parts.cls = losses::classification_loss(b.d.forward_all(fake), y_trg);

  const std::string& recon_mode = b.cfg.ablation.recon_mode;
  if (recon_mode == "style")
    parts.recon = losses::style_recon_loss(ph.recon_target, encoder_out(b, fake, y_trg));
  else if (recon_mode == "latent")
    parts.recon = losses::latent_recon_loss(ph.recon_target, encoder_out(b, fake, y_trg));

  if (ph.fake2.defined()) parts.ds = losses::diversity_loss(fake, ph.fake2);

  Tensor x_rec = b.g.forward(fake, image_style(b, x, y_org));
  parts.cyc = losses::cycle_loss(x, x_rec);

  Tensor total = losses::assemble_generator_objective(parts, b.cfg, b.iteration, rep);

  // Differentiate once against every parameter being stepped, then hand each
  // optimizer its slice. Parameters left out of the list are pruned from the
  // backward pass entirely, so a generator-only round costs no mapping or
  // encoder gradient work.
  std::vector<Tensor> targets = detail::param_tensors(opt.g.params());
  const size_t ng = targets.size();
  size_t nf = 0;
  size_t ne = 0;
  if (ph.update_mapping) {
    for (const auto& t : detail::param_tensors(opt.f.params())) targets.push_back(t);
    nf = targets.size() - ng;
  }
  if (ph.update_encoder) {
    for (const auto& t : detail::param_tensors(opt.e.params())) targets.push_back(t);
    ne = targets.size() - ng - nf;
  }
  std::vector<Tensor> grads = autograd::grad(total, targets);
  opt.g.step({grads.begin(), grads.begin() + static_cast<long>(ng)});
  if (ph.update_mapping)
    opt.f.step({grads.begin() + static_cast<long>(ng), grads.begin() + static_cast<long>(ng + nf)});
  if (ph.update_encoder)
    opt.e.step({grads.begin() + static_cast<long>(ng + nf),
                grads.begin() + static_cast<long>(ng + nf + ne)});
}

// One full iteration driven by sampled latents: discriminator step, then a
// generator step that also trains whichever style sources exist on this
// path. z2 only feeds the diversity term.
inline losses::LossReport train_step_latent(ModelBundle& b, OptimizerSet& opt,
                                            const ImageBatch& batch,
                                            const std::vector<int>& y_trg, const Tensor& z1,
                                            const Tensor& z2) {
  losses::LossReport rep;
  rep.mode = "latent";
  Tensor s1_d;
  {
    NoGradGuard ng;
    s1_d = latent_style(b, z1, y_trg);
  }
  discriminator_update(b, opt, batch.pixels, batch.labels, y_trg, s1_d, rep);

  GeneratorPhase ph;
  ph.s1 = latent_style(b, z1, y_trg);
  if (b.cfg.ablation.use_ds) {
    NoGradGuard ng;
    ph.fake2 = b.g.forward(batch.pixels, latent_style(b, z2, y_trg));
  }
  if (b.cfg.ablation.recon_mode == "latent") ph.recon_target = z1;
  else if (b.cfg.ablation.recon_mode == "style") ph.recon_target = ph.s1;
  ph.update_mapping = b.has_mapping() || b.has_embedding();
  ph.update_encoder = b.has_encoder();
  generator_update(b, opt, batch.pixels, batch.labels, y_trg, ph, rep);
  return rep;
}

// One full iteration driven by reference images: styles come from encoding
// the references, and only the generator itself is stepped in the generator
// phase. The style target is a constant here, which matches stepping G alone
// on a shared-style objective.
inline losses::LossReport train_step_reference(ModelBundle& b, OptimizerSet& opt,
                                               const ImageBatch& batch,
                                               const ReferenceBatch& refs) {
  if (b.path != StylePath::kFull)
    throw ConfigError("reference-guided training needs recon_mode=style and adain conditioning");
  losses::LossReport rep;
  rep.mode = "reference";
  const std::vector<int>& y_trg = refs.first.labels;
  Tensor s1;
  {
    NoGradGuard ng;
    s1 = b.e.forward(refs.first.pixels, y_trg);
  }
  discriminator_update(b, opt, batch.pixels, batch.labels, y_trg, s1, rep);

  GeneratorPhase ph;
  ph.s1 = s1;
  if (b.cfg.ablation.use_ds) {
    NoGradGuard ng;
    ph.fake2 = b.g.forward(batch.pixels, b.e.forward(refs.second.pixels, y_trg));
  }
  ph.recon_target = s1;
  generator_update(b, opt, batch.pixels, batch.labels, y_trg, ph, rep);
  return rep;
}

// shadow <- decay*shadow + (1-decay)*live for every generator-side network.
inline void update_ema(ModelBundle& b) {
  const double decay = b.cfg.ema_decay;
  const nets::ParamList live = b.ema_live();
  nets::ParamList shadow = b.ema_shadow();
  for (size_t i = 0; i < live.size(); ++i) {
    auto& s = shadow[i].second.data();
    const auto& l = live[i].second.data();
    for (size_t j = 0; j < s.size(); ++j) s[j] = decay * s[j] + (1.0 - decay) * l[j];
  }
}

// The four independent random streams a run consumes, kept separate so each
// can be restored exactly on resume. data: batch indices; latents: z draws;
// targets: target-domain draws; flips: augmentation coin flips.
struct TrainStreams {
  SeededRng data, latents, targets, flips;

  static TrainStreams from_seed(uint64_t seed) {
    return {SeededRng::stream(seed, "data"), SeededRng::stream(seed, "latents"),
            SeededRng::stream(seed, "targets"), SeededRng::stream(seed, "flips")};
  }
};

inline void save_checkpoint(const std::string& path, const ModelBundle& b,
                            const OptimizerSet& opt, const TrainStreams& streams) {
  Archive ar;
  auto put_list = [&ar](const nets::ParamList& ps, const std::string& prefix) {
    for (const auto& [name, t] : ps) ar.put_f64(prefix + name, t.shape(), t.data());
  };
  put_list(b.g_params(), "");
  put_list(b.f_params(), "");
  put_list(b.e_params(), "");
  put_list(b.d_params(), "");
  put_list(b.ema_shadow(), "ema/");

  auto put_opt = [&](const std::string& slot, const Adam& a) {
    if (a.params().empty()) return;
    ar.put_i64("optim/" + slot + "/steps", a.step_count());
    for (size_t i = 0; i < a.params().size(); ++i) {
      const auto& [name, t] = a.params()[i];
      ar.put_f64("optim/" + slot + "/" + name + "/m", t.shape(), a.moments_m()[i].data());
      ar.put_f64("optim/" + slot + "/" + name + "/v", t.shape(), a.moments_v()[i].data());
    }
  };
  put_opt("g", opt.g);
  put_opt("f", opt.f);
  put_opt("e", opt.e);
  put_opt("d", opt.d);

  ar.put_text("meta/config", serialize_config(b.cfg));
  ar.put_i64("meta/iteration", b.iteration);
  ar.put_text("rng/data", streams.data.serialize());
  ar.put_text("rng/latents", streams.latents.serialize());
  ar.put_text("rng/targets", streams.targets.serialize());
  ar.put_text("rng/flips", streams.flips.serialize());
  ar.save(path);
}

namespace detail {

// Empty when `requested` can adopt the checkpoint's weights; otherwise a
// message naming the first architectural field that differs. Schedule fields
// (iteration counts, rates, loss weights, use_ds, seed) may change on
// resume.
inline std::string config_compat_error(const ExperimentConfig& stored,
                                       const ExperimentConfig& requested) {
  if (stored.num_domains != requested.num_domains)
    return "checkpoint has " + std::to_string(stored.num_domains) +
           " domain branches but the requested config has " +
           std::to_string(requested.num_domains) +
           "; per-domain heads and mapping branches cannot be re-shaped";
  auto diff_int = [](const char* key, int a, int b) {
    return std::string(key) + " differs: checkpoint " + std::to_string(a) + ", requested " +
           std::to_string(b);
  };
  if (stored.image_size != requested.image_size)
    return diff_int("image_size", stored.image_size, requested.image_size);
  if (stored.latent_dim != requested.latent_dim)
    return diff_int("latent_dim", stored.latent_dim, requested.latent_dim);
  if (stored.style_dim != requested.style_dim)
    return diff_int("style_dim", stored.style_dim, requested.style_dim);
  if (stored.hidden_dim != requested.hidden_dim)
    return diff_int("hidden_dim", stored.hidden_dim, requested.hidden_dim);
  if (stored.base_channels != requested.base_channels)
    return diff_int("base_channels", stored.base_channels, requested.base_channels);
  if (stored.max_channels != requested.max_channels)
    return diff_int("max_channels", stored.max_channels, requested.max_channels);
  auto diff_str = [](const char* key, const std::string& a, const std::string& b) {
    return std::string(key) + " differs: checkpoint " + a + ", requested " + b;
  };
  if (stored.ablation.discriminator_head != requested.ablation.discriminator_head)
    return diff_str("ablation.discriminator_head", stored.ablation.discriminator_head,
                    requested.ablation.discriminator_head);
  if (stored.ablation.conditioning != requested.ablation.conditioning)
    return diff_str("ablation.conditioning", stored.ablation.conditioning,
                    requested.ablation.conditioning);
  if (stored.ablation.recon_mode != requested.ablation.recon_mode)
    return diff_str("ablation.recon_mode", stored.ablation.recon_mode,
                    requested.ablation.recon_mode);
  return "";
}

}  // namespace detail

// A resumable training session: the networks, their optimizers, and the
// random streams, all advanced to the same iteration.
struct TrainerState {
  ModelBundle bundle;
  OptimizerSet opt;
  TrainStreams streams;
};

// Rebuilds a full session from a checkpoint. When `expect` is given it must
// be architecturally compatible with the stored config and becomes the live
// config, so schedules (total iterations, rates) may be extended on resume;
// otherwise the stored config is used as-is. Every archive entry must be
// consumed, so a checkpoint from a structurally different model is rejected
// even if the configs happen to agree.
inline TrainerState load_checkpoint(const std::string& path,
                                    const ExperimentConfig* expect = nullptr) {
  Archive ar = Archive::load(path);
  const ExperimentConfig stored = deserialize_config(ar.get_text("meta/config"));
  if (expect) {
    const std::string err = detail::config_compat_error(stored, *expect);
    if (!err.empty()) throw CheckpointError(path + ": " + err);
  }
  const ExperimentConfig cfg = expect ? *expect : stored;

  TrainerState st{make_model_bundle(cfg), OptimizerSet{}, TrainStreams::from_seed(cfg.seed)};
  st.opt = make_optimizers(st.bundle);

  std::vector<std::string> consumed{"meta/config", "meta/iteration", "rng/data", "rng/latents",
                                    "rng/targets", "rng/flips"};
  auto read_list = [&](nets::ParamList ps, const std::string& prefix) {
    for (auto& [name, t] : ps) {
      const auto& vals = ar.get_f64(prefix + name, t.shape());
      std::copy(vals.begin(), vals.end(), t.data().begin());
      consumed.push_back(prefix + name);
    }
  };
  read_list(st.bundle.g_params(), "");
  read_list(st.bundle.f_params(), "");
  read_list(st.bundle.e_params(), "");
  read_list(st.bundle.d_params(), "");
  read_list(st.bundle.ema_shadow(), "ema/");

  auto read_opt = [&](const std::string& slot, Adam& a) {
    if (a.params().empty()) return;
    const std::string base = "optim/" + slot;
    std::vector<Tensor> m, v;
    for (const auto& [name, t] : a.params()) {
      m.push_back(Tensor::from_data(t.shape(), ar.get_f64(base + "/" + name + "/m", t.shape())));
      v.push_back(Tensor::from_data(t.shape(), ar.get_f64(base + "/" + name + "/v", t.shape())));
      consumed.push_back(base + "/" + name + "/m");
      consumed.push_back(base + "/" + name + "/v");
    }
    a.restore(ar.get_i64(base + "/steps"), m, v);
    consumed.push_back(base + "/steps");
  };
  read_opt("g", st.opt.g);
  read_opt("f", st.opt.f);
  read_opt("e", st.opt.e);
  read_opt("d", st.opt.d);

  std::sort(consumed.begin(), consumed.end());
  const std::vector<std::string> present = ar.names();
  for (const auto& name : present)
    if (!std::binary_search(consumed.begin(), consumed.end(), name))
      throw CheckpointError(path + ": unexpected archive entry '" + name + "'");

  st.bundle.iteration = ar.get_i64("meta/iteration");
  st.streams.data = SeededRng::deserialize(ar.get_text("rng/data"));
  st.streams.latents = SeededRng::deserialize(ar.get_text("rng/latents"));
  st.streams.targets = SeededRng::deserialize(ar.get_text("rng/targets"));
  st.streams.flips = SeededRng::deserialize(ar.get_text("rng/flips"));
  return st;
}

// Checkpoints and sample grids every tenth of a short run; long runs get a
// fixed stride so artifact volume stays bounded.
inline long artifact_interval(long total_iters) {
  if (total_iters <= 2000) return std::max<long>(1, total_iters / 10);
  return 5000;
}

struct FitOptions {
  // Destination for losses.csv, numbered checkpoints, and checkpoint_final.
  // Empty runs the loop without writing anything.
  std::string out_dir;
  // Called after each iteration's reports are recorded.
  std::function<void(const losses::LossReport&)> progress;
  // Called at every artifact point with the current bundle; wired to the
  // sample-grid writer by the command-line tool.
  std::function<void(const ModelBundle&, long)> sample_hook;
};

// Runs iterations `bundle.iteration .. total_iters`. Every iteration consumes
// the same stream draws in the same order, so a run resumed from a
// checkpoint continues the exact sequence a straight-through run produces.
inline std::vector<losses::LossReport> fit(ModelBundle& b, OptimizerSet& opt,
                                           TrainStreams& streams, const DomainDataset& ds,
                                           const FitOptions& fo = {}) {
  namespace fs = std::filesystem;
  const long total = b.cfg.total_iters;
  const long interval = artifact_interval(total);
  const int n = b.cfg.batch_size;
  std::vector<losses::LossReport> reports;

  std::ofstream csv;
  if (!fo.out_dir.empty()) {
    fs::create_directories(fo.out_dir);
    const fs::path csv_path = fs::path(fo.out_dir) / "losses.csv";
    const bool fresh = !fs::exists(csv_path) || fs::file_size(csv_path) == 0;
    csv.open(csv_path, std::ios::app);
    if (!csv) throw std::runtime_error("fit: cannot open " + csv_path.string());
    if (fresh) csv << losses::LossReport::csv_header() << '\n';
  }
  auto record = [&](const losses::LossReport& rep) {
    reports.push_back(rep);
    if (csv.is_open()) csv << rep.csv_line() << '\n';
    if (fo.progress) fo.progress(rep);
  };
  auto checkpoint_path = [&](const std::string& stem) {
    return (fs::path(fo.out_dir) / (stem + ".ckpt")).string();
  };

  while (b.iteration < total) {
    ImageBatch batch =
        sample_train_batch(ds, n, b.cfg.image_size, streams.data, streams.flips);
    std::vector<int> y_trg(static_cast<size_t>(n));
    for (int& y : y_trg) y = streams.targets.uniform_int(b.cfg.num_domains);
    Tensor z1 = stack_rows(sample_latents(n, b.cfg.latent_dim, streams.latents));
    Tensor z2 = stack_rows(sample_latents(n, b.cfg.latent_dim, streams.latents));

    record(train_step_latent(b, opt, batch, y_trg, z1, z2));
    if (b.path == StylePath::kFull) {
      ReferenceBatch refs =
          sample_reference_pair(ds, n, b.cfg.image_size, streams.data, streams.flips);
      record(train_step_reference(b, opt, batch, refs));
    }
    update_ema(b);
    ++b.iteration;

    // Optimizer moments make archives heavy, so periodic saves overwrite one
    // rolling file rather than accumulating.
    if (b.iteration % interval == 0 && b.iteration != total && !fo.out_dir.empty()) {
      save_checkpoint(checkpoint_path("latest"), b, opt, streams);
      if (fo.sample_hook) fo.sample_hook(b, b.iteration);
      csv.flush();
    }
  }
  if (!fo.out_dir.empty()) {
    save_checkpoint(checkpoint_path("final"), b, opt, streams);
    if (fo.sample_hook) fo.sample_hook(b, b.iteration);
  }
  return reports;
}

}  // namespace stylemorph::train
