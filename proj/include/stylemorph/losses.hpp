#pragma once

// Training objectives. Adversarial terms use the non-saturating form plus a
// gradient penalty at real samples; reconstruction terms pin style codes,
// latent codes, and cycled images; the assembly helpers apply the configured
// weights and record every scalar the optimizer acts on.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stylemorph/config.hpp"
#include "stylemorph/core/autograd.hpp"
#include "stylemorph/core/ops.hpp"
#include "stylemorph/core/tensor.hpp"

namespace stylemorph::losses {

// Discriminator side: mean over batch of softplus(-real) + softplus(fake).
// Callers score a detached generated image, so no gradient reaches the
// generator through the fake term.
inline Tensor adv_loss_d(const Tensor& real_logit, const Tensor& fake_logit) {
  return ops::add(ops::mean(ops::softplus(ops::neg(real_logit))),
                  ops::mean(ops::softplus(fake_logit)));
}

// Generator side: mean over batch of softplus(-fake).
inline Tensor adv_loss_g(const Tensor& fake_logit) {
  return ops::mean(ops::softplus(ops::neg(fake_logit)));
}

// (gamma/2) * mean over batch of ||d sum(logits) / d x_real||^2, evaluated at
// real samples. The logits must have been produced from x_real with gradient
// tracking on; the result stays differentiable so the penalty's own gradient
// reaches the discriminator parameters.
inline Tensor r1_penalty(const Tensor& real_logits, const Tensor& x_real, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("r1_penalty: gamma must be >= 0");
  if (!x_real.requires_grad())
    throw std::invalid_argument("r1_penalty: x_real does not track gradients");
  if (gamma == 0.0) return Tensor::from_data({1}, {0.0});
  Tensor gx = autograd::grad(ops::sum(real_logits), {x_real}, /*create_graph=*/true)[0];
  const double scale = 0.5 * gamma / x_real.dim(0);
  return ops::mul_scalar(ops::sum(ops::square(gx)), scale);
}

namespace detail {

// Mean over batch of the per-sample L1 norm: total absolute difference / N.
inline Tensor per_sample_l1(const char* name, const Tensor& a, const Tensor& b) {
  ops::detail::need_same_shape(name, a, b);
  return ops::mul_scalar(ops::sum(ops::abs(ops::sub(a, b))), 1.0 / a.dim(0));
}

// Mean absolute difference over every element; resolution independent.
inline Tensor mean_abs_diff(const char* name, const Tensor& a, const Tensor& b) {
  ops::detail::need_same_shape(name, a, b);
  return ops::mean(ops::abs(ops::sub(a, b)));
}

}  // namespace detail

// L1 between a target style code batch and its re-encoding, mean over batch
// of the per-vector norm.
inline Tensor style_recon_loss(const Tensor& s_target, const Tensor& s_recon) {
  return detail::per_sample_l1("style_recon_loss", s_target, s_recon);
}

// L1 between a sampled latent batch and its re-encoding; same reduction as
// the style variant.
inline Tensor latent_recon_loss(const Tensor& z, const Tensor& z_recon) {
  return detail::per_sample_l1("latent_recon_loss", z, z_recon);
}

// Mean absolute pixel difference between two outputs of the same input under
// different styles. Subtracted from the generator objective, so training
// pushes it up.
inline Tensor diversity_loss(const Tensor& img1, const Tensor& img2) {
  return detail::mean_abs_diff("diversity_loss", img1, img2);
}

// Mean absolute pixel difference between an input and its round trip through
// the target domain and back.
inline Tensor cycle_loss(const Tensor& x, const Tensor& x_recon) {
  return detail::mean_abs_diff("cycle_loss", x, x_recon);
}

// Softmax cross-entropy of [N, K] logits against integer labels, mean over
// batch. The row maximum is folded in as a constant: subtracting a constant
// shifts nothing analytically but keeps exp from overflowing.
inline Tensor classification_loss(const Tensor& logits, const std::vector<int>& labels) {
  ops::detail::need_ndim("classification_loss", logits, 2);
  const int n = logits.dim(0);
  const int k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("classification_loss: expected " + std::to_string(n) +
                                " labels, got " + std::to_string(labels.size()));
  std::vector<double> row_max(static_cast<size_t>(n));
  std::vector<double> onehot(static_cast<size_t>(n) * k, 0.0);
  const double* p = logits.ptr();
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw std::invalid_argument("classification_loss: label " + std::to_string(labels[i]) +
                                  " outside [0, " + std::to_string(k) + ")");
    row_max[i] = *std::max_element(p + static_cast<size_t>(i) * k, p + static_cast<size_t>(i + 1) * k);
    onehot[static_cast<size_t>(i) * k + labels[i]] = 1.0;
  }
  Tensor m = Tensor::from_data({n}, std::move(row_max));
  Tensor oh = Tensor::from_data({n, k}, std::move(onehot));
  Tensor shifted = ops::sub(logits, ops::bcast1(m, k));
  Tensor lse = ops::add(ops::log(ops::sum1(ops::exp(shifted))), m);
  Tensor picked = ops::sum1(ops::mul(logits, oh));
  return ops::mul_scalar(ops::sum(ops::sub(lse, picked)), 1.0 / n);
}

// Diversity weight, decayed linearly from its initial value to zero over the
// first ds_decay_iters iterations and clamped there.
inline double lambda_ds_at(double lambda_ds0, long iter, int ds_decay_iters) {
  if (ds_decay_iters <= 0) return 0.0;
  const double frac = 1.0 - static_cast<double>(iter) / ds_decay_iters;
  return lambda_ds0 * std::max(0.0, frac);
}

// Scalar record of one optimization step for one guidance mode. total_g and
// total_d are the values actually differentiated, reconstructed exactly by
//   total_g = adv_g + lambda_sty*sty - lambda_ds*ds + lambda_cyc*cyc
//   total_d = adv_d + r1
// over the entries below (auxiliary classification terms, when enabled, are
// folded into adv_g/adv_d so the identities keep holding).
struct LossReport {
  long iter = 0;
  std::string mode;  // "latent" or "reference"
  double adv_d = 0.0;
  double adv_g = 0.0;
  double r1 = 0.0;
  double sty = 0.0;
  double ds = 0.0;
  double cyc = 0.0;
  double real_sigma = 0.0;  // mean sigmoid of the real logits, a D-accuracy proxy
  double total_d = 0.0;
  double total_g = 0.0;
  double lambda_ds = 0.0;  // weight actually applied at this iteration

  static std::string csv_header() {
    return "iter,mode,adv_d,adv_g,r1,sty,ds,cyc,real_sigma,total_d,total_g,lambda_ds";
  }

  std::string csv_line() const {
    std::ostringstream os;
    os.precision(std::numeric_limits<double>::max_digits10);
    os << iter << ',' << mode << ',' << adv_d << ',' << adv_g << ',' << r1 << ',' << sty << ','
       << ds << ',' << cyc << ',' << real_sigma << ',' << total_d << ',' << total_g << ','
       << lambda_ds;
    return os.str();
  }
};

namespace detail {

inline double finite_term(const Tensor& t, const char* name) {
  const double v = t.item();
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("non-finite ") + name + " loss: " + std::to_string(v));
  return v;
}

}  // namespace detail

// Raw generator-side terms before weighting. adv and cyc are always required;
// recon carries the style or latent reconstruction depending on the ablation;
// ds is only consulted when the diversity term is enabled; cls is the
// auxiliary classification term of the acgan discriminator head.
struct GeneratorParts {
  Tensor adv;
  Tensor recon;
  Tensor ds;
  Tensor cyc;
  Tensor cls;
};

// Weighted generator objective. Writes the generator fields of the report and
// returns the graph scalar to differentiate. Terms are combined in the fixed
// order adv, +lambda_sty*recon, -lambda_ds(iter)*ds, +lambda_cyc*cyc so the
// report identity holds bitwise; zero-weight terms are left out of the graph
// entirely rather than multiplied by zero.
inline Tensor assemble_generator_objective(const GeneratorParts& parts,
                                           const ExperimentConfig& cfg, long iter,
                                           LossReport& report) {
  if (!parts.adv.defined() || !parts.cyc.defined())
    throw std::invalid_argument("assemble_generator_objective: adv and cyc terms are required");
  const bool want_recon = cfg.ablation.recon_mode != "none";
  if (want_recon && !parts.recon.defined())
    throw std::invalid_argument("assemble_generator_objective: recon_mode " +
                                cfg.ablation.recon_mode + " needs a reconstruction term");
  const bool acgan = cfg.ablation.discriminator_head == "acgan";
  if (acgan && !parts.cls.defined())
    throw std::invalid_argument("assemble_generator_objective: acgan head needs a cls term");

  report.iter = iter;
  Tensor total = parts.adv;
  detail::finite_term(parts.adv, "adversarial");
  if (acgan) {
    detail::finite_term(parts.cls, "classification");
    total = ops::add(total, parts.cls);
  }
  report.adv_g = total.item();

  report.sty = 0.0;
  if (want_recon) {
    report.sty = detail::finite_term(parts.recon, "reconstruction");
    if (cfg.lambda_sty != 0.0)
      total = ops::add(total, ops::mul_scalar(parts.recon, cfg.lambda_sty));
  }

  const double lam_ds =
      cfg.ablation.use_ds ? lambda_ds_at(cfg.lambda_ds, iter, cfg.ds_decay_iters) : 0.0;
  report.lambda_ds = lam_ds;
  report.ds = 0.0;
  if (cfg.ablation.use_ds && parts.ds.defined()) {
    report.ds = detail::finite_term(parts.ds, "diversity");
    if (lam_ds != 0.0) total = ops::sub(total, ops::mul_scalar(parts.ds, lam_ds));
  }

  report.cyc = detail::finite_term(parts.cyc, "cycle");
  if (cfg.lambda_cyc != 0.0)
    total = ops::add(total, ops::mul_scalar(parts.cyc, cfg.lambda_cyc));

  report.total_g = detail::finite_term(total, "total generator");
  return total;
}

// Raw discriminator-side terms. adv and r1 are required (r1 may be the
// constant zero that r1_penalty returns for gamma = 0); cls is the acgan
// classification term on real images.
struct DiscriminatorParts {
  Tensor adv;
  Tensor r1;
  Tensor cls;
};

// Discriminator objective: adv + r1, with the acgan classification term
// folded into the adversarial entry. Writes the discriminator fields of the
// report and returns the graph scalar.
inline Tensor assemble_discriminator_objective(const DiscriminatorParts& parts,
                                               const ExperimentConfig& cfg, long iter,
                                               LossReport& report) {
  if (!parts.adv.defined() || !parts.r1.defined())
    throw std::invalid_argument("assemble_discriminator_objective: adv and r1 terms are required");
  const bool acgan = cfg.ablation.discriminator_head == "acgan";
  if (acgan && !parts.cls.defined())
    throw std::invalid_argument("assemble_discriminator_objective: acgan head needs a cls term");

  report.iter = iter;
  Tensor total = parts.adv;
  detail::finite_term(parts.adv, "adversarial");
  if (acgan) {
    detail::finite_term(parts.cls, "classification");
    total = ops::add(total, parts.cls);
  }
  report.adv_d = total.item();
  report.r1 = detail::finite_term(parts.r1, "gradient penalty");
  total = ops::add(total, parts.r1);
  report.total_d = detail::finite_term(total, "total discriminator");
  return total;
}

}  // namespace stylemorph::losses
