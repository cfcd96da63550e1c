#pragma once

// Inference-side translation: latent-guided, reference-guided, style
// interpolation, and qualitative grids. Everything here reads the EMA
// shadows only and builds no graph, so synthesis calls never perturb a
// training run and are safe to interleave with it.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylemorph/core/ops.hpp"
#include "stylemorph/core/tensor.hpp"
#include "stylemorph/data.hpp"
#include "stylemorph/train/training.hpp"

namespace stylemorph::synth {

namespace detail {

inline void check_domain(const train::ModelBundle& b, int y_target, const char* who) {
  if (y_target < 0 || y_target >= b.cfg.num_domains)
    throw std::out_of_range(std::string(who) + ": target domain " + std::to_string(y_target) +
                            " outside [0, " + std::to_string(b.cfg.num_domains) + ")");
}

inline void check_batch_image(const train::ModelBundle& b, const Tensor& x, const char* who) {
  const int s = b.cfg.image_size;
  if (x.ndim() != 4 || x.dim(0) < 1 || x.dim(1) != 3 || x.dim(2) != s || x.dim(3) != s)
    throw std::invalid_argument(std::string(who) + ": expected [N, 3, " + std::to_string(s) +
                                ", " + std::to_string(s) + "] source batch");
}

inline Tensor repeat_row(const Tensor& row, int n) {
  const int w = row.dim(1);
  Tensor out = Tensor::zeros({n, w});
  for (int i = 0; i < n; ++i)
    std::copy_n(row.ptr(), static_cast<size_t>(w), out.ptr() + static_cast<size_t>(i) * w);
  return out;
}

// Copies a [3, S, S] tile into cell (r, c) of a [3, (R+1)S, (C+1)S] canvas.
inline void paste(Tensor& canvas, const Tensor& tile, int r, int c) {
  const int h = canvas.dim(1), w = canvas.dim(2), s = tile.dim(1);
  double* g = canvas.ptr();
  const double* t = tile.ptr();
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < s; ++i)
      std::copy_n(t + (static_cast<size_t>(ch) * s + i) * s, static_cast<size_t>(s),
                  g + (static_cast<size_t>(ch) * h + r * s + i) * w +
                      static_cast<size_t>(c) * s);
}

}  // namespace detail

// Style toward y_target derived from latents, read from the EMA networks.
// z is [N, latent_dim]; paths that ignore latents (concat, embedding) still
// accept it so callers can treat every rung uniformly.
inline Tensor latent_style_ema(const train::ModelBundle& b, const Tensor& z, int y_target) {
  detail::check_domain(b, y_target, "latent_style_ema");
  if (z.ndim() != 2 || z.dim(1) != b.cfg.latent_dim)
    throw std::invalid_argument("latent_style_ema: expected [N, " +
                                std::to_string(b.cfg.latent_dim) + "] latents");
  NoGradGuard ng;
  return train::latent_style(b, z, std::vector<int>(static_cast<size_t>(z.dim(0)), y_target),
                             /*ema=*/true);
}

// Style toward y_target extracted from reference images via the EMA encoder.
inline Tensor reference_style_ema(const train::ModelBundle& b, const Tensor& x_ref,
                                  int y_target) {
  detail::check_domain(b, y_target, "reference_style_ema");
  detail::check_batch_image(b, x_ref, "reference_style_ema");
  if (!b.has_encoder())
    throw std::invalid_argument(
        "reference_style_ema: this configuration has no style encoder, so references cannot "
        "drive synthesis");
  NoGradGuard ng;
  return train::image_style(b, x_ref,
                            std::vector<int>(static_cast<size_t>(x_ref.dim(0)), y_target),
                            /*ema=*/true);
}

// Applies precomputed style rows through the EMA generator. A single style
// row is broadcast over the whole source batch.
inline Tensor translate_with_style(const train::ModelBundle& b, const Tensor& x,
                                   const Tensor& s) {
  detail::check_batch_image(b, x, "translate_with_style");
  if (s.ndim() != 2)
    throw std::invalid_argument("translate_with_style: expected [N, width] style rows");
  Tensor style = s;
  if (s.dim(0) == 1 && x.dim(0) > 1) style = detail::repeat_row(s, x.dim(0));
  if (style.dim(0) != x.dim(0))
    throw std::invalid_argument("translate_with_style: " + std::to_string(x.dim(0)) +
                                " sources vs " + std::to_string(s.dim(0)) + " style rows");
  NoGradGuard ng;
  return b.g_ema.forward(x, style);
}

inline Tensor translate_latent(const train::ModelBundle& b, const Tensor& x, int y_target,
                               const Tensor& z) {
  if (z.ndim() != 2 || z.dim(0) != x.dim(0))
    throw std::invalid_argument("translate_latent: need one latent row per source image");
  return translate_with_style(b, x, latent_style_ema(b, z, y_target));
}

inline Tensor translate_reference(const train::ModelBundle& b, const Tensor& x,
                                  const Tensor& x_ref, int y_target) {
  return translate_with_style(b, x, reference_style_ema(b, x_ref, y_target));
}

// Frames along the straight line between two style rows: s(t) = (1-t)a + tb
// at `steps` equally spaced t in [0, 1]. The endpoint frames reuse the input
// styles verbatim, so they match direct translations bit for bit.
inline std::vector<Tensor> interpolate_styles(const train::ModelBundle& b, const Tensor& x,
                                              const Tensor& s_a, const Tensor& s_b, int steps) {
  if (steps < 2) throw std::invalid_argument("interpolate_styles: steps must be >= 2");
  if (s_a.shape() != s_b.shape())
    throw std::invalid_argument("interpolate_styles: style shapes differ");
  std::vector<Tensor> frames;
  frames.reserve(static_cast<size_t>(steps));
  NoGradGuard ng;
  for (int k = 0; k < steps; ++k) {
    Tensor s;
    if (k == 0) s = s_a;
    else if (k == steps - 1) s = s_b;
    else {
      const double t = static_cast<double>(k) / (steps - 1);
      s = ops::add(ops::mul_scalar(s_a, 1.0 - t), ops::mul_scalar(s_b, t));
    }
    frames.push_back(translate_with_style(b, x, s));
  }
  return frames;
}

// One column of a qualitative grid: the style applied down the column, an
// optional header image (references show themselves; latent-driven columns
// leave the header neutral), and provenance for the sidecar.
struct GridColumn {
  Tensor style;       // [1, width]
  Tensor header;      // [3, S, S] or undefined
  int target_domain = 0;
  std::string annotation;
};

// (R+1) x (C+1) cell canvas: neutral corner, column headers across the top,
// sources down the left edge, and cell (i, j) = source i translated with
// column j's style. Cells not covered by an image stay at the neutral
// mid-gray fill (tensor 0.0 encodes to pixel 128).
inline Tensor render_grid(const train::ModelBundle& b, const Tensor& sources,
                          const std::vector<GridColumn>& columns) {
  detail::check_batch_image(b, sources, "render_grid");
  if (columns.empty()) throw std::invalid_argument("render_grid: no style columns");
  const int s = b.cfg.image_size;
  const int rows = sources.dim(0);
  const int cols = static_cast<int>(columns.size());
  Tensor canvas = Tensor::zeros({3, (rows + 1) * s, (cols + 1) * s});

  for (int i = 0; i < rows; ++i) detail::paste(canvas, batch_slice(sources, i), i + 1, 0);
  for (int j = 0; j < cols; ++j) {
    const GridColumn& col = columns[static_cast<size_t>(j)];
    if (col.header.defined()) detail::paste(canvas, col.header, 0, j + 1);
    Tensor out = translate_with_style(b, sources, col.style);
    for (int i = 0; i < rows; ++i) detail::paste(canvas, batch_slice(out, i), i + 1, j + 1);
  }
  return canvas;
}

// PNG plus a sidecar JSON naming what every cell shows, so any figure can be
// regenerated from its description alone.
inline void write_grid(const std::string& png_path, const Tensor& canvas,
                       const std::vector<std::string>& source_names,
                       const std::vector<GridColumn>& columns) {
  imgio::write_png(png_path, canvas);
  nlohmann::json cells = nlohmann::json::array();
  for (size_t i = 0; i < source_names.size(); ++i)
    for (size_t j = 0; j < columns.size(); ++j)
      cells.push_back({{"row", i + 1},
                       {"col", j + 1},
                       {"source", source_names[i]},
                       {"style", columns[j].annotation},
                       {"target_domain", columns[j].target_domain}});
  nlohmann::json doc{{"image", png_path},
                     {"rows", source_names.size() + 1},
                     {"cols", columns.size() + 1},
                     {"cells", cells}};
  const std::string json_path = png_path.substr(0, png_path.rfind('.')) + ".json";
  std::ofstream out(json_path);
  if (!out) throw std::runtime_error("write_grid: cannot open " + json_path);
  out << doc.dump(2) << '\n';
}

// Progress hook for fit(): renders the same sources under the same latent
// panel at every artifact point, so files are directly comparable across
// iterations. Targets cycle through the domains column by column.
inline std::function<void(const train::ModelBundle&, long)> make_progress_grid_hook(
    const std::string& out_dir, const Tensor& sources,
    const std::vector<std::string>& source_names, const Tensor& z_panel) {
  return [out_dir, sources, source_names, z_panel](const train::ModelBundle& b, long iter) {
    std::vector<GridColumn> columns;
    for (int j = 0; j < z_panel.dim(0); ++j) {
      GridColumn col;
      col.target_domain = j % b.cfg.num_domains;
      Tensor z_row = Tensor::zeros({1, z_panel.dim(1)});
      std::copy_n(z_panel.ptr() + static_cast<size_t>(j) * z_panel.dim(1), z_panel.dim(1),
                  z_row.ptr());
      col.style = latent_style_ema(b, z_row, col.target_domain);
      col.annotation = "latent " + std::to_string(j) + " -> domain " +
                       std::to_string(col.target_domain);
      columns.push_back(std::move(col));
    }
    Tensor canvas = render_grid(b, sources, columns);
    char name[32];
    std::snprintf(name, sizeof(name), "samples_%06ld.png", iter);
    write_grid((std::filesystem::path(out_dir) / name).string(), canvas, source_names, columns);
  };
}

}  // namespace stylemorph::synth
