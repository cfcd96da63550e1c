#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "stylemorph/config.hpp"
#include "stylemorph/losses.hpp"
#include "stylemorph/synthesis.hpp"
#include "testutil.hpp"

using namespace stylemorph;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig cfg = default_config("toy");
  cfg.image_size = 32;
  cfg.num_domains = 2;
  cfg.latent_dim = 4;
  cfg.style_dim = 8;
  cfg.hidden_dim = 16;
  cfg.base_channels = 4;
  cfg.max_channels = 8;
  cfg.batch_size = 2;
  cfg.seed = 11;
  return cfg;
}

train::ModelBundle full_bundle() {
  ExperimentConfig cfg = tiny_config();
  cfg.ablation.conditioning = "adain";
  cfg.ablation.recon_mode = "style";
  cfg.ablation.use_ds = true;
  return train::make_model_bundle(cfg);
}

// Cell (r, c) of a grid canvas as flat doubles, for bitwise comparison
// against a [3, s, s] tile.
std::vector<double> grid_block(const Tensor& canvas, int r, int c, int s) {
  const int h = canvas.dim(1), w = canvas.dim(2);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(3 * s * s));
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j)
        out.push_back(
            canvas.data()[(static_cast<size_t>(ch) * h + (r * s + i)) * w + c * s + j]);
  return out;
}

Tensor unsqueeze(const Tensor& img) {
  return Tensor::from_data({1, img.dim(0), img.dim(1), img.dim(2)}, img.data());
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("latent-guided translation is deterministic and shape preserving") {
  train::ModelBundle b = full_bundle();
  SeededRng rng(3);
  Tensor x = Tensor::randn({2, 3, 32, 32}, rng);
  Tensor z = Tensor::randn({2, b.cfg.latent_dim}, rng);

  Tensor o1 = synth::translate_latent(b, x, 1, z);
  Tensor o2 = synth::translate_latent(b, x, 1, z);
  REQUIRE(o1.shape() == x.shape());
  CHECK(o1.data() == o2.data());
  CHECK_FALSE(o1.requires_grad());
}

TEST_CASE("distinct latents move the output by exactly the diversity measure") {
  train::ModelBundle b = full_bundle();
  SeededRng rng(5);
  Tensor x = Tensor::randn({2, 3, 32, 32}, rng);
  Tensor z1 = Tensor::randn({2, b.cfg.latent_dim}, rng);
  Tensor z2 = Tensor::randn({2, b.cfg.latent_dim}, rng);

  Tensor o1 = synth::translate_latent(b, x, 0, z1);
  Tensor o2 = synth::translate_latent(b, x, 0, z2);
  const double spread = losses::diversity_loss(o1, o2).item();
  CHECK(spread > 0.0);

  double manual = 0.0;
  for (size_t i = 0; i < o1.data().size(); ++i) manual += std::abs(o1.data()[i] - o2.data()[i]);
  manual /= static_cast<double>(o1.data().size());
  CHECK_THAT(spread, Catch::Matchers::WithinAbs(manual, 1e-12));
}

TEST_CASE("synthesis reads only the averaged shadows and never writes the live nets") {
  train::ModelBundle b = full_bundle();
  SeededRng rng(7);
  Tensor x = Tensor::randn({1, 3, 32, 32}, rng);
  Tensor z = Tensor::randn({1, b.cfg.latent_dim}, rng);

  std::vector<double> live_before;
  for (const auto& [name, t] : b.g_params())
    live_before.insert(live_before.end(), t.data().begin(), t.data().end());

  Tensor before = synth::translate_latent(b, x, 0, z);

  std::vector<double> live_after;
  for (const auto& [name, t] : b.g_params())
    live_after.insert(live_after.end(), t.data().begin(), t.data().end());
  CHECK(live_before == live_after);

  // Drifting the live weights must not show up in synthesis output.
  auto gp = b.g_params();
  auto fp = b.f_params();
  gp.front().second.ptr()[0] += 0.5;
  fp.front().second.ptr()[0] += 0.5;
  Tensor after = synth::translate_latent(b, x, 0, z);
  CHECK(before.data() == after.data());
}

TEST_CASE("latent translation composes the shadow mapping and generator") {
  train::ModelBundle b = full_bundle();
  SeededRng rng(9);
  Tensor x = Tensor::randn({2, 3, 32, 32}, rng);
  Tensor z = Tensor::randn({2, b.cfg.latent_dim}, rng);

  NoGradGuard ng;
  Tensor s = b.f_ema.forward(z, {1, 1});
  Tensor expected = b.g_ema.forward(x, s);
  CHECK(synth::translate_latent(b, x, 1, z).data() == expected.data());
}

TEST_CASE("one reference drives every source in the batch") {
  train::ModelBundle b = full_bundle();
  SeededRng rng(13);
  Tensor x = Tensor::randn({3, 3, 32, 32}, rng);
  Tensor x_ref = Tensor::randn({1, 3, 32, 32}, rng);

  Tensor s = synth::reference_style_ema(b, x_ref, 1);
  REQUIRE(s.shape() == std::vector<int>{1, b.cfg.style_dim});

  Tensor out = synth::translate_reference(b, x, x_ref, 1);
  Tensor direct = synth::translate_with_style(b, x, s);
  CHECK(out.data() == direct.data());
}

TEST_CASE("style interpolation endpoints reproduce direct translations") {
  train::ModelBundle b = full_bundle();
  SeededRng rng(17);
  Tensor x = Tensor::randn({1, 3, 32, 32}, rng);
  Tensor z1 = Tensor::randn({1, b.cfg.latent_dim}, rng);
  Tensor z2 = Tensor::randn({1, b.cfg.latent_dim}, rng);
  Tensor s_a = synth::latent_style_ema(b, z1, 0);
  Tensor s_b = synth::latent_style_ema(b, z2, 1);

  SECTION("frames are equally spaced with verbatim endpoints") {
    auto frames = synth::interpolate_styles(b, x, s_a, s_b, 5);
    REQUIRE(frames.size() == 5);
    CHECK(frames.front().data() == synth::translate_with_style(b, x, s_a).data());
    CHECK(frames.back().data() == synth::translate_with_style(b, x, s_b).data());
    // Interior frames differ from both endpoints when the styles differ.
    CHECK(frames[2].data() != frames.front().data());
    CHECK(frames[2].data() != frames.back().data());
  }

  SECTION("two steps yield exactly the endpoint pair") {
    auto frames = synth::interpolate_styles(b, x, s_a, s_b, 2);
    REQUIRE(frames.size() == 2);
    CHECK(frames[0].data() == synth::translate_with_style(b, x, s_a).data());
    CHECK(frames[1].data() == synth::translate_with_style(b, x, s_b).data());
  }

  SECTION("identical endpoints collapse every frame") {
    auto frames = synth::interpolate_styles(b, x, s_a, s_a, 4);
    for (const auto& f : frames) CHECK(f.data() == frames.front().data());
  }

  SECTION("degenerate requests are rejected") {
    CHECK_THROWS_AS(synth::interpolate_styles(b, x, s_a, s_b, 1), std::invalid_argument);
    Tensor short_style = Tensor::zeros({1, b.cfg.style_dim / 2});
    CHECK_THROWS_AS(synth::interpolate_styles(b, x, s_a, short_style, 3),
                    std::invalid_argument);
  }
}

TEST_CASE("invalid synthesis queries are rejected") {
  train::ModelBundle b = full_bundle();
  SeededRng rng(19);
  Tensor x = Tensor::randn({1, 3, 32, 32}, rng);
  Tensor z = Tensor::randn({1, b.cfg.latent_dim}, rng);

  CHECK_THROWS_AS(synth::translate_latent(b, x, -1, z), std::out_of_range);
  CHECK_THROWS_AS(synth::translate_latent(b, x, b.cfg.num_domains, z), std::out_of_range);
  CHECK_THROWS_AS(synth::translate_latent(b, x, 0, Tensor::zeros({1, b.cfg.latent_dim + 1})),
                  std::invalid_argument);
  CHECK_THROWS_AS(synth::translate_latent(b, x, 0, Tensor::zeros({2, b.cfg.latent_dim})),
                  std::invalid_argument);
  CHECK_THROWS_AS(synth::translate_latent(b, Tensor::zeros({1, 3, 16, 16}), 0, z),
                  std::invalid_argument);

  ExperimentConfig cfg = tiny_config();
  cfg.ablation.conditioning = "adain";
  cfg.ablation.recon_mode = "none";
  cfg.ablation.use_ds = false;
  train::ModelBundle emb = train::make_model_bundle(cfg);
  CHECK_THROWS_AS(synth::reference_style_ema(emb, x, 0), std::invalid_argument);
}

TEST_CASE("grid places headers, sources, and translations cell by cell") {
  train::ModelBundle b = full_bundle();
  const int s = b.cfg.image_size;
  SeededRng rng(23);
  Tensor sources = Tensor::randn({3, 3, s, s}, rng);
  Tensor x_ref = Tensor::randn({1, 3, s, s}, rng);
  Tensor z = Tensor::randn({1, b.cfg.latent_dim}, rng);

  std::vector<synth::GridColumn> columns;
  synth::GridColumn latent_col;
  latent_col.style = synth::latent_style_ema(b, z, 0);
  latent_col.target_domain = 0;
  latent_col.annotation = "latent seed 23";
  columns.push_back(latent_col);
  synth::GridColumn ref_col;
  ref_col.style = synth::reference_style_ema(b, x_ref, 1);
  ref_col.header = batch_slice(x_ref, 0);
  ref_col.target_domain = 1;
  ref_col.annotation = "reference r0";
  columns.push_back(ref_col);

  Tensor canvas = synth::render_grid(b, sources, columns);
  REQUIRE(canvas.shape() == std::vector<int>{3, 4 * s, 3 * s});

  const std::vector<double> neutral(static_cast<size_t>(3 * s * s), 0.0);
  CHECK(grid_block(canvas, 0, 0, s) == neutral);
  // Latent columns have no header image; reference columns show theirs.
  CHECK(grid_block(canvas, 0, 1, s) == neutral);
  CHECK(grid_block(canvas, 0, 2, s) == batch_slice(x_ref, 0).data());

  for (int i = 0; i < 3; ++i)
    CHECK(grid_block(canvas, i + 1, 0, s) == batch_slice(sources, i).data());

  // Every cell matches a standalone single-image translation, so batching
  // inside the renderer does not change results.
  for (int i = 0; i < 3; ++i) {
    Tensor one = unsqueeze(batch_slice(sources, i));
    for (int j = 0; j < 2; ++j) {
      Tensor cell = synth::translate_with_style(b, one, columns[static_cast<size_t>(j)].style);
      CHECK(grid_block(canvas, i + 1, j + 1, s) == cell.data());
    }
  }

  CHECK_THROWS_AS(synth::render_grid(b, sources, {}), std::invalid_argument);
}

TEST_CASE("grid sidecar names every cell") {
  train::ModelBundle b = full_bundle();
  const int s = b.cfg.image_size;
  SeededRng rng(29);
  Tensor sources = Tensor::randn({2, 3, s, s}, rng);
  Tensor z = Tensor::randn({2, b.cfg.latent_dim}, rng);

  std::vector<synth::GridColumn> columns;
  for (int j = 0; j < 2; ++j) {
    synth::GridColumn col;
    Tensor z_row = Tensor::from_data({1, b.cfg.latent_dim},
                                     {z.data().begin() + j * b.cfg.latent_dim,
                                      z.data().begin() + (j + 1) * b.cfg.latent_dim});
    col.style = synth::latent_style_ema(b, z_row, j);
    col.target_domain = j;
    col.annotation = "latent " + std::to_string(j);
    columns.push_back(std::move(col));
  }
  Tensor canvas = synth::render_grid(b, sources, columns);

  auto dir = testutil::temp_dir("synth_grid");
  const std::string png = (dir / "grid.png").string();
  synth::write_grid(png, canvas, {"a.png", "b.png"}, columns);

  cv::Mat m = cv::imread(png);
  REQUIRE_FALSE(m.empty());
  CHECK(m.rows == 3 * s);
  CHECK(m.cols == 3 * s);

  std::ifstream in(dir / "grid.json");
  REQUIRE(in);
  nlohmann::json doc = nlohmann::json::parse(in);
  CHECK(doc["rows"] == 3);
  CHECK(doc["cols"] == 3);
  REQUIRE(doc["cells"].size() == 4);
  const auto& cell = doc["cells"][1];
  CHECK(cell["row"] == 1);
  CHECK(cell["col"] == 2);
  CHECK(cell["source"] == "a.png");
  CHECK(cell["style"] == "latent 1");
  CHECK(cell["target_domain"] == 1);
}

TEST_CASE("progress hook writes one panel per artifact point") {
  train::ModelBundle b = full_bundle();
  const int s = b.cfg.image_size;
  SeededRng rng(31);
  Tensor sources = Tensor::randn({2, 3, s, s}, rng);
  Tensor z_panel = Tensor::randn({3, b.cfg.latent_dim}, rng);

  auto dir = testutil::temp_dir("synth_hook");
  auto hook = synth::make_progress_grid_hook(dir.string(), sources, {"s0", "s1"}, z_panel);
  hook(b, 7);

  const auto png = dir / "samples_000007.png";
  const auto json = dir / "samples_000007.json";
  REQUIRE(std::filesystem::exists(png));
  REQUIRE(std::filesystem::exists(json));

  cv::Mat m = cv::imread(png.string());
  REQUIRE_FALSE(m.empty());
  CHECK(m.rows == 3 * s);
  CHECK(m.cols == 4 * s);

  // Unchanged shadows render the identical panel.
  const std::string first = read_bytes(png);
  hook(b, 8);
  CHECK(read_bytes(dir / "samples_000008.png") == first);
}
