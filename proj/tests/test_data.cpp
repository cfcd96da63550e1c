#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "stylemorph/data.hpp"
#include "testutil.hpp"

using namespace stylemorph;
namespace fs = std::filesystem;

TEST_CASE("scan_dataset splits by sorted filename tail") {
  fs::path root = testutil::temp_dir("scan");
  testutil::make_shape_dataset(root, 10);

  DomainDataset ds = scan_dataset(root.string(), 0.2);
  REQUIRE(ds.domains == std::vector<std::string>{"circles", "squares", "triangles"});
  for (int d = 0; d < 3; ++d) {
    CHECK(ds.train_index[d].size() == 8);
    CHECK(ds.test_index[d].size() == 2);
    // Tail of the sorted list is the test set.
    CHECK(ds.test_index[d].back().find("img_009") != std::string::npos);
    CHECK(ds.train_index[d].front().find("img_000") != std::string::npos);
  }
  CHECK(ds.train_total() == 24);
  CHECK(ds.domain_index("squares") == 1);
  CHECK(ds.domain_index("nope") == -1);

  // Determinism: scanning twice yields identical indices.
  DomainDataset ds2 = scan_dataset(root.string(), 0.2);
  CHECK(ds.train_index == ds2.train_index);
  CHECK(ds.test_index == ds2.test_index);
  fs::remove_all(root);
}

TEST_CASE("scan_dataset error cases") {
  CHECK_THROWS_WITH(scan_dataset("/no/such/dir", 0.1),
                    Catch::Matchers::ContainsSubstring("not found"));

  fs::path one = testutil::temp_dir("one_domain");
  fs::create_directories(one / "only");
  cv::imwrite((one / "only" / "a.png").string(), cv::Mat(8, 8, CV_8UC3, cv::Scalar(1, 2, 3)));
  CHECK_THROWS_WITH(scan_dataset(one.string(), 0.1),
                    Catch::Matchers::ContainsSubstring("fewer than 2 domains"));
  fs::remove_all(one);

  fs::path bad = testutil::temp_dir("undecodable");
  testutil::make_solid_dataset(bad, 3);
  std::ofstream(bad / "black" / "junk.png") << "this is not a png";
  DomainDataset ds = scan_dataset(bad.string(), 0.0);  // junk skipped, not fatal
  CHECK(ds.train_index[0].size() == 3);

  fs::path allbad = testutil::temp_dir("allbad");
  fs::create_directories(allbad / "a");
  fs::create_directories(allbad / "b");
  std::ofstream(allbad / "a" / "x.png") << "junk";
  cv::imwrite((allbad / "b" / "y.png").string(), cv::Mat(8, 8, CV_8UC3, cv::Scalar(0, 0, 0)));
  CHECK_THROWS_WITH(scan_dataset(allbad.string(), 0.0),
                    Catch::Matchers::ContainsSubstring("'a'"));
  fs::remove_all(bad);
  fs::remove_all(allbad);

  CHECK_THROWS_AS(scan_dataset("/tmp", 1.0), DataError);
}

TEST_CASE("train batches are deterministic, labeled, and in range") {
  fs::path root = testutil::temp_dir("solid");
  testutil::make_solid_dataset(root, 4);
  DomainDataset ds = scan_dataset(root.string(), 0.25);

  SeededRng r1(5), r2(5);
  ImageBatch b1 = sample_train_batch(ds, 6, 32, r1);
  ImageBatch b2 = sample_train_batch(ds, 6, 32, r2);
  REQUIRE(b1.pixels.shape() == std::vector<int>{6, 3, 32, 32});
  CHECK(b1.pixels.data() == b2.pixels.data());
  CHECK(b1.labels == b2.labels);

  for (int i = 0; i < 6; ++i) {
    REQUIRE(b1.labels[i] >= 0);
    REQUIRE(b1.labels[i] < 2);
    // Label/folder bijection: domain "black" is exactly -1, "white" exactly +1.
    Tensor img = batch_slice(b1.pixels, i);
    double expect = b1.labels[i] == 0 ? -1.0 : 1.0;
    for (double v : img.data()) REQUIRE(v == expect);
  }
  fs::remove_all(root);
}

TEST_CASE("reference pairs share labels and differ per slot") {
  fs::path root = testutil::temp_dir("refs");
  testutil::make_shape_dataset(root, 5);
  DomainDataset ds = scan_dataset(root.string(), 0.2);

  SeededRng rng(9);
  ReferenceBatch rb = sample_reference_pair(ds, 8, 32, rng);
  CHECK(rb.first.labels == rb.second.labels);
  REQUIRE(rb.first.pixels.shape() == std::vector<int>{8, 3, 32, 32});
  for (double v : rb.first.pixels.data()) {
    REQUIRE(v >= -1.0);
    REQUIRE(v <= 1.0);
  }

  // Distinct images per slot, up to flips: with 4 train images per domain and
  // distinct indices, pixel content differs (shape geometry is jittered).
  for (int i = 0; i < 8; ++i) {
    Tensor a = batch_slice(rb.first.pixels, i);
    Tensor b = batch_slice(rb.second.pixels, i);
    bool differs = a.data() != b.data() && a.data() != imgio::hflip(b).data();
    CHECK(differs);
  }

  // A domain with fewer than 2 train images is rejected by name.
  fs::path tiny = testutil::temp_dir("tiny_refs");
  testutil::make_solid_dataset(tiny, 1);
  DomainDataset tds = scan_dataset(tiny.string(), 0.0);
  SeededRng rng2(1);
  CHECK_THROWS_WITH(sample_reference_pair(tds, 2, 32, rng2),
                    Catch::Matchers::ContainsSubstring("black"));
  fs::remove_all(root);
  fs::remove_all(tiny);
}

TEST_CASE("latent sampling is seeded standard normal") {
  SeededRng a(3), b(3);
  auto z1 = sample_latents(5, 16, a);
  auto z2 = sample_latents(5, 16, b);
  REQUIRE(z1.size() == 5);
  for (size_t i = 0; i < z1.size(); ++i) CHECK(z1[i].data() == z2[i].data());
  CHECK(sample_latents(0, 16, a).empty());

  // Moment bounds at 10^5 samples.
  SeededRng big(77);
  const int n = 100000 / 16;
  double mean[16] = {0}, var[16] = {0};
  auto zs = sample_latents(n, 16, big);
  for (const auto& z : zs)
    for (int j = 0; j < 16; ++j) mean[j] += z.data()[j];
  for (int j = 0; j < 16; ++j) mean[j] /= n;
  for (const auto& z : zs)
    for (int j = 0; j < 16; ++j) var[j] += (z.data()[j] - mean[j]) * (z.data()[j] - mean[j]);
  for (int j = 0; j < 16; ++j) {
    CHECK(std::abs(mean[j]) < 0.05);
    CHECK(std::abs(var[j] / (n - 1) - 1.0) < 0.06);
  }

  Tensor stacked = stack_rows(z1);
  REQUIRE(stacked.shape() == std::vector<int>{5, 16});
  CHECK(stacked.data()[17] == z1[1].data()[1]);
}

TEST_CASE("denormalize maps [-1,1] to rounded 8-bit values") {
  CHECK(imgio::denormalize_value(-1.0) == 0);
  CHECK(imgio::denormalize_value(1.0) == 255);
  CHECK(imgio::denormalize_value(0.0) == 128);  // 127.5 rounds half up
  CHECK(imgio::denormalize_value(1.7) == 255);
  CHECK(imgio::denormalize_value(-3.0) == 0);
}

TEST_CASE("image conversion round-trips 8-bit data exactly") {
  // Gradient image covering many byte values.
  cv::Mat img(16, 16, CV_8UC3);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      img.at<cv::Vec3b>(i, j) = cv::Vec3b(static_cast<uint8_t>(i * 16 + j),
                                          static_cast<uint8_t>(255 - i * 16 - j),
                                          static_cast<uint8_t>(i * 7 + j * 3));
  Tensor t = imgio::mat8_to_tensor(img);
  cv::Mat back = imgio::tensor_to_mat8(t);
  REQUIRE(cv::countNonZero(cv::Mat(back != img).reshape(1)) == 0);

  // PNG write/read keeps bytes.
  fs::path p = testutil::temp_dir("png") / "x.png";
  imgio::write_png(p.string(), t);
  Tensor loaded = imgio::load_image(p.string(), 16);
  CHECK(loaded.data() == t.data());
  fs::remove_all(p.parent_path());
}

TEST_CASE("hflip mirrors columns and is an involution") {
  Tensor img = Tensor::from_data({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor f = imgio::hflip(img);
  CHECK(f.data() == std::vector<double>{3, 2, 1, 6, 5, 4});
  CHECK(imgio::hflip(f).data() == img.data());
}

TEST_CASE("load_image resizes to the requested square") {
  fs::path dir = testutil::temp_dir("resize");
  cv::Mat img(64, 48, CV_8UC3, cv::Scalar(10, 200, 30));
  cv::imwrite((dir / "r.png").string(), img);
  Tensor t = imgio::load_image((dir / "r.png").string(), 32);
  REQUIRE(t.shape() == std::vector<int>{3, 32, 32});
  // Solid color survives bilinear resampling exactly.
  CHECK(t.data()[0] == Catch::Approx(30 / 127.5 - 1.0));
  fs::remove_all(dir);
}
