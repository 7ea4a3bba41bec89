#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "triflow/model_io.hpp"

using namespace triflow;
using testsupport::random_model;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("triflow_" + name))
      .string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return std::move(ss).str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("model files round trip bit-exactly") {
  FlowModel model = random_model(3, 2, 4, Nonlinearity::LogSym, true, 123);
  model.flip_after[2] = false;  // mixed flags survive the trip
  model.norm_absorbed = true;
  const std::string path = temp_path("roundtrip.trin");
  save_model(path, model, {{"seed", "123"}, {"note", "fixture"}});

  HeaderMap header;
  const FlowModel back = load_model(path, &header);
  CHECK(header.at("seed") == "123");
  CHECK(header.at("note") == "fixture");
  CHECK(back.norm_absorbed == model.norm_absorbed);
  CHECK(back.flip_after == model.flip_after);
  REQUIRE(back.n_layers() == model.n_layers());
  for (Index l = 0; l < model.n_layers(); ++l) {
    const TriUnit& a = model.layers[static_cast<std::size_t>(l)];
    const TriUnit& b = back.layers[static_cast<std::size_t>(l)];
    CHECK(a.nonlinearity == b.nonlinearity);
    CHECK(a.packed == b.packed);          // bitwise
    CHECK(a.v_diag_raw == b.v_diag_raw);
    CHECK(a.a == b.a);
    CHECK(a.b == b.b);
  }

  // a second save of the loaded model is byte-identical
  const std::string path2 = temp_path("roundtrip2.trin");
  save_model(path2, back, {{"seed", "123"}, {"note", "fixture"}});
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("payload length is enforced") {
  FlowModel model = random_model(2, 3, 2, Nonlinearity::Tanh, false, 5);
  const std::string path = temp_path("payload.trin");
  save_model(path, model);

  const std::string bytes = slurp(path);
  // stored float count per layer: N*B*N + 2*N*B + N
  const Index per_layer = stored_float_count(2, 3);
  CHECK(per_layer == 2 * 3 * 2 + 2 * 2 * 3 + 2);
  const std::size_t header_len =
      std::size_t(static_cast<unsigned char>(bytes[8])) |
      (std::size_t(static_cast<unsigned char>(bytes[9])) << 8) |
      (std::size_t(static_cast<unsigned char>(bytes[10])) << 16) |
      (std::size_t(static_cast<unsigned char>(bytes[11])) << 24);
  CHECK(bytes.size() == 12 + header_len + 8 * 2 * std::size_t(per_layer));

  SUBCASE("truncated payload is rejected") {
    spit(path, bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  SUBCASE("extra bytes are rejected") {
    spit(path, bytes + "x");
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  SUBCASE("bad magic names the expectation") {
    std::string corrupt = bytes;
    corrupt[0] = 'X';
    spit(path, corrupt);
    try {
      load_model(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("TRIN") != std::string::npos);
    }
  }
  SUBCASE("flipping one payload bit still parses to valid parameters") {
    std::string corrupt = bytes;
    corrupt[corrupt.size() - 3] ^= 0x40;  // some float in the last b vector
    spit(path, corrupt);
    CHECK(slurp(path) != bytes);          // the file hash differs
    const FlowModel loaded = load_model(path);  // raw values are unconstrained
    const auto fwd = flow_forward(loaded, Vector::Zero(2));
    CHECK(fwd.y.allFinite());
  }
}

TEST_CASE("storage economy") {
  // exact packed float count, and the packed/naive ratio approaches 1/4 once
  // N dominates (naive: dense U, dense V, and two float masks, plus a and b)
  auto ratio = [](Index n, Index b) {
    const double packed = double(stored_float_count(n, b));
    const double naive = 4.0 * double(n) * double(b) * double(n) +
                         double(n) * double(b) + double(n);
    return packed / naive;
  };
  CHECK(stored_float_count(784, 100) == 784 * 100 * 784 + 2 * 784 * 100 + 784);
  CHECK(ratio(16, 1) < 0.3);
  CHECK(ratio(16, 4) < 0.3);
  CHECK(ratio(784, 100) < 0.26);   // "about one fourth" at image scale
  CHECK(ratio(3072, 8) < 0.26);
  CHECK(ratio(784, 100) > 0.25);
}

TEST_CASE("missing files raise io errors") {
  CHECK_THROWS_AS(load_model(temp_path("never_written.trin")), IoError);
}
