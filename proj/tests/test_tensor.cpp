#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "delg/common.hpp"
#include "delg/tensor.hpp"

using namespace delg;

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3, 4});
  REQUIRE(t.numel() == 24);
  REQUIRE(t.rank() == 3);
  t.at(1, 2, 3) = 7.0;
  REQUIRE(t.data[23] == 7.0);
  REQUIRE(t.shape_str() == "[2,3,4]");

  REQUIRE_THROWS_AS(Tensor({2, 0, 4}), Error);
  REQUIRE_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), Error);

  Tensor s = Tensor::scalar(3.5);
  REQUIRE(s.numel() == 1);
  REQUIRE(s[0] == 3.5);
}

TEST_CASE("tensor finiteness and norm") {
  Tensor t = Tensor::from({2}, {3.0, 4.0});
  REQUIRE(t.l2_norm() == Catch::Approx(5.0));
  REQUIRE(t.all_finite());
  t[0] = std::numeric_limits<double>::infinity();
  REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("shape mismatch errors carry both shapes") {
  Tensor a({2, 3});
  Tensor b({3, 2});
  try {
    require_same_shape(a, b, "op");
    FAIL("expected throw");
  } catch (const Error& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("[2,3]") != std::string::npos);
    REQUIRE(msg.find("[3,2]") != std::string::npos);
    REQUIRE(e.kind() == ErrorKind::shape);
  }
}

TEST_CASE("crc32 matches the standard check value") {
  const char* s = "123456789";
  REQUIRE(crc32(s, 9) == 0xcbf43926U);
}

TEST_CASE("rng is deterministic and fork streams differ") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next() == b.next());

  Rng c(42);
  Rng f1 = c.fork(1), f2 = c.fork(2);
  REQUIRE(f1.next() != f2.next());

  // uniform stays in [0,1), normal produces sane spread
  Rng d(7);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = d.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const double g = d.normal();
    sum += g;
    sq += g * g;
  }
  REQUIRE(std::abs(sum / n) < 0.05);
  REQUIRE(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("byte buffer round-trip with crc") {
  namespace fs = std::filesystem;
  const auto path = (fs::temp_directory_path() / "delg_bytes_test.bin").string();

  ByteWriter w;
  w.u32(0xdeadbeefU);
  w.f64(-1.25);
  w.str("hello");
  w.f32(2.5f);
  w.write_file_with_crc(path);

  {
    ByteReader r = ByteReader::from_file(path);
    r.check_crc("test");
    REQUIRE(r.u32() == 0xdeadbeefU);
    REQUIRE(r.f64() == -1.25);
    REQUIRE(r.str(5) == "hello");
    REQUIRE(r.f32() == 2.5f);
    REQUIRE(r.remaining() == 0);
  }

  // flipping any single byte must trip the checksum
  std::ifstream in(path, std::ios::binary);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  in.close();
  for (size_t i = 0; i < data.size(); ++i) {
    std::string corrupt = data;
    corrupt[i] = char(corrupt[i] ^ 0x5a);
    ByteReader r(corrupt);
    REQUIRE_THROWS_AS(r.check_crc("test"), Error);
  }
  fs::remove(path);
}
