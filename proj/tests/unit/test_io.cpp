#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "dynenc/io.hpp"
#include "dynenc/rng.hpp"
#include "test_util.hpp"

using namespace dynenc;

TEST(Csv, HeaderIsSkippedOnlyWhenAllowed) {
  auto dir = dynenc::testing::temp_dir("csv_header");
  {
    std::ofstream f(dir / "h.csv");
    f << "x,y\n1, 2\n\n3,4.5e-1\n";
  }
  auto t = read_csv(dir / "h.csv", true);
  EXPECT_EQ(t.rows, 2u);
  EXPECT_EQ(t.cols, 2u);
  EXPECT_EQ(t(1, 1), 0.45);
  EXPECT_THROW(read_csv(dir / "h.csv"), ParseError);
}

TEST(Csv, WriteReadRoundTripIsExact) {
  auto dir = dynenc::testing::temp_dir("csv_roundtrip");
  Rng rng = make_stream(1, "test.csv");
  std::vector<double> v(30);
  for (auto& x : v) x = uniform(rng, -1e3, 1e3) / 7.0;
  v[3] = std::numeric_limits<double>::denorm_min();
  write_csv(dir / "a.csv", 3, v, "a,b,c");
  auto t = read_csv(dir / "a.csv", true);
  EXPECT_EQ(t.values, v);
}

TEST(F64le, RoundTripAndLittleEndianLayout) {
  auto dir = dynenc::testing::temp_dir("f64le");
  write_f64le(dir / "x.bin", {1.0, -0.0, 3.5});
  EXPECT_EQ(read_f64le(dir / "x.bin"), (std::vector<double>{1.0, -0.0, 3.5}));
  std::ifstream in(dir / "x.bin", std::ios::binary);
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  EXPECT_EQ(b[7], 0x3F);  // 1.0 = 0x3FF0000000000000
  EXPECT_EQ(b[6], 0xF0);
  EXPECT_EQ(b[0], 0x00);
}

TEST(F64le, TruncatedFileErrors) {
  auto dir = dynenc::testing::temp_dir("f64le_bad");
  {
    std::ofstream f(dir / "x.bin", std::ios::binary);
    f << "abc";
  }
  EXPECT_THROW(read_f64le(dir / "x.bin"), ParseError);
  EXPECT_THROW(read_f64le(dir / "missing.bin"), IoError);
}

TEST(Json, MalformedFileErrors) {
  auto dir = dynenc::testing::temp_dir("json_bad");
  {
    std::ofstream f(dir / "m.json");
    f << "{\"a\": ";
  }
  EXPECT_THROW(read_json(dir / "m.json"), ParseError);
  write_json(dir / "ok.json", Json{{"a", 1}});
  EXPECT_EQ(read_json(dir / "ok.json").at("a").get<int>(), 1);
}

TEST(Rng, StreamsAreNamedAndIndexed) {
  auto a = make_stream(1, "x");
  auto b = make_stream(1, "x");
  auto c = make_stream(1, "y");
  auto d = make_stream(1, "x", 1);
  auto va = a();
  EXPECT_EQ(va, b());
  EXPECT_NE(va, c());
  EXPECT_NE(va, d());
}

TEST(Rng, UniformStaysInRange) {
  auto r = make_stream(5, "u");
  for (int i = 0; i < 10000; ++i) {
    double u = uniform(r, -2, 3);
    ASSERT_GE(u, -2.0);
    ASSERT_LT(u, 3.0);
    ASSERT_LT(uniform_index(r, 7), 7u);
  }
}
