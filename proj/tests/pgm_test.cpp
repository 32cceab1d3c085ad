#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <mcnet/mcnet.hpp>

using mcnet::PgmImage;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pgm_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Pgm, EightBitRoundTrip) {
  TempDir tmp;
  PgmImage img;
  img.width = 3;
  img.height = 2;
  img.maxval = 255;
  img.data = {0, 17, 255, 128, 1, 42};
  const std::string p = tmp.file("u8.pgm");
  mcnet::write_pgm(p, img);
  PgmImage back = mcnet::read_pgm(p);
  EXPECT_EQ(back.width, 3);
  EXPECT_EQ(back.height, 2);
  EXPECT_EQ(back.maxval, 255);
  EXPECT_EQ(back.data, img.data);

  // Second write of the re-read image must be byte-identical.
  const std::string p2 = tmp.file("u8b.pgm");
  mcnet::write_pgm(p2, back);
  EXPECT_EQ(slurp(p), slurp(p2));
}

TEST(Pgm, SixteenBitRoundTripBigEndian) {
  TempDir tmp;
  PgmImage img;
  img.width = 2;
  img.height = 2;
  img.maxval = 65535;
  img.data = {0, 65535, 256, 513};
  const std::string p = tmp.file("u16.pgm");
  mcnet::write_pgm(p, img);
  PgmImage back = mcnet::read_pgm(p);
  EXPECT_EQ(back.maxval, 65535);
  EXPECT_EQ(back.data, img.data);

  // 256 = 0x0100 must serialize high byte first.
  const std::string bytes = slurp(p);
  const std::size_t raster = bytes.size() - 8;
  EXPECT_EQ(static_cast<unsigned char>(bytes[raster + 4]), 0x01);
  EXPECT_EQ(static_cast<unsigned char>(bytes[raster + 5]), 0x00);
}

TEST(Pgm, CommentsAndWhitespaceInHeader) {
  TempDir tmp;
  const std::string p = tmp.file("comments.pgm");
  spit(p, "P5\n# a comment line\n2 # trailing comment\n# another\n1\n255\n\x07\x09");
  PgmImage img = mcnet::read_pgm(p);
  EXPECT_EQ(img.width, 2);
  EXPECT_EQ(img.height, 1);
  EXPECT_EQ(img.data, (std::vector<std::uint16_t>{7, 9}));
}

TEST(Pgm, RejectsWrongMagic) {
  TempDir tmp;
  const std::string p = tmp.file("p2.pgm");
  spit(p, "P2\n2 1\n255\n7 9\n");
  try {
    mcnet::read_pgm(p);
    FAIL() << "expected DataError";
  } catch (const mcnet::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("at byte"), std::string::npos) << e.what();
  }
}

TEST(Pgm, RejectsBadMaxval) {
  TempDir tmp;
  const std::string p = tmp.file("maxval.pgm");
  spit(p, "P5\n2 1\n1000\n\x01\x02");
  try {
    mcnet::read_pgm(p);
    FAIL() << "expected DataError";
  } catch (const mcnet::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("1000"), std::string::npos) << e.what();
  }
}

TEST(Pgm, RejectsMalformedDimension) {
  TempDir tmp;
  const std::string p = tmp.file("dim.pgm");
  spit(p, "P5\nxy 1\n255\n\x01\x02");
  EXPECT_THROW(mcnet::read_pgm(p), mcnet::DataError);
}

TEST(Pgm, TruncatedRasterReportsOffset) {
  TempDir tmp;
  const std::string p = tmp.file("trunc.pgm");
  spit(p, "P5\n4 4\n255\n\x01\x02\x03");  // 3 of 16 raster bytes
  try {
    mcnet::read_pgm(p);
    FAIL() << "expected DataError";
  } catch (const mcnet::DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("truncated raster"), std::string::npos) << msg;
    EXPECT_NE(msg.find("at byte"), std::string::npos) << msg;
  }
}

TEST(Pgm, MissingFileIsDataError) {
  EXPECT_THROW(mcnet::read_pgm("/nonexistent/missing.pgm"), mcnet::DataError);
}

TEST(Heatmap, NormalizesAndWritesSidecar) {
  TempDir tmp;
  const std::string p = tmp.file("heat.pgm");
  mcnet::write_heatmap(p, 2, 2, {0.1, 0.2, 0.15, 0.3});
  PgmImage img = mcnet::read_pgm(p);
  EXPECT_EQ(img.maxval, 255);
  EXPECT_EQ(img.data[0], 0);    // min maps to 0
  EXPECT_EQ(img.data[3], 255);  // max maps to 255
  EXPECT_EQ(img.data[1], 128);  // (0.2-0.1)/0.2*255 = 127.5, rounds half away
  EXPECT_EQ(img.data[2], 64);   // 63.75 -> 64

  const std::string side = slurp(tmp.file("heat.range.txt"));
  EXPECT_EQ(side, "min=0.1 max=0.3\n");
}

TEST(Heatmap, ConstantMapIsAllZeros) {
  TempDir tmp;
  const std::string p = tmp.file("flat.pgm");
  mcnet::write_heatmap(p, 3, 1, {0.7, 0.7, 0.7});
  PgmImage img = mcnet::read_pgm(p);
  EXPECT_EQ(img.data, (std::vector<std::uint16_t>{0, 0, 0}));
  const std::string side = slurp(tmp.file("flat.range.txt"));
  EXPECT_EQ(side, "min=0.7 max=0.7\n");
}

TEST(Heatmap, SizeMismatchThrows) {
  TempDir tmp;
  EXPECT_THROW(mcnet::write_heatmap(tmp.file("bad.pgm"), 2, 2, {1.0}), mcnet::ConfigError);
}
