#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "srlvae/checkpoint.hpp"
#include "srlvae/error.hpp"
#include "support.hpp"

using namespace srlvae;
namespace fs = std::filesystem;
namespace ts = srlvae::test_support;

namespace {

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("srlvae_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

CheckpointMeta meta_for(const VaeModel& m) {
  CheckpointMeta meta;
  meta.config = m.config();
  meta.image_height = 8;
  meta.image_width = 8;
  meta.seed = 42;
  meta.extractor_seed = 77;
  meta.provenance = {{"stage", "test"}, {"steps", "3"}};
  return meta;
}

}  // namespace

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  VaeModel m(ts::tiny_config(4));
  m.snapshot_reference();
  m.encoder_params()[0] += 1.0 / 3.0;
  save_checkpoint(dir_, m, meta_for(m));
  EXPECT_TRUE(fs::exists(dir_ / "meta.json"));
  EXPECT_TRUE(fs::exists(dir_ / "params.bin"));

  const Checkpoint c = load_checkpoint(dir_);
  EXPECT_EQ(c.model.encoder_params(), m.encoder_params());
  EXPECT_EQ(c.model.decoder_params(), m.decoder_params());
  ASSERT_TRUE(c.model.has_reference());
  EXPECT_EQ(c.model.reference_params(), m.reference_params());
  EXPECT_EQ(c.meta.config.channels, m.config().channels);
  EXPECT_EQ(c.meta.config.downsample_levels, 2);
  EXPECT_EQ(c.meta.seed, 42u);
  EXPECT_EQ(c.meta.extractor_seed, 77u);
  EXPECT_EQ(c.meta.provenance.at("stage"), "test");
  EXPECT_EQ(encoder_hash(c.model), encoder_hash(m));
  EXPECT_EQ(decoder_hash(c.model), decoder_hash(m));
}

TEST_F(CheckpointTest, BaselineHasNoReference) {
  const VaeModel m(ts::tiny_config(4));
  save_checkpoint(dir_, m, meta_for(m));
  EXPECT_FALSE(load_checkpoint(dir_).model.has_reference());
}

TEST_F(CheckpointTest, OverwriteReplacesContents) {
  VaeModel m(ts::tiny_config(4));
  save_checkpoint(dir_, m, meta_for(m));
  m.decoder_params()[1] = 0.5;
  save_checkpoint(dir_, m, meta_for(m));
  EXPECT_EQ(load_checkpoint(dir_).model.decoder_params()[1], 0.5);
}

TEST_F(CheckpointTest, ArchitectureMismatchIsConfigError) {
  const VaeModel m(ts::tiny_config(4));
  CheckpointMeta meta = meta_for(m);
  save_checkpoint(dir_, m, meta);
  // Swap the declared architecture for a wider one with the same layout.
  const VaeModel wide([] {
    VaeConfig c = ts::tiny_config(4);
    c.channels = {5, 6, 8};
    return c;
  }());
  const fs::path other = dir_.string() + "_wide";
  save_checkpoint(other, wide, meta_for(wide));
  fs::copy_file(other / "meta.json", dir_ / "meta.json", fs::copy_options::overwrite_existing);
  fs::remove_all(other);
  EXPECT_THROW(load_checkpoint(dir_), ConfigError);
}

TEST_F(CheckpointTest, MissingOrCorruptFiles) {
  EXPECT_THROW(load_checkpoint(dir_), ConfigError);
  const VaeModel m(ts::tiny_config(4));
  save_checkpoint(dir_, m, meta_for(m));
  const auto size = fs::file_size(dir_ / "params.bin");
  fs::resize_file(dir_ / "params.bin", size / 2);
  EXPECT_THROW(load_checkpoint(dir_), Error);

  save_checkpoint(dir_, m, meta_for(m));
  {
    std::ofstream os(dir_ / "meta.json");
    os << "{not json";
  }
  EXPECT_THROW(load_checkpoint(dir_), ConfigError);

  save_checkpoint(dir_, m, meta_for(m));
  {
    std::ofstream os(dir_ / "params.bin", std::ios::binary);
    os << "garbage!";
  }
  EXPECT_THROW(load_checkpoint(dir_), ConfigError);
}
