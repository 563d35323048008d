// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "layalign/checkpoint.hpp"
#include "layalign/data.hpp"
#include "layalign/errors.hpp"
#include "model_fixtures.hpp"

using namespace layalign;
using namespace layalign::fixtures;

namespace {

Checkpoint from_model(const LayAlignModel<float>& m) {
  Checkpoint c;
  c.stage = "stage1";
  c.step = 42;
  c.config_digest = std::string(64, 'a');
  c.metadata = R"({"note":"x"})";
  c.tensors = capture_tensors(m.named_parameters());
  return c;
}

std::filesystem::path scratch(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  LayAlignModel<float> model(tiny_config());
  fill_normal(model.gates().values, 0.3, 4);
  const auto dir = scratch("layalign_ckpt_a");
  save_checkpoint(from_model(model), dir / "a.ckpt");
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(loaded.stage, "stage1");
  EXPECT_EQ(loaded.step, 42u);
  EXPECT_EQ(loaded.metadata, R"({"note":"x"})");
  save_checkpoint(loaded, dir / "b.ckpt");
  EXPECT_EQ(read_file(dir / "a.ckpt"), read_file(dir / "b.ckpt"));
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    EXPECT_EQ(e.path().extension(), ".ckpt") << e.path();
  }

  LayAlignModel<float> other(tiny_config());
  apply_tensors(loaded, other.named_parameters());
  EXPECT_EQ(parameter_digest(other.named_parameters()), parameter_digest(model.named_parameters()));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ExactAndPartialApplication) {
  LayAlignModel<float> model(tiny_config());
  Checkpoint c = from_model(model);
  c.tensors.pop_back();
  EXPECT_THROW(apply_tensors(c, model.named_parameters(), true), InputError);
  EXPECT_NO_THROW(apply_tensors(c, model.named_parameters(), false));

  Checkpoint extra = from_model(model);
  extra.tensors.push_back({"nope", {1}, {0.0f}});
  EXPECT_THROW(apply_tensors(extra, model.named_parameters(), false), InputError);

  Checkpoint bad = from_model(model);
  bad.tensors[0].shape.push_back(1);
  bad.tensors[0].shape[0] += 1;
  EXPECT_THROW(apply_tensors(bad, model.named_parameters(), false), InputError);
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  LayAlignModel<float> model(tiny_config());
  const std::string bytes = serialize_checkpoint(from_model(model));
  EXPECT_NO_THROW(parse_checkpoint(bytes));
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), InputError);
  EXPECT_THROW(parse_checkpoint(bytes + "z"), InputError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(magic), InputError);
  EXPECT_THROW(parse_checkpoint(""), InputError);
  try {
    load_checkpoint("/nonexistent/x.ckpt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/x.ckpt"), std::string::npos);
  }
}
