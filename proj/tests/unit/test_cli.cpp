#include <gtest/gtest.h>

#include <sstream>

#include "cli.hpp"
#include "mlqa/blob_io.hpp"
#include "mlqa/data.hpp"
#include "mlqa/training.hpp"
#include "test_util.hpp"

using namespace mlqa;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

const char* kTinyConfig = R"({
  "seed": 11, "samples": 20, "image_size": 16, "patch_size": 8, "vit_depth": 4, "dim": 8,
  "vit_heads": 2, "cnn_base_channels": 2, "vocab_size": 8, "max_tokens": 4, "text_dim": 8,
  "text_depth": 1, "text_heads": 2, "queries": 2, "fusion_heads": 2, "epochs": 2, "batch_size": 4
})";

std::string write_config(const test::TempDir& dir) {
  const auto path = dir.path() / "tiny.json";
  write_file(path, kTinyConfig);
  return path.string();
}

}  // namespace

TEST(Cli, SynthWritesTheDefaultSplit) {
  test::TempDir dir("cli_synth");
  const auto out = (dir.path() / "data").string();
  const auto r = run_cli({"synth", "--task", "quality", "--n", "800", "--seed", "3", "--out", out});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const auto ds = load_manifest(dir.path() / "data" / "manifest.jsonl");
  EXPECT_EQ(ds.size(), 800u);
  EXPECT_EQ(ds.indices(Split::kTrain).size(), 640u);
  EXPECT_EQ(ds.indices(Split::kTest).size(), 160u);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "data" / "config.json"));
}

TEST(Cli, UsageErrorsExitWithConfigCode) {
  EXPECT_EQ(run_cli({"synth", "--bogus", "1", "--out", "x"}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({"train", "--out", "x"}).code, cli::kConfigError);
  test::TempDir dir("cli_variant");
  EXPECT_EQ(run_cli({"synth", "--task", "quality", "--variant", "nope", "--out", dir.path().string()}).code,
            cli::kConfigError);
}

TEST(Cli, MissingFilesExitWithIoCode) {
  test::TempDir dir("cli_missing");
  const auto missing = (dir.path() / "absent.jsonl").string();
  EXPECT_EQ(run_cli({"train", "--manifest", missing, "--out", dir.path().string()}).code, cli::kIoError);
  EXPECT_EQ(run_cli({"eval", "--checkpoint", missing, "--manifest", missing}).code, cli::kIoError);
  EXPECT_EQ(run_cli({"synth", "--config", missing, "--out", dir.path().string()}).code, cli::kIoError);
}

TEST(Cli, GradcheckPrimitivesPasses) {
  const auto r = run_cli({"gradcheck", "--model", "primitives"});
  EXPECT_EQ(r.code, cli::kOk) << r.out << r.err;
  EXPECT_NE(r.out.find("pass"), std::string::npos);
  EXPECT_EQ(run_cli({"gradcheck", "--dtype", "f32"}).code, cli::kConfigError);
}

TEST(Cli, TrainIsReproducibleAndEvalMatchesHistory) {
  test::TempDir dir("cli_train");
  const auto cfg = write_config(dir);
  const auto data = (dir.path() / "data").string();
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--task", "correspondence", "--out", data}).code, cli::kOk);
  const auto manifest = data + "/manifest.jsonl";

  std::string histories[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = (dir.path() / ("run" + std::to_string(run))).string();
    const auto r = run_cli({"train", "--config", cfg, "--task", "correspondence", "--manifest", manifest, "--out", out});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    histories[run] = read_file(out + "/history.jsonl");
    EXPECT_TRUE(std::filesystem::exists(out + "/checkpoint_best.mlck"));
  }
  EXPECT_EQ(histories[0], histories[1]);
  EXPECT_EQ(read_file(dir.path() / "run0" / "checkpoint_last.mlck"),
            read_file(dir.path() / "run1" / "checkpoint_last.mlck"));

  const auto history = history_from_jsonl(histories[0]);
  const auto& last = history.back();
  ASSERT_EQ(last.split, Split::kTest);
  const auto r = run_cli({"eval", "--checkpoint", (dir.path() / "run0" / "checkpoint_last.mlck").string(),
                          "--manifest", manifest, "--split", "test"});
  if (last.srcc) {
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    std::ostringstream expected;
    expected << std::fixed << std::setprecision(6) << "srcc " << *last.srcc;
    EXPECT_NE(r.out.find(expected.str()), std::string::npos) << r.out;
  } else {
    EXPECT_EQ(r.code, cli::kNumericalError);
  }
}

TEST(Cli, CorruptCheckpointExitsWithIoCode) {
  test::TempDir dir("cli_corrupt");
  write_file(dir.path() / "bad.mlck", "MLCKgarbage");
  write_file(dir.path() / "m.jsonl", "");
  EXPECT_EQ(run_cli({"eval", "--checkpoint", (dir.path() / "bad.mlck").string(), "--manifest",
                     (dir.path() / "m.jsonl").string()})
                .code,
            cli::kIoError);
}
