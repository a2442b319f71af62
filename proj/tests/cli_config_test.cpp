#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "gtest/gtest.h"
#include "sdflow/config.hpp"

using namespace sdflow;
namespace fs = std::filesystem;

namespace {

std::string write_config(const std::string& name, const std::string& content) {
  std::string path = (fs::temp_directory_path() / name).string();
  std::ofstream(path) << content;
  return path;
}

}  // namespace

TEST(RunConfigFile, ParsesSectionsAndComments) {
  std::string path = write_config("rc1.cfg",
                                  "# model section\n"
                                  "model.base_dim=16\n"
                                  "model.neuron=psn  # trailing comment\n"
                                  "\n"
                                  "train.lr=0.002\n"
                                  "data.bins=10\n");
  RunConfig rc = RunConfig::from_file(path);
  EXPECT_EQ(rc.get_i64("model.base_dim", 0), 16);
  EXPECT_EQ(rc.get_str("model.neuron", ""), "psn");
  EXPECT_DOUBLE_EQ(rc.get_f64("train.lr", 0), 0.002);
  fs::remove(path);
}

TEST(RunConfigFile, RejectsMalformedLines) {
  std::string path = write_config("rc2.cfg", "model.base_dim 16\n");
  EXPECT_THROW(RunConfig::from_file(path), DataError);
  fs::remove(path);
}

TEST(RunConfigFile, UnknownKeysRejected) {
  RunConfig rc;
  rc.set("model.base_dim", "8");
  rc.set("model.typo_key", "1");
  EXPECT_THROW(rc.reject_unknown_keys(known_run_keys()), DataError);
}

TEST(RunConfigFile, OverridesWinOverFile) {
  std::string path = write_config("rc3.cfg", "train.lr=0.001\n");
  RunConfig rc = RunConfig::from_file(path);
  rc.set("train.lr", "0.005");
  EXPECT_DOUBLE_EQ(rc.get_f64("train.lr", 0), 0.005);
  fs::remove(path);
}

TEST(ModelConfigFromRun, BuildsAndValidates) {
  RunConfig rc;
  rc.set("model.depths", "2,2");
  rc.set("model.heads", "1,2");
  rc.set("model.base_dim", "8");
  rc.set("model.encoders", "2");
  rc.set("model.neuron", "psn");
  rc.set("model.attention", "qk");
  rc.set("model.window", "2,4,4");
  ModelConfig cfg = model_config_from(rc);
  EXPECT_EQ(cfg.base_dim, 8);
  EXPECT_EQ(cfg.neuron, NeuronKind::Psn);
  EXPECT_EQ(cfg.attention, AttentionKind::Qk);
  EXPECT_EQ(cfg.window_h, 4);
}

TEST(ModelConfigFromRun, BadEnumRejected) {
  RunConfig rc;
  rc.set("model.neuron", "glif");
  EXPECT_THROW(model_config_from(rc), DataError);
}

TEST(ModelConfigFromRun, InvalidCombinationRejected) {
  RunConfig rc;
  rc.set("model.depths", "2,2,2");  // three stages but encoders defaults to 4
  EXPECT_THROW(model_config_from(rc), std::invalid_argument);
}

TEST(TrainConfigFromRun, DefaultsMatchContract) {
  RunConfig rc;
  TrainConfig cfg = train_config_from(rc);
  EXPECT_DOUBLE_EQ(cfg.lr, 1e-3);
  EXPECT_DOUBLE_EQ(cfg.weight_decay, 1e-2);
  EXPECT_EQ(cfg.lr_halve_every, 10);
}

TEST(ConfigSerialization, ModelRoundTrip) {
  ModelConfig cfg;
  cfg.stage_depths = {2, 2};
  cfg.stage_heads = {1, 2};
  cfg.base_dim = 8;
  cfg.encoders = 2;
  cfg.neuron = NeuronKind::Psn;
  cfg.attention = AttentionKind::Qk;
  cfg.shortcut = ShortcutKind::Sew;
  cfg.time_steps = 5;
  cfg.v_threshold = 0.125f;
  ModelConfig rt = ModelConfig::deserialize(cfg.serialize());
  EXPECT_EQ(config_hash(rt), config_hash(cfg));
  EXPECT_EQ(rt.shortcut, ShortcutKind::Sew);
  EXPECT_FLOAT_EQ(rt.v_threshold, 0.125f);
}

#ifdef SDFLOW_CLI_PATH

namespace {

int run_cli(const std::string& args) {
  std::string cmd = std::string(SDFLOW_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(CliEndToEnd, ExitCodes) {
  fs::path dir = fs::temp_directory_path() / "sdflow_cli_codes";
  fs::remove_all(dir);
  // Usage error: unknown flag.
  EXPECT_EQ(run_cli("synth --nonsense"), 1);
  // Usage error: no subcommand.
  EXPECT_EQ(run_cli(""), 1);
  // Data error: dataset directory without a manifest.
  fs::create_directories(dir / "empty");
  EXPECT_EQ(run_cli("eval --checkpoint /nonexistent.ckpt --data " + (dir / "empty").string()), 2);
  fs::remove_all(dir);
}

TEST(CliEndToEnd, SynthIsDeterministicAndGuarded) {
  fs::path dir = fs::temp_directory_path() / "sdflow_cli_synth";
  fs::remove_all(dir);
  std::string a = (dir / "a").string(), b = (dir / "b").string();
  ASSERT_EQ(run_cli("synth --out " + a + " --count 2 --size 32 --seed 9"), 0);
  ASSERT_EQ(run_cli("synth --out " + b + " --count 2 --size 32 --seed 9"), 0);
  EXPECT_EQ(slurp(fs::path(a) / "scene_0000.bin"), slurp(fs::path(b) / "scene_0000.bin"));
  EXPECT_EQ(slurp(fs::path(a) / "scene_0001.flo"), slurp(fs::path(b) / "scene_0001.flo"));
  // Existing non-empty dir without --force is a data error.
  EXPECT_EQ(run_cli("synth --out " + a + " --count 2 --size 32 --seed 9"), 2);
  EXPECT_EQ(run_cli("synth --out " + a + " --count 2 --size 32 --seed 9 --force"), 0);
  fs::remove_all(dir);
}

TEST(CliEndToEnd, TrainEvalEnergyVizPipeline) {
  fs::path dir = fs::temp_directory_path() / "sdflow_cli_pipe";
  fs::remove_all(dir);
  std::string data = (dir / "data").string();
  std::string run = (dir / "run").string();
  ASSERT_EQ(run_cli("synth --out " + data + " --count 6 --size 32 --seed 4"), 0);

  std::string tiny =
      " --set model.depths=2,2 --set model.heads=1,2 --set model.base_dim=8"
      " --set model.encoders=2 --set model.neuron=psn --set model.attention=qk"
      " --set model.window=2,4,4 --set model.time_steps=5";
  ASSERT_EQ(run_cli("train --data " + data + " --out " + run + tiny +
                    " --set train.epochs=1 --set train.batch=3 --set train.val_fraction=0.34"),
            0);
  ASSERT_TRUE(fs::exists(fs::path(run) / "model.ckpt"));
  ASSERT_TRUE(fs::exists(fs::path(run) / "metrics.log"));

  std::string ckpt = (fs::path(run) / "model.ckpt").string();
  EXPECT_EQ(run_cli("eval --checkpoint " + ckpt + " --data " + data), 0);
  // Checkpoint/config mismatch: different model shape requested.
  EXPECT_EQ(run_cli("eval --checkpoint " + ckpt + " --data " + data +
                    " --set model.base_dim=16 --set model.depths=2,2 --set model.heads=1,2"
                    " --set model.encoders=2"),
            2);
  EXPECT_EQ(run_cli("energy --checkpoint " + ckpt + " --data " + data + " --mode snn --out " +
                    (dir / "snn.txt").string()),
            0);
  EXPECT_EQ(run_cli("energy --checkpoint " + ckpt + " --data " + data + " --mode ann"), 0);
  EXPECT_NE(slurp(dir / "snn.txt").find("power_mj"), std::string::npos);

  std::string flo = data + "/scene_0000.flo";
  EXPECT_EQ(run_cli("viz --flo " + flo + " --out " + (dir / "flow.ppm").string()), 0);
  std::string ppm = slurp(dir / "flow.ppm");
  EXPECT_EQ(ppm.substr(0, 2), "P6");
  fs::remove_all(dir);
}

#endif  // SDFLOW_CLI_PATH
