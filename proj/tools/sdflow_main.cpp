// Command-line driver: dataset synthesis, training, evaluation, energy
// reporting, and flow visualization.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "sdflow/config.hpp"
#include "sdflow/energy.hpp"
#include "sdflow/flowio.hpp"
#include "sdflow/model.hpp"
#include "sdflow/train.hpp"

namespace fs = std::filesystem;
using namespace sdflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  int64_t seed = -1;
};

RunConfig merged_config(const CommonArgs& args) {
  RunConfig rc;
  if (!args.config_path.empty()) rc = RunConfig::from_file(args.config_path);
  for (const std::string& kv : args.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw DataError("override must be key=value: " + kv);
    rc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  rc.reject_unknown_keys(known_run_keys());
  return rc;
}

std::vector<Sample> load_samples(const std::string& dir, const RunConfig& rc) {
  int64_t bins = rc.get_i64("data.bins", 10);
  int64_t blocks = rc.get_i64("data.blocks", 2);
  std::vector<Sample> samples;
  for (const SceneFiles& f : load_dataset_dir(dir)) samples.push_back(load_sample(f, bins, blocks));
  return samples;
}

// Checkpoint model config must match any model.* keys given explicitly.
void check_config_match(const SdformerFlow& model, const RunConfig& rc) {
  bool has_model_keys = false;
  for (const auto& [k, v] : rc.values) has_model_keys = has_model_keys || k.rfind("model.", 0) == 0;
  if (!has_model_keys) return;
  ModelConfig requested = model_config_from(rc);
  if (config_hash(requested) != config_hash(model.cfg))
    throw DataError("checkpoint/config mismatch: requested model hash " +
                    std::to_string(config_hash(requested)) + " vs checkpoint " +
                    std::to_string(config_hash(model.cfg)));
}

int cmd_synth(const CommonArgs& common, const std::string& out_dir, int64_t count, int64_t size,
              const std::string& flow, bool force, bool bars) {
  RunConfig rc = merged_config(common);
  SynthConfig cfg;
  cfg.count = count;
  cfg.size = size;
  cfg.seed = common.seed >= 0 ? static_cast<uint64_t>(common.seed) : 1;
  cfg.bars = bars;
  if (!flow.empty()) {
    float u, v;
    if (std::sscanf(flow.c_str(), "%f,%f", &u, &v) != 2)
      throw DataError("--flow expects u,v");
    cfg.fixed_flow = true;
    cfg.flow_u = u;
    cfg.flow_v = v;
  }
  synthesize_dataset(out_dir, cfg, force);
  std::printf("wrote %lld scenes to %s\n", static_cast<long long>(count), out_dir.c_str());
  return kExitOk;
}

int cmd_train(const CommonArgs& common, const std::string& data_dir, const std::string& out_dir) {
  RunConfig rc = merged_config(common);
  ModelConfig mc = model_config_from(rc);
  TrainConfig tc = train_config_from(rc);
  if (common.seed >= 0) tc.seed = static_cast<uint64_t>(common.seed);

  std::vector<Sample> all = load_samples(data_dir, rc);
  double val_fraction = rc.get_f64("train.val_fraction", 0.15);
  size_t val_n = static_cast<size_t>(val_fraction * static_cast<double>(all.size()));
  std::vector<Sample> train_set(all.begin(), all.end() - static_cast<std::ptrdiff_t>(val_n));
  std::vector<Sample> val_set(all.end() - static_cast<std::ptrdiff_t>(val_n), all.end());

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "metrics.log");

  SdformerFlow model = SdformerFlow::make(mc);
  ParamMap params = model.params();
  AdamW opt;
  opt.weight_decay = tc.weight_decay;
  std::mt19937 shuffle_rng(static_cast<uint32_t>(tc.seed));
  std::printf("training %lld parameters on %zu scenes (%zu held out)\n",
              static_cast<long long>(params.total_count()), train_set.size(), val_set.size());
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    EpochStats st = train_epoch(model, opt, params, train_set, tc, epoch, shuffle_rng);
    std::string train_line = metrics_record(epoch, "train", st.mean_loss, nullptr);
    log << train_line << "\n";
    std::printf("%s\n", train_line.c_str());
    if (!val_set.empty()) {
      Metrics m = evaluate(model, val_set, tc.batch);
      std::string val_line = metrics_record(epoch, "val", st.mean_loss, &m);
      log << val_line << "\n";
      std::printf("%s\n", val_line.c_str());
    }
    log.flush();
    save_checkpoint((fs::path(out_dir) / "model.ckpt").string(), model);
  }
  std::printf("checkpoint written to %s\n", (fs::path(out_dir) / "model.ckpt").string().c_str());
  return kExitOk;
}

int cmd_eval(const CommonArgs& common, const std::string& checkpoint,
             const std::string& data_dir, const std::string& out_dir) {
  RunConfig rc = merged_config(common);
  SdformerFlow model = load_checkpoint(checkpoint);
  check_config_match(model, rc);
  std::vector<Sample> samples = load_samples(data_dir, rc);
  int64_t batch = rc.get_i64("train.batch", 8);
  Metrics m = evaluate(model, samples, batch);
  std::printf("aee=%.6f outlier_pct=%.6f aae=%.6f\n", m.aee, m.outlier_pct, m.aae);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    for (size_t i = 0; i < samples.size(); ++i) {
      FlowPrediction pred = model.forward(samples[i].input);
      FlowField f;
      f.width = pred.final_flow.dim(3);
      f.height = pred.final_flow.dim(2);
      size_t n = static_cast<size_t>(f.width * f.height);
      f.u.assign(pred.final_flow.data().begin(), pred.final_flow.data().begin() + n);
      f.v.assign(pred.final_flow.data().begin() + n, pred.final_flow.data().begin() + 2 * n);
      f.valid.assign(n, 1);
      char name[64];
      std::snprintf(name, sizeof(name), "pred_%04zu.flo", i);
      write_flo((fs::path(out_dir) / name).string(), f);
    }
    std::printf("wrote %zu predictions to %s\n", samples.size(), out_dir.c_str());
  }
  return kExitOk;
}

int cmd_energy(const CommonArgs& common, const std::string& checkpoint,
               const std::string& data_dir, const std::string& mode_str,
               const std::string& out_path) {
  RunConfig rc = merged_config(common);
  if (mode_str != "ann" && mode_str != "snn") throw DataError("--mode must be ann or snn");
  EnergyMode mode = mode_str == "ann" ? EnergyMode::Ann : EnergyMode::Snn;
  SdformerFlow model = load_checkpoint(checkpoint);
  check_config_match(model, rc);
  std::vector<Sample> samples = load_samples(data_dir, rc);
  EnergyReport rep = estimate_energy(model, samples, mode);

  std::ostringstream os;
  os << "# layer kind flops_per_step spike_rate timesteps energy_j\n";
  for (const LayerEnergy& le : rep.layers) {
    os << le.name << " " << (le.kind == CostKind::SpikeGated ? "ac" : "mac") << " " << le.flops
       << " " << le.spike_rate << " " << le.timesteps << " " << le.energy_j << "\n";
  }
  os << "# summary mode=" << (mode == EnergyMode::Ann ? "ann" : "snn")
     << " param_m=" << static_cast<double>(model.param_count()) / 1e6
     << " flops_g=" << rep.total_flops / 1e9 << " avg_spike_rate=" << rep.avg_spike_rate
     << " power_mj=" << rep.total_j * 1e3 << "\n";
  std::printf("%s", os.str().c_str());
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write report: " + out_path);
    out << os.str();
  }
  return kExitOk;
}

int cmd_viz(const CommonArgs& common, const std::string& flo_path, const std::string& checkpoint,
            const std::string& data_dir, const std::string& out_path) {
  RunConfig rc = merged_config(common);
  if (!flo_path.empty()) {
    FlowField f = read_flo(flo_path);
    std::string out = out_path.empty() ? flo_path + ".ppm" : out_path;
    write_flow_ppm(out, f);
    std::printf("wrote %s\n", out.c_str());
    return kExitOk;
  }
  if (checkpoint.empty() || data_dir.empty())
    throw DataError("viz needs either --flo or both --checkpoint and --data");
  SdformerFlow model = load_checkpoint(checkpoint);
  check_config_match(model, rc);
  std::vector<Sample> samples = load_samples(data_dir, rc);
  fs::path out_dir = out_path.empty() ? fs::path("viz_out") : fs::path(out_path);
  fs::create_directories(out_dir);
  for (size_t i = 0; i < samples.size(); ++i) {
    FlowPrediction pred = model.forward(samples[i].input);
    FlowField f;
    f.width = pred.final_flow.dim(3);
    f.height = pred.final_flow.dim(2);
    size_t n = static_cast<size_t>(f.width * f.height);
    f.u.assign(pred.final_flow.data().begin(), pred.final_flow.data().begin() + n);
    f.v.assign(pred.final_flow.data().begin() + n, pred.final_flow.data().begin() + 2 * n);
    f.valid.assign(n, 1);
    char name[64];
    std::snprintf(name, sizeof(name), "flow_%04zu.ppm", i);
    write_flow_ppm((out_dir / name).string(), f);
  }
  std::printf("wrote %zu images to %s\n", samples.size(), out_dir.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking swin-transformer optical flow toolkit"};
  app.require_subcommand(1);

  CommonArgs common;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "key=value config file");
    cmd->add_option("--set", common.overrides, "config override key=value (repeatable)");
    cmd->add_option("--seed", common.seed, "random seed");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic event dataset");
  std::string synth_out = "dataset";
  int64_t synth_count = 64, synth_size = 32;
  std::string synth_flow;
  bool synth_force = false, synth_bars = false;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of scenes");
  synth->add_option("--size", synth_size, "scene resolution");
  synth->add_option("--flow", synth_flow, "fixed flow u,v (default: random per scene)");
  synth->add_flag("--force", synth_force, "overwrite a non-empty directory");
  synth->add_flag("--bars", synth_bars, "bar pattern instead of random dots");
  add_common(synth);

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string train_data, train_out = "run";
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory (checkpoint + metrics)");
  add_common(train);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--out", eval_out, "directory for .flo prediction dumps");
  add_common(eval);

  // energy
  auto* energy = app.add_subcommand("energy", "theoretical energy report");
  std::string en_ckpt, en_data, en_mode = "snn", en_out;
  energy->add_option("--checkpoint", en_ckpt, "model checkpoint")->required();
  energy->add_option("--data", en_data, "probe dataset directory")->required();
  energy->add_option("--mode", en_mode, "ann or snn");
  energy->add_option("--out", en_out, "report file");
  add_common(energy);

  // viz
  auto* viz = app.add_subcommand("viz", "render flow to color-wheel images");
  std::string viz_flo, viz_ckpt, viz_data, viz_out;
  viz->add_option("--flo", viz_flo, "render a .flo file directly");
  viz->add_option("--checkpoint", viz_ckpt, "model checkpoint");
  viz->add_option("--data", viz_data, "dataset directory");
  viz->add_option("--out", viz_out, "output image/directory");
  add_common(viz);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed())
      return cmd_synth(common, synth_out, synth_count, synth_size, synth_flow, synth_force,
                       synth_bars);
    if (train->parsed()) return cmd_train(common, train_data, train_out);
    if (eval->parsed()) return cmd_eval(common, eval_ckpt, eval_data, eval_out);
    if (energy->parsed()) return cmd_energy(common, en_ckpt, en_data, en_mode, en_out);
    if (viz->parsed()) return cmd_viz(common, viz_flo, viz_ckpt, viz_data, viz_out);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
