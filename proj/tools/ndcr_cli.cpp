#include <array>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ndcr/checkpoint.hpp"
#include "ndcr/dataset_io.hpp"
#include "ndcr/gradcheck.hpp"
#include "ndcr/kernels/kernels.hpp"
#include "ndcr/train/trainer.hpp"

namespace {

using ndcr::ConfigError;
using ndcr::FormatError;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitFormat = 2;
constexpr int kExitNumeric = 3;

void add_config_file(CLI::App* cmd) {
  cmd->set_config("--config", "", "key=value config file; command-line flags override");
}

// ---- gen ---------------------------------------------------------------------

struct GenArgs {
  ndcr::GenConfig cfg;
  std::vector<double> weights;
  int count = 1000;
  std::string out;
};

void setup_gen(CLI::App& app, GenArgs& a) {
  CLI::App* cmd = app.add_subcommand("gen", "generate a synthetic benchmark dataset");
  add_config_file(cmd);
  cmd->add_option("--out", a.out, "output dataset path")->required();
  cmd->add_option("--count", a.count, "number of instances");
  cmd->add_option("--seed", a.cfg.seed, "master seed (shared across splits of one benchmark)");
  cmd->add_option("--offset", a.cfg.offset,
                  "first instance index; give each split a disjoint range under one seed");
  cmd->add_option("--d", a.cfg.d, "embedding width");
  cmd->add_option("--L", a.cfg.L, "candidates per instance");
  cmd->add_option("--A", a.cfg.A, "attribute count");
  cmd->add_option("--weights", a.weights, "proposition-count weights (exactly 5 values)");
  cmd->add_option("--neg-prob", a.cfg.neg_prob, "per-clause negation probability");
  cmd->add_option("--noise", a.cfg.noise, "embedding noise scale");
  cmd->add_option("--feature-scale", a.cfg.feature_scale, "encoding dictionary scale");
  cmd->callback([&a]() {
    if (!a.weights.empty()) {
      if (a.weights.size() != 5)
        throw ConfigError("gen: --weights must list exactly 5 values (counts 1..5)");
      a.cfg.count_weights = a.weights;
    }
    a.cfg.validate();
    std::vector<ndcr::Instance> data = ndcr::make_dataset(a.cfg, a.count);
    ndcr::write_dataset(a.out, data, a.cfg);
    std::array<int, 10> dist{};
    for (const auto& inst : data) ++dist[static_cast<size_t>(inst.count - 1)];
    std::cout << "dataset: " << a.out << "\n";
    std::cout << "instances: " << data.size() << "\n";
    std::cout << "count-distribution:";
    for (int k = 0; k < a.cfg.max_count(); ++k)
      std::cout << " " << (k + 1) << ":" << dist[static_cast<size_t>(k)];
    std::cout << "\n";
    std::cout << "config-hash: " << ndcr::hex64(a.cfg.hash()) << "\n";
  });
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  ndcr::TrainConfig cfg;
  std::string ablation = "full";
  std::string data, val, out, metrics;
};

void setup_train(CLI::App& app, TrainArgs& a) {
  CLI::App* cmd = app.add_subcommand("train", "train the reranking head");
  add_config_file(cmd);
  cmd->add_option("--data", a.data, "training dataset")->required();
  cmd->add_option("--val", a.val, "validation dataset")->required();
  cmd->add_option("--out", a.out, "output checkpoint path")->required();
  cmd->add_option("--metrics", a.metrics, "per-epoch metrics JSON (default: <out>.metrics.json)");
  cmd->add_option("--lr", a.cfg.opt.learning_rate, "initial learning rate")->capture_default_str();
  cmd->add_option("--batch", a.cfg.opt.batch_size, "batch size")->capture_default_str();
  cmd->add_option("--epochs", a.cfg.opt.max_epochs, "training epochs")->capture_default_str();
  cmd->add_option("--dropout", a.cfg.opt.dropout, "dropout rate")->capture_default_str();
  cmd->add_option("--seed", a.cfg.opt.seed, "optimizer/shuffle seed");
  cmd->add_option("--init-seed", a.cfg.model.seed, "parameter init seed");
  cmd->add_option("--ablation", a.ablation,
                  "full | system2-only | no-negation | system1-meanpool | no-modifier");
  cmd->add_option("--max-props", a.cfg.model.max_props, "proposition slots (K)");
  cmd->add_option("--heads", a.cfg.model.heads, "attention heads");
  cmd->add_option("--ffn-mult", a.cfg.model.ffn_mult, "FFN width multiplier");
  cmd->add_option("--lambda", a.cfg.model.lambda_scale, "fusion scale");
  cmd->add_option("--theta", a.cfg.model.theta, "negational feedback margin");
  cmd->add_option("--tau", a.cfg.model.tau, "uniformity margin");
  cmd->callback([&a]() {
    a.cfg.model.ablation = ndcr::ablation_from_name(a.ablation);
    ndcr::Dataset train_ds = ndcr::read_dataset(a.data);
    ndcr::Dataset val_ds = ndcr::read_dataset(a.val);
    if (train_ds.header.d != val_ds.header.d)
      throw ConfigError("train: training set d = " + std::to_string(train_ds.header.d) +
                        " but validation set d = " + std::to_string(val_ds.header.d));
    a.cfg.model.d = train_ds.header.d;
    a.cfg.model.pe_size = std::max(a.cfg.model.pe_size, train_ds.header.L);
    a.cfg.model.validate();
    a.cfg.opt.validate();

    std::cout << "kernels: " << ndcr::kernels::backend_name(ndcr::kernels::active_backend())
              << "\n";
    std::cout << "effective config: lr " << a.cfg.opt.learning_rate << ", batch "
              << a.cfg.opt.batch_size << ", epochs " << a.cfg.opt.max_epochs << ", dropout "
              << a.cfg.opt.dropout << ", ablation " << ndcr::ablation_name(a.cfg.model.ablation)
              << ", d " << a.cfg.model.d << "\n";
    std::cout << "config-hash: " << ndcr::hex64(a.cfg.hash()) << "\n";

    ndcr::Model<float> model(a.cfg.model);
    std::cout << "parameters: " << model.store().total_elements() << " in "
              << model.store().count() << " tensors\n";
    auto result = ndcr::train(model, a.cfg.opt, train_ds.instances, val_ds.instances,
                              [](const ndcr::EpochMetrics& m) {
                                std::printf(
                                    "epoch %2d  lr %.3g  loss %.4f  val-acc %5.1f%%  "
                                    "val-count-acc %5.1f%%  (%.1fs)\n",
                                    m.epoch, m.lr, m.train_loss, m.valid_accuracy,
                                    m.valid_count_accuracy, m.seconds);
                                std::fflush(stdout);
                              });
    ndcr::save_checkpoint(a.out, result.best, a.cfg.hash());
    std::cout << "best epoch " << result.best_epoch << " (val-acc " << result.best_accuracy
              << "%) -> " << a.out << "\n";

    const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.json" : a.metrics;
    nlohmann::json j;
    j["config"] = nlohmann::json::parse(a.cfg.to_json());
    j["config_hash"] = ndcr::hex64(a.cfg.hash());
    j["train_dataset_hash"] = ndcr::hex64(train_ds.header.config_hash);
    j["valid_dataset_hash"] = ndcr::hex64(val_ds.header.config_hash);
    j["best_epoch"] = result.best_epoch;
    j["best_accuracy"] = result.best_accuracy;
    j["epochs"] = result.history_json();
    std::ofstream os(metrics_path);
    if (!os) throw FormatError("train: cannot open '" + metrics_path + "' for writing");
    os << j.dump(2) << "\n";
    std::cout << "metrics -> " << metrics_path << "\n";
  });
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, out, ablation = "full";
  ndcr::ModelConfig mcfg;
};

void print_count_table(const ndcr::EvalReport& rep) {
  std::printf("%-6s %-10s %s\n", "count", "instances", "accuracy");
  int total = 0;
  for (int k = 0; k < 10; ++k) {
    const int n = rep.bucket_total[static_cast<size_t>(k)];
    if (!n) continue;
    total += n;
    std::printf("%-6d %-10d %.1f%%\n", k + 1, n,
                100.0 * rep.bucket_correct[static_cast<size_t>(k)] / n);
  }
  std::printf("%-6s %-10d %.1f%%\n", "all", total, rep.accuracy());
}

void setup_eval(CLI::App& app, EvalArgs& a) {
  CLI::App* cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_config_file(cmd);
  cmd->add_option("--ckpt", a.ckpt, "checkpoint path")->required();
  cmd->add_option("--data", a.data, "dataset path")->required();
  cmd->add_option("--out", a.out, "report JSON path");
  cmd->add_option("--ablation", a.ablation, "prediction mode (see train --ablation)");
  cmd->add_option("--heads", a.mcfg.heads, "attention heads (must match training)");
  cmd->add_option("--ffn-mult", a.mcfg.ffn_mult, "FFN width multiplier (must match training)");
  cmd->add_option("--lambda", a.mcfg.lambda_scale, "fusion scale (must match training)");
  cmd->callback([&a]() {
    auto loaded = ndcr::load_checkpoint<float>(a.ckpt);
    ndcr::Dataset ds = ndcr::read_dataset(a.data);
    const int ckpt_d = loaded.store.get("s1.head.w").rows;
    if (ckpt_d != ds.header.d)
      throw ConfigError("eval: checkpoint dimension d = " + std::to_string(ckpt_d) +
                        " conflicts with dataset d = " + std::to_string(ds.header.d));
    a.mcfg.ablation = ndcr::ablation_from_name(a.ablation);
    a.mcfg.d = ckpt_d;
    a.mcfg.max_props = loaded.store.get("prop.seed").rows;
    a.mcfg.pe_size = loaded.store.get("s1.pe").rows;
    a.mcfg.validate();
    ndcr::Model<float> model(a.mcfg, std::move(loaded.store));
    ndcr::EvalReport rep = ndcr::evaluate(model, ds.instances);

    std::cout << "checkpoint: " << a.ckpt << " (config-hash " << ndcr::hex64(loaded.config_hash)
              << ")\n";
    std::cout << "dataset: " << a.data << " (" << rep.total << " instances, config-hash "
              << ndcr::hex64(ds.header.config_hash) << ")\n";
    std::cout << "ablation: " << a.ablation << "\n";
    print_count_table(rep);
    std::printf("count-head accuracy: %.1f%%\n", rep.count_accuracy());

    if (!a.out.empty()) {
      nlohmann::json j = rep.to_json();
      j["checkpoint_config_hash"] = ndcr::hex64(loaded.config_hash);
      j["dataset_config_hash"] = ndcr::hex64(ds.header.config_hash);
      j["ablation"] = a.ablation;
      std::ofstream os(a.out);
      if (!os) throw FormatError("eval: cannot open '" + a.out + "' for writing");
      os << j.dump(2) << "\n";
      std::cout << "report -> " << a.out << "\n";
    }
  });
}

// ---- gradcheck / inspect -------------------------------------------------------

void setup_gradcheck(CLI::App& app, int& seeds, double& tol, bool& failed) {
  CLI::App* cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  cmd->add_option("--seeds", seeds, "random seeds per module")->capture_default_str();
  cmd->add_option("--tol", tol, "max relative error tolerance")->capture_default_str();
  cmd->callback([&]() {
    for (const auto& rep : ndcr::run_gradient_suite(seeds, tol)) {
      std::printf("%-4s %-20s max-rel-err %.3e  (%d seeds, %d coords)\n",
                  rep.pass ? "PASS" : "FAIL", rep.module.c_str(), rep.max_rel_err, rep.seeds,
                  rep.coords);
      if (!rep.pass) failed = true;
    }
  });
}

void setup_inspect(CLI::App& app, std::string& path) {
  CLI::App* cmd = app.add_subcommand("inspect", "describe a dataset or checkpoint file");
  cmd->add_option("--file", path, "path to a dataset or checkpoint")->required();
  cmd->callback([&path]() {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("inspect: cannot open '" + path + "'");
    char magic[4] = {};
    is.read(magic, 4);
    if (is.gcount() != 4) throw FormatError("inspect: '" + path + "': truncated at byte offset 0");
    is.close();
    if (std::string(magic, 4) == std::string(ndcr::kDatasetMagic, 4)) {
      ndcr::DatasetHeader h = ndcr::read_dataset_header(path);
      std::cout << "dataset " << path << "\n";
      std::cout << "  d: " << h.d << "  L: " << h.L << "  instances: " << h.count << "\n";
      std::cout << "  config: " << h.config_json << "\n";
      std::cout << "  config-hash: " << ndcr::hex64(h.config_hash) << "\n";
      return;
    }
    if (std::string(magic, 4) == std::string(ndcr::kCheckpointMagic, 4)) {
      auto entries = ndcr::read_checkpoint_entries(path);
      std::cout << "checkpoint " << path << " (" << entries.size() << " entries)\n";
      size_t total = 0;
      for (const auto& e : entries) {
        if (e.name == ndcr::kConfigHashEntry) {
          std::cout << "  config-hash: " << ndcr::hex64(ndcr::hash_from_floats(e.data)) << "\n";
          continue;
        }
        total += e.element_count();
        std::cout << "  " << e.name << ": [";
        for (size_t i = 0; i < e.dims.size(); ++i) std::cout << (i ? "," : "") << e.dims[i];
        std::cout << "]\n";
      }
      std::cout << "  total elements: " << total << "\n";
      return;
    }
    throw FormatError("inspect: '" + path + "': unrecognized magic '" + std::string(magic, 4) +
                      "' at byte offset 0");
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compositional retrieval reranking head: data generation, training, evaluation"};
  app.require_subcommand(1);

  GenArgs gen_args;
  TrainArgs train_args;
  EvalArgs eval_args;
  int gc_seeds = 5;
  double gc_tol = 1e-4;
  bool gc_failed = false;
  std::string inspect_path;

  setup_gen(app, gen_args);
  setup_train(app, train_args);
  setup_eval(app, eval_args);
  setup_gradcheck(app, gc_seeds, gc_tol, gc_failed);
  setup_inspect(app, inspect_path);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ndcr::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::runtime_error& e) {  // ConfigError, ShapeError
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (gc_failed) {
    std::cerr << "gradcheck: at least one module exceeded tolerance\n";
    return kExitNumeric;
  }
  return kExitOk;
}
