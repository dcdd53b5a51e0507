// detr_bench: train the toy detector, run attack campaigns, build transfer
// matrices and render report figures.

#include "detrbench/errors.hpp"
#include "detrbench/figures.hpp"
#include "detrbench/harness.hpp"
#include "detrbench/raster.hpp"
#include "detrbench/trainer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace detrbench;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

fs::path default_output_root() {
  const char* env = std::getenv("DETRBENCH_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("results");
}

std::vector<double> parse_weights(const std::string& text) {
  std::vector<double> w;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    try {
      w.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw InputError("--weights expects four comma-separated numbers");
    }
  }
  if (w.size() != 4) throw InputError("--weights expects four comma-separated numbers");
  return w;
}

struct TrainArgs {
  std::uint64_t seed = 0;
  int epochs = 40;
  fs::path out;
  int train_images = 2000;
  int val_images = 200;
  std::uint64_t data_seed = 1;
  std::uint64_t val_seed = 2;
  double lr = 1e-3;
  int lr_drop = 32;
};

int cmd_train(const TrainArgs& a) {
  ToyDetectorConfig config;
  config.rng_seed = a.seed;
  TrainOptions options;
  options.epochs = a.epochs;
  options.learning_rate = a.lr;
  options.lr_drop_epoch = a.lr_drop;
  options.on_epoch = [&](int e, double loss) { spdlog::info("epoch {}/{} loss {:.5f}", e + 1, a.epochs, loss); };

  const DatasetHandle train = generate_synthetic_dataset(a.data_seed, a.train_images, config.image_size);
  const DatasetHandle val = generate_synthetic_dataset(a.val_seed, a.val_images, config.image_size);
  TrainResult result = build_and_train_toy_detector(config, train, options);

  const fs::path out = a.out.empty() ? default_output_root() / fmt::format("toy-seed{}.ckpt", a.seed) : a.out;
  save_checkpoint(result.model, out);

  std::vector<Detections> dets;
  std::vector<GroundTruth> gts;
  for (const ImageSample& s : val.samples) {
    dets.push_back(predict(result.model, s.pixels, 0.05));
    gts.push_back(s.ground_truth);
  }
  const EvalReport report = evaluate_detections(dets, gts);
  fmt::print("checkpoint\t{}\nsha256\t{}\nepochs\t{}\n", out.string(), sha256_file(out), a.epochs);
  if (!result.epoch_losses.empty()) fmt::print("final_loss\t{:.6f}\n", result.epoch_losses.back());
  fmt::print("clean_AP\t{:.4f}\nclean_AR\t{:.4f}\nclean_AP50\t{:.4f}\n", report.ap, report.ar, report.per_iou_ap[0]);
  return 0;
}

struct AttackArgs {
  fs::path config;
  std::vector<std::string> models;
  std::string dataset;
  std::uint64_t data_seed = 2;
  int n_images = 0;
  fs::path annotations, images, labels;
  std::vector<std::string> attacks;
  double eps = 0, radius = 0, c = 0, kappa = 0, alpha = 0, rate = 0, threshold = 0;
  int steps = 0, workers = 0;
  std::string weights;
  std::string name;
  fs::path out;
  bool export_8bit = false;
};

CampaignConfig effective_config(const AttackArgs& a, const CLI::App& sub) {
  CampaignConfig cfg;
  if (!a.config.empty()) cfg = load_campaign_config(a.config);
  else cfg.output_dir = default_output_root();
  auto given = [&](const char* flag) { return sub.count(flag) > 0; };

  if (given("--model")) {
    cfg.models.clear();
    for (const std::string& m : a.models) {
      const auto eq = m.find('=');
      if (eq == std::string::npos) cfg.models.push_back({fs::path(m).stem().string(), m});
      else cfg.models.push_back({m.substr(0, eq), m.substr(eq + 1)});
    }
  }
  if (given("--dataset")) cfg.dataset.kind = a.dataset;
  if (given("--data-seed")) cfg.dataset.seed = a.data_seed;
  if (given("--n-images")) cfg.dataset.n_images = a.n_images;
  if (given("--annotations")) cfg.dataset.annotations = a.annotations;
  if (given("--images")) cfg.dataset.images = a.images;
  if (given("--labels")) cfg.dataset.labels = a.labels;
  if (given("--attack")) {
    cfg.attacks.clear();
    for (const std::string& name : a.attacks) cfg.attacks.push_back(default_attack_config(parse_attack_kind(name)));
  }
  for (AttackConfig& ac : cfg.attacks) {
    if (given("--eps")) ac.epsilon = a.eps;
    if (given("--radius")) ac.radius = a.radius;
    if (given("--steps")) ac.steps = a.steps;
    if (given("--c")) ac.c = a.c;
    if (given("--kappa")) ac.kappa = a.kappa;
    if (given("--alpha")) ac.alpha = a.alpha;
    if (given("--rate")) ac.optimizer_rate = a.rate;
    if (given("--weights")) {
      const auto w = parse_weights(a.weights);
      ac.weights = {w[0], w[1], w[2], w[3]};
    }
  }
  if (given("--threshold")) cfg.score_threshold = a.threshold;
  if (given("--workers")) cfg.workers = a.workers;
  if (given("--name")) cfg.name = a.name;
  if (given("--out")) cfg.output_dir = a.out;
  if (given("--export-8bit")) cfg.export_8bit = true;
  cfg.validate();
  return cfg;
}

int cmd_attack(const AttackArgs& a, const CLI::App& sub) {
  const CampaignConfig cfg = effective_config(a, sub);
  const ResultStore store = run_attack_campaign(cfg);
  fmt::print("store\t{}\n{}", store.root.string(), format_summary_table(store));
  return 0;
}

struct TransferArgs {
  fs::path store;
  std::vector<std::string> models;
  std::vector<std::string> generators, evaluators;
  std::string attack;
  fs::path out;
};

int cmd_transfer(const TransferArgs& a) {
  const ResultStore store = open_result_store(a.store);
  if (store.summary.empty()) throw LoadError("store " + a.store.string() + " holds no campaign results");
  std::vector<std::string> all;
  for (const auto& [id, info] : store.manifest.at("models").items()) all.push_back(id);
  const auto& base = a.models.empty() ? all : a.models;
  const auto gens = a.generators.empty() ? base : a.generators;
  const auto evals = a.evaluators.empty() ? base : a.evaluators;

  std::vector<std::string> keys;
  if (!a.attack.empty()) {
    keys.push_back(a.attack);
  } else {
    std::set<std::string> seen;
    for (const CampaignSummaryRow& r : store.summary)
      if (seen.insert(r.attack_key).second) keys.push_back(r.attack_key);
  }
  std::string text;
  for (const std::string& key : keys) text += format_transfer_matrix(build_transfer_matrix(store, gens, evals, key));
  fmt::print("{}", text);
  if (!a.out.empty()) {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    std::ofstream(a.out) << text;
  }
  return 0;
}

int cmd_report(const fs::path& store_path, const fs::path& out) {
  const ResultStore store = open_result_store(store_path);
  const ReportFiles files = write_campaign_report(store, out.empty() ? store_path / "figures" : out);
  fmt::print("rs_chart\t{}\n", files.rs_chart.string());
  for (const fs::path& p : files.detection_panels) fmt::print("detections\t{}\n", p.string());
  for (const fs::path& p : files.attention_maps) fmt::print("attention\t{}\n", p.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial robustness benchmark for DETR-style detectors"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train-toy", "Train and checkpoint the toy detector");
  train_cmd->add_option("--seed", train.seed, "Model initialization / shuffling seed");
  train_cmd->add_option("--epochs", train.epochs, "Training epochs (0 = seeded initialization)")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--out", train.out, "Checkpoint path (default $DETRBENCH_OUTPUT_ROOT/toy-seed<seed>.ckpt)");
  train_cmd->add_option("--train-images", train.train_images, "Synthetic training images")->check(CLI::PositiveNumber);
  train_cmd->add_option("--val-images", train.val_images, "Synthetic validation images")->check(CLI::PositiveNumber);
  train_cmd->add_option("--data-seed", train.data_seed, "Training set seed");
  train_cmd->add_option("--val-seed", train.val_seed, "Validation set seed");
  train_cmd->add_option("--lr", train.lr, "AdamW learning rate")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr-drop", train.lr_drop, "Epoch at which the rate drops 10x (0 = never)");

  AttackArgs atk;
  CLI::App* attack_cmd = app.add_subcommand("attack", "Run an attack campaign and print AP/AR/RS");
  attack_cmd->add_option("--config", atk.config, "Campaign config file (JSON)");
  attack_cmd->add_option("--model", atk.models, "Model checkpoint, optionally id=path (repeatable)");
  attack_cmd->add_option("--dataset", atk.dataset, "synthetic | coco | kitti");
  attack_cmd->add_option("--data-seed", atk.data_seed, "Synthetic dataset seed");
  attack_cmd->add_option("--n-images", atk.n_images, "Images to attack");
  attack_cmd->add_option("--annotations", atk.annotations, "COCO annotation file");
  attack_cmd->add_option("--images", atk.images, "COCO image root or KITTI image dir");
  attack_cmd->add_option("--labels", atk.labels, "KITTI label dir");
  attack_cmd->add_option("--attack", atk.attacks, "fgsm | pgd | cw | ours (repeatable)");
  attack_cmd->add_option("--eps", atk.eps, "FGSM/PGD step");
  attack_cmd->add_option("--radius", atk.radius, "PGD L-inf bound");
  attack_cmd->add_option("--steps", atk.steps, "Iterations");
  attack_cmd->add_option("--c", atk.c, "Hinge weight");
  attack_cmd->add_option("--kappa", atk.kappa, "Hinge confidence floor");
  attack_cmd->add_option("--alpha", atk.alpha, "Stage-1 scale of our attack");
  attack_cmd->add_option("--rate", atk.rate, "Adam rate for cw/ours");
  attack_cmd->add_option("--weights", atk.weights, "Loss weights w1,w2,w3,w4");
  attack_cmd->add_option("--threshold", atk.threshold, "Detection score threshold");
  attack_cmd->add_option("--workers", atk.workers, "Worker threads");
  attack_cmd->add_option("--name", atk.name, "Campaign name (store subdirectory)");
  attack_cmd->add_option("--out", atk.out, "Output root (default $DETRBENCH_OUTPUT_ROOT or ./results)");
  attack_cmd->add_flag("--export-8bit", atk.export_8bit, "Also write lossy 8-bit adversarial copies");

  TransferArgs tr;
  CLI::App* transfer_cmd = app.add_subcommand("transfer", "Transfer-rate matrix from a campaign store");
  transfer_cmd->add_option("--store", tr.store, "Campaign directory")->required();
  transfer_cmd->add_option("--models", tr.models, "Models used as generators and evaluators");
  transfer_cmd->add_option("--generators", tr.generators, "Row models");
  transfer_cmd->add_option("--evaluators", tr.evaluators, "Column models");
  transfer_cmd->add_option("--attack", tr.attack, "Attack key (default: every attack in the store)");
  transfer_cmd->add_option("--out", tr.out, "Also write the table here");

  fs::path report_store, report_out;
  CLI::App* report_cmd = app.add_subcommand("report", "Render RS chart, detection panels and attention maps");
  report_cmd->add_option("--store", report_store, "Campaign directory")->required();
  report_cmd->add_option("--out", report_out, "Figure directory (default <store>/figures)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  spdlog::set_default_logger(spdlog::stderr_color_mt("detr_bench"));
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (*train_cmd) return cmd_train(train);
    if (*attack_cmd) return cmd_attack(atk, *attack_cmd);
    if (*transfer_cmd) return cmd_transfer(tr);
    if (*report_cmd) return cmd_report(report_store, report_out);
  } catch (const InputError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
