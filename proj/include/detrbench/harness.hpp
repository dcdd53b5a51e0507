#pragma once

#include "detrbench/attacks.hpp"
#include "detrbench/datasets.hpp"
#include "detrbench/metrics.hpp"
#include "detrbench/toy_detector.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace detrbench {

inline constexpr int kStoreFormatVersion = 1;

/// Where campaign images come from.
struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | coco | kitti
  std::uint64_t seed = 2;
  int n_images = 200;
  int image_size = 64;
  std::filesystem::path annotations;  // coco: annotation JSON
  std::filesystem::path images;       // coco: image root, kitti: image dir
  std::filesystem::path labels;       // kitti: label dir
  /// kitti: keep the val side of a seeded 3:1 split
  bool kitti_val_split = false;

  bool operator==(const DatasetSpec&) const = default;
};

DatasetHandle load_dataset(const DatasetSpec& spec);

struct ModelSpec {
  std::string id;
  std::filesystem::path checkpoint;
  bool operator==(const ModelSpec&) const = default;
};

struct CampaignConfig {
  std::string name = "campaign";
  DatasetSpec dataset;
  std::vector<ModelSpec> models;
  std::vector<AttackConfig> attacks;
  double score_threshold = 0.05;
  std::filesystem::path output_dir = "results";
  std::uint64_t rng_seed = 0;
  int workers = 1;
  /// Also write an 8-bit copy of every adversarial set (lossy, warned).
  bool export_8bit = false;

  /// Throws InputError when there is no model, no attack, or a bad value.
  void validate() const;
};

nlohmann::json attack_config_to_json(const AttackConfig& config);
/// Missing keys take the per-kind defaults of default_attack_config().
AttackConfig attack_config_from_json(const nlohmann::json& j);
nlohmann::json campaign_config_to_json(const CampaignConfig& config);
CampaignConfig campaign_config_from_json(const nlohmann::json& j);
CampaignConfig load_campaign_config(const std::filesystem::path& path);

/// Short stable identifier "<kind>-<hash prefix>" of an attack config.
std::string attack_key(const AttackConfig& config);
std::string attack_config_hash(const AttackConfig& config);
/// Human label such as "pgd eps=0.03 steps=10".
std::string attack_label(const AttackConfig& config);
/// Hash of every field that influences stored results.
std::string campaign_config_hash(const CampaignConfig& config);

/// A model taking part in a campaign. `digest` identifies the parameters
/// (checkpoint SHA-256 for toy models).
struct ModelEntry {
  std::string id;
  std::shared_ptr<const DetectorModel> model;
  std::string digest;
};

/// Loads every ModelSpec checkpoint.
std::vector<ModelEntry> load_models(const std::vector<ModelSpec>& specs);
/// Entry for an in-memory toy model; digest is the SHA-256 of its checkpoint bytes.
ModelEntry make_model_entry(const std::string& id, std::shared_ptr<const ToyDetector> model);

struct AttackRecord {
  std::string model_id;
  std::string model_digest;
  std::string attack_key;
  std::string attack_hash;
  std::string image_id;
  bool ok = true;
  std::string error;
  PerturbationStats stats;
  int steps_used = 0;
  bool converged = true;
  std::vector<LossBreakdown> loss_trace;
  std::string adv_file;  // relative to the store root
  std::string adv_sha256;
  Detections clean_detections;
  Detections adv_detections;
};

nlohmann::json attack_record_to_json(const AttackRecord& record);
AttackRecord attack_record_from_json(const nlohmann::json& j);

struct CampaignSummaryRow {
  std::string model_id;
  std::string attack_key;
  std::string attack_label;
  EvalReport clean;
  EvalReport adversarial;
  double rs = 0.0;
  double mean_l2 = 0.0;
  double mean_linf = 0.0;
  int failures = 0;
  int records = 0;
};

/// On-disk campaign directory:
///   manifest.json            effective config, hashes, seeds, versions
///   clean/                   16-bit clean set + manifest
///   models/<id>.ckpt         toy checkpoints used by the campaign
///   adv/<model>/<attack>/    16-bit adversarial sets + manifests
///   records/<model>/<attack>/<image>.json
///   reports/<model>/clean.txt, reports/<model>/<attack>.txt, summary.tsv
struct ResultStore {
  std::filesystem::path root;
  nlohmann::json manifest;
  std::map<std::string, EvalReport> clean_reports;  // by model id
  std::vector<CampaignSummaryRow> summary;
  std::vector<AttackRecord> records;

  const CampaignSummaryRow* find_row(const std::string& model_id, const std::string& attack_key) const;
};

/// Runs every (model, attack, image) job, reusing records already present
/// in the store. Adversarial AP is measured on the persisted 16-bit images,
/// so a resumed campaign reports the same numbers as a fresh one. A failed
/// job is recorded and evaluated on the clean image; more than 10% failed
/// jobs raises CampaignError.
ResultStore run_attack_campaign(const CampaignConfig& config, const std::vector<ModelEntry>& models,
                                const DatasetHandle& dataset);
/// Convenience overload that loads the dataset and checkpoints named in the config.
ResultStore run_attack_campaign(const CampaignConfig& config);

/// Reads a campaign directory written by run_attack_campaign.
ResultStore open_result_store(const std::filesystem::path& root);

std::string format_summary_table(const ResultStore& store);

/// Ground truth of the store's clean set, by image id.
std::map<std::string, GroundTruth> load_store_ground_truth(const std::filesystem::path& root);

// Adversarial-set persistence.

struct StoredImage {
  std::string image_id;
  Image pixels;
};

inline constexpr const char* kImageSetFormat = "detrbench-image-set/1";

/// 16-bit PNGs plus manifest.json with per-file SHA-256 and the 2^-17
/// quantization bound.
void persist_adversarial_set(const std::filesystem::path& dir, const std::vector<StoredImage>& images);
/// Throws CorruptionError when a file's checksum disagrees with the manifest.
std::vector<StoredImage> load_adversarial_set(const std::filesystem::path& dir);
/// Opt-in lossy 8-bit copy; logs and records the expected degradation.
void export_adversarial_set_8bit(const std::filesystem::path& dir, const std::vector<StoredImage>& images);

struct TransferMatrix {
  std::string attack_key;
  std::vector<std::string> generators;  // rows
  std::vector<std::string> evaluators;  // columns
  std::map<std::string, double> ap_clean;
  std::vector<std::vector<double>> ap_adv;  // [generator][evaluator]
  std::vector<std::vector<double>> tr;      // [generator][evaluator]
  std::map<std::string, double> ap_adv_self;  // generator on its own set
};

/// Fills TR from AP values: entry (g, e) =
/// (ap_clean[e] - ap_adv[g][e]) / (ap_clean[g] - ap_adv_self[g]).
void fill_transfer_rates(TransferMatrix& matrix);

/// Evaluates each generator's adversarial set (for `attack_key`) on every
/// evaluator. Models come from the store's models/ directory unless given.
/// Throws CampaignError naming the missing set or model.
TransferMatrix build_transfer_matrix(const ResultStore& store, const std::vector<std::string>& generators,
                                     const std::vector<std::string>& evaluators, const std::string& attack_key,
                                     const std::vector<ModelEntry>& models = {});

std::string format_transfer_matrix(const TransferMatrix& matrix, char delimiter = '\t');

}  // namespace detrbench
