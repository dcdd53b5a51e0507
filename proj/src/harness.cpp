#include "detrbench/harness.hpp"

#include "detrbench/errors.hpp"
#include "detrbench/raster.hpp"
#include "detrbench/toy_detector.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace detrbench {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

DatasetHandle load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "synthetic") return generate_synthetic_dataset(spec.seed, spec.n_images, spec.image_size);
  if (spec.kind == "coco") {
    DatasetHandle ds = load_coco_annotations(spec.annotations, spec.images, spec.image_size);
    if (spec.n_images > 0 && ds.samples.size() > static_cast<std::size_t>(spec.n_images))
      ds.samples.resize(spec.n_images);
    return ds;
  }
  if (spec.kind == "kitti") {
    DatasetHandle ds = load_kitti_labels(spec.images, spec.labels, spec.image_size);
    if (spec.kitti_val_split) ds = split_dataset(ds, 3, 1, spec.seed).second;
    if (spec.n_images > 0 && ds.samples.size() > static_cast<std::size_t>(spec.n_images))
      ds.samples.resize(spec.n_images);
    return ds;
  }
  throw InputError("unknown dataset kind '" + spec.kind + "'");
}

void CampaignConfig::validate() const {
  if (models.empty()) throw InputError("campaign needs at least one model");
  if (attacks.empty()) throw InputError("campaign needs at least one attack");
  if (!(score_threshold >= 0 && score_threshold <= 1)) throw InputError("score_threshold must lie in [0,1]");
  if (workers < 1) throw InputError("workers must be >= 1");
  if (name.empty()) throw InputError("campaign name must not be empty");
  std::set<std::string> ids;
  for (const ModelSpec& m : models)
    if (m.id.empty() || !ids.insert(m.id).second) throw InputError("model ids must be unique and non-empty");
  for (const AttackConfig& a : attacks) a.validate();
}

namespace {

const char* hinge_name(HingeForm f) { return f == HingeForm::Literal ? "literal" : "untargeted"; }

HingeForm parse_hinge(const std::string& s) {
  if (s == "untargeted") return HingeForm::Untargeted;
  if (s == "literal") return HingeForm::Literal;
  throw InputError("unknown hinge form '" + s + "'");
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json attack_config_to_json(const AttackConfig& c) {
  return {{"kind", attack_kind_name(c.kind)},
          {"epsilon", c.epsilon},
          {"radius", c.radius},
          {"steps", c.steps},
          {"c", c.c},
          {"kappa", c.kappa},
          {"alpha", c.alpha},
          {"weights", {c.weights.distance, c.weights.cls, c.weights.bbox, c.weights.iou}},
          {"optimizer_rate", c.optimizer_rate},
          {"rng_seed", c.rng_seed},
          {"hinge", hinge_name(c.hinge)},
          {"signed_stage1", c.signed_stage1},
          {"freeze_matching", c.freeze_matching},
          {"patience", c.patience},
          {"patience_tolerance", c.patience_tolerance}};
}

AttackConfig attack_config_from_json(const json& j) {
  try {
    AttackConfig c = default_attack_config(parse_attack_kind(j.at("kind").get<std::string>()));
    read_if(j, "epsilon", c.epsilon);
    read_if(j, "radius", c.radius);
    read_if(j, "steps", c.steps);
    read_if(j, "c", c.c);
    read_if(j, "kappa", c.kappa);
    read_if(j, "alpha", c.alpha);
    read_if(j, "optimizer_rate", c.optimizer_rate);
    read_if(j, "rng_seed", c.rng_seed);
    read_if(j, "signed_stage1", c.signed_stage1);
    read_if(j, "freeze_matching", c.freeze_matching);
    read_if(j, "patience", c.patience);
    read_if(j, "patience_tolerance", c.patience_tolerance);
    if (j.contains("hinge")) c.hinge = parse_hinge(j.at("hinge").get<std::string>());
    if (j.contains("weights")) {
      const auto w = j.at("weights").get<std::vector<double>>();
      if (w.size() != 4) throw InputError("attack weights need 4 entries");
      c.weights = {w[0], w[1], w[2], w[3]};
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed attack config: ") + e.what());
  }
}

namespace {

json dataset_to_json(const DatasetSpec& d) {
  return {{"kind", d.kind},
          {"seed", d.seed},
          {"n_images", d.n_images},
          {"image_size", d.image_size},
          {"annotations", d.annotations.string()},
          {"images", d.images.string()},
          {"labels", d.labels.string()},
          {"kitti_val_split", d.kitti_val_split}};
}

DatasetSpec dataset_from_json(const json& j) {
  DatasetSpec d;
  read_if(j, "kind", d.kind);
  read_if(j, "seed", d.seed);
  read_if(j, "n_images", d.n_images);
  read_if(j, "image_size", d.image_size);
  if (j.contains("annotations")) d.annotations = j.at("annotations").get<std::string>();
  if (j.contains("images")) d.images = j.at("images").get<std::string>();
  if (j.contains("labels")) d.labels = j.at("labels").get<std::string>();
  read_if(j, "kitti_val_split", d.kitti_val_split);
  return d;
}

}  // namespace

json campaign_config_to_json(const CampaignConfig& c) {
  json models = json::array();
  for (const ModelSpec& m : c.models) models.push_back({{"id", m.id}, {"checkpoint", m.checkpoint.string()}});
  json attacks = json::array();
  for (const AttackConfig& a : c.attacks) attacks.push_back(attack_config_to_json(a));
  return {{"name", c.name},
          {"dataset", dataset_to_json(c.dataset)},
          {"models", models},
          {"attacks", attacks},
          {"score_threshold", c.score_threshold},
          {"output_dir", c.output_dir.string()},
          {"rng_seed", c.rng_seed},
          {"workers", c.workers},
          {"export_8bit", c.export_8bit}};
}

CampaignConfig campaign_config_from_json(const json& j) {
  try {
    CampaignConfig c;
    read_if(j, "name", c.name);
    if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("models"))
      for (const json& m : j.at("models"))
        c.models.push_back({m.at("id").get<std::string>(), m.value("checkpoint", std::string())});
    if (j.contains("attacks"))
      for (const json& a : j.at("attacks")) c.attacks.push_back(attack_config_from_json(a));
    read_if(j, "score_threshold", c.score_threshold);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    read_if(j, "rng_seed", c.rng_seed);
    read_if(j, "workers", c.workers);
    read_if(j, "export_8bit", c.export_8bit);
    return c;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed campaign config: ") + e.what());
  }
}

CampaignConfig load_campaign_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open config file: " + path.string());
  try {
    return campaign_config_from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw InputError("config file is not valid JSON: " + std::string(e.what()));
  }
}

std::string attack_config_hash(const AttackConfig& c) { return sha256_hex(attack_config_to_json(c).dump()); }

std::string attack_key(const AttackConfig& c) {
  return attack_kind_name(c.kind) + "-" + attack_config_hash(c).substr(0, 10);
}

std::string attack_label(const AttackConfig& c) {
  switch (c.kind) {
    case AttackKind::Fgsm: return fmt::format("fgsm eps={:g}", c.epsilon);
    case AttackKind::Pgd: return fmt::format("pgd eps={:g} steps={}", c.epsilon, c.steps);
    case AttackKind::Cw: return fmt::format("cw c={:g} steps={}", c.c, c.steps);
    case AttackKind::Ours:
      return fmt::format("ours alpha={:g} c={:g} w=({:g},{:g},{:g},{:g})", c.alpha, c.c, c.weights.distance,
                         c.weights.cls, c.weights.bbox, c.weights.iou);
  }
  return "unknown";
}

std::string campaign_config_hash(const CampaignConfig& c) {
  json j = campaign_config_to_json(c);
  // Where results land and how many threads compute them do not change them.
  j.erase("output_dir");
  j.erase("workers");
  j.erase("export_8bit");
  for (json& m : j["models"]) m.erase("checkpoint");
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Models

namespace {

std::string checkpoint_digest(const ToyDetector& model) {
  const fs::path tmp = fs::temp_directory_path() /
                       fmt::format("detrbench-digest-{}-{}.ckpt", static_cast<const void*>(&model),
                                   std::hash<std::thread::id>{}(std::this_thread::get_id()));
  save_checkpoint(model, tmp);
  const std::string digest = sha256_file(tmp);
  fs::remove(tmp);
  return digest;
}

}  // namespace

ModelEntry make_model_entry(const std::string& id, std::shared_ptr<const ToyDetector> model) {
  ModelEntry e;
  e.id = id;
  e.digest = checkpoint_digest(*model);
  e.model = std::move(model);
  return e;
}

std::vector<ModelEntry> load_models(const std::vector<ModelSpec>& specs) {
  std::vector<ModelEntry> out;
  for (const ModelSpec& s : specs) {
    if (!fs::exists(s.checkpoint)) throw LoadError("checkpoint for model '" + s.id + "' not found: " + s.checkpoint.string());
    auto model = std::make_shared<const ToyDetector>(load_checkpoint(s.checkpoint));
    out.push_back({s.id, model, sha256_file(s.checkpoint)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records and documents

namespace {

json detections_to_json(const Detections& dets) {
  json a = json::array();
  for (const Detection& d : dets) a.push_back({d.cls, d.score, d.box.cx, d.box.cy, d.box.w, d.box.h});
  return a;
}

Detections detections_from_json(const json& a) {
  Detections dets;
  for (const json& d : a)
    dets.push_back({d.at(0).get<int>(), d.at(1).get<double>(),
                    {d.at(2).get<double>(), d.at(3).get<double>(), d.at(4).get<double>(), d.at(5).get<double>()}});
  return dets;
}

json ground_truth_to_json(const GroundTruth& gt) {
  json a = json::array();
  for (std::size_t k = 0; k < gt.size(); ++k) {
    const Box& b = gt.boxes[k];
    a.push_back({{"class", gt.classes[k]}, {"box", {b.cx, b.cy, b.w, b.h}}, {"ignore", gt.is_ignored(k)}});
  }
  return a;
}

GroundTruth ground_truth_from_json(const json& a) {
  GroundTruth gt;
  for (const json& o : a) {
    const auto b = o.at("box").get<std::vector<double>>();
    gt.add(o.at("class").get<int>(), {b.at(0), b.at(1), b.at(2), b.at(3)}, o.value("ignore", false));
  }
  return gt;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw CorruptionError("malformed JSON document " + path.string() + ": " + e.what());
  }
}

std::string file_stem_for(const std::string& image_id) {
  std::string out = image_id;
  for (char& ch : out)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  return out;
}

}  // namespace

json attack_record_to_json(const AttackRecord& r) {
  json trace = json::array();
  for (const LossBreakdown& b : r.loss_trace) trace.push_back({b.loss_dm, b.loss_cls, b.loss_bb, b.loss_iou, b.total});
  return {{"format_version", kStoreFormatVersion},
          {"model_id", r.model_id},
          {"model_digest", r.model_digest},
          {"attack_key", r.attack_key},
          {"attack_hash", r.attack_hash},
          {"image_id", r.image_id},
          {"status", r.ok ? "ok" : "failed"},
          {"error", r.error},
          {"l2", r.stats.l2},
          {"linf", r.stats.linf},
          {"mean_abs", r.stats.mean_abs},
          {"steps_used", r.steps_used},
          {"converged", r.converged},
          {"loss_trace", trace},
          {"adv_file", r.adv_file},
          {"adv_sha256", r.adv_sha256},
          {"clean_detections", detections_to_json(r.clean_detections)},
          {"adv_detections", detections_to_json(r.adv_detections)}};
}

AttackRecord attack_record_from_json(const json& j) {
  try {
    AttackRecord r;
    if (j.at("format_version").get<int>() != kStoreFormatVersion) throw CorruptionError("unsupported record version");
    r.model_id = j.at("model_id").get<std::string>();
    r.model_digest = j.at("model_digest").get<std::string>();
    r.attack_key = j.at("attack_key").get<std::string>();
    r.attack_hash = j.at("attack_hash").get<std::string>();
    r.image_id = j.at("image_id").get<std::string>();
    r.ok = j.at("status").get<std::string>() == "ok";
    r.error = j.at("error").get<std::string>();
    r.stats = {j.at("l2").get<double>(), j.at("linf").get<double>(), j.at("mean_abs").get<double>()};
    r.steps_used = j.at("steps_used").get<int>();
    r.converged = j.at("converged").get<bool>();
    for (const json& t : j.at("loss_trace"))
      r.loss_trace.push_back({t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>(),
                              t.at(3).get<double>(), t.at(4).get<double>()});
    r.adv_file = j.at("adv_file").get<std::string>();
    r.adv_sha256 = j.at("adv_sha256").get<std::string>();
    r.clean_detections = detections_from_json(j.at("clean_detections"));
    r.adv_detections = detections_from_json(j.at("adv_detections"));
    return r;
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("malformed attack record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Image sets

namespace {

json set_manifest(const json& entries, int bits) {
  return {{"format", kImageSetFormat},
          {"bits", bits},
          {"quantizer", bits == 16 ? "q = min(floor(v * 65536), 65535), v' = (q + 0.5) / 65536"
                                   : "q = round(v * 255), v' = q / 255"},
          {"max_abs_error", bits == 16 ? kU16MaxError : 0.5 / 255.0},
          {"images", entries}};
}

}  // namespace

void persist_adversarial_set(const fs::path& dir, const std::vector<StoredImage>& images) {
  fs::create_directories(dir);
  json entries = json::array();
  for (const StoredImage& im : images) {
    check_pixels(im.pixels);
    const std::string file = file_stem_for(im.image_id) + ".png";
    write_png16(im.pixels, dir / file);
    entries.push_back({{"image_id", im.image_id}, {"file", file}, {"sha256", sha256_file(dir / file)},
                       {"height", im.pixels.height}, {"width", im.pixels.width}});
  }
  write_text_atomic(dir / "manifest.json", set_manifest(entries, 16).dump(1));
}

std::vector<StoredImage> load_adversarial_set(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw LoadError("no image-set manifest in " + dir.string());
  const json m = read_json(manifest_path);
  if (m.value("format", std::string()) != kImageSetFormat || m.value("bits", 0) != 16)
    throw LoadError("unsupported image-set format in " + dir.string());
  std::vector<StoredImage> out;
  for (const json& e : m.at("images")) {
    const fs::path file = dir / e.at("file").get<std::string>();
    if (!fs::exists(file)) throw CorruptionError("image listed in manifest is missing: " + file.string());
    const std::string digest = sha256_file(file);
    if (digest != e.at("sha256").get<std::string>())
      throw CorruptionError("checksum mismatch for " + file.string());
    out.push_back({e.at("image_id").get<std::string>(), read_png16(file)});
  }
  return out;
}

void export_adversarial_set_8bit(const fs::path& dir, const std::vector<StoredImage>& images) {
  spdlog::warn(
      "8-bit export to {}: quantization step 1/255 adds up to {:.5f} error per channel and can erase "
      "perturbations smaller than that",
      dir.string(), 0.5 / 255.0);
  fs::create_directories(dir);
  json entries = json::array();
  for (const StoredImage& im : images) {
    const std::string file = file_stem_for(im.image_id) + ".png";
    write_png8(im.pixels, dir / file);
    entries.push_back({{"image_id", im.image_id}, {"file", file}, {"sha256", sha256_file(dir / file)},
                       {"height", im.pixels.height}, {"width", im.pixels.width}});
  }
  json m = set_manifest(entries, 8);
  m["warning"] = "lossy 8-bit copy: perturbations below 1/255 may not survive";
  write_text_atomic(dir / "manifest.json", m.dump(1));
}

// ---------------------------------------------------------------------------
// Campaign

const CampaignSummaryRow* ResultStore::find_row(const std::string& model_id, const std::string& key) const {
  for (const CampaignSummaryRow& r : summary)
    if (r.model_id == model_id && r.attack_key == key) return &r;
  return nullptr;
}

namespace {

struct CleanSet {
  std::vector<std::string> ids;
  std::vector<Image> pixels;
  std::vector<GroundTruth> gts;
};

CleanSet load_clean_set(const fs::path& root) {
  CleanSet set;
  const fs::path dir = root / "clean";
  const auto images = load_adversarial_set(dir);
  const json gt = read_json(dir / "ground_truth.json");
  for (const StoredImage& im : images) {
    if (!gt.contains(im.image_id)) throw CorruptionError("clean set lacks ground truth for " + im.image_id);
    set.ids.push_back(im.image_id);
    set.pixels.push_back(im.pixels);
    set.gts.push_back(ground_truth_from_json(gt.at(im.image_id).at("objects")));
  }
  return set;
}

void persist_clean_set(const fs::path& root, const DatasetHandle& ds) {
  std::vector<StoredImage> images;
  json gt = json::object();
  for (const ImageSample& s : ds.samples) {
    images.push_back({s.image_id, s.pixels});
    const ResizeTransform& t = s.resize;
    gt[s.image_id] = {{"objects", ground_truth_to_json(s.ground_truth)},
                      {"resize", {t.source_height, t.source_width, t.target_height, t.target_width}}};
  }
  persist_adversarial_set(root / "clean", images);
  write_text_atomic(root / "clean" / "ground_truth.json", gt.dump(1));
}

std::vector<Detections> collect(const std::vector<AttackRecord>& records, bool adversarial) {
  std::vector<Detections> out;
  for (const AttackRecord& r : records) out.push_back(adversarial ? r.adv_detections : r.clean_detections);
  return out;
}

double checked_rs(double adv, double clean) {
  try {
    return robustness_score(adv, clean);
  } catch (const UndefinedMetricError& e) {
    spdlog::warn("{}", e.what());
    return std::nan("");
  }
}

json summary_row_to_json(const CampaignSummaryRow& r) {
  return {{"model_id", r.model_id}, {"attack_key", r.attack_key}, {"attack_label", r.attack_label},
          {"clean_ap", r.clean.ap},  {"adv_ap", r.adversarial.ap}, {"clean_ar", r.clean.ar},
          {"adv_ar", r.adversarial.ar}, {"rs", std::isfinite(r.rs) ? json(r.rs) : json(nullptr)},
          {"mean_l2", r.mean_l2},     {"mean_linf", r.mean_linf},  {"failures", r.failures},
          {"records", r.records}};
}

}  // namespace

ResultStore run_attack_campaign(const CampaignConfig& config, const std::vector<ModelEntry>& models,
                                const DatasetHandle& dataset) {
  config.validate();
  dataset.validate();
  if (dataset.samples.empty()) throw CampaignError("campaign dataset has no images");
  std::map<std::string, const ModelEntry*> by_id;
  for (const ModelEntry& m : models) by_id[m.id] = &m;
  for (const ModelSpec& s : config.models)
    if (!by_id.count(s.id)) throw CampaignError("model '" + s.id + "' is not loaded");

  ResultStore store;
  store.root = config.output_dir / config.name;
  fs::create_directories(store.root);

  json manifest = {{"format_version", kStoreFormatVersion},
                   {"tool", "detrbench"},
                   {"config", campaign_config_to_json(config)},
                   {"config_hash", campaign_config_hash(config)},
                   {"rng_seed", config.rng_seed},
                   {"dataset", {{"name", dataset.name}, {"n_images", dataset.samples.size()},
                                {"class_names", dataset.class_names}}},
                   {"models", json::object()},
                   {"attacks", json::array()},
                   {"checkpoint_format_version", kCheckpointFormatVersion},
                   {"eval_report_format", kEvalReportFormat},
                   {"image_set_format", kImageSetFormat}};
  for (const ModelSpec& s : config.models) manifest["models"][s.id] = {{"digest", by_id[s.id]->digest}};
  for (const AttackConfig& a : config.attacks)
    manifest["attacks"].push_back(
        {{"key", attack_key(a)}, {"hash", attack_config_hash(a)}, {"label", attack_label(a)},
         {"config", attack_config_to_json(a)}});

  const fs::path manifest_path = store.root / "manifest.json";
  if (fs::exists(manifest_path)) {
    const json old = read_json(manifest_path);
    if (old.value("config_hash", std::string()) != manifest["config_hash"] || old.value("models", json()) != manifest["models"])
      throw CampaignError("store " + store.root.string() + " was written by a different config or model set");
    spdlog::info("resuming campaign in {}", store.root.string());
  }
  write_text_atomic(manifest_path, manifest.dump(1));
  store.manifest = manifest;

  // Every evaluation reads the persisted 16-bit clean set.
  bool clean_ok = false;
  if (fs::exists(store.root / "clean" / "manifest.json")) {
    try {
      load_clean_set(store.root);
      clean_ok = true;
    } catch (const std::exception& e) {
      spdlog::warn("rewriting clean set: {}", e.what());
    }
  }
  if (!clean_ok) persist_clean_set(store.root, dataset);
  const CleanSet clean = load_clean_set(store.root);
  if (clean.ids.size() != dataset.samples.size()) throw CampaignError("clean set does not match the dataset");

  for (const ModelSpec& s : config.models) {
    if (auto toy = std::dynamic_pointer_cast<const ToyDetector>(by_id[s.id]->model)) {
      const fs::path ckpt = store.root / "models" / (file_stem_for(s.id) + ".ckpt");
      if (!fs::exists(ckpt) || sha256_file(ckpt) != by_id[s.id]->digest) save_checkpoint(*toy, ckpt);
    }
  }

  // Clean detections per model.
  std::map<std::string, std::vector<Detections>> clean_dets;
  for (const ModelSpec& s : config.models) {
    auto& dets = clean_dets[s.id];
    for (const Image& px : clean.pixels) dets.push_back(predict(*by_id[s.id]->model, px, config.score_threshold));
    const EvalReport report = evaluate_detections(dets, clean.gts);
    store.clean_reports[s.id] = report;
    write_text_atomic(store.root / "reports" / file_stem_for(s.id) / "clean.txt", serialize_eval_report(report));
    spdlog::info("model {}: clean AP {:.4f} AR {:.4f}", s.id, report.ap, report.ar);
  }

  struct Job {
    std::size_t model, attack, image;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < config.models.size(); ++m)
    for (std::size_t a = 0; a < config.attacks.size(); ++a)
      for (std::size_t i = 0; i < clean.ids.size(); ++i) jobs.push_back({m, a, i});

  std::vector<AttackRecord> records(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex io_mutex;
  std::exception_ptr fatal;

  auto run_job = [&](const Job& job) {
    const ModelSpec& ms = config.models[job.model];
    const ModelEntry& entry = *by_id[ms.id];
    const AttackConfig& ac = config.attacks[job.attack];
    const std::string key = attack_key(ac);
    const std::string stem = file_stem_for(clean.ids[job.image]);
    const fs::path rel_dir = fs::path("adv") / file_stem_for(ms.id) / key;
    const fs::path record_path = store.root / "records" / file_stem_for(ms.id) / key / (stem + ".json");

    if (fs::exists(record_path)) {
      try {
        AttackRecord old = attack_record_from_json(read_json(record_path));
        const bool same = old.model_digest == entry.digest && old.attack_hash == attack_config_hash(ac) &&
                          old.image_id == clean.ids[job.image];
        const bool file_ok = !old.ok || (fs::exists(store.root / old.adv_file) &&
                                         sha256_file(store.root / old.adv_file) == old.adv_sha256);
        if (same && file_ok) return old;
      } catch (const std::exception& e) {
        spdlog::warn("recomputing record {}: {}", record_path.string(), e.what());
      }
    }

    AttackRecord r;
    r.model_id = ms.id;
    r.model_digest = entry.digest;
    r.attack_key = key;
    r.attack_hash = attack_config_hash(ac);
    r.image_id = clean.ids[job.image];
    r.clean_detections = clean_dets[ms.id][job.image];
    ImageSample sample{clean.ids[job.image], clean.pixels[job.image], clean.gts[job.image], {}, {}};
    try {
      const AdversarialResult adv = run_attack(*entry.model, sample, ac);
      r.steps_used = adv.steps_used;
      r.converged = adv.converged;
      r.loss_trace = adv.loss_trace;
      r.adv_file = (rel_dir / (stem + ".png")).string();
      write_png16(adv.x_adv, store.root / r.adv_file);
      r.adv_sha256 = sha256_file(store.root / r.adv_file);
      const Image stored = read_png16(store.root / r.adv_file);
      r.stats = perturbation_stats(sample.pixels, stored);
      r.adv_detections = predict(*entry.model, stored, config.score_threshold);
    } catch (const std::exception& e) {
      r.ok = false;
      r.error = e.what();
      r.adv_file.clear();
      r.adv_detections = r.clean_detections;
      if (const auto* aborted = dynamic_cast<const AttackAborted*>(&e)) r.loss_trace = aborted->partial().loss_trace;
      spdlog::warn("attack {} on {} / {} failed: {}", key, ms.id, r.image_id, r.error);
    }
    std::lock_guard<std::mutex> lock(io_mutex);
    write_text_atomic(record_path, attack_record_to_json(r).dump());
    return r;
  };

  auto worker = [&]() {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= jobs.size()) return;
      try {
        records[k] = run_job(jobs[k]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(io_mutex);
        if (!fatal) fatal = std::current_exception();
        next = jobs.size();
        return;
      }
    }
  };
  if (config.workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < config.workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  // Aggregate per (model, attack); records stay in job order.
  int failures = 0;
  std::size_t k = 0;
  for (std::size_t m = 0; m < config.models.size(); ++m) {
    for (std::size_t a = 0; a < config.attacks.size(); ++a) {
      const std::vector<AttackRecord> group(records.begin() + static_cast<std::ptrdiff_t>(k),
                                            records.begin() + static_cast<std::ptrdiff_t>(k + clean.ids.size()));
      k += clean.ids.size();
      const ModelSpec& ms = config.models[m];
      CampaignSummaryRow row;
      row.model_id = ms.id;
      row.attack_key = attack_key(config.attacks[a]);
      row.attack_label = attack_label(config.attacks[a]);
      row.clean = store.clean_reports[ms.id];
      row.adversarial = evaluate_detections(collect(group, true), clean.gts);
      row.rs = checked_rs(row.adversarial.ap, row.clean.ap);
      row.records = static_cast<int>(group.size());
      int ok = 0;
      json set_entries = json::array();
      std::vector<StoredImage> for_export;
      for (const AttackRecord& r : group) {
        if (!r.ok) {
          ++row.failures;
          continue;
        }
        ++ok;
        row.mean_l2 += r.stats.l2;
        row.mean_linf += r.stats.linf;
        const fs::path file = fs::path(r.adv_file).filename();
        set_entries.push_back({{"image_id", r.image_id}, {"file", file.string()}, {"sha256", r.adv_sha256},
                               {"height", clean.pixels.front().height}, {"width", clean.pixels.front().width}});
        if (config.export_8bit) for_export.push_back({r.image_id, read_png16(store.root / r.adv_file)});
      }
      if (ok > 0) {
        row.mean_l2 /= ok;
        row.mean_linf /= ok;
      }
      failures += row.failures;
      const fs::path set_dir = store.root / "adv" / file_stem_for(ms.id) / row.attack_key;
      fs::create_directories(set_dir);
      write_text_atomic(set_dir / "manifest.json", set_manifest(set_entries, 16).dump(1));
      if (config.export_8bit)
        export_adversarial_set_8bit(store.root / "adv8" / file_stem_for(ms.id) / row.attack_key, for_export);
      write_text_atomic(store.root / "reports" / file_stem_for(ms.id) / (row.attack_key + ".txt"),
                        serialize_eval_report(row.adversarial));
      spdlog::info("model {} attack {}: AP {:.4f} -> {:.4f}, RS {:.4f}, mean L2 {:.4f}", ms.id, row.attack_label,
                   row.clean.ap, row.adversarial.ap, row.rs, row.mean_l2);
      store.summary.push_back(row);
    }
  }
  store.records = std::move(records);

  json summary = json::array();
  for (const CampaignSummaryRow& r : store.summary) summary.push_back(summary_row_to_json(r));
  write_text_atomic(store.root / "reports" / "summary.json", summary.dump(1));
  write_text_atomic(store.root / "reports" / "summary.tsv", format_summary_table(store));

  if (failures * 10 > static_cast<int>(jobs.size()))
    throw CampaignError(fmt::format("{} of {} attack jobs failed (limit 10%)", failures, jobs.size()));
  return store;
}

ResultStore run_attack_campaign(const CampaignConfig& config) {
  config.validate();
  return run_attack_campaign(config, load_models(config.models), load_dataset(config.dataset));
}

ResultStore open_result_store(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw LoadError("no campaign store at " + root.string());
  ResultStore store;
  store.root = root;
  store.manifest = read_json(manifest_path);
  if (store.manifest.value("format_version", 0) != kStoreFormatVersion)
    throw LoadError("unsupported store format in " + root.string());
  const fs::path summary_path = root / "reports" / "summary.json";
  if (!fs::exists(summary_path)) return store;

  for (const auto& [id, info] : store.manifest.at("models").items()) {
    const fs::path p = root / "reports" / file_stem_for(id) / "clean.txt";
    if (fs::exists(p)) store.clean_reports[id] = parse_eval_report(read_text(p));
  }
  for (const json& r : read_json(summary_path)) {
    CampaignSummaryRow row;
    row.model_id = r.at("model_id").get<std::string>();
    row.attack_key = r.at("attack_key").get<std::string>();
    row.attack_label = r.at("attack_label").get<std::string>();
    row.rs = r.at("rs").is_null() ? std::nan("") : r.at("rs").get<double>();
    row.mean_l2 = r.at("mean_l2").get<double>();
    row.mean_linf = r.at("mean_linf").get<double>();
    row.failures = r.at("failures").get<int>();
    row.records = r.at("records").get<int>();
    row.clean = store.clean_reports[row.model_id];
    row.adversarial = parse_eval_report(
        read_text(root / "reports" / file_stem_for(row.model_id) / (row.attack_key + ".txt")));
    store.summary.push_back(row);
  }
  const fs::path records_dir = root / "records";
  if (fs::exists(records_dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(records_dir))
      if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) store.records.push_back(attack_record_from_json(read_json(f)));
  }
  return store;
}

std::map<std::string, GroundTruth> load_store_ground_truth(const fs::path& root) {
  std::map<std::string, GroundTruth> out;
  const json all = read_json(root / "clean" / "ground_truth.json");
  for (const auto& [id, v] : all.items())
    out.emplace(id, ground_truth_from_json(v.at("objects")));
  return out;
}

std::string format_summary_table(const ResultStore& store) {
  std::string out = "model\tattack\tattack_key\tAP_clean\tAP_adv\tAR_clean\tAR_adv\tRS\tmean_L2\tmean_Linf\tfailed\n";
  for (const CampaignSummaryRow& r : store.summary)
    out += fmt::format("{}\t{}\t{}\t{:.4f}\t{:.4f}\t{:.4f}\t{:.4f}\t{:.4f}\t{:.4f}\t{:.4f}\t{}/{}\n", r.model_id,
                       r.attack_label, r.attack_key, r.clean.ap, r.adversarial.ap, r.clean.ar, r.adversarial.ar, r.rs,
                       r.mean_l2, r.mean_linf, r.failures, r.records);
  return out;
}

// ---------------------------------------------------------------------------
// Transfer

void fill_transfer_rates(TransferMatrix& m) {
  m.tr.assign(m.generators.size(), std::vector<double>(m.evaluators.size(), std::nan("")));
  for (std::size_t g = 0; g < m.generators.size(); ++g) {
    const std::string& gen = m.generators[g];
    for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
      const std::string& ev = m.evaluators[e];
      try {
        m.tr[g][e] = transfer_rate(m.ap_clean.at(ev), m.ap_adv[g][e], m.ap_clean.at(gen), m.ap_adv_self.at(gen));
      } catch (const UndefinedMetricError& err) {
        spdlog::warn("TR {} -> {}: {}", gen, ev, err.what());
      }
    }
  }
}

TransferMatrix build_transfer_matrix(const ResultStore& store, const std::vector<std::string>& generators,
                                     const std::vector<std::string>& evaluators, const std::string& key,
                                     const std::vector<ModelEntry>& models) {
  if (generators.empty() || evaluators.empty()) throw InputError("transfer matrix needs generators and evaluators");
  const double threshold = store.manifest.at("config").at("score_threshold").get<double>();
  const CleanSet clean = load_clean_set(store.root);

  std::map<std::string, std::shared_ptr<const DetectorModel>> handles;
  for (const ModelEntry& m : models) handles[m.id] = m.model;
  auto model_for = [&](const std::string& id) -> const DetectorModel& {
    auto it = handles.find(id);
    if (it != handles.end()) return *it->second;
    const fs::path ckpt = store.root / "models" / (file_stem_for(id) + ".ckpt");
    if (!fs::exists(ckpt)) throw CampaignError("transfer: no model '" + id + "' in store or arguments");
    auto loaded = std::make_shared<const ToyDetector>(load_checkpoint(ckpt));
    handles[id] = loaded;
    return *loaded;
  };
  auto evaluate = [&](const std::string& id, const std::vector<Image>& images) {
    const DetectorModel& model = model_for(id);
    std::vector<Detections> dets;
    for (const Image& px : images) dets.push_back(predict(model, px, threshold));
    return evaluate_detections(dets, clean.gts).ap;
  };

  TransferMatrix m;
  m.attack_key = key;
  m.generators = generators;
  m.evaluators = evaluators;
  std::set<std::string> everyone(generators.begin(), generators.end());
  everyone.insert(evaluators.begin(), evaluators.end());
  for (const std::string& id : everyone) m.ap_clean[id] = evaluate(id, clean.pixels);

  for (const std::string& gen : generators) {
    const fs::path dir = store.root / "adv" / file_stem_for(gen) / key;
    if (!fs::exists(dir / "manifest.json"))
      throw CampaignError("transfer: no adversarial set for generator '" + gen + "' and attack '" + key + "'");
    std::map<std::string, Image> adv;
    for (StoredImage& im : load_adversarial_set(dir)) adv.emplace(im.image_id, std::move(im.pixels));
    std::vector<Image> images;
    for (std::size_t i = 0; i < clean.ids.size(); ++i) {
      auto it = adv.find(clean.ids[i]);
      images.push_back(it != adv.end() ? it->second : clean.pixels[i]);  // failed jobs stay clean
    }
    std::vector<double> row;
    for (const std::string& ev : evaluators) row.push_back(evaluate(ev, images));
    m.ap_adv.push_back(row);
    const auto self = std::find(evaluators.begin(), evaluators.end(), gen);
    m.ap_adv_self[gen] = self != evaluators.end() ? row[static_cast<std::size_t>(self - evaluators.begin())]
                                                   : evaluate(gen, images);
  }
  fill_transfer_rates(m);
  return m;
}

std::string format_transfer_matrix(const TransferMatrix& m, char d) {
  std::string out = fmt::format("# attack {}\n", m.attack_key);
  out += fmt::format("generator{}AP_clean{}AP_adv_self", d, d);
  for (const std::string& e : m.evaluators) out += fmt::format("{}TR%[{}]", d, e);
  for (const std::string& e : m.evaluators) out += fmt::format("{}AP_adv[{}]", d, e);
  out += "\n";
  for (std::size_t g = 0; g < m.generators.size(); ++g) {
    const std::string& gen = m.generators[g];
    out += fmt::format("{}{}{:.4f}{}{:.4f}", gen, d, m.ap_clean.at(gen), d, m.ap_adv_self.at(gen));
    for (double v : m.tr[g]) out += std::isfinite(v) ? fmt::format("{}{:.1f}", d, 100.0 * v) : fmt::format("{}nan", d);
    for (double v : m.ap_adv[g]) out += fmt::format("{}{:.4f}", d, v);
    out += "\n";
  }
  return out;
}

}  // namespace detrbench
