#include "detrbench/datasets.hpp"

#include "detrbench/errors.hpp"
#include "detrbench/raster.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

namespace detrbench {

namespace fs = std::filesystem;

void DatasetHandle::validate() const {
  std::set<std::string> ids;
  for (const ImageSample& s : samples) {
    if (!ids.insert(s.image_id).second) throw InputError("dataset '" + name + "': duplicate image id " + s.image_id);
    s.ground_truth.validate();
    for (int c : s.ground_truth.classes)
      if (c >= static_cast<int>(class_names.size()))
        throw InputError("dataset '" + name + "': class index out of range in " + s.image_id);
  }
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

struct Rgb {
  double r, g, b;
};

constexpr Rgb kClassColour[3] = {{0.88, 0.16, 0.14}, {0.15, 0.82, 0.22}, {0.17, 0.25, 0.92}};

bool inside_shape(int cls, double px, double py, int x0, int y0, int s) {
  switch (cls) {
    case 0:
      return true;
    case 1: {
      const double r = 0.5 * s;
      const double dx = px - (x0 + r);
      const double dy = py - (y0 + r);
      return dx * dx + dy * dy <= r * r;
    }
    default: {
      // Apex at top centre, base along the bottom edge.
      const double t = (py - y0) / s;
      const double half = 0.5 * s * t;
      const double cx = x0 + 0.5 * s;
      return px >= cx - half && px <= cx + half;
    }
  }
}

ImageSample synth_one(std::uint64_t seed, int index, int size) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  ImageSample sample;
  sample.image_id = "synth_" + std::to_string(seed) + "_" + std::to_string(index);
  sample.pixels = Image(size, size);
  sample.resize = {size, size, size, size};

  const Rgb bg{uniform(0.3, 0.6), uniform(0.3, 0.6), uniform(0.3, 0.6)};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      sample.pixels.at(y, x, 0) = bg.r;
      sample.pixels.at(y, x, 1) = bg.g;
      sample.pixels.at(y, x, 2) = bg.b;
    }

  const int count = uniform_int(1, 3);
  const int min_side = std::max(4, size * 3 / 16);
  const int max_side = std::max(min_side, size * 3 / 8);
  std::vector<std::array<int, 4>> placed;  // x0, y0, x1, y1 (exclusive)
  for (int k = 0; k < count; ++k) {
    const int cls = uniform_int(0, 2);
    const int s = uniform_int(min_side, max_side);
    const Rgb base = kClassColour[cls];
    const Rgb colour{std::clamp(base.r + uniform(-0.07, 0.07), 0.0, 1.0),
                     std::clamp(base.g + uniform(-0.07, 0.07), 0.0, 1.0),
                     std::clamp(base.b + uniform(-0.07, 0.07), 0.0, 1.0)};
    for (int attempt = 0; attempt < 100; ++attempt) {
      const int x0 = uniform_int(0, size - s);
      const int y0 = uniform_int(0, size - s);
      constexpr int gap = 2;
      const bool clash = std::any_of(placed.begin(), placed.end(), [&](const auto& p) {
        return x0 < p[2] + gap && p[0] < x0 + s + gap && y0 < p[3] + gap && p[1] < y0 + s + gap;
      });
      if (clash) continue;

      int xmin = size, ymin = size, xmax = -1, ymax = -1;
      for (int y = y0; y < y0 + s; ++y) {
        for (int x = x0; x < x0 + s; ++x) {
          if (!inside_shape(cls, x + 0.5, y + 0.5, x0, y0, s)) continue;
          sample.pixels.at(y, x, 0) = colour.r;
          sample.pixels.at(y, x, 1) = colour.g;
          sample.pixels.at(y, x, 2) = colour.b;
          xmin = std::min(xmin, x);
          ymin = std::min(ymin, y);
          xmax = std::max(xmax, x);
          ymax = std::max(ymax, y);
        }
      }
      placed.push_back({x0, y0, x0 + s, y0 + s});
      sample.ground_truth.add(cls, Box::from_corners(static_cast<double>(xmin) / size, static_cast<double>(ymin) / size,
                                                     static_cast<double>(xmax + 1) / size,
                                                     static_cast<double>(ymax + 1) / size));
      break;
    }
  }

  std::normal_distribution<double> noise(0.0, 0.02);
  for (double& v : sample.pixels.data) v = std::clamp(v + noise(rng), 0.0, 1.0);
  sample.pixels = snap_to_u16_grid(sample.pixels);
  return sample;
}

}  // namespace

DatasetHandle generate_synthetic_dataset(std::uint64_t seed, int n_images, int image_size) {
  if (n_images < 1) throw InputError("generate_synthetic_dataset: n_images must be >= 1");
  if (image_size < 16) throw InputError("generate_synthetic_dataset: image_size must be >= 16");
  DatasetHandle ds;
  ds.name = "synthetic-" + std::to_string(seed);
  ds.class_names = synthetic_class_names();
  ds.samples.reserve(n_images);
  for (int i = 0; i < n_images; ++i) ds.samples.push_back(synth_one(seed, i, image_size));
  return ds;
}

ImageSample mirrored(const ImageSample& sample) {
  ImageSample out = sample;
  const Image& src = sample.pixels;
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < Image::channels; ++c) out.pixels.at(y, src.width - 1 - x, c) = src.at(y, x, c);
  for (Box& b : out.ground_truth.boxes) b.cx = 1.0 - b.cx;
  return out;
}

// ---------------------------------------------------------------------------
// COCO

namespace {

Image prepare_pixels(const Image& raw, int target_size, ResizeTransform& transform) {
  transform.source_height = raw.height;
  transform.source_width = raw.width;
  Image img = target_size > 0 ? resize_image(raw, target_size, target_size) : raw;
  transform.target_height = img.height;
  transform.target_width = img.width;
  return snap_to_u16_grid(img);
}

Box clamp_box(Box b) {
  const double x0 = std::clamp(b.x0(), 0.0, 1.0);
  const double x1 = std::clamp(b.x1(), 0.0, 1.0);
  const double y0 = std::clamp(b.y0(), 0.0, 1.0);
  const double y1 = std::clamp(b.y1(), 0.0, 1.0);
  return Box::from_corners(x0, y0, x1, y1);
}

}  // namespace

DatasetHandle load_coco_annotations(const fs::path& annotation_path, const fs::path& image_root, int target_size) {
  std::ifstream is(annotation_path);
  if (!is) throw LoadError("cannot open COCO annotations: " + annotation_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed COCO annotation JSON: " + std::string(e.what()));
  }
  if (!doc.is_object() || !doc.contains("images") || !doc.contains("annotations") || !doc.contains("categories") ||
      !doc["images"].is_array() || !doc["annotations"].is_array() || !doc["categories"].is_array())
    throw LoadError("COCO schema requires 'images', 'annotations' and 'categories' arrays");

  DatasetHandle ds;
  ds.name = annotation_path.stem().string();
  std::vector<std::pair<int, std::string>> cats;
  try {
    for (const auto& c : doc["categories"]) cats.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed COCO category: " + std::string(e.what()));
  }
  std::sort(cats.begin(), cats.end());
  std::unordered_map<int, int> remap;
  for (const auto& [id, name] : cats) {
    remap.emplace(id, static_cast<int>(ds.class_names.size()));
    ds.class_names.push_back(name);
    ds.source_category_ids.push_back(id);
  }

  struct Entry {
    std::string file;
    int width = 0, height = 0;
    GroundTruth gt;
  };
  std::map<long long, Entry> images;
  try {
    for (const auto& im : doc["images"]) {
      Entry e;
      e.file = im.at("file_name").get<std::string>();
      e.width = im.at("width").get<int>();
      e.height = im.at("height").get<int>();
      if (e.width < 1 || e.height < 1) throw LoadError("COCO image with non-positive size: " + e.file);
      images.emplace(im.at("id").get<long long>(), std::move(e));
    }
    for (const auto& an : doc["annotations"]) {
      const long long image_id = an.at("image_id").get<long long>();
      auto it = images.find(image_id);
      if (it == images.end()) throw LoadError("annotation refers to unknown image id " + std::to_string(image_id));
      const auto cat = remap.find(an.at("category_id").get<int>());
      if (cat == remap.end()) throw LoadError("annotation refers to unknown category");
      const auto bbox = an.at("bbox").get<std::vector<double>>();
      if (bbox.size() != 4) throw LoadError("COCO bbox must have 4 entries");
      if (bbox[2] <= 0 || bbox[3] <= 0) continue;
      const double W = it->second.width;
      const double H = it->second.height;
      const Box b = clamp_box({(bbox[0] + 0.5 * bbox[2]) / W, (bbox[1] + 0.5 * bbox[3]) / H, bbox[2] / W, bbox[3] / H});
      const bool crowd = an.value("iscrowd", 0) != 0;
      it->second.gt.add(cat->second, b, crowd);
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed COCO record: " + std::string(e.what()));
  }

  for (auto& [id, e] : images) {
    const fs::path file = image_root / e.file;
    if (!fs::exists(file)) {
      spdlog::warn("COCO image missing, skipped: {}", file.string());
      continue;
    }
    ImageSample s;
    s.image_id = std::to_string(id);
    s.source_file = e.file;
    Image raw = read_image_file(file);
    s.pixels = prepare_pixels(raw, target_size, s.resize);
    s.resize.source_width = e.width;
    s.resize.source_height = e.height;
    s.ground_truth = std::move(e.gt);
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

void export_coco_annotations(const DatasetHandle& ds, const fs::path& annotation_path) {
  nlohmann::json doc;
  doc["images"] = nlohmann::json::array();
  doc["annotations"] = nlohmann::json::array();
  doc["categories"] = nlohmann::json::array();
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    const int id = c < ds.source_category_ids.size() ? ds.source_category_ids[c] : static_cast<int>(c) + 1;
    doc["categories"].push_back({{"id", id}, {"name", ds.class_names[c]}});
  }
  long long ann_id = 1;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const ImageSample& s = ds.samples[i];
    const int W = s.resize.source_width > 0 ? s.resize.source_width : s.pixels.width;
    const int H = s.resize.source_height > 0 ? s.resize.source_height : s.pixels.height;
    long long image_id = static_cast<long long>(i) + 1;
    try {
      image_id = std::stoll(s.image_id);
    } catch (const std::exception&) {
    }
    doc["images"].push_back({{"id", image_id}, {"file_name", s.source_file.empty() ? s.image_id + ".png" : s.source_file}, {"width", W}, {"height", H}});
    const GroundTruth& gt = s.ground_truth;
    for (std::size_t k = 0; k < gt.size(); ++k) {
      const Box& b = gt.boxes[k];
      const int c = gt.classes[k];
      const int cat = static_cast<std::size_t>(c) < ds.source_category_ids.size() ? ds.source_category_ids[c] : c + 1;
      doc["annotations"].push_back({{"id", ann_id++},
                                    {"image_id", image_id},
                                    {"category_id", cat},
                                    {"bbox", {b.x0() * W, b.y0() * H, b.w * W, b.h * H}},
                                    {"area", b.w * W * b.h * H},
                                    {"iscrowd", gt.is_ignored(k) ? 1 : 0}});
    }
  }
  if (annotation_path.has_parent_path()) fs::create_directories(annotation_path.parent_path());
  std::ofstream os(annotation_path);
  if (!os) throw LoadError("cannot write COCO annotations: " + annotation_path.string());
  os << doc.dump(1);
}

// ---------------------------------------------------------------------------
// KITTI

DatasetHandle load_kitti_labels(const fs::path& image_dir, const fs::path& label_dir, int target_size) {
  if (!fs::is_directory(label_dir)) throw LoadError("KITTI label directory not found: " + label_dir.string());
  DatasetHandle ds;
  ds.name = "kitti";
  ds.class_names = kitti_class_names();
  std::unordered_map<std::string, int> class_index;
  for (std::size_t i = 0; i < ds.class_names.size(); ++i) class_index.emplace(ds.class_names[i], static_cast<int>(i));

  std::vector<fs::path> labels;
  for (const auto& entry : fs::directory_iterator(label_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".txt") labels.push_back(entry.path());
  std::sort(labels.begin(), labels.end());

  for (const fs::path& label : labels) {
    const std::string stem = label.stem().string();
    fs::path image_path;
    for (const char* ext : {".png", ".jpg", ".jpeg"}) {
      if (fs::exists(image_dir / (stem + ext))) {
        image_path = image_dir / (stem + ext);
        break;
      }
    }
    if (image_path.empty()) {
      spdlog::warn("KITTI image missing for label {}, skipped", label.string());
      continue;
    }
    const Image raw = read_image_file(image_path);
    const double W = raw.width;
    const double H = raw.height;

    ImageSample s;
    s.image_id = stem;
    s.source_file = image_path.filename().string();
    std::ifstream is(label);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::istringstream ls(line);
      std::vector<std::string> fields;
      for (std::string f; ls >> f;) fields.push_back(f);
      const std::string where = label.string() + ":" + std::to_string(line_no);
      if (fields.size() != 15 && fields.size() != 16)
        throw LoadError(where + ": expected 15 fields, got " + std::to_string(fields.size()));
      const auto cls = class_index.find(fields[0]);
      if (cls == class_index.end()) throw LoadError(where + ": unknown class '" + fields[0] + "'");
      double left = 0, top = 0, right = 0, bottom = 0;
      try {
        left = std::stod(fields[4]);
        top = std::stod(fields[5]);
        right = std::stod(fields[6]);
        bottom = std::stod(fields[7]);
      } catch (const std::exception&) {
        throw LoadError(where + ": non-numeric box coordinate");
      }
      if (!(right > left && bottom > top)) throw LoadError(where + ": empty box");
      const Box b = clamp_box(Box::from_corners(left / W, top / H, right / W, bottom / H));
      if (b.w <= 0 || b.h <= 0) throw LoadError(where + ": box outside image");
      s.ground_truth.add(cls->second, b, fields[0] == "DontCare");
    }
    s.pixels = prepare_pixels(raw, target_size, s.resize);
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

std::pair<DatasetHandle, DatasetHandle> split_dataset(const DatasetHandle& ds, int train_parts, int val_parts,
                                                      std::uint64_t seed) {
  if (train_parts < 1 || val_parts < 1) throw InputError("split ratio parts must be >= 1");
  std::vector<std::size_t> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = ds.samples.size() * train_parts / (train_parts + val_parts);

  DatasetHandle train{ds.name + "-train", {}, ds.class_names, ds.source_category_ids};
  DatasetHandle val{ds.name + "-val", {}, ds.class_names, ds.source_category_ids};
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> val_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  for (std::size_t i : train_idx) train.samples.push_back(ds.samples[i]);
  for (std::size_t i : val_idx) val.samples.push_back(ds.samples[i]);
  return {std::move(train), std::move(val)};
}

}  // namespace detrbench
