#pragma once

#include "detrbench/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace detrbench {

struct DatasetHandle {
  std::string name;
  std::vector<ImageSample> samples;
  std::vector<std::string> class_names;
  /// Source category id for each contiguous class index (COCO only).
  std::vector<int> source_category_ids;

  /// Throws InputError on duplicate image ids or out-of-range classes.
  void validate() const;
};

inline const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names = {"red_square", "green_disc", "blue_triangle"};
  return names;
}

/// Seeded shapes dataset: 1-3 non-overlapping objects per image drawn from
/// three colour+shape classes on a noisy uniform background. Image i depends
/// only on (seed, i), and every pixel sits on the 16-bit storage grid.
DatasetHandle generate_synthetic_dataset(std::uint64_t seed, int n_images, int image_size = 64);

/// Loads a COCO detection annotation file. Boxes become relative (cx,cy,w,h);
/// category ids are remapped to contiguous indices in ascending id order.
/// Images are resized to target_size x target_size when target_size > 0.
/// Missing image files are logged and skipped.
DatasetHandle load_coco_annotations(const std::filesystem::path& annotation_path,
                                    const std::filesystem::path& image_root, int target_size = 0);

/// Writes the dataset back in COCO schema with absolute-pixel xywh boxes in
/// the source image resolution.
void export_coco_annotations(const DatasetHandle& dataset, const std::filesystem::path& annotation_path);

inline const std::vector<std::string>& kitti_class_names() {
  static const std::vector<std::string> names = {"Car",  "Van",     "Truck", "Pedestrian", "Person_sitting",
                                                 "Cyclist", "Tram", "Misc",  "DontCare"};
  return names;
}

/// One label file per image (<stem>.txt next to <stem>.png/.jpg). DontCare
/// regions are kept as ignore-flagged objects.
DatasetHandle load_kitti_labels(const std::filesystem::path& image_dir, const std::filesystem::path& label_dir,
                                int target_size = 0);

/// Seeded disjoint partition in the ratio train_parts:val_parts.
std::pair<DatasetHandle, DatasetHandle> split_dataset(const DatasetHandle& dataset, int train_parts, int val_parts,
                                                      std::uint64_t seed);

/// Horizontal mirror of a sample (pixels and boxes).
ImageSample mirrored(const ImageSample& sample);

}  // namespace detrbench
