#pragma once

#include "detrbench/detector.hpp"
#include "detrbench/harness.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace detrbench {

/// One bar per (model, attack) summary row, RS on the y axis.
void write_rs_bar_chart(const std::vector<CampaignSummaryRow>& rows, const std::filesystem::path& path);

/// Clean and adversarial image side by side with ground truth (white) and
/// detections at or above `display_threshold` drawn on top.
void write_detection_panel(const Image& clean, const Image& adversarial, const GroundTruth& gt,
                           const Detections& clean_dets, const Detections& adv_dets,
                           const std::vector<std::string>& class_names, const std::filesystem::path& path,
                           double display_threshold = 0.5);

/// Attention received per location, jet colormap over a dimmed copy of the image.
void write_attention_heatmap(const Image& image, const AttentionMap& attention, const std::filesystem::path& path);

struct ReportFiles {
  std::filesystem::path rs_chart;
  std::vector<std::filesystem::path> detection_panels;
  std::vector<std::filesystem::path> attention_maps;
};

/// Figures for a finished campaign store. `panels_per_row` detection panels
/// are drawn for each (model, attack) row; attention maps cover the first
/// image of every model, clean and under each attack. Throws LoadError for
/// a store without results.
ReportFiles write_campaign_report(const ResultStore& store, const std::filesystem::path& out_dir,
                                  int panels_per_row = 2);

}  // namespace detrbench
