#include "detrbench/figures.hpp"

#include "detrbench/errors.hpp"
#include "detrbench/raster.hpp"
#include "detrbench/toy_detector.hpp"

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <map>

namespace detrbench {

namespace fs = std::filesystem;

namespace {

constexpr int kScale = 4;

cv::Mat to_bgr8(const Image& image, int scale) {
  cv::Mat m(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        m.at<cv::Vec3b>(y, x)[2 - c] = static_cast<std::uint8_t>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 255));
  cv::Mat big;
  cv::resize(m, big, cv::Size(), scale, scale, cv::INTER_NEAREST);
  return big;
}

cv::Scalar class_colour(int cls) {
  static const cv::Scalar palette[] = {{40, 40, 230},  {40, 200, 40},  {230, 90, 30},  {0, 200, 230},
                                       {200, 0, 200},  {230, 200, 0},  {120, 120, 255}, {0, 120, 255},
                                       {160, 160, 160}};
  return palette[static_cast<std::size_t>(cls) % std::size(palette)];
}

cv::Rect to_rect(const Box& b, int w, int h) {
  const int x0 = static_cast<int>(std::lround(b.x0() * w));
  const int y0 = static_cast<int>(std::lround(b.y0() * h));
  const int x1 = static_cast<int>(std::lround(b.x1() * w));
  const int y1 = static_cast<int>(std::lround(b.y1() * h));
  return {x0, y0, std::max(1, x1 - x0), std::max(1, y1 - y0)};
}

void draw(cv::Mat& canvas, const GroundTruth& gt, const Detections& dets, const std::vector<std::string>& names,
          double threshold) {
  for (const Box& b : gt.boxes) cv::rectangle(canvas, to_rect(b, canvas.cols, canvas.rows), {255, 255, 255}, 1);
  for (const Detection& d : dets) {
    if (d.score < threshold) continue;
    const cv::Rect r = to_rect(d.box, canvas.cols, canvas.rows);
    cv::rectangle(canvas, r, class_colour(d.cls), 2);
    const std::string name = static_cast<std::size_t>(d.cls) < names.size() ? names[d.cls] : std::to_string(d.cls);
    cv::putText(canvas, fmt::format("{} {:.2f}", name, d.score), {r.x + 2, std::max(10, r.y - 3)},
                cv::FONT_HERSHEY_PLAIN, 0.8, class_colour(d.cls), 1);
  }
}

void save(const fs::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw LoadError("failed to write figure " + path.string());
}

std::string safe(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return out;
}

}  // namespace

void write_rs_bar_chart(const std::vector<CampaignSummaryRow>& rows, const fs::path& path) {
  if (rows.empty()) throw InputError("RS chart needs at least one summary row");
  const int bar = 46, gap = 18, left = 60, top = 40, plot_h = 300, label_h = 170;
  const int width = left + static_cast<int>(rows.size()) * (bar + gap) + gap + 20;
  cv::Mat canvas(top + plot_h + label_h, std::max(width, 360), CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(canvas, "Robustness score (AP_adv / AP_clean)", {left, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0}, 1);
  const int base = top + plot_h;
  for (int t = 0; t <= 4; ++t) {
    const double v = t * 0.25;
    const int y = base - static_cast<int>(std::lround(v * plot_h));
    cv::line(canvas, {left - 4, y}, {canvas.cols - 10, y}, {220, 220, 220}, 1);
    cv::putText(canvas, fmt::format("{:.2f}", v), {8, y + 4}, cv::FONT_HERSHEY_PLAIN, 0.9, {0, 0, 0}, 1);
  }
  std::map<std::string, int> model_index;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const CampaignSummaryRow& r = rows[i];
    const int idx = model_index.emplace(r.model_id, static_cast<int>(model_index.size())).first->second;
    const double rs = std::isfinite(r.rs) ? std::clamp(r.rs, 0.0, 1.2) : 0.0;
    const int x = left + gap + static_cast<int>(i) * (bar + gap);
    const int h = static_cast<int>(std::lround(std::min(rs, 1.0) * plot_h));
    cv::rectangle(canvas, {x, base - h, bar, h}, class_colour(idx), cv::FILLED);
    cv::putText(canvas, std::isfinite(r.rs) ? fmt::format("{:.2f}", r.rs) : "n/a", {x + 4, base - h - 4},
                cv::FONT_HERSHEY_PLAIN, 0.9, {0, 0, 0}, 1);
    // Rotated label: draw horizontally on a strip, then rotate.
    const std::string label = r.model_id + " " + r.attack_label;
    cv::Mat strip(bar, label_h - 10, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::putText(strip, label.substr(0, 30), {2, bar / 2 + 4}, cv::FONT_HERSHEY_PLAIN, 0.8, {0, 0, 0}, 1);
    cv::Mat rotated;
    cv::rotate(strip, rotated, cv::ROTATE_90_CLOCKWISE);
    rotated.copyTo(canvas(cv::Rect(x, base + 6, rotated.cols, rotated.rows)));
  }
  cv::line(canvas, {left, base}, {canvas.cols - 10, base}, {0, 0, 0}, 1);
  save(path, canvas);
}

void write_detection_panel(const Image& clean, const Image& adversarial, const GroundTruth& gt,
                           const Detections& clean_dets, const Detections& adv_dets,
                           const std::vector<std::string>& class_names, const fs::path& path,
                           double display_threshold) {
  cv::Mat a = to_bgr8(clean, kScale);
  cv::Mat b = to_bgr8(adversarial, kScale);
  draw(a, gt, clean_dets, class_names, display_threshold);
  draw(b, gt, adv_dets, class_names, display_threshold);
  cv::Mat canvas(a.rows + 22, a.cols * 2 + 8, CV_8UC3, cv::Scalar(255, 255, 255));
  a.copyTo(canvas(cv::Rect(0, 22, a.cols, a.rows)));
  b.copyTo(canvas(cv::Rect(a.cols + 8, 22, b.cols, b.rows)));
  cv::putText(canvas, "clean", {4, 15}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1);
  cv::putText(canvas, "adversarial", {a.cols + 12, 15}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1);
  save(path, canvas);
}

void write_attention_heatmap(const Image& image, const AttentionMap& attention, const fs::path& path) {
  const Mat& up = attention.upsampled;
  if (up.rows() != image.height || up.cols() != image.width)
    throw InputError("attention map does not match the image size");
  const double lo = up.minCoeff();
  const double hi = up.maxCoeff();
  cv::Mat gray(image.height, image.width, CV_8UC1);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      gray.at<std::uint8_t>(y, x) =
          static_cast<std::uint8_t>(std::lround(hi > lo ? 255.0 * (up(y, x) - lo) / (hi - lo) : 0.0));
  cv::Mat heat, heat_big;
  cv::applyColorMap(gray, heat, cv::COLORMAP_JET);
  cv::resize(heat, heat_big, cv::Size(), kScale, kScale, cv::INTER_LINEAR);
  const cv::Mat base = to_bgr8(image, kScale);
  cv::Mat blended;
  cv::addWeighted(base, 0.45, heat_big, 0.55, 0.0, blended);
  cv::Mat canvas(base.rows, base.cols * 2 + 8, CV_8UC3, cv::Scalar(255, 255, 255));
  base.copyTo(canvas(cv::Rect(0, 0, base.cols, base.rows)));
  blended.copyTo(canvas(cv::Rect(base.cols + 8, 0, base.cols, base.rows)));
  save(path, canvas);
}

ReportFiles write_campaign_report(const ResultStore& store, const fs::path& out_dir, int panels_per_row) {
  if (store.summary.empty()) throw LoadError("store " + store.root.string() + " holds no campaign results");
  ReportFiles files;
  files.rs_chart = out_dir / "rs_chart.png";
  write_rs_bar_chart(store.summary, files.rs_chart);

  std::vector<std::string> names;
  if (store.manifest.contains("dataset")) names = store.manifest["dataset"].value("class_names", names);

  const auto clean_set = load_adversarial_set(store.root / "clean");
  std::map<std::string, Image> clean;
  for (const StoredImage& s : clean_set) clean.emplace(s.image_id, s.pixels);
  const std::map<std::string, GroundTruth> gts = load_store_ground_truth(store.root);

  for (const CampaignSummaryRow& row : store.summary) {
    int drawn = 0;
    for (const AttackRecord& r : store.records) {
      if (drawn >= panels_per_row) break;
      if (r.model_id != row.model_id || r.attack_key != row.attack_key || !r.ok) continue;
      const Image adv = read_png16(store.root / r.adv_file);
      const fs::path p = out_dir / "detections" / fmt::format("{}_{}_{}.png", safe(r.model_id), r.attack_key, safe(r.image_id));
      write_detection_panel(clean.at(r.image_id), adv, gts.at(r.image_id), r.clean_detections, r.adv_detections,
                            names, p);
      files.detection_panels.push_back(p);
      ++drawn;
    }
  }

  for (const auto& [id, info] : store.manifest.at("models").items()) {
    const fs::path ckpt = store.root / "models" / (safe(id) + ".ckpt");
    if (!fs::exists(ckpt) || clean_set.empty()) continue;
    const ToyDetector model = load_checkpoint(ckpt);
    const StoredImage& first = clean_set.front();
    fs::path p = out_dir / "attention" / fmt::format("{}_clean_{}.png", safe(id), safe(first.image_id));
    write_attention_heatmap(first.pixels, extract_encoder_attention(model, first.pixels), p);
    files.attention_maps.push_back(p);
    for (const CampaignSummaryRow& row : store.summary) {
      if (row.model_id != id) continue;
      for (const AttackRecord& r : store.records) {
        if (r.model_id != id || r.attack_key != row.attack_key || r.image_id != first.image_id || !r.ok) continue;
        const Image adv = read_png16(store.root / r.adv_file);
        p = out_dir / "attention" / fmt::format("{}_{}_{}.png", safe(id), r.attack_key, safe(first.image_id));
        write_attention_heatmap(adv, extract_encoder_attention(model, adv), p);
        files.attention_maps.push_back(p);
      }
    }
  }
  return files;
}

}  // namespace detrbench
