#include "detrbench/toy_detector.hpp"

#include "detrbench/autograd.hpp"
#include "detrbench/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

namespace detrbench {

namespace {

constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.25;
constexpr int kKernel = 3;
constexpr char kMagic[8] = {'D', 'T', 'B', 'C', 'K', 'P', 'T', '1'};

std::string layer_name(const std::string& prefix, int i, const std::string& suffix) {
  return prefix + "." + std::to_string(i) + "." + suffix;
}

Mat sinusoidal_positions(int gh, int gw, int d) {
  const int half = d / 2;
  Mat pos(static_cast<Eigen::Index>(gh) * gw, d);
  const double two_pi = 2.0 * std::numbers::pi;
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      const Eigen::Index r = static_cast<Eigen::Index>(y) * gw + x;
      const double ny = (y + 0.5) / gh * two_pi;
      const double nx = (x + 0.5) / gw * two_pi;
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, 2.0 * (i / 2) / half);
        pos(r, i) = (i % 2 == 0) ? std::sin(ny / freq) : std::cos(ny / freq);
        pos(r, half + i) = (i % 2 == 0) ? std::sin(nx / freq) : std::cos(nx / freq);
      }
    }
  }
  return pos;
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Mat xavier(int in, int out) {
    const double limit = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Mat m(in, out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return m;
  }
  Mat kaiming(int fan_in, int out) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Mat m(fan_in, out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return m;
  }
  Mat normal(int rows, int cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

std::vector<NamedParameter> init_parameters(const ToyDetectorConfig& c) {
  Initializer init(c.rng_seed);
  std::vector<NamedParameter> p;
  auto add = [&](std::string name, Mat m) { p.push_back({std::move(name), std::move(m)}); };
  auto linear = [&](const std::string& name, int in, int out) {
    add(name + ".weight", init.xavier(in, out));
    add(name + ".bias", Mat::Zero(1, out));
  };
  auto norm = [&](const std::string& name, int d) {
    add(name + ".weight", Mat::Ones(1, d));
    add(name + ".bias", Mat::Zero(1, d));
  };
  const int d = c.feature_width;

  int in_ch = Image::channels;
  for (std::size_t i = 0; i < c.backbone_channels.size(); ++i) {
    const int out_ch = c.backbone_channels[i];
    add(layer_name("backbone", static_cast<int>(i), "weight"), init.kaiming(kKernel * kKernel * in_ch, out_ch));
    add(layer_name("backbone", static_cast<int>(i), "bias"), Mat::Zero(1, out_ch));
    in_ch = out_ch;
  }
  linear("input_proj", in_ch, d);

  for (int l = 0; l < c.encoder_layers; ++l) {
    const std::string e = "encoder." + std::to_string(l);
    for (const char* m : {".q", ".k", ".v", ".o"}) linear(e + m, d, d);
    norm(e + ".norm1", d);
    linear(e + ".ffn1", d, c.ffn_width);
    linear(e + ".ffn2", c.ffn_width, d);
    norm(e + ".norm2", d);
  }
  add("query_pos", init.normal(c.queries, d, 1.0));
  for (int l = 0; l < c.decoder_layers; ++l) {
    const std::string e = "decoder." + std::to_string(l);
    for (const char* m : {".self.q", ".self.k", ".self.v", ".self.o"}) linear(e + m, d, d);
    norm(e + ".norm1", d);
    for (const char* m : {".cross.q", ".cross.k", ".cross.v", ".cross.o"}) linear(e + m, d, d);
    norm(e + ".norm2", d);
    linear(e + ".ffn1", d, c.ffn_width);
    linear(e + ".ffn2", c.ffn_width, d);
    norm(e + ".norm3", d);
  }
  norm("decoder_norm", d);
  linear("class_head", d, c.num_classes + 1);
  linear("box_head.0", d, d);
  linear("box_head.1", d, d);
  linear("box_head.2", d, 4);
  return p;
}

}  // namespace

void ToyDetectorConfig::validate() const {
  if (feature_width < 1 || encoder_layers < 1 || decoder_layers < 1 || queries < 1 || num_classes < 1 ||
      heads < 1 || ffn_width < 1 || image_size < 1 || backbone_channels.empty())
    throw InputError("toy detector config: all counts must be >= 1");
  if (feature_width % heads != 0) throw InputError("toy detector config: feature_width must divide by heads");
  if (feature_width % 2 != 0) throw InputError("toy detector config: feature_width must be even");
  for (int ch : backbone_channels)
    if (ch < 1) throw InputError("toy detector config: backbone channels must be >= 1");
}

struct ToyDetector::Graph {
  ag::Tape tape;
  ag::Var input;
  std::vector<ag::Var> params;
  std::vector<ag::Var> logits;  // per decoder layer
  std::vector<ag::Var> boxes;
  Mat attention;
  int feature_height = 0;
  int feature_width = 0;

  DetectorOutputs outputs() const {
    DetectorOutputs out;
    for (std::size_t k = 0; k < logits.size(); ++k) {
      out.aux_logits.push_back(tape.value(logits[k]));
      out.aux_boxes_raw.push_back(tape.value(boxes[k]));
    }
    out.final_logits = out.aux_logits.back();
    out.final_boxes_raw = out.aux_boxes_raw.back();
    out.encoder_attention = attention;
    out.feature_height = feature_height;
    out.feature_width = feature_width;
    return out;
  }
};

ToyDetector::ToyDetector(const ToyDetectorConfig& config) : config_(config) {
  config_.validate();
  params_ = init_parameters(config_);
  index_parameters();
}

ToyDetector::ToyDetector(const ToyDetectorConfig& config, std::vector<NamedParameter> parameters)
    : config_(config), params_(std::move(parameters)) {
  config_.validate();
  const std::vector<NamedParameter> layout = init_parameters(config_);
  if (layout.size() != params_.size()) throw InputError("parameter table does not match config layout");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != params_[i].name || layout[i].value.rows() != params_[i].value.rows() ||
        layout[i].value.cols() != params_[i].value.cols())
      throw InputError("parameter '" + params_[i].name + "' does not match config layout");
  }
  index_parameters();
}

void ToyDetector::index_parameters() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].name, i);
}

std::size_t ToyDetector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ToyDetector::build(Graph& g, const Image& pixels, bool input_grad, bool param_grad) const {
  check_pixels(pixels);
  if (pixels.height != config_.image_size || pixels.width != config_.image_size)
    throw InputError("toy detector expects " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + " input, got " + std::to_string(pixels.height) + "x" +
                     std::to_string(pixels.width));
  ag::Tape& t = g.tape;
  for (const auto& p : params_) g.params.push_back(param_grad ? t.leaf(p.value) : t.constant(p.value));
  auto P = [&](const std::string& name) { return g.params[index_.at(name)]; };
  auto lin = [&](ag::Var x, const std::string& name) { return t.linear(x, P(name + ".weight"), P(name + ".bias")); };
  auto ln = [&](ag::Var x, const std::string& name) {
    return t.layer_norm(x, P(name + ".weight"), P(name + ".bias"));
  };

  Mat x = Eigen::Map<const Mat>(pixels.data.data(), static_cast<Eigen::Index>(pixels.height) * pixels.width,
                                Image::channels);
  g.input = input_grad ? t.leaf(std::move(x)) : t.constant(std::move(x));

  const std::vector<double> scale(Image::channels, 1.0 / kPixelStd);
  const std::vector<double> shift(Image::channels, -kPixelMean / kPixelStd);
  ag::Var h = t.affine_columns(g.input, scale, shift);
  ag::ConvShape shape{pixels.height, pixels.width, Image::channels};
  for (std::size_t i = 0; i < config_.backbone_channels.size(); ++i) {
    ag::ConvShape out;
    h = t.conv2d(h, shape, P(layer_name("backbone", static_cast<int>(i), "weight")),
                 P(layer_name("backbone", static_cast<int>(i), "bias")), kKernel, 2, 1, &out);
    h = t.silu(h);
    shape = out;
  }
  g.feature_height = shape.height;
  g.feature_width = shape.width;

  const int d = config_.feature_width;
  ag::Var src = lin(h, "input_proj");
  ag::Var pos = t.constant(sinusoidal_positions(shape.height, shape.width, d));

  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string e = "encoder." + std::to_string(l);
    ag::Var qk = t.add(src, pos);
    Mat* weights = (l == config_.encoder_layers - 1) ? &g.attention : nullptr;
    ag::Var a = t.attention(lin(qk, e + ".q"), lin(qk, e + ".k"), lin(src, e + ".v"), config_.heads, weights);
    src = ln(t.add(src, lin(a, e + ".o")), e + ".norm1");
    ag::Var ff = lin(t.silu(lin(src, e + ".ffn1")), e + ".ffn2");
    src = ln(t.add(src, ff), e + ".norm2");
  }
  const ag::Var memory = src;
  const ag::Var memory_key = t.add(memory, pos);

  ag::Var query_pos = P("query_pos");
  ag::Var tgt = t.constant(Mat::Zero(config_.queries, d));
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string e = "decoder." + std::to_string(l);
    ag::Var qk = t.add(tgt, query_pos);
    ag::Var a = t.attention(lin(qk, e + ".self.q"), lin(qk, e + ".self.k"), lin(tgt, e + ".self.v"), config_.heads);
    tgt = ln(t.add(tgt, lin(a, e + ".self.o")), e + ".norm1");
    ag::Var c = t.attention(lin(t.add(tgt, query_pos), e + ".cross.q"), lin(memory_key, e + ".cross.k"),
                            lin(memory, e + ".cross.v"), config_.heads);
    tgt = ln(t.add(tgt, lin(c, e + ".cross.o")), e + ".norm2");
    ag::Var ff = lin(t.silu(lin(tgt, e + ".ffn1")), e + ".ffn2");
    tgt = ln(t.add(tgt, ff), e + ".norm3");

    ag::Var hs = ln(tgt, "decoder_norm");
    g.logits.push_back(lin(hs, "class_head"));
    ag::Var b = t.silu(lin(hs, "box_head.0"));
    b = t.silu(lin(b, "box_head.1"));
    g.boxes.push_back(lin(b, "box_head.2"));
  }
}

LossEvaluation ToyDetector::run_backward(Graph& g, const Image& pixels, const LossSpec& loss) const {
  const DetectorOutputs outputs = g.outputs();
  LossEvaluation eval = loss(pixels, outputs);
  const std::size_t n = g.logits.size();
  // The final head is the last decoder layer's head, so both gradients land
  // on the same tape node.
  for (std::size_t k = 0; k < n; ++k) {
    if (eval.head_grad.aux_logits.size() == n) g.tape.seed(g.logits[k], eval.head_grad.aux_logits[k]);
    if (eval.head_grad.aux_boxes_raw.size() == n) g.tape.seed(g.boxes[k], eval.head_grad.aux_boxes_raw[k]);
  }
  if (eval.head_grad.final_logits.size() != 0) g.tape.seed(g.logits.back(), eval.head_grad.final_logits);
  if (eval.head_grad.final_boxes_raw.size() != 0) g.tape.seed(g.boxes.back(), eval.head_grad.final_boxes_raw);
  g.tape.backward();
  return eval;
}

DetectorOutputs ToyDetector::forward(const Image& pixels) const {
  Graph g;
  build(g, pixels, false, false);
  return g.outputs();
}

GradientResult ToyDetector::input_gradient(const Image& pixels, const LossSpec& loss) const {
  Graph g;
  build(g, pixels, true, false);
  GradientResult r;
  r.outputs = g.outputs();
  r.evaluation = run_backward(g, pixels, loss);
  r.loss = r.evaluation.value;
  r.gradient = Image(pixels.height, pixels.width, 0.0);
  const Mat& gi = g.tape.grad(g.input);
  if (gi.size() != 0) std::memcpy(r.gradient.data.data(), gi.data(), sizeof(double) * r.gradient.size());
  if (!r.evaluation.pixel_grad.data.empty()) {
    if (!r.evaluation.pixel_grad.same_shape(pixels)) throw InputError("loss pixel gradient has the wrong shape");
    for (std::size_t i = 0; i < r.gradient.size(); ++i) r.gradient.data[i] += r.evaluation.pixel_grad.data[i];
  }
  return r;
}

ToyDetector::ParameterGradients ToyDetector::parameter_gradients(const Image& pixels, const LossSpec& loss) const {
  Graph g;
  build(g, pixels, false, true);
  ParameterGradients r;
  r.evaluation = run_backward(g, pixels, loss);
  r.loss = r.evaluation.value;
  r.grads.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Mat& gp = g.tape.grad(g.params[i]);
    r.grads.push_back(gp.size() != 0 ? gp : Mat::Zero(params_[i].value.rows(), params_[i].value.cols()));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json config_to_json(const ToyDetectorConfig& c) {
  return {{"feature_width", c.feature_width}, {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers}, {"queries", c.queries},
          {"num_classes", c.num_classes},       {"rng_seed", c.rng_seed},
          {"heads", c.heads},                   {"ffn_width", c.ffn_width},
          {"image_size", c.image_size},         {"backbone_channels", c.backbone_channels}};
}

ToyDetectorConfig config_from_json(const nlohmann::json& j) {
  ToyDetectorConfig c;
  c.feature_width = j.at("feature_width").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.queries = j.at("queries").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  c.heads = j.at("heads").get<int>();
  c.ffn_width = j.at("ffn_width").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  return c;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw LoadError("checkpoint truncated");
  return v;
}

}  // namespace

void save_checkpoint(const ToyDetector& model, const std::filesystem::path& path) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["kind"] = "toy_detr";
  manifest["config"] = config_to_json(model.config());
  manifest["seed"] = model.config().rng_seed;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& p : model.parameters()) table.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}});
  manifest["parameters"] = table;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw LoadError("cannot open checkpoint for writing: " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : model.parameters()) {
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
      os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(p.value.rows()));
      write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(p.value.cols()));
      os.write(reinterpret_cast<const char*>(p.value.data()),
               static_cast<std::streamsize>(sizeof(double) * p.value.size()));
    }
    if (!os) throw LoadError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ToyDetector load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint: " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw LoadError("not a toy detector checkpoint: " + path.string());
  const auto len = read_pod<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw LoadError("checkpoint manifest truncated");
  const nlohmann::json manifest = nlohmann::json::parse(text);
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw LoadError("unsupported checkpoint format version");
  const ToyDetectorConfig config = config_from_json(manifest.at("config"));
  const std::size_t count = manifest.at("parameters").size();

  std::vector<NamedParameter> params;
  params.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rows = read_pod<std::uint64_t>(is);
    const auto cols = read_pod<std::uint64_t>(is);
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!is) throw LoadError("checkpoint parameter data truncated");
    params.push_back({std::move(name), std::move(m)});
  }
  return ToyDetector(config, std::move(params));
}

}  // namespace detrbench
