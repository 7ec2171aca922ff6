#include "thinkdraw/concept_world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw::world {

namespace {

constexpr std::array<std::string_view, kNumColors> kColorNames = {"red",  "orange", "yellow", "green",
                                                                  "blue", "purple", "pink",   "white"};
constexpr std::array<std::string_view, kMaxSides - kMinSides + 1> kShapeNames = {
    "triangle", "square", "pentagon", "hexagon", "heptagon", "octagon"};
// World-knowledge objects, one per palette color.
constexpr std::array<std::string_view, kNumColors> kColorThings = {
    "blood", "a carrot", "a lemon", "grass", "the sky", "a plum", "a flamingo", "snow"};
// Rainbow order covers the first six palette entries.
constexpr int kRainbowColors = 6;
constexpr std::array<std::string_view, 6> kOrdinals = {"first", "second", "third",
                                                       "fourth", "fifth", "sixth"};

constexpr double kBackground = 0.1;

std::string article(std::string_view next) {
  const char c = next.empty() ? 'x' : next.front();
  return (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? "an" : "a";
}

std::string with_article(std::string_view word) { return article(word) + " " + std::string(word); }

}  // namespace

const std::array<Rgb, kNumColors>& palette() {
  static const std::array<Rgb, kNumColors> p = {{
      {0.90, 0.10, 0.10},
      {1.00, 0.55, 0.00},
      {0.95, 0.90, 0.10},
      {0.10, 0.75, 0.20},
      {0.15, 0.30, 0.95},
      {0.60, 0.15, 0.80},
      {1.00, 0.50, 0.75},
      {0.97, 0.97, 0.97},
  }};
  return p;
}

std::string_view color_name(int color) { return kColorNames.at(static_cast<std::size_t>(color)); }
std::string_view shape_name(int sides) { return kShapeNames.at(static_cast<std::size_t>(sides - kMinSides)); }

std::optional<int> color_from_name(std::string_view name) {
  for (int i = 0; i < kNumColors; ++i) {
    if (kColorNames[static_cast<std::size_t>(i)] == name) return i;
  }
  return std::nullopt;
}

std::optional<int> sides_from_name(std::string_view name) {
  for (int i = 0; i < static_cast<int>(kShapeNames.size()); ++i) {
    if (kShapeNames[static_cast<std::size_t>(i)] == name) return i + kMinSides;
  }
  return std::nullopt;
}

std::string Concept::prompt() const {
  return std::string(color_name(color)) + " " + std::string(shape_name(sides));
}

std::vector<Concept> all_concepts() {
  std::vector<Concept> out;
  for (int i = 0; i < kNumConcepts; ++i) out.push_back(Concept::from_index(i));
  return out;
}

std::optional<Concept> try_parse_prompt(std::string_view prompt) {
  const auto sp = prompt.find(' ');
  if (sp == std::string_view::npos || prompt.find(' ', sp + 1) != std::string_view::npos) return std::nullopt;
  const auto color = color_from_name(prompt.substr(0, sp));
  const auto sides = sides_from_name(prompt.substr(sp + 1));
  if (!color || !sides) return std::nullopt;
  return Concept{*sides, *color};
}

Concept parse_prompt(std::string_view prompt) {
  auto c = try_parse_prompt(prompt);
  if (!c) throw ParseError("not a canonical '<color> <shape>' prompt: '" + std::string(prompt) + "'");
  return *c;
}

// ---------------------------------------------------------------- rendering

Image render(const Concept& c) {
  if (c.sides < kMinSides || c.sides > kMaxSides || c.color < 0 || c.color >= kNumColors) {
    throw ParseError("invalid concept");
  }
  constexpr double center = kImageSide / 2.0;
  constexpr double radius = 3.7;
  constexpr int ss = 4;  // supersamples per axis
  std::vector<std::pair<double, double>> verts;
  for (int k = 0; k < c.sides; ++k) {
    const double a = -std::numbers::pi / 2 + 2 * std::numbers::pi * k / c.sides;
    verts.emplace_back(center + radius * std::cos(a), center + radius * std::sin(a));
  }
  auto inside = [&](double x, double y) {
    for (int k = 0; k < c.sides; ++k) {
      const auto [x0, y0] = verts[static_cast<std::size_t>(k)];
      const auto [x1, y1] = verts[static_cast<std::size_t>((k + 1) % c.sides)];
      // Vertices wind clockwise in image coordinates (y down).
      if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0) return false;
    }
    return true;
  };
  const Rgb col = palette()[static_cast<std::size_t>(c.color)];
  Image img;
  for (int y = 0; y < kImageSide; ++y) {
    for (int x = 0; x < kImageSide; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          if (inside(x + (sx + 0.5) / ss, y + (sy + 0.5) / ss)) ++hits;
        }
      }
      const double cov = static_cast<double>(hits) / (ss * ss);
      img.at(y, x, 0) = kBackground * (1 - cov) + col.r * cov;
      img.at(y, x, 1) = kBackground * (1 - cov) + col.g * cov;
      img.at(y, x, 2) = kBackground * (1 - cov) + col.b * cov;
    }
  }
  return img;
}

Image image_from_values(std::span<const float> values) {
  if (values.size() != static_cast<std::size_t>(kImageValues)) {
    throw ShapeError("image needs " + std::to_string(kImageValues) + " values");
  }
  Image img;
  for (std::size_t i = 0; i < values.size(); ++i) {
    img.pixels[i] = std::clamp(static_cast<double>(values[i]), 0.0, 1.0);
  }
  return img;
}

Tensor<float> image_values(const Image& img) {
  std::vector<float> v(img.pixels.begin(), img.pixels.end());
  return Tensor<float>({kImageValues}, std::move(v));
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P6\n" << kImageSide << " " << kImageSide << "\n255\n";
  for (double v : img.pixels) {
    const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(static_cast<char>(b));
  }
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  if (!in || magic != "P6" || w != kImageSide || h != kImageSide || maxv != 255) {
    throw ParseError("not an 8x8 P6 pixmap: " + path);
  }
  in.get();
  Image img;
  for (double& v : img.pixels) {
    const int b = in.get();
    if (b == EOF) throw ParseError("truncated pixmap: " + path);
    v = b / 255.0;
  }
  return img;
}

// ---------------------------------------------------------------- embedder

FrozenEmbedder::FrozenEmbedder(std::uint64_t seed) : seed_(seed) {
  Rng rng(derive_seed(seed, {0xE3BEDull}));
  std::normal_distribution<double> n01(0.0, 1.0);
  constexpr double gain = 4.0;
  constexpr double bias_std = 0.2;
  weights_.resize(static_cast<std::size_t>(kEmbedDim) * kImageValues);
  for (int r = 0; r < kEmbedDim; ++r) {
    double* row = weights_.data() + static_cast<std::size_t>(r) * kImageValues;
    double mean = 0;
    for (int c = 0; c < kImageValues; ++c) mean += (row[c] = n01(rng) * gain / std::sqrt(kImageValues));
    mean /= kImageValues;
    // Zero-sum rows: uniform gray shifts do not move the embedding.
    for (int c = 0; c < kImageValues; ++c) row[c] -= mean;
  }
  bias_.resize(kEmbedDim);
  for (auto& b : bias_) b = n01(rng) * bias_std;
}

Embedding FrozenEmbedder::embed_image(const Image& img) const {
  Embedding e{};
  double norm2 = 0;
  for (int r = 0; r < kEmbedDim; ++r) {
    const double* row = weights_.data() + static_cast<std::size_t>(r) * kImageValues;
    double s = bias_[static_cast<std::size_t>(r)];
    for (int c = 0; c < kImageValues; ++c) s += row[c] * img.pixels[static_cast<std::size_t>(c)];
    e[static_cast<std::size_t>(r)] = std::tanh(s);
    norm2 += e[static_cast<std::size_t>(r)] * e[static_cast<std::size_t>(r)];
  }
  if (!(norm2 > 0.0)) throw NonFiniteError("degenerate image embedding (zero vector)");
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& v : e) v *= inv;
  return e;
}

Embedding FrozenEmbedder::embed_prompt(std::string_view prompt) const {
  return embed_image(render(parse_prompt(prompt)));
}

const FrozenEmbedder& default_embedder() {
  static const FrozenEmbedder e;
  return e;
}

double cosine(const Embedding& a, const Embedding& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

// ---------------------------------------------------------------- tasks

std::string_view mode_name(Mode m) { return m == Mode::direct ? "direct" : "reasoning"; }

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::eval_direct: return "eval_direct";
    case Split::eval_reasoning: return "eval_reasoning";
  }
  return "train";
}

Mode parse_mode(std::string_view s) {
  if (s == "direct") return Mode::direct;
  if (s == "reasoning") return Mode::reasoning;
  throw ParseError("unknown mode '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "eval_direct") return Split::eval_direct;
  if (s == "eval_reasoning") return Split::eval_reasoning;
  throw ParseError("unknown split '" + std::string(s) + "'");
}

const std::vector<TemplateInfo>& templates() {
  static const std::vector<TemplateInfo> t = {
      {0, "direct"},     {1, "arithmetic"}, {2, "arithmetic"}, {3, "arithmetic"}, {4, "arithmetic"},
      {5, "knowledge"},  {6, "knowledge"},  {7, "knowledge"},  {8, "knowledge"},  {9, "ordinal"},
      {10, "ordinal"},   {11, "ordinal"},   {12, "ordinal"},
  };
  return t;
}

std::optional<Task> make_task(int template_id, const Concept& target) {
  const std::string color(color_name(target.color));
  const std::string shape(shape_name(target.sides));
  const std::string n = std::to_string(target.sides);
  const std::string thing(kColorThings[static_cast<std::size_t>(target.color)]);
  Task t;
  t.gt_prompt = target.prompt();
  t.template_id = template_id;
  t.mode = template_id == 0 ? Mode::direct : Mode::reasoning;

  auto arithmetic = [&](int ref_sides, const std::string& phrase, const std::string& op) -> std::optional<Task> {
    if (ref_sides < kMinSides || ref_sides > kMaxSides) return std::nullopt;
    const std::string ref(shape_name(ref_sides));
    const std::string r = std::to_string(ref_sides);
    t.instruction = with_article(color) + " shape with " + phrase + " " + with_article(ref);
    t.explanation = with_article(ref) + " has " + r + " sides; " + r + op + "=" + n + "; " + with_article(shape);
    return t;
  };
  const std::string knowledge_expl = thing + " is " + color + "; " + n + " sides is " + with_article(shape);
  const std::string poly_ord(kOrdinals[static_cast<std::size_t>(target.sides - kMinSides)]);
  const bool in_rainbow = target.color < kRainbowColors;
  const std::string color_ord(in_rainbow ? kOrdinals[static_cast<std::size_t>(target.color)] : "");
  const std::string poly_expl =
      "polygons start at 3 sides; the " + poly_ord + " has " + n + "; " + with_article(shape);
  const std::string rainbow_expl =
      "the " + color_ord + " rainbow color is " + color + "; " + n + " sides is " + with_article(shape);

  switch (template_id) {
    case 0:
      t.instruction = t.gt_prompt;
      t.explanation = "";
      return t;
    case 1: return arithmetic(target.sides - 1, "one more side than", "+1");
    case 2: return arithmetic(target.sides + 1, "one fewer side than", "-1");
    case 3: return arithmetic(target.sides - 2, "two more sides than", "+2");
    case 4: {
      if (target.sides % 2 != 0) return std::nullopt;
      const int half = target.sides / 2;
      if (half < kMinSides) return std::nullopt;
      const std::string h = std::to_string(half);
      return arithmetic(half, "twice the sides of", "+" + h);
    }
    case 5:
      t.instruction = "a shape with " + n + " sides, the color of " + thing;
      t.explanation = knowledge_expl;
      return t;
    case 6:
      t.instruction = "draw a " + n + "-sided shape colored like " + thing;
      t.explanation = knowledge_expl;
      return t;
    case 7:
      t.instruction = n + " sides, same color as " + thing;
      t.explanation = knowledge_expl;
      return t;
    case 8:
      t.instruction = "a " + n + "-sided figure the color of " + thing;
      t.explanation = knowledge_expl;
      return t;
    case 9:
      t.instruction = with_article(color) + " shape, the " + poly_ord + " polygon by sides";
      t.explanation = poly_expl;
      return t;
    case 10:
      if (!in_rainbow) return std::nullopt;
      t.instruction = "a " + n + "-sided shape in the " + color_ord + " rainbow color";
      t.explanation = rainbow_expl;
      return t;
    case 11:
      t.instruction = "the " + poly_ord + " polygon by sides, colored " + color;
      t.explanation = poly_expl;
      return t;
    case 12:
      if (!in_rainbow) return std::nullopt;
      t.instruction = "a shape with " + n + " sides in the " + color_ord + " color of the rainbow";
      t.explanation = rainbow_expl;
      return t;
    default:
      return std::nullopt;
  }
}

std::vector<Task> enumerate_tasks(Mode mode) {
  std::vector<Task> out;
  for (const auto& info : templates()) {
    if ((info.id == 0) != (mode == Mode::direct)) continue;
    for (const auto& c : all_concepts()) {
      if (auto t = make_task(info.id, c)) out.push_back(std::move(*t));
    }
  }
  return out;
}

const std::vector<Task>& Dataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::eval_direct: return eval_direct;
    case Split::eval_reasoning: return eval_reasoning;
  }
  return train;
}

std::vector<Task> Dataset::filtered(Split s, Mode m) const {
  std::vector<Task> out;
  for (const auto& t : split(s)) {
    if (t.mode == m) out.push_back(t);
  }
  return out;
}

Dataset generate_dataset(std::uint64_t seed, const SplitCounts& counts) {
  if (counts.train < 1 || counts.eval_direct < 1 || counts.eval_reasoning < 1) {
    throw DatasetError("every split count must be at least 1");
  }
  auto direct = enumerate_tasks(Mode::direct);
  auto reasoning = enumerate_tasks(Mode::reasoning);
  Rng rng = make_rng(seed, {0xDA7Aull});
  std::shuffle(direct.begin(), direct.end(), rng);
  std::shuffle(reasoning.begin(), reasoning.end(), rng);
  if (counts.eval_direct > static_cast<int>(direct.size())) {
    throw DatasetError("eval_direct count " + std::to_string(counts.eval_direct) + " exceeds " +
                       std::to_string(direct.size()) + " available direct pairs");
  }
  if (counts.eval_reasoning > static_cast<int>(reasoning.size())) {
    throw DatasetError("eval_reasoning count " + std::to_string(counts.eval_reasoning) + " exceeds " +
                       std::to_string(reasoning.size()) + " available reasoning pairs");
  }
  Dataset ds;
  std::vector<Task> pool;
  for (std::size_t i = 0; i < direct.size(); ++i) {
    if (static_cast<int>(i) < counts.eval_direct) {
      direct[i].split = Split::eval_direct;
      ds.eval_direct.push_back(direct[i]);
    } else {
      pool.push_back(direct[i]);
    }
  }
  for (std::size_t i = 0; i < reasoning.size(); ++i) {
    if (static_cast<int>(i) < counts.eval_reasoning) {
      reasoning[i].split = Split::eval_reasoning;
      ds.eval_reasoning.push_back(reasoning[i]);
    } else {
      pool.push_back(reasoning[i]);
    }
  }
  if (counts.train > static_cast<int>(pool.size())) {
    throw DatasetError("train count " + std::to_string(counts.train) + " exceeds " +
                       std::to_string(pool.size()) + " pairs left after holding out eval splits");
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(counts.train));
  for (auto& t : pool) t.split = Split::train;
  ds.train = std::move(pool);
  return ds;
}

// ---------------------------------------------------------------- export

std::string task_to_json_line(const Task& t) {
  nlohmann::ordered_json j;
  j["instruction"] = t.instruction;
  j["gt_prompt"] = t.gt_prompt;
  j["explanation"] = t.explanation;
  j["mode"] = std::string(mode_name(t.mode));
  j["split"] = std::string(split_name(t.split));
  return j.dump();
}

Task task_from_json_line(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed task record: ") + e.what());
  }
  Task t;
  try {
    t.instruction = j.at("instruction").get<std::string>();
    t.gt_prompt = j.at("gt_prompt").get<std::string>();
    t.explanation = j.at("explanation").get<std::string>();
    t.mode = parse_mode(j.at("mode").get<std::string>());
    t.split = parse_split(j.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("task record missing field: ") + e.what());
  }
  const Concept c = parse_prompt(t.gt_prompt);
  // Recover the template by re-realizing every candidate for this concept.
  t.template_id = -1;
  for (const auto& info : templates()) {
    auto cand = make_task(info.id, c);
    if (cand && cand->instruction == t.instruction) {
      t.template_id = info.id;
      break;
    }
  }
  return t;
}

void write_tasks(const std::vector<Task>& tasks, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  for (const auto& t : tasks) out << task_to_json_line(t) << "\n";
}

std::vector<Task> read_tasks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::vector<Task> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(task_from_json_line(line));
  }
  return out;
}

}  // namespace thinkdraw::world
