#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "thinkdraw/numerics/tensor.hpp"

namespace thinkdraw::world {

inline constexpr int kMinSides = 3;
inline constexpr int kMaxSides = 8;
inline constexpr int kNumColors = 8;
inline constexpr int kNumConcepts = (kMaxSides - kMinSides + 1) * kNumColors;  // 48
inline constexpr int kImageSide = 8;
inline constexpr int kImageValues = kImageSide * kImageSide * 3;  // 192
inline constexpr int kEmbedDim = 32;

struct Rgb {
  double r, g, b;
};

const std::array<Rgb, kNumColors>& palette();
std::string_view color_name(int color);
std::string_view shape_name(int sides);
std::optional<int> color_from_name(std::string_view name);
std::optional<int> sides_from_name(std::string_view name);

struct Concept {
  int sides = kMinSides;
  int color = 0;

  int index() const { return (sides - kMinSides) * kNumColors + color; }
  static Concept from_index(int i) { return {kMinSides + i / kNumColors, i % kNumColors}; }
  std::string prompt() const;  // "<color> <shape-name>"
  friend bool operator==(const Concept&, const Concept&) = default;
};

std::vector<Concept> all_concepts();

// Parses a canonical "<color> <shape-name>" prompt. Throws ParseError.
Concept parse_prompt(std::string_view prompt);
std::optional<Concept> try_parse_prompt(std::string_view prompt);

// 8x8 RGB raster, row-major with interleaved channels; values in [0, 1].
struct Image {
  std::array<double, kImageValues> pixels{};

  double& at(int y, int x, int c) { return pixels[static_cast<std::size_t>((y * kImageSide + x) * 3 + c)]; }
  double at(int y, int x, int c) const {
    return pixels[static_cast<std::size_t>((y * kImageSide + x) * 3 + c)];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

Image render(const Concept& c);
Image image_from_values(std::span<const float> values);  // clamps to [0, 1]
Tensor<float> image_values(const Image& img);             // [192]
// Binary P6 pixmap, 8-bit.
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

using Embedding = std::array<double, kEmbedDim>;

// Frozen CLIP stand-in: seeded affine 192 -> 32 map, tanh, unit-normalize.
class FrozenEmbedder {
 public:
  static constexpr std::uint64_t kDefaultSeed = 20250527;
  explicit FrozenEmbedder(std::uint64_t seed = kDefaultSeed);

  Embedding embed_image(const Image& img) const;
  // Text embeds as the rendering of the concept it names.
  Embedding embed_prompt(std::string_view prompt) const;

  std::uint64_t seed() const { return seed_; }
  const std::vector<double>& weights() const { return weights_; }  // [32 x 192]
  const std::vector<double>& bias() const { return bias_; }

 private:
  std::uint64_t seed_;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

const FrozenEmbedder& default_embedder();

double cosine(const Embedding& a, const Embedding& b);

// ---------------------------------------------------------------- datasets

enum class Mode { direct, reasoning };
enum class Split { train, eval_direct, eval_reasoning };

std::string_view mode_name(Mode m);
std::string_view split_name(Split s);
Mode parse_mode(std::string_view s);
Split parse_split(std::string_view s);

struct Task {
  std::string instruction;
  std::string gt_prompt;
  std::string explanation;
  Mode mode = Mode::direct;
  Split split = Split::train;
  int template_id = 0;  // 0 = direct; reasoning templates are 1..N

  Concept target() const { return parse_prompt(gt_prompt); }
};

struct TemplateInfo {
  int id;
  std::string_view family;  // "direct", "arithmetic", "knowledge", "ordinal"
};
const std::vector<TemplateInfo>& templates();

// Realizes template `template_id` for the target concept, if the pair is valid.
std::optional<Task> make_task(int template_id, const Concept& target);

// All valid (template, concept) pairs for the given mode.
std::vector<Task> enumerate_tasks(Mode mode);

struct SplitCounts {
  int train = 400;
  int eval_direct = 12;
  int eval_reasoning = 48;
};

struct Dataset {
  std::vector<Task> train;
  std::vector<Task> eval_direct;
  std::vector<Task> eval_reasoning;

  const std::vector<Task>& split(Split s) const;
  std::vector<Task> filtered(Split s, Mode m) const;
};

// Pure function of (seed, counts). Eval pairs are held out from train.
// Throws DatasetError when counts are < 1 or exceed the available pairs.
Dataset generate_dataset(std::uint64_t seed, const SplitCounts& counts);

// Line-delimited records {instruction, gt_prompt, explanation, mode, split}.
std::string task_to_json_line(const Task& t);
Task task_from_json_line(std::string_view line);
void write_tasks(const std::vector<Task>& tasks, const std::string& path);
std::vector<Task> read_tasks(const std::string& path);

}  // namespace thinkdraw::world
