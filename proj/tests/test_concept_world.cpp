#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "thinkdraw/concept_world.hpp"

using namespace thinkdraw;
using namespace thinkdraw::world;

TEST_CASE("concept universe") {
  const auto cs = all_concepts();
  CHECK(cs.size() == 48);
  std::set<std::pair<int, int>> seen;
  for (const auto& c : cs) {
    CHECK(c.sides >= 3);
    CHECK(c.sides <= 8);
    seen.emplace(c.sides, c.color);
    CHECK(parse_prompt(c.prompt()) == c);
  }
  CHECK(seen.size() == 48);
}

TEST_CASE("render is deterministic and in range") {
  const Concept red_triangle{3, 0};
  CHECK(render(red_triangle) == render(red_triangle));
  for (const auto& c : all_concepts()) {
    const Image img = render(c);
    for (double v : img.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("triangle and octagon differ in several pixels") {
  const Image a = render({3, 0});
  const Image b = render({8, 0});
  int differing = 0;
  for (int y = 0; y < kImageSide; ++y) {
    for (int x = 0; x < kImageSide; ++x) {
      bool diff = false;
      for (int ch = 0; ch < 3; ++ch) diff = diff || a.at(y, x, ch) != b.at(y, x, ch);
      differing += diff ? 1 : 0;
    }
  }
  CHECK(differing >= 4);
}

TEST_CASE("image embeddings") {
  const auto& e = default_embedder();
  const Image img = render({5, 3});
  const auto v = e.embed_image(img);
  double n2 = 0;
  for (double x : v) n2 += x * x;
  CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-6);
  CHECK(cosine(v, e.embed_image(img)) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<Embedding> all;
  for (const auto& c : all_concepts()) all.push_back(e.embed_image(render(c)));
  double max_cos = -1;
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      CHECK(all[i] != all[j]);
      max_cos = std::max(max_cos, cosine(all[i], all[j]));
    }
  }
  CHECK(max_cos < 1.0);

  Image zero;
  const auto z = e.embed_image(zero);
  CHECK(std::isfinite(cosine(z, all[0])));
}

TEST_CASE("prompt embeddings share the image space") {
  const auto& e = default_embedder();
  CHECK(e.embed_prompt("red triangle") == e.embed_image(render({3, 0})));
  CHECK(cosine(e.embed_prompt("red triangle"), e.embed_image(render({3, 0}))) == doctest::Approx(1.0));
  CHECK(cosine(e.embed_prompt("blue square"), e.embed_image(render({3, 0}))) < 0.99);
  CHECK_THROWS_AS(e.embed_prompt("red blob"), ParseError);
  CHECK_THROWS_AS(e.embed_prompt("triangle"), ParseError);
}

TEST_CASE("embedder parameters are a pure function of the seed") {
  FrozenEmbedder a(5), b(5), c(6);
  CHECK(a.weights() == b.weights());
  CHECK(a.bias() == b.bias());
  CHECK(a.weights() != c.weights());
}

TEST_CASE("template families") {
  std::map<std::string, int> per_family;
  for (const auto& t : templates()) per_family[std::string(t.family)]++;
  CHECK(per_family["arithmetic"] >= 4);
  CHECK(per_family["knowledge"] >= 4);
  CHECK(per_family["ordinal"] >= 4);

  const auto t = make_task(1, {5, 0});
  REQUIRE(t);
  CHECK(t->instruction == "a red shape with one more side than a square");
  CHECK(t->gt_prompt == "red pentagon");
  CHECK(t->explanation == "a square has 4 sides; 4+1=5; a pentagon");
  CHECK_FALSE(make_task(1, {3, 0}));  // nothing has 2 sides
}

TEST_CASE("reasoning instructions never name the target shape") {
  for (const auto& t : enumerate_tasks(Mode::reasoning)) {
    const std::string shape(shape_name(t.target().sides));
    CHECK_MESSAGE(t.instruction.find(shape) == std::string::npos, t.instruction);
  }
}

TEST_CASE("dataset generation") {
  const SplitCounts counts;
  const Dataset a = generate_dataset(7, counts);
  const Dataset b = generate_dataset(7, counts);
  auto lines = [](const std::vector<Task>& ts) {
    std::vector<std::string> out;
    for (const auto& t : ts) out.push_back(task_to_json_line(t));
    return out;
  };
  CHECK(lines(a.train) == lines(b.train));
  CHECK(lines(a.eval_reasoning) == lines(b.eval_reasoning));
  CHECK(lines(a.train) != lines(generate_dataset(8, counts).train));

  CHECK(a.train.size() == static_cast<std::size_t>(counts.train));
  CHECK(a.eval_direct.size() == static_cast<std::size_t>(counts.eval_direct));
  CHECK(a.eval_reasoning.size() == static_cast<std::size_t>(counts.eval_reasoning));

  for (const auto* split : {&a.train, &a.eval_direct, &a.eval_reasoning}) {
    for (const auto& t : *split) {
      CHECK_NOTHROW(render(parse_prompt(t.gt_prompt)));
    }
  }

  std::set<std::pair<int, int>> train_pairs;
  for (const auto& t : a.train) train_pairs.emplace(t.template_id, t.target().index());
  int shared = 0;
  for (const auto& t : a.eval_reasoning) shared += train_pairs.count({t.template_id, t.target().index()}) ? 1 : 0;
  for (const auto& t : a.eval_direct) shared += train_pairs.count({t.template_id, t.target().index()}) ? 1 : 0;
  CHECK(shared == 0);
}

TEST_CASE("dataset count validation") {
  CHECK_THROWS_AS(generate_dataset(1, {0, 1, 1}), DatasetError);
  CHECK_THROWS_AS(generate_dataset(1, {1, 49, 1}), DatasetError);
  CHECK_THROWS_AS(generate_dataset(1, {100000, 1, 1}), DatasetError);
}

TEST_CASE("task records round-trip through line-delimited files") {
  const Dataset ds = generate_dataset(3, {});
  const auto path = std::filesystem::temp_directory_path() / "thinkdraw_tasks_test.jsonl";
  write_tasks(ds.train, path.string());
  const auto back = read_tasks(path.string());
  REQUIRE(back.size() == ds.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].instruction == ds.train[i].instruction);
    CHECK(back[i].gt_prompt == ds.train[i].gt_prompt);
    CHECK(back[i].explanation == ds.train[i].explanation);
    CHECK(back[i].mode == ds.train[i].mode);
    CHECK(back[i].split == ds.train[i].split);
    CHECK(back[i].template_id == ds.train[i].template_id);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(task_from_json_line("{\"instruction\": 1}"), ParseError);
}

TEST_CASE("pixmap round trip") {
  const Image img = render({6, 4});
  const auto path = std::filesystem::temp_directory_path() / "thinkdraw_img_test.ppm";
  write_ppm(img, path.string());
  const Image back = read_ppm(path.string());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 0.5 / 255 + 1e-12);
  std::filesystem::remove(path);
}
