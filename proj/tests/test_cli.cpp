#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "thinkdraw/concept_world.hpp"
#include "thinkdraw/rewards.hpp"

namespace fs = std::filesystem;
using thinkdraw::world::read_ppm;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "thinkdraw_test_cli";

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  fs::create_directories(kRoot);
  const fs::path out = kRoot / "stdout.txt";
  const std::string cmd = std::string(THINKDRAW_CLI) + " " + args + " > " + out.string() + " 2> " +
                          (kRoot / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::ostringstream os;
  os << in.rdbuf();
  r.out = os.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) n += line.empty() ? 0 : 1;
  return n;
}

// Tiny model and budgets so the full chain of stages finishes in seconds.
fs::path tiny_config() {
  const fs::path path = kRoot / "tiny.json";
  fs::create_directories(kRoot);
  const nlohmann::json j = {
      {"seed", 5},
      {"threads", 1},
      {"data", {{"train", 24}, {"eval_direct", 4}, {"eval_reasoning", 6}}},
      {"model",
       {{"policy", {{"width", 16}, {"layers", 1}, {"heads", 2}, {"ff", 32}}},
        {"decoder",
         {{"width", 16},
          {"layers", 1},
          {"heads", 2},
          {"ff", 32},
          {"cond_width", 16},
          {"connector_layers", 1},
          {"time_frequencies", 4},
          {"sampling_steps", 2}}}}},
      {"stage0", {{"steps", 4}, {"batch", 3}, {"consistency_target", -1.0}, {"eval_every", 2}}},
      {"stage1", {{"steps", 4}, {"batch", 3}}},
      {"stage2", {{"steps", 4}, {"batch", 3}}},
      {"stage3",
       {{"updates", 4},
        {"prompts_per_update", 2},
        {"warmup", 1},
        {"rgpo", {{"max_len", 12}, {"image_steps", 2}}}}}};
  std::ofstream(path) << j.dump(2);
  return path;
}

std::string train(int stage, const fs::path& dir, const std::string& extra = "") {
  return "train --stage " + std::to_string(stage) + " --config " + tiny_config().string() + " --out " + dir.string() +
         " " + extra;
}

}  // namespace

TEST_CASE("gen-data") {
  const fs::path a = kRoot / "data_a", b = kRoot / "data_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const Result r = run("gen-data --seed 4 --out " + a.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("train 400") != std::string::npos);
  REQUIRE(run("gen-data --seed 4 --out " + b.string()).code == 0);
  for (const char* f : {"train.jsonl", "eval_direct.jsonl", "eval_reasoning.jsonl"}) {
    CHECK(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
    CHECK_FALSE(thinkdraw::world::read_tasks((a / f).string()).empty());
  }
  CHECK(run("gen-data --seed 4 --out " + a.string() + " --counts 400,12,100000").code == 2);
  CHECK(run("gen-data --seed 4 --out " + a.string() + " --counts 1,2").code == 2);
}

TEST_CASE("training stages, resume, evaluation and inspection") {
  const fs::path dir = kRoot / "run";
  fs::remove_all(dir);

  CHECK(run(train(3, dir)).code == 3);
  CHECK(run(train(1, dir)).code == 3);
  REQUIRE(run(train(0, dir)).code == 0);
  REQUIRE(run(train(1, dir)).code == 0);
  REQUIRE(run(train(2, dir)).code == 0);
  REQUIRE(run(train(3, dir)).code == 0);
  CHECK(count_lines(dir / "stage3.metrics.jsonl") == 4);
  CHECK(count_lines(dir / "stage2.metrics.jsonl") == 4);
  CHECK_FALSE(fs::exists(dir / "stage3.partial.ckpt"));

  SUBCASE("resume reproduces the uninterrupted run") {
    const fs::path cut = kRoot / "run_cut";
    fs::remove_all(cut);
    fs::create_directories(cut);
    fs::copy_file(dir / "stage2.ckpt", cut / "stage2.ckpt");
    REQUIRE(run(train(3, cut, "--stop-after 2")).code == 0);
    CHECK(fs::exists(cut / "stage3.partial.ckpt"));
    CHECK_FALSE(fs::exists(cut / "stage3.ckpt"));
    REQUIRE(run(train(3, cut, "--resume")).code == 0);
    CHECK(slurp(cut / "stage3.ckpt") == slurp(dir / "stage3.ckpt"));
    CHECK(slurp(cut / "stage3.metrics.jsonl") == slurp(dir / "stage3.metrics.jsonl"));
    // A resume under a different configuration is a checkpoint mismatch.
    REQUIRE(run(train(3, cut, "--stop-after 2")).code == 0);
    CHECK(run(train(3, cut, "--resume --set stage3.rgpo.beta_text=0.5")).code == 5);
  }

  SUBCASE("eval reports") {
    const std::string ckpt = (dir / "stage3.ckpt").string();
    const fs::path on = kRoot / "reports" / "on", off = kRoot / "reports" / "off";
    REQUIRE(run("eval --ckpt " + ckpt + " --thinking on --report " + on.string()).code == 0);
    REQUIRE(run("eval --ckpt " + ckpt + " --thinking off --report " + off.string()).code == 0);
    const auto j_on = nlohmann::json::parse(slurp(on.string() + ".json"));
    const auto j_off = nlohmann::json::parse(slurp(off.string() + ".json"));
    CHECK(j_on["mode"] == "thinking");
    CHECK(j_off["mode"] == "non-thinking");
    CHECK(j_on["eval_reasoning"].contains("mean_consistency"));
    CHECK(j_on["eval_direct"].contains("mean_consistency"));
    CHECK(fs::exists(on.string() + ".txt"));

    const Result oracle = run("eval --oracle --config " + tiny_config().string());
    REQUIRE(oracle.code == 0);
    CHECK(std::regex_search(oracle.out, std::regex(R"(eval_direct\s+4\s+1\.0000)")));
    CHECK(std::regex_search(oracle.out, std::regex(R"(eval_reasoning\s+6\s+1\.0000)")));

    CHECK(run("eval --ckpt " + ckpt + " --set model.policy.width=32 --set model.decoder.cond_width=32").code == 5);
    CHECK(run("eval --ckpt " + (kRoot / "missing.ckpt").string()).code == 5);
    CHECK(run("eval --ckpt " + ckpt + " --thinking maybe").code == 2);
  }

  SUBCASE("rollout-inspect") {
    const fs::path out = kRoot / "inspect";
    fs::remove_all(out);
    const std::string ckpt = (dir / "stage3.ckpt").string();
    const Result r = run("rollout-inspect --ckpt " + ckpt + " --task-id train:3 --seed 2 -G 4 --out " + out.string());
    REQUIRE(r.code == 0);
    int chains = 0;
    for (std::size_t p = 0; (p = r.out.find("chain: ", p)) != std::string::npos; ++p) ++chains;
    CHECK(chains == 4);
    std::regex adv(R"(advantage sum: (\S+))");
    std::smatch sm;
    REQUIRE(std::regex_search(r.out, sm, adv));
    CHECK(std::fabs(std::stod(sm[1])) < 1e-9);

    // Re-score the dumped chains and images against the printed rewards.
    const std::string gt = [&] {
      std::smatch g;
      std::regex_search(r.out, g, std::regex(R"(gt_prompt: ([^\n]+))"));
      return g[1].str();
    }();
    std::regex reward(R"(reward: format (\d)  consistency (\S+))");
    auto it = std::sregex_iterator(r.out.begin(), r.out.end(), reward);
    for (int i = 0; i < 4; ++i, ++it) {
      REQUIRE(it != std::sregex_iterator());
      const fs::path stem = out / ("rollout_" + std::to_string(i));
      REQUIRE(fs::exists(stem.string() + ".ppm"));
      const int format = thinkdraw::rewards::format_reward(slurp(stem.string() + ".txt"));
      CHECK(format == std::stoi((*it)[1]));
      // The dump is quantized to 8 bits per channel, so allow a small gap.
      const double c = thinkdraw::rewards::consistency_reward(read_ppm(stem.string() + ".ppm"), gt);
      CHECK(c == doctest::Approx(std::stod((*it)[2])).epsilon(0.02));
    }
    CHECK(run("rollout-inspect --ckpt " + ckpt + " --task-id train:100000 --out " + out.string()).code == 2);
    CHECK(run("rollout-inspect --ckpt " + ckpt + " --task-id nowhere:1 --out " + out.string()).code == 2);
  }

  SUBCASE("plot") {
    const fs::path out = kRoot / "plots";
    fs::remove_all(out);
    const Result r = run("plot --metrics " + (dir / "stage3.metrics.jsonl").string() + " --out " + out.string());
    REQUIRE(r.code == 0);
    int files = 0;
    for (const auto& e : fs::directory_iterator(out)) files += e.is_regular_file() ? 1 : 0;
    CHECK(files == 12);
    CHECK(count_lines(out / "reward_consistency_mean.csv") == 1 + 4);

    const fs::path empty = kRoot / "empty.jsonl";
    std::ofstream(empty).close();
    CHECK(run("plot --metrics " + empty.string() + " --out " + out.string()).code == 2);
    const fs::path broken = kRoot / "broken.jsonl";
    std::ofstream(broken) << slurp(dir / "stage3.metrics.jsonl") << "{not json\n";
    CHECK(run("plot --metrics " + broken.string() + " --out " + out.string()).code == 2);
    CHECK(slurp(kRoot / "stderr.txt").find("line 5") != std::string::npos);
  }
}
