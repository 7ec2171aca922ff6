#include <cstdio>
#include <sstream>

#include "thinkdraw/parallel.hpp"
#include "thinkdraw/pipeline.hpp"
#include "thinkdraw/rewards.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw::pipeline {

namespace {

Json split_json(const SplitScore& s) {
  return Json{{"count", s.count},
              {"accuracy", s.accuracy},
              {"mean_consistency", s.mean_consistency},
              {"format_rate", s.format_rate}};
}

SplitScore score_split(const std::vector<world::Task>& tasks, const Generator& gen, std::size_t index_base,
                       double tau, int threads) {
  std::vector<double> consistency(tasks.size());
  std::vector<int> format(tasks.size());
  parallel_for(
      tasks.size(),
      [&](std::size_t i) {
        const GeneratedSample s = gen(tasks[i], index_base + i);
        consistency[i] = rewards::consistency_reward(s.image, tasks[i].gt_prompt);
        format[i] = rewards::format_reward(s.response);
      },
      threads);
  SplitScore out;
  out.count = static_cast<int>(tasks.size());
  if (tasks.empty()) return out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    out.accuracy += consistency[i] >= tau ? 1.0 : 0.0;
    out.mean_consistency += consistency[i];
    out.format_rate += format[i];
  }
  const double n = static_cast<double>(tasks.size());
  out.accuracy /= n;
  out.mean_consistency /= n;
  out.format_rate /= n;
  return out;
}

}  // namespace

Json EvalReport::to_json() const {
  return Json{{"mode", thinking ? "thinking" : "non-thinking"},
              {"tau", tau},
              {"eval_direct", split_json(eval_direct)},
              {"eval_reasoning", split_json(eval_reasoning)}};
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char line[160];
  os << "mode: " << (thinking ? "thinking" : "non-thinking") << "  (success = consistency >= " << tau << ")\n";
  os << "split            count  accuracy  mean_consistency  format_rate\n";
  for (const auto& [name, s] : {std::pair{"eval_direct", eval_direct}, std::pair{"eval_reasoning", eval_reasoning}}) {
    std::snprintf(line, sizeof(line), "%-15s %6d  %8.4f  %16.4f  %11.4f\n", name, s.count, s.accuracy,
                  s.mean_consistency, s.format_rate);
    os << line;
  }
  return os.str();
}

Generator model_generator(const agent::InferenceContext& ctx, bool thinking, std::uint64_t seed, int image_steps) {
  return [&ctx, thinking, seed, image_steps](const world::Task& task, std::size_t index) {
    agent::GenerationOptions opt;
    opt.thinking = thinking;
    opt.sampling.temperature = 0;
    opt.image_steps = image_steps;
    const agent::Generation g = agent::generate(ctx, task.instruction, opt, derive_seed(seed, {index, 0x747874}),
                                                derive_seed(seed, {index, 0x696d67}));
    return GeneratedSample{g.response, g.image};
  };
}

Generator oracle_generator() {
  return [](const world::Task& task, std::size_t) {
    return GeneratedSample{agent::sft_target(task), world::render(task.target())};
  };
}

Generator noise_generator(std::uint64_t seed) {
  return [seed](const world::Task&, std::size_t index) {
    Rng rng = make_rng(seed, {index, 0x6e6f});
    GeneratedSample s;
    for (double& p : s.image.pixels) p = uniform01(rng);
    return s;
  };
}

EvalReport evaluate(const world::Dataset& data, const Generator& gen, bool thinking, double tau, int threads) {
  EvalReport r;
  r.thinking = thinking;
  r.tau = tau;
  r.eval_direct = score_split(data.eval_direct, gen, 0, tau, threads);
  r.eval_reasoning = score_split(data.eval_reasoning, gen, 1u << 20, tau, threads);
  return r;
}

EvalReport evaluate_model(const agent::System<float>& sys, const world::Dataset& data, bool thinking,
                          const EvalConfig& cfg, int threads) {
  const agent::InferenceContext ctx(sys);
  return evaluate(data, model_generator(ctx, thinking, cfg.seed, sys.config.decoder.sampling_steps), thinking,
                  cfg.tau, threads);
}

}  // namespace thinkdraw::pipeline
