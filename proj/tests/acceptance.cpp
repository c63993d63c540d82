// Acceptance runner: checks criteria 1-9 and prints one PASS/FAIL line each.
//
//   acceptance [--criteria 1,2,...] [--report results.json]
//
// Exit code 0 when every selected criterion passes.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "support/fixtures.hpp"
#include "support/head_overfit.hpp"
#include "support/oracles.hpp"
#include "zorder/compositor.hpp"
#include "zorder/metrics.hpp"
#include "zorder/pipeline.hpp"

using namespace zorder;
using namespace zorder::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome compositor_oracle() {
  const auto start = Clock::now();
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const auto c = random_composite_case(rng);
    const Matrix<double> diff = composite_forward(c.layers, c.L, c.D).out - brute_force_composite(c.layers, c.L, c.D);
    if (diff.size()) worst = std::max(worst, diff.cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(start);
  return {worst <= 1e-10 && secs < 10.0,
          "100 cases, max |diff| " + fmt("%.2e", worst) + " (limit 1e-10), " + fmt("%.2f", secs) + " s (limit 10 s)"};
}

Outcome gradient_checks() {
  const auto start = Clock::now();
  double composite = 0, alignment = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    composite = std::max(composite, composite_grad_error(seed));
    alignment = std::max(alignment, alignment_grad_error(seed));
  }
  const double secs = seconds_since(start);
  return {composite < 1e-5 && alignment < 1e-4 && secs < 120.0,
          "10 seeds, composite " + fmt("%.2e", composite) + " (limit 1e-5), alignment " + fmt("%.2e", alignment) +
              " (limit 1e-4), " + fmt("%.1f", secs) + " s (limit 120 s)"};
}

Outcome compositor_invariants() {
  const std::vector<std::pair<const char*, bool (*)(std::mt19937_64&)>> props{
      {"convex", convex_combination_holds},
      {"monotone", occluder_monotonicity_holds},
      {"front-dominance", dense_front_dominates},
      {"zero-density-neutral", zero_density_occluder_neutral},
      {"permutation", permutation_bit_identical}};
  bool pass = true;
  std::string detail;
  std::uint64_t seed = 1;
  for (const auto& [name, holds] : props) {
    std::mt19937_64 rng(seed++);
    int failed = 0;
    for (int k = 0; k < kPropertyCases; ++k) failed += holds(rng) ? 0 : 1;
    pass = pass && failed == 0;
    detail += std::string(detail.empty() ? "" : ", ") + name + " " + std::to_string(kPropertyCases - failed) + "/" +
              std::to_string(kPropertyCases);
  }
  return {pass, detail};
}

Outcome spot_values() {
  const TokenGrid g(1, 1);
  TokenMask on(g);
  on.bits[0] = 1;
  RowVector<double> five(1);
  five << 5.0;
  const double a = opacity(five, on)(0, 0);
  const double err_a = std::abs(a - (1.0 - std::exp(-5.0)));
  RowVector<double> ln2(1);
  ln2 << std::log(2.0);
  const double t = transmittance<double>({{ln2, on}, {ln2, on}}, 1, 1)(0, 0);
  const double err_t = std::abs(t - 0.25);
  std::mt19937_64 rng(4);
  std::vector<MaskPrediction<double>> preds;
  std::vector<TokenMask> targets;
  const TokenGrid grid(8, 8);
  for (int i = 0; i < 3; ++i) {
    preds.push_back({grid, Matrix<double>::Constant(64, 2, 0.5)});
    TokenMask m(grid);
    for (auto& b : m.bits) b = rng() % 2;
    targets.push_back(m);
  }
  const double err_l = std::abs(alignment_loss(preds, targets) - std::log(2.0));
  return {err_a <= 1e-12 && err_t <= 1e-12 && err_l <= 1e-9,
          "opacity err " + fmt("%.1e", err_a) + ", transmittance err " + fmt("%.1e", err_t) + ", uniform loss err " +
              fmt("%.1e", err_l)};
}

Outcome head_overfit() {
  const auto r = overfit_alignment_head(0, 500);
  return {r.accuracy >= 0.99, "500 steps, loss " + fmt("%.4f", r.first_loss) + " -> " + fmt("%.4f", r.last_loss) +
                                  ", token accuracy " + fmt("%.4f", r.accuracy) + " (need 0.99)"};
}

// ---------------------------------------------------------------------------

struct AblationScores {
  double miou = 0, occ_f1 = 0;
  json all;
};

AblationScores train_and_score(const std::string& ablation, int seed, const std::vector<SyntheticScene>& train_set,
                               const std::vector<SyntheticScene>& held_out) {
  RunConfig cfg;
  cfg.train.steps = 5000;
  cfg.train.batch_size = 16;
  cfg.train.learning_rate = 1e-3;
  cfg.train.seed = std::uint64_t(seed);
  cfg.model.init_seed = std::uint64_t(seed);
  cfg.sampler.seed = 7;
  cfg.train = apply_ablation(cfg.train, ablation);
  const auto start = Clock::now();
  const auto model = train_model<float>(cfg, train_set);
  const double train_secs = seconds_since(start);
  const auto agg = aggregate(evaluate_model(*model, held_out, cfg.sampler));
  AblationScores s;
  s.miou = agg.miou.value_or(0);
  s.occ_f1 = agg.occ_f1.value_or(0);
  s.all = {{"ablation", ablation},     {"seed", seed},         {"miou", s.miou},
           {"o_miou", agg.o_miou ? json(*agg.o_miou) : json()}, {"occ_f1", s.occ_f1},
           {"dep_whdr", agg.dep_whdr ? json(*agg.dep_whdr) : json()}, {"existence_rate", agg.existence_rate.value_or(0)},
           {"train_seconds", train_secs}, {"total_seconds", seconds_since(start)}};
  std::cout << "  " << s.all.dump() << std::endl;
  return s;
}

Outcome ablation_ordering(json& report) {
  const std::vector<SyntheticScene> held_out = generate_dataset(200, 999999, {});
  std::map<std::string, std::vector<AblationScores>> scores;
  report["ablation_runs"] = json::array();
  for (int seed = 0; seed < 3; ++seed) {
    const auto train_set = generate_dataset(2000, 1000 + std::uint64_t(seed), {});
    for (const char* ab : {"full", "no_occlusion_cond", "no_inst_decouple", "no_learned_sigma"}) {
      scores[ab].push_back(train_and_score(ab, seed, train_set, held_out));
      report["ablation_runs"].push_back(scores[ab].back().all);
    }
  }
  int occ_cond = 0, decouple = 0, sigma = 0;
  for (int s = 0; s < 3; ++s) {
    occ_cond += scores["full"][s].occ_f1 >= scores["no_occlusion_cond"][s].occ_f1 + 0.05;
    decouple += scores["full"][s].miou >= scores["no_inst_decouple"][s].miou + 0.05;
    sigma += scores["full"][s].occ_f1 >= scores["no_learned_sigma"][s].occ_f1;
  }
  return {occ_cond >= 2 && decouple >= 2 && sigma >= 2,
          "seeds holding: occ_f1 full >= no_occlusion_cond + 0.05: " + std::to_string(occ_cond) +
              "/3, miou full >= no_inst_decouple + 0.05: " + std::to_string(decouple) +
              "/3, occ_f1 full >= no_learned_sigma: " + std::to_string(sigma) + "/3 (need 2/3 each)"};
}

// ---------------------------------------------------------------------------

Outcome metric_exactness() {
  std::vector<std::string> bad;
  auto check = [&](bool ok, const char* what) {
    if (!ok) bad.push_back(what);
  };
  check(iou(block(4, 4, 0, 0, 2, 2), block(4, 4, 1, 0, 3, 2)) == 1.0 / 3.0, "iou 1/3");
  const auto s = front_back_fixture();
  const auto seg = segment_instances(paint(s, {{0, s.instances[0].modal_mask}}), s);
  check(miou(seg.masks, {s.instances[0].modal_mask, s.instances[1].modal_mask}) == 0.5, "miou 0.5");
  check(o_miou(seg, s) == 0.5, "o_miou 0.5");
  const EdgeSet truth{{0, 1}, {0, 2}, {1, 2}, {3, 2}};
  check(occlusion_f1({{0, 1}, {1, 2}}, truth) == 2.0 / 3.0, "occ_f1 2/3");
  const PairOrder order{{{0, 1}, 0}, {{0, 2}, 2}, {{1, 2}, 1}, {{2, 3}, 3}};
  PairOrder flipped = order;
  flipped[{0, 2}] = 0;
  check(depth_whdr(flipped, order) == 0.25, "dep_whdr 0.25");
  int perfect = 0;
  for (const auto& scene : generate_dataset(50, 2024, {})) {
    const auto m = evaluate_scene(scene.image, scene.layout, scene.id);
    perfect += m.miou == 1.0 && m.o_miou == 1.0 && m.occ_f1 == 1.0 && m.dep_whdr == 0.0;
  }
  check(perfect == 50, "self-evaluation");
  std::string detail = "fixtures iou/miou/o_miou/occ_f1/dep_whdr, self-evaluation " + std::to_string(perfect) + "/50";
  for (const auto& b : bad) detail += "; mismatch: " + b;
  return {bad.empty(), detail};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ZORDER_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Names of files under `a` whose bytes differ from the same name under `b`,
/// plus files present on one side only.
std::vector<std::string> directory_diff(const fs::path& a, const fs::path& b) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) names.insert(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) names.insert(e.path().filename().string());
  std::vector<std::string> diff;
  for (const auto& n : names)
    if (!fs::exists(a / n) || !fs::exists(b / n) || slurp(a / n) != slurp(b / n)) diff.push_back(n);
  return diff;
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / ("zorder_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();
  std::vector<std::string> problems;
  for (const char* out : {"/d1", "/d2"})
    if (run_cli("gen-data --n 20 --seed 7 --out " + d + out) != 0) problems.push_back("gen-data failed");
  const auto data_diff = directory_diff(dir / "d1", dir / "d2");
  for (const auto& n : data_diff) problems.push_back("dataset file " + n + " differs");
  std::ofstream(dir / "cfg.json") << R"({"model": {"dim": 16, "heads": 2, "blocks": 2, "layout_blocks": 2},
                                        "train": {"steps": 20, "batch_size": 4, "learning_rate": 0.001, "seed": 3}})";
  for (const char* out : {"/m1.ckpt", "/m2.ckpt"})
    if (run_cli("train --data " + d + "/d1 --config " + d + "/cfg.json --out " + d + out) != 0)
      problems.push_back("train failed");
  const std::string trace = slurp(dir / "m1.ckpt.loss.csv");
  if (trace.empty() || trace != slurp(dir / "m2.ckpt.loss.csv")) problems.push_back("loss traces differ");
  if (slurp(dir / "m1.ckpt") != slurp(dir / "m2.ckpt")) problems.push_back("checkpoints differ");
  const auto files = std::distance(fs::directory_iterator(dir / "d1"), fs::directory_iterator{});
  fs::remove_all(dir);
  std::string detail = "gen-data x2 (" + std::to_string(files) + " files), train x2 (20 steps)";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

Outcome sampler_contract() {
  const auto scene = generate_scene(6, {});
  ZOrderModel<float> model(ModelConfig{}, {});
  SamplerConfig sc;
  sc.num_steps = 28;
  sc.guidance_fraction = 0.3;
  std::vector<int> active;
  int steps = 0;
  sample_image(model, scene.layout, sc, [&](const SamplerStep& s) {
    ++steps;
    if (s.layout_active && s.layout_ran) active.push_back(s.step);
    else if (s.layout_active != s.layout_ran) active.push_back(-s.step);
  });
  std::vector<int> expected;
  for (int k = 1; k <= 9; ++k) expected.push_back(k);
  std::string list;
  for (int k : active) list += (list.empty() ? "" : ",") + std::to_string(k);
  return {steps == 28 && active == expected, std::to_string(steps) + " steps, layout stage on steps {" + list + "}"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  std::string report_path;
  app.add_option("--criteria", selected, "Criteria to run (default all)")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--report", report_path, "Write results as JSON");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9};

  json report;
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"compositor oracle equivalence", compositor_oracle}},
      {2, {"gradient correctness", gradient_checks}},
      {3, {"compositor invariants", compositor_invariants}},
      {4, {"closed-form spot values", spot_values}},
      {5, {"alignment-head overfit", head_overfit}},
      {6, {"end-to-end ablation ordering", [&] { return ablation_ordering(report); }}},
      {7, {"metric exactness", metric_exactness}},
      {8, {"determinism", determinism}},
      {9, {"sampler contract", sampler_contract}}};

  bool all = true;
  report["criteria"] = json::array();
  for (int k : selected) {
    const auto& [name, run] = criteria.at(k);
    const auto start = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << k << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << " ["
              << fmt("%.1f", seconds_since(start)) << " s]" << std::endl;
    report["criteria"].push_back({{"id", k}, {"name", name}, {"pass", o.pass}, {"detail", o.detail}});
  }
  if (!report_path.empty()) std::ofstream(report_path) << report.dump(2) << "\n";
  return all ? 0 : 1;
}
