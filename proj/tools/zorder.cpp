// zorder: data generation, training, sampling, evaluation, gradient checks and
// compositor demos from one binary.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "zorder/compositor.hpp"
#include "zorder/gradcheck.hpp"
#include "zorder/image.hpp"
#include "zorder/pipeline.hpp"
#include "zorder/synth.hpp"

using namespace zorder;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Raised for bad flag values or config files; maps to exit code 1.
struct UsageError : Error {
  using Error::Error;
};

json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(std::string("cannot open ") + what + " " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed ") + what + " " + path.string() + ": " + e.what());
  }
}

/// Rejects keys of `j` that the defaults in `known` do not carry.
void check_keys(const json& j, const json& known, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw UsageError("unknown config key " + where + "." + key);
}

/// Layers a config file over `base`. The file holds "model", "train" and
/// "sampler" sections, or a flat object of TrainConfig fields.
RunConfig apply_config_file(const fs::path& path, const RunConfig& base) {
  json j = read_json_file(path, "config");
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  const json defaults = to_json(RunConfig{});
  const bool sectioned = j.contains("model") || j.contains("train") || j.contains("sampler");
  if (!sectioned) j = json{{"train", j}};
  check_keys(j, defaults, "config");
  for (const auto& [section, body] : j.items()) check_keys(body, defaults[section], section);
  json merged = to_json(base);
  for (const auto& [section, body] : j.items())
    for (const auto& [key, value] : body.items()) merged[section][key] = value;
  try {
    return run_config_from_json(merged);
  } catch (const ParseError& e) {
    throw UsageError(e.what());
  }
}

void print_resolved(const std::string& command, const json& resolved) {
  std::cout << "resolved config (" << command << "): " << resolved.dump() << std::endl;
}

template <class T>
void apply_flag(std::optional<T> flag, T& target) {
  if (flag) target = *flag;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  int n = 100;
  std::uint64_t seed = 0;
  std::string out;
  int min_overlap_pairs = 1;
};

int run_gen_data(const GenDataArgs& a) {
  if (a.n < 0) throw UsageError("--n must be >= 0");
  SynthConfig cfg;
  cfg.min_overlap_pairs = a.min_overlap_pairs;
  json echo = to_json(cfg);
  echo["n"] = a.n;
  echo["seed"] = a.seed;
  print_resolved("gen-data", echo);
  export_dataset(generate_dataset(a.n, a.seed, cfg), a.out, echo);
  std::cout << "wrote " << a.n << " scenes to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, config, out, loss_csv, ablation;
  std::optional<int> steps, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = apply_config_file(a.config, cfg);
  apply_flag(a.steps, cfg.train.steps);
  apply_flag(a.batch_size, cfg.train.batch_size);
  apply_flag(a.lr, cfg.train.learning_rate);
  if (a.seed) {
    cfg.train.seed = *a.seed;
    cfg.model.init_seed = *a.seed;
  }
  if (!a.ablation.empty()) {
    try {
      cfg.train = apply_ablation(cfg.train, a.ablation);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  try {
    cfg.train.validate();
    cfg.sampler.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  print_resolved("train", to_json(cfg));
  const auto scenes = import_dataset(a.data);
  if (scenes.empty()) throw Error("dataset " + a.data + " holds no scenes");
  const fs::path log_path = a.loss_csv.empty() ? fs::path(a.out + ".loss.csv") : fs::path(a.loss_csv);
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw Error("cannot write loss log " + log_path.string());
  const int every = std::max(1, cfg.train.steps / 20);
  const auto model = train_model<float>(cfg, scenes, &log, [&](const StepMetrics& m) {
    if (m.step % every == 0 || m.step == cfg.train.steps)
      std::cout << "step " << m.step << " l_flow " << m.l_flow << " l_align " << m.l_align << " total " << m.total
                << "\n";
  });
  save_model(*model, cfg, a.out);
  std::cout << "saved " << a.out << " (loss log " << log_path.string() << ")\n";
  return 0;
}

struct SampleArgs {
  std::string ckpt, layout, png, config;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<double> guidance_fraction;
  int scale = 1;
};

int run_sample(const SampleArgs& a) {
  if (a.scale < 1) throw UsageError("--scale must be >= 1");
  RunConfig stored;
  auto model = load_model<float>(a.ckpt, &stored);
  SamplerConfig sc = stored.sampler;
  if (!a.config.empty()) sc = apply_config_file(a.config, stored).sampler;
  apply_flag(a.seed, sc.seed);
  apply_flag(a.steps, sc.num_steps);
  apply_flag(a.guidance_fraction, sc.guidance_fraction);
  try {
    sc.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  print_resolved("sample", json{{"sampler", sc}, {"ckpt", a.ckpt}, {"layout", a.layout}});
  const SceneLayout layout = parse_layout(detail::read_text(a.layout));
  const Image img = sample_image(*model, layout, sc);
  write_png(a.png, a.scale > 1 ? upscale(img, a.scale) : img);
  std::cout << "wrote " << a.png << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, out, ablation;
  std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a) {
  RunConfig cfg;
  auto model = load_model<float>(a.ckpt, &cfg);
  if (!a.ablation.empty()) {
    try {
      cfg.train = apply_ablation(cfg.train, a.ablation);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    model->set_flags(cfg.train.flags());
  }
  apply_flag(a.seed, cfg.sampler.seed);
  print_resolved("eval", json{{"sampler", cfg.sampler}, {"flags", {{"learned_sigma", cfg.train.learned_sigma},
                                                                   {"occlusion_cond", cfg.train.occlusion_cond},
                                                                   {"instance_decouple", cfg.train.instance_decouple}}},
                              {"ablation", a.ablation.empty() ? "full" : a.ablation}});
  const auto scenes = import_dataset(a.data);
  const auto metrics = evaluate_model(*model, scenes, cfg.sampler);
  write_report(metrics, a.out);
  const auto agg = aggregate(metrics);
  auto show = [](std::optional<double> v) { return v ? std::to_string(*v) : std::string("null"); };
  std::cout << "scenes " << metrics.size() << " miou " << show(agg.miou) << " o_miou " << show(agg.o_miou)
            << " occ_f1 " << show(agg.occ_f1) << " dep_whdr " << show(agg.dep_whdr) << " existence_rate "
            << show(agg.existence_rate) << "\n";
  return 0;
}

struct GradCheckArgs {
  int seeds = 10;
  std::uint64_t seed = 0;
};

int run_grad_check(const GradCheckArgs& a) {
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  print_resolved("grad-check", json{{"seeds", a.seeds}, {"seed", a.seed}, {"fd_step", kFdStep}});
  double composite = 0, alignment = 0;
  for (int k = 0; k < a.seeds; ++k) {
    composite = std::max(composite, composite_grad_error(a.seed + std::uint64_t(k)));
    alignment = std::max(alignment, alignment_grad_error(a.seed + std::uint64_t(k)));
  }
  const bool ok_c = composite < 1e-5;
  const bool ok_a = alignment < 1e-4;
  std::printf("composite max relative error %.3e (limit 1e-5) %s\n", composite, ok_c ? "ok" : "FAILED");
  std::printf("alignment max relative error %.3e (limit 1e-4) %s\n", alignment, ok_a ? "ok" : "FAILED");
  return ok_c && ok_a ? 0 : 2;
}

struct DemoArgs {
  std::string layout, sigma, out;
  std::vector<int> tokens;
  int grid = 8;
  int scale = 8;
};

/// Black -> red -> yellow -> white ramp for values in [0, 1].
Rgb heat(double v) {
  v = std::clamp(v, 0.0, 1.0) * 3.0;
  auto byte = [](double x) { return std::uint8_t(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  return {byte(v), byte(v - 1.0), byte(v - 2.0)};
}

RowVector<double> sigma_entry(const json& table, int id) {
  const std::string key = std::to_string(id);
  if (!table.contains(key)) throw ParseError("sigma table lacks instance " + key);
  const json& v = table[key];
  RowVector<double> s(3);
  if (v.is_number()) {
    s.setConstant(v.get<double>());
  } else if (v.is_array() && v.size() == 3 && std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); })) {
    for (int d = 0; d < 3; ++d) s[d] = v[std::size_t(d)].get<double>();
  } else {
    throw ParseError("sigma for instance " + key + " must be a number or 3 numbers");
  }
  return s;
}

int run_composite_demo(const DemoArgs& a) {
  if (a.grid < 1 || a.scale < 1) throw UsageError("--grid and --scale must be >= 1");
  const SceneLayout layout = parse_layout(detail::read_text(a.layout));
  const auto report = validate_layout(layout);
  if (!report.valid()) throw Error("invalid layout: " + report.errors.front().kind);
  const json table = read_json_file(a.sigma, "sigma table");
  if (!table.is_object()) throw ParseError("sigma table must map instance ids to densities");
  const TokenGrid grid(a.grid, a.grid);
  const int L = grid.size();
  for (int u : a.tokens)
    if (u < 0 || u >= L) throw UsageError("token " + std::to_string(u) + " outside the " + std::to_string(L) + "-token grid");
  print_resolved("composite-demo", json{{"layout", a.layout}, {"sigma", table}, {"grid", a.grid}, {"tokens", a.tokens}});

  // Features are each instance's palette color in [0, 1] inside its box.
  std::vector<CompositeLayer<double>> layers;
  for (const auto& inst : layout.instances) {
    CompositeLayer<double> l;
    l.id = inst.id;
    l.box_mask = rasterize_box(inst.box, grid);
    l.sigma = sigma_entry(table, inst.id);
    l.occluders = inst.occluders;
    l.z_hat = Matrix<double>::Zero(L, 3);
    const Rgb c = caption_rgb(inst.caption);
    for (int u = 0; u < L; ++u)
      if (l.box_mask[u]) l.z_hat.row(u) << c.r / 255.0, c.g / 255.0, c.b / 255.0;
    layers.push_back(std::move(l));
  }
  const auto f = composite_forward(layers, L, 3);
  fs::create_directories(a.out);

  const Rgb bg = kBackgrounds[std::size_t(layout.global_prompt)];
  Image rgb(grid.w, grid.h);
  for (int u = 0; u < L; ++u) {
    if (f.cover[std::size_t(u)] == 0) {
      rgb.set(u, bg);
      continue;
    }
    auto byte = [&](int d) { return std::uint8_t(std::lround(std::clamp(f.out(u, d), 0.0, 1.0) * 255.0)); };
    rgb.set(u, {byte(0), byte(1), byte(2)});
  }
  write_png(fs::path(a.out) / "composite.png", upscale(rgb, a.scale));

  // One heat tile per instance, left to right in layout order; channel-mean weight.
  const int n = int(layers.size());
  Image heat_map(std::max(1, n) * grid.w, grid.h);
  for (int i = 0; i < n; ++i)
    for (int u = 0; u < L; ++u) {
      const auto [r, c] = coord(u, grid);
      heat_map.set(i * grid.w + c, r, heat(f.weight[std::size_t(i)].row(u).mean()));
    }
  write_png(fs::path(a.out) / "weights.png", upscale(heat_map, a.scale));

  std::vector<int> tokens = a.tokens;
  if (tokens.empty())
    for (int u = 0; u < L; ++u) tokens.push_back(u);
  json dump;
  dump["grid"] = {grid.h, grid.w};
  dump["tokens"] = json::array();
  auto row = [](const Matrix<double>& m, int u) {
    return std::vector<double>(m.row(u).data(), m.row(u).data() + m.cols());
  };
  for (int u : tokens) {
    json ju;
    ju["token"] = u;
    ju["output"] = row(f.out, u);
    ju["instances"] = json::array();
    for (int i = 0; i < n; ++i)
      ju["instances"].push_back({{"id", layers[std::size_t(i)].id},
                                 {"T", row(f.trans[std::size_t(i)], u)},
                                 {"alpha", row(f.alpha[std::size_t(i)], u)},
                                 {"w", row(f.weight[std::size_t(i)], u)}});
    dump["tokens"].push_back(std::move(ju));
  }
  detail::write_text(fs::path(a.out) / "composite.json", dump.dump(2) + "\n");
  std::cout << "wrote composite.png, weights.png and composite.json to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zorder: occlusion-aware layout-to-image toolkit"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 1 usage error, 2 runtime failure. ZORDER_THREADS caps worker threads.");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  gen_cmd->add_option("--n", gen.n, "Number of scenes")->required();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--min-overlap-pairs", gen.min_overlap_pairs, "Minimum overlapping box pairs per scene")
      ->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--config", tr.config, "Config JSON (model/train/sampler sections)");
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--loss-csv", tr.loss_csv, "Loss log path (default <out>.loss.csv)");
  train_cmd->add_option("--ablation", tr.ablation, "full, no_occlusion_cond, no_inst_decouple, no_learned_sigma, no_queried_loss");
  train_cmd->add_option("--steps", tr.steps, "Optimizer steps");
  train_cmd->add_option("--batch-size", tr.batch_size, "Batch size");
  train_cmd->add_option("--lr", tr.lr, "Learning rate");
  train_cmd->add_option("--seed", tr.seed, "Seed for initialization and training draws");

  SampleArgs sa;
  auto* sample_cmd = app.add_subcommand("sample", "Sample an image for a layout");
  sample_cmd->add_option("--ckpt", sa.ckpt, "Checkpoint path")->required();
  sample_cmd->add_option("--layout", sa.layout, "Layout JSON")->required();
  sample_cmd->add_option("--seed", sa.seed, "Sampler seed");
  sample_cmd->add_option("--png", sa.png, "Output PNG")->required();
  sample_cmd->add_option("--config", sa.config, "Config JSON; its sampler section applies");
  sample_cmd->add_option("--steps", sa.steps, "Euler steps");
  sample_cmd->add_option("--guidance-fraction", sa.guidance_fraction, "Leading fraction of steps with the layout stage");
  sample_cmd->add_option("--scale", sa.scale, "Nearest-neighbour upscale factor")->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Sample and score every scene of a dataset");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--out", ev.out, "Report CSV (a JSON twin is written next to it)")->required();
  eval_cmd->add_option("--ablation", ev.ablation, "Inference-time variant applied to the checkpoint");
  eval_cmd->add_option("--seed", ev.seed, "Sampler seed");

  GradCheckArgs gc;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference checks of the compositor and alignment head");
  grad_cmd->add_option("--seeds", gc.seeds, "Number of random fixtures")->capture_default_str();
  grad_cmd->add_option("--seed", gc.seed, "First fixture seed")->capture_default_str();

  DemoArgs demo;
  auto* demo_cmd = app.add_subcommand("composite-demo", "Composite palette-colored boxes under a density table");
  demo_cmd->add_option("--layout", demo.layout, "Layout JSON")->required();
  demo_cmd->add_option("--sigma", demo.sigma, "JSON object: instance id -> density (number or 3 numbers)")->required();
  demo_cmd->add_option("--out", demo.out, "Output directory")->required();
  demo_cmd->add_option("--tokens", demo.tokens, "Tokens to dump (default all)")->delimiter(',');
  demo_cmd->add_option("--grid", demo.grid, "Token grid side")->capture_default_str();
  demo_cmd->add_option("--scale", demo.scale, "PNG upscale factor")->capture_default_str();

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    const auto subs = app.get_subcommands([&](CLI::App* sub) { return sub->get_name() == name; });
    if (subs.empty()) {
      std::cerr << "error: unknown subcommand " << name << "\n\n" << app.help();
      return 1;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*sample_cmd) return run_sample(sa);
    if (*eval_cmd) return run_eval(ev);
    if (*grad_cmd) return run_grad_check(gc);
    if (*demo_cmd) return run_composite_demo(demo);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
