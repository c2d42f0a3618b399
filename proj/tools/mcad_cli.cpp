// mcad: generate synthetic worlds, train, evaluate, grad-check, ablate, report.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mcad/mcad.hpp"

namespace fs = std::filesystem;
using namespace mcad;
using dataio::RunConfig;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  bool quiet = false;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : dataio::load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  dataio::validate(cfg);
  return cfg;
}

fs::path data_dir(const RunConfig& cfg, const Common& c) {
  const fs::path d(cfg.data_dir);
  return d.is_absolute() ? d : fs::path(c.out_dir) / d;
}

template <class Real>
World<Real> open_world(const RunConfig& cfg, const Common& c) {
  const fs::path table = cfg.oracle_backend == "table" ? fs::path(cfg.oracle_table) : fs::path();
  return dataio::load_world<Real>(data_dir(cfg, c), table);
}

void say(const Common& c, const std::string& s) {
  if (!c.quiet) std::cout << s << '\n';
}

void cmd_gen_data(const Common& c) {
  const auto cfg = resolve(c);
  const auto world = dataio::generate_synthetic_world(cfg.world);
  const auto dir = data_dir(cfg, c);
  dataio::write_world(world, dir);
  say(c, "wrote " + dir.string());
  if (world.manifest.contains("dual_teacher_test")) {
    const auto& t = world.manifest["dual_teacher_test"];
    say(c, "dual teacher test mean R@1 = " +
               std::to_string(0.5 * (t["ir_r1"].get<double>() + t["tr_r1"].get<double>())));
  }
}

template <class Real>
void do_train(const RunConfig& cfg, const Common& c) {
  const auto world = open_world<Real>(cfg, c);
  const auto model = dataio::make_model(cfg, world);
  const auto dir = dataio::run_dir(cfg, fs::path(c.out_dir));
  fs::create_directories(dir);
  dataio::write_text(dir / "config.json", dataio::to_json(cfg).dump(2) + "\n");
  std::ofstream log(dir / "epochs.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "epochs.jsonl").string());
  auto res = train(cfg.train, model, world, model.template init_params<Real>(cfg.train.seed),
                   [&](const std::string& line) {
                     log << line << '\n';
                     log.flush();
                     if (!c.quiet) std::cout << line << '\n';
                   });
  dataio::write_file(dir / "best.mcck", dataio::encode_checkpoint(res.best_params));
  dataio::write_file(dir / "final.mcck", dataio::encode_checkpoint(res.final_params));
  nlohmann::ordered_json summary;
  summary["loss"] = cfg.train.loss.label();
  summary["k"] = cfg.train.loss.k;
  summary["seed"] = cfg.train.seed;
  summary["best_epoch"] = res.best_epoch;
  summary["best_val"] = res.best_val.to_json();
  dataio::write_text(dir / "train.json", summary.dump(2) + "\n");
  say(c, "run dir " + dir.string());
}

template <class Real>
void do_eval(const RunConfig& cfg, const Common& c, const std::string& checkpoint) {
  const auto world = open_world<Real>(cfg, c);
  const auto model = dataio::make_model(cfg, world);
  const auto dir = dataio::run_dir(cfg, fs::path(c.out_dir));
  const fs::path ck = checkpoint.empty() ? dir / "best.mcck" : fs::path(checkpoint);
  auto params = model.template init_params<Real>(cfg.train.seed);
  dataio::load_values(params, dataio::decode_checkpoint<double>(dataio::read_file(ck), ck.string()));
  nlohmann::ordered_json report;
  report["checkpoint"] = ck.filename().string();
  report["val"] = evaluate_retrieval(model.student, params, world.val).to_json();
  const auto test = evaluate_retrieval(model.student, params, world.test);
  report["test"] = test.to_json();
  report["test_mean_r1"] = test.mean_r1();
  fs::create_directories(dir);
  dataio::write_text(dir / "report.json", report.dump(2) + "\n");
  say(c, report.dump(2));
}

template <class Real>
void do_ablate(const RunConfig& cfg, const Common& c) {
  const auto world = open_world<Real>(cfg, c);
  const auto model = dataio::make_model(cfg, world);
  auto losses = cfg.ablate_losses;
  if (losses.empty()) losses = ablation_grid(cfg.train.loss.k);
  const auto dir = dataio::run_dir(cfg, fs::path(c.out_dir));
  fs::create_directories(dir);
  std::ofstream runs(dir / "ablation_runs.jsonl", std::ios::binary | std::ios::trunc);
  const auto rows = run_ablation(cfg.train, model, world, losses, cfg.ablate_seeds, cfg.ablate_k,
                                 [&](const AblationRun& r) {
                                   nlohmann::ordered_json j{{"loss", r.loss.label()},
                                                            {"k", r.loss.k},
                                                            {"seed", r.seed},
                                                            {"best_epoch", r.best_epoch},
                                                            {"val", r.val.to_json()},
                                                            {"test", r.test.to_json()}};
                                   runs << j.dump() << '\n';
                                   runs.flush();
                                   say(c, j.dump());
                                 });
  const auto j = ablation_json(rows);
  dataio::write_text(dir / "ablation.json", j.dump(2) + "\n");
  const auto table = render_ablation(j);
  dataio::write_text(dir / "ablation.txt", table);
  say(c, table);
}

void cmd_grad_check(const Common& c, std::size_t pairs, std::size_t k) {
  const auto cfg = resolve(c);
  GradSuiteOptions o;
  o.pairs = pairs;
  o.k = k;
  o.seed = cfg.train.seed;
  const auto rows = gradient_suite(o);
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  bool all = true;
  for (const auto& r : rows) {
    all = all && r.report.pass;
    nlohmann::ordered_json params = nlohmann::ordered_json::object();
    for (const auto& p : r.report.params) params[p.name] = p.rel_err;
    out.push_back({{"loss", r.label}, {"pass", r.report.pass},
                   {"max_rel_err", r.report.max_rel_err}, {"params", params}});
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-14s %s  max rel err %.3e", r.label.c_str(),
                  r.report.pass ? "pass" : "FAIL", r.report.max_rel_err);
    say(c, buf);
  }
  const auto dir = dataio::run_dir(cfg, fs::path(c.out_dir));
  fs::create_directories(dir);
  dataio::write_text(dir / "grad_check.json", out.dump(2) + "\n");
  if (!all) throw NumericError("gradient check failed for at least one loss branch");
}

void cmd_report(const Common& c, const std::string& input) {
  const auto bytes = dataio::read_file(input);
  const std::string text(bytes.begin(), bytes.end());
  auto parse = [&](const std::string& s, std::size_t base) {
    try {
      return nlohmann::json::parse(s);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(input + ": byte offset " + std::to_string(base + e.byte) + ": " + e.what());
    }
  };
  std::string out;
  if (fs::path(input).extension() == ".jsonl") {
    std::vector<nlohmann::json> lines;
    std::size_t offset = 0;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line); offset += line.size() + 1) {
      if (!line.empty()) lines.push_back(parse(line, offset));
    }
    out = render_epochs(lines);
  } else {
    const auto j = parse(text, 0);
    if (!j.is_array()) throw FormatError(input + ": expected an ablation array");
    out = render_ablation(j);
  }
  std::cout << out;
  (void)c;
}

template <class F>
void dispatch(const RunConfig& cfg, F&& f) {
  if (cfg.precision == "float") {
    f(float{});
  } else {
    f(double{});
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-teacher cross-modal distillation engine"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "RunConfig JSON file");
    sub->add_option("--seed", common.seed, "Override train.seed");
    sub->add_option("--out-dir", common.out_dir, "Output root")->capture_default_str();
    sub->add_flag("--quiet", common.quiet, "Suppress progress output");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic world");
  auto* tr = app.add_subcommand("train", "Train a student");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on val and test");
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every loss branch");
  auto* ab = app.add_subcommand("ablate", "Train a list of loss configs over seeds");
  auto* rp = app.add_subcommand("report", "Render an epoch log or ablation grid");
  for (auto* s : {gen, tr, ev, gc, ab, rp}) add_common(s);
  std::string checkpoint, input;
  std::size_t gc_pairs = 8, gc_k = 3;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file (default: run dir best.mcck)");
  gc->add_option("--pairs", gc_pairs, "Batch size")->capture_default_str();
  gc->add_option("--k", gc_k, "Top-k")->capture_default_str();
  rp->add_option("--input", input, "epochs.jsonl or ablation.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      cmd_gen_data(common);
    } else if (*tr) {
      const auto cfg = resolve(common);
      dispatch(cfg, [&](auto r) { do_train<decltype(r)>(cfg, common); });
    } else if (*ev) {
      const auto cfg = resolve(common);
      dispatch(cfg, [&](auto r) { do_eval<decltype(r)>(cfg, common, checkpoint); });
    } else if (*gc) {
      cmd_grad_check(common, gc_pairs, gc_k);
    } else if (*ab) {
      const auto cfg = resolve(common);
      dispatch(cfg, [&](auto r) { do_ablate<decltype(r)>(cfg, common); });
    } else if (*rp) {
      cmd_report(common, input);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
