#pragma once

// Loss-config sweeps over seeds and k, and text-table rendering of their
// results and of epoch logs.

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcad/harness.hpp"

namespace mcad {

struct AblationRun {
  LossConfig loss;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  RetrievalReport val;
  RetrievalReport test;
};

struct AblationRow {
  std::string label;
  std::size_t k = 0;
  std::vector<double> mean_r1;  // per seed, test split
  RetrievalReport mean;         // metric-wise mean over seeds

  double r1() const;
  double stderr_r1() const;
};

inline double AblationRow::r1() const {
  double s = 0;
  for (const double v : mean_r1) s += v;
  return mean_r1.empty() ? 0.0 : s / double(mean_r1.size());
}

inline double AblationRow::stderr_r1() const {
  const std::size_t n = mean_r1.size();
  if (n < 2) return 0.0;
  const double m = r1();
  double ss = 0;
  for (const double v : mean_r1) ss += (v - m) * (v - m);
  return std::sqrt(ss / double(n - 1) / double(n));
}

/// Trains every (loss, k, seed) combination from a fresh initialization and
/// evaluates the best-validation checkpoint on the test split.
template <class Real>
std::vector<AblationRow> run_ablation(
    const TrainConfig& base, const Model& model, const World<Real>& world,
    const std::vector<LossConfig>& losses, const std::vector<std::uint64_t>& seeds,
    const std::vector<std::size_t>& k_values,
    const std::function<void(const AblationRun&)>& on_run = {}) {
  std::vector<AblationRow> rows;
  for (const auto& l0 : losses) {
    std::vector<std::size_t> ks = k_values;
    if (ks.empty()) ks.push_back(l0.k);
    for (const auto k : ks) {
      AblationRow row;
      LossConfig l = l0;
      l.k = k;
      row.label = l.label();
      row.k = k;
      RetrievalReport sum;
      for (const auto seed : seeds) {
        TrainConfig cfg = base;
        cfg.loss = l;
        cfg.seed = seed;
        auto res = train(cfg, model, world, model.init_params<Real>(seed));
        AblationRun run{l, seed, res.best_epoch, res.best_val,
                        evaluate_retrieval(model.student, res.best_params, world.test)};
        row.mean_r1.push_back(run.test.mean_r1());
        sum.ir_r1 += run.test.ir_r1;
        sum.ir_r5 += run.test.ir_r5;
        sum.ir_r10 += run.test.ir_r10;
        sum.tr_r1 += run.test.tr_r1;
        sum.tr_r5 += run.test.tr_r5;
        sum.tr_r10 += run.test.tr_r10;
        sum.ir_queries = run.test.ir_queries;
        sum.tr_queries = run.test.tr_queries;
        if (on_run) on_run(run);
      }
      const double n = seeds.empty() ? 1.0 : double(seeds.size());
      for (double* m : {&sum.ir_r1, &sum.ir_r5, &sum.ir_r10, &sum.tr_r1, &sum.tr_r5, &sum.tr_r10})
        *m /= n;
      row.mean = sum;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline nlohmann::ordered_json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    out.push_back({{"label", r.label},
                   {"k", r.k},
                   {"mean_r1", r.r1()},
                   {"stderr_r1", r.stderr_r1()},
                   {"per_seed_mean_r1", r.mean_r1},
                   {"test", r.mean.to_json()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text tables

namespace detail {

inline std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string render_table(const std::vector<std::string>& header,
                                const std::vector<std::vector<std::string>>& body) {
  std::vector<std::size_t> w(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) w[c] = header[c].size();
  for (const auto& r : body)
    for (std::size_t c = 0; c < r.size() && c < w.size(); ++c) w[c] = std::max(w[c], r[c].size());
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < w.size(); ++c) {
      const std::string& cell = c < r.size() ? r[c] : std::string();
      if (c == 0) {
        os << cell << std::string(w[c] - cell.size(), ' ');
      } else {
        os << "  " << std::string(w[c] - cell.size(), ' ') << cell;
      }
    }
    os << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (const auto x : w) total += x;
  os << std::string(total + 2 * (w.size() - 1), '-') << '\n';
  for (const auto& r : body) line(r);
  return os.str();
}

}  // namespace detail

/// Ablation grid: one row per (loss, k) with test recall in percent.
inline std::string render_ablation(const nlohmann::json& rows) {
  std::vector<std::vector<std::string>> body;
  for (const auto& r : rows) {
    const auto& t = r.at("test");
    auto pct = [&](const char* key) { return detail::fmt(100.0 * t.at(key).get<double>(), 1); };
    body.push_back({r.at("label").get<std::string>(), std::to_string(r.at("k").get<std::size_t>()),
                    pct("ir_r1"), pct("ir_r5"), pct("ir_r10"), pct("tr_r1"), pct("tr_r5"),
                    pct("tr_r10"), detail::fmt(100.0 * r.at("mean_r1").get<double>()),
                    detail::fmt(100.0 * r.at("stderr_r1").get<double>())});
  }
  return detail::render_table(
      {"loss", "k", "IR@1", "IR@5", "IR@10", "TR@1", "TR@5", "TR@10", "mean R@1", "+-se"}, body);
}

/// Epoch log (one JSON object per line).
inline std::string render_epochs(const std::vector<nlohmann::json>& lines) {
  std::vector<std::vector<std::string>> body;
  for (const auto& l : lines) {
    std::vector<std::string> r{std::to_string(l.at("epoch").get<std::size_t>())};
    if (l.contains("loss")) {
      r.push_back(detail::fmt(l["lr"].get<double>(), 6));
      r.push_back(detail::fmt(l["loss"]["total"].get<double>(), 4));
      r.push_back(detail::fmt(l["tau_s"].get<double>(), 4));
      r.push_back(detail::fmt(l["tau_t"].get<double>(), 4));
      r.push_back(detail::fmt(l["alpha"].get<double>(), 4));
    } else {
      r.insert(r.end(), {"-", "-", "-", "-", "-"});
    }
    const auto& v = l.at("val");
    r.push_back(detail::fmt(100.0 * v.at("ir_r1").get<double>(), 1));
    r.push_back(detail::fmt(100.0 * v.at("tr_r1").get<double>(), 1));
    r.push_back(detail::fmt(100.0 * l.at("val_mean").get<double>(), 2));
    body.push_back(std::move(r));
  }
  return detail::render_table(
      {"epoch", "lr", "loss", "tau_s", "tau_t", "alpha", "val IR@1", "val TR@1", "val mean"}, body);
}

}  // namespace mcad
