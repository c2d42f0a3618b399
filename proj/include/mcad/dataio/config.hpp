#pragma once

// Run configuration: a JSON document with fixed sections. Unknown keys are
// rejected and the parsed result re-serializes with every default explicit.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcad/dataio/formats.hpp"
#include "mcad/dataio/synthetic.hpp"
#include "mcad/harness.hpp"

namespace mcad::dataio {

using json = nlohmann::ordered_json;

struct RunConfig {
  std::string data_dir = "world";   // relative paths resolve against out_dir
  WorldSpec world;
  StudentConfig student;
  IntegrationConfig integration;   // d_ss, d_ds, dim, tau_init come from the world
  TrainConfig train;
  std::string oracle_backend = "synthetic";  // synthetic | table
  std::string oracle_table;                  // PairScoreFile path for "table"
  std::vector<LossConfig> ablate_losses;
  std::vector<std::uint64_t> ablate_seeds = {0, 1, 2, 3, 4};
  std::vector<std::size_t> ablate_k;        // empty: use loss.k
  std::string precision = "double";          // double | float
};

namespace detail {

inline std::string activation_name(Activation a) {
  return a == Activation::tanh ? "tanh" : "identity";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Reads typed members of one object, rejecting keys never asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const std::string& path() const { return path_; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + path_ + "." + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline LossConfig parse_loss(const json& j, const std::string& path, LossConfig base = {}) {
  Section s(j, path);
  std::string tdd = to_string(base.tdd), tfd = to_string(base.tfd);
  s.get("tdd", tdd);
  s.get("tfd", tfd);
  s.get("k", base.k);
  s.finish();
  base.tdd = parse_tdd(tdd);
  base.tfd = parse_tfd(tfd);
  return base;
}

inline json loss_json(const LossConfig& l) {
  return {{"tdd", to_string(l.tdd)}, {"tfd", to_string(l.tfd)}, {"k", l.k}};
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j;
  j["data"] = {{"dir", c.data_dir}};
  const auto& w = c.world;
  j["world"] = {{"n_train", w.n_train},
                {"n_val", w.n_val},
                {"n_test", w.n_test},
                {"captions_per_image", w.captions_per_image},
                {"latent_dim", w.latent_dim},
                {"n_clusters", w.n_clusters},
                {"cluster_spread", w.cluster_spread},
                {"caption_jitter", w.caption_jitter},
                {"pair_mismatch", w.pair_mismatch},
                {"image_raw_dim", w.image_raw_dim},
                {"text_raw_dim", w.text_raw_dim},
                {"raw_gain", w.raw_gain},
                {"image_noise", w.image_noise},
                {"text_noise", w.text_noise},
                {"teacher_dim", w.teacher_dim},
                {"teacher_noise", w.teacher_noise},
                {"teacher_tau", w.teacher_tau},
                {"oracle_slope", w.oracle.slope},
                {"oracle_threshold", w.oracle.threshold},
                {"oracle_noise", w.oracle.noise},
                {"oracle_hidden", w.oracle.hidden},
                {"oracle_d_ss", w.oracle.d_ss},
                {"probe_items", w.probe_items},
                {"probe_k", w.probe_k},
                {"seed", w.seed}};
  j["student"] = {{"dim", c.student.dim},
                  {"hidden", c.student.hidden},
                  {"depth", c.student.depth},
                  {"activation", detail::activation_name(c.student.activation)},
                  {"tau_init", c.student.tau_init},
                  {"tau_min", c.student.tau_min},
                  {"tau_max", c.student.tau_max}};
  j["integration"] = {{"hidden", c.integration.hidden},
                      {"activation", detail::activation_name(c.integration.activation)},
                      {"alpha_init", c.integration.alpha_init}};
  const auto& t = c.train;
  j["train"] = {{"lr", t.lr},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"weight_decay", t.weight_decay},
                {"epochs", t.epochs},
                {"warmup_fraction", t.warmup_fraction},
                {"batch_size", t.batch_size},
                {"normalize_by_batch", t.normalize_by_batch},
                {"seed", t.seed},
                {"precision", c.precision}};
  j["loss"] = detail::loss_json(t.loss);
  j["oracle"] = {{"backend", c.oracle_backend}, {"table", c.oracle_table}};
  json losses = json::array();
  for (const auto& l : c.ablate_losses) losses.push_back(detail::loss_json(l));
  j["ablate"] = {{"losses", losses}, {"seeds", c.ablate_seeds}, {"k_values", c.ablate_k}};
  return j;
}

inline void validate(const RunConfig& c) {
  c.train.validate();
  if (c.oracle_backend != "synthetic" && c.oracle_backend != "table") {
    throw ConfigError("oracle.backend must be 'synthetic' or 'table'");
  }
  if (c.oracle_backend == "table" && c.oracle_table.empty()) {
    throw ConfigError("oracle.table is required for the table backend");
  }
  if (c.precision != "double" && c.precision != "float") {
    throw ConfigError("train.precision must be 'double' or 'float'");
  }
  if (c.student.depth < 1) throw ConfigError("student.depth must be >= 1");
  if (c.student.dim < 1 || c.student.hidden < 1) throw ConfigError("student widths must be >= 1");
  if (!(c.student.tau_min > 0 && c.student.tau_min <= c.student.tau_init &&
        c.student.tau_init <= c.student.tau_max)) {
    throw ConfigError("student: need 0 < tau_min <= tau_init <= tau_max");
  }
  for (const auto& l : c.ablate_losses) l.validate(c.train.batch_size);
  for (const auto k : c.ablate_k) {
    LossConfig l = c.train.loss;
    l.k = k;
    l.validate(c.train.batch_size);
  }
}

inline RunConfig from_json(const json& j) {
  RunConfig c;
  detail::Section root(j, "config");
  if (const auto* d = root.child("data")) {
    detail::Section s(*d, "data");
    s.get("dir", c.data_dir);
    s.finish();
  }
  if (const auto* d = root.child("world")) {
    detail::Section s(*d, "world");
    auto& w = c.world;
    s.get("n_train", w.n_train);
    s.get("n_val", w.n_val);
    s.get("n_test", w.n_test);
    s.get("captions_per_image", w.captions_per_image);
    s.get("latent_dim", w.latent_dim);
    s.get("n_clusters", w.n_clusters);
    s.get("cluster_spread", w.cluster_spread);
    s.get("caption_jitter", w.caption_jitter);
    s.get("pair_mismatch", w.pair_mismatch);
    s.get("image_raw_dim", w.image_raw_dim);
    s.get("text_raw_dim", w.text_raw_dim);
    s.get("raw_gain", w.raw_gain);
    s.get("image_noise", w.image_noise);
    s.get("text_noise", w.text_noise);
    s.get("teacher_dim", w.teacher_dim);
    s.get("teacher_noise", w.teacher_noise);
    s.get("teacher_tau", w.teacher_tau);
    s.get("oracle_slope", w.oracle.slope);
    s.get("oracle_threshold", w.oracle.threshold);
    s.get("oracle_noise", w.oracle.noise);
    s.get("oracle_hidden", w.oracle.hidden);
    s.get("oracle_d_ss", w.oracle.d_ss);
    s.get("probe_items", w.probe_items);
    s.get("probe_k", w.probe_k);
    s.get("seed", w.seed);
    s.finish();
  }
  if (const auto* d = root.child("student")) {
    detail::Section s(*d, "student");
    std::string act = detail::activation_name(c.student.activation);
    s.get("dim", c.student.dim);
    s.get("hidden", c.student.hidden);
    s.get("depth", c.student.depth);
    s.get("activation", act);
    s.get("tau_init", c.student.tau_init);
    s.get("tau_min", c.student.tau_min);
    s.get("tau_max", c.student.tau_max);
    s.finish();
    c.student.activation = detail::parse_activation(act);
  }
  if (const auto* d = root.child("integration")) {
    detail::Section s(*d, "integration");
    std::string act = detail::activation_name(c.integration.activation);
    s.get("hidden", c.integration.hidden);
    s.get("activation", act);
    s.get("alpha_init", c.integration.alpha_init);
    s.finish();
    c.integration.activation = detail::parse_activation(act);
  }
  if (const auto* d = root.child("train")) {
    detail::Section s(*d, "train");
    auto& t = c.train;
    s.get("lr", t.lr);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("eps", t.eps);
    s.get("weight_decay", t.weight_decay);
    s.get("epochs", t.epochs);
    s.get("warmup_fraction", t.warmup_fraction);
    s.get("batch_size", t.batch_size);
    s.get("normalize_by_batch", t.normalize_by_batch);
    s.get("seed", t.seed);
    s.get("precision", c.precision);
    s.finish();
  }
  if (const auto* d = root.child("loss")) c.train.loss = detail::parse_loss(*d, "loss");
  if (const auto* d = root.child("oracle")) {
    detail::Section s(*d, "oracle");
    s.get("backend", c.oracle_backend);
    s.get("table", c.oracle_table);
    s.finish();
  }
  if (const auto* d = root.child("ablate")) {
    detail::Section s(*d, "ablate");
    if (const auto* l = s.child("losses")) {
      if (!l->is_array()) throw ConfigError("ablate.losses: expected an array");
      for (std::size_t i = 0; i < l->size(); ++i) {
        LossConfig base;
        base.k = c.train.loss.k;
        c.ablate_losses.push_back(
            detail::parse_loss((*l)[i], "ablate.losses[" + std::to_string(i) + "]", base));
      }
    }
    s.get("seeds", c.ablate_seeds);
    s.get("k_values", c.ablate_k);
    s.finish();
  }
  root.finish();
  validate(c);
  return c;
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "config") {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source + ": byte offset " + std::to_string(e.byte) + ": " + e.what());
  }
  return from_json(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()), path.string());
}

/// FNV-1a 64 over the canonical (key-sorted, compact) serialization, with
/// the training seed removed so seeds of one config share a prefix.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json canonical = to_json(c);  // std::map keys: sorted
  canonical["train"].erase("seed");
  const std::string s = canonical.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 12);
}

inline std::filesystem::path run_dir(const RunConfig& c, const std::filesystem::path& out_dir) {
  return out_dir / "runs" / (config_hash(c) + "-s" + std::to_string(c.train.seed));
}

/// Model shapes follow the loaded world: raw dims from the splits, d_ss from
/// the oracle, d_ds and tau_T's initial value from the dual teacher.
template <class Real>
Model make_model(const RunConfig& c, const World<Real>& w) {
  StudentConfig s = c.student;
  s.image_raw_dim = w.train.image_raw.cols;
  s.text_raw_dim = w.train.text_raw.cols;
  IntegrationConfig ic = c.integration;
  ic.d_ss = w.oracle ? w.oracle->feature_dim() : ic.d_ss;
  ic.d_ds = w.dual.dim();
  ic.dim = s.dim;
  ic.tau_init = w.dual.tau;
  return Model{Student(s), Integration(ic)};
}

}  // namespace mcad::dataio
