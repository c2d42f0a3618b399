#pragma once

// Desk-scale synthetic world. Every pair j owns a clustered latent z_j.
// Students see noisy linear views of z, the dual-stream teacher stores
// noisy linear embeddings of z, and the single-stream oracle scores pairs by
// latent cosine (see SyntheticPairOracle).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mcad/dataio/formats.hpp"
#include "mcad/dataset.hpp"
#include "mcad/harness.hpp"

namespace mcad::dataio {

struct WorldSpec {
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  std::size_t captions_per_image = 1;
  std::size_t latent_dim = 16;
  std::size_t n_clusters = 100;
  double cluster_spread = 0.2;   // within-cluster offset scale relative to centers
  double caption_jitter = 0.0;   // latent perturbation of each caption
  double pair_mismatch = 0.3;    // fraction of train captions drawn from an unrelated latent
  std::size_t image_raw_dim = 256;
  std::size_t text_raw_dim = 256;
  double raw_gain = 1.0;
  double image_noise = 0.7;
  double text_noise = 0.7;
  std::size_t teacher_dim = 64;
  double teacher_noise = 1.5;
  double teacher_tau = 0.1;
  SyntheticOracleParams oracle;
  std::size_t probe_items = 300;
  std::size_t probe_k = 11;
  std::uint64_t seed = 7;
};

struct SplitFiles {
  RawVectorFile images;
  RawVectorFile texts;
};

struct GeneratedWorld {
  WorldSpec spec;  // oracle seed reflects the accepted attempt
  SplitFiles train, val, test;
  TeacherFeatureFile teacher_images;
  TeacherFeatureFile teacher_texts;
  RawVectorFile image_latents;
  RawVectorFile text_latents;
  nlohmann::ordered_json manifest;
};

namespace detail {

inline Matrix<double> random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix<double> m(rows, cols);
  for (auto& v : m.data) v = scale * rng.normal();
  return m;
}

inline std::vector<double> normalized(std::vector<double> v) {
  double ss = 0.0;
  for (const double x : v) ss += x * x;
  const double n = std::sqrt(ss);
  if (n > 0.0)
    for (auto& x : v) x /= n;
  return v;
}

/// y = M^T x for M [in, out]
inline std::vector<double> project(const Matrix<double>& m, const std::vector<double>& x) {
  std::vector<double> y(m.cols, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) y[c] += x[r] * m(r, c);
  return y;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

/// Average ranks (ties share the mean rank).
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double mean = 0.5 * double(i + j);
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = mean;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

struct LatentSampler {
  std::vector<std::vector<double>> centers;
  double spread;

  std::vector<double> draw(Rng& rng) const {
    const auto& c = centers[rng.below(centers.size())];
    std::vector<double> z(c.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = c[i] + spread * rng.normal();
    return normalized(std::move(z));
  }
};

}  // namespace detail

/// Rank correlation with latent cosine inside each probe query's dual-teacher
/// top-k list, for the oracle score and for the dual-teacher inner product.
struct ProbeResult {
  double oracle_rho = 0.0;
  double dual_rho = 0.0;
};

inline GeneratedWorld generate_synthetic_world(const WorldSpec& spec) {
  if (spec.n_train < 1 || spec.n_val < 1 || spec.n_test < 1 || spec.captions_per_image < 1 ||
      spec.latent_dim < 1 || spec.n_clusters < 1) {
    throw GenerationError("world sizes must be >= 1");
  }
  if (spec.image_noise < 0 || spec.text_noise < 0 || spec.teacher_noise < 0 ||
      spec.caption_jitter < 0 || spec.cluster_spread < 0 || spec.oracle.noise < 0) {
    throw GenerationError("noise levels must be >= 0");
  }
  if (!(spec.pair_mismatch >= 0 && spec.pair_mismatch <= 1)) {
    throw GenerationError("pair_mismatch must lie in [0,1]");
  }
  if (!(spec.teacher_tau > 0)) throw GenerationError("teacher_tau must be positive");

  Rng rng(derive_seed(spec.seed, 0x776f726c64ULL));
  const std::size_t L = spec.latent_dim;
  detail::LatentSampler sampler;
  sampler.spread = spec.cluster_spread;
  for (std::size_t c = 0; c < spec.n_clusters; ++c) {
    std::vector<double> v(L);
    for (auto& x : v) x = rng.normal();
    sampler.centers.push_back(detail::normalized(std::move(v)));
  }
  const double in_scale = spec.raw_gain / std::sqrt(double(L));
  const auto a_img = detail::random_matrix(rng, L, spec.image_raw_dim, in_scale);
  const auto a_txt = detail::random_matrix(rng, L, spec.text_raw_dim, in_scale);
  const auto c_dual = detail::random_matrix(rng, L, spec.teacher_dim, 1.0 / std::sqrt(double(L)));

  auto teacher_embed = [&](const std::vector<double>& z, Rng& r) {
    auto e = detail::project(c_dual, z);
    const double per_dim = spec.teacher_noise / std::sqrt(double(spec.teacher_dim));
    for (auto& x : e) x += per_dim * r.normal();
    return detail::normalized(std::move(e));
  };

  GeneratedWorld w;
  w.spec = spec;
  const std::size_t n_total = spec.n_train + spec.n_val + spec.n_test;
  std::vector<std::vector<double>> img_lat, txt_lat;
  std::vector<ItemId> txt_ids_all;
  std::vector<std::uint64_t> txt_groups_all;

  SplitFiles* splits[3] = {&w.train, &w.val, &w.test};
  const std::size_t sizes[3] = {spec.n_train, spec.n_val, spec.n_test};
  ItemId next_image = 0;
  w.teacher_images = {FeatureSide::image, spec.teacher_tau, {}, Matrix<float>(0, spec.teacher_dim)};
  w.teacher_texts = {FeatureSide::text, spec.teacher_tau, {}, Matrix<float>(0, spec.teacher_dim)};
  std::vector<float> t_img_vals, t_txt_vals;

  for (int s = 0; s < 3; ++s) {
    auto& sf = *splits[s];
    sf.images.side = FeatureSide::image;
    sf.texts.side = FeatureSide::text;
    std::vector<float> iv, tv;
    for (std::size_t j = 0; j < sizes[s]; ++j) {
      const ItemId image_id = next_image++;
      auto z = sampler.draw(rng);
      auto x = detail::project(a_img, z);
      for (auto& v : x) v += spec.image_noise * rng.normal();
      sf.images.ids.push_back(image_id);
      sf.images.groups.push_back(image_id);
      iv.insert(iv.end(), x.begin(), x.end());
      const auto ti = teacher_embed(z, rng);
      w.teacher_images.ids.push_back(image_id);
      t_img_vals.insert(t_img_vals.end(), ti.begin(), ti.end());
      img_lat.push_back(z);

      for (std::size_t c = 0; c < spec.captions_per_image; ++c) {
        const ItemId text_id = image_id * spec.captions_per_image + c;
        auto zt = z;
        if (s == 0 && spec.pair_mismatch > 0 && rng.uniform() < spec.pair_mismatch) {
          zt = sampler.draw(rng);
        } else if (spec.caption_jitter > 0) {
          for (auto& v : zt) v += spec.caption_jitter * rng.normal() / std::sqrt(double(L));
          zt = detail::normalized(std::move(zt));
        }
        auto y = detail::project(a_txt, zt);
        for (auto& v : y) v += spec.text_noise * rng.normal();
        sf.texts.ids.push_back(text_id);
        sf.texts.groups.push_back(image_id);
        tv.insert(tv.end(), y.begin(), y.end());
        const auto tt = teacher_embed(zt, rng);
        w.teacher_texts.ids.push_back(text_id);
        t_txt_vals.insert(t_txt_vals.end(), tt.begin(), tt.end());
        txt_lat.push_back(zt);
        txt_ids_all.push_back(text_id);
        txt_groups_all.push_back(image_id);
      }
    }
    sf.images.vectors = Matrix<float>(sf.images.ids.size(), spec.image_raw_dim, std::move(iv));
    sf.texts.vectors = Matrix<float>(sf.texts.ids.size(), spec.text_raw_dim, std::move(tv));
  }
  w.teacher_images.vectors =
      Matrix<float>(w.teacher_images.ids.size(), spec.teacher_dim, std::move(t_img_vals));
  w.teacher_texts.vectors =
      Matrix<float>(w.teacher_texts.ids.size(), spec.teacher_dim, std::move(t_txt_vals));

  auto latent_file = [&](FeatureSide side, const std::vector<std::vector<double>>& lat,
                         const std::vector<ItemId>& ids, const std::vector<std::uint64_t>& groups) {
    RawVectorFile f;
    f.side = FeatureSide::latent;
    (void)side;
    f.ids = ids;
    f.groups = groups;
    f.vectors = Matrix<float>(lat.size(), L);
    for (std::size_t i = 0; i < lat.size(); ++i)
      for (std::size_t c = 0; c < L; ++c) f.vectors(i, c) = static_cast<float>(lat[i][c]);
    return f;
  };
  std::vector<ItemId> img_ids(n_total);
  std::iota(img_ids.begin(), img_ids.end(), ItemId{0});
  w.image_latents = latent_file(FeatureSide::image, img_lat, img_ids, img_ids);
  w.text_latents = latent_file(FeatureSide::text, txt_lat, txt_ids_all, txt_groups_all);

  // Oracle superiority probe on fresh latents, reseeding the oracle on failure.
  std::vector<std::vector<double>> probe_z;
  std::vector<std::vector<double>> probe_img_e, probe_txt_e;
  Rng prng(derive_seed(spec.seed, 0x70726f6265ULL));
  for (std::size_t i = 0; i < spec.probe_items; ++i) {
    probe_z.push_back(sampler.draw(prng));
    probe_img_e.push_back(teacher_embed(probe_z.back(), prng));
    probe_txt_e.push_back(teacher_embed(probe_z.back(), prng));
  }
  std::unordered_map<ItemId, std::vector<double>> probe_map;
  for (std::size_t i = 0; i < probe_z.size(); ++i) {
    std::vector<double> zf(L);
    for (std::size_t c = 0; c < L; ++c) zf[c] = double(static_cast<float>(probe_z[i][c]));
    probe_map[i] = zf;
  }
  const std::size_t pk = std::min(spec.probe_k, spec.probe_items);

  ProbeResult probe;
  bool accepted = false;
  std::size_t attempt = 0;
  for (; attempt < 10 && !accepted; ++attempt) {
    w.spec.oracle.seed = derive_seed(spec.seed, 0x6f7261ULL, attempt);
    SyntheticPairOracle oracle(w.spec.oracle, probe_map, probe_map);
    double sum_o = 0, sum_d = 0;
    for (std::size_t q = 0; q < probe_z.size(); ++q) {
      std::vector<double> dots(probe_z.size());
      for (std::size_t t = 0; t < probe_z.size(); ++t) {
        double d = 0;
        for (std::size_t c = 0; c < spec.teacher_dim; ++c) d += probe_img_e[q][c] * probe_txt_e[t][c];
        dots[t] = d;
      }
      std::vector<std::size_t> order(probe_z.size());
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(pk), order.end(),
                        [&](auto a, auto b) { return dots[a] > dots[b] || (dots[a] == dots[b] && a < b); });
      std::vector<double> cos_v, orc_v, dual_v;
      for (std::size_t j = 0; j < pk; ++j) {
        const auto t = order[j];
        cos_v.push_back(detail::cosine(probe_z[q], probe_z[t]));
        orc_v.push_back(oracle.query(q, t).score);
        dual_v.push_back(dots[t]);
      }
      sum_o += detail::spearman(cos_v, orc_v);
      sum_d += detail::spearman(cos_v, dual_v);
    }
    probe.oracle_rho = sum_o / double(probe_z.size());
    probe.dual_rho = sum_d / double(probe_z.size());
    accepted = probe.oracle_rho > probe.dual_rho;
  }
  if (!accepted) {
    throw GenerationError("single-stream oracle failed the rank-correlation probe after 10 reseeds "
                          "(oracle rho " + std::to_string(probe.oracle_rho) + " <= dual rho " +
                          std::to_string(probe.dual_rho) + ")");
  }

  // Dual-teacher retrieval on the test split.
  SplitData<double> test;
  test.image_ids = w.test.images.ids;
  test.image_groups = w.test.images.groups;
  test.text_ids = w.test.texts.ids;
  test.text_groups = w.test.texts.groups;
  test.image_raw = w.test.images.vectors.cast<double>();
  test.text_raw = w.test.texts.vectors.cast<double>();
  test.index();
  DualTeacherBundle<double> bundle(w.teacher_images.ids, w.teacher_images.vectors.cast<double>(),
                                   w.teacher_texts.ids, w.teacher_texts.vectors.cast<double>(),
                                   spec.teacher_tau);
  std::optional<RetrievalReport> teacher_test;
  if (test.n_images() >= 10) {
    teacher_test = retrieval_from_embeddings(
        bundle.image_rows(std::span<const ItemId>(test.image_ids)),
        bundle.text_rows(std::span<const ItemId>(test.text_ids)), test);
  }

  auto& m = w.manifest;
  m["format"] = "mcad-world";
  m["version"] = 1;
  m["spec"] = {
      {"n_train", spec.n_train}, {"n_val", spec.n_val}, {"n_test", spec.n_test},
      {"captions_per_image", spec.captions_per_image}, {"latent_dim", spec.latent_dim},
      {"n_clusters", spec.n_clusters}, {"cluster_spread", spec.cluster_spread},
      {"caption_jitter", spec.caption_jitter}, {"pair_mismatch", spec.pair_mismatch},
      {"image_raw_dim", spec.image_raw_dim},
      {"text_raw_dim", spec.text_raw_dim}, {"raw_gain", spec.raw_gain},
      {"image_noise", spec.image_noise}, {"text_noise", spec.text_noise},
      {"teacher_dim", spec.teacher_dim}, {"teacher_noise", spec.teacher_noise},
      {"teacher_tau", spec.teacher_tau}, {"probe_items", spec.probe_items},
      {"probe_k", spec.probe_k}, {"seed", spec.seed}};
  m["oracle"] = {{"slope", w.spec.oracle.slope}, {"threshold", w.spec.oracle.threshold},
                 {"noise", w.spec.oracle.noise}, {"hidden", w.spec.oracle.hidden},
                 {"d_ss", w.spec.oracle.d_ss}, {"seed", w.spec.oracle.seed},
                 {"attempts", attempt}};
  m["probe"] = {{"oracle_rho", probe.oracle_rho}, {"dual_rho", probe.dual_rho}};
  if (teacher_test) m["dual_teacher_test"] = teacher_test->to_json();
  m["files"] = {{"train_images", "train_images.mcrv"}, {"train_texts", "train_texts.mcrv"},
                {"val_images", "val_images.mcrv"},     {"val_texts", "val_texts.mcrv"},
                {"test_images", "test_images.mcrv"},   {"test_texts", "test_texts.mcrv"},
                {"teacher_images", "teacher_images.mctf"},
                {"teacher_texts", "teacher_texts.mctf"},
                {"image_latents", "image_latents.mcrv"},
                {"text_latents", "text_latents.mcrv"}};
  return w;
}

inline void write_world(const GeneratedWorld& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "train_images.mcrv", encode(w.train.images));
  write_file(dir / "train_texts.mcrv", encode(w.train.texts));
  write_file(dir / "val_images.mcrv", encode(w.val.images));
  write_file(dir / "val_texts.mcrv", encode(w.val.texts));
  write_file(dir / "test_images.mcrv", encode(w.test.images));
  write_file(dir / "test_texts.mcrv", encode(w.test.texts));
  write_file(dir / "teacher_images.mctf", encode(w.teacher_images));
  write_file(dir / "teacher_texts.mctf", encode(w.teacher_texts));
  write_file(dir / "image_latents.mcrv", encode(w.image_latents));
  write_file(dir / "text_latents.mcrv", encode(w.text_latents));
  write_text(dir / "world.json", w.manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Loading

template <class Real>
SplitData<Real> to_split(const RawVectorFile& images, const RawVectorFile& texts) {
  SplitData<Real> s;
  s.image_ids = images.ids;
  s.image_groups = images.groups;
  s.image_raw = images.vectors.cast<Real>();
  s.text_ids = texts.ids;
  s.text_groups = texts.groups;
  s.text_raw = texts.vectors.cast<Real>();
  s.index();
  return s;
}

inline std::unordered_map<ItemId, std::vector<double>> latent_map(const RawVectorFile& f) {
  std::unordered_map<ItemId, std::vector<double>> m;
  for (std::size_t i = 0; i < f.ids.size(); ++i) {
    const auto row = f.vectors.row(i);
    m[f.ids[i]] = std::vector<double>(row.begin(), row.end());
  }
  return m;
}

template <class Real>
DualTeacherBundle<Real> to_bundle(const TeacherFeatureFile& images, const TeacherFeatureFile& texts) {
  if (images.side != FeatureSide::image || texts.side != FeatureSide::text) {
    throw FormatError("teacher feature files have wrong side tags");
  }
  if (images.temperature != texts.temperature) {
    throw FormatError("teacher image/text temperatures differ");
  }
  return DualTeacherBundle<Real>(images.ids, images.vectors.cast<Real>(), texts.ids,
                                 texts.vectors.cast<Real>(), images.temperature);
}

/// Reads the synthetic oracle definition from a world manifest.
inline SyntheticOracleParams oracle_params(const nlohmann::json& manifest) {
  const auto& o = manifest.at("oracle");
  SyntheticOracleParams p;
  p.slope = o.at("slope").get<double>();
  p.threshold = o.at("threshold").get<double>();
  p.noise = o.at("noise").get<double>();
  p.hidden = o.at("hidden").get<std::size_t>();
  p.d_ss = o.at("d_ss").get<std::size_t>();
  p.seed = o.at("seed").get<std::uint64_t>();
  return p;
}

/// Loads a world directory. `pair_table` selects the table oracle backend
/// when non-empty; otherwise the synthetic oracle is rebuilt from latents.
template <class Real>
World<Real> load_world(const std::filesystem::path& dir,
                       const std::filesystem::path& pair_table = {}) {
  const auto manifest_bytes = read_file(dir / "world.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError((dir / "world.json").string() + ": byte offset " +
                     std::to_string(e.byte) + ": " + e.what());
  }
  auto rv = [&](const char* name) {
    return decode_raw_vectors(read_file(dir / name), name);
  };
  World<Real> w;
  w.train = to_split<Real>(rv("train_images.mcrv"), rv("train_texts.mcrv"));
  w.val = to_split<Real>(rv("val_images.mcrv"), rv("val_texts.mcrv"));
  w.test = to_split<Real>(rv("test_images.mcrv"), rv("test_texts.mcrv"));
  w.dual = to_bundle<Real>(
      decode_teacher_features(read_file(dir / "teacher_images.mctf"), "teacher_images.mctf"),
      decode_teacher_features(read_file(dir / "teacher_texts.mctf"), "teacher_texts.mctf"));
  if (!pair_table.empty()) {
    auto table = decode_pair_scores(read_file(pair_table), pair_table.string());
    w.oracle = std::make_shared<TablePairOracle>(to_oracle(table));
  } else {
    w.oracle = std::make_shared<SyntheticPairOracle>(
        oracle_params(manifest), latent_map(rv("image_latents.mcrv")),
        latent_map(rv("text_latents.mcrv")));
  }
  return w;
}

/// Builds an in-memory world without touching the filesystem; values pass
/// through the same f32 storage as written worlds.
template <class Real>
World<Real> materialize(const GeneratedWorld& g) {
  World<Real> w;
  w.train = to_split<Real>(g.train.images, g.train.texts);
  w.val = to_split<Real>(g.val.images, g.val.texts);
  w.test = to_split<Real>(g.test.images, g.test.texts);
  w.dual = to_bundle<Real>(g.teacher_images, g.teacher_texts);
  w.oracle = std::make_shared<SyntheticPairOracle>(g.spec.oracle, latent_map(g.image_latents),
                                                   latent_map(g.text_latents));
  return w;
}

}  // namespace mcad::dataio
