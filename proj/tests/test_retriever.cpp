#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>

#include "aswap/retriever.hpp"

using namespace aswap;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_ffn = 64;
  cfg.context_len = 64;
  cfg.init_seed = 21;
  return cfg;
}

const BaseModel<float>& frozen_base() {
  static BaseModel<float> base = [] {
    auto m = BaseModel<float>::init(small_config());
    m.freeze();
    return m;
  }();
  return base;
}

// Isotropic blobs around per-class centers.
std::pair<Matd, std::vector<int>> make_blobs(int per_class,
                                             const std::vector<Vec>& centers,
                                             double noise, std::uint64_t seed) {
  Rng rng(seed);
  const int d = int(centers.front().size());
  Matd x(per_class * int(centers.size()), d);
  std::vector<int> labels;
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (int i = 0; i < per_class; ++i) {
      x.row(row) = centers[c].transpose() +
                   rng.normal<double>(1, d, noise).row(0);
      labels.push_back(int(c));
      ++row;
    }
  }
  return {x, labels};
}

}  // namespace

TEST_CASE("embed: deterministic and matches explicit pooling oracle") {
  EmbeddingProvider provider(frozen_base());
  const std::string doc = "pooling check doc";
  const Vec a = provider.embed(doc);
  const Vec b = provider.embed(doc);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.size() == 32);

  // Oracle: per-position final hidden states from separate prefix forwards,
  // summed and divided. Causality makes prefix states match full-pass states.
  std::vector<int> ids = tokenize(doc);
  Vec acc = Vec::Zero(32);
  for (std::size_t i = 1; i <= ids.size(); ++i) {
    const auto h = frozen_base().hidden_states(
        std::span<const int>(ids.data(), i));
    acc += h.row(Eigen::Index(i - 1)).cast<double>().transpose();
  }
  acc /= double(ids.size());
  CHECK((a - acc).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("embed: empty document is an error; single byte pools fine") {
  EmbeddingProvider provider(frozen_base());
  CHECK_THROWS_AS(provider.embed(""), ShapeError);

  // Minimal document: mean over the three tokens it produces.
  const Vec v = provider.embed("x");
  std::vector<int> ids = tokenize("x");
  REQUIRE(ids.size() == 3);
  const auto h = frozen_base().hidden_states(ids);
  const Vec expect = h.colwise().mean().cast<double>().transpose();
  CHECK((v - expect).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lda: deterministic under fixed input ordering") {
  std::vector<Vec> centers{Vec::Zero(6), Vec::Ones(6) * 2.0};
  auto [x, labels] = make_blobs(14, centers, 0.9, 23);
  auto p1 = fit_lda(x, labels, 1e-3);
  auto p2 = fit_lda(x, labels, 1e-3);
  CHECK((p1.matrix - p2.matrix).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lda: analytic two-class direction") {
  // Within-class scatter along axis 2 only; class means differ along axis 1,
  // so the discriminant is (1, 0).
  Matd x(4, 2);
  x << 0, 0, 0, 1, 3, 0, 3, 1;
  std::vector<int> labels{0, 0, 1, 1};
  auto p = fit_lda(x, labels, 1e-3);
  CHECK(p.d_out == 1);
  CHECK(std::abs(p.matrix(0, 0)) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(std::abs(p.matrix(0, 1)) < 1e-6);
  CHECK(p.matrix(0, 0) > 0.0);  // sign convention
}

TEST_CASE("lda: d_out is min(K-1, d_in)") {
  Rng rng(3);
  Matd x = rng.normal<double>(40, 6, 1.0);
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) labels.push_back(i % 2);
  auto p = fit_lda(x, labels, 1e-3);
  CHECK(p.d_out == 1);

  std::vector<int> labels4;
  for (int i = 0; i < 40; ++i) labels4.push_back(i % 4);
  auto p4 = fit_lda(x, labels4, 1e-3);
  CHECK(p4.d_out == 3);
}

TEST_CASE("lda: learned direction beats 100 random directions on scatter ratio") {
  std::vector<Vec> centers;
  for (int c = 0; c < 3; ++c) {
    Vec v = Vec::Zero(8);
    v(c) = 4.0;
    centers.push_back(v);
  }
  auto [x, labels] = make_blobs(20, centers, 1.0, 17);
  auto p = fit_lda(x, labels, 1e-3);

  // Scatter matrices with the same ridge as the fit.
  const Eigen::Index d = x.cols();
  Matd means = Matd::Zero(3, d);
  std::vector<int> counts(3, 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    means.row(labels[std::size_t(i)]) += x.row(i);
    counts[std::size_t(labels[std::size_t(i)])] += 1;
  }
  for (int c = 0; c < 3; ++c) means.row(c) /= counts[std::size_t(c)];
  const Vec grand = x.colwise().mean().transpose();
  Matd s_w = Matd::Zero(d, d), s_b = Matd::Zero(d, d);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Vec diff = (x.row(i) - means.row(labels[std::size_t(i)])).transpose();
    s_w += diff * diff.transpose();
  }
  for (int c = 0; c < 3; ++c) {
    Vec diff = means.row(c).transpose() - grand;
    s_b += double(counts[std::size_t(c)]) * diff * diff.transpose();
  }
  s_w += 1e-3 * s_w.trace() / double(d) * Matd::Identity(d, d);

  auto ratio = [&](const Vec& v) {
    return v.dot(s_b * v) / v.dot(s_w * v);
  };
  const Vec learned = p.matrix.row(0).transpose();
  const double learned_ratio = ratio(learned);
  Rng rng(99);
  for (int t = 0; t < 100; ++t) {
    Vec v = rng.normal<double>(1, d, 1.0).row(0).transpose();
    v.normalize();
    CHECK(learned_ratio >= ratio(v) * (1.0 - 1e-9));
  }
}

TEST_CASE("lda: class with fewer than 2 samples or non-finite input errors") {
  Matd x(3, 2);
  x << 0, 0, 0, 1, 5, 5;
  CHECK_THROWS_AS(fit_lda(x, {0, 0, 1}, 1e-3), ShapeError);
  Matd bad(4, 2);
  bad << 0, 0, 0, 1, 5, std::nan(""), 5, 6;
  CHECK_THROWS_AS(fit_lda(bad, {0, 0, 1, 1}, 1e-3), NumericError);
}

TEST_CASE("pca: exact low-rank data keeps all variance") {
  Rng rng(8);
  Matd x(30, 2);
  for (int i = 0; i < 30; ++i) {
    const double t = rng.uniform() * 10.0 - 5.0;
    x(i, 0) = 2.0 * t;
    x(i, 1) = -t;
  }
  auto p = fit_pca(x, 1);
  const Matd centered = x.rowwise() - x.colwise().mean();
  const double total = (centered.transpose() * centered / 29.0).trace();
  const Matd proj = p.project_rows(x);
  const Matd pc = proj.rowwise() - proj.colwise().mean();
  const double captured = (pc.transpose() * pc / 29.0).trace();
  CHECK(captured == doctest::Approx(total).epsilon(1e-6));
}

TEST_CASE("pca: isotropic data captures about d_out/d_in of the variance") {
  Rng rng(12);
  Matd x = rng.normal<double>(1000, 4, 1.0);
  auto p = fit_pca(x, 2);
  const Matd centered = x.rowwise() - x.colwise().mean();
  const double total = (centered.transpose() * centered / 999.0).trace();
  const Matd proj = p.project_rows(x);
  const Matd pc = proj.rowwise() - proj.colwise().mean();
  const double captured = (pc.transpose() * pc / 999.0).trace();
  const double expected = 2.0 / 4.0;
  CHECK(captured / total == doctest::Approx(expected).epsilon(0.10));
}

TEST_CASE("pca: reconstruction error equals residual eigenvalue mass") {
  Rng rng(13);
  Matd x = rng.normal<double>(60, 5, 1.0);
  // Stretch two directions so the spectrum is non-trivial.
  x.col(0) *= 3.0;
  x.col(1) *= 2.0;
  auto p = fit_pca(x, 2);

  const Matd centered = x.rowwise() - x.colwise().mean();
  const Matd cov = centered.transpose() * centered / 59.0;
  Eigen::SelfAdjointEigenSolver<Matd> es(cov);
  const double total = cov.trace();
  double top = 0.0;
  for (int i = 0; i < 2; ++i) top += es.eigenvalues()(4 - i);

  // Mean squared reconstruction error through the projection.
  const Matd recon = (centered * p.matrix.transpose()) * p.matrix;
  const double err = (centered - recon).squaredNorm() / 59.0;
  CHECK(err == doctest::Approx(total - top).epsilon(1e-6));
}

TEST_CASE("pca: d_out beyond input dimension is an error") {
  Rng rng(2);
  Matd x = rng.normal<double>(10, 3, 1.0);
  CHECK_THROWS_AS(fit_pca(x, 4), ShapeError);
}

TEST_CASE("gmm: unit-variance density at the mean is 1/sqrt(2*pi)") {
  GmmComponent c;
  c.group_id = "g";
  c.mean = Vec::Zero(1);
  c.covariance = Matd::Identity(1, 1);
  c.log_weight = 0.0;
  GmmModel gmm({c}, 0.0);
  CHECK(std::exp(gmm.component_log_density(0, Vec::Zero(1))) ==
        doctest::Approx(0.3989422804).epsilon(1e-6));
}

TEST_CASE("gmm: equal group counts give log weights of ln(1/2)") {
  std::vector<Vec> centers{Vec::Zero(2), Vec::Ones(2) * 5.0};
  auto [x, labels] = make_blobs(10, centers, 0.5, 31);
  auto gmm = fit_gmm(x, labels, {"a", "b"}, 1e-6);
  CHECK(gmm.components()[0].log_weight == doctest::Approx(std::log(0.5)));
  CHECK(gmm.components()[1].log_weight == doctest::Approx(std::log(0.5)));
}

TEST_CASE("gmm: a group with fewer than 2 samples is an error") {
  Matd x(3, 2);
  x << 0, 0, 0, 1, 5, 5;
  CHECK_THROWS_AS(fit_gmm(x, {0, 0, 1}, {"a", "b"}, 1e-6), ShapeError);
}

TEST_CASE("gmm: EM refinement never decreases total log-likelihood") {
  std::vector<Vec> centers{Vec::Zero(3), Vec::Ones(3) * 2.0, -Vec::Ones(3)};
  auto [x, labels] = make_blobs(15, centers, 1.2, 41);
  auto gmm = fit_gmm(x, labels, {"a", "b", "c"}, 1e-6);
  const auto history = gmm.refine_em(x, 5);
  REQUIRE(history.size() >= 2);
  for (std::size_t i = 1; i < history.size(); ++i) {
    CHECK(history[i] >= history[i - 1]);
  }
}

TEST_CASE("rank: dominant component wins; filtering promotes the runner-up") {
  std::vector<Vec> centers;
  for (int c = 0; c < 3; ++c) {
    Vec v = Vec::Zero(2);
    v(c % 2) = c < 2 ? 20.0 * (c + 1) : -20.0;
    centers.push_back(v);
  }
  auto [x, labels] = make_blobs(12, centers, 1.0, 51);
  auto gmm = fit_gmm(x, labels, {"g0", "g1", "g2"}, 1e-6);
  Projection identity;
  identity.kind = ProjectionKind::PCA;
  identity.matrix = Matd::Identity(2, 2);
  identity.d_in = 2;
  identity.d_out = 2;
  identity.fitted = true;

  std::map<std::string, std::string> adapter_by_group{
      {"g0", "adp-g0"}, {"g1", "adp-g1"}, {"g2", "adp-g2"}};
  const Vec query = gmm.components()[1].mean;

  auto top = rank_and_filter(gmm, identity, query, adapter_by_group,
                             {"adp-g0", "adp-g1", "adp-g2"}, 1,
                             WeightingMode::Uniform);
  REQUIRE(top.entries.size() == 1);
  CHECK(top.entries[0].adapter_id == "adp-g1");

  auto filtered = rank_and_filter(gmm, identity, query, adapter_by_group,
                                  {"adp-g0", "adp-g2"}, 1,
                                  WeightingMode::Uniform);
  REQUIRE(filtered.entries.size() == 1);
  CHECK(filtered.entries[0].adapter_id != "adp-g1");

  // One accessible adapter: any query collapses onto it, at any k.
  for (int k = 1; k <= 3; ++k) {
    auto sole = rank_and_filter(gmm, identity, query, adapter_by_group,
                                {"adp-g2"}, k, WeightingMode::Uniform);
    REQUIRE(sole.entries.size() == 1);
    CHECK(sole.entries[0].adapter_id == "adp-g2");
  }
}

TEST_CASE("rank: exact ties order lexicographically; softmax of ties is uniform") {
  // Two identical components under different adapter ids.
  GmmComponent a, b;
  a.group_id = "gb";
  a.mean = Vec::Zero(2);
  a.covariance = Matd::Identity(2, 2);
  a.log_weight = std::log(0.5);
  b = a;
  b.group_id = "ga";
  GmmModel gmm({a, b}, 0.0);
  Projection identity;
  identity.matrix = Matd::Identity(2, 2);
  identity.d_in = identity.d_out = 2;
  identity.fitted = true;
  std::map<std::string, std::string> by_group{{"ga", "adp-a"}, {"gb", "adp-b"}};

  auto ranked = rank_and_filter(gmm, identity, Vec::Ones(2), by_group,
                                {"adp-a", "adp-b"}, 2,
                                WeightingMode::DensitySoftmax);
  REQUIRE(ranked.entries.size() == 2);
  CHECK(ranked.entries[0].adapter_id == "adp-a");
  CHECK(ranked.entries[1].adapter_id == "adp-b");
  const auto w = ranked.weights();
  CHECK(w[0] == doctest::Approx(0.5));
  CHECK(w[1] == doctest::Approx(0.5));
}

TEST_CASE("rank: top-k sets are nested and never leak inaccessible adapters") {
  std::vector<Vec> centers;
  Rng crng(61);
  for (int c = 0; c < 5; ++c) {
    centers.push_back(crng.normal<double>(1, 3, 5.0).row(0).transpose());
  }
  auto [x, labels] = make_blobs(10, centers,  1.0, 62);
  std::vector<std::string> groups{"g0", "g1", "g2", "g3", "g4"};
  auto gmm = fit_gmm(x, labels, groups, 1e-6);
  Projection identity;
  identity.matrix = Matd::Identity(3, 3);
  identity.d_in = identity.d_out = 3;
  identity.fitted = true;
  std::map<std::string, std::string> by_group;
  for (const auto& g : groups) by_group[g] = "adp-" + g;

  Rng rng(63);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<std::string> accessible;
    for (const auto& g : groups) {
      if (rng.uniform() < 0.6) accessible.insert("adp-" + g);
    }
    if (accessible.empty()) accessible.insert("adp-g0");
    const Vec q = rng.normal<double>(1, 3, 4.0).row(0).transpose();

    std::vector<std::vector<std::string>> tops;
    for (int k = 1; k <= 3; ++k) {
      auto ranked = rank_and_filter(gmm, identity, q, by_group, accessible, k,
                                    WeightingMode::Uniform);
      CHECK(int(ranked.entries.size()) ==
            std::min<int>(k, int(accessible.size())));
      std::vector<std::string> ids;
      for (const auto& e : ranked.entries) {
        CHECK(accessible.count(e.adapter_id) == 1);
        ids.push_back(e.adapter_id);
      }
      tops.push_back(ids);
    }
    // Nesting: top-1 within top-2 within top-3.
    for (std::size_t k = 1; k < tops.size(); ++k) {
      for (const auto& id : tops[k - 1]) {
        CHECK(std::find(tops[k].begin(), tops[k].end(), id) != tops[k].end());
      }
    }
  }
}

TEST_CASE("rank: empty accessible set signals no authorized adapters") {
  GmmComponent c;
  c.group_id = "g";
  c.mean = Vec::Zero(1);
  c.covariance = Matd::Identity(1, 1);
  GmmModel gmm({c}, 0.0);
  Projection identity;
  identity.matrix = Matd::Identity(1, 1);
  identity.d_in = identity.d_out = 1;
  identity.fitted = true;
  CHECK_THROWS_AS(rank_and_filter(gmm, identity, Vec::Zero(1), {{"g", "a"}},
                                  {}, 1, WeightingMode::Uniform),
                  AccessDeniedError);
}

TEST_CASE("refit: projection plus gmm refits in under a second at desk scale") {
  Rng rng(71);
  const int groups = 6, per_group = 16, d = 64;
  Matd x(groups * per_group, d);
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (int g = 0; g < groups; ++g) {
    ids.push_back("g" + std::to_string(g));
    for (int i = 0; i < per_group; ++i) {
      x.row(g * per_group + i) =
          rng.normal<double>(1, d, 1.0).row(0) * 0.3;
      x(g * per_group + i, g) += 5.0;
      labels.push_back(g);
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto p = fit_lda(x, labels, 1e-3);
  auto gmm = fit_gmm(p.project_rows(x), labels, ids, 1e-6);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 1.0);
  CHECK(gmm.components().size() == 6);
}

TEST_CASE("retriever file: round trip preserves scores; corruption detected") {
  std::vector<Vec> centers{Vec::Zero(4), Vec::Ones(4) * 3.0, -Vec::Ones(4) * 2.0};
  auto [x, labels] = make_blobs(12, centers, 0.8, 81);
  RetrieverModel model;
  model.ridge_lambda = 1e-3;
  model.reg_eps = 1e-6;
  model.projection = fit_lda(x, labels, model.ridge_lambda);
  model.gmm = fit_gmm(model.projection.project_rows(x), labels,
                      {"a", "b", "c"}, model.reg_eps);

  const fs::path dir = fs::temp_directory_path() / "aswap_test_retr";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path path = dir / "retriever.v1.aswr";
  model.save(path);
  auto loaded = RetrieverModel::load(path);
  CHECK(loaded.serialize() == model.serialize());

  Rng rng(5);
  const Vec q = rng.normal<double>(1, 4, 2.0).row(0).transpose();
  const Vec pq = model.projection.project(q);
  const Vec lq = loaded.projection.project(q);
  CHECK((pq - lq).cwiseAbs().maxCoeff() == 0.0);
  for (std::size_t g = 0; g < 3; ++g) {
    CHECK(model.gmm.joint_log_density(g, pq) ==
          loaded.gmm.joint_log_density(g, lq));
  }

  std::string bytes = read_file(path);
  bytes[100] ^= 0x10;
  atomic_write_file(path, bytes);
  CHECK_THROWS_AS(RetrieverModel::load(path), IoError);
  fs::remove_all(dir);
}
