#include "aswap/retriever.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aswap/tokenizer.hpp"

namespace aswap {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// Flip each row so its first coefficient above threshold is positive.
void apply_sign_convention(Matd& rows) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const double scale = rows.row(i).cwiseAbs().maxCoeff();
    if (scale <= 0.0) continue;
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      const double v = rows(i, j);
      if (std::abs(v) > 1e-12 * scale) {
        if (v < 0.0) rows.row(i) = -rows.row(i);
        break;
      }
    }
  }
}

}  // namespace

Vec EmbeddingProvider::embed(std::string_view document) const {
  if (document.empty()) throw ShapeError("embed: empty document");
  std::vector<int> ids = tokenize(document);
  const int ctx = model_->config().context_len;
  if (Index(ids.size()) > ctx) ids.resize(std::size_t(ctx));
  const Mat<float> hidden = model_->hidden_states(ids);
  Vec out = hidden.colwise().mean().cast<double>().transpose();
  if (!out.allFinite()) throw NumericError("embedding: non-finite values");
  return out;
}

Projection fit_lda(const Matd& vectors, const std::vector<int>& labels,
                   double ridge_lambda) {
  const Eigen::Index n = vectors.rows();
  const Eigen::Index d = vectors.cols();
  if (std::size_t(n) != labels.size()) {
    throw ShapeError("fit_lda: one label per vector required");
  }
  if (!vectors.allFinite()) throw NumericError("fit_lda: non-finite input");

  int k = 0;
  for (int l : labels) {
    if (l < 0) throw ShapeError("fit_lda: negative label");
    k = std::max(k, l + 1);
  }
  if (k < 2) throw ShapeError("fit_lda: need at least 2 classes");

  std::vector<Eigen::Index> counts(std::size_t(k), 0);
  Matd means = Matd::Zero(k, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    counts[std::size_t(labels[std::size_t(i)])] += 1;
    means.row(labels[std::size_t(i)]) += vectors.row(i);
  }
  for (int c = 0; c < k; ++c) {
    if (counts[std::size_t(c)] < 2) {
      throw ShapeError("fit_lda: class " + std::to_string(c) +
                       " has fewer than 2 samples");
    }
    means.row(c) /= double(counts[std::size_t(c)]);
  }

  const Vec grand = vectors.colwise().mean().transpose();
  Matd s_w = Matd::Zero(d, d);
  Matd s_b = Matd::Zero(d, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec diff =
        (vectors.row(i) - means.row(labels[std::size_t(i)])).transpose();
    s_w.noalias() += diff * diff.transpose();
  }
  for (int c = 0; c < k; ++c) {
    const Vec diff = (means.row(c).transpose() - grand);
    s_b.noalias() += double(counts[std::size_t(c)]) * diff * diff.transpose();
  }

  const double trace = s_w.trace();
  const double ridge =
      trace > 0.0 ? ridge_lambda * trace / double(d) : ridge_lambda;
  s_w += ridge * Matd::Identity(d, d);

  // S_b v = lambda S_w v; eigenvalues ascend, so the top directions are the
  // trailing columns.
  Eigen::GeneralizedSelfAdjointEigenSolver<Matd> solver(s_b, s_w);
  if (solver.info() != Eigen::Success) {
    throw NumericError("fit_lda: generalized eigensolver failed");
  }
  const int d_out = int(std::min<Eigen::Index>(k - 1, d));
  Matd rows(d_out, d);
  for (int r = 0; r < d_out; ++r) {
    Vec v = solver.eigenvectors().col(d - 1 - r);
    const double norm = v.norm();
    if (norm > 0.0) v /= norm;
    rows.row(r) = v.transpose();
  }
  apply_sign_convention(rows);

  Projection p;
  p.kind = ProjectionKind::LDA;
  p.matrix = std::move(rows);
  p.d_in = int(d);
  p.d_out = d_out;
  p.class_count = k;
  p.fitted = true;
  return p;
}

Projection fit_pca(const Matd& vectors, int d_out) {
  const Eigen::Index n = vectors.rows();
  const Eigen::Index d = vectors.cols();
  if (d_out < 1 || Eigen::Index(d_out) > d) {
    throw ShapeError("fit_pca: d_out out of range");
  }
  if (n < Eigen::Index(d_out)) {
    throw ShapeError("fit_pca: need at least d_out samples");
  }
  if (!vectors.allFinite()) throw NumericError("fit_pca: non-finite input");

  const Matd centered = vectors.rowwise() - vectors.colwise().mean();
  const Matd cov = centered.transpose() * centered / double(std::max<Eigen::Index>(n - 1, 1));
  Eigen::SelfAdjointEigenSolver<Matd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw NumericError("fit_pca: eigensolver failed");
  }
  Matd rows(d_out, d);
  for (int r = 0; r < d_out; ++r) {
    rows.row(r) = solver.eigenvectors().col(d - 1 - r).transpose();
  }
  apply_sign_convention(rows);

  Projection p;
  p.kind = ProjectionKind::PCA;
  p.matrix = std::move(rows);
  p.d_in = int(d);
  p.d_out = d_out;
  p.class_count = 0;
  p.fitted = true;
  return p;
}

GmmModel::GmmModel(std::vector<GmmComponent> components, double reg_eps)
    : components_(std::move(components)), reg_eps_(reg_eps) {
  refresh_cached();
}

void GmmModel::refresh_cached() {
  llt_.clear();
  log_norm_.clear();
  for (const auto& c : components_) {
    Eigen::LLT<Matd> llt(c.covariance);
    if (llt.info() != Eigen::Success) {
      throw NumericError("gmm: covariance not positive-definite for group " +
                         c.group_id);
    }
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < c.covariance.rows(); ++i) {
      log_det += 2.0 * std::log(llt.matrixL()(i, i));
    }
    log_norm_.push_back(-0.5 * (double(c.covariance.rows()) * kLog2Pi + log_det));
    llt_.push_back(std::move(llt));
  }
}

double GmmModel::component_log_density(std::size_t g, const Vec& x) const {
  const auto& c = components_.at(g);
  const Vec diff = x - c.mean;
  const Vec solved = llt_.at(g).solve(diff);
  return log_norm_.at(g) - 0.5 * diff.dot(solved);
}

double GmmModel::joint_log_density(std::size_t g, const Vec& x) const {
  return components_.at(g).log_weight + component_log_density(g, x);
}

double GmmModel::total_log_likelihood(const Matd& x) const {
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vec xi = x.row(i).transpose();
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> scores(components_.size());
    for (std::size_t g = 0; g < components_.size(); ++g) {
      scores[g] = joint_log_density(g, xi);
      best = std::max(best, scores[g]);
    }
    double acc = 0.0;
    for (double s : scores) acc += std::exp(s - best);
    total += best + std::log(acc);
  }
  return total;
}

std::vector<double> GmmModel::refine_em(const Matd& x, int iterations) {
  std::vector<double> history{total_log_likelihood(x)};
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  for (int it = 0; it < iterations; ++it) {
    // E-step: responsibilities.
    Matd resp(n, Eigen::Index(components_.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec xi = x.row(i).transpose();
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t g = 0; g < components_.size(); ++g) {
        resp(i, Eigen::Index(g)) = joint_log_density(g, xi);
        best = std::max(best, resp(i, Eigen::Index(g)));
      }
      double z = 0.0;
      for (std::size_t g = 0; g < components_.size(); ++g) {
        resp(i, Eigen::Index(g)) = std::exp(resp(i, Eigen::Index(g)) - best);
        z += resp(i, Eigen::Index(g));
      }
      resp.row(i) /= z;
    }
    // M-step.
    std::vector<GmmComponent> updated = components_;
    for (std::size_t g = 0; g < components_.size(); ++g) {
      const double ng = resp.col(Eigen::Index(g)).sum();
      if (ng <= 1e-12) continue;
      Vec mean = Vec::Zero(d);
      for (Eigen::Index i = 0; i < n; ++i) {
        mean += resp(i, Eigen::Index(g)) * x.row(i).transpose();
      }
      mean /= ng;
      Matd cov = Matd::Zero(d, d);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Vec diff = x.row(i).transpose() - mean;
        cov.noalias() += resp(i, Eigen::Index(g)) * diff * diff.transpose();
      }
      cov /= ng;
      const double mean_diag = cov.trace() / double(d);
      cov += (reg_eps_ * std::max(mean_diag, 1.0) + 1e-12) * Matd::Identity(d, d);
      updated[g].mean = std::move(mean);
      updated[g].covariance = std::move(cov);
      updated[g].log_weight = std::log(ng / double(n));
    }
    GmmModel candidate(updated, reg_eps_);
    const double ll = candidate.total_log_likelihood(x);
    if (ll < history.back()) {
      // Regularization can break strict EM monotonicity; keep the old model.
      break;
    }
    *this = std::move(candidate);
    history.push_back(ll);
  }
  return history;
}

GmmModel fit_gmm(const Matd& projected, const std::vector<int>& labels,
                 const std::vector<std::string>& group_ids, double reg_eps,
                 int em_iterations) {
  const Eigen::Index n = projected.rows();
  const Eigen::Index d = projected.cols();
  if (std::size_t(n) != labels.size()) {
    throw ShapeError("fit_gmm: one label per vector required");
  }
  const int k = int(group_ids.size());
  if (k < 1) throw ShapeError("fit_gmm: no groups");

  std::vector<Eigen::Index> counts(std::size_t(k), 0);
  for (int l : labels) {
    if (l < 0 || l >= k) throw ShapeError("fit_gmm: label out of range");
    counts[std::size_t(l)] += 1;
  }
  std::vector<GmmComponent> components;
  for (int g = 0; g < k; ++g) {
    if (counts[std::size_t(g)] < 2) {
      throw ShapeError("fit_gmm: group " + group_ids[std::size_t(g)] +
                       " has fewer than 2 samples (covariance undefined)");
    }
    GmmComponent c;
    c.group_id = group_ids[std::size_t(g)];
    c.mean = Vec::Zero(d);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (labels[std::size_t(i)] == g) c.mean += projected.row(i).transpose();
    }
    c.mean /= double(counts[std::size_t(g)]);
    Matd cov = Matd::Zero(d, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (labels[std::size_t(i)] != g) continue;
      const Vec diff = projected.row(i).transpose() - c.mean;
      cov.noalias() += diff * diff.transpose();
    }
    cov /= double(counts[std::size_t(g)]);
    const double mean_diag = cov.trace() / double(d);
    cov += (reg_eps * std::max(mean_diag, 1.0) + 1e-12) * Matd::Identity(d, d);
    c.covariance = std::move(cov);
    c.log_weight = std::log(double(counts[std::size_t(g)]) / double(n));
    components.push_back(std::move(c));
  }
  GmmModel model(std::move(components), reg_eps);
  if (em_iterations > 0) model.refine_em(projected, em_iterations);
  return model;
}

std::vector<double> RankedAdapters::weights() const {
  std::vector<double> w(entries.size(), 0.0);
  if (entries.empty()) return w;
  if (weighting == WeightingMode::Uniform) {
    std::fill(w.begin(), w.end(), 1.0 / double(entries.size()));
    return w;
  }
  double best = entries.front().log_density;
  for (const auto& e : entries) best = std::max(best, e.log_density);
  double z = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    w[i] = std::exp(entries[i].log_density - best);
    z += w[i];
  }
  for (auto& v : w) v /= z;
  return w;
}

AdapterMix RankedAdapters::to_mix() const {
  AdapterMix mix;
  mix.weighting_mode = weighting;
  const auto w = weights();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    mix.entries.push_back({entries[i].adapter_id, w[i]});
  }
  // Exact unity for the singleton case, which keeps top-1 composition
  // bit-identical to single-adapter inference.
  if (mix.entries.size() == 1) mix.entries.front().weight = 1.0;
  mix.validate();
  return mix;
}

RankedAdapters rank_and_filter(const GmmModel& gmm, const Projection& projection,
                               const Vec& query_embedding,
                               const std::map<std::string, std::string>& adapter_by_group,
                               const std::set<std::string>& accessible,
                               int k, WeightingMode weighting) {
  if (k < 1) throw ShapeError("rank_and_filter: k must be >= 1");
  if (accessible.empty()) {
    throw AccessDeniedError("no authorized adapters for this query");
  }
  const Vec q = projection.project(query_embedding);
  std::vector<RankedEntry> scored;
  for (std::size_t g = 0; g < gmm.components().size(); ++g) {
    const auto& group = gmm.components()[g].group_id;
    auto it = adapter_by_group.find(group);
    if (it == adapter_by_group.end()) continue;
    if (!accessible.count(it->second)) continue;
    scored.push_back({it->second, gmm.joint_log_density(g, q)});
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.log_density != b.log_density) return a.log_density > b.log_density;
    return a.adapter_id < b.adapter_id;
  });
  RankedAdapters out;
  out.k = k;
  out.weighting = weighting;
  const std::size_t take = std::min<std::size_t>(std::size_t(k), scored.size());
  out.entries.assign(scored.begin(), scored.begin() + long(take));
  return out;
}

std::string RetrieverModel::serialize() const {
  ByteWriter w;
  w.magic("ASWR");
  w.u32(kFormatVersion);
  w.u32(std::uint32_t(projection.kind));
  w.u32(std::uint32_t(projection.d_in));
  w.u32(std::uint32_t(projection.d_out));
  w.u32(std::uint32_t(gmm.components().size()));
  w.f64(reg_eps);
  w.f64(ridge_lambda);
  for (Eigen::Index i = 0; i < projection.matrix.rows(); ++i) {
    for (Eigen::Index j = 0; j < projection.matrix.cols(); ++j) {
      w.f64(projection.matrix(i, j));
    }
  }
  for (const auto& c : gmm.components()) {
    w.str(c.group_id);
    for (Eigen::Index i = 0; i < c.mean.size(); ++i) w.f64(c.mean(i));
    for (Eigen::Index i = 0; i < c.covariance.rows(); ++i) {
      for (Eigen::Index j = 0; j < c.covariance.cols(); ++j) {
        w.f64(c.covariance(i, j));
      }
    }
    w.f64(c.log_weight);
  }
  return w.finish_with_digest();
}

void RetrieverModel::save(const std::filesystem::path& path) const {
  atomic_write_file(path, serialize());
}

RetrieverModel RetrieverModel::load(const std::filesystem::path& path) {
  ByteReader r(read_file(path));
  r.verify_trailing_digest("retriever file");
  r.expect_magic("ASWR", "retriever file");
  if (r.u32() != kFormatVersion) {
    throw IoError("retriever file: unsupported version");
  }
  RetrieverModel out;
  out.projection.kind = ProjectionKind(r.u32());
  out.projection.d_in = int(r.u32());
  out.projection.d_out = int(r.u32());
  const std::uint32_t k = r.u32();
  out.reg_eps = r.f64();
  out.ridge_lambda = r.f64();
  out.projection.matrix.resize(out.projection.d_out, out.projection.d_in);
  for (Eigen::Index i = 0; i < out.projection.matrix.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.projection.matrix.cols(); ++j) {
      out.projection.matrix(i, j) = r.f64();
    }
  }
  out.projection.class_count = int(k);
  out.projection.fitted = true;
  std::vector<GmmComponent> components;
  for (std::uint32_t g = 0; g < k; ++g) {
    GmmComponent c;
    c.group_id = r.str();
    c.mean.resize(out.projection.d_out);
    for (Eigen::Index i = 0; i < c.mean.size(); ++i) c.mean(i) = r.f64();
    c.covariance.resize(out.projection.d_out, out.projection.d_out);
    for (Eigen::Index i = 0; i < c.covariance.rows(); ++i) {
      for (Eigen::Index j = 0; j < c.covariance.cols(); ++j) {
        c.covariance(i, j) = r.f64();
      }
    }
    c.log_weight = r.f64();
    components.push_back(std::move(c));
  }
  if (!r.at_end()) throw IoError("retriever file: trailing bytes");
  out.gmm = GmmModel(std::move(components), out.reg_eps);
  return out;
}

}  // namespace aswap
