#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "aswap/lora.hpp"
#include "aswap/model.hpp"

namespace aswap {

struct AccessDeniedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Vec = Eigen::VectorXd;
using Matd = Eigen::MatrixXd;

// Query/document embedding: mean of the frozen base model's final-layer
// hidden states over the first min(context_len, n) tokens. No adapters are
// involved; retrieval has to run before adapter selection.
class EmbeddingProvider {
 public:
  explicit EmbeddingProvider(const BaseModel<float>& model)
      : model_(&model), dim_(model.config().d_model) {}

  int dim() const { return dim_; }

  Vec embed(std::string_view document) const;

 private:
  const BaseModel<float>* model_;
  int dim_;
};

enum class ProjectionKind : std::uint32_t { LDA = 0, PCA = 1 };

inline std::string projection_kind_name(ProjectionKind k) {
  return k == ProjectionKind::LDA ? "lda" : "pca";
}
inline ProjectionKind projection_kind_from_name(const std::string& s) {
  if (s == "lda") return ProjectionKind::LDA;
  if (s == "pca") return ProjectionKind::PCA;
  throw ShapeError("unknown projection kind: " + s);
}

struct Projection {
  ProjectionKind kind = ProjectionKind::LDA;
  Matd matrix;  // [d_out x d_in], rows unit-normalized
  int d_in = 0;
  int d_out = 0;
  int class_count = 0;
  bool fitted = false;

  Vec project(const Vec& x) const {
    if (!fitted) throw NumericError("projection used before fitting");
    return matrix * x;
  }
  Matd project_rows(const Matd& x) const {
    if (!fitted) throw NumericError("projection used before fitting");
    return x * matrix.transpose();
  }
};

// Fisher discriminant directions: top generalized eigenvectors of
// (S_w + lambda*(tr(S_w)/d)*I)^{-1} S_b, d_out = min(K-1, d_in). Rows are
// unit-normalized with the first non-negligible coefficient positive, which
// pins the sign deterministically.
Projection fit_lda(const Matd& vectors, const std::vector<int>& labels,
                   double ridge_lambda);

// Top principal directions of the centered covariance, same sign convention.
Projection fit_pca(const Matd& vectors, int d_out);

struct GmmComponent {
  std::string group_id;
  Vec mean;
  Matd covariance;
  double log_weight = 0.0;
};

// One full-covariance Gaussian per adapter group, fit supervised from
// labeled vectors. Optional EM refinement never decreases total
// log-likelihood (iterations that would are discarded).
class GmmModel {
 public:
  GmmModel() = default;
  GmmModel(std::vector<GmmComponent> components, double reg_eps);

  const std::vector<GmmComponent>& components() const { return components_; }
  double reg_eps() const { return reg_eps_; }

  // log N(x; mean_g, cov_g), without the mixture weight.
  double component_log_density(std::size_t g, const Vec& x) const;
  // log_weight_g + component log density: the ranking score.
  double joint_log_density(std::size_t g, const Vec& x) const;
  double total_log_likelihood(const Matd& x) const;

  // Runs up to `iterations` EM updates over x; returns the log-likelihood
  // after each accepted iteration (prefixed with the starting value).
  std::vector<double> refine_em(const Matd& x, int iterations);

 private:
  void refresh_cached();
  std::vector<GmmComponent> components_;
  std::vector<Eigen::LLT<Matd>> llt_;
  std::vector<double> log_norm_;
  double reg_eps_ = 1e-6;
};

GmmModel fit_gmm(const Matd& projected, const std::vector<int>& labels,
                 const std::vector<std::string>& group_ids, double reg_eps,
                 int em_iterations = 0);

struct RankedEntry {
  std::string adapter_id;
  double log_density = 0.0;
};

struct RankedAdapters {
  std::vector<RankedEntry> entries;  // sorted by log_density desc, id asc
  int k = 0;
  WeightingMode weighting = WeightingMode::Uniform;

  // Mixture weights over the ranked entries under the configured mode.
  std::vector<double> weights() const;
  AdapterMix to_mix() const;
};

// Scores accessible components at the projected query and returns the top-k.
// Ties break on adapter id. Adapters outside `accessible` can never appear.
RankedAdapters rank_and_filter(const GmmModel& gmm, const Projection& projection,
                               const Vec& query_embedding,
                               const std::map<std::string, std::string>& adapter_by_group,
                               const std::set<std::string>& accessible,
                               int k, WeightingMode weighting);

// Projection + mixture bundle with fit hyperparameters; the unit the
// registry versions and swaps atomically.
struct RetrieverModel {
  Projection projection;
  GmmModel gmm;
  double ridge_lambda = 1e-3;
  double reg_eps = 1e-6;

  static constexpr std::uint32_t kFormatVersion = 1;
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static RetrieverModel load(const std::filesystem::path& path);
};

}  // namespace aswap
