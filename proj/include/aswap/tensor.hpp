#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace aswap {

using Index = Eigen::Index;

// Row-major dense matrix, the storage type behind every tensor.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename Scalar>
struct TensorNode {
  Mat<Scalar> value;
  Mat<Scalar> grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  // Parents recorded in op-argument order; the order fixes the topological
  // sort, which keeps backward() deterministic.
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const Mat<Scalar>&)> backward;

  void ensure_grad() {
    if (!grad_alloc) {
      grad.setZero(value.rows(), value.cols());
      grad_alloc = true;
    }
  }
};

}  // namespace detail

// Handle to a node of the define-by-run operation graph. Copies share the
// node. Ops on tensors where no input requires a gradient do not record
// graph edges at all, so inference-style math carries no tape overhead.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::TensorNode<Scalar>;

  Tensor() = default;

  static Tensor from(Mat<Scalar> m, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->value = std::move(m);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static Tensor zeros(Index rows, Index cols, bool requires_grad = false) {
    return from(Mat<Scalar>::Zero(rows, cols), requires_grad);
  }
  static Tensor scalar(Scalar v) {
    Mat<Scalar> m(1, 1);
    m(0, 0) = v;
    return from(std::move(m));
  }

  bool valid() const { return node_ != nullptr; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }

  const Mat<Scalar>& value() const { return node_->value; }
  Mat<Scalar>& value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_->grad_alloc; }
  const Mat<Scalar>& grad() const {
    if (!node_->grad_alloc) {
      throw NumericError("gradient not populated; call backward() first");
    }
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad_alloc) node_->grad.setZero();
  }

  bool has_nonfinite() const {
    if (!node_->value.allFinite()) return true;
    return node_->grad_alloc && !node_->grad.allFinite();
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_op(Mat<Scalar> value,
                       std::vector<Tensor<Scalar>> inputs,
                       std::function<void(const Mat<Scalar>&)> backward) {
  bool needs = false;
  for (const auto& in : inputs) needs |= in.requires_grad();
  auto out = Tensor<Scalar>::from(std::move(value), needs);
  if (needs) {
    auto node = out.node();
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return out;
}

template <typename Scalar>
void accumulate(const std::shared_ptr<TensorNode<Scalar>>& node,
                const Mat<Scalar>& g) {
  if (!node->requires_grad) return;
  node->ensure_grad();
  node->grad += g;
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

template <typename Scalar>
void check_finite(const Mat<Scalar>& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError(what + ": non-finite values");
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(),
                "add: shape mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make_op<Scalar>(
      a.value() + b.value(), {a, b}, [an, bn](const Mat<Scalar>& g) {
        detail::accumulate(an, g);
        detail::accumulate(bn, g);
      });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(),
                "sub: shape mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make_op<Scalar>(
      a.value() - b.value(), {a, b}, [an, bn](const Mat<Scalar>& g) {
        detail::accumulate(an, g);
        detail::accumulate<Scalar>(bn, -g);
      });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(),
                "mul: shape mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make_op<Scalar>(
      a.value().cwiseProduct(b.value()), {a, b},
      [an, bn](const Mat<Scalar>& g) {
        detail::accumulate<Scalar>(an, g.cwiseProduct(bn->value));
        detail::accumulate<Scalar>(bn, g.cwiseProduct(an->value));
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  auto an = a.node();
  return detail::make_op<Scalar>(a.value() * c, {a},
                                 [an, c](const Mat<Scalar>& g) {
                                   detail::accumulate<Scalar>(an, g * c);
                                 });
}

// x: [n, m], bias: [1, m], broadcast over rows.
template <typename Scalar>
Tensor<Scalar> add_rowvec(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  detail::check(bias.rows() == 1 && bias.cols() == x.cols(),
                "add_rowvec: bias must be [1, cols(x)]");
  auto xn = x.node(), bn = bias.node();
  Mat<Scalar> v = x.value();
  v.rowwise() += bias.value().row(0);
  return detail::make_op<Scalar>(std::move(v), {x, bias},
                                 [xn, bn](const Mat<Scalar>& g) {
                                   detail::accumulate(xn, g);
                                   detail::accumulate<Scalar>(
                                       bn, g.colwise().sum());
                                 });
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make_op<Scalar>(
      a.value() * b.value(), {a, b}, [an, bn](const Mat<Scalar>& g) {
        detail::accumulate<Scalar>(an, g * bn->value.transpose());
        detail::accumulate<Scalar>(bn, an->value.transpose() * g);
      });
}

// a * b^T
template <typename Scalar>
Tensor<Scalar> matmul_nt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make_op<Scalar>(
      a.value() * b.value().transpose(), {a, b},
      [an, bn](const Mat<Scalar>& g) {
        detail::accumulate<Scalar>(an, g * bn->value);
        detail::accumulate<Scalar>(bn, g.transpose() * an->value);
      });
}

// a^T * b
template <typename Scalar>
Tensor<Scalar> matmul_tn(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check(a.rows() == b.rows(), "matmul_tn: inner dimension mismatch");
  auto an = a.node(), bn = b.node();
  return detail::make_op<Scalar>(
      a.value().transpose() * b.value(), {a, b},
      [an, bn](const Mat<Scalar>& g) {
        detail::accumulate<Scalar>(an, bn->value * g.transpose());
        detail::accumulate<Scalar>(bn, an->value * g);
      });
}

// Gathers rows of `table` by id; the embedding lookup. Backward scatter-adds.
template <typename Scalar>
Tensor<Scalar> rows_lookup(const Tensor<Scalar>& table,
                           std::vector<int> ids) {
  for (int id : ids) {
    detail::check(id >= 0 && Index(id) < table.rows(),
                  "rows_lookup: id out of range");
  }
  Mat<Scalar> v(Index(ids.size()), table.cols());
  for (Index i = 0; i < v.rows(); ++i) v.row(i) = table.value().row(ids[i]);
  auto tn = table.node();
  return detail::make_op<Scalar>(
      std::move(v), {table}, [tn, ids = std::move(ids)](const Mat<Scalar>& g) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (Index i = 0; i < g.rows(); ++i) {
          tn->grad.row(ids[std::size_t(i)]) += g.row(i);
        }
      });
}

template <typename Scalar>
Tensor<Scalar> cols_slice(const Tensor<Scalar>& x, Index start, Index width) {
  detail::check(start >= 0 && width >= 1 && start + width <= x.cols(),
                "cols_slice: range out of bounds");
  auto xn = x.node();
  return detail::make_op<Scalar>(
      x.value().middleCols(start, width), {x},
      [xn, start, width](const Mat<Scalar>& g) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        xn->grad.middleCols(start, width) += g;
      });
}

template <typename Scalar>
Tensor<Scalar> hconcat(const std::vector<Tensor<Scalar>>& parts) {
  detail::check(!parts.empty(), "hconcat: no inputs");
  const Index rows = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows, "hconcat: row count mismatch");
    total += p.cols();
  }
  Mat<Scalar> v(rows, total);
  std::vector<Index> offsets(parts.size());
  Index at = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    offsets[i] = at;
    v.middleCols(at, parts[i].cols()) = parts[i].value();
    at += parts[i].cols();
  }
  std::vector<std::shared_ptr<detail::TensorNode<Scalar>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_op<Scalar>(
      std::move(v), parts,
      [nodes, offsets](const Mat<Scalar>& g) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          detail::accumulate<Scalar>(
              nodes[i], g.middleCols(offsets[i], nodes[i]->value.cols()));
        }
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions
// ---------------------------------------------------------------------------

// Row softmax with max subtraction. Rejects NaN input.
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  if (x.value().hasNaN()) throw NumericError("softmax_rows: NaN input");
  Mat<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.value().row(i).maxCoeff();
    y.row(i) = (x.value().row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  auto xn = x.node();
  auto yn = std::make_shared<Mat<Scalar>>(y);
  return detail::make_op<Scalar>(
      std::move(y), {x}, [xn, yn](const Mat<Scalar>& g) {
        if (!xn->requires_grad) return;
        Mat<Scalar> dx(g.rows(), g.cols());
        for (Index i = 0; i < g.rows(); ++i) {
          const Scalar dot = g.row(i).dot(yn->row(i));
          dx.row(i) = (g.row(i).array() - dot) * yn->row(i).array();
        }
        detail::accumulate(xn, dx);
      });
}

// Adds -1e30 above the diagonal of a square score matrix so softmax assigns
// exactly zero probability to future positions.
template <typename Scalar>
Tensor<Scalar> causal_mask(const Tensor<Scalar>& scores) {
  detail::check(scores.rows() == scores.cols(), "causal_mask: matrix not square");
  const Scalar neg = Scalar(-1e30);
  Mat<Scalar> v = scores.value();
  for (Index i = 0; i < v.rows(); ++i) {
    for (Index j = i + 1; j < v.cols(); ++j) v(i, j) = neg;
  }
  auto sn = scores.node();
  return detail::make_op<Scalar>(std::move(v), {scores},
                                 [sn](const Mat<Scalar>& g) {
                                   if (!sn->requires_grad) return;
                                   Mat<Scalar> dx = g;
                                   for (Index i = 0; i < dx.rows(); ++i) {
                                     for (Index j = i + 1; j < dx.cols(); ++j) {
                                       dx(i, j) = Scalar(0);
                                     }
                                   }
                                   detail::accumulate(sn, dx);
                                 });
}

// Row-wise layer norm with learned gain/bias. gamma, beta: [1, d].
template <typename Scalar>
Tensor<Scalar> layer_norm_rows(const Tensor<Scalar>& x,
                               const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta,
                               Scalar eps = Scalar(1e-5)) {
  detail::check(gamma.rows() == 1 && gamma.cols() == x.cols() &&
                    beta.rows() == 1 && beta.cols() == x.cols(),
                "layer_norm_rows: gamma/beta must be [1, cols(x)]");
  const Index n = x.rows(), d = x.cols();
  Mat<Scalar> xhat(n, d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar mean = x.value().row(i).mean();
    const Scalar var =
        (x.value().row(i).array() - mean).square().sum() / Scalar(d);
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mean) * inv_std(i);
  }
  Mat<Scalar> y = xhat;
  for (Index i = 0; i < n; ++i) {
    y.row(i) = y.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto xhat_keep = std::make_shared<Mat<Scalar>>(std::move(xhat));
  auto inv_keep =
      std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(std::move(inv_std));
  return detail::make_op<Scalar>(
      std::move(y), {x, gamma, beta},
      [xn, gn, bn, xhat_keep, inv_keep, d](const Mat<Scalar>& g) {
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad.row(0) += g.cwiseProduct(*xhat_keep).colwise().sum();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad.row(0) += g.colwise().sum();
        }
        if (xn->requires_grad) {
          Mat<Scalar> dx(g.rows(), g.cols());
          for (Index i = 0; i < g.rows(); ++i) {
            // dy scaled by gamma, then the standard two-term correction.
            Eigen::Array<Scalar, 1, Eigen::Dynamic> gy =
                g.row(i).cwiseProduct(gn->value.row(0)).array();
            const Scalar mean_gy = gy.mean();
            const Scalar mean_gy_xhat =
                (gy * xhat_keep->row(i).array()).mean();
            dx.row(i) =
                ((gy - mean_gy - xhat_keep->row(i).array() * mean_gy_xhat) *
                 (*inv_keep)(i))
                    .matrix();
          }
          detail::accumulate(xn, dx);
        }
      });
}

// GELU, tanh approximation.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  const Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar c = Scalar(0.044715);
  Mat<Scalar> y =
      (Scalar(0.5) * x.value().array() *
       (Scalar(1) +
        (k * (x.value().array() + c * x.value().array().cube())).tanh()))
          .matrix();
  auto xn = x.node();
  return detail::make_op<Scalar>(
      std::move(y), {x}, [xn, k, c](const Mat<Scalar>& g) {
        if (!xn->requires_grad) return;
        const auto xa = xn->value.array();
        const auto t = (k * (xa + c * xa.cube())).tanh();
        const auto du = k * (Scalar(1) + Scalar(3) * c * xa.square());
        Mat<Scalar> dx =
            (g.array() * (Scalar(0.5) * (Scalar(1) + t) +
                          Scalar(0.5) * xa * (Scalar(1) - t.square()) * du))
                .matrix();
        detail::accumulate(xn, dx);
      });
}

template <typename Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& x) {
  Mat<Scalar> v(1, 1);
  v(0, 0) = x.value().sum();
  auto xn = x.node();
  return detail::make_op<Scalar>(
      std::move(v), {x}, [xn](const Mat<Scalar>& g) {
        detail::accumulate<Scalar>(
            xn, Mat<Scalar>::Constant(xn->value.rows(), xn->value.cols(),
                                      g(0, 0)));
      });
}

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x) {
  return scale(sum_all(x), Scalar(1) / Scalar(x.size()));
}

// Mean negative log-likelihood of the target ids under row softmax of the
// logits. Fused with log-sum-exp for stability.
template <typename Scalar>
Tensor<Scalar> cross_entropy_mean(const Tensor<Scalar>& logits,
                                  std::vector<int> targets) {
  detail::check(Index(targets.size()) == logits.rows(),
                "cross_entropy_mean: one target per row required");
  for (int t : targets) {
    if (t < 0 || Index(t) >= logits.cols()) {
      throw ShapeError("cross_entropy_mean: target id out of range");
    }
  }
  const Index n = logits.rows();
  Mat<Scalar> probs(n, logits.cols());
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar m = logits.value().row(i).maxCoeff();
    probs.row(i) = (logits.value().row(i).array() - m).exp();
    const Scalar z = probs.row(i).sum();
    probs.row(i) /= z;
    total += m + std::log(z) - logits.value()(i, targets[std::size_t(i)]);
  }
  Mat<Scalar> v(1, 1);
  v(0, 0) = total / Scalar(n);
  auto ln = logits.node();
  auto probs_keep = std::make_shared<Mat<Scalar>>(std::move(probs));
  return detail::make_op<Scalar>(
      std::move(v), {logits},
      [ln, probs_keep, targets = std::move(targets)](const Mat<Scalar>& g) {
        if (!ln->requires_grad) return;
        Mat<Scalar> dx = *probs_keep;
        const Index n = dx.rows();
        for (Index i = 0; i < n; ++i) dx(i, targets[std::size_t(i)]) -= Scalar(1);
        dx *= g(0, 0) / Scalar(n);
        detail::accumulate(ln, dx);
      });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Runs reverse-mode accumulation from a scalar loss. Populates .grad on every
// reachable tensor with requires_grad, then releases the recorded graph
// (parent links and closures), so each training step records afresh.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  using Node = detail::TensorNode<Scalar>;
  if (!loss.valid() || loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward: loss must be a 1x1 scalar");
  }
  if (!loss.requires_grad()) {
    throw NumericError("backward: loss does not require grad");
  }
  if (!std::isfinite(double(loss.value()(0, 0)))) {
    throw NumericError("backward: loss is not finite");
  }

  // Iterative DFS post-order; parents before node. on_path detects cycles,
  // which are impossible by construction.
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  std::unordered_set<Node*> on_path;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  on_path.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next].get();
      ++next;
      if (done.count(p)) continue;
      if (on_path.count(p)) throw std::logic_error("backward: graph cycle");
      if (p->requires_grad) {
        on_path.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      done.insert(node);
      on_path.erase(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad(0, 0) = Scalar(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward) {
      node->ensure_grad();
      node->backward(node->grad);
    }
  }
  // Consume the graph.
  for (Node* node : order) {
    node->backward = nullptr;
    node->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// Seeded RNG helpers
// ---------------------------------------------------------------------------

// Deterministic per-build RNG used for all initialization and sampling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  template <typename Scalar>
  Mat<Scalar> normal(Index rows, Index cols, Scalar stddev) {
    std::normal_distribution<double> dist(0.0, double(stddev));
    Mat<Scalar> m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) m(i, j) = Scalar(dist(gen_));
    }
    return m;
  }

  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> dist(lo, hi);
    return dist(gen_);
  }

  double uniform() {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    return dist(gen_);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = std::size_t(uniform_int(0, int(i - 1)));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& gen() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace aswap
