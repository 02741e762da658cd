#pragma once

#include <span>
#include <vector>

#include "aswap/tensor.hpp"

namespace aswap {

template <typename Scalar>
struct AdamWConfig {
  Scalar lr = Scalar(1e-3);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  Scalar weight_decay = Scalar(0.01);
};

// AdamW with decoupled weight decay and bias-corrected moments. Owns the
// per-parameter moment buffers; parameter order must stay stable across
// steps (shape changes are an error).
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWConfig<Scalar> cfg = {}) : cfg_(cfg) {}

  const AdamWConfig<Scalar>& config() const { return cfg_; }
  long step_count() const { return step_count_; }

  // Low-level update: params[i] is adjusted in place using grads[i].
  void step(std::span<Mat<Scalar>* const> params,
            std::span<const Mat<Scalar>* const> grads) {
    if (params.size() != grads.size()) {
      throw ShapeError("adamw: params/grads count mismatch");
    }
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].setZero(params[i]->rows(), params[i]->cols());
        v_[i].setZero(params[i]->rows(), params[i]->cols());
      }
    }
    if (m_.size() != params.size()) {
      throw ShapeError("adamw: parameter count changed between steps");
    }
    ++step_count_;
    const Scalar bc1 = Scalar(1) - std::pow(cfg_.beta1, Scalar(step_count_));
    const Scalar bc2 = Scalar(1) - std::pow(cfg_.beta2, Scalar(step_count_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Mat<Scalar>& p = *params[i];
      const Mat<Scalar>& g = *grads[i];
      if (p.rows() != g.rows() || p.cols() != g.cols() ||
          m_[i].rows() != p.rows() || m_[i].cols() != p.cols()) {
        throw ShapeError("adamw: parameter/gradient shape mismatch");
      }
      m_[i] = cfg_.beta1 * m_[i] + (Scalar(1) - cfg_.beta1) * g;
      v_[i].array() =
          cfg_.beta2 * v_[i].array() + (Scalar(1) - cfg_.beta2) * g.array().square();
      // Decoupled decay applies to the pre-update parameter.
      Mat<Scalar> update =
          ((m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps))
              .matrix();
      p -= cfg_.lr * cfg_.weight_decay * p;
      p -= cfg_.lr * update;
    }
  }

  // Tensor-level update reading gradients populated by backward().
  void step(std::span<Tensor<Scalar>> params) {
    std::vector<Mat<Scalar>*> ps;
    std::vector<const Mat<Scalar>*> gs;
    ps.reserve(params.size());
    gs.reserve(params.size());
    for (auto& t : params) {
      ps.push_back(&t.value());
      gs.push_back(&t.grad());
    }
    step(std::span<Mat<Scalar>* const>(ps),
         std::span<const Mat<Scalar>* const>(gs));
  }

 private:
  AdamWConfig<Scalar> cfg_;
  long step_count_ = 0;
  std::vector<Mat<Scalar>> m_, v_;
};

}  // namespace aswap
