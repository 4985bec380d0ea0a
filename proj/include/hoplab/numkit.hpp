// SPDX-License-Identifier: Apache-2.0
//
// Dense numeric core shared by the transformer, its optimizer, and the
// gradient checker.
//
// Reduction order is part of the contract: every reduction here runs left to
// right over the innermost index and accumulates in double. Matrix products go
// through Eigen's single-threaded blocked GEMM, whose summation order depends
// only on the operand shapes and the build, so repeated runs on the same
// binary are bit-identical.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hoplab/errors.hpp"

namespace hoplab {

template <typename T>
class BasicTensor {
  public:
    using value_type = T;

    BasicTensor() = default;
    explicit BasicTensor(std::vector<std::size_t> shape, T fill = T{0})
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

  private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Additive mask sentinel for attention logits.
template <typename T>
constexpr T kMasked = -std::numeric_limits<T>::infinity();

// In-place softmax with max subtraction. `mask`, when non-empty, is added to
// the row; entries must be 0 or kMasked. Throws DegenerateAttentionError when
// every entry is masked.
template <typename T>
void softmax_inplace(std::span<T> row, std::span<const T> mask = {});

template <typename T>
std::vector<T> softmax(std::span<const T> row, std::span<const T> mask = {});

struct NormStats {
    double mean = 0.0;
    double rstd = 0.0;  // 1 / sqrt(var + eps)
};

// out = (x - mean) * rstd * gain + bias. Empty gain/bias mean unit/zero.
template <typename T>
NormStats layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, double eps,
                     std::span<T> out);

// Backward of layer_norm. `normed` is the pre-affine output. Accumulates into
// dx, dgain, dbias.
template <typename T>
void layer_norm_backward(std::span<const T> dout, std::span<const T> normed, std::span<const T> gain, double rstd,
                         std::span<T> dx, std::span<T> dgain, std::span<T> dbias);

// -log softmax(logits)[target]. Throws IndexError for an out-of-range target.
template <typename T>
double cross_entropy_loss(std::span<const T> logits, int target);

// C (m x n) = op(A) * op(B) [+ C when accumulate]; all row-major.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);

// tanh-approximated GELU and its derivative
double gelu(double x);
double gelu_grad(double x);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    AdamConfig config;
    std::vector<BasicTensor<T>> first_moment;
    std::vector<BasicTensor<T>> second_moment;
    long step = 0;

    AdamState() = default;
    AdamState(const AdamConfig& cfg, std::span<BasicTensor<T>* const> params);
};

// One bias-corrected Adam update over matching parameter/gradient blocks.
// `lr_scale` multiplies the configured learning rate (warmup schedules).
template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads,
               AdamState<T>& state, double lr_scale = 1.0);

// Finite-difference verification ------------------------------------------------

struct GradBlockReport {
    std::string name;
    std::size_t elements = 0;
    double max_abs_error = 0.0;
    double max_rel_error = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradBlockReport> blocks;
    double tolerance = 0.0;
    bool passed() const;
    double max_rel_error() const;
};

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor of the relative error, so entries whose true gradient is
    // ~0 are judged on absolute error.
    double rel_floor = 1e-6;
};

struct ParamBlockRef {
    std::string name;
    BasicTensor<double>* value = nullptr;
    const BasicTensor<double>* analytic_grad = nullptr;
};

// Central differences on every element of every block; `loss` re-evaluates the
// objective at the current parameter values. Throws NumericError on a
// non-finite loss.
GradCheckReport grad_check(std::span<const ParamBlockRef> blocks, const std::function<double()>& loss,
                           const GradCheckOptions& opts = {});

}  // namespace hoplab
