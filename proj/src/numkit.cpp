// SPDX-License-Identifier: Apache-2.0
#include "hoplab/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

namespace hoplab {

template <typename T>
void softmax_inplace(std::span<T> row, std::span<const T> mask) {
    const bool masked = !mask.empty();
    if (masked && mask.size() != row.size()) throw ShapeError("softmax mask length mismatch");
    T max_v = kMasked<T>;
    for (std::size_t i = 0; i < row.size(); ++i) {
        const T v = masked ? row[i] + mask[i] : row[i];
        if (v > max_v) max_v = v;
    }
    if (!(max_v > kMasked<T>)) throw DegenerateAttentionError("softmax over a fully masked row");
    double sum = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        const T v = masked ? row[i] + mask[i] : row[i];
        const T e = (v == kMasked<T>) ? T{0} : static_cast<T>(std::exp(v - max_v));
        row[i] = e;
        sum += e;
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (auto& v : row) v *= inv;
}

template <typename T>
std::vector<T> softmax(std::span<const T> row, std::span<const T> mask) {
    std::vector<T> out(row.begin(), row.end());
    softmax_inplace<T>(out, mask);
    return out;
}

template <typename T>
NormStats layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, double eps,
                     std::span<T> out) {
    const std::size_t n = x.size();
    double mean = 0.0;
    for (T v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (T v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
        double y = (x[i] - mean) * rstd;
        if (!gain.empty()) y *= gain[i];
        if (!bias.empty()) y += bias[i];
        out[i] = static_cast<T>(y);
    }
    return {mean, rstd};
}

template <typename T>
void layer_norm_backward(std::span<const T> dout, std::span<const T> normed, std::span<const T> gain, double rstd,
                         std::span<T> dx, std::span<T> dgain, std::span<T> dbias) {
    const std::size_t n = dout.size();
    double mean_dy = 0.0;
    double mean_dy_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dy = static_cast<double>(dout[i]) * (gain.empty() ? 1.0 : static_cast<double>(gain[i]));
        mean_dy += dy;
        mean_dy_y += dy * normed[i];
        if (!dgain.empty()) dgain[i] += dout[i] * normed[i];
        if (!dbias.empty()) dbias[i] += dout[i];
    }
    mean_dy /= static_cast<double>(n);
    mean_dy_y /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double dy = static_cast<double>(dout[i]) * (gain.empty() ? 1.0 : static_cast<double>(gain[i]));
        dx[i] += static_cast<T>(rstd * (dy - mean_dy - normed[i] * mean_dy_y));
    }
}

template <typename T>
double cross_entropy_loss(std::span<const T> logits, int target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
        throw IndexError("cross-entropy target " + std::to_string(target) + " out of range");
    double max_v = -std::numeric_limits<double>::infinity();
    for (T v : logits) max_v = std::max(max_v, static_cast<double>(v));
    double sum = 0.0;
    for (T v : logits) sum += std::exp(static_cast<double>(v) - max_v);
    return std::log(sum) + max_v - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    const auto em = static_cast<Eigen::Index>(m);
    const auto ek = static_cast<Eigen::Index>(k);
    const auto en = static_cast<Eigen::Index>(n);
    Eigen::Map<Mat> cm(c, em, en);
    // A stored as (m x k) or, when transposed, (k x m); likewise B.
    CMap am(a, trans_a ? ek : em, trans_a ? em : ek);
    CMap bm(b, trans_b ? en : ek, trans_b ? ek : en);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate)
            cm.noalias() += lhs * rhs;
        else
            cm.noalias() = lhs * rhs;
    };
    if (trans_a && trans_b)
        run(am.transpose(), bm.transpose());
    else if (trans_a)
        run(am.transpose(), bm);
    else if (trans_b)
        run(am, bm.transpose());
    else
        run(am, bm);
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

template <typename T>
AdamState<T>::AdamState(const AdamConfig& cfg, std::span<BasicTensor<T>* const> params) : config(cfg) {
    for (const auto* p : params) {
        first_moment.emplace_back(p->shape());
        second_moment.emplace_back(p->shape());
    }
}

template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads,
               AdamState<T>& state, double lr_scale) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size())
        throw ShapeError("adam_step: parameter/gradient/state block counts differ");
    for (std::size_t b = 0; b < params.size(); ++b)
        if (params[b]->shape() != grads[b]->shape() || params[b]->shape() != state.first_moment[b].shape())
            throw ShapeError("adam_step: shape mismatch in block " + std::to_string(b));
    ++state.step;
    const auto& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    const double lr = c.lr * lr_scale;
    for (std::size_t b = 0; b < params.size(); ++b) {
        T* p = params[b]->data();
        const T* g = grads[b]->data();
        T* m = state.first_moment[b].data();
        T* v = state.second_moment[b].data();
        const std::size_t n = params[b]->size();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
            p[i] = static_cast<T>(p[i] - update);
        }
    }
}

bool GradCheckReport::passed() const {
    return std::all_of(blocks.begin(), blocks.end(), [](const GradBlockReport& b) { return b.passed; });
}

double GradCheckReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
    return m;
}

GradCheckReport grad_check(std::span<const ParamBlockRef> blocks, const std::function<double()>& loss,
                           const GradCheckOptions& opts) {
    GradCheckReport report;
    report.tolerance = opts.tolerance;
    const double base = loss();
    if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");
    for (const auto& blk : blocks) {
        if (blk.value->shape() != blk.analytic_grad->shape())
            throw ShapeError("grad_check: gradient shape mismatch for " + blk.name);
        GradBlockReport r;
        r.name = blk.name;
        r.elements = blk.value->size();
        for (std::size_t i = 0; i < blk.value->size(); ++i) {
            double& x = (*blk.value)[i];
            const double saved = x;
            x = saved + opts.step;
            const double up = loss();
            x = saved - opts.step;
            const double down = loss();
            x = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss in " + blk.name);
            const double numeric = (up - down) / (2.0 * opts.step);
            const double analytic = (*blk.analytic_grad)[i];
            const double abs_err = std::abs(analytic - numeric);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.rel_floor});
            r.max_abs_error = std::max(r.max_abs_error, abs_err);
            r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
        }
        r.passed = r.max_rel_error < opts.tolerance;
        report.blocks.push_back(std::move(r));
    }
    return report;
}

#define HOPLAB_INSTANTIATE(T)                                                                                        \
    template void softmax_inplace<T>(std::span<T>, std::span<const T>);                                             \
    template std::vector<T> softmax<T>(std::span<const T>, std::span<const T>);                                     \
    template NormStats layer_norm<T>(std::span<const T>, std::span<const T>, std::span<const T>, double, std::span<T>); \
    template void layer_norm_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>, double,        \
                                         std::span<T>, std::span<T>, std::span<T>);                                \
    template double cross_entropy_loss<T>(std::span<const T>, int);                                                 \
    template void gemm<T>(const T*, bool, const T*, bool, T*, std::size_t, std::size_t, std::size_t, bool);          \
    template struct AdamState<T>;                                                                                   \
    template void adam_step<T>(std::span<BasicTensor<T>* const>, std::span<const BasicTensor<T>* const>,           \
                               AdamState<T>&, double);

HOPLAB_INSTANTIATE(float)
HOPLAB_INSTANTIATE(double)

#undef HOPLAB_INSTANTIATE

}  // namespace hoplab
