#pragma once

#include "mmri/layers.hpp"

namespace mmri {

// AdamW with decoupled weight decay applied to every trainable tensor.
template <typename T>
class AdamW {
public:
    AdamW(ParamStore<T>& params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : params_(params), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& p : params_.params()) {
            m_.emplace_back(p.var->value.shape());
            v_.emplace_back(p.var->value.shape());
        }
    }

    void zero_grad() {
        for (const auto& p : params_.params()) p.var->clear_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        const auto& ps = params_.params();
        for (size_t k = 0; k < ps.size(); ++k) {
            auto& node = *ps[k].var;
            Tensor<T>& m = m_[k];
            Tensor<T>& v = v_[k];
            T* theta = node.value.data();
            const T* g = node.has_grad ? node.grad.data() : nullptr;
            parallel_for(node.value.size(), [&](int64_t i) {
                const double gi = g ? static_cast<double>(g[i]) : 0.0;
                const double mi = b1_ * static_cast<double>(m[i]) + (1.0 - b1_) * gi;
                const double vi = b2_ * static_cast<double>(v[i]) + (1.0 - b2_) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_) + wd_ * static_cast<double>(theta[i]);
                theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr_ * update);
            }, 16384);
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    ParamStore<T>& params_;
    double lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

} // namespace mmri
