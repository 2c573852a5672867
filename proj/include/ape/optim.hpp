#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace ape {

template <typename T>
struct AdamWConfig {
    T lr = T(3e-4);
    T weight_decay = T(1e-6);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T clip = T(1.0); // global gradient norm; <= 0 disables clipping
};

/// Decoupled-weight-decay Adam over a list of parameter buffers.
/// Moment buffers and the step counter are part of the optimizer state and
/// must be checkpointed for exact resume.
template <typename T>
class AdamW {
public:
    AdamWConfig<T> cfg;
    std::int64_t step_count = 0;
    std::vector<std::vector<T>> m, v;

    void init(const std::vector<std::vector<T>*>& params) {
        m.clear();
        v.clear();
        for (const auto* p : params) {
            m.emplace_back(p->size(), T(0));
            v.emplace_back(p->size(), T(0));
        }
        step_count = 0;
    }

    static T global_norm(const std::vector<std::vector<T>*>& grads) {
        double acc = 0;
        for (const auto* g : grads)
            for (const T x : *g) acc += double(x) * double(x);
        return T(std::sqrt(acc));
    }

    /// Clips gradients in place to cfg.clip and applies one update.
    /// Returns the gradient norm after clipping.
    T step(const std::vector<std::vector<T>*>& params,
           const std::vector<std::vector<T>*>& grads) {
        if (params.size() != grads.size() || params.size() != m.size())
            throw std::invalid_argument("AdamW: parameter/gradient list mismatch");
        const T pre_norm = global_norm(grads);
        T post_norm = pre_norm;
        if (cfg.clip > T(0) && pre_norm > cfg.clip) {
            const T scale = cfg.clip / pre_norm;
            for (auto* g : grads)
                for (T& x : *g) x *= scale;
            post_norm = cfg.clip;
        }

        ++step_count;
        const T bc1 = T(1) - std::pow(cfg.beta1, T(step_count));
        const T bc2 = T(1) - std::pow(cfg.beta2, T(step_count));
        for (std::size_t b = 0; b < params.size(); ++b) {
            std::vector<T>& p = *params[b];
            const std::vector<T>& g = *grads[b];
            if (p.size() != g.size() || p.size() != m[b].size())
                throw std::invalid_argument("AdamW: buffer size mismatch");
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[b][i] = cfg.beta1 * m[b][i] + (T(1) - cfg.beta1) * g[i];
                v[b][i] = cfg.beta2 * v[b][i] + (T(1) - cfg.beta2) * g[i] * g[i];
                const T mhat = m[b][i] / bc1;
                const T vhat = v[b][i] / bc2;
                p[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
            }
        }
        return post_norm;
    }
};

} // namespace ape
