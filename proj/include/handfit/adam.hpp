#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "handfit/tape.hpp"

namespace handfit::diff {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter first/second moment state. Each Param carries its own step
// counter so sparsely-updated parameters get correct bias correction.
class AdamState {
public:
    AdamConfig cfg;

    AdamState() = default;
    explicit AdamState(AdamConfig c) : cfg(c) {}

    struct Slot {
        Tensor m, v;
        std::int64_t step = 0;
    };

    // One Adam update for each param from its accumulated gradient.
    // Gradients are left untouched; the caller zeroes them.
    void step(std::span<Param* const> params) {
        for (Param* p : params) {
            if (!p->requires_grad) continue;
            Slot& s = slot(*p);
            s.step += 1;
            const double b1 = cfg.beta1, b2 = cfg.beta2;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad[i];
                s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
                s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
                const double mhat = s.m[i] / c1;
                const double vhat = s.v[i] / c2;
                p->value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }

    void step(std::initializer_list<Param*> params) {
        std::vector<Param*> v(params);
        step(std::span<Param* const>(v.data(), v.size()));
    }

    Slot& slot(Param& p) {
        auto it = slots_.find(&p);
        if (it == slots_.end()) {
            Slot s;
            s.m = Tensor::zeros(p.value.shape());
            s.v = Tensor::zeros(p.value.shape());
            it = slots_.emplace(&p, std::move(s)).first;
        }
        return it->second;
    }

    bool has_slot(const Param& p) const { return slots_.count(const_cast<Param*>(&p)) > 0; }

private:
    std::unordered_map<Param*, Slot> slots_;
};

}  // namespace handfit::diff
