#pragma once

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "yieldgraph/layers.hpp"
#include "yieldgraph/tensor.hpp"

namespace yieldgraph {

/// Mean log(cosh(pred - target)) over unmasked entries; masked entries carry
/// neither loss nor gradient.
inline Tensor logcosh_loss(const Tensor& pred, const Tensor& target, const std::vector<bool>& mask) {
    if (pred.shape() != target.shape() || pred.rank() != 1 || mask.size() != pred.size()) {
        throw ShapeError("logcosh_loss shape mismatch: pred " + shape_str(pred.shape()) + ", target " +
                         shape_str(target.shape()) + ", mask " + std::to_string(mask.size()));
    }
    std::vector<double> weights(mask.size());
    std::size_t active = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        weights[i] = mask[i] ? 1.0 : 0.0;
        active += mask[i] ? 1 : 0;
    }
    if (active == 0) throw std::invalid_argument("logcosh_loss: every element is masked");
    const Tensor per_item = logcosh(sub(pred, target));
    return scale(sum(mul(per_item, Tensor::from(pred.shape(), std::move(weights)))), 1.0 / static_cast<double>(active));
}

inline Tensor logcosh_loss(const Tensor& pred, const Tensor& target) {
    return logcosh_loss(pred, target, std::vector<bool>(pred.size(), true));
}

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long step_count = 0;
    std::vector<std::vector<double>> m, v;
};

/// Bias-corrected Adam with L2 folded into the gradient (g + wd * param).
/// A non-finite gradient aborts the whole step before anything is written.
inline void adam_step(std::vector<Tensor>& params, AdamState& st) {
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto g = params[p].grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i])) {
                throw NumericalError("adam_step: non-finite gradient in parameter " + std::to_string(p) +
                                     " at index " + std::to_string(i));
            }
        }
    }
    if (st.m.size() != params.size()) {
        st.m.assign(params.size(), {});
        st.v.assign(params.size(), {});
        for (std::size_t p = 0; p < params.size(); ++p) {
            st.m[p].assign(params[p].size(), 0.0);
            st.v[p].assign(params[p].size(), 0.0);
        }
    }
    ++st.step_count;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (st.m[p].size() != params[p].size()) throw ShapeError("adam moment buffer does not match parameter");
        const auto g = params[p].grad();
        auto w = params[p].mutable_data();
        auto& m = st.m[p];
        auto& v = st.v[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] + st.weight_decay * w[i];
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= st.lr * mh / (std::sqrt(vh) + st.eps);
        }
    }
}

struct LrSchedule {
    enum class Kind { constant, step, cosine };
    Kind kind = Kind::constant;
    double lr_max = 1e-3;
    int step_period = 25;
    double gamma = 0.5;
    int t0 = 100;
    double eta_min = 1e-6;

    static LrSchedule constant(double lr) { return {Kind::constant, lr}; }
    static LrSchedule step(double lr, int period, double gamma) {
        LrSchedule s{Kind::step, lr};
        s.step_period = period;
        s.gamma = gamma;
        return s;
    }
    static LrSchedule cosine(double lr, int t0, double eta_min) {
        LrSchedule s{Kind::cosine, lr};
        s.t0 = t0;
        s.eta_min = eta_min;
        return s;
    }

    /// "constant", "step:<period>:<gamma>" or "cosine:<T0>:<eta_min>".
    static LrSchedule parse(const std::string& text, double lr) {
        std::vector<std::string> parts;
        std::stringstream ss(text);
        for (std::string tok; std::getline(ss, tok, ':');) parts.push_back(tok);
        try {
            if (parts.size() == 1 && parts[0] == "constant") return constant(lr);
            if (parts.size() == 3 && parts[0] == "step") return step(lr, std::stoi(parts[1]), std::stod(parts[2]));
            if (parts.size() == 3 && parts[0] == "cosine") return cosine(lr, std::stoi(parts[1]), std::stod(parts[2]));
        } catch (const std::logic_error&) {
        }
        throw std::invalid_argument("unrecognized learning-rate schedule '" + text + "'");
    }

    std::string str() const {
        std::ostringstream os;
        os.precision(17);
        switch (kind) {
            case Kind::constant: return "constant";
            case Kind::step: os << "step:" << step_period << ':' << gamma; break;
            case Kind::cosine: os << "cosine:" << t0 << ':' << eta_min; break;
        }
        return os.str();
    }
};

inline double lr_at(const LrSchedule& s, int epoch) {
    if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
    switch (s.kind) {
        case LrSchedule::Kind::constant: return s.lr_max;
        case LrSchedule::Kind::step: return s.lr_max * std::pow(s.gamma, epoch / s.step_period);
        case LrSchedule::Kind::cosine: {
            const double phase = static_cast<double>(epoch % s.t0) / static_cast<double>(s.t0);
            return s.eta_min + (s.lr_max - s.eta_min) * (1.0 + std::cos(std::numbers::pi * phase)) / 2.0;
        }
    }
    return s.lr_max;
}

} // namespace yieldgraph
