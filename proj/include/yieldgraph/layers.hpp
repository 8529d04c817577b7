#pragma once

// Building blocks: named parameter storage, dense layers, 1-D convolution
// stacks for the weekly and soil encoders, LSTM/GRU cells and dropout.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "yieldgraph/random.hpp"
#include "yieldgraph/tensor.hpp"

namespace yieldgraph {

/// Ordered registry of trainable tensors keyed by layer path.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, t);
        return t;
    }

    /// uniform(-a, a) with a = sqrt(1 / fan_in).
    Tensor add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
        const double a = gain * std::sqrt(1.0 / static_cast<double>(fan_in));
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = rng.uniform(-a, a);
        return add(name, Tensor::from(std::move(shape), std::move(v), true));
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return entries_[it->second].second;
    }

    std::size_t count_values() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

    /// Overwrites every parameter value (shapes must match).
    void load_values(const std::string& name, const std::vector<double>& values) {
        Tensor& t = at(name);
        if (values.size() != t.size()) {
            throw ShapeError("parameter " + name + " expects " + std::to_string(t.size()) + " values, got " +
                             std::to_string(values.size()));
        }
        auto dst = t.mutable_data();
        std::copy(values.begin(), values.end(), dst.begin());
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

class Dense {
public:
    Dense() = default;
    Dense(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
        : in_(in), out_(out) {
        // He-uniform: keeps activations from shrinking through stacked relu layers.
        weight_ = ps.add_uniform(name + ".weight", {out, in}, in, rng, std::sqrt(6.0));
        bias_ = ps.add_uniform(name + ".bias", {out}, in, rng);
    }

    Tensor forward(const Tensor& x) const { return linear(x, weight_, bias_); }

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }
    const Tensor& weight() const { return weight_; }
    const Tensor& bias() const { return bias_; }

private:
    std::size_t in_ = 0, out_ = 0;
    Tensor weight_, bias_;
};

struct ConvBlockSpec {
    std::size_t out_channels;
    std::size_t kernel;
    bool pool;
};

/// conv -> relu -> (avg_pool 2) repeated per block.
class Conv1dStack {
public:
    Conv1dStack() = default;
    Conv1dStack(ParamStore& ps, const std::string& name, std::size_t in_channels,
                const std::vector<ConvBlockSpec>& blocks, Rng& rng)
        : specs_(blocks), in_channels_(in_channels) {
        std::size_t c = in_channels;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            const std::string p = name + ".conv" + std::to_string(i);
            const std::size_t fan_in = c * b.kernel;
            weights_.push_back(ps.add_uniform(p + ".weight", {b.out_channels, c, b.kernel}, fan_in, rng, std::sqrt(6.0)));
            biases_.push_back(ps.add_uniform(p + ".bias", {b.out_channels}, fan_in, rng));
            c = b.out_channels;
        }
    }

    Tensor forward(Tensor x) const {
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            x = relu(conv1d(x, weights_[i], biases_[i]));
            if (specs_[i].pool) x = avg_pool1d(x, 2);
        }
        return x;
    }

    /// Output length for a given input length (throws when the plan does not fit).
    std::size_t output_length(std::size_t len) const {
        for (const auto& b : specs_) {
            if (len < b.kernel) throw ShapeError("convolution plan does not fit input length");
            len = len - b.kernel + 1;
            if (b.pool) {
                if (len < 2) throw ShapeError("convolution plan does not fit input length");
                len /= 2;
            }
        }
        return len;
    }

    std::size_t out_channels() const { return specs_.empty() ? in_channels_ : specs_.back().out_channels; }
    const std::vector<ConvBlockSpec>& blocks() const { return specs_; }

private:
    std::vector<ConvBlockSpec> specs_;
    std::size_t in_channels_ = 0;
    std::vector<Tensor> weights_, biases_;
};

enum class CellKind { lstm, gru };

/// Standard LSTM (gate order i, f, g, o) or GRU (r, z, n) cell.
class RecurrentCell {
public:
    RecurrentCell() = default;
    RecurrentCell(ParamStore& ps, const std::string& name, CellKind kind, std::size_t input_size,
                  std::size_t hidden_size, Rng& rng)
        : kind_(kind), input_(input_size), hidden_(hidden_size) {
        const std::size_t gates = (kind == CellKind::lstm ? 4 : 3) * hidden_size;
        w_ih_ = ps.add_uniform(name + ".w_ih", {gates, input_size}, input_size, rng);
        w_hh_ = ps.add_uniform(name + ".w_hh", {gates, hidden_size}, hidden_size, rng);
        b_ih_ = ps.add_uniform(name + ".b_ih", {gates}, hidden_size, rng);
        b_hh_ = ps.add_uniform(name + ".b_hh", {gates}, hidden_size, rng);
        if (kind == CellKind::lstm) {
            // forget gate starts open: b_ih + b_hh = 1 on the f block
            auto bi = b_ih_.mutable_data();
            auto bh = b_hh_.mutable_data();
            for (std::size_t j = hidden_size; j < 2 * hidden_size; ++j) {
                bi[j] = 1.0;
                bh[j] = 0.0;
            }
        }
    }

    struct State {
        Tensor h, c;
    };

    State zero_state(std::size_t batch) const {
        return {Tensor::zeros({batch, hidden_}), Tensor::zeros({batch, hidden_})};
    }

    State step(const Tensor& x, const State& s) const {
        if (x.rank() != 2 || x.dim(1) != input_) {
            throw ShapeError("recurrent cell expects input width " + std::to_string(input_) + ", got " +
                             shape_str(x.shape()));
        }
        const std::size_t h = hidden_;
        const Tensor gi = linear(x, w_ih_, b_ih_);
        const Tensor gh = linear(s.h, w_hh_, b_hh_);
        if (kind_ == CellKind::lstm) {
            const Tensor g = add(gi, gh);
            const Tensor i = sigmoid(slice(g, 1, 0, h));
            const Tensor f = sigmoid(slice(g, 1, h, 2 * h));
            const Tensor cand = tanh(slice(g, 1, 2 * h, 3 * h));
            const Tensor o = sigmoid(slice(g, 1, 3 * h, 4 * h));
            const Tensor c = add(mul(f, s.c), mul(i, cand));
            return {mul(o, tanh(c)), c};
        }
        const Tensor r = sigmoid(add(slice(gi, 1, 0, h), slice(gh, 1, 0, h)));
        const Tensor z = sigmoid(add(slice(gi, 1, h, 2 * h), slice(gh, 1, h, 2 * h)));
        const Tensor n = tanh(add(slice(gi, 1, 2 * h, 3 * h), mul(r, slice(gh, 1, 2 * h, 3 * h))));
        const Tensor keep = add_scalar(scale(z, -1.0), 1.0);
        return {add(mul(keep, n), mul(z, s.h)), s.c};
    }

    CellKind kind() const { return kind_; }
    std::size_t input_size() const { return input_; }
    std::size_t hidden_size() const { return hidden_; }

private:
    CellKind kind_ = CellKind::lstm;
    std::size_t input_ = 0, hidden_ = 0;
    Tensor w_ih_, w_hh_, b_ih_, b_hh_;
};

/// Runs the cell over the sequence from a zero state and returns the last hidden state.
inline Tensor rnn_forward(const RecurrentCell& cell, const std::vector<Tensor>& sequence) {
    if (sequence.empty()) throw std::invalid_argument("rnn_forward on an empty sequence");
    const Shape& s0 = sequence.front().shape();
    for (const auto& x : sequence) {
        if (x.shape() != s0) throw ShapeError("rnn_forward sequence steps differ in shape");
    }
    auto state = cell.zero_state(s0.at(0));
    for (const auto& x : sequence) state = cell.step(x, state);
    return state.h;
}

/// Inverted dropout: survivors are scaled by 1/(1-p); identity at inference.
inline Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout probability must be in [0, 1)");
    if (!training || p == 0.0) return x;
    std::vector<double> mask(x.size());
    const double keep = 1.0 / (1.0 - p);
    for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep;
    return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

} // namespace yieldgraph
