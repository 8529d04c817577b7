#pragma once

// Dense brute-force GraphSAGE: every node, every neighbor, plain loops over the
// full adjacency. Summation order matches the tensor kernels (ascending index,
// starting from zero, bias last) so results can be compared bit for bit.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "yieldgraph/graph.hpp"

namespace yieldgraph::testing {

inline double relu_value(double v) { return v > 0.0 ? v : 0.0; }

/// y = x * W^T + b for one row.
inline std::vector<double> dense_row(const std::vector<double>& x, const Dense& d) {
    const auto& w = d.weight().values();
    const auto& b = d.bias().values();
    const std::size_t in = d.in_features(), out = d.out_features();
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
        double s = 0.0;
        for (std::size_t k = 0; k < in; ++k) s += x[k] * w[o * in + k];
        y[o] = s + b[o];
    }
    return y;
}

/// z[N][d] over the whole graph -> z'[N][out].
inline std::vector<std::vector<double>> dense_sage_layer(const CountyGraph& g, const SageLayer& layer,
                                                         const std::vector<std::vector<double>>& z) {
    const std::size_t n = g.size(), d = layer.in_features();
    std::vector<std::vector<double>> msg = z;
    if (layer.aggregator() == Aggregator::pool) {
        for (auto& row : msg) {
            row = dense_row(row, layer.pool_transform());
            for (auto& v : row) v = relu_value(v);
        }
    }
    std::vector<std::vector<double>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> agg(d, 0.0);
        const auto& nb = g.neighbors(i);
        if (layer.aggregator() == Aggregator::mean) {
            for (std::size_t j : nb)
                for (std::size_t k = 0; k < d; ++k) agg[k] += msg[j][k];
            if (!nb.empty())
                for (auto& v : agg) v = v / static_cast<double>(nb.size());
        } else if (!nb.empty()) {
            agg = msg[nb.front()];
            for (std::size_t j : nb)
                for (std::size_t k = 0; k < d; ++k)
                    if (msg[j][k] > agg[k]) agg[k] = msg[j][k];
        }
        std::vector<double> cat = z[i];
        cat.insert(cat.end(), agg.begin(), agg.end());
        out[i] = dense_row(cat, layer.weight());
        for (auto& v : out[i]) v = relu_value(v);
    }
    return out;
}

inline std::vector<std::vector<double>> dense_gnn(const CountyGraph& g, const std::vector<SageLayer>& stack,
                                                  std::vector<std::vector<double>> z) {
    for (const auto& layer : stack) z = dense_sage_layer(g, layer, z);
    return z;
}

/// Sampled forward with full fanout and no dropout for the given seeds.
inline std::vector<double> sampled_gnn(const CountyGraph& g, const std::vector<SageLayer>& stack,
                                       const std::vector<std::vector<double>>& z, const std::vector<std::size_t>& seeds) {
    const SampledBlock block = full_block(g, seeds, stack.size());
    const std::size_t d = z.front().size();
    std::vector<double> base;
    for (std::size_t node : block.input_nodes()) base.insert(base.end(), z[node].begin(), z[node].end());
    return gnn_forward(stack, block, Tensor::from({block.input_nodes().size(), d}, std::move(base))).values();
}

/// Bitmask over the n(n-1)/2 vertex pairs -> edge list.
inline std::vector<std::pair<std::size_t, std::size_t>> edges_from_mask(std::size_t n, std::uint32_t mask) {
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    std::size_t bit = 0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b, ++bit)
            if (mask >> bit & 1u) edges.emplace_back(a, b);
    return edges;
}

inline bool connected(const CountyGraph& g) {
    std::vector<bool> seen(g.size(), false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    std::size_t count = 1;
    while (!stack.empty()) {
        const std::size_t v = stack.back();
        stack.pop_back();
        for (std::size_t u : g.neighbors(v))
            if (!seen[u]) {
                seen[u] = true;
                ++count;
                stack.push_back(u);
            }
    }
    return count == g.size();
}

} // namespace yieldgraph::testing
