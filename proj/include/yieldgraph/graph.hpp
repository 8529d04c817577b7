#pragma once

// County adjacency graph and GraphSAGE message passing with fanout-limited
// neighbor sampling.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "yieldgraph/layers.hpp"
#include "yieldgraph/random.hpp"
#include "yieldgraph/tensor.hpp"

namespace yieldgraph {

class GraphError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Undirected county adjacency. Node indices follow node_ids order; neighbor
/// lists are sorted ascending and never contain the node itself.
class CountyGraph {
public:
    CountyGraph() = default;

    CountyGraph(std::vector<std::string> ids, const std::vector<std::pair<std::size_t, std::size_t>>& edges)
        : ids_(std::move(ids)), adj_(ids_.size()) {
        for (std::size_t i = 0; i < ids_.size(); ++i) {
            if (!index_.emplace(ids_[i], i).second) throw GraphError("duplicate county id " + ids_[i]);
        }
        std::vector<std::set<std::size_t>> sets(ids_.size());
        for (auto [a, b] : edges) {
            if (a >= ids_.size() || b >= ids_.size()) throw GraphError("edge endpoint out of range");
            if (a == b) continue;
            sets[a].insert(b);
            sets[b].insert(a);
        }
        for (std::size_t i = 0; i < ids_.size(); ++i) adj_[i].assign(sets[i].begin(), sets[i].end());
    }

    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& node_ids() const { return ids_; }
    const std::string& id(std::size_t i) const { return ids_.at(i); }
    const std::vector<std::size_t>& neighbors(std::size_t i) const { return adj_.at(i); }

    std::optional<std::size_t> find(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t index_of(const std::string& id) const {
        auto i = find(id);
        if (!i) throw GraphError("unknown county id " + id);
        return *i;
    }

    std::size_t edge_count() const {
        std::size_t n = 0;
        for (const auto& a : adj_) n += a.size();
        return n / 2;
    }

    std::size_t max_degree() const {
        std::size_t m = 0;
        for (const auto& a : adj_) m = std::max(m, a.size());
        return m;
    }

    bool has_edge(std::size_t a, std::size_t b) const {
        return std::binary_search(adj_.at(a).begin(), adj_.at(a).end(), b);
    }

    /// Same graph with nodes stored in a different order (perm[new] = old).
    CountyGraph permuted(const std::vector<std::size_t>& perm) const {
        std::vector<std::size_t> inv(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
        std::vector<std::string> ids;
        for (std::size_t p : perm) ids.push_back(ids_[p]);
        std::vector<std::pair<std::size_t, std::size_t>> edges;
        for (std::size_t a = 0; a < size(); ++a)
            for (std::size_t b : adj_[a]) if (a < b) edges.emplace_back(inv[a], inv[b]);
        return CountyGraph(std::move(ids), edges);
    }

private:
    std::vector<std::string> ids_;
    std::map<std::string, std::size_t> index_;
    std::vector<std::vector<std::size_t>> adj_;
};

/// Parses the adjacency edge list: `A<TAB>B` per line, `#` comments, an
/// optional `county_a<TAB>county_b` header, and single-id lines declaring
/// isolated counties. With a universe, node order follows it and ids outside
/// it are rejected; otherwise nodes are the sorted set of ids in the file.
inline CountyGraph parse_graph(std::istream& in, const std::string& source = "adjacency",
                               const std::vector<std::string>* universe = nullptr) {
    std::vector<std::pair<std::string, std::string>> edges;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    bool any = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; ss >> f;) fields.push_back(f);
        if (fields.empty()) continue;
        if (!any && fields.size() == 2 && fields[0] == "county_a" && fields[1] == "county_b") {
            any = true;
            continue;
        }
        any = true;
        if (fields.size() > 2) {
            throw GraphError(source + ":" + std::to_string(lineno) + ": expected `A<TAB>B`, got " +
                             std::to_string(fields.size()) + " fields");
        }
        for (const auto& f : fields) seen.insert(f);
        if (fields.size() == 2) edges.emplace_back(fields[0], fields[1]);
    }
    if (!any || (seen.empty() && (universe == nullptr || universe->empty()))) {
        throw GraphError(source + ": adjacency file is empty");
    }
    std::vector<std::string> ids = universe ? *universe : std::vector<std::string>(seen.begin(), seen.end());
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;
    for (const auto& id : seen) {
        if (!index.count(id)) throw GraphError(source + ": unknown county id " + id + " in adjacency");
    }
    std::vector<std::pair<std::size_t, std::size_t>> idx_edges;
    for (const auto& [a, b] : edges) idx_edges.emplace_back(index[a], index[b]);
    return CountyGraph(std::move(ids), idx_edges);
}

inline CountyGraph load_graph(const std::string& path, const std::vector<std::string>* universe = nullptr) {
    std::ifstream in(path);
    if (!in) throw GraphError("cannot open adjacency file " + path);
    return parse_graph(in, path, universe);
}

inline void write_graph(std::ostream& out, const CountyGraph& g) {
    out << "county_a\tcounty_b\n";
    for (std::size_t a = 0; a < g.size(); ++a) {
        if (g.neighbors(a).empty()) out << g.id(a) << '\n';
        for (std::size_t b : g.neighbors(a))
            if (a < b) out << g.id(a) << '\t' << g.id(b) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// One message-passing hop. src_nodes lists graph indices whose embeddings
/// enter the layer; the first num_dst of them are the nodes it produces.
/// neighbors[i] holds positions into src_nodes, ordered by graph index.
struct BlockLayer {
    std::vector<std::size_t> src_nodes;
    std::size_t num_dst = 0;
    std::vector<std::vector<std::size_t>> neighbors;
};

/// layers[0] consumes base embeddings; layers.back() produces the seeds.
struct SampledBlock {
    std::vector<std::size_t> seeds;
    std::vector<BlockLayer> layers;
    std::uint64_t rng_seed = 0;

    const std::vector<std::size_t>& input_nodes() const { return layers.front().src_nodes; }
};

struct SamplerOptions {
    std::size_t fanout = 10;
    std::size_t layers = 2;
    double edge_dropout = 0.0;
    /// Restricts message sources (e.g. counties that have features for every needed year).
    std::function<bool(std::size_t)> available;
};

/// Per layer, per destination node: drop each incident edge with probability
/// edge_dropout, then keep min(fanout, remaining) neighbors drawn without replacement.
inline SampledBlock sample_block(const CountyGraph& g, const std::vector<std::size_t>& seeds,
                                 const SamplerOptions& opt, std::uint64_t rng_seed) {
    if (seeds.empty()) throw std::invalid_argument("sample_block needs at least one seed");
    if (!(opt.edge_dropout >= 0.0 && opt.edge_dropout < 1.0)) {
        throw std::invalid_argument("edge_dropout must be in [0, 1)");
    }
    if (opt.layers == 0) throw std::invalid_argument("sample_block needs at least one layer");
    Rng rng(rng_seed);
    SampledBlock block;
    block.seeds = seeds;
    block.rng_seed = rng_seed;
    block.layers.resize(opt.layers);
    std::vector<std::size_t> frontier = seeds;
    for (std::size_t l = opt.layers; l-- > 0;) {
        BlockLayer& layer = block.layers[l];
        layer.num_dst = frontier.size();
        std::map<std::size_t, std::size_t> pos;
        for (std::size_t i = 0; i < frontier.size(); ++i) pos.emplace(frontier[i], i);
        std::vector<std::vector<std::size_t>> picked(frontier.size());
        std::set<std::size_t> fresh;
        for (std::size_t i = 0; i < frontier.size(); ++i) {
            std::vector<std::size_t> cand;
            for (std::size_t nb : g.neighbors(frontier[i])) {
                if (opt.available && !opt.available(nb)) continue;
                if (opt.edge_dropout > 0.0 && rng.uniform() < opt.edge_dropout) continue;
                cand.push_back(nb);
            }
            if (cand.size() > opt.fanout) {
                for (std::size_t k = 0; k < opt.fanout; ++k) std::swap(cand[k], cand[k + rng.below(cand.size() - k)]);
                cand.resize(opt.fanout);
                std::sort(cand.begin(), cand.end());
            }
            for (std::size_t nb : cand)
                if (!pos.count(nb)) fresh.insert(nb);
            picked[i] = std::move(cand);
        }
        layer.src_nodes = frontier;
        for (std::size_t nb : fresh) {
            pos.emplace(nb, layer.src_nodes.size());
            layer.src_nodes.push_back(nb);
        }
        layer.neighbors.resize(frontier.size());
        for (std::size_t i = 0; i < frontier.size(); ++i)
            for (std::size_t nb : picked[i]) layer.neighbors[i].push_back(pos.at(nb));
        frontier = layer.src_nodes;
    }
    return block;
}

/// Every neighbor, no dropout (inference).
inline SampledBlock full_block(const CountyGraph& g, const std::vector<std::size_t>& seeds, std::size_t layers = 2,
                               std::function<bool(std::size_t)> available = {}) {
    SamplerOptions opt;
    opt.fanout = std::max<std::size_t>(g.max_degree(), 1);
    opt.layers = layers;
    opt.available = std::move(available);
    return sample_block(g, seeds, opt, 0);
}

// ---------------------------------------------------------------------------
// GraphSAGE

enum class Aggregator { mean, pool };

inline Aggregator parse_aggregator(const std::string& s) {
    if (s == "mean") return Aggregator::mean;
    if (s == "pool") return Aggregator::pool;
    throw std::invalid_argument("unknown aggregator '" + s + "' (expected mean or pool)");
}

inline std::string to_string(Aggregator a) { return a == Aggregator::mean ? "mean" : "pool"; }

/// Aggregates rows of embeddings[n x d] listed in neighbors. pool takes the
/// elementwise max of relu(transform(row)), or of the raw rows when transform is null.
/// An empty neighbor list aggregates to zeros.
inline Tensor aggregate_neighbors(const Tensor& embeddings, const std::vector<std::size_t>& neighbors, Aggregator agg,
                                  const Dense* pool_transform = nullptr) {
    Tensor src = embeddings;
    if (agg == Aggregator::pool && pool_transform) src = relu(pool_transform->forward(embeddings));
    const auto op = agg == Aggregator::mean ? SegmentReduce::mean : SegmentReduce::max;
    return reshape(segment_reduce(op, src, {neighbors}), {src.dim(1)});
}

/// z' = relu(W (z_self, a)) with a = g({z_neighbor}).
class SageLayer {
public:
    SageLayer() = default;
    SageLayer(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Aggregator agg, Rng& rng)
        : agg_(agg), in_(in), out_(out) {
        if (agg == Aggregator::pool) pool_ = Dense(ps, name + ".pool", in, in, rng);
        w_ = Dense(ps, name + ".w", 2 * in, out, rng);
    }

    /// h_src[n_src x in] -> [num_dst x out].
    Tensor forward(const BlockLayer& layer, const Tensor& h_src) const {
        if (h_src.rank() != 2 || h_src.dim(1) != in_ || h_src.dim(0) != layer.src_nodes.size()) {
            throw ShapeError("sage layer expects [" + std::to_string(layer.src_nodes.size()) + "x" +
                             std::to_string(in_) + "] input, got " + shape_str(h_src.shape()));
        }
        const Tensor self_part = h_src.dim(0) == layer.num_dst ? h_src : slice(h_src, 0, 0, layer.num_dst);
        Tensor messages = h_src;
        if (agg_ == Aggregator::pool) messages = relu(pool_.forward(h_src));
        const auto op = agg_ == Aggregator::mean ? SegmentReduce::mean : SegmentReduce::max;
        const Tensor aggregated = segment_reduce(op, messages, layer.neighbors);
        return relu(w_.forward(concat({self_part, aggregated}, 1)));
    }

    Aggregator aggregator() const { return agg_; }
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }
    const Dense& weight() const { return w_; }
    const Dense& pool_transform() const { return pool_; }

private:
    Aggregator agg_ = Aggregator::mean;
    std::size_t in_ = 0, out_ = 0;
    Dense pool_, w_;
};

/// Two-hop (or deeper) message passing. base[n_input x d] rows follow block.input_nodes().
inline Tensor gnn_forward(const std::vector<SageLayer>& stack, const SampledBlock& block, const Tensor& base) {
    if (stack.size() != block.layers.size()) {
        throw std::invalid_argument("gnn_forward: block has " + std::to_string(block.layers.size()) +
                                    " layers but the stack has " + std::to_string(stack.size()));
    }
    Tensor h = base;
    for (std::size_t l = 0; l < stack.size(); ++l) h = stack[l].forward(block.layers[l], h);
    return h;
}

} // namespace yieldgraph
