// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// The synthetic benchmark goes through the CLI binary and takes 7-16 minutes
// on one core; `--quick` leaves it out.

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "gradcheck.hpp"
#include "metric_oracle.hpp"
#include "toy_models.hpp"
#include "yieldgraph/evaluation.hpp"
#include "yieldgraph/geo.hpp"
#include "yieldgraph/optim.hpp"

using namespace yieldgraph;
using namespace yieldgraph::testing;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string num(double v, int digits = 4) {
    std::ostringstream os;
    os << std::setprecision(digits) << v;
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = "'" YIELDGRAPH_CLI_PATH "' " + args + " >'" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Finite differences over parameters and inputs together

/// Worst relative error of backward() against central differences. Every
/// coordinate is checked when there are at most `budget` of them, otherwise a
/// random subset; two random directional derivatives cover the rest.
double fd_worst(ParamStore* ps, const std::vector<Tensor>& inputs, const LossFn& f, Rng& rng, std::size_t budget = 60) {
    // h = 1e-5 straddles ReLU / max-pool kinks in the wide encoders often
    // enough to matter; 1e-7 starts losing digits to cancellation.
    const double h = 1e-6, floor = 1e-3;
    std::vector<Tensor> leaves;
    for (const auto& t : inputs) leaves.push_back(t.detach(true));
    if (ps) ps->zero_grad();
    backward(f(leaves));

    std::vector<std::string> names;
    std::vector<std::vector<double>> base, analytic;
    if (ps) {
        for (const auto& [name, t] : ps->entries()) {
            names.push_back(name);
            base.push_back(t.values());
            analytic.push_back(t.grad());
        }
    }
    const std::size_t np = base.size();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        base.push_back(inputs[i].values());
        analytic.push_back(leaves[i].grad());
    }
    const auto eval = [&](const std::vector<std::vector<double>>& vals) {
        for (std::size_t k = 0; k < np; ++k) ps->load_values(names[k], vals[k]);
        std::vector<Tensor> xs;
        for (std::size_t i = 0; i < inputs.size(); ++i) xs.push_back(Tensor::from(inputs[i].shape(), vals[np + i]));
        return f(xs).item();
    };
    const auto rel = [&](double a, double n) { return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor}); };

    std::vector<std::pair<std::size_t, std::size_t>> slots;
    for (std::size_t k = 0; k < base.size(); ++k)
        for (std::size_t j = 0; j < base[k].size(); ++j) slots.emplace_back(k, j);
    if (slots.size() > budget) {
        for (std::size_t i = 0; i < budget; ++i) std::swap(slots[i], slots[i + rng.below(slots.size() - i)]);
        slots.resize(budget);
    }
    double worst = 0.0;
    auto vals = base;
    for (const auto& [k, j] : slots) {
        vals[k][j] = base[k][j] + h;
        const double up = eval(vals);
        vals[k][j] = base[k][j] - h;
        const double down = eval(vals);
        vals[k][j] = base[k][j];
        worst = std::max(worst, rel(analytic[k][j], (up - down) / (2 * h)));
    }
    for (int d = 0; d < 2; ++d) {
        auto dir = base;
        double dot = 0.0;
        for (std::size_t k = 0; k < base.size(); ++k)
            for (std::size_t j = 0; j < base[k].size(); ++j) {
                dir[k][j] = rng.uniform(-1.0, 1.0);
                dot += dir[k][j] * analytic[k][j];
            }
        auto up = base, down = base;
        for (std::size_t k = 0; k < base.size(); ++k)
            for (std::size_t j = 0; j < base[k].size(); ++j) {
                up[k][j] += h * dir[k][j];
                down[k][j] -= h * dir[k][j];
            }
        worst = std::max(worst, rel(dot, (eval(up) - eval(down)) / (2 * h)));
    }
    if (ps)
        for (std::size_t k = 0; k < np; ++k) ps->load_values(names[k], base[k]);
    return worst;
}

EncoderPlan toy_plan() {
    EncoderPlan plan;
    plan.weekly = {{4, 7, true}, {4, 3, true}, {4, 3, true}, {4, 3, true}};
    plan.soil = {{3, 2, false}, {3, 2, false}, {3, 2, false}};
    plan.weekly_dim = 5;
    plan.soil_dim = 4;
    return plan;
}

void gradient_criterion() {
    const auto t0 = std::chrono::steady_clock::now();
    const int seeds = 100;
    double ops = 0.0, layers = 0.0, unrolls = 0.0, models = 0.0;
    using Op = std::function<Tensor(const std::vector<Tensor>&, std::uint64_t)>;
    const std::vector<std::pair<std::vector<Shape>, Op>> op_cases = {
        {{{3, 4}, {3, 4}}, [](auto& in, auto s) { return probe_sum(add(in[0], in[1]), s); }},
        {{{3, 4}, {3, 4}}, [](auto& in, auto s) { return probe_sum(sub(in[0], in[1]), s); }},
        {{{3, 4}, {3, 4}}, [](auto& in, auto s) { return probe_sum(mul(in[0], in[1]), s); }},
        {{{7}}, [](auto& in, auto s) { return probe_sum(tanh(in[0]), s); }},
        {{{7}}, [](auto& in, auto s) { return probe_sum(sigmoid(in[0]), s); }},
        {{{7}}, [](auto& in, auto s) { return probe_sum(relu(in[0]), s); }},
        {{{7}}, [](auto& in, auto s) { return probe_sum(exp(in[0]), s); }},
        {{{7}}, [](auto& in, auto s) { return probe_sum(logcosh(in[0]), s); }},
        {{{3, 4, 2}}, [](auto& in, auto s) { return probe_sum(reduce(Reduce::mean, in[0], 1), s); }},
        {{{3, 4, 2}}, [](auto& in, auto s) { return probe_sum(reduce(Reduce::max, in[0], 0), s); }},
        {{{3, 5}, {5, 4}}, [](auto& in, auto s) { return probe_sum(matmul(in[0], in[1]), s); }},
        {{{2, 3}, {2, 2}}, [](auto& in, auto s) { return probe_sum(concat({in[0], in[1]}, 1), s); }},
        {{{2, 3, 9}, {4, 3, 3}, {4}}, [](auto& in, auto s) { return probe_sum(conv1d(in[0], in[1], in[2]), s); }},
        {{{2, 3, 9}}, [](auto& in, auto s) { return probe_sum(avg_pool1d(in[0], 2), s); }},
        {{{5, 3}}, [](auto& in, auto s) { return probe_sum(segment_reduce(SegmentReduce::mean, in[0], {{0, 1}, {}, {2, 3, 4}}), s); }},
        {{{5, 3}}, [](auto& in, auto s) { return probe_sum(segment_reduce(SegmentReduce::max, in[0], {{0, 1}, {4}, {2, 3, 4}}), s); }},
        {{{6}, {6}}, [](auto& in, auto) { return logcosh_loss(in[0], in[1]); }},
    };
    Dataset raw = generate_synthetic({9, 8, 3, 2000, 1, 0.0});
    const YearSplit split = make_split(raw.years, 2007);
    const Dataset ds = normalize(raw, split).first;
    const FeatureSource src{&ds, nullptr};
    const CountyGraph grid = grid_graph(3);

    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        Rng rng(seed * 7919 + 1);
        for (const auto& [shapes, op] : op_cases) {
            std::vector<Tensor> in;
            for (const auto& s : shapes) in.push_back(random_tensor(s, rng));
            ops = std::max(ops, fd_worst(nullptr, in, [&](const auto& xs) { return op(xs, seed); }, rng));
        }
        {
            ParamStore ps;
            const Dense d(ps, "d", 6, 3, rng);
            const Conv1dStack c(ps, "c", 3, {{4, 3, true}, {2, 2, false}}, rng);
            layers = std::max(layers, fd_worst(&ps, {random_tensor({4, 6}, rng), random_tensor({2, 3, 12}, rng)},
                                               [&](const auto& xs) {
                                                   return add(probe_sum(d.forward(xs[0]), seed), probe_sum(c.forward(xs[1]), seed));
                                               },
                                               rng));
        }
        for (auto agg : {Aggregator::mean, Aggregator::pool}) {
            ParamStore ps;
            std::vector<SageLayer> stack;
            stack.emplace_back(ps, "sage0", 3, 4, agg, rng);
            stack.emplace_back(ps, "sage1", 4, 4, agg, rng);
            const SampledBlock block = full_block(grid, {4, 0}, 2);
            layers = std::max(layers, fd_worst(&ps, {random_tensor({block.input_nodes().size(), 3}, rng)},
                                               [&](const auto& xs) { return probe_sum(gnn_forward(stack, block, xs[0]), seed); }, rng));
        }
        {
            ParamStore ps;
            const YearEmbedder e(ps, toy_plan(), ModelKind::cnn, rng);
            layers = std::max(layers, fd_worst(&ps, {random_tensor({2, kSoilVars, kSoilDepths}, rng), random_tensor({1, kWeeklyVars, kWeeks}, rng)},
                                               [&](const auto& xs) {
                                                   return add(probe_sum(e.encode_soil(xs[0]), seed), probe_sum(e.encode_weekly(xs[1]), seed));
                                               },
                                               rng));
        }
        for (auto kind : {CellKind::lstm, CellKind::gru}) {
            ParamStore ps;
            const RecurrentCell cell(ps, "r", kind, 3, 4, rng);
            std::vector<Tensor> seq;
            for (int t = 0; t < 5; ++t) seq.push_back(random_tensor({2, 3}, rng));
            unrolls = std::max(unrolls, fd_worst(&ps, seq, [&](const auto& xs) { return probe_sum(rnn_forward(cell, xs), seed); }, rng));
        }
        for (auto kind : {ModelKind::lstm, ModelKind::gru}) {
            ParamStore ps;
            const YearEmbedder e(ps, toy_plan(), kind, rng);
            unrolls = std::max(unrolls, fd_worst(&ps, {random_tensor({1, kWeeklyVars, kWeeks}, rng)},
                                                 [&](const auto& xs) { return probe_sum(e.encode_weekly(xs[0]), seed); }, rng, 30));
        }
        for (auto kind : {ModelKind::cnn_rnn, ModelKind::gnn_rnn}) {
            DeepModel m(toy_spec(kind, 2007, seed));
            const BatchRequest req{2006, {0, 4, 8}};
            std::optional<SampledBlock> block;
            if (kind == ModelKind::gnn_rnn) block = m.make_block(src, req, false, seed);
            const Tensor target = random_tensor({3}, rng, -1.0, 1.0);
            models = std::max(models, fd_worst(&m.params(), {},
                                               [&](const auto&) {
                                                   return logcosh_loss(m.forward(src, req, block ? &*block : nullptr), target);
                                               },
                                               rng));
        }
    }
    const double secs = seconds_since(t0);
    report("gradient correctness", ops < 1e-4 && layers < 1e-4 && unrolls < 1e-3 && models < 1e-3 && secs < 120,
           "worst rel err: ops " + num(ops) + ", layers " + num(layers) + " (tol 1e-4); recurrent unrolls " + num(unrolls) +
               ", cnn-rnn/gnn-rnn " + num(models) + " (tol 1e-3); " + std::to_string(seeds) + " seeds, h 1e-6, in " + num(secs, 3) +
               " s (limit 120)");
}

void loss_criterion() {
    Rng rng(11);
    double quad = 0.0, lin = 0.0, grad = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double r = rng.uniform(-0.1, 0.1);
        quad = std::max(quad, std::fabs(logcosh_loss(Tensor::vector({r}), Tensor::vector({0.0})).item() - r * r / 2));
        const double big = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(10, 1000);
        lin = std::max(lin, std::fabs(logcosh_loss(Tensor::vector({big}), Tensor::vector({0.0})).item() -
                                      (std::fabs(big) - std::numbers::ln2)));
    }
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n = 1 + rng.below(10);
        const Tensor p = random_tensor({n}, rng, -5, 5).detach(true);
        const Tensor t = random_tensor({n}, rng, -5, 5);
        backward(logcosh_loss(p, t));
        const auto g = p.grad();
        for (std::size_t i = 0; i < n; ++i)
            grad = std::max(grad, std::fabs(g[i] - std::tanh(p[i] - t[i]) / static_cast<double>(n)));
    }
    report("log-cosh identities", quad <= 1e-5 && lin <= 1e-8 && grad <= 1e-15,
           "quadratic regime err " + num(quad) + " (tol 1e-5), linear regime err " + num(lin) +
               " (tol 1e-8), gradient vs tanh(r)/n err " + num(grad));
}

void sage_criterion() {
    std::size_t graphs = 0, mismatches = 0;
    for (std::size_t n = 1; n <= 6; ++n) {
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < n; ++i) ids.push_back("c" + std::to_string(i));
        const std::uint32_t masks = 1u << (n * (n - 1) / 2);
        for (std::uint32_t mask = 0; mask < masks; ++mask) {
            const CountyGraph g(ids, edges_from_mask(n, mask));
            if (!connected(g)) continue;
            ++graphs;
            for (auto agg : {Aggregator::mean, Aggregator::pool}) {
                ParamStore ps;
                Rng rng(mask * 31 + n);
                std::vector<SageLayer> stack;
                stack.emplace_back(ps, "sage0", 3, 4, agg, rng);
                stack.emplace_back(ps, "sage1", 4, 4, agg, rng);
                std::vector<std::vector<double>> z(n, std::vector<double>(3));
                for (auto& row : z)
                    for (auto& v : row) v = rng.uniform(-2, 2);
                const auto dense = dense_gnn(g, stack, z);
                std::vector<std::size_t> all(n);
                std::iota(all.begin(), all.end(), 0);
                const auto sampled = sampled_gnn(g, stack, z, all);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t k = 0; k < 4; ++k)
                        if (sampled[i * 4 + k] != dense[i][k]) ++mismatches;
            }
        }
    }
    report("GraphSAGE oracle equivalence", mismatches == 0 && graphs == 1 + 1 + 4 + 38 + 728 + 26704,
           std::to_string(graphs) + " connected graphs (n <= 6), mean and pool, " + std::to_string(mismatches) +
               " bitwise mismatches");
}

void metric_criterion() {
    Rng rng(5);
    double worst = 0.0, identity = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(300);
        std::vector<double> t(n), p(n);
        const double c = rng.uniform(-100, 200), s = rng.uniform(0.1, 50);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = c + s * rng.normal();
            p[i] = t[i] + rng.uniform(0.0, 2.0) * s * rng.normal();
        }
        const double ys = rng.uniform(0.5, 30);
        const auto rel = [](double a, double b) { return std::fabs(a - b) / std::max(1.0, std::fabs(b)); };
        worst = std::max({worst, rel(rmse(t, p, ys), ref_rmse(t, p, ys)), rel(r_squared(t, p), ref_r2(t, p)),
                          rel(pearson_corr(t, p), ref_corr(t, p))});
        double m = 0, tot = 0;
        for (double v : t) m += v / static_cast<double>(n);
        for (double v : t) tot += (v - m) * (v - m);
        const double u = rmse(t, p, 1.0);
        identity = std::max(identity, rel(r_squared(t, p), 1.0 - static_cast<double>(n) * u * u / tot));
    }
    report("metric oracles", worst <= 1e-12 && identity <= 1e-12,
           "1000 random vectors, worst deviation from reference " + num(worst) + ", r2 = 1 - n*rmse^2/SStot deviation " +
               num(identity) + " (tol 1e-12)");
}

void texture_criterion() {
    std::size_t points = 0, bad = 0;
    for (int s = 0; s <= 200; ++s)
        for (int c = 0; c + s <= 200; ++c) {
            const double sand = 0.5 * s, clay = 0.5 * c, silt = 100.0 - sand - clay;
            const auto m = texture_memberships({sand, silt, clay});
            ++points;
            if (std::count(m.begin(), m.end(), true) != 1) ++bad;
        }
    const bool examples = classify_texture({92, 5, 3}) == TextureClass::sand &&
                          classify_texture({40, 40, 20}) == TextureClass::loam &&
                          classify_texture({20, 20, 60}) == TextureClass::clay;
    report("texture partition", bad == 0 && examples,
           std::to_string(points) + " simplex points at 0.5%, " + std::to_string(bad) +
               " with other than one class; (92,5,3) sand, (40,40,20) loam, (20,20,60) clay " + (examples ? "ok" : "WRONG"));
}

void conservation_criterion() {
    Rng rng(9);
    std::size_t outside = 0, flux_exact_miss = 0;
    double flux_rel = 0.0;
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t n = 1 + rng.below(20);
        std::vector<double> v(n);
        std::vector<CellWeight> cells;
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = rng.uniform() < 0.1 ? -9999.0 : rng.uniform(-500, 500);
            cells.push_back({i, rng.uniform(0.001, 1.0)});
        }
        RasterGrid g;
        g.rows = 1;
        g.cols = n;
        g.values = v;
        const auto got = aggregate_to_county(g, cells);
        double lo = 1e300, hi = -1e300;
        for (double x : v)
            if (x != -9999.0) lo = std::min(lo, x), hi = std::max(hi, x);
        if (got && (*got < lo || *got > hi)) ++outside;

        std::vector<double> d(trial % 2 ? 366 : 365);
        for (auto& x : d) x = static_cast<double>(rng.below(64 * 200)) / 64.0;
        auto w = daily_to_weekly(d, VariableKind::flux);
        if (std::accumulate(w.begin(), w.end(), 0.0) != std::accumulate(d.begin(), d.end(), 0.0)) ++flux_exact_miss;
        for (auto& x : d) x = rng.uniform(0.0, 50.0);
        w = daily_to_weekly(d, VariableKind::flux);
        const double total = std::accumulate(d.begin(), d.end(), 0.0);
        flux_rel = std::max(flux_rel, std::fabs(std::accumulate(w.begin(), w.end(), 0.0) - total) / total);
    }
    report("aggregation conservation", outside == 0 && flux_exact_miss == 0 && flux_rel <= 1e-12,
           std::to_string(outside) + " county values outside [min, max] of 2000; flux weekly vs daily totals: " +
               std::to_string(flux_exact_miss) + " inexact on exactly representable data, worst rel diff " + num(flux_rel) +
               " on arbitrary reals (summation-order rounding)");
}

void protocol_criterion() {
    std::vector<int> years(39);
    std::iota(years.begin(), years.end(), 1981);
    const YearSplit s = make_split(years, 2019);
    std::vector<int> want(37);
    std::iota(want.begin(), want.end(), 1981);
    report("protocol conformance", s.train_years == want && s.val_year == 2018 && s.test_year == 2019,
           "test 2019 -> train " + std::to_string(s.train_years.front()) + "-" + std::to_string(s.train_years.back()) +
               ", val " + std::to_string(s.val_year));
}

void determinism_criterion(const fs::path& work) {
    const fs::path a = work / "det_a", b = work / "det_b";
    bool ok = run_cli("synth --n_counties 36 --n_years 10 --seed 7 --force --out " + a.string(), work / "det.log") == 0 &&
              run_cli("synth --n_counties 36 --n_years 10 --seed 7 --force --out " + b.string(), work / "det.log") == 0;
    const bool synth_same = ok && slurp(a / "features.csv") == slurp(b / "features.csv") &&
                            slurp(a / "yields.csv") == slurp(b / "yields.csv") &&
                            slurp(a / "adjacency.tsv") == slurp(b / "adjacency.tsv");
    const std::string train = "train --data " + a.string() +
                              " --kind gnn-rnn --epochs 3 --weekly_plan 4:3,4:3,4:3,4:3 --soil_plan 3:2,3:2,3:2 "
                              "--weekly_dim 6 --soil_dim 4 --hidden 8 --head_dim 8 --batch_size 16 --seed 3 --force --out ";
    ok = run_cli(train + (work / "ck_a").string(), work / "det.log") == 0 &&
         run_cli(train + (work / "ck_b").string(), work / "det.log") == 0;
    const bool train_same = ok && slurp(work / "ck_a" / "model.ckpt") == slurp(work / "ck_b" / "model.ckpt") &&
                            !slurp(work / "ck_a" / "model.ckpt").empty();
    report("determinism", synth_same && train_same,
           std::string("synth twice ") + (synth_same ? "byte-identical" : "DIFFERS") + ", gnn-rnn train twice " +
               (train_same ? "byte-identical checkpoints" : "DIFFERS"));
}

struct BenchRowCsv {
    double r2 = NAN, r2_std = NAN, early = NAN;
    std::size_t runs = 0, failed = 0;
};

void benchmark_criteria(const fs::path& work) {
    const fs::path data = work / "synthetic", out = work / "benchmark";
    if (run_cli("synth --n_counties 100 --n_years 20 --seed 7 --force --out " + data.string(), work / "synth.log") != 0) {
        report("synthetic benchmark", false, "synth failed: " + slurp(work / "synth.log"));
        report("early-prediction degradation", false, "no benchmark");
        return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const int code = run_cli("benchmark --config '" YIELDGRAPH_SOURCE_DIR "/configs/synthetic_benchmark.conf' --data " +
                                 data.string() + " --force --out " + out.string(),
                             work / "benchmark.log");
    const double minutes = seconds_since(t0) / 60.0;
    std::map<std::string, BenchRowCsv> rows;
    std::ifstream csv(out / "benchmark.csv");
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
        const auto f = split_csv(line);
        const auto val = [&](std::size_t i) { return parse_double(f[i]).value_or(NAN); };
        BenchRowCsv r;
        r.runs = static_cast<std::size_t>(val(2));
        r.failed = static_cast<std::size_t>(val(3));
        r.r2 = val(6);
        r.r2_std = val(7);
        r.early = val(10);
        rows[std::string(f[1])] = r;
    }
    const std::vector<std::string> deep = {"gru", "lstm", "cnn", "gnn", "gru-5y", "lstm-5y", "cnn-rnn", "gnn-rnn"};
    bool all = code == 0;
    std::string summary;
    for (const auto& k : deep) {
        const auto& r = rows[k];
        all = all && r.failed == 0 && r.runs > 0 && r.r2 >= 0.5;
        summary += k + " " + num(r.r2, 3) + ", ";
    }
    const auto& cnn = rows["cnn"];
    const auto& gnn = rows["gnn"];
    const auto& cr = rows["cnn-rnn"];
    const auto& gr = rows["gnn-rnn"];
    const double m1 = gnn.r2 - cnn.r2, m5 = gr.r2 - cr.r2;
    const bool three = cnn.runs == 3 && gnn.runs == 3 && cr.runs == 3 && gr.runs == 3;
    report("synthetic benchmark", all && three && m1 >= 0.02 && m5 >= 0.02 && minutes < 30,
           "test R2 " + summary + "min required 0.5; GNN - CNN " + num(m1, 3) + ", GNN-RNN - CNN-RNN " + num(m5, 3) +
               " (3 seeds, min 0.02); " + num(minutes, 3) + " min (limit 30)");
    report("early-prediction degradation", three && gr.early < gr.r2 && gr.early >= cr.early,
           "GNN-RNN masked R2 " + num(gr.early) + " vs unmasked " + num(gr.r2) + "; CNN-RNN masked " + num(cr.early) +
               " (GNN-RNN must be >=)");
}

} // namespace

int main(int argc, char** argv) {
    const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
    const fs::path work = fs::temp_directory_path() / "yieldgraph_acceptance";
    fs::create_directories(work);
    gradient_criterion();
    loss_criterion();
    sage_criterion();
    metric_criterion();
    texture_criterion();
    conservation_criterion();
    protocol_criterion();
    determinism_criterion(work);
    if (!quick) benchmark_criteria(work);
    std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria failing") << std::endl;
    return failures == 0 ? 0 : 1;
}
