#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <sstream>

#include "toy_models.hpp"

using namespace yieldgraph;
using namespace yieldgraph::testing;

namespace {

std::string bytes_of(const ModelCheckpoint& ck) {
    std::ostringstream out;
    save_checkpoint(out, ck);
    return out.str();
}

ModelCheckpoint reload(const ModelCheckpoint& ck) {
    std::istringstream in(bytes_of(ck));
    return load_checkpoint(in);
}

Eigen::MatrixXd random_matrix(Eigen::Index n, Eigen::Index p, Rng& rng) {
    Eigen::MatrixXd x(n, p);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < p; ++j) x(i, j) = rng.normal();
    return x;
}

Eigen::VectorXd random_vector(Eigen::Index n, Rng& rng) {
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y[i] = rng.normal();
    return y;
}

double linear_predict(const LinearModel& m, const Eigen::MatrixXd& x, Eigen::Index row) {
    const Eigen::VectorXd r = x.row(row).transpose();
    return m.predict(r.data());
}

/// Live model and its normalized dataset, for forward-only checks.
struct Live {
    Dataset ds;
    std::unique_ptr<DeepModel> model;
    ModelCheckpoint ck;
};

Live live(ModelKind kind, Dataset raw, int test_year, std::uint64_t seed = 1) {
    Live l;
    const YearSplit split = make_split(raw.years, test_year);
    fill_previous_yield(raw, Crop::corn);
    l.ck.spec = toy_spec(kind, test_year, seed);
    l.ck.norm = compute_norm_stats(raw, split);
    l.ds = apply_norm(std::move(raw), l.ck.norm);
    l.model = std::make_unique<DeepModel>(l.ck.spec);
    return l;
}

} // namespace

TEST(ModelsTest, KindsAndHistory) {
    EXPECT_EQ(model_kind_names().size(), 11u);
    for (ModelKind k : all_kinds()) EXPECT_EQ(parse_model_kind(to_string(k)), k);
    for (ModelKind k : {ModelKind::ridge, ModelKind::lasso, ModelKind::gru, ModelKind::lstm, ModelKind::cnn, ModelKind::gnn})
        EXPECT_EQ(history_years(k), 0);
    for (ModelKind k : {ModelKind::gru_5y, ModelKind::lstm_5y, ModelKind::cnn_rnn, ModelKind::gnn_rnn})
        EXPECT_EQ(history_years(k), 4);
    EXPECT_THROW(parse_model_kind("xgboost"), ConfigError);
}

TEST(ModelsTest, DefaultsFollowTheHyperparameterTables) {
    const ModelSpec g = default_spec(ModelKind::gnn_rnn, Crop::corn, 2019);
    EXPECT_EQ(g.batch_size, 32u);
    EXPECT_EQ(g.lr, 5e-5);
    EXPECT_EQ(g.schedule.kind, LrSchedule::Kind::cosine);
    EXPECT_EQ(g.schedule.t0, 200);
    EXPECT_EQ(g.schedule.eta_min, 1e-6);
    EXPECT_EQ(g.weight_decay, 1e-5);
    EXPECT_EQ(g.edge_dropout, 0.1);
    EXPECT_EQ(g.aggregator, Aggregator::pool);
    EXPECT_EQ(g.epochs, 100);

    const ModelSpec c = default_spec(ModelKind::cnn_rnn, Crop::soybean, 2019);
    EXPECT_EQ(c.batch_size, 128u);
    EXPECT_EQ(c.lr, 5e-4);
    EXPECT_EQ(c.schedule.kind, LrSchedule::Kind::step);
    EXPECT_EQ(c.schedule.step_period, 25);
    EXPECT_EQ(c.schedule.gamma, 0.5);

    const ModelSpec n = default_spec(ModelKind::gnn, Crop::corn, 2019);
    EXPECT_EQ(n.batch_size, 64u);
    EXPECT_EQ(n.aggregator, Aggregator::mean);
    EXPECT_EQ(n.epochs, 200);
    const ModelSpec s = default_spec(ModelKind::gnn, Crop::soybean, 2018);
    EXPECT_EQ(s.schedule.gamma, 0.8);
}

TEST(ModelsTest, OverridesAreValidated) {
    const ModelSpec base = default_spec(ModelKind::cnn, Crop::corn, 2019);
    EXPECT_EQ(apply_overrides(base, {{"lr", "0.01"}}).schedule.lr_max, 0.01);
    EXPECT_THROW(apply_overrides(base, {{"learning_rate", "0.01"}}), ConfigError);
    EXPECT_THROW(apply_overrides(base, {{"edge_dropout", "1"}}), ConfigError);
    EXPECT_THROW(apply_overrides(base, {{"lr", "fast"}}), ConfigError);
    EXPECT_THROW(apply_overrides(base, {{"batch_size", "0"}}), ConfigError);
    EXPECT_THROW(apply_overrides(base, {{"weekly_plan", "8:3,8:3"}}), ConfigError);
    EXPECT_THROW(apply_overrides(base, {{"aggregator", "sum"}}), ConfigError);
    EXPECT_THROW(apply_overrides(base, {{"schedule", "cosine:0:1e-6"}}), ConfigError);
    // every spec survives its own key/value text
    for (ModelKind k : all_kinds()) {
        const ModelSpec s = toy_spec(k, 2019, 5);
        const auto kv = s.to_kv();
        const ModelSpec back = apply_overrides(default_spec(ModelKind::cnn, Crop::soybean, 2000),
                                               std::map<std::string, std::string>(kv.begin(), kv.end()));
        EXPECT_EQ(back.to_kv(), kv);
    }
}

TEST(ModelsTest, RidgeInterpolatesExactlyDeterminedSystems) {
    // p features plus an intercept: p + 1 rows determine the fit exactly
    Rng rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        const Eigen::MatrixXd x = random_matrix(4, 3, rng);
        const Eigen::VectorXd y = random_vector(4, rng);
        const LinearModel m = fit_ridge(x, y, 0.0);
        for (Eigen::Index i = 0; i < 4; ++i) EXPECT_LT(std::fabs(linear_predict(m, x, i) - y[i]), 1e-9);
    }
}

TEST(ModelsTest, RidgeLimitAndSingularity) {
    Rng rng(2);
    const Eigen::MatrixXd x = random_matrix(30, 4, rng);
    const Eigen::VectorXd y = random_vector(30, rng);
    const LinearModel big = fit_ridge(x, y, 1e12);
    for (double c : big.coef) EXPECT_LT(std::fabs(c), 1e-9);
    for (Eigen::Index i = 0; i < 30; ++i) EXPECT_NEAR(linear_predict(big, x, i), y.mean(), 1e-9);

    Eigen::MatrixXd dup(30, 3);
    dup << x.col(0), x.col(1), x.col(0);
    EXPECT_THROW(fit_ridge(dup, y, 0.0), std::domain_error);
    EXPECT_NO_THROW(fit_ridge(dup, y, 0.1));
    EXPECT_THROW(fit_ridge(x, y, -1.0), std::invalid_argument);

    LinearModel zero;
    zero.intercept = 3.5;
    zero.coef = {0.0, 0.0};
    zero.col_mean = {1.0, 2.0};
    zero.col_scale = {1.0, 1.0};
    const double anything[] = {123.0, -4.0};
    EXPECT_EQ(zero.predict(anything), 3.5);
}

TEST(ModelsTest, RidgeMatchesHandSolvedNormalEquations) {
    Eigen::MatrixXd x(3, 2);
    x << 1, 2, 3, 1, 5, 9;
    Eigen::VectorXd y(3);
    y << 1, 2, 4;
    const double lambda = 0.5;
    // standardize by hand: population std
    double z[3][2];
    for (int j = 0; j < 2; ++j) {
        const double m = (x(0, j) + x(1, j) + x(2, j)) / 3.0;
        double ss = 0.0;
        for (int i = 0; i < 3; ++i) ss += (x(i, j) - m) * (x(i, j) - m);
        const double sd = std::sqrt(ss / 3.0);
        for (int i = 0; i < 3; ++i) z[i][j] = (x(i, j) - m) / sd;
    }
    const double ym = 7.0 / 3.0;
    double a = lambda, b = 0.0, d = lambda, r0 = 0.0, r1 = 0.0;
    for (int i = 0; i < 3; ++i) {
        a += z[i][0] * z[i][0];
        b += z[i][0] * z[i][1];
        d += z[i][1] * z[i][1];
        r0 += z[i][0] * (y[i] - ym);
        r1 += z[i][1] * (y[i] - ym);
    }
    const double det = a * d - b * b;
    const double b0 = (d * r0 - b * r1) / det, b1 = (a * r1 - b * r0) / det;
    const LinearModel m = fit_ridge(x, y, lambda);
    EXPECT_NEAR(m.coef[0], b0, 1e-10);
    EXPECT_NEAR(m.coef[1], b1, 1e-10);
    EXPECT_NEAR(m.intercept, ym, 1e-15);
}

TEST(ModelsTest, LassoThresholdKillsEverything) {
    Rng rng(3);
    const Eigen::MatrixXd x = random_matrix(40, 6, rng);
    const Eigen::VectorXd y = random_vector(40, rng);
    const DesignMatrix d = standardize_design(x, y);
    const double lmax = (d.z.transpose() * d.yc).cwiseAbs().maxCoeff() / 40.0;
    for (double f : {1.0, 1.5, 100.0}) {
        const LinearModel m = fit_lasso(x, y, lmax * f);
        EXPECT_EQ(m.nonzero(), 0u);
        for (double c : m.coef) EXPECT_EQ(c, 0.0);
    }
    EXPECT_GT(fit_lasso(x, y, lmax * 0.5).nonzero(), 0u);
}

TEST(ModelsTest, LassoAtZeroMatchesRidge) {
    Rng rng(4);
    for (int rep = 0; rep < 5; ++rep) {
        const Eigen::MatrixXd x = random_matrix(60, 5, rng);
        const Eigen::VectorXd y = random_vector(60, rng);
        const LinearModel l = fit_lasso(x, y, 0.0, 100000, 1e-12);
        const LinearModel r = fit_ridge(x, y, 0.0);
        EXPECT_TRUE(l.converged);
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(l.coef[j], r.coef[j], 1e-6);
    }
}

TEST(ModelsTest, LassoDescendsAndSparsifies) {
    Rng rng(5);
    for (int rep = 0; rep < 10; ++rep) {
        const Eigen::MatrixXd x = random_matrix(200, 10, rng);
        Eigen::VectorXd y = random_vector(200, rng) * 0.5;
        for (Eigen::Index j = 0; j < 10; ++j) y += x.col(j) * (0.1 * static_cast<double>(j));
        std::vector<double> trace;
        fit_lasso(x, y, 0.05, 10000, 1e-7, &trace);
        ASSERT_FALSE(trace.empty());
        // each coordinate update minimizes exactly; allow only summation rounding
        for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1] * (1 + 1e-14));

        std::size_t prev = 11;
        for (double lam : {0.0, 0.01, 0.03, 0.1, 0.2, 0.4, 0.8}) {
            const std::size_t nz = fit_lasso(x, y, lam).nonzero();
            EXPECT_LE(nz, prev) << lam;
            prev = nz;
        }
    }
    const Eigen::MatrixXd x = random_matrix(50, 8, rng);
    const LinearModel stuck = fit_lasso(x, random_vector(50, rng), 1e-3, 1, 1e-30);
    EXPECT_FALSE(stuck.converged);
    EXPECT_EQ(stuck.iterations, 1);
}

TEST(ModelsTest, OneYearOutputShape) {
    Live l = live(ModelKind::cnn, generate_synthetic({9, 8, 3, 2000, 1, 0.0}), 2007);
    const FeatureSource src{&l.ds, nullptr};
    const Tensor out = l.model->forward(src, {2007, {0, 4, 8}});
    EXPECT_EQ(out.shape(), (Shape{3}));
    const Predictor p(l.ck, l.model.get());
    EXPECT_EQ(predict_1y(p, *l.ds.find(4, 2007)), out[1]);
}

TEST(ModelsTest, GraphContextRules) {
    Live g = live(ModelKind::gnn, generate_synthetic({9, 8, 3, 2000, 1, 0.0}), 2007);
    const Predictor pg(g.ck, g.model.get());
    EXPECT_THROW(predict_1y(pg, *g.ds.find(0, 2007)), ConfigError);
    Live c = live(ModelKind::cnn, generate_synthetic({9, 8, 3, 2000, 1, 0.0}), 2007);
    const Predictor pc(c.ck, c.model.get());
    const GraphContext ctx{&c.ds, 0};
    EXPECT_THROW(predict_1y(pc, *c.ds.find(0, 2007), &ctx), ConfigError);
    EXPECT_THROW(predict_5y(pc, {}), ConfigError);

    Live r = live(ModelKind::cnn_rnn, generate_synthetic({9, 8, 3, 2000, 1, 0.0}), 2007);
    const Predictor pr(r.ck, r.model.get());
    std::vector<YearFeatures> four;
    for (int y = 2004; y <= 2007; ++y) four.push_back(*r.ds.find(0, y));
    EXPECT_THROW(predict_5y(pr, four), std::invalid_argument);
    EXPECT_THROW(predict_1y(pr, four.back()), ConfigError);
}

TEST(ModelsTest, IsolatedCountyIsSelfOnly) {
    Dataset raw = generate_synthetic({9, 8, 3, 2000, 2, 0.0});
    // drop every edge of county 4
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t a = 0; a < 9; ++a)
        for (std::size_t b : raw.graph.neighbors(a))
            if (a < b && a != 4 && b != 4) edges.emplace_back(a, b);
    raw.graph = CountyGraph(raw.graph.node_ids(), edges);
    for (Aggregator agg : {Aggregator::mean, Aggregator::pool}) {
        Live l = live(ModelKind::gnn, raw, 2007);
        l.ck.spec.aggregator = agg;
        l.model = std::make_unique<DeepModel>(l.ck.spec);
        const Predictor p(l.ck, l.model.get());
        const GraphContext ctx{&l.ds, 4};
        const double got = predict_1y(p, *l.ds.find(4, 2007), &ctx);
        // the degenerate forward: one node, no neighbors
        Dataset alone;
        alone.graph = CountyGraph({"x"}, {});
        alone.features.emplace(std::make_pair(std::size_t{0}, 2007), *l.ds.find(4, 2007));
        EXPECT_EQ(got, dense_graph_prediction(*l.model, alone, 2007, {0}).at(0));
    }
}

TEST(ModelsTest, GnnRnnMatchesDenseGraphOracle) {
    for (std::uint64_t seed : {1, 2, 3}) {
        Live l = live(ModelKind::gnn_rnn, generate_synthetic({25, 9, 5, 2000, seed, 0.0}), 2008, seed);
        ASSERT_GE(l.ck.spec.fanout, l.ds.graph.max_degree());
        const Predictor p(l.ck, l.model.get());
        const FeatureSource src{&l.ds, nullptr};
        std::vector<std::size_t> all(25);
        std::iota(all.begin(), all.end(), 0);
        EXPECT_EQ(p.predict(src, {2008, all}), dense_graph_prediction(*l.model, l.ds, 2008, all));
        EXPECT_EQ(p.predict(src, {2007, {3, 17}}), dense_graph_prediction(*l.model, l.ds, 2007, {3, 17}));
    }
}

TEST(ModelsTest, ZeroEdgeGraphAggregatesToZero) {
    Dataset raw = generate_synthetic({9, 9, 3, 2000, 4, 0.0});
    raw.graph = CountyGraph(raw.graph.node_ids(), {});
    Live l = live(ModelKind::gnn_rnn, raw, 2008);
    const SampledBlock block = full_block(l.ds.graph, {0, 5, 7}, 2);
    for (const auto& layer : block.layers)
        for (const auto& nb : layer.neighbors) EXPECT_TRUE(nb.empty());
    Rng rng(9);
    const Tensor z = Tensor::from({3, 4}, std::vector<double>(12, 2.5));
    EXPECT_EQ(aggregate_neighbors(z, {}, Aggregator::mean).values(), std::vector<double>(4, 0.0));
    EXPECT_EQ(aggregate_neighbors(z, {}, Aggregator::pool).values(), std::vector<double>(4, 0.0));
    const Predictor p(l.ck, l.model.get());
    const FeatureSource src{&l.ds, nullptr};
    EXPECT_EQ(p.predict(src, {2008, {0, 5, 7}}), dense_graph_prediction(*l.model, l.ds, 2008, {0, 5, 7}));
}

TEST(ModelsTest, CnnRnnSeesTheOldestYear) {
    Live l = live(ModelKind::cnn_rnn, generate_synthetic({9, 8, 3, 2000, 3, 0.0}), 2007);
    const Predictor p(l.ck, l.model.get());
    std::vector<YearFeatures> w;
    for (int y = 2003; y <= 2007; ++y) w.push_back(*l.ds.find(2, y));
    EXPECT_EQ(predict_5y(p, w), predict_5y(p, w));
    const double h = 1e-4;
    double worst = 0.0;
    for (std::size_t i : {std::size_t{0}, kWeeks * 3 + 30, kLandOffset + 7, kSoilOffset + 11, kExtrasOffset + 1}) {
        auto up = w, down = w;
        up[0].values[i] += h;
        down[0].values[i] -= h;
        worst = std::max(worst, std::fabs((predict_5y(p, up) - predict_5y(p, down)) / (2 * h)));
    }
    EXPECT_GT(worst, 1e-6);
}

TEST(ModelsTest, EmptyTrainingSetIsAnError) {
    Dataset raw = generate_synthetic({4, 8, 2, 2000, 1, 0.0});
    YieldTable kept;
    for (const auto& [key, v] : raw.yields.entries())
        if (std::get<1>(key) >= 2006) kept.set(std::get<0>(key), std::get<1>(key), std::get<2>(key), v);
    // the scaler has nothing to fit before the model does
    raw.yields = kept;
    EXPECT_THROW(train(toy_spec(ModelKind::cnn, 2007), raw, make_split(raw.years, 2007)), InputError);

    // 5y windows cannot exist with only four training years
    const Dataset short_ds = generate_synthetic({4, 6, 2, 2000, 1, 0.0});
    EXPECT_THROW(train(toy_spec(ModelKind::cnn_rnn, 2005), short_ds, make_split(short_ds.years, 2005)), InputError);
}

TEST(ModelsTest, CheckpointRoundTripIsBitIdentical) {
    const Dataset raw = generate_synthetic({9, 8, 3, 2000, 6, 0.0});
    const YearSplit split = make_split(raw.years, 2007);
    for (ModelKind k : all_kinds()) {
        SCOPED_TRACE(to_string(k));
        const ModelCheckpoint ck = train(toy_spec(k, 2007, 1), raw, split);
        const ModelCheckpoint back = reload(ck);
        EXPECT_EQ(bytes_of(back), bytes_of(ck));
        const Dataset ds = prepare_dataset(raw, ck);
        const FeatureSource src{&ds, nullptr};
        const BatchRequest req{2007, {0, 1, 2, 3, 4, 5, 6, 7, 8}};
        const auto a = Predictor(ck).predict(src, req, &raw);
        const auto b = Predictor(back).predict(src, req, &raw);
        EXPECT_EQ(a, b);
        for (double v : a) {
            EXPECT_TRUE(std::isfinite(v));
            EXPECT_NEAR(ck.target.standardize(ck.target.destandardize(v)), v, 1e-9);
        }
    }
}

TEST(ModelsTest, CheckpointRejectsDamage) {
    const Dataset raw = generate_synthetic({4, 7, 2, 2000, 1, 0.0});
    const std::string good = bytes_of(train(toy_spec(ModelKind::cnn, 2006, 0, 1), raw, make_split(raw.years, 2006)));
    std::istringstream bad_magic("not a checkpoint\n");
    EXPECT_THROW(load_checkpoint(bad_magic), InputError);
    std::istringstream truncated(good.substr(0, good.size() - 100));
    EXPECT_THROW(load_checkpoint(truncated), InputError);
    std::string other = good;
    other.replace(other.find("kind = cnn"), 10, "kind = gnn");
    std::istringstream wrong_arch(other);
    EXPECT_THROW(Predictor(load_checkpoint(wrong_arch)), InputError);
}

TEST(ModelsTest, TrainingIsDeterministic) {
    const Dataset raw = generate_synthetic({9, 8, 3, 2000, 7, 0.0});
    const YearSplit split = make_split(raw.years, 2007);
    for (ModelKind k : {ModelKind::cnn, ModelKind::gnn, ModelKind::gnn_rnn, ModelKind::lasso}) {
        EXPECT_EQ(bytes_of(train(toy_spec(k, 2007, 3), raw, split)), bytes_of(train(toy_spec(k, 2007, 3), raw, split)))
            << to_string(k);
    }
    EXPECT_NE(bytes_of(train(toy_spec(ModelKind::cnn, 2007, 3), raw, split)),
              bytes_of(train(toy_spec(ModelKind::cnn, 2007, 4), raw, split)));
}

TEST(ModelsTest, TrainingKeepsTheBestValidationEpoch) {
    const Dataset raw = generate_synthetic({9, 8, 3, 2000, 8, 0.0});
    const ModelCheckpoint ck = train(toy_spec(ModelKind::cnn, 2007, 0, 6), raw, make_split(raw.years, 2007));
    ASSERT_EQ(ck.val_rmse.size(), 6u);
    const auto best = std::min_element(ck.val_rmse.begin(), ck.val_rmse.end()) - ck.val_rmse.begin();
    EXPECT_EQ(ck.best_epoch, best);
    // the stored weights reproduce the recorded validation RMSE
    const Dataset ds = prepare_dataset(raw, ck);
    const FeatureSource src{&ds, nullptr};
    const Predictor p(ck);
    const auto val = collect_samples(raw, src, {2006}, Crop::corn, 0, ck.target);
    EXPECT_EQ(samples_rmse(p, src, val, ck.target), ck.val_rmse[static_cast<std::size_t>(best)]);
}

TEST(ModelsTest, DeepKindsMemorizeTwentySamples) {
    for (ModelKind k : all_kinds()) {
        if (!is_deep(k)) continue;
        SCOPED_TRACE(to_string(k));
        const bool five = history_years(k) == 4;
        // 1y: 4 counties x 5 training years; 5y: 4 counties x 5 windowed years
        const Dataset raw = generate_synthetic({4, five ? 11u : 7u, 2, 2000, 1, 0.0});
        const int test = raw.years.back();
        const YearSplit split = make_split(raw.years, test);
        const ModelCheckpoint ck = train(
            toy_spec(k, test, 0, 200,
                     {{"lr", "0.001"}, {"weight_decay", "0"}, {"edge_dropout", "0"}, {"hidden", "16"},
                      {"head_dim", "16"}, {"weekly_dim", "16"}}),
            raw, split);
        // 5y: training years without four predecessors are skipped
        EXPECT_EQ(ck.skipped_windows, five ? 16u : 0u);
        EXPECT_LT(*std::min_element(ck.train_loss.begin(), ck.train_loss.end()), 0.01);
    }
}
