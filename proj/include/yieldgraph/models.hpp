#pragma once

// The compared methods behind one interface: linear baselines, single-year
// deep models and 5-year history models, plus training and checkpoints.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "yieldgraph/dataset.hpp"
#include "yieldgraph/graph.hpp"
#include "yieldgraph/layers.hpp"
#include "yieldgraph/optim.hpp"
#include "yieldgraph/random.hpp"
#include "yieldgraph/tensor.hpp"

namespace yieldgraph {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class ModelKind { ridge, lasso, gru, lstm, cnn, gnn, gru_5y, lstm_5y, cnn_rnn, gnn_rnn, oracle };

inline const std::vector<std::pair<ModelKind, std::string>>& model_kind_names() {
    static const std::vector<std::pair<ModelKind, std::string>> names = {
        {ModelKind::ridge, "ridge"},     {ModelKind::lasso, "lasso"},     {ModelKind::gru, "gru"},
        {ModelKind::lstm, "lstm"},       {ModelKind::cnn, "cnn"},         {ModelKind::gnn, "gnn"},
        {ModelKind::gru_5y, "gru-5y"},   {ModelKind::lstm_5y, "lstm-5y"}, {ModelKind::cnn_rnn, "cnn-rnn"},
        {ModelKind::gnn_rnn, "gnn-rnn"}, {ModelKind::oracle, "oracle"}};
    return names;
}

inline std::string to_string(ModelKind k) {
    for (const auto& [kind, name] : model_kind_names())
        if (kind == k) return name;
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    for (const auto& [kind, name] : model_kind_names())
        if (name == s) return kind;
    throw ConfigError("unknown model kind '" + s + "'");
}

inline int history_years(ModelKind k) {
    switch (k) {
        case ModelKind::gru_5y:
        case ModelKind::lstm_5y:
        case ModelKind::cnn_rnn:
        case ModelKind::gnn_rnn: return 4;
        default: return 0;
    }
}

inline bool is_linear(ModelKind k) { return k == ModelKind::ridge || k == ModelKind::lasso; }
inline bool is_deep(ModelKind k) { return !is_linear(k) && k != ModelKind::oracle; }
inline bool uses_graph(ModelKind k) { return k == ModelKind::gnn || k == ModelKind::gnn_rnn; }

/// Kinds with a per-year embedding (weekly encoder + soil CNN + extras).
inline bool uses_embedding(ModelKind k) {
    return k == ModelKind::gru || k == ModelKind::lstm || k == ModelKind::cnn || k == ModelKind::gnn ||
           k == ModelKind::cnn_rnn || k == ModelKind::gnn_rnn;
}

// ---------------------------------------------------------------------------
// Architecture descriptor

/// Conv plans as "out:kernel,..." strings. The weekly plan pools after each block.
struct EncoderPlan {
    std::vector<ConvBlockSpec> weekly = {{32, 7, true}, {64, 3, true}, {96, 3, true}, {128, 3, true}};
    std::vector<ConvBlockSpec> soil = {{24, 2, false}, {28, 2, false}, {32, 2, false}};
    std::size_t weekly_dim = 64;
    std::size_t soil_dim = 32;
    std::size_t hidden = 64;
    std::size_t head_dim = 64;

    std::size_t embed_dim() const { return weekly_dim + soil_dim + kExtras; }

    static std::string format_blocks(const std::vector<ConvBlockSpec>& b) {
        std::string s;
        for (std::size_t i = 0; i < b.size(); ++i) {
            if (i) s += ',';
            s += std::to_string(b[i].out_channels) + ':' + std::to_string(b[i].kernel);
        }
        return s;
    }

    static std::vector<ConvBlockSpec> parse_blocks(const std::string& text, bool pool, std::size_t expected,
                                                   const std::string& what) {
        std::vector<ConvBlockSpec> out;
        std::stringstream ss(text);
        for (std::string item; std::getline(ss, item, ',');) {
            const auto colon = item.find(':');
            try {
                if (colon == std::string::npos) throw std::invalid_argument("");
                const auto ch = std::stoul(item.substr(0, colon));
                const auto k = std::stoul(item.substr(colon + 1));
                if (ch == 0 || k == 0) throw std::invalid_argument("");
                out.push_back({ch, k, pool});
            } catch (const std::logic_error&) {
                throw ConfigError(what + ": malformed block '" + item + "' (expected channels:kernel)");
            }
        }
        if (out.size() != expected) {
            throw ConfigError(what + " must have exactly " + std::to_string(expected) + " blocks, got " +
                              std::to_string(out.size()));
        }
        return out;
    }
};

struct ModelSpec {
    ModelKind kind = ModelKind::cnn;
    Crop crop = Crop::corn;
    int test_year = 2019;
    double lr = 1e-4;
    std::size_t batch_size = 128;
    LrSchedule schedule = LrSchedule::step(1e-4, 25, 0.5);
    double weight_decay = 1e-5;
    std::size_t fanout = 10;
    double edge_dropout = 0.0;
    Aggregator aggregator = Aggregator::pool;
    int epochs = 100;
    std::uint64_t seed = 0;
    double lambda = -1.0;  // linear kinds; negative selects on the validation year
    EncoderPlan plan;

    int history() const { return history_years(kind); }

    std::vector<std::pair<std::string, std::string>> to_kv() const {
        return {{"kind", to_string(kind)},
                {"crop", to_string(crop)},
                {"test_year", std::to_string(test_year)},
                {"lr", format_double(lr)},
                {"batch_size", std::to_string(batch_size)},
                {"schedule", schedule.str()},
                {"weight_decay", format_double(weight_decay)},
                {"fanout", std::to_string(fanout)},
                {"edge_dropout", format_double(edge_dropout)},
                {"aggregator", to_string(aggregator)},
                {"epochs", std::to_string(epochs)},
                {"seed", std::to_string(seed)},
                {"lambda", lambda < 0.0 ? std::string("auto") : format_double(lambda)},
                {"weekly_plan", EncoderPlan::format_blocks(plan.weekly)},
                {"soil_plan", EncoderPlan::format_blocks(plan.soil)},
                {"weekly_dim", std::to_string(plan.weekly_dim)},
                {"soil_dim", std::to_string(plan.soil_dim)},
                {"hidden", std::to_string(plan.hidden)},
                {"head_dim", std::to_string(plan.head_dim)}};
    }

    static const std::vector<std::string>& keys() {
        static const std::vector<std::string> k = {
            "kind",  "crop",   "test_year", "lr",          "batch_size",  "schedule",   "weight_decay",
            "fanout", "edge_dropout", "aggregator", "epochs", "seed", "lambda", "weekly_plan", "soil_plan",
            "weekly_dim", "soil_dim", "hidden", "head_dim"};
        return k;
    }

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (epochs <= 0 && is_deep(kind)) throw ConfigError("epochs must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
        if (fanout == 0) throw ConfigError("fanout must be positive");
        if (!(edge_dropout >= 0.0 && edge_dropout < 1.0)) throw ConfigError("edge_dropout must be in [0, 1)");
        if (schedule.kind == LrSchedule::Kind::step && schedule.step_period <= 0) {
            throw ConfigError("step schedule period must be positive");
        }
        if (schedule.kind == LrSchedule::Kind::cosine && (schedule.t0 <= 0 || !(schedule.eta_min > 0.0))) {
            throw ConfigError("cosine schedule needs T0 > 0 and eta_min > 0");
        }
        if (plan.weekly_dim == 0 || plan.soil_dim == 0 || plan.hidden == 0 || plan.head_dim == 0) {
            throw ConfigError("layer widths must be positive");
        }
    }
};

/// Published per-method hyperparameters; kinds without their own settings
/// reuse the CNN-RNN setting of the same crop.
inline ModelSpec default_spec(ModelKind kind, Crop crop, int test_year) {
    ModelSpec s;
    s.kind = kind;
    s.crop = crop;
    s.test_year = test_year;
    const bool corn = crop == Crop::corn;
    const bool y2019 = test_year == 2019;
    auto set = [&](std::size_t batch, double lr, LrSchedule sched, int epochs, double wd, double drop, Aggregator agg) {
        s.batch_size = batch;
        s.lr = lr;
        s.schedule = sched;
        s.schedule.lr_max = lr;
        s.epochs = epochs;
        s.weight_decay = wd;
        s.edge_dropout = drop;
        s.aggregator = agg;
    };
    switch (kind) {
        case ModelKind::gnn:
            if (corn && !y2019) set(32, 1e-4, LrSchedule::cosine(1e-4, 200, 1e-5), 100, 1e-5, 0.1, Aggregator::pool);
            else if (corn) set(64, 5e-5, LrSchedule::cosine(5e-5, 100, 1e-5), 200, 1e-5, 0.0, Aggregator::mean);
            else set(64, 1e-4, LrSchedule::step(1e-4, 25, 0.8), 100, 1e-5, 0.1, Aggregator::pool);
            break;
        case ModelKind::gnn_rnn:
            if (corn && !y2019) set(32, 5e-5, LrSchedule::cosine(5e-5, 100, 1e-6), 100, 1e-5, 0.1, Aggregator::pool);
            else if (corn) set(32, 5e-5, LrSchedule::cosine(5e-5, 200, 1e-6), 100, 1e-5, 0.1, Aggregator::pool);
            else if (!y2019) set(32, 1e-4, LrSchedule::cosine(1e-4, 100, 1e-6), 100, 1e-4, 0.1, Aggregator::pool);
            else set(32, 5e-5, LrSchedule::cosine(5e-5, 100, 1e-6), 100, 1e-5, 0.1, Aggregator::pool);
            break;
        default: {
            const double lr = corn ? 1e-4 : 5e-4;
            set(128, lr, LrSchedule::step(lr, 25, 0.5), 100, 1e-5, 0.0, Aggregator::pool);
        }
    }
    return s;
}

/// Applies `key = value` overrides on top of a spec.
inline ModelSpec apply_overrides(ModelSpec s, const std::map<std::string, std::string>& kv) {
    auto num = [&](const std::string& key, const std::string& v) {
        const auto d = parse_double(v);
        if (!d || !std::isfinite(*d)) throw ConfigError("malformed number for " + key + ": '" + v + "'");
        return *d;
    };
    auto count = [&](const std::string& key, const std::string& v) {
        const double d = num(key, v);
        if (d < 0 || d != std::floor(d)) throw ConfigError(key + " must be a non-negative integer, got '" + v + "'");
        return static_cast<std::size_t>(d);
    };
    std::optional<std::string> schedule_text;
    for (const auto& [key, v] : kv) {
        if (key == "kind") s.kind = parse_model_kind(v);
        else if (key == "crop") {
            try {
                s.crop = parse_crop(v);
            } catch (const InputError& e) {
                throw ConfigError(e.what());
            }
        } else if (key == "test_year") s.test_year = static_cast<int>(num(key, v));
        else if (key == "lr") s.lr = num(key, v);
        else if (key == "batch_size") s.batch_size = count(key, v);
        else if (key == "schedule") schedule_text = v;
        else if (key == "weight_decay") s.weight_decay = num(key, v);
        else if (key == "fanout") s.fanout = count(key, v);
        else if (key == "edge_dropout") s.edge_dropout = num(key, v);
        else if (key == "aggregator") {
            try {
                s.aggregator = parse_aggregator(v);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if (key == "epochs") s.epochs = static_cast<int>(count(key, v));
        else if (key == "seed") s.seed = count(key, v);
        else if (key == "lambda") s.lambda = v == "auto" ? -1.0 : num(key, v);
        else if (key == "weekly_plan") s.plan.weekly = EncoderPlan::parse_blocks(v, true, 4, "weekly_plan");
        else if (key == "soil_plan") s.plan.soil = EncoderPlan::parse_blocks(v, false, 3, "soil_plan");
        else if (key == "weekly_dim") s.plan.weekly_dim = count(key, v);
        else if (key == "soil_dim") s.plan.soil_dim = count(key, v);
        else if (key == "hidden") s.plan.hidden = count(key, v);
        else if (key == "head_dim") s.plan.head_dim = count(key, v);
        else throw ConfigError("unknown model key '" + key + "'");
    }
    try {
        if (schedule_text) s.schedule = LrSchedule::parse(*schedule_text, s.lr);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    s.schedule.lr_max = s.lr;
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Linear baselines

struct LinearModel {
    ModelKind kind = ModelKind::ridge;
    double lambda = 0.0;
    double intercept = 0.0;
    std::vector<double> coef;       // on standardized columns
    std::vector<double> col_mean;
    std::vector<double> col_scale;
    bool converged = true;
    int iterations = 0;

    double predict(const double* x) const {
        double s = intercept;
        for (std::size_t j = 0; j < coef.size(); ++j) s += coef[j] * ((x[j] - col_mean[j]) / col_scale[j]);
        return s;
    }

    std::size_t nonzero() const {
        return static_cast<std::size_t>(std::count_if(coef.begin(), coef.end(), [](double c) { return c != 0.0; }));
    }
};

/// Column standardization shared by both solvers (constant columns keep scale 1).
struct DesignMatrix {
    Eigen::MatrixXd z;  // standardized, n x p
    Eigen::VectorXd yc;  // centered targets
    std::vector<double> mean, scale;
    double y_mean = 0.0;
};

inline DesignMatrix standardize_design(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    if (x.rows() < 1 || x.rows() != y.size()) throw std::invalid_argument("design matrix and targets disagree");
    DesignMatrix d;
    const auto n = static_cast<double>(x.rows());
    d.mean.resize(x.cols());
    d.scale.resize(x.cols());
    d.z = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double m = x.col(j).sum() / n;
        const double sd = std::sqrt((x.col(j).array() - m).square().sum() / n);
        d.mean[j] = m;
        d.scale[j] = sd > 1e-12 ? sd : 1.0;
        d.z.col(j) = (x.col(j).array() - m) / d.scale[j];
    }
    d.y_mean = y.mean();
    d.yc = y.array() - d.y_mean;
    return d;
}

namespace detail {

inline LinearModel finish_linear(const DesignMatrix& d, ModelKind kind, double lambda, const Eigen::VectorXd& beta) {
    LinearModel m;
    m.kind = kind;
    m.lambda = lambda;
    m.intercept = d.y_mean;
    m.coef.assign(beta.data(), beta.data() + beta.size());
    m.col_mean = d.mean;
    m.col_scale = d.scale;
    return m;
}

inline Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xty, double lambda) {
    Eigen::MatrixXd a = gram;
    a.diagonal().array() += lambda;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    const double max_diag = a.diagonal().cwiseAbs().maxCoeff();
    bool singular = llt.info() != Eigen::Success;
    if (!singular) {
        const auto& l = llt.matrixL();
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            const double lii = l(i, i);
            if (!(lii * lii > 1e-10 * std::max(max_diag, 1.0))) singular = true;
        }
    }
    if (singular) {
        throw std::domain_error("ridge system is singular at lambda = " + format_double(lambda) +
                                "; use lambda > 0");
    }
    return llt.solve(xty);
}

} // namespace detail

/// Solves (Z'Z + lambda I) beta = Z'y on standardized, centered data.
inline LinearModel fit_ridge(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("ridge lambda must be non-negative");
    const DesignMatrix d = standardize_design(x, y);
    const Eigen::MatrixXd gram = d.z.transpose() * d.z;
    return detail::finish_linear(d, ModelKind::ridge, lambda, detail::ridge_solve(gram, d.z.transpose() * d.yc, lambda));
}

/// (1/2n)||y - Z beta||^2 + lambda ||beta||_1, per-sweep objective recorded when trace is given.
inline LinearModel fit_lasso(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, int max_iter = 10000,
                             double tol = 1e-7, std::vector<double>* objective_trace = nullptr,
                             const std::vector<double>* warm_start = nullptr) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lasso lambda must be non-negative");
    const DesignMatrix d = standardize_design(x, y);
    const Eigen::Index n = d.z.rows(), p = d.z.cols();
    const double nn = static_cast<double>(n);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    if (warm_start && static_cast<Eigen::Index>(warm_start->size()) == p)
        beta = Eigen::Map<const Eigen::VectorXd>(warm_start->data(), p);
    Eigen::VectorXd resid = d.yc - d.z * beta;
    Eigen::VectorXd col_sq(p);
    for (Eigen::Index j = 0; j < p; ++j) col_sq[j] = d.z.col(j).squaredNorm() / nn;
    auto objective = [&] { return resid.squaredNorm() / (2.0 * nn) + lambda * beta.cwiseAbs().sum(); };
    bool converged = false;
    int it = 0;
    for (; it < max_iter && !converged; ++it) {
        double max_change = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) {
            if (col_sq[j] == 0.0) {
                beta[j] = 0.0;
                continue;
            }
            const double old = beta[j];
            const double rho = d.z.col(j).dot(resid) / nn + col_sq[j] * old;
            const double next = rho > lambda ? (rho - lambda) / col_sq[j] : rho < -lambda ? (rho + lambda) / col_sq[j] : 0.0;
            if (next != old) {
                resid -= (next - old) * d.z.col(j);
                beta[j] = next;
                max_change = std::max(max_change, std::fabs(next - old));
            }
        }
        if (objective_trace) objective_trace->push_back(objective());
        converged = max_change < tol;
    }
    LinearModel m = detail::finish_linear(d, ModelKind::lasso, lambda, beta);
    m.converged = converged;
    m.iterations = it;
    return m;
}

// ---------------------------------------------------------------------------
// Deep models

/// A batch of prediction requests that share a target year.
struct BatchRequest {
    int year = 0;
    std::vector<std::size_t> counties;
};

/// h = (weekly encoder, soil CNN, extras). The weekly encoder is the CNN or,
/// for the 1y recurrent baselines, an LSTM/GRU over the 52 weekly steps.
class YearEmbedder {
public:
    YearEmbedder() = default;
    YearEmbedder(ParamStore& ps, const EncoderPlan& plan, ModelKind kind, Rng& rng) : plan_(plan) {
        if (kind == ModelKind::lstm || kind == ModelKind::gru) {
            recurrent_weekly_ = true;
            weekly_cell_ = RecurrentCell(ps, "weekly.rnn", kind == ModelKind::lstm ? CellKind::lstm : CellKind::gru,
                                         kWeeklyVars, plan.weekly_dim, rng);
        } else {
            weekly_ = Conv1dStack(ps, "weekly", kWeeklyVars, plan.weekly, rng);
            const std::size_t flat = weekly_.out_channels() * weekly_.output_length(kWeeks);
            weekly_fc_ = Dense(ps, "weekly.fc", flat, plan.weekly_dim, rng);
        }
        soil_ = Conv1dStack(ps, "soil", kSoilVars, plan.soil, rng);
        soil_fc_ = Dense(ps, "soil.fc", soil_.out_channels() * soil_.output_length(kSoilDepths), plan.soil_dim, rng);
    }

    std::size_t dim() const { return plan_.embed_dim(); }

    Tensor encode_weekly(const Tensor& weekly) const {
        if (weekly.rank() != 3 || weekly.dim(1) != kWeeklyVars || weekly.dim(2) != kWeeks) {
            throw ShapeError("weekly encoder expects [batch x 23 x 52], got " + shape_str(weekly.shape()));
        }
        const std::size_t b = weekly.dim(0);
        if (recurrent_weekly_) {
            std::vector<Tensor> steps;
            for (std::size_t w = 0; w < kWeeks; ++w) steps.push_back(reshape(slice(weekly, 2, w, w + 1), {b, kWeeklyVars}));
            return rnn_forward(weekly_cell_, steps);
        }
        const Tensor conv = weekly_.forward(weekly);
        return relu(weekly_fc_.forward(reshape(conv, {b, conv.size() / b})));
    }

    Tensor encode_soil(const Tensor& soil) const {
        if (soil.rank() != 3 || soil.dim(1) != kSoilVars || soil.dim(2) != kSoilDepths) {
            throw ShapeError("soil encoder expects [batch x 20 x 6], got " + shape_str(soil.shape()));
        }
        const std::size_t b = soil.dim(0);
        const Tensor conv = soil_.forward(soil);
        return relu(soil_fc_.forward(reshape(conv, {b, conv.size() / b})));
    }

    /// rows: one record per output row.
    Tensor forward(const std::vector<const YearFeatures*>& rows) const {
        const std::size_t b = rows.size();
        if (b == 0) throw std::invalid_argument("embedding an empty batch");
        std::vector<double> weekly(b * kWeeklyVars * kWeeks), soil(b * kSoilVars * kSoilDepths), extras(b * kExtras);
        for (std::size_t i = 0; i < b; ++i) {
            const auto& v = rows[i]->values;
            std::copy(v.begin(), v.begin() + kSoilOffset, weekly.begin() + i * kSoilOffset);
            std::copy(v.begin() + kSoilOffset, v.begin() + kExtrasOffset, soil.begin() + i * kSoilVars * kSoilDepths);
            std::copy(v.begin() + kExtrasOffset, v.end(), extras.begin() + i * kExtras);
        }
        return embed(Tensor::from({b, kWeeklyVars, kWeeks}, std::move(weekly)),
                     Tensor::from({b, kSoilVars, kSoilDepths}, std::move(soil)), Tensor::from({b, kExtras}, std::move(extras)));
    }

    Tensor embed(const Tensor& weekly, const Tensor& soil, const Tensor& extras) const {
        return concat({encode_weekly(weekly), encode_soil(soil), extras}, 1);
    }

private:
    EncoderPlan plan_;
    bool recurrent_weekly_ = false;
    RecurrentCell weekly_cell_;
    Conv1dStack weekly_, soil_;
    Dense weekly_fc_, soil_fc_;
};

/// Forward-only context that deep models need from the dataset.
struct FeatureSource {
    const Dataset* ds = nullptr;
    /// Optional replacement records (e.g. early-masked test year), keyed like Dataset::features.
    const std::map<std::pair<std::size_t, int>, YearFeatures>* overrides = nullptr;

    const YearFeatures* find(std::size_t county, int year) const {
        if (overrides) {
            auto it = overrides->find({county, year});
            if (it != overrides->end()) return &it->second;
        }
        return ds->find(county, year);
    }

    const YearFeatures& at(std::size_t county, int year) const {
        const YearFeatures* f = find(county, year);
        if (!f) throw WindowUnavailable(ds->graph.id(county), year);
        return *f;
    }

    bool window(std::size_t county, int year, int dt) const {
        for (int y = year - dt; y <= year; ++y)
            if (!find(county, y)) return false;
        return true;
    }
};

class DeepModel {
public:
    explicit DeepModel(const ModelSpec& spec) : spec_(spec) {
        if (!is_deep(spec.kind)) throw ConfigError(to_string(spec.kind) + " is not a deep model kind");
        Rng rng(spec.seed);
        const auto& plan = spec.plan;
        std::size_t head_in = plan.hidden;
        if (uses_embedding(spec.kind)) {
            embed_ = YearEmbedder(ps_, plan, spec.kind, rng);
            head_in = embed_.dim();
        }
        if (uses_graph(spec.kind)) {
            sage_.emplace_back(ps_, "sage0", embed_.dim(), plan.hidden, spec.aggregator, rng);
            sage_.emplace_back(ps_, "sage1", plan.hidden, plan.hidden, spec.aggregator, rng);
            head_in = plan.hidden;
        }
        switch (spec.kind) {
            case ModelKind::cnn_rnn:
                temporal_ = RecurrentCell(ps_, "temporal", CellKind::lstm, embed_.dim(), plan.hidden, rng);
                head_in = plan.hidden;
                break;
            case ModelKind::gnn_rnn:
                temporal_ = RecurrentCell(ps_, "temporal", CellKind::lstm, plan.hidden, plan.hidden, rng);
                head_in = plan.hidden;
                break;
            case ModelKind::lstm_5y:
            case ModelKind::gru_5y:
                temporal_ = RecurrentCell(ps_, "temporal", spec.kind == ModelKind::lstm_5y ? CellKind::lstm : CellKind::gru,
                                          kFeatureWidth, plan.hidden, rng);
                head_in = plan.hidden;
                break;
            default: break;
        }
        head1_ = Dense(ps_, "head.fc1", head_in, plan.head_dim, rng);
        head2_ = Dense(ps_, "head.fc2", plan.head_dim, 1, rng);
    }

    DeepModel(const DeepModel&) = delete;
    DeepModel& operator=(const DeepModel&) = delete;

    const ModelSpec& spec() const { return spec_; }
    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const YearEmbedder& embedder() const { return embed_; }
    const std::vector<SageLayer>& sage() const { return sage_; }
    const RecurrentCell& temporal() const { return temporal_; }
    const Dense& head_hidden() const { return head1_; }
    const Dense& head_out() const { return head2_; }

    std::vector<Tensor> parameter_list() const {
        std::vector<Tensor> out;
        for (const auto& [_, t] : ps_.entries()) out.push_back(t);
        return out;
    }

    /// Counties that can send messages for a target year (features for every needed year).
    std::function<bool(std::size_t)> available(const FeatureSource& src, int year) const {
        const int dt = spec_.history();
        return [&src, year, dt](std::size_t c) { return src.window(c, year, dt); };
    }

    /// Graph kinds sample a block (training) or take the full neighborhood (inference).
    SampledBlock make_block(const FeatureSource& src, const BatchRequest& req, bool training, std::uint64_t seed) const {
        SamplerOptions opt;
        opt.fanout = spec_.fanout;
        opt.layers = sage_.size();
        opt.edge_dropout = training ? spec_.edge_dropout : 0.0;
        opt.available = available(src, req.year);
        if (!training) opt.fanout = std::max<std::size_t>({spec_.fanout, src.ds->graph.max_degree(), 1});
        return sample_block(src.ds->graph, req.counties, opt, seed);
    }

    /// Standardized predictions [batch].
    Tensor forward(const FeatureSource& src, const BatchRequest& req, const SampledBlock* block = nullptr) const {
        const std::size_t b = req.counties.size();
        if (b == 0) throw std::invalid_argument("empty batch");
        const int dt = spec_.history();
        Tensor h;
        switch (spec_.kind) {
            case ModelKind::gru:
            case ModelKind::lstm:
            case ModelKind::cnn: {
                std::vector<const YearFeatures*> rows;
                for (std::size_t c : req.counties) rows.push_back(&src.at(c, req.year));
                h = embed_.forward(rows);
                break;
            }
            case ModelKind::lstm_5y:
            case ModelKind::gru_5y: {
                std::vector<Tensor> seq;
                for (int k = 0; k <= dt; ++k) {
                    std::vector<double> x(b * kFeatureWidth);
                    for (std::size_t i = 0; i < b; ++i) {
                        const auto& v = src.at(req.counties[i], req.year - dt + k).values;
                        std::copy(v.begin(), v.end(), x.begin() + i * kFeatureWidth);
                    }
                    seq.push_back(Tensor::from({b, kFeatureWidth}, std::move(x)));
                }
                h = rnn_forward(temporal_, seq);
                break;
            }
            case ModelKind::cnn_rnn: {
                std::vector<const YearFeatures*> rows;
                for (int k = 0; k <= dt; ++k)
                    for (std::size_t c : req.counties) rows.push_back(&src.at(c, req.year - dt + k));
                const Tensor e = embed_.forward(rows);
                std::vector<Tensor> seq;
                for (int k = 0; k <= dt; ++k) seq.push_back(slice(e, 0, k * b, (k + 1) * b));
                h = rnn_forward(temporal_, seq);
                break;
            }
            case ModelKind::gnn:
            case ModelKind::gnn_rnn: {
                if (!block) throw ConfigError(to_string(spec_.kind) + " needs a sampled graph block");
                const auto& inputs = block->input_nodes();
                const std::size_t ni = inputs.size();
                std::vector<const YearFeatures*> rows;
                for (int k = 0; k <= dt; ++k)
                    for (std::size_t c : inputs) rows.push_back(&src.at(c, req.year - dt + k));
                const Tensor e = embed_.forward(rows);
                std::vector<Tensor> seq;
                for (int k = 0; k <= dt; ++k) {
                    const Tensor base = dt == 0 ? e : slice(e, 0, k * ni, (k + 1) * ni);
                    seq.push_back(gnn_forward(sage_, *block, base));
                }
                h = dt == 0 ? seq.front() : rnn_forward(temporal_, seq);
                break;
            }
            default: throw ConfigError("unsupported kind");
        }
        const Tensor out = head2_.forward(relu(head1_.forward(h)));
        return reshape(out, {b});
    }

private:
    ModelSpec spec_;
    ParamStore ps_;
    YearEmbedder embed_;
    std::vector<SageLayer> sage_;
    RecurrentCell temporal_;
    Dense head1_, head2_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct ModelCheckpoint {
    ModelSpec spec;
    NormStats norm;
    TargetScaler target;
    std::vector<std::pair<std::string, std::vector<double>>> params;
    std::vector<double> train_loss, val_rmse;
    int best_epoch = -1;
    LinearModel linear;
    std::size_t skipped_windows = 0;
};

inline constexpr const char* kCheckpointMagic = "yieldgraph-checkpoint v1";

namespace detail {

inline void write_block(std::ostream& out, const std::string& name, const std::vector<double>& v) {
    out << "block " << name << ' ' << v.size() << '\n';
    for (double d : v) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 8);
    }
    out << '\n';
}

template <std::size_t N>
std::vector<double> to_vec(const std::array<double, N>& a) {
    return std::vector<double>(a.begin(), a.end());
}

} // namespace detail

inline void save_checkpoint(std::ostream& out, const ModelCheckpoint& ck) {
    out << kCheckpointMagic << '\n';
    for (const auto& [k, v] : ck.spec.to_kv()) out << k << " = " << v << '\n';
    out << "best_epoch = " << ck.best_epoch << '\n';
    out << "skipped_windows = " << ck.skipped_windows << '\n';
    out << "norm_years = ";
    for (std::size_t i = 0; i < ck.norm.source_years.size(); ++i) out << (i ? "," : "") << ck.norm.source_years[i];
    out << '\n';
    out << "linear_converged = " << (ck.linear.converged ? 1 : 0) << '\n';
    out << "end\n";
    detail::write_block(out, "norm.mean", detail::to_vec(ck.norm.mean));
    detail::write_block(out, "norm.std", detail::to_vec(ck.norm.std));
    std::vector<double> constant;
    for (bool b : ck.norm.constant) constant.push_back(b ? 1.0 : 0.0);
    detail::write_block(out, "norm.constant", constant);
    detail::write_block(out, "target", {ck.target.mean, ck.target.std});
    detail::write_block(out, "history.train_loss", ck.train_loss);
    detail::write_block(out, "history.val_rmse", ck.val_rmse);
    if (is_linear(ck.spec.kind)) {
        detail::write_block(out, "linear.intercept", {ck.linear.intercept, ck.linear.lambda});
        detail::write_block(out, "linear.coef", ck.linear.coef);
        detail::write_block(out, "linear.col_mean", ck.linear.col_mean);
        detail::write_block(out, "linear.col_scale", ck.linear.col_scale);
    }
    for (const auto& [name, v] : ck.params) detail::write_block(out, "param." + name, v);
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write checkpoint " + path.string());
    save_checkpoint(out, ck);
    if (!out) throw InputError("failed writing checkpoint " + path.string());
}

inline ModelCheckpoint load_checkpoint(std::istream& in, const std::string& source = "checkpoint") {
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic) {
        throw InputError(source + ": not a yieldgraph checkpoint (bad header)");
    }
    std::map<std::string, std::string> spec_kv;
    std::map<std::string, std::string> meta;
    const auto& spec_keys = ModelSpec::keys();
    while (true) {
        if (!std::getline(in, line)) throw InputError(source + ": truncated header");
        if (line == "end") break;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw InputError(source + ": malformed header line '" + line + "'");
        const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
        if (std::find(spec_keys.begin(), spec_keys.end(), key) != spec_keys.end()) spec_kv[key] = value;
        else meta[key] = value;
    }
    ModelCheckpoint ck;
    try {
        const ModelKind kind = parse_model_kind(spec_kv.at("kind"));
        ck.spec = apply_overrides(default_spec(kind, Crop::corn, 2019), spec_kv);
        ck.best_epoch = std::stoi(meta.at("best_epoch"));
        ck.skipped_windows = std::stoul(meta.at("skipped_windows"));
        std::stringstream ys(meta.at("norm_years"));
        for (std::string y; std::getline(ys, y, ',');) ck.norm.source_years.push_back(std::stoi(y));
        ck.linear.converged = meta.at("linear_converged") == "1";
    } catch (const std::out_of_range&) {
        throw InputError(source + ": checkpoint header is missing a required key");
    } catch (const std::invalid_argument& e) {
        throw InputError(source + ": bad checkpoint header: " + e.what());
    }
    std::map<std::string, std::vector<double>> blocks;
    std::vector<std::string> order;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream hs(line);
        std::string tag, name;
        std::size_t count = 0;
        if (!(hs >> tag >> name >> count) || tag != "block") throw InputError(source + ": malformed block header '" + line + "'");
        std::vector<double> v(count);
        for (std::size_t i = 0; i < count; ++i) {
            unsigned char b[8];
            if (!in.read(reinterpret_cast<char*>(b), 8)) throw InputError(source + ": truncated block " + name);
            std::uint64_t bits = 0;
            for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
            v[i] = std::bit_cast<double>(bits);
        }
        if (in.get() != '\n') throw InputError(source + ": block " + name + " is not newline-terminated");
        order.push_back(name);
        blocks[name] = std::move(v);
    }
    auto take = [&](const std::string& name, std::size_t expected) {
        auto it = blocks.find(name);
        if (it == blocks.end()) throw InputError(source + ": missing block " + name);
        if (expected && it->second.size() != expected) throw InputError(source + ": block " + name + " has wrong length");
        return it->second;
    };
    const auto mean = take("norm.mean", kChannels), sd = take("norm.std", kChannels), cst = take("norm.constant", kChannels);
    for (std::size_t c = 0; c < kChannels; ++c) {
        ck.norm.mean[c] = mean[c];
        ck.norm.std[c] = sd[c];
        ck.norm.constant[c] = cst[c] != 0.0;
    }
    const auto tgt = take("target", 2);
    ck.target = {tgt[0], tgt[1]};
    ck.train_loss = take("history.train_loss", 0);
    ck.val_rmse = take("history.val_rmse", 0);
    if (is_linear(ck.spec.kind)) {
        const auto ic = take("linear.intercept", 2);
        ck.linear.kind = ck.spec.kind;
        ck.linear.intercept = ic[0];
        ck.linear.lambda = ic[1];
        ck.linear.coef = take("linear.coef", kFeatureWidth);
        ck.linear.col_mean = take("linear.col_mean", kFeatureWidth);
        ck.linear.col_scale = take("linear.col_scale", kFeatureWidth);
    }
    for (const auto& name : order)
        if (name.rfind("param.", 0) == 0) ck.params.emplace_back(name.substr(6), blocks[name]);
    return ck;
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint " + path.string());
    return load_checkpoint(in, path.string());
}

inline std::vector<std::pair<std::string, std::vector<double>>> snapshot(const DeepModel& m) {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    for (const auto& [name, t] : m.params().entries()) out.emplace_back(name, t.values());
    return out;
}

inline std::unique_ptr<DeepModel> restore_model(const ModelCheckpoint& ck) {
    auto m = std::make_unique<DeepModel>(ck.spec);
    if (ck.params.size() != m->params().size()) {
        throw InputError("checkpoint has " + std::to_string(ck.params.size()) + " parameter blocks, architecture needs " +
                         std::to_string(m->params().size()));
    }
    for (const auto& [name, v] : ck.params) {
        try {
            m->params().load_values(name, v);
        } catch (const std::exception& e) {
            throw InputError(std::string("checkpoint does not match the architecture: ") + e.what());
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Prediction

/// Prepares a raw dataset for a checkpoint: previous-year yield extra, then its normalization.
inline Dataset prepare_dataset(const Dataset& raw, const ModelCheckpoint& ck) {
    Dataset ds = raw;
    fill_previous_yield(ds, ck.spec.crop);
    return apply_norm(std::move(ds), ck.norm);
}

/// Standardized predictions for (year, counties) from a prepared dataset.
class Predictor {
public:
    explicit Predictor(ModelCheckpoint ck) : ck_(std::move(ck)) {
        if (is_deep(ck_.spec.kind)) {
            owned_ = restore_model(ck_);
            model_ = owned_.get();
        }
    }

    /// Wraps a live model (parameters are read at call time).
    Predictor(ModelCheckpoint ck, const DeepModel* live) : ck_(std::move(ck)), model_(live) {}

    const ModelCheckpoint& checkpoint() const { return ck_; }
    const DeepModel* model() const { return model_; }

    /// raw: unnormalized dataset, used only by the oracle kind.
    std::vector<double> predict(const FeatureSource& src, const BatchRequest& req, const Dataset* raw = nullptr) const {
        std::vector<double> out;
        const auto kind = ck_.spec.kind;
        if (kind == ModelKind::oracle) {
            if (!raw) throw ConfigError("the oracle kind needs the raw dataset");
            for (std::size_t c : req.counties) {
                const auto y = raw->yield(c, req.year, ck_.spec.crop);
                if (!y) throw InputError("oracle asked for an unlabeled county " + raw->graph.id(c));
                out.push_back(ck_.target.standardize(*y));
            }
            return out;
        }
        if (is_linear(kind)) {
            for (std::size_t c : req.counties) out.push_back(ck_.linear.predict(src.at(c, req.year).values.data()));
            return out;
        }
        constexpr std::size_t kChunk = 128;
        for (std::size_t s = 0; s < req.counties.size(); s += kChunk) {
            BatchRequest part{req.year, {}};
            part.counties.assign(req.counties.begin() + s, req.counties.begin() + std::min(req.counties.size(), s + kChunk));
            std::optional<SampledBlock> block;
            if (uses_graph(kind)) block = model_->make_block(src, part, false, 0);
            const Tensor p = model_->forward(src, part, block ? &*block : nullptr);
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
        return out;
    }

private:
    ModelCheckpoint ck_;
    std::unique_ptr<DeepModel> owned_;
    const DeepModel* model_ = nullptr;
};

/// Single-sample helpers. Graph kinds need the dataset the county lives in.
struct GraphContext {
    const Dataset* ds;
    std::size_t county;
};

inline double predict_1y(const Predictor& p, const YearFeatures& x, const GraphContext* ctx = nullptr) {
    const auto& spec = p.checkpoint().spec;
    if (spec.history() != 0) throw ConfigError(to_string(spec.kind) + " needs a 5-year window");
    if (uses_graph(spec.kind) != (ctx != nullptr)) {
        throw ConfigError(uses_graph(spec.kind) ? "gnn prediction needs graph context"
                                                : to_string(spec.kind) + " does not take graph context");
    }
    if (ctx) {
        std::map<std::pair<std::size_t, int>, YearFeatures> over{{{ctx->county, x.year}, x}};
        FeatureSource src{ctx->ds, &over};
        return p.predict(src, {x.year, {ctx->county}}).at(0);
    }
    Dataset one;
    one.graph = CountyGraph({x.county}, {});
    one.features.emplace(std::make_pair(std::size_t{0}, x.year), x);
    FeatureSource src{&one, nullptr};
    return p.predict(src, {x.year, {0}}).at(0);
}

inline double predict_5y(const Predictor& p, const std::vector<YearFeatures>& window, const GraphContext* ctx = nullptr) {
    const auto& spec = p.checkpoint().spec;
    if (spec.history() != 4) throw ConfigError(to_string(spec.kind) + " is a single-year model");
    if (window.size() != 5) throw std::invalid_argument("5-year models need exactly 5 years, got " + std::to_string(window.size()));
    for (std::size_t k = 1; k < window.size(); ++k) {
        if (window[k].year != window[k - 1].year + 1) throw std::invalid_argument("window years must be consecutive, oldest first");
    }
    if (uses_graph(spec.kind) != (ctx != nullptr)) {
        throw ConfigError(uses_graph(spec.kind) ? "gnn-rnn prediction needs graph context"
                                                : to_string(spec.kind) + " does not take graph context");
    }
    const int year = window.back().year;
    std::map<std::pair<std::size_t, int>, YearFeatures> over;
    Dataset one;
    const Dataset* ds = ctx ? ctx->ds : &one;
    const std::size_t county = ctx ? ctx->county : 0;
    if (!ctx) one.graph = CountyGraph({window.back().county}, {});
    for (const auto& f : window) over.emplace(std::make_pair(county, f.year), f);
    FeatureSource src{ds, &over};
    return p.predict(src, {year, {county}}).at(0);
}

// ---------------------------------------------------------------------------
// Training

struct Sample {
    std::size_t county;
    int year;
    double target;  // standardized
};

struct EpochLog {
    int epoch;
    double lr;
    double train_loss;
    double val_rmse;
};

struct TrainOptions {
    std::function<void(const EpochLog&)> on_epoch;
};

/// Labeled (county, year) pairs with a complete history window.
inline std::vector<Sample> collect_samples(const Dataset& raw, const FeatureSource& src, const std::vector<int>& years,
                                           Crop crop, int dt, const TargetScaler& scaler, SkipReport* skips = nullptr) {
    std::vector<Sample> out;
    for (int y : years) {
        for (std::size_t c = 0; c < raw.graph.size(); ++c) {
            const auto t = raw.yield(c, y, crop);
            if (!t || !src.find(c, y)) continue;
            if (!src.window(c, y, dt)) {
                if (skips) skips->samples.emplace_back(raw.graph.id(c), y);
                continue;
            }
            out.push_back({c, y, scaler.standardize(*t)});
        }
    }
    return out;
}

/// RMSE in yield units over samples.
inline double samples_rmse(const Predictor& p, const FeatureSource& src, const std::vector<Sample>& samples,
                           const TargetScaler& scaler) {
    if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::map<int, std::vector<std::size_t>> by_year;
    std::map<int, std::vector<double>> targets;
    for (const auto& s : samples) {
        by_year[s.year].push_back(s.county);
        targets[s.year].push_back(s.target);
    }
    double ss = 0.0;
    for (const auto& [year, counties] : by_year) {
        const auto pred = p.predict(src, {year, counties});
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double r = (pred[i] - targets[year][i]) * scaler.std;
            ss += r * r;
        }
    }
    return std::sqrt(ss / static_cast<double>(samples.size()));
}

namespace detail {

inline Eigen::MatrixXd design_rows(const FeatureSource& src, const std::vector<Sample>& s, Eigen::VectorXd* y) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(kFeatureWidth));
    if (y) y->resize(static_cast<Eigen::Index>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto& v = src.at(s[i].county, s[i].year).values;
        for (std::size_t j = 0; j < kFeatureWidth; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
        if (y) (*y)[static_cast<Eigen::Index>(i)] = s[i].target;
    }
    return x;
}

inline double linear_rmse(const LinearModel& m, const FeatureSource& src, const std::vector<Sample>& s, double scale) {
    double ss = 0.0;
    for (const auto& smp : s) {
        const double r = (m.predict(src.at(smp.county, smp.year).values.data()) - smp.target) * scale;
        ss += r * r;
    }
    return std::sqrt(ss / static_cast<double>(s.size()));
}

inline void train_linear(ModelCheckpoint& ck, const FeatureSource& src, const std::vector<Sample>& train,
                         const std::vector<Sample>& val) {
    Eigen::VectorXd y;
    const Eigen::MatrixXd x = design_rows(src, train, &y);
    const double n = static_cast<double>(train.size());
    const auto& spec = ck.spec;
    std::vector<double> grid;
    if (spec.lambda >= 0.0) grid = {spec.lambda};
    if (spec.kind == ModelKind::ridge) {
        if (grid.empty()) grid = {1e-3 * n, 1e-2 * n, 1e-1 * n, n, 10.0 * n, 100.0 * n};
        const DesignMatrix d = standardize_design(x, y);
        const Eigen::MatrixXd gram = d.z.transpose() * d.z;
        const Eigen::VectorXd xty = d.z.transpose() * d.yc;
        double best = std::numeric_limits<double>::infinity();
        for (double lam : grid) {
            LinearModel m = finish_linear(d, ModelKind::ridge, lam, ridge_solve(gram, xty, lam));
            const double r = val.empty() ? 0.0 : linear_rmse(m, src, val, ck.target.std);
            ck.val_rmse.push_back(r);
            if (r < best) {
                best = r;
                ck.linear = std::move(m);
                ck.best_epoch = static_cast<int>(ck.val_rmse.size()) - 1;
            }
        }
    } else {
        if (grid.empty()) {
            const DesignMatrix d = standardize_design(x, y);
            const double lmax = (d.z.transpose() * d.yc).cwiseAbs().maxCoeff() / n;
            for (int k = 1; k <= 8; ++k) grid.push_back(lmax * std::pow(0.5, k));
        }
        double best = std::numeric_limits<double>::infinity();
        std::vector<double> warm;
        for (double lam : grid) {
            LinearModel m = fit_lasso(x, y, lam, 2000, 1e-6, nullptr, &warm);
            warm = m.coef;
            const double r = val.empty() ? 0.0 : linear_rmse(m, src, val, ck.target.std);
            ck.val_rmse.push_back(r);
            if (r < best) {
                best = r;
                ck.linear = std::move(m);
                ck.best_epoch = static_cast<int>(ck.val_rmse.size()) - 1;
            }
        }
    }
    ck.train_loss.push_back(linear_rmse(ck.linear, src, train, ck.target.std));
}

} // namespace detail

/// Trains spec on raw (unnormalized) data and returns the best-validation checkpoint.
inline ModelCheckpoint train(const ModelSpec& spec, const Dataset& raw, const YearSplit& split,
                             const TrainOptions& options = {}) {
    spec.validate();
    ModelCheckpoint ck;
    ck.spec = spec;
    Dataset filled = raw;
    fill_previous_yield(filled, spec.crop);
    ck.norm = compute_norm_stats(filled, split);
    const Dataset ds = apply_norm(std::move(filled), ck.norm);
    ck.target = fit_target_scaler(raw, split, spec.crop);
    // The oracle only needs the scalers; it reads stored truth at prediction time.
    if (spec.kind == ModelKind::oracle) return ck;
    const FeatureSource src{&ds, nullptr};
    const int dt = spec.history();

    SkipReport skips;
    const auto train_samples = collect_samples(raw, src, split.train_years, spec.crop, dt, ck.target, &skips);
    const auto val_samples = collect_samples(raw, src, {split.val_year}, spec.crop, dt, ck.target, &skips);
    ck.skipped_windows = skips.count();
    if (train_samples.empty()) throw InputError("empty training set: no labeled samples with complete windows");

    if (is_linear(spec.kind)) {
        if (dt != 0) throw ConfigError("linear kinds are single-year");
        detail::train_linear(ck, src, train_samples, val_samples);
        return ck;
    }

    DeepModel model(spec);
    auto params = model.parameter_list();
    AdamState adam;
    adam.weight_decay = spec.weight_decay;
    Rng rng(spec.seed ^ 0x5eed5eedULL);
    double best_val = std::numeric_limits<double>::infinity();
    std::map<int, std::vector<Sample>> by_year;
    for (const auto& s : train_samples) by_year[s.year].push_back(s);

    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        adam.lr = lr_at(spec.schedule, epoch);
        std::vector<std::vector<Sample>> batches;
        for (auto& [year, list] : by_year) {
            std::vector<Sample> shuffled = list;
            rng.shuffle(shuffled);
            for (std::size_t s = 0; s < shuffled.size(); s += spec.batch_size)
                batches.emplace_back(shuffled.begin() + s, shuffled.begin() + std::min(shuffled.size(), s + spec.batch_size));
        }
        rng.shuffle(batches);
        double loss_sum = 0.0;
        std::size_t loss_n = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& batch = batches[bi];
            BatchRequest req{batch.front().year, {}};
            std::vector<double> target;
            for (const auto& s : batch) {
                req.counties.push_back(s.county);
                target.push_back(s.target);
            }
            const std::uint64_t block_seed = rng.next();
            std::optional<SampledBlock> block;
            if (uses_graph(spec.kind)) block = model.make_block(src, req, true, block_seed);
            try {
                const Tensor pred = model.forward(src, req, block ? &*block : nullptr);
                const Tensor loss = logcosh_loss(pred, Tensor::vector(target));
                backward(loss);
                adam_step(params, adam);
                loss_sum += loss.item() * static_cast<double>(batch.size());
                loss_n += batch.size();
            } catch (const NumericalError& e) {
                throw NumericalError("training aborted at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(bi) + ": " + e.what());
            }
            model.params().zero_grad();
        }
        const double train_loss = loss_sum / static_cast<double>(loss_n);
        double val_rmse = std::numeric_limits<double>::quiet_NaN();
        if (!val_samples.empty()) {
            ModelCheckpoint probe;
            probe.spec = spec;
            const Predictor p(std::move(probe), &model);
            val_rmse = samples_rmse(p, src, val_samples, ck.target);
        }
        ck.train_loss.push_back(train_loss);
        ck.val_rmse.push_back(val_rmse);
        const bool better = val_samples.empty() ? true : val_rmse < best_val;
        if (better) {
            best_val = val_rmse;
            ck.best_epoch = epoch;
            ck.params = snapshot(model);
        }
        if (options.on_epoch) options.on_epoch({epoch, adam.lr, train_loss, val_rmse});
    }
    return ck;
}

} // namespace yieldgraph
