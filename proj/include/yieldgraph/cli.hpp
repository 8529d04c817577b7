#pragma once

// Subcommands of the yieldgraph tool. Each takes a resolved key/value config,
// writes into an output directory and echoes the config it ran with.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "yieldgraph/dataset.hpp"
#include "yieldgraph/evaluation.hpp"
#include "yieldgraph/geo.hpp"
#include "yieldgraph/models.hpp"

namespace yieldgraph::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInternal = 1, kInputError = 2, kNumericalAbort = 3 };

using Config = std::map<std::string, std::string>;

// ---------------------------------------------------------------------------
// Config handling

inline Config load_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read config file " + path.string());
    return parse_key_values(in, path.string());
}

/// `--key value` / `--key=value` pairs; dashes inside keys become underscores,
/// except in a `<kind>.` prefix (kind names such as cnn-rnn keep theirs).
inline Config parse_overrides(const std::vector<std::string>& tokens) {
    Config kv;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        if (t.size() < 3 || t.rfind("--", 0) != 0) throw InputError("unexpected argument '" + t + "'");
        std::string key = t.substr(2), value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= tokens.size()) throw InputError("option --" + key + " needs a value");
            value = tokens[++i];
        }
        const auto dot = key.rfind('.');
        std::replace(key.begin() + static_cast<std::ptrdiff_t>(dot == std::string::npos ? 0 : dot + 1), key.end(), '-', '_');
        kv[key] = value;
    }
    return kv;
}

inline void check_keys(const Config& cfg, const std::set<std::string>& allowed, const std::string& command,
                       bool allow_kind_prefix = false) {
    for (const auto& [key, _] : cfg) {
        if (allowed.count(key)) continue;
        if (allow_kind_prefix) {
            const auto dot = key.find('.');
            if (dot != std::string::npos) {
                try {
                    parse_model_kind(key.substr(0, dot));
                    const std::string rest = key.substr(dot + 1);
                    const auto& mk = ModelSpec::keys();
                    if (rest == "seeds" || (std::find(mk.begin(), mk.end(), rest) != mk.end() && rest != "kind")) continue;
                } catch (const ConfigError&) {
                }
            }
        }
        throw ConfigError("unknown key '" + key + "' for " + command);
    }
}

inline std::string get(const Config& cfg, const std::string& key, const std::string& fallback) {
    auto it = cfg.find(key);
    return it == cfg.end() ? fallback : it->second;
}

inline const std::string& require(const Config& cfg, const std::string& key, const std::string& command) {
    auto it = cfg.find(key);
    if (it == cfg.end() || it->second.empty()) throw ConfigError(command + " needs '" + key + "'");
    return it->second;
}

inline long long get_int(const Config& cfg, const std::string& key, long long fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    const auto d = parse_double(it->second);
    if (!d || *d != std::floor(*d)) throw ConfigError(key + " must be an integer, got '" + it->second + "'");
    return static_cast<long long>(*d);
}

inline double get_double(const Config& cfg, const std::string& key, double fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    const auto d = parse_double(it->second);
    if (!d || !std::isfinite(*d)) throw ConfigError(key + " must be a number, got '" + it->second + "'");
    return *d;
}

inline bool get_bool(const Config& cfg, const std::string& key, bool fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw ConfigError(key + " must be true or false, got '" + it->second + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

/// Refuses to reuse a non-empty directory unless forced.
inline void prepare_out_dir(const fs::path& dir, bool force) {
    std::error_code ec;
    if (fs::exists(dir, ec)) {
        if (!fs::is_directory(dir, ec)) throw InputError("output path " + dir.string() + " is not a directory");
        if (!fs::is_empty(dir, ec) && !force) {
            throw InputError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
        }
    }
    fs::create_directories(dir, ec);
    if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
}

/// config.resolved: sorted `key = value` lines. The output location is not part
/// of the echo, so two runs into different directories produce identical trees.
inline void write_resolved(const fs::path& dir, const Config& cfg) {
    std::ofstream out(dir / "config.resolved", std::ios::binary);
    if (!out) throw InputError("cannot write " + (dir / "config.resolved").string());
    for (const auto& [k, v] : cfg)
        if (k != "out") out << k << " = " << v << '\n';
}

/// YIELDGRAPH_THREADS caps worker threads (default: hardware concurrency).
inline std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("YIELDGRAPH_THREADS")) {
        const auto v = parse_double(env);
        if (!v || *v < 1 || *v != std::floor(*v)) throw ConfigError("YIELDGRAPH_THREADS must be a positive integer");
        n = std::min(n, static_cast<std::size_t>(*v));
    }
    return n;
}

inline const std::set<std::string>& dataset_keys() {
    static const std::set<std::string> k = {"data", "features", "yields", "adjacency"};
    return k;
}

/// Either `data` (a directory in the save_dataset layout) or the three file paths.
inline Dataset load_configured_dataset(Config& cfg, const std::string& command) {
    if (cfg.count("data")) {
        const fs::path d = cfg["data"];
        cfg["features"] = (d / "features.csv").string();
        cfg["yields"] = (d / "yields.csv").string();
        cfg["adjacency"] = (d / "adjacency.tsv").string();
        cfg.erase("data");
    }
    return load_dataset(require(cfg, "features", command), require(cfg, "yields", command),
                        require(cfg, "adjacency", command));
}

inline void add_spec(Config& cfg, const ModelSpec& s) {
    for (const auto& [k, v] : s.to_kv()) cfg[k] = v;
}

/// default_spec for (kind, crop, test_year) plus every other model key found in cfg.
inline ModelSpec resolve_spec(const Config& cfg, ModelKind kind, Crop crop, int test_year,
                              const std::string& prefix = "") {
    std::map<std::string, std::string> over;
    for (const auto& k : ModelSpec::keys()) {
        if (k == "kind" || k == "crop" || k == "test_year") continue;
        auto it = cfg.find(prefix + k);
        if (it != cfg.end()) over[k] = it->second;
    }
    return apply_overrides(default_spec(kind, crop, test_year), over);
}

// ---------------------------------------------------------------------------
// synth

inline int cmd_synth(Config cfg, const fs::path& out, bool force, std::ostream& log) {
    check_keys(cfg, {"out", "n_counties", "n_years", "grid_side", "base_year", "seed", "label_dropout"}, "synth");
    SynthOptions o;
    const long long n = get_int(cfg, "n_counties", 100);
    if (n <= 0) throw ConfigError("n_counties must be positive");
    o.n_counties = static_cast<std::size_t>(n);
    const long long years = get_int(cfg, "n_years", 20);
    if (years <= 0) throw ConfigError("n_years must be positive");
    o.n_years = static_cast<std::size_t>(years);
    const auto side = static_cast<long long>(std::llround(std::sqrt(static_cast<double>(n))));
    const long long g = get_int(cfg, "grid_side", side);
    if (g <= 0) throw ConfigError("grid_side must be positive");
    o.grid_side = static_cast<std::size_t>(g);
    o.base_year = static_cast<int>(get_int(cfg, "base_year", 2000));
    const long long seed = get_int(cfg, "seed", 7);
    if (seed < 0) throw ConfigError("seed must be non-negative");
    o.seed = static_cast<std::uint64_t>(seed);
    o.label_dropout = get_double(cfg, "label_dropout", 0.05);
    const Dataset ds = generate_synthetic(o);
    prepare_out_dir(out, force);
    save_dataset(out, ds);
    Config echo{{"n_counties", std::to_string(o.n_counties)}, {"n_years", std::to_string(o.n_years)},
                {"grid_side", std::to_string(o.grid_side)}, {"base_year", std::to_string(o.base_year)},
                {"seed", std::to_string(o.seed)}, {"label_dropout", format_double(o.label_dropout)}};
    write_resolved(out, echo);
    log << "wrote " << ds.graph.size() << " counties x " << ds.years.size() << " years to " << out.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// aggregate

struct ManifestRow {
    int year;
    std::string variable;
    int day;  // 1-based; 0 for static columns
    std::string kind;
    std::string file;
};

/// Header `year,variable,day,kind,file`. Weekly variables list one raster per
/// day with kind flux/state/max; soil and extra columns use their full feature
/// column name, an empty day and kind `static`.
inline std::vector<ManifestRow> parse_manifest(std::istream& in, const std::string& source) {
    std::string line;
    if (!std::getline(in, line)) throw InputError(source + ": empty manifest");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "year,variable,day,kind,file") throw InputError(source + ":1: header must be 'year,variable,day,kind,file'");
    std::vector<ManifestRow> rows;
    std::size_t lineno = 1;
    const auto& cols = feature_columns();
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv(line);
        const std::string where = source + ":" + std::to_string(lineno) + ": ";
        if (f.size() != 5) throw InputError(where + "expected 5 fields, got " + std::to_string(f.size()));
        const auto year = parse_double(f[0]);
        if (!year || *year != std::floor(*year)) throw InputError(where + "malformed year");
        ManifestRow r{static_cast<int>(*year), std::string(f[1]), 0, std::string(f[3]), std::string(f[4])};
        if (r.kind == "static") {
            if (!f[2].empty()) throw InputError(where + "static columns take an empty day");
            if (r.variable.rfind("s_", 0) != 0 && r.variable.rfind("e_", 0) != 0) {
                throw InputError(where + "static variable must be a soil (s_) or extra (e_) column");
            }
            if (std::find(cols.begin(), cols.end(), r.variable) == cols.end()) {
                throw InputError(where + "unknown feature column '" + r.variable + "'");
            }
        } else {
            try {
                parse_variable_kind(r.kind);
            } catch (const InputError& e) {
                throw InputError(where + e.what());
            }
            const auto& w = weather_vars();
            const auto& l = land_vars();
            if (std::find(w.begin(), w.end(), r.variable) == w.end() && std::find(l.begin(), l.end(), r.variable) == l.end()) {
                throw InputError(where + "unknown weekly variable '" + r.variable + "'");
            }
            const auto day = parse_double(f[2]);
            if (!day || *day != std::floor(*day) || *day < 1 || *day > 366) throw InputError(where + "day must be 1..366");
            r.day = static_cast<int>(*day);
        }
        if (r.file.empty()) throw InputError(where + "empty file name");
        rows.push_back(std::move(r));
    }
    return rows;
}

namespace detail {

inline std::size_t weekly_base(const std::string& variable) {
    const auto& w = weather_vars();
    if (auto it = std::find(w.begin(), w.end(), variable); it != w.end()) {
        return kWeatherOffset + static_cast<std::size_t>(it - w.begin()) * kWeeks;
    }
    const auto& l = land_vars();
    return kLandOffset + static_cast<std::size_t>(std::find(l.begin(), l.end(), variable) - l.begin()) * kWeeks;
}

inline std::size_t column_index(const std::string& column) {
    const auto& cols = feature_columns();
    return static_cast<std::size_t>(std::find(cols.begin(), cols.end(), column) - cols.begin());
}

} // namespace detail

/// County feature rows from daily and static rasters.
inline Dataset aggregate_rasters(const std::vector<ManifestRow>& manifest, const fs::path& raster_dir,
                                 const CountyWeightMap& weights, const std::vector<std::string>& counties) {
    std::map<std::string, RasterGrid> cache;
    const auto raster = [&](const std::string& file) -> const RasterGrid& {
        auto it = cache.find(file);
        if (it == cache.end()) it = cache.emplace(file, load_ascii_grid((raster_dir / file).string())).first;
        return it->second;
    };
    std::map<int, std::vector<const ManifestRow*>> by_year;
    for (const auto& r : manifest) by_year[r.year].push_back(&r);

    Dataset ds;
    ds.graph = CountyGraph(counties, {});
    for (const auto& [year, rows] : by_year) {
        ds.years.push_back(year);
        std::vector<YearFeatures> feats(counties.size());
        for (std::size_t c = 0; c < counties.size(); ++c) {
            feats[c].county = counties[c];
            feats[c].year = year;
            std::fill(feats[c].missing.begin(), feats[c].missing.end(), true);
        }
        std::map<std::string, std::vector<const ManifestRow*>> daily;
        std::map<std::string, const ManifestRow*> statics;
        for (const ManifestRow* r : rows) {
            if (r->kind == "static") {
                if (!statics.emplace(r->variable, r).second) {
                    throw InputError("manifest lists " + r->variable + " twice for " + std::to_string(year));
                }
            } else {
                daily[r->variable].push_back(r);
            }
        }
        for (auto& [var, list] : daily) {
            std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->day < b->day; });
            const std::string what = var + " in " + std::to_string(year);
            if (list.size() != 365 && list.size() != 366) {
                throw InputError(what + " needs 365 or 366 daily rasters, got " + std::to_string(list.size()));
            }
            for (std::size_t d = 0; d < list.size(); ++d) {
                if (list[d]->day != static_cast<int>(d + 1)) throw InputError(what + " has a gap or duplicate at day " + std::to_string(d + 1));
                if (list[d]->kind != list[0]->kind) throw InputError(what + " mixes reduction kinds");
            }
            const VariableKind kind = parse_variable_kind(list[0]->kind);
            const std::size_t base = detail::weekly_base(var);
            std::vector<std::vector<double>> series(counties.size(), std::vector<double>(list.size(), 0.0));
            std::vector<std::vector<bool>> gap(counties.size(), std::vector<bool>(list.size(), false));
            for (std::size_t d = 0; d < list.size(); ++d) {
                const RasterGrid& g = raster(list[d]->file);
                for (std::size_t c = 0; c < counties.size(); ++c) {
                    const auto v = aggregate_to_county(g, weights, counties[c]);
                    if (v) series[c][d] = *v;
                    else gap[c][d] = true;
                }
            }
            for (std::size_t c = 0; c < counties.size(); ++c) {
                const auto weekly = daily_to_weekly(series[c], kind);
                for (std::size_t w = 0; w < kWeeks; ++w) {
                    const std::size_t end = w == kWeeks - 1 ? list.size() : 7 * w + 7;
                    bool hole = false;
                    for (std::size_t d = 7 * w; d < end; ++d) hole = hole || gap[c][d];
                    feats[c].values[base + w] = hole ? 0.0 : weekly[w];
                    feats[c].missing[base + w] = hole;
                }
            }
        }
        for (const auto& [column, r] : statics) {
            const RasterGrid& g = raster(r->file);
            const std::size_t idx = detail::column_index(column);
            for (std::size_t c = 0; c < counties.size(); ++c) {
                const auto v = aggregate_to_county(g, weights, counties[c]);
                feats[c].values[idx] = v.value_or(0.0);
                feats[c].missing[idx] = !v.has_value();
            }
        }
        // Texture-class fractions per depth from the sand/silt/clay rasters,
        // unless the manifest supplies them directly.
        for (std::size_t depth = 0; depth < kSoilDepths; ++depth) {
            const std::string d = "_" + std::to_string(depth);
            if (!statics.count("s_sand" + d) || !statics.count("s_silt" + d) || !statics.count("s_clay" + d)) continue;
            bool supplied = false;
            for (std::size_t k = 0; k < kTextureClasses; ++k)
                supplied = supplied || statics.count("s_tex_" + std::string(texture_name(static_cast<TextureClass>(k))) + d);
            if (supplied) continue;
            const RasterGrid& sand = raster(statics.at("s_sand" + d)->file);
            const RasterGrid& silt = raster(statics.at("s_silt" + d)->file);
            const RasterGrid& clay = raster(statics.at("s_clay" + d)->file);
            for (std::size_t c = 0; c < counties.size(); ++c) {
                std::vector<WeightedTexture> pts;
                for (const auto& cw : weights.cells(counties[c])) {
                    if (cw.cell >= sand.cell_count() || cw.cell >= silt.cell_count() || cw.cell >= clay.cell_count()) {
                        throw InputError("weight map references cell " + std::to_string(cw.cell) + " outside the texture rasters");
                    }
                    if (sand.is_nodata(cw.cell) || silt.is_nodata(cw.cell) || clay.is_nodata(cw.cell)) continue;
                    try {
                        pts.push_back({normalize_texture({sand.values[cw.cell], silt.values[cw.cell], clay.values[cw.cell]}), cw.weight});
                    } catch (const std::exception& e) {
                        throw InputError("texture at cell " + std::to_string(cw.cell) + ", depth " + std::to_string(depth) + ": " + e.what());
                    }
                }
                const auto frac = county_texture_fractions(pts);
                for (std::size_t k = 0; k < kTextureClasses; ++k) {
                    const std::size_t idx = detail::column_index("s_tex_" + std::string(texture_name(static_cast<TextureClass>(k))) + d);
                    feats[c].values[idx] = frac ? (*frac)[k] : 0.0;
                    feats[c].missing[idx] = !frac;
                }
            }
        }
        for (std::size_t c = 0; c < counties.size(); ++c) ds.features.emplace(std::make_pair(c, year), std::move(feats[c]));
    }
    return ds;
}

inline int cmd_aggregate(Config cfg, const fs::path& out, bool force, std::ostream& log) {
    check_keys(cfg, {"out", "rasters", "weights", "manifest", "landcover"}, "aggregate");
    const fs::path raster_dir = require(cfg, "rasters", "aggregate");
    const std::string weights_path = require(cfg, "weights", "aggregate");
    const std::string manifest_path = require(cfg, "manifest", "aggregate");
    const auto entries = load_county_cells(weights_path);
    std::optional<RasterGrid> landcover;
    if (cfg.count("landcover")) landcover = load_ascii_grid(cfg["landcover"]);
    const CountyWeightMap weights = build_weight_map(entries, landcover ? &*landcover : nullptr);
    std::ifstream mf(manifest_path);
    if (!mf) throw InputError("cannot read manifest " + manifest_path);
    const auto manifest = parse_manifest(mf, manifest_path);
    std::set<std::string> ids;
    for (const auto& e : entries) ids.insert(e.county);
    if (ids.empty()) throw InputError(weights_path + ": no counties");
    const Dataset ds = aggregate_rasters(manifest, raster_dir, weights, {ids.begin(), ids.end()});
    prepare_out_dir(out, force);
    std::ofstream f(out / "features.csv", std::ios::binary);
    if (!f) throw InputError("cannot write " + (out / "features.csv").string());
    write_features(f, ds);
    write_resolved(out, cfg);
    log << "aggregated " << ids.size() << " counties x " << ds.years.size() << " years into "
        << (out / "features.csv").string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// train

inline void write_train_log_header(std::ostream& out) { out << "epoch,lr,train_loss,val_rmse\n"; }

inline void write_train_log_row(std::ostream& out, const EpochLog& e) {
    out << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train_loss) << ','
        << (std::isnan(e.val_rmse) ? std::string("NA") : format_double(e.val_rmse)) << '\n';
}

inline std::set<std::string> train_keys() {
    std::set<std::string> k(ModelSpec::keys().begin(), ModelSpec::keys().end());
    k.insert(dataset_keys().begin(), dataset_keys().end());
    k.insert("out");
    return k;
}

inline int cmd_train(Config cfg, const fs::path& out, bool force, std::ostream& log) {
    check_keys(cfg, train_keys(), "train");
    const ModelKind kind = parse_model_kind(require(cfg, "kind", "train"));
    Crop crop;
    try {
        crop = parse_crop(get(cfg, "crop", "corn"));
    } catch (const InputError& e) {
        throw ConfigError(e.what());
    }
    const Dataset ds = load_configured_dataset(cfg, "train");
    const int test_year = static_cast<int>(get_int(cfg, "test_year", ds.years.empty() ? 0 : ds.years.back()));
    const ModelSpec spec = resolve_spec(cfg, kind, crop, test_year);
    const YearSplit split = make_split(ds.years, test_year);
    prepare_out_dir(out, force);
    std::ofstream tl(out / "train_log.csv", std::ios::binary);
    if (!tl) throw InputError("cannot write " + (out / "train_log.csv").string());
    write_train_log_header(tl);
    TrainOptions opt;
    opt.on_epoch = [&](const EpochLog& e) {
        write_train_log_row(tl, e);
        tl.flush();
    };
    const ModelCheckpoint ck = train(spec, ds, split, opt);
    save_checkpoint(out / "model.ckpt", ck);
    Config echo;
    for (const auto& k : {"features", "yields", "adjacency"}) echo[k] = cfg[k];
    add_spec(echo, spec);
    write_resolved(out, echo);
    log << to_string(kind) << ' ' << to_string(crop) << ' ' << test_year << ": best epoch " << ck.best_epoch;
    if (!ck.val_rmse.empty() && ck.best_epoch >= 0) log << ", val rmse " << ck.val_rmse.at(static_cast<std::size_t>(ck.best_epoch));
    log << ", " << ck.skipped_windows << " windows skipped\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

/// The split a checkpoint was trained under, re-targeted at test_year.
inline YearSplit checkpoint_split(const ModelCheckpoint& ck, int test_year) {
    YearSplit s;
    s.test_year = test_year;
    s.val_year = test_year - 1;
    s.train_years = ck.norm.source_years;
    return s;
}

inline int cmd_evaluate(Config cfg, const fs::path& out, bool force, std::ostream& log) {
    std::set<std::string> keys = dataset_keys();
    keys.insert({"out", "checkpoint", "early", "mask_cutoff", "test_year"});
    check_keys(cfg, keys, "evaluate");
    const ModelCheckpoint ck = load_checkpoint(fs::path(require(cfg, "checkpoint", "evaluate")));
    const Dataset ds = load_configured_dataset(cfg, "evaluate");
    const int test_year = static_cast<int>(get_int(cfg, "test_year", ck.spec.test_year));
    if (!ds.has_year(test_year)) throw InputError("test year " + std::to_string(test_year) + " is not in the dataset");
    const bool early = get_bool(cfg, "early", false);
    const long long cutoff = get_int(cfg, "mask_cutoff", 22);
    if (cutoff < 0 || cutoff > static_cast<long long>(kWeeks)) throw ConfigError("mask_cutoff must be in 0..52");
    const YearSplit split = checkpoint_split(ck, test_year);
    std::optional<MaskingPlan> plan;
    if (early) plan = build_masking_plan(ds, split, static_cast<std::size_t>(cutoff));
    const EvalReport r = evaluate(ck, ds, split, plan ? &*plan : nullptr);
    prepare_out_dir(out, force);
    emit_report(r, out);
    Config echo{{"checkpoint", cfg["checkpoint"]}, {"features", cfg["features"]}, {"yields", cfg["yields"]},
                {"adjacency", cfg["adjacency"]}, {"test_year", std::to_string(test_year)},
                {"early", early ? "true" : "false"}, {"mask_cutoff", std::to_string(cutoff)}};
    write_resolved(out, echo);
    log << r.method << ' ' << to_string(r.crop) << ' ' << r.test_year << (early ? " (early)" : "") << ": rmse "
        << r.rmse << ", r2 " << r.r2 << ", corr " << r.corr << ", n " << r.n_counties() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// benchmark

struct BenchCell {
    ModelKind kind;
    std::uint64_t seed;
    bool ok = false;
    std::string error;
    EvalReport report, early_report;
    double seconds = 0.0;
};

struct BenchRow {
    std::string method;
    bool five_year = false;
    std::size_t runs = 0, failed = 0;
    double rmse_mean = 0, rmse_std = 0, r2_mean = 0, r2_std = 0, corr_mean = 0, corr_std = 0;
    double early_r2_mean = 0, early_r2_std = 0;
};

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() == 1) return {m, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

inline std::vector<BenchRow> summarize(const std::vector<BenchCell>& cells, const std::vector<ModelKind>& kinds) {
    std::vector<BenchRow> rows;
    for (ModelKind k : kinds) {
        BenchRow row;
        row.method = to_string(k);
        row.five_year = history_years(k) > 0;
        std::vector<double> rm, r2, co, er2;
        for (const auto& c : cells) {
            if (c.kind != k) continue;
            ++row.runs;
            if (!c.ok) {
                ++row.failed;
                continue;
            }
            rm.push_back(c.report.rmse);
            r2.push_back(c.report.r2);
            co.push_back(c.report.corr);
            if (!c.early_report.records.empty()) er2.push_back(c.early_report.r2);
        }
        std::tie(row.rmse_mean, row.rmse_std) = mean_std(rm);
        std::tie(row.r2_mean, row.r2_std) = mean_std(r2);
        std::tie(row.corr_mean, row.corr_std) = mean_std(co);
        std::tie(row.early_r2_mean, row.early_r2_std) = mean_std(er2);
        rows.push_back(row);
    }
    return rows;
}

inline std::string fmt_num(double v) {
    if (std::isnan(v)) return "NA";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

inline void write_bench_table(std::ostream& out, const std::vector<BenchRow>& rows, bool early) {
    std::vector<std::string> header = {"method", "RMSE", "R2", "Corr"};
    if (early) header.push_back("early R2");
    header.push_back("runs");
    std::vector<std::vector<std::string>> body;
    for (int group = 0; group < 2; ++group) {
        bool any = false;
        for (const auto& r : rows) {
            if (r.five_year != (group == 1)) continue;
            if (!any) body.push_back({group == 0 ? "-- 1y --" : "-- 5y --"});
            any = true;
            std::vector<std::string> line = {r.method, fmt_num(r.rmse_mean) + " ± " + fmt_num(r.rmse_std),
                                             fmt_num(r.r2_mean) + " ± " + fmt_num(r.r2_std),
                                             fmt_num(r.corr_mean) + " ± " + fmt_num(r.corr_std)};
            if (early) line.push_back(fmt_num(r.early_r2_mean) + " ± " + fmt_num(r.early_r2_std));
            line.push_back(std::to_string(r.runs - r.failed) + "/" + std::to_string(r.runs));
            body.push_back(line);
        }
    }
    // "±" is two bytes but one column wide.
    const auto width = [](const std::string& s) { return s.size() - (s.find("±") != std::string::npos ? 1 : 0); };
    std::vector<std::size_t> w(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
    for (const auto& line : body)
        if (line.size() == header.size())
            for (std::size_t i = 0; i < line.size(); ++i) w[i] = std::max(w[i], width(line[i]));
    const auto emit = [&](const std::vector<std::string>& line) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            out << line[i];
            if (i + 1 < line.size()) out << std::string(w[i] - width(line[i]) + 2, ' ');
        }
        out << '\n';
    };
    emit(header);
    for (const auto& line : body) {
        if (line.size() == 1) out << line[0] << '\n';
        else emit(line);
    }
}

inline void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
    out << "group,method,runs,failed,rmse_mean,rmse_std,r2_mean,r2_std,corr_mean,corr_std,early_r2_mean,early_r2_std\n";
    const auto v = [](double x) { return std::isnan(x) ? std::string("NA") : format_double(x); };
    for (const auto& r : rows) {
        out << (r.five_year ? "5y" : "1y") << ',' << r.method << ',' << r.runs << ',' << r.failed << ',' << v(r.rmse_mean)
            << ',' << v(r.rmse_std) << ',' << v(r.r2_mean) << ',' << v(r.r2_std) << ',' << v(r.corr_mean) << ','
            << v(r.corr_std) << ',' << v(r.early_r2_mean) << ',' << v(r.early_r2_std) << '\n';
    }
}

inline void write_cells_csv(std::ostream& out, const std::vector<BenchCell>& cells) {
    out << "method,seed,status,rmse,r2,corr,early_rmse,early_r2,early_corr,seconds\n";
    const auto v = [](double x) { return std::isnan(x) ? std::string("NA") : format_double(x); };
    for (const auto& c : cells) {
        out << to_string(c.kind) << ',' << c.seed << ',';
        if (!c.ok) {
            std::string msg = c.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            out << "failed: " << msg << ",NA,NA,NA,NA,NA,NA," << v(c.seconds) << '\n';
            continue;
        }
        const bool e = !c.early_report.records.empty();
        out << "ok," << v(c.report.rmse) << ',' << v(c.report.r2) << ',' << v(c.report.corr) << ','
            << (e ? v(c.early_report.rmse) : "NA") << ',' << (e ? v(c.early_report.r2) : "NA") << ','
            << (e ? v(c.early_report.corr) : "NA") << ',' << v(c.seconds) << '\n';
    }
}

inline std::set<std::string> benchmark_keys() {
    std::set<std::string> k(ModelSpec::keys().begin(), ModelSpec::keys().end());
    k.erase("kind");
    k.erase("seed");
    k.insert(dataset_keys().begin(), dataset_keys().end());
    k.insert({"out", "kinds", "seeds", "early", "mask_cutoff"});
    return k;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& text, const std::string& key) {
    std::vector<std::uint64_t> out;
    for (const auto& s : split_list(text)) {
        const auto d = parse_double(s);
        if (!d || *d < 0 || *d != std::floor(*d)) throw ConfigError(key + ": malformed seed '" + s + "'");
        out.push_back(static_cast<std::uint64_t>(*d));
    }
    if (out.empty()) throw ConfigError(key + " is empty");
    return out;
}

/// Trains and evaluates every (kind, seed) cell. Cells are independent and run
/// on up to worker_threads() threads; results keep the matrix order.
inline int cmd_benchmark(Config cfg, const fs::path& out, bool force, std::ostream& log) {
    check_keys(cfg, benchmark_keys(), "benchmark", true);
    Crop crop;
    try {
        crop = parse_crop(get(cfg, "crop", "corn"));
    } catch (const InputError& e) {
        throw ConfigError(e.what());
    }
    const Dataset ds = load_configured_dataset(cfg, "benchmark");
    const int test_year = static_cast<int>(get_int(cfg, "test_year", ds.years.empty() ? 0 : ds.years.back()));
    const YearSplit split = make_split(ds.years, test_year);
    const std::string kinds_text = get(cfg, "kinds", "ridge,lasso,gru,lstm,cnn,gnn,gru-5y,lstm-5y,cnn-rnn,gnn-rnn");
    std::vector<ModelKind> kinds;
    for (const auto& k : split_list(kinds_text)) {
        const ModelKind mk = parse_model_kind(k);
        if (mk == ModelKind::oracle) throw ConfigError("the oracle kind is not a benchmark method");
        if (std::find(kinds.begin(), kinds.end(), mk) != kinds.end()) throw ConfigError("kind " + k + " listed twice");
        kinds.push_back(mk);
    }
    if (kinds.empty()) throw ConfigError("kinds is empty");
    const std::string seeds_text = get(cfg, "seeds", "0");
    const bool early = get_bool(cfg, "early", false);
    const long long cutoff = get_int(cfg, "mask_cutoff", 22);
    if (cutoff < 0 || cutoff > static_cast<long long>(kWeeks)) throw ConfigError("mask_cutoff must be in 0..52");

    std::vector<BenchCell> cells;
    std::map<ModelKind, ModelSpec> specs;
    Config echo;
    for (ModelKind k : kinds) {
        const std::string name = to_string(k);
        // Global model keys first, then `<kind>.<key>` entries on top.
        Config merged = cfg;
        for (const auto& [key, v] : cfg)
            if (key.rfind(name + ".", 0) == 0) merged[key.substr(name.size() + 1)] = v;
        specs.emplace(k, resolve_spec(merged, k, crop, test_year));
        const std::string seeds_for = get(merged, "seeds", seeds_text);
        for (std::uint64_t s : parse_seeds(seeds_for, name + ".seeds")) {
            BenchCell c;
            c.kind = k;
            c.seed = s;
            cells.push_back(std::move(c));
        }
        for (const auto& [key, v] : specs.at(k).to_kv())
            if (key != "seed" && key != "kind") echo[name + "." + key] = v;
        echo[name + ".seeds"] = seeds_for;
    }
    prepare_out_dir(out, force);
    std::optional<MaskingPlan> plan;
    if (early) plan = build_masking_plan(ds, split, static_cast<std::size_t>(cutoff));

    std::mutex log_mutex;
    std::size_t next = 0;
    const auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(log_mutex);
                if (next >= cells.size()) return;
                i = next++;
            }
            BenchCell& c = cells[i];
            const auto t0 = std::chrono::steady_clock::now();
            try {
                ModelSpec spec = specs.at(c.kind);
                spec.seed = c.seed;
                const ModelCheckpoint ck = train(spec, ds, split);
                c.report = evaluate(ck, ds, split);
                if (plan) c.early_report = evaluate(ck, ds, split, &*plan);
                const fs::path cell_dir = out / "cells" / (to_string(c.kind) + "-seed" + std::to_string(c.seed));
                emit_report(c.report, cell_dir);
                if (plan) emit_report(c.early_report, cell_dir / "early");
                c.ok = true;
            } catch (const std::exception& e) {
                c.error = e.what();
            }
            c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::lock_guard<std::mutex> lock(log_mutex);
            log << to_string(c.kind) << " seed " << c.seed << ": "
                << (c.ok ? "r2 " + fmt_num(c.report.r2) : "failed (" + c.error + ")") << " in "
                << fmt_num(c.seconds) << " s" << std::endl;
        }
    };
    const std::size_t n_threads = std::min(worker_threads(), cells.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    const auto rows = summarize(cells, kinds);
    const auto write = [&](const std::string& name, auto&& fn) {
        std::ofstream f(out / name, std::ios::binary);
        if (!f) throw InputError("cannot write " + (out / name).string());
        fn(f);
    };
    write("benchmark.csv", [&](std::ostream& o) { write_bench_csv(o, rows); });
    write("cells.csv", [&](std::ostream& o) { write_cells_csv(o, cells); });
    write("benchmark.txt", [&](std::ostream& o) { write_bench_table(o, rows, early); });
    echo["features"] = cfg["features"];
    echo["yields"] = cfg["yields"];
    echo["adjacency"] = cfg["adjacency"];
    echo["crop"] = to_string(crop);
    echo["test_year"] = std::to_string(test_year);
    echo["kinds"] = kinds_text;
    echo["seeds"] = seeds_text;
    echo["early"] = early ? "true" : "false";
    echo["mask_cutoff"] = std::to_string(cutoff);
    write_resolved(out, echo);
    write_bench_table(log, rows, early);
    return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv-style arguments and runs one subcommand; returns the exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"yieldgraph: county crop-yield prediction with graph neural networks and recurrent models"};
    app.name("yieldgraph");
    app.require_subcommand(1, 1);
    struct Sub {
        std::string name, help;
        CLI::App* app = nullptr;
    };
    std::vector<Sub> subs = {
        {"aggregate", "Aggregate daily/static rasters to county features (rasters, weights, manifest, landcover, out)"},
        {"synth", "Write a seeded synthetic dataset (n_counties, n_years, grid_side, base_year, seed, label_dropout, out)"},
        {"train", "Train one model (kind, crop, test_year, data or features/yields/adjacency, model keys, out)"},
        {"evaluate", "Evaluate a checkpoint on its test year (checkpoint, data, early, mask_cutoff, out)"},
        {"benchmark", "Train and evaluate a kinds x seeds matrix (kinds, seeds, data, early, <kind>.<key>, out)"}};
    std::string config_path;
    std::string out_dir;
    bool force = false;
    for (auto& s : subs) {
        s.app = app.add_subcommand(s.name, s.help);
        s.app->allow_extras();
        s.app->add_option("--config", config_path, "key = value config file; command-line keys override it");
        s.app->add_option("--out", out_dir, "output directory");
        s.app->add_flag("--force", force, "allow writing into a non-empty output directory");
    }
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kInputError;
    }
    try {
        for (const auto& s : subs) {
            if (!s.app->parsed()) continue;
            Config cfg;
            if (!config_path.empty()) cfg = load_config_file(config_path);
            for (const auto& [k, v] : parse_overrides(s.app->remaining())) cfg[k] = v;
            if (!out_dir.empty()) cfg["out"] = out_dir;
            const fs::path out_path = require(cfg, "out", s.name);
            if (s.name == "aggregate") return cmd_aggregate(cfg, out_path, force, out);
            if (s.name == "synth") return cmd_synth(cfg, out_path, force, out);
            if (s.name == "train") return cmd_train(cfg, out_path, force, out);
            if (s.name == "evaluate") return cmd_evaluate(cfg, out_path, force, out);
            if (s.name == "benchmark") return cmd_benchmark(cfg, out_path, force, out);
        }
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << '\n';
        return kNumericalAbort;
    } catch (const InputError& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const GraphError& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const WindowUnavailable& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const ShapeError& e) {
        err << "internal error: " << e.what() << '\n';
        return kInternal;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kInputError;
}

} // namespace yieldgraph::cli
