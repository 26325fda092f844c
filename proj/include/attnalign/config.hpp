#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "attnalign/checkpoint.hpp"
#include "attnalign/data.hpp"
#include "attnalign/errors.hpp"
#include "attnalign/train.hpp"

namespace attnalign {

struct RunConfig {
    TrainConfig train;
    double val_fraction = 0.1;
    std::array<Rgb, 10> palette = default_palette();
    std::string train_images, train_labels, test_images, test_labels;
    std::string out_dir;
    std::string external_teachers; // optional ATTN bundle covering train+val
    std::size_t export_count = 8;
    std::vector<double> grid_lambdas = {1, 2, 4, 8, 16, 40, 80, 160, 320};
    std::vector<std::size_t> grid_e_attns = {5, 7, 9, 11, 13, 15};
};

namespace config_detail {

struct RawEntry {
    std::size_t line = 0;
    std::string value;
};

inline double parse_number(const std::string& v, std::size_t line) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line) + ": expected number, got '" + v + "'");
    }
    if (used != v.size()) {
        throw ConfigError("line " + std::to_string(line) + ": expected number, got '" + v + "'");
    }
    return out;
}

inline std::uint64_t parse_u64(const std::string& v, std::size_t line) {
    std::size_t used = 0;
    std::uint64_t out = 0;
    try {
        // stoull accepts "-3" by wrapping around; reject signs outright
        if (v.find_first_of("+-") != std::string::npos) throw std::invalid_argument(v);
        out = std::stoull(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line) + ": expected unsigned integer, got '" +
                          v + "'");
    }
    if (used != v.size()) {
        throw ConfigError("line " + std::to_string(line) + ": expected unsigned integer, got '" +
                          v + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& v, std::size_t line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("line " + std::to_string(line) + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = v.find(',', start);
        std::string tok =
            v.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        const auto a = tok.find_first_not_of(" \t");
        const auto b = tok.find_last_not_of(" \t");
        out.push_back(a == std::string::npos ? "" : tok.substr(a, b - a + 1));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline Rgb parse_hex_color(const std::string& tok, std::size_t line) {
    if (tok.size() != 6 || tok.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos) {
        throw ConfigError("line " + std::to_string(line) + ": expected 6-digit hex color, got '" +
                          tok + "'");
    }
    auto byte = [&](std::size_t off) {
        return static_cast<double>(std::stoul(tok.substr(off, 2), nullptr, 16)) / 255.0;
    };
    return Rgb{byte(0), byte(2), byte(4)};
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "dataset",        "lambda0",       "e_attn",         "epochs",
        "batch_size",     "lr",            "momentum",       "weight_decay",
        "lr_decay_factor", "lr_decay_every", "seed",          "val_fraction",
        "morph_threshold", "morph_radius",  "morph_eps",      "edge_band",
        "eps_kl",         "palette",       "train_images",   "train_labels",
        "test_images",    "test_labels",   "out_dir",        "external_teachers",
        "export_count",   "grid_lambdas",  "grid_e_attns"};
    return keys;
}

} // namespace config_detail

/// Line-oriented `key = value` with '#' comments. Unknown keys are a hard
/// error listing every offender; anything absent keeps its documented
/// default (lr, lambda0, e_attn, edge_band default per dataset).
inline RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    using namespace config_detail;
    std::map<std::string, RawEntry> entries;
    std::vector<std::string> unknown;

    std::size_t pos = 0, line_no = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string line =
            text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ": line " + std::to_string(line_no) +
                              ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(origin + ": line " + std::to_string(line_no) + ": empty key");
        }
        bool known = false;
        for (const std::string& k : known_keys()) {
            if (k == key) { known = true; break; }
        }
        if (!known) {
            unknown.push_back(key + " (line " + std::to_string(line_no) + ")");
            continue;
        }
        entries[key] = RawEntry{line_no, value}; // later lines win
    }
    if (!unknown.empty()) {
        std::string msg = origin + ": unknown keys:";
        for (const std::string& k : unknown) msg += " " + k;
        throw ConfigError(msg);
    }

    RunConfig cfg;
    auto has = [&](const char* k) { return entries.count(k) != 0; };
    auto raw = [&](const char* k) -> const RawEntry& { return entries[k]; };

    if (has("dataset")) {
        const RawEntry& e = raw("dataset");
        if (e.value == "colored") {
            cfg.train.dataset = DatasetKind::colored;
        } else if (e.value == "decoy") {
            cfg.train.dataset = DatasetKind::decoy;
        } else {
            throw ConfigError(origin + ": line " + std::to_string(e.line) +
                              ": dataset must be 'colored' or 'decoy', got '" + e.value + "'");
        }
    }
    // Dataset-dependent defaults before explicit overrides.
    cfg.train = [&] {
        TrainConfig t = default_train_config(cfg.train.dataset);
        return t;
    }();

    auto wrap = [&](const char* k, auto&& fn) {
        if (!has(k)) return;
        const RawEntry& e = raw(k);
        try {
            fn(e);
        } catch (const ConfigError& err) {
            // Inner parse errors already carry "line N"; prefix the file.
            throw ConfigError(origin + ": " + err.what());
        }
    };

    wrap("lambda0", [&](const RawEntry& e) {
        cfg.train.lambda0 = parse_number(e.value, e.line);
        if (cfg.train.lambda0 < 0) {
            throw ConfigError("line " + std::to_string(e.line) + ": lambda0 must be >= 0");
        }
    });
    wrap("e_attn", [&](const RawEntry& e) {
        cfg.train.e_attn = static_cast<std::size_t>(parse_u64(e.value, e.line));
    });
    wrap("epochs", [&](const RawEntry& e) {
        cfg.train.epochs = static_cast<std::size_t>(parse_u64(e.value, e.line));
    });
    wrap("batch_size", [&](const RawEntry& e) {
        cfg.train.batch_size = static_cast<std::size_t>(parse_u64(e.value, e.line));
        if (cfg.train.batch_size < 1) {
            throw ConfigError("line " + std::to_string(e.line) + ": batch_size must be >= 1");
        }
    });
    wrap("lr", [&](const RawEntry& e) {
        cfg.train.sgd.initial_lr = parse_number(e.value, e.line);
        if (!(cfg.train.sgd.initial_lr > 0)) {
            throw ConfigError("line " + std::to_string(e.line) + ": lr must be > 0");
        }
    });
    wrap("momentum", [&](const RawEntry& e) {
        cfg.train.sgd.momentum = parse_number(e.value, e.line);
        if (!(cfg.train.sgd.momentum >= 0 && cfg.train.sgd.momentum < 1)) {
            throw ConfigError("line " + std::to_string(e.line) + ": momentum must be in [0,1)");
        }
    });
    wrap("weight_decay", [&](const RawEntry& e) {
        cfg.train.sgd.weight_decay = parse_number(e.value, e.line);
    });
    wrap("lr_decay_factor", [&](const RawEntry& e) {
        cfg.train.sgd.decay_factor = parse_number(e.value, e.line);
    });
    wrap("lr_decay_every", [&](const RawEntry& e) {
        cfg.train.sgd.decay_every_epochs = static_cast<std::size_t>(parse_u64(e.value, e.line));
        if (cfg.train.sgd.decay_every_epochs < 1) {
            throw ConfigError("line " + std::to_string(e.line) + ": lr_decay_every must be >= 1");
        }
    });
    wrap("seed", [&](const RawEntry& e) { cfg.train.seed = parse_u64(e.value, e.line); });
    wrap("val_fraction", [&](const RawEntry& e) {
        cfg.val_fraction = parse_number(e.value, e.line);
        if (!(cfg.val_fraction > 0 && cfg.val_fraction < 1)) {
            throw ConfigError("line " + std::to_string(e.line) +
                              ": val_fraction must be in (0,1)");
        }
    });
    wrap("morph_threshold", [&](const RawEntry& e) {
        cfg.train.morph.threshold = parse_number(e.value, e.line);
        if (!(cfg.train.morph.threshold > 0 && cfg.train.morph.threshold < 1)) {
            throw ConfigError("line " + std::to_string(e.line) +
                              ": morph_threshold must be in (0,1)");
        }
    });
    wrap("morph_radius", [&](const RawEntry& e) {
        cfg.train.morph.dilation_radius = static_cast<std::size_t>(parse_u64(e.value, e.line));
    });
    wrap("morph_eps", [&](const RawEntry& e) {
        cfg.train.morph.eps = parse_number(e.value, e.line);
        if (!(cfg.train.morph.eps > 0)) {
            throw ConfigError("line " + std::to_string(e.line) + ": morph_eps must be > 0");
        }
    });
    wrap("edge_band", [&](const RawEntry& e) {
        cfg.train.morph.edge_band = parse_bool(e.value, e.line);
    });
    wrap("eps_kl", [&](const RawEntry& e) {
        cfg.train.eps_kl = parse_number(e.value, e.line);
        if (!(cfg.train.eps_kl > 0)) {
            throw ConfigError("line " + std::to_string(e.line) + ": eps_kl must be > 0");
        }
    });
    wrap("palette", [&](const RawEntry& e) {
        auto toks = split_commas(e.value);
        if (toks.size() != 10) {
            throw ConfigError("line " + std::to_string(e.line) + ": palette needs 10 colors, got " +
                              std::to_string(toks.size()));
        }
        for (std::size_t i = 0; i < 10; ++i) cfg.palette[i] = parse_hex_color(toks[i], e.line);
    });
    wrap("export_count", [&](const RawEntry& e) {
        cfg.export_count = static_cast<std::size_t>(parse_u64(e.value, e.line));
    });
    wrap("grid_lambdas", [&](const RawEntry& e) {
        auto toks = split_commas(e.value);
        cfg.grid_lambdas.clear();
        for (const std::string& t : toks) cfg.grid_lambdas.push_back(parse_number(t, e.line));
        if (cfg.grid_lambdas.empty()) {
            throw ConfigError("line " + std::to_string(e.line) + ": grid_lambdas is empty");
        }
    });
    wrap("grid_e_attns", [&](const RawEntry& e) {
        auto toks = split_commas(e.value);
        cfg.grid_e_attns.clear();
        for (const std::string& t : toks) {
            cfg.grid_e_attns.push_back(static_cast<std::size_t>(parse_u64(t, e.line)));
        }
        if (cfg.grid_e_attns.empty()) {
            throw ConfigError("line " + std::to_string(e.line) + ": grid_e_attns is empty");
        }
    });

    auto path_key = [&](const char* k, std::string& dst) {
        if (has(k)) dst = raw(k).value;
    };
    path_key("train_images", cfg.train_images);
    path_key("train_labels", cfg.train_labels);
    path_key("test_images", cfg.test_images);
    path_key("test_labels", cfg.test_labels);
    path_key("out_dir", cfg.out_dir);
    path_key("external_teachers", cfg.external_teachers);

    return cfg;
}

inline RunConfig parse_config(const std::string& path) {
    return parse_config_text(read_file_string(path), path);
}

inline std::string color_to_hex(const Rgb& c) {
    char buf[8];
    auto q = [](double v) {
        return static_cast<unsigned>(v <= 0 ? 0 : v >= 1 ? 255 : v * 255.0 + 0.5);
    };
    std::snprintf(buf, sizeof buf, "%02x%02x%02x", q(c.r), q(c.g), q(c.b));
    return buf;
}

/// The fully resolved config, echoed as parseable `key = value` lines.
inline std::string resolved_config_text(const RunConfig& cfg) {
    std::string out;
    auto kv = [&](const char* k, const std::string& v) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    };
    kv("dataset", dataset_name(cfg.train.dataset));
    kv("lambda0", format_g17(cfg.train.lambda0));
    kv("e_attn", std::to_string(cfg.train.e_attn));
    kv("epochs", std::to_string(cfg.train.epochs));
    kv("batch_size", std::to_string(cfg.train.batch_size));
    kv("lr", format_g17(cfg.train.sgd.initial_lr));
    kv("momentum", format_g17(cfg.train.sgd.momentum));
    kv("weight_decay", format_g17(cfg.train.sgd.weight_decay));
    kv("lr_decay_factor", format_g17(cfg.train.sgd.decay_factor));
    kv("lr_decay_every", std::to_string(cfg.train.sgd.decay_every_epochs));
    kv("seed", std::to_string(cfg.train.seed));
    kv("val_fraction", format_g17(cfg.val_fraction));
    kv("morph_threshold", format_g17(cfg.train.morph.threshold));
    kv("morph_radius", std::to_string(cfg.train.morph.dilation_radius));
    kv("morph_eps", format_g17(cfg.train.morph.eps));
    kv("edge_band", cfg.train.morph.edge_band ? "true" : "false");
    kv("eps_kl", format_g17(cfg.train.eps_kl));
    {
        std::string pal;
        for (std::size_t i = 0; i < 10; ++i) {
            if (i) pal += ",";
            pal += color_to_hex(cfg.palette[i]);
        }
        kv("palette", pal);
    }
    kv("train_images", cfg.train_images);
    kv("train_labels", cfg.train_labels);
    kv("test_images", cfg.test_images);
    kv("test_labels", cfg.test_labels);
    kv("out_dir", cfg.out_dir);
    kv("external_teachers", cfg.external_teachers);
    kv("export_count", std::to_string(cfg.export_count));
    {
        std::string ls;
        for (std::size_t i = 0; i < cfg.grid_lambdas.size(); ++i) {
            if (i) ls += ",";
            ls += format_g17(cfg.grid_lambdas[i]);
        }
        kv("grid_lambdas", ls);
    }
    {
        std::string es;
        for (std::size_t i = 0; i < cfg.grid_e_attns.size(); ++i) {
            if (i) es += ",";
            es += std::to_string(cfg.grid_e_attns[i]);
        }
        kv("grid_e_attns", es);
    }
    return out;
}

} // namespace attnalign
