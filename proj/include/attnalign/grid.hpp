#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "attnalign/errors.hpp"
#include "attnalign/image_io.hpp"
#include "attnalign/rng.hpp"
#include "attnalign/teacher.hpp"
#include "attnalign/train.hpp"

namespace attnalign {

struct GridCell {
    double lambda0 = 0.0;
    std::size_t e_attn = 0;
    double best_optim_value = std::numeric_limits<double>::quiet_NaN();
    bool failed = false;
    std::string error;
};

struct GridResult {
    std::vector<double> lambdas;       // row axis, in given order
    std::vector<std::size_t> e_attns;  // column axis, in given order
    std::vector<GridCell> cells;       // row-major [lambda][e_attn]
    bool has_chosen = false;
    std::size_t chosen_index = 0; // into cells

    const GridCell& at(std::size_t li, std::size_t ej) const {
        return cells[li * e_attns.size() + ej];
    }
    const GridCell& chosen() const {
        if (!has_chosen) throw ConfigError("grid: no successful cell to choose from");
        return cells[chosen_index];
    }
};

/// Argmax over successful cells; ties go to smaller lambda0, then smaller
/// E_attn.
inline void pick_chosen(GridResult& g) {
    g.has_chosen = false;
    for (std::size_t i = 0; i < g.cells.size(); ++i) {
        const GridCell& c = g.cells[i];
        if (c.failed) continue;
        if (!g.has_chosen) {
            g.has_chosen = true;
            g.chosen_index = i;
            continue;
        }
        const GridCell& best = g.cells[g.chosen_index];
        if (c.best_optim_value > best.best_optim_value ||
            (c.best_optim_value == best.best_optim_value &&
             (c.lambda0 < best.lambda0 ||
              (c.lambda0 == best.lambda0 && c.e_attn < best.e_attn)))) {
            g.chosen_index = i;
        }
    }
}

/// One full train_two_phase per (lambda0, E_attn) cell, each with a child
/// seed derived from the template seed and the cell index. A failed cell is
/// recorded and does not abort the rest. `jobs` bounds the worker threads;
/// results are identical for any worker count.
inline GridResult run_grid(const std::vector<double>& lambdas,
                           const std::vector<std::size_t>& e_attns, const TrainConfig& tmpl,
                           const DatasetSplit& split, const TeacherSet& teachers,
                           std::size_t jobs = 1,
                           const std::function<void(const GridCell&)>& on_cell = nullptr) {
    if (lambdas.empty() || e_attns.empty()) {
        throw ConfigError("grid: axis lists must be nonempty");
    }
    GridResult g;
    g.lambdas = lambdas;
    g.e_attns = e_attns;
    g.cells.resize(lambdas.size() * e_attns.size());

    SeededRng cell_base = SeededRng(tmpl.seed).split(rng_keys::kGridCell);
    for (std::size_t li = 0; li < lambdas.size(); ++li) {
        for (std::size_t ej = 0; ej < e_attns.size(); ++ej) {
            GridCell& c = g.cells[li * e_attns.size() + ej];
            c.lambda0 = lambdas[li];
            c.e_attn = e_attns[ej];
        }
    }

    auto run_cell = [&](std::size_t idx) {
        GridCell& c = g.cells[idx];
        TrainConfig cfg = tmpl;
        cfg.lambda0 = c.lambda0;
        cfg.e_attn = c.e_attn;
        cfg.seed = cell_base.split(idx).state();
        try {
            TrainReport r = train_two_phase(cfg, split, teachers);
            c.best_optim_value = r.best_optim_value;
        } catch (const AttnAlignError& e) {
            c.failed = true;
            c.error = "cell (lambda0=" + format_g9(c.lambda0) +
                      ", e_attn=" + std::to_string(c.e_attn) + "): " + e.what();
        }
    };

    if (jobs <= 1) {
        for (std::size_t i = 0; i < g.cells.size(); ++i) {
            run_cell(i);
            if (on_cell) on_cell(g.cells[i]);
        }
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= g.cells.size()) break;
                run_cell(i);
            }
        };
        std::vector<std::thread> pool;
        const std::size_t n = std::min(jobs, g.cells.size());
        pool.reserve(n);
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
        if (on_cell) {
            for (const GridCell& c : g.cells) on_cell(c);
        }
    }

    pick_chosen(g);
    return g;
}

// ---- heatmap artifacts ----

/// Rows = lambda values, columns = E_attn values; %.17g so that parsing the
/// CSV back reproduces every double bit-exactly. Failed cells print nan.
inline std::string grid_csv(const GridResult& g) {
    std::string out = "lambda";
    for (std::size_t e : g.e_attns) out += "," + std::to_string(e);
    out += "\n";
    for (std::size_t li = 0; li < g.lambdas.size(); ++li) {
        out += format_g17(g.lambdas[li]);
        for (std::size_t ej = 0; ej < g.e_attns.size(); ++ej) {
            const GridCell& c = g.at(li, ej);
            out += ",";
            out += c.failed ? "nan" : format_g17(c.best_optim_value);
        }
        out += "\n";
    }
    return out;
}

/// Parse grid_csv output back into axes + values (failed cells come back as
/// NaN with failed=true).
inline GridResult parse_grid_csv(const std::string& text, const std::string& origin) {
    GridResult g;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    auto next_line = [&](std::string& line) {
        if (pos >= text.size()) return false;
        const std::size_t nl = text.find('\n', pos);
        line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() : nl + 1;
        ++line_no;
        return true;
    };
    auto split_fields = [](const std::string& line) {
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos
                                                                           : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return fields;
    };

    std::string line;
    if (!next_line(line)) throw ParseError(origin + ": empty grid CSV");
    auto header = split_fields(line);
    if (header.empty() || header[0] != "lambda") {
        throw ParseError(origin + ": line 1: expected header starting with 'lambda'");
    }
    for (std::size_t j = 1; j < header.size(); ++j) {
        try {
            g.e_attns.push_back(static_cast<std::size_t>(std::stoul(header[j])));
        } catch (const std::exception&) {
            throw ParseError(origin + ": line 1: bad E_attn column '" + header[j] + "'");
        }
    }
    if (g.e_attns.empty()) throw ParseError(origin + ": no E_attn columns");
    while (next_line(line)) {
        if (line.empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != g.e_attns.size() + 1) {
            throw ParseError(origin + ": line " + std::to_string(line_no) +
                             ": expected " + std::to_string(g.e_attns.size() + 1) + " fields");
        }
        try {
            g.lambdas.push_back(std::stod(fields[0]));
        } catch (const std::exception&) {
            throw ParseError(origin + ": line " + std::to_string(line_no) + ": bad lambda '" +
                             fields[0] + "'");
        }
        for (std::size_t j = 1; j < fields.size(); ++j) {
            GridCell c;
            c.lambda0 = g.lambdas.back();
            c.e_attn = g.e_attns[j - 1];
            if (fields[j] == "nan") {
                c.failed = true;
            } else {
                try {
                    c.best_optim_value = std::stod(fields[j]);
                } catch (const std::exception&) {
                    throw ParseError(origin + ": line " + std::to_string(line_no) +
                                     ": bad value '" + fields[j] + "'");
                }
            }
            g.cells.push_back(c);
        }
    }
    if (g.lambdas.empty()) throw ParseError(origin + ": no data rows");
    pick_chosen(g);
    return g;
}

/// Grayscale heatmap, one pixel per cell, value linearly mapped min->0,
/// max->255 over the successful cells. Failed cells render 0. A flat grid
/// (min == max) renders 255 everywhere.
inline GrayImage grid_pgm(const GridResult& g) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const GridCell& c : g.cells) {
        if (c.failed) continue;
        lo = std::min(lo, c.best_optim_value);
        hi = std::max(hi, c.best_optim_value);
    }
    GrayImage img(g.lambdas.size(), g.e_attns.size());
    for (std::size_t li = 0; li < g.lambdas.size(); ++li) {
        for (std::size_t ej = 0; ej < g.e_attns.size(); ++ej) {
            const GridCell& c = g.at(li, ej);
            std::uint8_t px = 0;
            if (!c.failed && hi >= lo) {
                px = hi == lo ? 255
                              : static_cast<std::uint8_t>(
                                    (c.best_optim_value - lo) / (hi - lo) * 255.0 + 0.5);
            }
            img.pixels[li * g.e_attns.size() + ej] = px;
        }
    }
    return img;
}

} // namespace attnalign
