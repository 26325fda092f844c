#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "attnalign/data.hpp"
#include "attnalign/grid.hpp"
#include "attnalign/teacher.hpp"

using namespace attnalign;

namespace {

std::string data_path(const char* name) { return std::string(ATTN_DATA_DIR) + "/" + name; }

struct SmallProblem {
    DatasetSplit split;
    TeacherSet teachers;
    TrainConfig tmpl;
};

SmallProblem& small_problem() {
    static SmallProblem* p = [] {
        auto* out = new SmallProblem;
        MnistRaw train = load_mnist(data_path("train-images-idx3-ubyte"),
                                    data_path("train-labels-idx1-ubyte"));
        MnistRaw test =
            load_mnist(data_path("test-images-idx3-ubyte"), data_path("test-labels-idx1-ubyte"));
        out->split = synth_colored_mnist(train, test, 0);
        out->split.train.resize(16);
        out->split.val.resize(8);
        out->split.test.resize(8);
        out->teachers = build_teacher_set(out->split, MorphParams{});
        out->tmpl = default_train_config(DatasetKind::colored);
        out->tmpl.epochs = 2;
        out->tmpl.batch_size = 8;
        out->tmpl.seed = 12;
        return out;
    }();
    return *p;
}

bool same_bits(double a, double b) {
    std::uint64_t ba, bb;
    std::memcpy(&ba, &a, 8);
    std::memcpy(&bb, &b, 8);
    return ba == bb;
}

GridCell make_cell(double lambda0, std::size_t e_attn, double value, bool failed = false) {
    GridCell c;
    c.lambda0 = lambda0;
    c.e_attn = e_attn;
    c.best_optim_value = value;
    c.failed = failed;
    return c;
}

} // namespace

TEST(Grid, SingletonGridChoosesItsOnlyCell) {
    SmallProblem& p = small_problem();
    GridResult g = run_grid({2.0}, {1}, p.tmpl, p.split, p.teachers);
    ASSERT_EQ(g.cells.size(), 1u);
    EXPECT_FALSE(g.cells[0].failed);
    EXPECT_TRUE(std::isfinite(g.cells[0].best_optim_value));
    ASSERT_TRUE(g.has_chosen);
    EXPECT_DOUBLE_EQ(g.chosen().lambda0, 2.0);
    EXPECT_EQ(g.chosen().e_attn, 1u);
}

TEST(Grid, RerunsAndWorkerCountsAreBitIdentical) {
    SmallProblem& p = small_problem();
    const std::vector<double> ls = {0.5, 4.0};
    const std::vector<std::size_t> es = {0, 1};
    GridResult serial = run_grid(ls, es, p.tmpl, p.split, p.teachers, 1);
    GridResult again = run_grid(ls, es, p.tmpl, p.split, p.teachers, 1);
    GridResult threaded = run_grid(ls, es, p.tmpl, p.split, p.teachers, 3);
    ASSERT_EQ(serial.cells.size(), 4u);
    for (std::size_t i = 0; i < serial.cells.size(); ++i) {
        EXPECT_FALSE(serial.cells[i].failed);
        EXPECT_TRUE(same_bits(serial.cells[i].best_optim_value, again.cells[i].best_optim_value))
            << "rerun cell " << i;
        EXPECT_TRUE(
            same_bits(serial.cells[i].best_optim_value, threaded.cells[i].best_optim_value))
            << "threaded cell " << i;
    }
    EXPECT_EQ(serial.chosen_index, threaded.chosen_index);

    // different cells really did receive different derived seeds
    EXPECT_FALSE(same_bits(serial.cells[0].best_optim_value, serial.cells[3].best_optim_value));
}

TEST(Grid, FailedCellIsIsolatedFromTheRest) {
    SmallProblem& p = small_problem();
    // e_attn = 3 exceeds the 2-epoch template and must fail per-cell
    GridResult g = run_grid({1.0}, {1, 3}, p.tmpl, p.split, p.teachers);
    ASSERT_EQ(g.cells.size(), 2u);
    EXPECT_FALSE(g.cells[0].failed);
    EXPECT_TRUE(g.cells[1].failed);
    EXPECT_NE(g.cells[1].error.find("cell (lambda0=1"), std::string::npos) << g.cells[1].error;
    EXPECT_TRUE(std::isnan(g.cells[1].best_optim_value));
    ASSERT_TRUE(g.has_chosen);
    EXPECT_EQ(g.chosen().e_attn, 1u);

    GridResult all_failed = run_grid({1.0, 2.0}, {5}, p.tmpl, p.split, p.teachers);
    EXPECT_TRUE(all_failed.cells[0].failed);
    EXPECT_TRUE(all_failed.cells[1].failed);
    EXPECT_FALSE(all_failed.has_chosen);
    EXPECT_THROW(all_failed.chosen(), ConfigError);

    EXPECT_THROW(run_grid({}, {1}, p.tmpl, p.split, p.teachers), ConfigError);
    EXPECT_THROW(run_grid({1.0}, {}, p.tmpl, p.split, p.teachers), ConfigError);
}

TEST(Grid, ChooserBreaksTiesTowardSmallerLambdaThenSmallerEAttn) {
    GridResult g;
    g.lambdas = {4.0, 1.0};
    g.e_attns = {9, 5};
    g.cells = {make_cell(4.0, 9, 0.5), make_cell(4.0, 5, 0.5), make_cell(1.0, 9, 0.5),
               make_cell(1.0, 5, 0.5)};
    pick_chosen(g);
    ASSERT_TRUE(g.has_chosen);
    EXPECT_DOUBLE_EQ(g.chosen().lambda0, 1.0);
    EXPECT_EQ(g.chosen().e_attn, 5u);

    // a strictly larger value beats any tie preference
    g.cells[0].best_optim_value = 0.6;
    pick_chosen(g);
    EXPECT_DOUBLE_EQ(g.chosen().lambda0, 4.0);
    EXPECT_EQ(g.chosen().e_attn, 9u);

    // equal-lambda tie falls through to e_attn
    g.cells[0].best_optim_value = 0.5;
    g.cells[2].failed = true;
    g.cells[3].failed = true;
    pick_chosen(g);
    EXPECT_DOUBLE_EQ(g.chosen().lambda0, 4.0);
    EXPECT_EQ(g.chosen().e_attn, 5u);
}

TEST(Grid, CsvRoundTripIsBitExact) {
    GridResult g;
    g.lambdas = {0.25, 160.0, 1.0 / 3.0};
    g.e_attns = {5, 11};
    g.cells = {make_cell(0.25, 5, 0.1069),
               make_cell(0.25, 11, -0.03125),
               make_cell(160.0, 5, 0.0, true),
               make_cell(160.0, 11, 1e-17),
               make_cell(1.0 / 3.0, 5, 0.1015),
               make_cell(1.0 / 3.0, 11, std::nextafter(0.1069, 1.0))};
    pick_chosen(g);

    const std::string csv = grid_csv(g);
    EXPECT_EQ(csv.substr(0, 12), "lambda,5,11\n");
    GridResult back = parse_grid_csv(csv, "test.csv");

    ASSERT_EQ(back.lambdas.size(), g.lambdas.size());
    ASSERT_EQ(back.e_attns, g.e_attns);
    ASSERT_EQ(back.cells.size(), g.cells.size());
    for (std::size_t i = 0; i < g.cells.size(); ++i) {
        EXPECT_TRUE(same_bits(back.lambdas[i / 2], g.lambdas[i / 2]));
        EXPECT_EQ(back.cells[i].failed, g.cells[i].failed);
        if (!g.cells[i].failed) {
            EXPECT_TRUE(same_bits(back.cells[i].best_optim_value, g.cells[i].best_optim_value))
                << "cell " << i;
        }
    }
    // nextafter(0.1069) beats 0.1069: parsing must preserve that ordering
    EXPECT_EQ(back.chosen_index, g.chosen_index);
    EXPECT_DOUBLE_EQ(back.chosen().lambda0, 1.0 / 3.0);
    EXPECT_EQ(back.chosen().e_attn, 11u);
}

TEST(Grid, CsvParseErrors) {
    EXPECT_THROW(parse_grid_csv("", "t"), ParseError);
    EXPECT_THROW(parse_grid_csv("nope,5\n1,0.5\n", "t"), ParseError);
    EXPECT_THROW(parse_grid_csv("lambda,x\n1,0.5\n", "t"), ParseError);
    EXPECT_THROW(parse_grid_csv("lambda\n1\n", "t"), ParseError);         // no e_attn columns
    EXPECT_THROW(parse_grid_csv("lambda,5\n1,0.5,0.6\n", "t"), ParseError); // field count
    EXPECT_THROW(parse_grid_csv("lambda,5\nabc,0.5\n", "t"), ParseError);   // bad lambda
    EXPECT_THROW(parse_grid_csv("lambda,5\n1,abc\n", "t"), ParseError);     // bad value
    EXPECT_THROW(parse_grid_csv("lambda,5\n", "t"), ParseError);            // no data rows
    try {
        parse_grid_csv("lambda,5\n1,0.5\n2,0.5,0.9\n", "grid.csv");
        FAIL() << "field count mismatch accepted";
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("grid.csv"), std::string::npos);
        EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    }
}

TEST(Grid, PgmMapsMinToZeroAndMaxTo255) {
    GridResult g;
    g.lambdas = {1.0, 2.0};
    g.e_attns = {5, 7};
    g.cells = {make_cell(1.0, 5, 0.1), make_cell(1.0, 7, 0.2), make_cell(2.0, 5, 0.3),
               make_cell(2.0, 7, 0.0, true)};
    GrayImage img = grid_pgm(g);
    ASSERT_EQ(img.height, 2u);
    ASSERT_EQ(img.width, 2u);
    EXPECT_EQ(img.pixels[0], 0);   // min
    EXPECT_EQ(img.pixels[1], 128); // (0.2-0.1)/(0.3-0.1)*255+0.5 = 128.0
    EXPECT_EQ(img.pixels[2], 255); // max
    EXPECT_EQ(img.pixels[3], 0);   // failed renders black

    const std::string bytes = encode_pgm(img);
    EXPECT_EQ(bytes.substr(0, 9), "P5\n2 2\n25");
    EXPECT_EQ(bytes.size(), std::string("P5\n2 2\n255\n").size() + 4);
}

TEST(Grid, PgmDegenerateGrids) {
    GridResult flat;
    flat.lambdas = {1.0};
    flat.e_attns = {5, 7};
    flat.cells = {make_cell(1.0, 5, 0.42), make_cell(1.0, 7, 0.42)};
    GrayImage f = grid_pgm(flat);
    EXPECT_EQ(f.pixels[0], 255);
    EXPECT_EQ(f.pixels[1], 255);

    GridResult dead;
    dead.lambdas = {1.0};
    dead.e_attns = {5};
    dead.cells = {make_cell(1.0, 5, 0.0, true)};
    GrayImage d = grid_pgm(dead);
    ASSERT_EQ(d.pixels.size(), 1u);
    EXPECT_EQ(d.pixels[0], 0);
}
