#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ape/optim.hpp"
#include "ape/rng.hpp"

using namespace ape;

TEST_CASE("zero learning rate leaves parameters untouched") {
    std::vector<double> p{1.0, -2.0, 3.0};
    std::vector<double> g{0.5, 0.5, -0.25};
    AdamW<double> opt;
    opt.cfg.lr = 0.0;
    opt.cfg.weight_decay = 0.0;
    opt.init({&p});
    opt.step({&p}, {&g});
    REQUIRE(p == std::vector<double>{1.0, -2.0, 3.0});
    REQUIRE(opt.step_count == 1);
}

TEST_CASE("gradients are clipped to the global norm bound") {
    std::vector<double> p1{0.0, 0.0};
    std::vector<double> p2{0.0};
    std::vector<double> g1{3.0, 4.0}; // contributes 25
    std::vector<double> g2{12.0};     // contributes 144 -> norm 13
    AdamW<double> opt;
    opt.cfg.clip = 1.0;
    opt.init({&p1, &p2});
    const double post = opt.step({&p1, &p2}, {&g1, &g2});
    REQUIRE(post == Catch::Approx(1.0));
    // in-place scaling preserved direction: (3,4,12)/13
    REQUIRE(g1[0] == Catch::Approx(3.0 / 13.0));
    REQUIRE(g1[1] == Catch::Approx(4.0 / 13.0));
    REQUIRE(g2[0] == Catch::Approx(12.0 / 13.0));

    // below the bound nothing changes
    std::vector<double> g3{0.3, 0.4};
    std::vector<double> g4{0.0};
    const double post2 = opt.step({&p1, &p2}, {&g3, &g4});
    REQUIRE(post2 == Catch::Approx(0.5));
    REQUIRE(g3[0] == 0.3);
}

TEST_CASE("first step moves by about the learning rate per coordinate") {
    // bias-corrected Adam: step one update is lr * g / (|g| + eps)
    std::vector<double> p{10.0, -5.0};
    std::vector<double> g{0.3, -2.0};
    AdamW<double> opt;
    opt.cfg.lr = 0.01;
    opt.cfg.weight_decay = 0.0;
    opt.cfg.clip = 0.0; // disabled
    opt.init({&p});
    opt.step({&p}, {&g});
    REQUIRE(p[0] == Catch::Approx(10.0 - 0.01).epsilon(1e-6));
    REQUIRE(p[1] == Catch::Approx(-5.0 + 0.01).epsilon(1e-6));
}

TEST_CASE("weight decay is decoupled from the gradient path") {
    std::vector<double> p{2.0};
    std::vector<double> g{0.0};
    AdamW<double> opt;
    opt.cfg.lr = 0.1;
    opt.cfg.weight_decay = 0.5;
    opt.cfg.clip = 0.0;
    opt.init({&p});
    opt.step({&p}, {&g});
    // zero gradient: the only movement is -lr * wd * p
    REQUIRE(p[0] == Catch::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("adamw converges on a separable quadratic") {
    std::vector<double> p{-4.0, 7.0, 0.5};
    const std::vector<double> target{3.0, -1.0, 2.0};
    AdamW<double> opt;
    opt.cfg.lr = 0.05;
    opt.cfg.weight_decay = 0.0;
    opt.init({&p});
    std::vector<double> g(3);
    for (int it = 0; it < 4000; ++it) {
        for (int i = 0; i < 3; ++i) g[i] = 2.0 * (p[i] - target[i]);
        opt.step({&p}, {&g});
    }
    for (int i = 0; i < 3; ++i) REQUIRE(p[i] == Catch::Approx(target[i]).margin(1e-3));
}

TEST_CASE("optimizer state restores bitwise for exact resume") {
    Rng rng(7);
    std::vector<double> p(32), g(32);
    for (auto& x : p) x = rng.uniform(-1.0, 1.0);
    AdamW<double> opt;
    opt.cfg.lr = 0.01;
    opt.init({&p});
    auto grad_fill = [&](int step) {
        Rng grng(Rng::mix(99, std::uint64_t(step)));
        for (auto& x : g) x = grng.uniform(-1.0, 1.0);
    };
    for (int it = 0; it < 10; ++it) {
        grad_fill(it);
        opt.step({&p}, {&g});
    }
    // snapshot
    const auto p_snap = p;
    const auto m_snap = opt.m;
    const auto v_snap = opt.v;
    const auto steps_snap = opt.step_count;
    for (int it = 10; it < 20; ++it) {
        grad_fill(it);
        opt.step({&p}, {&g});
    }
    const auto p_final = p;

    // resume from the snapshot and replay: must land on the same bits
    p = p_snap;
    AdamW<double> opt2;
    opt2.cfg = opt.cfg;
    opt2.m = m_snap;
    opt2.v = v_snap;
    opt2.step_count = steps_snap;
    for (int it = 10; it < 20; ++it) {
        grad_fill(it);
        opt2.step({&p}, {&g});
    }
    REQUIRE(p == p_final);
}
