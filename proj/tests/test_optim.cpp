#include <catch2/catch_amalgamated.hpp>

#include "casskit/optim/optimizers.hpp"
#include "casskit/optim/schedule.hpp"
#include "casskit/optim/swa.hpp"
#include "casskit/rng.hpp"

using namespace casskit;

TEST_CASE("cosine schedule endpoints and midpoint") {
    ScheduleState st;
    st.step = 0;
    CHECK(cosine_lr(st) == 1e-3);
    st.step = 16;
    CHECK(cosine_lr(st) == 1e-6);
    st.step = 8;
    CHECK(cosine_lr(st) == Catch::Approx(5.005e-4).epsilon(1e-12));
    st.step = 40; // clamped after t_max
    CHECK(cosine_lr(st) == 1e-6);
}

TEST_CASE("cosine schedule monotone nonincreasing and bounded") {
    ScheduleState st;
    double prev = cosine_lr(st);
    for (int t = 1; t <= 16; ++t) {
        st.step = t;
        const double lr = cosine_lr(st);
        CHECK(lr <= prev);
        CHECK(lr >= st.schedule.lr_min);
        CHECK(lr <= st.schedule.lr_max);
        prev = lr;
    }
}

TEST_CASE("cosine schedule warm restarts") {
    ScheduleState st;
    st.schedule.warm_restarts = true;
    st.step = 16;
    CHECK(cosine_lr(st) == st.schedule.lr_max);
    st.step = 24;
    ScheduleState mid;
    mid.step = 8;
    CHECK(cosine_lr(st) == cosine_lr(mid));
}

namespace {

Parameter<float> scalar_param(const std::string& name, float v) {
    Parameter<float> p(name, {1});
    p.value[0] = v;
    return p;
}

} // namespace

TEST_CASE("swa arithmetic") {
    SECTION("snapshots {0} then {2} average to 1") {
        auto p = scalar_param("w", 0.0f);
        ParamRefs<float> refs{&p};
        SwaState<float> swa;
        swa_update(swa, refs);
        p.value[0] = 2.0f;
        swa_update(swa, refs);
        CHECK(swa_average(swa)[0][0] == 1.0f);
    }
    SECTION("identical snapshots are idempotent") {
        auto p = scalar_param("w", 0.75f);
        ParamRefs<float> refs{&p};
        SwaState<float> swa;
        for (int i = 0; i < 7; ++i) swa_update(swa, refs);
        CHECK(swa_average(swa)[0][0] == 0.75f);
    }
    SECTION("snapshots {1,2,4} average to 7/3") {
        auto p = scalar_param("w", 1.0f);
        ParamRefs<float> refs{&p};
        SwaState<float> swa;
        swa_update(swa, refs);
        p.value[0] = 2.0f;
        swa_update(swa, refs);
        p.value[0] = 4.0f;
        swa_update(swa, refs);
        CHECK(swa_average(swa)[0][0] == Catch::Approx(7.0 / 3.0).epsilon(1e-7));
    }
}

TEST_CASE("swa equals brute-force snapshot mean on random sequences") {
    Rng rng(2024);
    for (int seq = 0; seq < 100; ++seq) {
        const std::size_t n = 1 + rng.uniform_int(0, 15);
        Parameter<float> p("w", {n});
        ParamRefs<float> refs{&p};
        SwaState<float> swa;
        const int k = 1 + rng.uniform_int(0, 9);
        std::vector<std::vector<float>> snapshots;
        for (int s = 0; s < k; ++s) {
            for (std::size_t j = 0; j < n; ++j)
                p.value[j] = static_cast<float>(rng.normal(0.0, 3.0));
            snapshots.push_back(p.value.raw());
            swa_update(swa, refs);
        }
        const auto avg = swa_average(swa);
        // brute-force oracle: sum in recording order, then divide
        for (std::size_t j = 0; j < n; ++j) {
            double sum = 0.0;
            for (const auto& snap : snapshots) sum += static_cast<double>(snap[j]);
            const float expect = static_cast<float>(sum / k);
            CHECK(avg[0][j] == expect);
        }
    }
}

TEST_CASE("optimizers reduce a quadratic") {
    for (OptimizerKind kind : {OptimizerKind::adaptive_moment, OptimizerKind::sgd}) {
        Parameter<float> p("w", {4});
        for (std::size_t j = 0; j < 4; ++j) p.value[j] = 2.0f + j;
        ParamRefs<float> refs{&p};
        auto opt = make_optimizer<float>(kind, refs);
        auto objective = [&]() {
            double s = 0.0;
            for (std::size_t j = 0; j < 4; ++j) s += p.value[j] * p.value[j];
            return s;
        };
        const double before = objective();
        for (int it = 0; it < 1500; ++it) {
            zero_grads(refs);
            for (std::size_t j = 0; j < 4; ++j) p.grad[j] = 2.0f * p.value[j];
            opt->step(1e-2);
        }
        CHECK(objective() < before * 0.05);
    }
}
