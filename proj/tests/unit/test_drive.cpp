#include "doctest.h"

#include "steerfuse/sim/drive.hpp"

#include <cmath>
#include <limits>
#include <numbers>

using namespace steerfuse;
using namespace steerfuse::sim;

namespace {

TrackConfig kind_config(CurvatureKind kind, double radius = 200.0)
{
    TrackConfig c;
    c.kind = kind;
    c.arc_radius = radius;
    return c;
}

double lateral_rms(const std::vector<DriveSample>& d)
{
    double acc = 0.0;
    for (const auto& s : d) {
        acc += s.where.lateral * s.where.lateral;
    }
    return std::sqrt(acc / double(d.size()));
}

} // namespace

TEST_CASE("expert on a straight road steers straight")
{
    const Track t = generate_track(kind_config(CurvatureKind::straight), 1);
    const auto d = expert_drive(t, {}, 1);
    REQUIRE(d.size() > 100);
    for (const auto& s : d) {
        CHECK(std::abs(s.state.steering_wheel_deg) < 0.5);
    }
    CHECK(d[1].time == doctest::Approx(0.1));
}

TEST_CASE("expert on an arc matches the bicycle steady state")
{
    for (double r : {200.0, -120.0, 60.0}) {
        const Track t = generate_track(kind_config(CurvatureKind::arc, r), 1);
        const auto d = expert_drive(t, {}, 1);
        const double expected = 16.0 * std::atan(2.85 / r) * 180.0 / std::numbers::pi;
        // Past the entry transient.
        for (std::size_t i = 200; i < d.size(); i += 10) {
            CHECK(d[i].state.steering_wheel_deg == doctest::Approx(expected).epsilon(0.05));
        }
        CHECK(steady_state_wheel_deg({}, r) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("expert tracks default roads closely")
{
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
        const Track t = generate_track(TrackConfig{}, seed);
        for (double kmh : {25.0, 40.0}) {
            ExpertConfig cfg;
            cfg.speed = kmh / 3.6;
            CHECK(lateral_rms(expert_drive(t, cfg, seed)) < 0.05);
        }
    }
}

TEST_CASE("expert wander is deterministic and adds offsets")
{
    const Track t = generate_track(TrackConfig{}, 2);
    ExpertConfig cfg;
    cfg.wander_sigma = 0.03;
    const auto a = expert_drive(t, cfg, 5), b = expert_drive(t, cfg, 5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].state == b[i].state);
    }
    CHECK(lateral_rms(a) > lateral_rms(expert_drive(t, {}, 5)));
}

TEST_CASE("expert beyond the wheel limit is infeasible")
{
    TrackConfig c = kind_config(CurvatureKind::arc, 6.0);
    const Track t = generate_track(c, 1);
    ExpertConfig cfg;
    cfg.controller.vehicle.max_wheel_deg = 200.0;
    CHECK_THROWS_AS(expert_drive(t, cfg, 1), TrackInfeasible);
}

TEST_CASE("smoother")
{
    SUBCASE("hand arithmetic")
    {
        SmootherConfig c;
        c.max_delta = 1e9;
        Smoother s(c);
        CHECK(s.step(0.0).smoothed == 0.0);
        CHECK(s.step(10.0).smoothed == doctest::Approx(9.0).epsilon(1e-15));
        CHECK(s.step(10.0).smoothed == doctest::Approx(9.9).epsilon(1e-15));

        c.weight_on_current = false;
        Smoother old(c);
        old.step(0.0);
        CHECK(old.step(10.0).smoothed == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("constant input is a fixed point from the first frame")
    {
        Smoother s({}, 7.5);
        for (int i = 0; i < 5; ++i) {
            const SmoothStep r = s.step(7.5);
            CHECK(r.smoothed == 7.5);
            CHECK(r.command == 7.5);
        }
    }
    SUBCASE("rate limit on a step")
    {
        Smoother s;
        double prev = 0.0;
        for (int i = 0; i < 20; ++i) {
            const double cmd = s.step(100.0).command;
            CHECK(cmd - prev <= 10.0 + 1e-12);
            CHECK(cmd >= prev);
            prev = cmd;
        }
        CHECK(prev == doctest::Approx(100.0));
    }
    SUBCASE("absolute clamp")
    {
        SmootherConfig c;
        c.max_delta = 1e9;
        Smoother s(c);
        CHECK(s.step(900.0).command == 540.0);
        CHECK(s.step(-900.0).command == -540.0);
    }
    SUBCASE("non-finite raw holds")
    {
        Smoother s;
        s.step(5.0);
        const SmoothStep r = s.step(std::numeric_limits<double>::quiet_NaN());
        CHECK(r.held);
        CHECK(r.command == 5.0);
        CHECK(s.step(std::numeric_limits<double>::infinity()).command == 5.0);
        CHECK(s.step(5.0).smoothed == 5.0);
    }
    SUBCASE("EMA stays inside the range of raw inputs")
    {
        SmootherConfig c;
        c.max_delta = 1e9;
        Smoother s(c);
        Rng rng(3);
        double lo = 1e300, hi = -1e300;
        for (int i = 0; i < 1000; ++i) {
            const double raw = rng.uniform(-300.0, 300.0);
            lo = std::min(lo, raw);
            hi = std::max(hi, raw);
            const double v = s.step(raw).smoothed;
            CHECK(v >= lo - 1e-9);
            CHECK(v <= hi + 1e-9);
        }
    }
}

TEST_CASE("intervention bookkeeping")
{
    const InterventionSummary none = summarize_interventions({}, 600.0);
    CHECK(none.autonomy() == 1.0);
    CHECK(none.interventions == 0);

    const std::vector<double> two{100.0, 400.0};
    const InterventionSummary s = summarize_interventions(two, 588.0);
    CHECK(s.interventions == 2);
    CHECK(s.operation_time == doctest::Approx(600.0).epsilon(1e-15));
    CHECK(std::abs(s.autonomy() - 0.98) <= 1e-9);

    const std::vector<double> close{10.0, 12.0};
    CHECK(summarize_interventions(close, 100.0).interventions == 1);
    CHECK(summarize_interventions(close, 100.0).events == 2);
    const std::vector<double> apart{10.0, 13.0};
    CHECK(summarize_interventions(apart, 100.0).interventions == 2);
    const std::vector<double> chain{10.0, 12.0, 14.0, 30.0};
    CHECK(summarize_interventions(chain, 100.0).interventions == 2);

    // Adding a departure never raises autonomy.
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> ev;
        double t = 0.0;
        for (int i = 0; i < 5; ++i) {
            t += rng.uniform(0.5, 20.0);
            ev.push_back(t);
        }
        const double total = t + 10.0;
        const double before = summarize_interventions(std::span(ev).first(4), total).autonomy();
        const double after = summarize_interventions(ev, total).autonomy();
        CHECK(after <= before);
        CHECK(after >= 0.0);
    }
    const std::vector<double> unsorted{3.0, 1.0};
    CHECK_THROWS_AS(summarize_interventions(unsorted, 10.0), std::invalid_argument);
}

TEST_CASE("closed loop")
{
    SUBCASE("the centerline oracle never departs")
    {
        for (std::uint64_t seed : {1u, 2u}) {
            TrackConfig c;
            c.length = 3000.0;
            const Track t = generate_track(c, seed);
            ClosedLoopConfig cfg;
            const RunMetrics m = closed_loop_eval(t, cfg, centerline_oracle(t), seed);
            CHECK(m.summary.interventions == 0);
            CHECK(m.summary.autonomy() == 1.0);
            CHECK(m.summary.autonomous_time == doctest::Approx(300.0));
        }
    }
    SUBCASE("a stuck wheel departs, resets and is penalized")
    {
        const Track t = generate_track(kind_config(CurvatureKind::straight), 1);
        ClosedLoopConfig cfg;
        cfg.duration = 60.0;
        const Policy left{false, [](const Observation&) { return 40.0; }};
        const RunMetrics m = closed_loop_eval(t, cfg, left, 1);
        CHECK(m.summary.events > 1);
        CHECK(m.summary.autonomy() < 1.0);
        CHECK(m.summary.operation_time == doctest::Approx(60.0 + 6.0 * m.summary.events));
        for (const auto& row : m.trace) {
            CHECK((row.intervention || std::abs(row.lateral) <= t.lane_half()));
        }
    }
    SUBCASE("determinism with rendered sensors")
    {
        const Track t = generate_track(TrackConfig{}, 3);
        ClosedLoopConfig cfg;
        cfg.duration = 3.0;
        const Policy p{true, [](const Observation& o) {
                           return double((*o.camera)[100]) + double(o.lidar->occupied_count()) * 1e-3;
                       }};
        const RunMetrics a = closed_loop_eval(t, cfg, p, 8), b = closed_loop_eval(t, cfg, p, 8);
        REQUIRE(a.trace.size() == b.trace.size());
        for (std::size_t i = 0; i < a.trace.size(); ++i) {
            CHECK(a.trace[i].raw == b.trace[i].raw);
            CHECK(a.trace[i].lateral == b.trace[i].lateral);
        }
    }
}

TEST_CASE("rmse")
{
    const std::vector<double> labels{3.0, 4.0}, zeros{0.0, 0.0};
    CHECK(std::abs(rmse(zeros, labels) - std::sqrt(12.5)) <= 1e-12);
    CHECK(rmse(labels, labels) == 0.0);
    CHECK_THROWS_AS(rmse({}, {}), std::invalid_argument);

    Rng rng(2);
    std::vector<double> p(997), l(997);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = rng.uniform(-90.0, 90.0);
        l[i] = rng.uniform(-90.0, 90.0);
    }
    // Independent accumulation order: backwards in long double.
    long double back = 0.0L;
    for (std::size_t i = p.size(); i-- > 0;) {
        back += (long double)(p[i] - l[i]) * (p[i] - l[i]);
    }
    acc = double(std::sqrt(back / p.size()));
    CHECK(std::abs(rmse(p, l) - acc) <= 1e-9);
}
