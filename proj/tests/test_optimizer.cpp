#include <nlohmann/json.hpp>

#include "doctest.h"
#include "protoreg/log.hpp"
#include "protoreg/metrics.hpp"
#include "protoreg/optimizer.hpp"
#include "protoreg/phantom.hpp"
#include "support.hpp"

using namespace protoreg;
using namespace testing;

namespace {

// Learning rate and schedule used for per-pair optimization in the tests.
RegistrationConfig fast_config(int levels = 4, int iterations = 100) {
    RegistrationConfig c;
    c.levels = levels;
    c.iterations = {iterations};
    c.adam.learning_rate = 0.05;
    return c;
}

struct QuietWarnings {
    std::vector<std::string> seen;
    WarningSink previous;
    QuietWarnings() : previous(set_warning_sink([this](const std::string& m) { seen.push_back(m); })) {}
    ~QuietWarnings() { set_warning_sink(previous); }
};

double mean_endpoint_error(const DisplacementField& a, const DisplacementField& b, const LabelVolume& region) {
    double sum = 0.0;
    long n = 0;
    for (Eigen::Index i = 0; i < a.dims().size(); ++i) {
        if (region.labels()[i] == 0) continue;
        sum += (a.u().col(i) - b.u().col(i)).norm();
        ++n;
    }
    return sum / double(n);
}

}  // namespace

TEST_SUITE("optimizer") {

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    std::mt19937_64 rng(1);
    const DisplacementField start = random_field({3, 3, 3}, rng, 1.0);
    Eigen::Matrix3Xd u = start.u();
    AdamState s(27);
    adam_step(u, Eigen::Matrix3Xd::Zero(3, 27), s, AdamConfig{});
    CHECK(u == start.u());
    CHECK(s.t == 1);
    CHECK(s.m.isZero(0.0));
}

TEST_CASE("adam moments decay under a zero gradient") {
    AdamState s(4);
    s.m.setConstant(1.0);
    s.v.setConstant(2.0);
    s.t = 3;
    Eigen::Matrix3Xd u = Eigen::Matrix3Xd::Zero(3, 4);
    adam_step(u, Eigen::Matrix3Xd::Zero(3, 4), s, AdamConfig{});
    CHECK((s.m.array() == 0.9).all());
    CHECK((s.v.array() == 2.0 * 0.999).all());
}

TEST_CASE("first adam step moves each component by about the learning rate") {
    Eigen::Matrix3Xd g(3, 2);
    g << 0.5, -3.0, 1e-3, 2.0, -0.25, 7.0;
    Eigen::Matrix3Xd u = Eigen::Matrix3Xd::Zero(3, 2);
    AdamState s(2);
    const AdamConfig c{0.01, 0.9, 0.999, 1e-8};
    adam_step(u, g, s, c);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double expected = -c.learning_rate * g.data()[i] / (std::abs(g.data()[i]) + c.eps);
        CHECK(u.data()[i] == doctest::Approx(expected).epsilon(1e-12));
        CHECK(std::abs(std::abs(u.data()[i]) - 0.01) < 1e-6);
    }
}

TEST_CASE("adam converges on a quadratic") {
    std::mt19937_64 rng(2);
    const DisplacementField target = random_field({4, 4, 4}, rng, 1.0);
    Eigen::Matrix3Xd u = Eigen::Matrix3Xd::Zero(3, 64);
    AdamState s(64);
    const double start = (u - target.u()).norm();
    for (int it = 0; it < 500; ++it) adam_step(u, 2.0 * (u - target.u()), s, AdamConfig{1e-2});
    CHECK((u - target.u()).norm() < start / 10.0);
}

TEST_CASE("adam rejects mismatched sizes") {
    Eigen::Matrix3Xd u = Eigen::Matrix3Xd::Zero(3, 4);
    AdamState s(4);
    CHECK_THROWS_AS(adam_step(u, Eigen::Matrix3Xd::Zero(3, 5), s, AdamConfig{}), InvalidArgument);
}

TEST_CASE("registration config defaults") {
    const RegistrationConfig c;
    CHECK(c.levels == 4);
    CHECK(c.iterations == std::vector<int>{300, 200, 150, 100});
    CHECK(c.adam.learning_rate == 1e-4);
    CHECK(c.adam.beta1 == 0.9);
    CHECK(c.adam.beta2 == 0.999);
    CHECK(c.adam.eps == 1e-8);
    CHECK(c.weights.sim == 1.0);
    CHECK(c.weights.smooth == 4.0);
    CHECK(c.weights.seg == 1.0);
    CHECK(c.weights.prototype == 1.0);
    CHECK(c.weights.contour == 0.1);
    CHECK(c.lncc_window == 9);
    CHECK(c.max_contour_points == 2048);
    CHECK(c.temperature == 0.1);
    CHECK(c.iterations_at(3) == 300);
    CHECK(c.iterations_at(0) == 100);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("registration config validation") {
    RegistrationConfig c;
    c.levels = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = RegistrationConfig{};
    c.iterations = {10, 0, 10, 10};
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = RegistrationConfig{};
    c.adam.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = RegistrationConfig{};
    c.levels = 5;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c.iterations = {7};
    CHECK_NOTHROW(c.validate());
    CHECK(c.iterations_at(4) == 7);
}

TEST_CASE("registration config json round trip") {
    RegistrationConfig c;
    c.levels = 3;
    c.iterations = {5, 6, 7};
    c.adam.learning_rate = 0.02;
    c.weights = {1, 2, 3, 4, 5};
    c.seed = 99;
    const nlohmann::json j = c;
    const RegistrationConfig back = j.get<RegistrationConfig>();
    CHECK(back.levels == 3);
    CHECK(back.iterations == c.iterations);
    CHECK(back.adam.learning_rate == 0.02);
    CHECK(back.weights.contour == 5.0);
    CHECK(back.seed == 99);
    CHECK(nlohmann::json(back) == j);

    const RegistrationConfig partial = nlohmann::json{{"learning_rate", 0.5}}.get<RegistrationConfig>();
    CHECK(partial.adam.learning_rate == 0.5);
    CHECK(partial.levels == 4);
    CHECK_THROWS_AS(nlohmann::json({{"learning_rat", 0.5}}).get<RegistrationConfig>(), InvalidArgument);
    CHECK_THROWS_AS(nlohmann::json({{"weights", {1, 2}}}).get<RegistrationConfig>(), InvalidArgument);
}

TEST_CASE("identical pair stays at the zero field") {
    PhantomSpec spec;
    spec.dims = {16, 16, 16};
    spec.blobs = 2;
    spec.magnitude = 0.0;
    spec.noise_sigma = 0.0;
    const PhantomCase pc = generate(spec);
    const RegistrationResult r =
        register_pair(pc.fixed, pc.fixed, pc.fixed_labels, pc.fixed_labels, RegistrationConfig{});
    CHECK(r.field.dims() == pc.fixed.dims());
    CHECK(r.field.u().colwise().norm().mean() < 0.05);
    CHECK(r.jacobian.sdlogj < 0.01);
}

TEST_CASE("identical pair without the prototype term does not move at all") {
    PhantomSpec spec;
    spec.dims = {16, 16, 16};
    spec.blobs = 2;
    spec.magnitude = 0.0;
    spec.noise_sigma = 0.0;
    const PhantomCase pc = generate(spec);
    RegistrationConfig c = fast_config(3, 50);
    c.weights.prototype = 0.0;
    const RegistrationResult r = register_pair(pc.fixed, pc.fixed, pc.fixed_labels, pc.fixed_labels, c);
    CHECK(r.field.u().isZero(0.0));
    CHECK(r.jacobian.sdlogj == 0.0);
}

TEST_CASE("rigid three-voxel shift is recovered") {
    PhantomSpec spec;
    spec.blobs = 1;
    spec.deformation = DeformationKind::rigid;
    spec.magnitude = 3.0;
    spec.noise_sigma = 0.1;
    spec.seed = 3;
    const PhantomCase pc = generate(spec);
    const RegistrationResult masked =
        register_pair(pc.fixed, pc.moving, pc.fixed_labels, pc.moving_labels, fast_config());
    const auto masked_dsc = summarize_dsc(pc.fixed_labels, warp_labels(pc.moving_labels, masked.field));
    CHECK(masked_dsc.average.value() > 0.95);
    CHECK(mean_endpoint_error(masked.field, pc.truth, pc.fixed_labels) < 0.5);

    QuietWarnings quiet;
    const RegistrationResult plain = register_pair(pc.fixed, pc.moving, fast_config());
    const auto plain_dsc = summarize_dsc(pc.fixed_labels, warp_labels(pc.moving_labels, plain.field));
    CHECK(plain.unsupervised);
    CHECK(plain_dsc.average.value() < masked_dsc.average.value());
}

TEST_CASE("registration is deterministic and keeps the best iterate per level") {
    PhantomSpec spec;
    spec.dims = {24, 24, 24};
    spec.blobs = 1;
    spec.magnitude = 2.0;
    spec.seed = 5;
    const PhantomCase pc = generate(spec);
    const RegistrationConfig c = fast_config(3, 60);
    const RegistrationResult a = register_pair(pc.fixed, pc.moving, pc.fixed_labels, pc.moving_labels, c);
    const RegistrationResult b = register_pair(pc.fixed, pc.moving, pc.fixed_labels, pc.moving_labels, c);
    CHECK(a.field.u() == b.field.u());
    REQUIRE(a.levels.size() == 3);
    for (std::size_t l = 0; l < a.levels.size(); ++l) {
        const LevelTrace& t = a.levels[l];
        CHECK(t.totals == b.levels[l].totals);
        CHECK(t.level == int(2 - l));
        CHECK(t.totals.size() == 61);
        CHECK(t.end.total <= t.start.total);
        CHECK(t.end.total == *std::min_element(t.totals.begin(), t.totals.end()));
    }
    CHECK(a.levels[0].dims == Dims{6, 6, 6});
    CHECK(a.levels[2].dims == Dims{24, 24, 24});
    CHECK(a.final_breakdown.total == a.levels.back().end.total);
    CHECK(a.jacobian.sdlogj == sdlogj(a.field).sdlogj);
}

// Trend contract: the lowest objective in each successive 50-iteration block does not increase.
TEST_CASE("loss trend is non-increasing over 50-iteration blocks") {
    PhantomSpec spec;
    spec.seed = 2;
    const PhantomCase pc = generate(spec);
    const RegistrationResult r =
        register_pair(pc.fixed, pc.moving, pc.fixed_labels, pc.moving_labels, fast_config(4, 100));
    for (const LevelTrace& t : r.levels) {
        CAPTURE(t.level);
        double previous = std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b + 50 <= t.totals.size(); b += 50) {
            const double block = *std::min_element(t.totals.begin() + long(b), t.totals.begin() + long(b + 50));
            CHECK(block <= previous);
            previous = block;
        }
    }
}

TEST_CASE("output field has full resolution for any level count") {
    std::mt19937_64 rng(6);
    const Dims d{12, 10, 8};
    const Volume f = random_volume(d, rng), m = random_volume(d, rng);
    QuietWarnings quiet;
    for (int levels : {1, 2, 3}) {
        const RegistrationResult r = register_pair(f, m, fast_config(levels, 3));
        CHECK(r.field.dims() == d);
        CHECK(int(r.levels.size()) == levels);
    }
}

TEST_CASE("missing masks switch to unsupervised mode with a warning") {
    std::mt19937_64 rng(7);
    const Dims d{8, 8, 8};
    const Volume f = random_volume(d, rng), m = random_volume(d, rng);
    QuietWarnings quiet;
    const RegistrationResult r = register_pair(f, m, fast_config(2, 3));
    CHECK(r.unsupervised);
    REQUIRE(quiet.seen.size() == 1);
    CHECK(quiet.seen[0].find("unsupervised mode: ω₃,ω₄,ω₅ disabled") != std::string::npos);
    CHECK(r.final_breakdown.seg == 0.0);
    CHECK(r.final_breakdown.weights.seg == 0.0);
    CHECK(r.final_breakdown.weights.prototype == 0.0);
    CHECK(r.final_breakdown.weights.contour == 0.0);
}

TEST_CASE("disabling mask terms never reads the masks") {
    // The mask arguments are unusable stand-ins: wrong dims and a different class universe.
    // With every mask weight at zero the run must succeed and match the mask-free run.
    std::mt19937_64 rng(8);
    const Dims d{12, 12, 12};
    const Volume f = random_volume(d, rng), m = random_volume(d, rng);
    const LabelVolume poison_a = random_labels({3, 3, 3}, 2, rng);
    const LabelVolume poison_b = random_labels({5, 5, 5}, 7, rng);
    RegistrationConfig c = fast_config(2, 10);
    c.weights.seg = c.weights.prototype = c.weights.contour = 0.0;
    const RegistrationResult with = register_pair(f, m, poison_a, poison_b, c);
    const RegistrationResult without = register_pair(f, m, c);
    CHECK(with.field.u() == without.field.u());
    CHECK_FALSE(with.unsupervised);
}

TEST_CASE("registration input errors") {
    std::mt19937_64 rng(9);
    const Dims d{8, 8, 8};
    const Volume f = random_volume(d, rng), m = random_volume(d, rng);
    const LabelVolume a = random_labels(d, 2, rng), b = random_labels(d, 3, rng);
    CHECK_THROWS_AS(register_pair(f, m, a, b, fast_config(2, 2)), InvalidArgument);
    CHECK_THROWS_AS(register_pair(f, random_volume({8, 8, 9}, rng), a, a, fast_config(2, 2)), InvalidArgument);
    CHECK_THROWS_AS(register_pair(f, m, a, a, fast_config(4, 2)), InvalidArgument);
}

TEST_CASE("non-finite loss aborts with the term named") {
    std::mt19937_64 rng(10);
    const Dims d{8, 8, 8};
    const Volume f = random_volume(d, rng);
    Volume m = random_volume(d, rng);
    m(3, 3, 3) = std::nan("");
    const LabelVolume a = random_labels(d, 2, rng);
    try {
        register_pair(f, m, a, a, fast_config(1, 2));
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(e.term() == "sim");
        CHECK(std::string(e.what()).find("sim") != std::string::npos);
    }
}

}  // TEST_SUITE
