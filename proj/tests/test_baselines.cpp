#include "support.hpp"

#include "spo2/baselines.hpp"
#include "spo2/errors.hpp"
#include "spo2/harness.hpp"
#include "spo2/synth.hpp"

#include "doctest.h"

using namespace spo2;

namespace {

SynthParams clean_params(double spo2, std::uint64_t seed) {
    SynthParams p;
    p.n_rois = 16;
    p.duration_s = 60.0;
    p.spo2_baseline = spo2;
    p.dip_depth = 0.0;
    p.drift_amp = 0.0;
    p.noise_sigma = 0.0;
    p.seed = seed;
    return p;
}

SpatioTemporalMap two_channel_window(const std::vector<double>& red,
                                     const std::vector<double>& blue) {
    SpatioTemporalMap m(1, red.size(), 30.0);
    for (std::size_t t = 0; t < red.size(); ++t) {
        m.at(0, 0, t) = static_cast<float>(red[t]);
        m.at(1, 0, t) = static_cast<float>(0.5 * (red[t] + blue[t]));
        m.at(2, 0, t) = static_cast<float>(blue[t]);
    }
    return m;
}

} // namespace

TEST_SUITE("baselines") {

TEST_CASE("window_dc_ac: mean and population standard deviation") {
    const std::vector<double> flat{1, 1, 1, 1};
    const auto a = window_dc_ac(flat);
    CHECK(a.dc == 1.0);
    CHECK(a.ac == 0.0);
    const std::vector<double> two{0, 2};
    const auto b = window_dc_ac(two);
    CHECK(b.dc == 1.0);
    CHECK(b.ac == 1.0);
    const auto x = test::sine(300, 1.2, 30.0, 0.1, 5.0);
    const auto c = window_dc_ac(x);
    CHECK(c.dc == doctest::Approx(5.0).epsilon(0.02));
    CHECK(c.ac == doctest::Approx(0.1 / std::sqrt(2.0)).epsilon(0.02));
    CHECK_THROWS_AS(window_dc_ac(std::vector<double>{}), LengthError);
    CHECK_THROWS_AS(window_dc_ac(std::vector<double>{1.0}), LengthError);
}

TEST_CASE("compute_ror arithmetic and symmetry") {
    const std::vector<double> red{99, 101, 99, 101};
    const std::vector<double> blue{49, 51, 49, 51};
    CHECK(compute_ror(red, blue) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(compute_ror(red, red) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("compute_ror flags degenerate blue channels") {
    const std::vector<double> red{99, 101, 99, 101};
    CHECK_THROWS_AS(compute_ror(red, std::vector<double>{3, 3, 3, 3}), DegenerateSignalError);
    CHECK_THROWS_AS(compute_ror(red, std::vector<double>{-1, 1, -1, 1}), DegenerateSignalError);
    CHECK_THROWS_AS(compute_ror(red, std::vector<double>{1, 2}), LengthError);
}

TEST_CASE("compute_ror is invariant to per-channel scaling") {
    const auto red = test::randn(300, 3, 1.0);
    auto blue = test::randn(300, 4, 1.0);
    std::vector<double> r2 = red;
    for (auto& v : r2) v += 10.0;
    for (auto& v : blue) v += 7.0;
    const double base = compute_ror(r2, blue);
    for (double k : {0.01, 0.5, 3.0, 1000.0}) {
        std::vector<double> scaled = r2;
        for (auto& v : scaled) v *= k;
        CHECK(std::fabs(compute_ror(scaled, blue) - base) < 1e-9);
    }
}

TEST_CASE("compute_ror inverts a noiseless synthetic window") {
    const auto rec = gen_subject(clean_params(95.0, 8), "c95");
    const auto mask = default_roi_mask(rec.map.n_rois());
    for (std::size_t start = 0; start + 300 <= rec.map.n_frames(); start += 300) {
        CHECK(window_ror(rec.map.slice(start, 300), mask) == doctest::Approx(0.5).epsilon(2e-3));
        CHECK(std::fabs(window_ror(rec.map.slice(start, 300), mask) - 0.5) <= 1e-3);
    }
}

TEST_CASE("fit_calibration: two-point solve and rank error") {
    const std::vector<double> r{0.4, 0.6}, s{98, 92};
    const auto cal = fit_calibration(r, s);
    CHECK(cal.a == doctest::Approx(-30.0).epsilon(1e-12));
    CHECK(cal.b == doctest::Approx(110.0).epsilon(1e-12));
    CHECK_THROWS_AS(fit_calibration(std::vector<double>{0.5, 0.5, 0.5},
                                    std::vector<double>{90, 91, 92}),
                    RankError);
    CHECK_THROWS_AS(fit_calibration(std::vector<double>{0.5}, std::vector<double>{90}), RankError);
}

TEST_CASE("fit_calibration interpolates exact linear data") {
    std::vector<double> r, s;
    for (int i = 0; i < 20; ++i) {
        r.push_back(0.3 + 0.02 * i);
        s.push_back(-25.0 * r.back() + 107.0);
    }
    const auto cal = fit_calibration(r, s);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::fabs(cal.a * r[i] + cal.b - s[i]) < 1e-9);
}

TEST_CASE("fit_calibration residuals satisfy the normal equations") {
    const auto r = test::randn(50, 10, 0.1);
    const auto noise = test::randn(50, 11, 1.0);
    std::vector<double> rr, s;
    for (std::size_t i = 0; i < r.size(); ++i) {
        rr.push_back(0.5 + r[i]);
        s.push_back(-30.0 * rr.back() + 110.0 + noise[i]);
    }
    const auto cal = fit_calibration(rr, s);
    double sum_r = 0.0, sum_rx = 0.0;
    for (std::size_t i = 0; i < rr.size(); ++i) {
        const double res = cal.a * rr[i] + cal.b - s[i];
        sum_r += res;
        sum_rx += res * rr[i];
    }
    CHECK(std::fabs(sum_r) < 1e-6);
    CHECK(std::fabs(sum_rx) < 1e-6);
}

TEST_CASE("fit_calibration recovers the generator constants from clean subjects") {
    std::vector<double> rors, targets;
    std::uint64_t seed = 1;
    for (double level : {88.0, 91.0, 94.0, 97.0, 99.5}) {
        const auto rec = gen_subject(clean_params(level, seed++), "c");
        const auto mask = default_roi_mask(rec.map.n_rois());
        for (const auto& w : raw_windows(rec.map, 2.0)) {
            rors.push_back(window_ror(w, mask));
            targets.push_back(level);
        }
    }
    const auto cal = fit_calibration(rors, targets);
    CHECK(cal.a == doctest::Approx(-30.0).epsilon(0.005));
    CHECK(cal.b == doctest::Approx(110.0).epsilon(0.005));
}

TEST_CASE("predict_ror: arithmetic, clamp and synthetic oracle") {
    const RorCalibration cal{-30.0, 110.0};
    CHECK(cal.predict(0.5) == doctest::Approx(95.0));
    CHECK(cal.predict(1.0 / 3.0) == 100.0);
    CHECK(cal.predict(2.0) == 85.0);
    const auto rec = gen_subject(clean_params(93.0, 5), "c93");
    const auto w = rec.map.slice(300, 300);
    CHECK(std::fabs(predict_ror(cal, w, default_roi_mask(w.n_rois())) - 93.0) <= 0.05);
}

TEST_CASE("predict_ror output always lies in [85, 100]") {
    const RorCalibration cal{-30.0, 110.0};
    for (std::uint64_t s = 0; s < 50; ++s) {
        auto red = test::randn(60, 2 * s, 1.0 + static_cast<double>(s));
        auto blue = test::randn(60, 2 * s + 1, 0.1);
        for (auto& v : red) v += 50.0;
        for (auto& v : blue) v += 20.0;
        const auto w = two_channel_window(red, blue);
        const double y = predict_ror(cal, w, {0});
        CHECK(y >= 85.0);
        CHECK(y <= 100.0);
    }
}

TEST_CASE("ROI masks are validated") {
    const auto w = test::random_map(4, 30, 1, 10.0);
    CHECK_THROWS_AS(window_ror(w, {}), DimensionError);
    CHECK_THROWS_AS(window_ror(w, {4}), DimensionError);
    CHECK(default_roi_mask(224).size() == 112);
    CHECK(default_roi_mask(224).front() == 112);
}

TEST_CASE("fit_lr recovers a planted linear model") {
    std::vector<RatioFeatures> f;
    std::vector<double> y;
    const auto g = test::randn(60, 4, 0.01);
    for (std::size_t i = 0; i < 20; ++i) {
        f.push_back({0.2 + g[3 * i], 0.3 + g[3 * i + 1], 0.4 + g[3 * i + 2]});
        y.push_back(100.0 - 10.0 * f.back()[0]);
    }
    const auto m = fit_lr(f, y);
    REQUIRE(m.weights.size() == 3);
    CHECK(std::fabs(m.weights[0] + 10.0) < 1e-6);
    CHECK(std::fabs(m.weights[1]) < 1e-6);
    CHECK(std::fabs(m.weights[2]) < 1e-6);
    CHECK(std::fabs(m.bias - 100.0) < 1e-6);
    CHECK(m.feature_names.size() == 3);

    auto f2 = f;
    auto y2 = y;
    f2.insert(f2.end(), f.begin(), f.end());
    y2.insert(y2.end(), y.begin(), y.end());
    const auto m2 = fit_lr(f2, y2);
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::fabs(m2.weights[k] - m.weights[k]) < 1e-9);
    CHECK(std::fabs(m2.bias - m.bias) < 1e-9);
}

TEST_CASE("duplicate rows leave a noisy OLS fit unchanged") {
    std::vector<RatioFeatures> f;
    std::vector<double> y;
    const auto g = test::randn(40, 12, 1.0);
    const auto e = test::randn(10, 13, 1.0);
    for (std::size_t i = 0; i < 10; ++i) {
        f.push_back({g[4 * i], g[4 * i + 1], g[4 * i + 2]});
        y.push_back(90.0 + 2.0 * g[4 * i] - g[4 * i + 3] + e[i]);
    }
    const auto m = fit_lr(f, y);
    auto f2 = f;
    auto y2 = y;
    f2.insert(f2.end(), f.begin(), f.end());
    y2.insert(y2.end(), y.begin(), y.end());
    const auto m2 = fit_lr(f2, y2);
    for (std::size_t k = 0; k < 3; ++k) CHECK(m2.weights[k] == doctest::Approx(m.weights[k]).epsilon(1e-9));
}

TEST_CASE("fit_lr errors") {
    std::vector<RatioFeatures> f(3, RatioFeatures{0.1, 0.2, 0.3});
    CHECK_THROWS_AS(fit_lr(f, std::vector<double>{1, 2, 3}), LengthError);
    f.resize(6, RatioFeatures{0.1, 0.2, 0.3});
    CHECK_THROWS_AS(fit_lr(f, std::vector<double>(6, 95.0)), RankError);
}

TEST_CASE("predict_lr clamps to the physiological range") {
    const LinearModel m{{100.0, 0.0, 0.0}, 50.0, {"r", "g", "b"}};
    CHECK(predict_lr(m, {1.0, 0, 0}) == 100.0);
    CHECK(predict_lr(m, {0.0, 0, 0}) == 85.0);
    CHECK(predict_lr(m, {0.4, 0, 0}) == doctest::Approx(90.0));
}

TEST_CASE("LR is at least as accurate as RoR on noiseless synthetic data") {
    SynthParams p;
    p.n_rois = 16;
    p.noise_sigma = 0.0;
    std::vector<SubjectRecord> train, test_set;
    for (std::size_t i = 0; i < 6; ++i) {
        p.seed = subject_seed(77, i);
        (i < 4 ? train : test_set).push_back(gen_subject(p, "s" + std::to_string(i)));
    }
    const auto mask = default_roi_mask(16);
    const auto ror = run_baseline(BaselineMethod::ror, train, test_set, mask);
    const auto lr = run_baseline(BaselineMethod::lr, train, test_set, mask);
    MESSAGE("RoR MAE " << ror.evaluation.metrics.mae << ", LR MAE " << lr.evaluation.metrics.mae);
    CHECK(lr.evaluation.metrics.mae <= ror.evaluation.metrics.mae);
}

TEST_CASE("baseline models serialize with the documented keys") {
    nlohmann::json j = RorCalibration{-30.0, 110.0};
    CHECK(j.at("kind") == "ror");
    CHECK(j.at("a") == -30.0);
    CHECK(j.at("b") == 110.0);
    const auto cal = j.get<RorCalibration>();
    CHECK(cal.a == -30.0);
    nlohmann::json k = LinearModel{{1.0, 2.0, 3.0}, 4.0, {"x", "y", "z"}};
    CHECK(k.at("kind") == "lr");
    CHECK(k.at("weights").size() == 3);
    CHECK(k.at("bias") == 4.0);
    CHECK(k.at("feature_names")[2] == "z");
    CHECK(k.get<LinearModel>().weights[1] == 2.0);
    CHECK_THROWS_AS(j.get<LinearModel>(), FormatError);
}

} // TEST_SUITE
