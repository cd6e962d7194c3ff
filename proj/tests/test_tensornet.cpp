#include "grad_cases.hpp"
#include "support.hpp"

#include "spo2/errors.hpp"
#include "spo2/ops.hpp"
#include "spo2/optim.hpp"

#include "doctest.h"

using namespace spo2;
using namespace spo2::tn;

namespace {

using TD = Tensor<double>;

// Direct loop cross-correlation used as the conv2d oracle.
std::vector<double> conv_reference(const TD& x, const TD& w, const TD& b, Conv2dOptions o) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t oh = conv_out_size(H, kh, o.stride_h, o.pad_h);
    const std::size_t ow = conv_out_size(W, kw, o.stride_w, o.pad_w);
    std::vector<double> out(B * O * oh * ow, 0.0);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < O; ++co)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = b.defined() ? b.values()[co] : 0.0;
                    for (std::size_t ci = 0; ci < C; ++ci)
                        for (std::size_t u = 0; u < kh; ++u)
                            for (std::size_t v = 0; v < kw; ++v) {
                                const long y = static_cast<long>(i * o.stride_h + u) - static_cast<long>(o.pad_h);
                                const long xx = static_cast<long>(j * o.stride_w + v) - static_cast<long>(o.pad_w);
                                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                                acc += w.values()[((co * C + ci) * kh + u) * kw + v] *
                                       x.values()[((n * C + ci) * H + static_cast<std::size_t>(y)) * W +
                                                  static_cast<std::size_t>(xx)];
                            }
                    out[((n * O + co) * oh + i) * ow + j] = acc;
                }
    return out;
}

double channel_mean(const TD& y, std::size_t c) {
    const std::size_t B = y.dim(0), C = y.dim(1), hw = y.dim(2) * y.dim(3);
    double s = 0.0;
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < hw; ++i) s += y.values()[(n * C + c) * hw + i];
    return s / static_cast<double>(B * hw);
}

double channel_var(const TD& y, std::size_t c) {
    const double mu = channel_mean(y, c);
    const std::size_t B = y.dim(0), C = y.dim(1), hw = y.dim(2) * y.dim(3);
    double s = 0.0;
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < hw; ++i) {
            const double d = y.values()[(n * C + c) * hw + i] - mu;
            s += d * d;
        }
    return s / static_cast<double>(B * hw);
}

} // namespace

TEST_SUITE("tensornet") {

TEST_CASE("tensor basics") {
    auto t = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(shape_str(t.shape()) == "(2,3)");
    CHECK_THROWS_AS(TD::from({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.item(), ShapeError);
    auto c = t.clone();
    c.values()[0] = 9;
    CHECK(t.values()[0] == 1);
    auto r = TD::from({2}, {1, 2}, true);
    CHECK(r.clone().requires_grad());
    auto d = r.detach();
    CHECK_FALSE(d.requires_grad());
    d.values()[0] = 7;
    CHECK(r.values()[0] == 1);
}

TEST_CASE("conv2d identity kernel and window sums") {
    auto x = test::random_tensor({1, 1, 4, 5}, 1, 1.0, false);
    auto one = TD::from({1, 1, 1, 1}, {1.0});
    auto y = conv2d(x, one, TD{}, {});
    CHECK(y.values() == x.values());

    auto c = TD::full({1, 1, 5, 5}, 0.7);
    auto ones = TD::full({1, 1, 3, 3}, 1.0);
    auto z = conv2d(c, ones, TD{}, {});
    CHECK(z.shape() == Shape{1, 1, 3, 3});
    for (double v : z.values()) CHECK(v == doctest::Approx(9 * 0.7));
}

TEST_CASE("conv2d matches the direct loop reference") {
    for (const Conv2dOptions o : {Conv2dOptions{1, 1, 0, 0}, Conv2dOptions{2, 2, 1, 1},
                                  Conv2dOptions{1, 2, 1, 0}, Conv2dOptions{3, 1, 2, 2}}) {
        auto x = test::random_tensor({2, 3, 7, 8}, 4, 1.0, false);
        auto w = test::random_tensor({5, 3, 3, 3}, 5, 1.0, false);
        auto b = test::random_tensor({5}, 6, 1.0, false);
        const auto y = conv2d(x, w, b, o);
        const auto ref = conv_reference(x, w, b, o);
        CHECK(y.shape() == Shape{2, 5, conv_out_size(7, 3, o.stride_h, o.pad_h),
                                 conv_out_size(8, 3, o.stride_w, o.pad_w)});
        REQUIRE(y.numel() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-9));
    }
}

TEST_CASE("conv2d float path agrees with the double path") {
    auto xd = test::random_tensor({2, 4, 9, 11}, 7, 1.0, false);
    auto wd = test::random_tensor({6, 4, 3, 3}, 8, 1.0, false);
    std::vector<float> xf(xd.values().begin(), xd.values().end());
    std::vector<float> wf(wd.values().begin(), wd.values().end());
    auto yf = conv2d(Tensor<float>::from(xd.shape(), xf), Tensor<float>::from(wd.shape(), wf),
                     Tensor<float>{}, {2, 2, 1, 1});
    const auto ref = conv_reference(xd, wd, TD{}, {2, 2, 1, 1});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(yf.values()[i] - ref[i]) < 1e-5);
}

TEST_CASE("conv2d shape errors name the axes") {
    auto x = TD::zeros({1, 3, 4, 4});
    CHECK_THROWS_AS(conv2d(x, TD::zeros({2, 2, 3, 3}), TD{}, {}), ShapeError);
    CHECK_THROWS_AS(conv2d(x, TD::zeros({2, 3, 5, 3}), TD{}, {}), ShapeError);
    CHECK_THROWS_AS(conv2d(x, TD::zeros({2, 3, 3, 3}), TD::zeros({3}), {}), ShapeError);
    try {
        conv2d(x, TD::zeros({2, 2, 3, 3}), TD{}, {});
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("channel") != std::string::npos);
    }
}

TEST_CASE("depthwise_conv is channel independent and reduces to conv2d") {
    auto x = test::random_tensor({2, 3, 4, 12}, 10, 1.0, false);
    auto w = test::random_tensor({3, 1, 1, 5}, 11, 1.0, false);
    auto b = test::random_tensor({3}, 12, 1.0, false);
    const Conv2dOptions o{1, 1, 0, 2};
    const auto y = depthwise_conv2d(x, w, b, o);
    CHECK(y.shape() == Shape{2, 3, 4, 12});

    auto w2 = w.clone();
    for (std::size_t i = 0; i < 5; ++i) w2.values()[i] += 1.0;
    const auto y2 = depthwise_conv2d(x, w2, b, o);
    const std::size_t plane = 4 * 12;
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 1; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                CHECK(y2.values()[(n * 3 + c) * plane + i] == y.values()[(n * 3 + c) * plane + i]);

    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> xc;
        for (std::size_t n = 0; n < 2; ++n)
            xc.insert(xc.end(), x.values().begin() + static_cast<long>((n * 3 + c) * plane),
                      x.values().begin() + static_cast<long>((n * 3 + c + 1) * plane));
        auto xs = TD::from({2, 1, 4, 12}, xc);
        auto ws = TD::from({1, 1, 1, 5}, {w.values().begin() + static_cast<long>(5 * c),
                                          w.values().begin() + static_cast<long>(5 * c + 5)});
        auto bs = TD::from({1}, {b.values()[c]});
        const auto ref = conv2d(xs, ws, bs, o);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < plane; ++i)
                CHECK(y.values()[(n * 3 + c) * plane + i] ==
                      doctest::Approx(ref.values()[n * plane + i]).epsilon(1e-12));
    }
}

TEST_CASE("depthwise_conv with strides and padding matches the loop reference") {
    auto x = test::random_tensor({1, 2, 7, 9}, 13, 1.0, false);
    auto w = test::random_tensor({2, 1, 3, 3}, 14, 1.0, false);
    const Conv2dOptions o{2, 2, 1, 1};
    const auto y = depthwise_conv2d(x, w, TD{}, o);
    for (std::size_t c = 0; c < 2; ++c) {
        auto xs = TD::from({1, 1, 7, 9}, {x.values().begin() + static_cast<long>(c * 63),
                                          x.values().begin() + static_cast<long>((c + 1) * 63)});
        auto ws = TD::from({1, 1, 3, 3}, {w.values().begin() + static_cast<long>(c * 9),
                                          w.values().begin() + static_cast<long>((c + 1) * 9)});
        const auto ref = conv_reference(xs, ws, TD{}, o);
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(y.values()[c * ref.size() + i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("batchnorm train mode standardizes each channel") {
    auto x = test::random_tensor({4, 3, 5, 6}, 20, 3.0, false);
    for (auto& v : x.values()) v += 2.0;
    BatchNormState<double> st(3);
    const auto y = batchnorm2d(x, TD::full({3}, 1.0), TD::zeros({3}), st, true);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(std::fabs(channel_mean(y, c)) < 1e-5);
        CHECK(std::fabs(channel_var(y, c) - 1.0) < 1e-5);
    }
    const auto z = batchnorm2d(y, TD::full({3}, 2.0), TD::full({3}, 3.0), st, true);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(channel_mean(z, c) == doctest::Approx(3.0).epsilon(1e-5));
        CHECK(std::sqrt(channel_var(z, c)) == doctest::Approx(2.0).epsilon(1e-4));
    }
}

TEST_CASE("batchnorm running statistics use momentum 0.1") {
    auto x = test::random_tensor({4, 1, 2, 3}, 21, 1.0, false);
    BatchNormState<double> st(1);
    batchnorm2d(x, TD::full({1}, 1.0), TD::zeros({1}), st, true);
    const double mu = channel_mean(x, 0);
    const double var = channel_var(x, 0);
    CHECK(st.running_mean.values()[0] == doctest::Approx(0.1 * mu));
    const bool biased = std::fabs(st.running_var.values()[0] - (0.9 + 0.1 * var)) < 1e-12;
    const bool unbiased = std::fabs(st.running_var.values()[0] - (0.9 + 0.1 * var * 24.0 / 23.0)) < 1e-12;
    CHECK((biased || unbiased));
}

TEST_CASE("batchnorm eval mode converges to train mode on a stationary stream") {
    BatchNormState<double> st(2);
    const auto g = TD::full({2}, 1.5), b = TD::full({2}, -0.5);
    for (std::uint64_t s = 0; s < 300; ++s) {
        auto x = test::random_tensor({32, 2, 8, 8}, 100 + s, 2.0, false);
        for (auto& v : x.values()) v += 1.0;
        batchnorm2d(x, g, b, st, true);
    }
    auto x = test::random_tensor({64, 2, 8, 8}, 7, 2.0, false);
    for (auto& v : x.values()) v += 1.0;
    const auto ye = batchnorm2d(x, g, b, st, false);
    const auto yt = batchnorm2d(x, g, b, st, true);
    double sq = 0.0;
    for (std::size_t i = 0; i < ye.numel(); ++i) sq += std::pow(ye.values()[i] - yt.values()[i], 2);
    CHECK(std::sqrt(sq / static_cast<double>(ye.numel())) < 0.05);
}

TEST_CASE("batchnorm rejects a batch of one in train mode") {
    BatchNormState<double> st(1);
    CHECK_THROWS_AS(batchnorm2d(TD::zeros({1, 1, 2, 2}), TD::full({1}, 1.0), TD::zeros({1}), st, true),
                    BatchSizeError);
    CHECK_NOTHROW(batchnorm2d(TD::zeros({1, 1, 2, 2}), TD::full({1}, 1.0), TD::zeros({1}), st, false));
}

TEST_CASE("relu, sigmoid, gap and linear") {
    CHECK(relu(TD::from({3}, {-1, 0, 2})).values() == std::vector<double>{0, 0, 2});
    CHECK(sigmoid(TD::scalar(0.0)).item() == 0.5);
    auto x = TD::zeros({2, 3, 4, 5});
    for (std::size_t i = 0; i < x.numel(); ++i) x.values()[i] = static_cast<double>((i / 20) % 3) + 0.5;
    const auto g = gap(x);
    CHECK(g.shape() == Shape{2, 3});
    CHECK(g.values() == std::vector<double>{0.5, 1.5, 2.5, 0.5, 1.5, 2.5});
    const auto y = linear(TD::from({1, 2}, {1, 2}), TD::from({2, 2}, {1, 0, 3, 4}), TD::from({2}, {10, 20}));
    CHECK(y.values() == std::vector<double>{11, 31});
    CHECK_THROWS_AS(linear(TD::zeros({1, 3}), TD::zeros({2, 2}), TD::zeros({2})), ShapeError);
}

TEST_CASE("mmtm with zero gate weights is the identity") {
    auto a = test::random_tensor({2, 4, 3, 5}, 30, 1.0, false);
    auto b = test::random_tensor({2, 6, 2, 2}, 31, 1.0, false);
    const std::size_t cz = mmtm_joint_dim(4, 6);
    CHECK(cz == 3);
    MmtmParams<double> p{test::random_tensor({cz, 10}, 32, 1.0, false), test::random_tensor({cz}, 33, 1.0, false),
                         TD::zeros({4, cz}), TD::zeros({4}), TD::zeros({6, cz}), TD::zeros({6})};
    auto [oa, ob] = mmtm_fuse(a, b, p);
    CHECK(oa.values() == a.values());
    CHECK(ob.values() == b.values());
}

TEST_CASE("mmtm gates stay inside (0, 2)") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto a = test::random_tensor({2, 3, 2, 2}, s, 2.0, false);
        auto b = test::random_tensor({2, 5, 2, 2}, s + 50, 2.0, false);
        const std::size_t cz = mmtm_joint_dim(3, 5);
        MmtmParams<double> p{test::random_tensor({cz, 8}, s + 1, 1.0, false), test::random_tensor({cz}, s + 2, 1.0, false),
                             test::random_tensor({3, cz}, s + 3, 1.0, false), test::random_tensor({3}, s + 4, 1.0, false),
                             test::random_tensor({5, cz}, s + 5, 1.0, false), test::random_tensor({5}, s + 6, 1.0, false)};
        auto [ga, gb] = mmtm_gates(a, b, p);
        for (double v : ga.values()) CHECK((v > 0.0 && v < 2.0));
        for (double v : gb.values()) CHECK((v > 0.0 && v < 2.0));
    }
}

TEST_CASE("mmtm rejects inconsistent parameters") {
    MmtmParams<double> p{TD::zeros({2, 7}), TD::zeros({2}), TD::zeros({3, 2}), TD::zeros({3}),
                         TD::zeros({5, 2}), TD::zeros({5})};
    CHECK_THROWS_AS(mmtm_fuse(TD::zeros({1, 3, 2, 2}), TD::zeros({1, 5, 2, 2}), p), ShapeError);
}

TEST_CASE("mse_loss values and gradient") {
    CHECK(mse_loss(TD::from({2}, {0, 0}), TD::from({2}, {3, 4})).item() == 12.5);
    CHECK(mse_loss(TD::from({2}, {1, 2}), TD::from({2}, {1, 2})).item() == 0.0);
    auto p = TD::from({3}, {1, -2, 0.5}, true);
    auto t = TD::from({3}, {0, 1, 1});
    mse_loss(p, t).backward();
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(p.grad()[i] == doctest::Approx(2.0 * (p.values()[i] - t.values()[i]) / 3.0));
    CHECK_THROWS_AS(mse_loss(TD::zeros({2}), TD::zeros({3})), ShapeError);
}

TEST_CASE("negcorr_loss values") {
    CHECK(negcorr_loss(TD::from({3}, {1, 2, 3}), TD::from({3}, {2, 4, 6})).item() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(negcorr_loss(TD::from({3}, {1, 2, 3}), TD::from({3}, {3, 2, 1})).item() == doctest::Approx(2.0));
    CHECK(negcorr_loss(TD::from({3}, {4, 4, 4}), TD::from({3}, {3, 2, 1})).item() == 1.0);
    CHECK(negcorr_loss(TD::from({2, 3}, {1, 2, 3, 1, 2, 3}), TD::from({2, 3}, {1, 2, 3, 3, 2, 1})).item() ==
          doctest::Approx(1.0));
    CHECK_THROWS_AS(negcorr_loss(TD::from({1}, {1}), TD::from({1}, {1})), LengthError);
}

TEST_CASE("negcorr_loss is invariant to positive affine maps of the prediction") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto p = test::random_tensor({4, 10}, s, 1.0, false);
        auto t = test::random_tensor({4, 10}, s + 40, 1.0, false);
        const double base = negcorr_loss(p, t).item();
        auto q = p.clone();
        for (auto& v : q.values()) v = 3.7 * v - 12.0;
        CHECK(std::fabs(negcorr_loss(q, t).item() - base) < 1e-6);
    }
}

TEST_CASE("adam first step moves each element by lr against the gradient sign") {
    auto w = TD::from({4}, {1.0, -2.0, 0.5, 3.0}, true);
    const auto before = w.values();
    Adam<double> opt({{"w", w}}, {});
    const std::vector<double> g{0.3, -5.0, 1e-3, -0.02};
    std::copy(g.begin(), g.end(), w.grad().begin());
    opt.step();
    CHECK(opt.step_count() == 1);
    for (std::size_t i = 0; i < 4; ++i) {
        const double delta = w.values()[i] - before[i];
        CHECK(std::fabs(delta + 1e-4 * (g[i] > 0 ? 1.0 : -1.0)) < 1e-6);
    }
}

TEST_CASE("adam leaves parameters with zero gradient unchanged") {
    auto w = TD::from({3}, {1.0, 2.0, 3.0}, true);
    Adam<double> opt({{"w", w}});
    w.zero_grad();
    opt.step();
    CHECK(w.values() == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("adam strictly decreases a quadratic bowl for 100 steps") {
    auto w = TD::from({2}, {1.0, 1.0}, true);
    Adam<double> opt({{"w", w}}, {1e-2});
    double prev = 1e300;
    for (int i = 0; i < 100; ++i) {
        opt.zero_grad();
        auto loss = scale(mse_loss(w, TD::zeros({2})), 2.0);
        const double v = loss.item();
        CHECK(v < prev);
        prev = v;
        loss.backward();
        opt.step();
    }
}

TEST_CASE("grad_check detects a wrong analytic gradient") {
    auto x = test::random_tensor({5}, 3);
    // relu(x) + relu(-x) = |x|, but detach the second term's graph.
    const auto report = grad_check(
        [&] {
            auto neg = scale(x, -1.0).detach();
            return mse_loss(add(relu(x), relu(neg)), TD::zeros({5}));
        },
        {{"x", x}});
    CHECK_FALSE(report.passed(1e-4));
}

TEST_CASE("every differentiable op passes grad_check at 10 random points") {
    for (const auto& c : test::op_grad_cases()) {
        for (std::uint64_t s = 1; s <= 10; ++s) {
            const auto report = c.run(1000 * s);
            INFO(c.name << " seed " << s << " rel " << report.max_rel_error());
            CHECK(report.passed(1e-4));
        }
    }
}

TEST_CASE("forward passes are deterministic") {
    auto x = test::random_tensor({2, 3, 6, 9}, 1, 1.0, false);
    auto w = test::random_tensor({4, 3, 3, 3}, 2, 1.0, false);
    const auto a = conv2d(x, w, TD{}, {1, 1, 1, 1});
    const auto b = conv2d(x, w, TD{}, {1, 1, 1, 1});
    CHECK(a.values() == b.values());
}

TEST_CASE("nan check mode reports non-finite op outputs") {
    set_nan_check(true);
    auto x = TD::from({2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(scale(x, 0.0), DataError);
    set_nan_check(false);
    CHECK_NOTHROW(scale(x, 0.0));
}

TEST_CASE("no-grad guard suppresses graph recording") {
    auto x = TD::from({2}, {1.0, 2.0}, true);
    {
        NoGradGuard guard;
        auto y = scale(x, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(scale(x, 2.0).requires_grad());
}

} // TEST_SUITE
