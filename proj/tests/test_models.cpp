#include "grad_cases.hpp"
#include "support.hpp"

#include "spo2/errors.hpp"
#include "spo2/model.hpp"

#include "doctest.h"

#include <map>

using namespace spo2;
using tn::Tensor;
using TD = Tensor<double>;

namespace {

std::size_t conv_bn_params(std::size_t in, std::size_t out, std::size_t k) {
    return out * in * k * k + 2 * out;
}

// Sum of layer sizes for the documented topology.
std::size_t expected_parameter_count(const ModelConfig& cfg) {
    const auto& ch = cfg.stage_channels;
    const bool dual = cfg.variant == Variant::filter || cfg.variant == Variant::end2end;
    const std::size_t in_c = cfg.variant == Variant::early ? 6 : 3;
    std::size_t branch = conv_bn_params(in_c, ch[0], 3);
    std::size_t prev = ch[0];
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t stride = s == 0 ? 1 : 2;
        branch += conv_bn_params(prev, ch[s], 3) + conv_bn_params(ch[s], ch[s], 3);
        if (stride != 1 || prev != ch[s]) branch += conv_bn_params(prev, ch[s], 1);
        prev = ch[s];
    }
    std::size_t total = branch * (dual ? 2 : 1);
    if (dual) {
        for (std::size_t c : ch) {
            const std::size_t cz = (2 * c + 3) / 4;
            total += cz * 2 * c + cz + 2 * (c * cz + c);
        }
    }
    total += cfg.d_spo2 * ch[3] * (dual ? 2 : 1) + cfg.d_spo2;
    if (cfg.variant == Variant::end2end) {
        total += 2 * (3 * cfg.dcac_kernel + 2 * 3 + 3 * cfg.dcac_kernel + 3);
    }
    return total;
}

ModelInput<double> random_input(std::size_t b, std::size_t n, std::size_t t, std::uint64_t seed) {
    return {test::random_tensor({b, 3, n, t}, seed, 1.0, false),
            test::random_tensor({b, 3, n, t}, seed + 1, 1.0, false),
            test::random_tensor({b, 3, n, t}, seed + 2, 1.0, false)};
}

void copy_by_name(const std::vector<tn::NamedTensor<double>>& from,
                  const std::vector<tn::NamedTensor<double>>& to) {
    std::map<std::string, TD> src;
    for (const auto& p : from) src[p.name] = p.tensor;
    for (auto p : to) {
        auto it = src.find(p.name);
        if (it != src.end()) p.tensor.values() = it->second.values();
    }
}

// Zero-padded "same" FIR along the time axis, the linear map a head computes
// once its first stage is a pass-through.
TD fir_time(const TD& x, const std::vector<double>& h) {
    TD y = TD::zeros(x.shape());
    const std::size_t T = x.dim(3), rows = x.numel() / T, k = h.size(), half = k / 2;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < T; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const long src = static_cast<long>(t + j) - static_cast<long>(half);
                if (src >= 0 && src < static_cast<long>(T)) acc += h[j] * x.values()[r * T + static_cast<std::size_t>(src)];
            }
            y.values()[r * T + t] = acc;
        }
    return y;
}

std::vector<double> windowed_sinc_lowpass(std::size_t k, double fc, double fs) {
    std::vector<double> h(k);
    const double m = static_cast<double>(k - 1) / 2.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double n = static_cast<double>(i) - m;
        const double sinc = n == 0.0 ? 2.0 * fc / fs : std::sin(2.0 * M_PI * fc / fs * n) / (M_PI * n);
        const double hann = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(k - 1));
        h[i] = sinc * hann;
        sum += h[i];
    }
    for (auto& v : h) v /= sum;
    return h;
}

// Sets a head to x -> fir(x) for positive x: identity first stage and an
// eval-mode BN that passes values through, so the ReLU never clips.
void freeze_head(detail::DcAcHead<double>& head, const std::vector<double>& fir) {
    const std::size_t k = head.kernel;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t j = 0; j < k; ++j) {
            head.weight1.values()[c * k + j] = j == k / 2 ? 1.0 : 0.0;
            head.weight2.values()[c * k + j] = fir[j];
        }
        head.gamma.values()[c] = 1.0;
        head.beta.values()[c] = 0.0;
        head.bias2.values()[c] = 0.0;
        head.bn.running_mean.values()[c] = 0.0;
        head.bn.running_var.values()[c] = 1.0 - 1e-5;
    }
}

} // namespace

TEST_SUITE("models") {

TEST_CASE("variant names round-trip") {
    for (Variant v : {Variant::plain, Variant::early, Variant::filter, Variant::end2end}) {
        CHECK(parse_variant(to_string(v)) == v);
    }
    CHECK_THROWS_AS(parse_variant("resnet"), ConfigError);
}

TEST_CASE("config validation and strict JSON") {
    ModelConfig cfg;
    CHECK_NOTHROW(validate(cfg));
    cfg.stage_channels = {8, 16, 32};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = {};
    cfg.alpha = -0.1;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = {};
    cfg.d_spo2 = 1;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    CHECK_THROWS_AS(Spo2Net<float>{cfg}, ConfigError);

    ModelConfig full;
    full.variant = Variant::end2end;
    full.alpha = 0.5;
    full.seed = 9;
    nlohmann::json j = full;
    CHECK(j.get<ModelConfig>() == full);
    CHECK(j.contains("stage_channels"));
    CHECK(j.contains("dcac_kernel"));
    nlohmann::json bad = {{"variant", "filter"}, {"alpah", 0.1}};
    CHECK_THROWS_AS(bad.get<ModelConfig>(), ConfigError);
}

TEST_CASE("filter variant on a (3, 224, 300) map yields 10 outputs") {
    Spo2Net<float> net(ModelConfig{});
    ModelInput<float> in;
    in.x_dc = Tensor<float>::full({1, 3, 224, 300}, 0.1f);
    in.x_ac = Tensor<float>::full({1, 3, 224, 300}, -0.2f);
    const auto pred = net.forward(in, false);
    CHECK(pred.y_out.shape() == tn::Shape{1, 10});
}

TEST_CASE("parameter counts match the closed form") {
    for (Variant v : {Variant::plain, Variant::early, Variant::filter, Variant::end2end}) {
        ModelConfig cfg;
        cfg.variant = v;
        const Spo2Net<float> net(cfg);
        std::size_t summed = 0;
        for (const auto& p : net.parameters()) summed += p.tensor.numel();
        CHECK(net.parameter_count() == summed);
        CHECK(net.parameter_count() == expected_parameter_count(cfg));
    }
    ModelConfig odd;
    odd.stage_channels = {4, 6, 6, 10};
    odd.d_spo2 = 7;
    CHECK(Spo2Net<float>(odd).parameter_count() == expected_parameter_count(odd));
}

TEST_CASE("parameter names are unique and buffers mirror batch-norm layers") {
    ModelConfig cfg;
    cfg.variant = Variant::end2end;
    const Spo2Net<float> net(cfg);
    std::map<std::string, int> seen;
    for (const auto& p : net.parameters()) CHECK(++seen[p.name] == 1);
    std::size_t gammas = 0;
    for (const auto& p : net.parameters()) gammas += p.name.find(".gamma") != std::string::npos;
    CHECK(net.buffers().size() == 2 * gammas);
}

TEST_CASE("zero-initialized MMTM is the identity inside the filter variant") {
    const auto cfg = test::small_model_config(Variant::filter, 4);
    Spo2Net<double> net(cfg);
    const auto in = random_input(2, 6, 16, 40);
    const auto fused = net.forward(in, false).y_out.values();
    net.set_fusion_enabled(false);
    const auto plain = net.forward(in, false).y_out.values();
    CHECK(fused == plain);
}

TEST_CASE("He-uniform initialization is seeded") {
    ModelConfig a, b;
    b.seed = 1;
    const Spo2Net<float> na(a), na2(a), nb(b);
    CHECK(na.parameters()[0].tensor.values() == na2.parameters()[0].tensor.values());
    CHECK(na.parameters()[0].tensor.values() != nb.parameters()[0].tensor.values());
    const auto& w = na.parameters()[0].tensor;
    const double bound = std::sqrt(6.0 / static_cast<double>(w.dim(1) * 9));
    for (float v : w.values()) CHECK(std::fabs(v) <= bound);
}

TEST_CASE("dcac heads preserve shape and channels") {
    auto cfg = test::small_model_config(Variant::end2end, 2);
    Spo2Net<double> net(cfg);
    auto in = random_input(2, 5, 20, 50);
    const auto p = net.forward(in, false);
    CHECK(p.x_dc_hat.shape() == in.x.shape());
    CHECK(p.x_ac_hat.shape() == in.x.shape());
    auto in2 = in;
    in2.x = in.x.clone();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 100; ++i) in2.x.values()[n * 300 + i] += 1.0;
    const auto q = net.forward(in2, false);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 100; i < 300; ++i) {
            CHECK(q.x_dc_hat.values()[n * 300 + i] == p.x_dc_hat.values()[n * 300 + i]);
            CHECK(q.x_ac_hat.values()[n * 300 + i] == p.x_ac_hat.values()[n * 300 + i]);
        }
}

TEST_CASE("forward is deterministic and batched") {
    for (Variant v : {Variant::plain, Variant::early, Variant::filter, Variant::end2end}) {
        const auto cfg = test::small_model_config(v, 3);
        Spo2Net<double> net(cfg);
        const auto in = random_input(4, 6, 16, 60);
        const auto a = net.forward(in, false).y_out;
        const auto b = net.forward(in, false).y_out;
        CHECK(a.shape() == tn::Shape{4, cfg.d_spo2});
        CHECK(a.values() == b.values());
    }
}

TEST_CASE("forward rejects missing or malformed inputs") {
    Spo2Net<double> filt(test::small_model_config(Variant::filter, 0));
    ModelInput<double> in;
    in.x = TD::zeros({1, 3, 6, 16});
    CHECK_THROWS_AS(filt.forward(in, false), ShapeError);
    Spo2Net<double> plain(test::small_model_config(Variant::plain, 0));
    in.x = TD::zeros({1, 2, 6, 16});
    CHECK_THROWS_AS(plain.forward(in, false), ShapeError);
}

TEST_CASE("loss_spo2 examples") {
    auto gt = TD::from({2, 4}, {0.1, 0.4, 0.2, 0.9, -0.3, 0.1, 0.3, -0.1});
    CHECK(loss_spo2(gt, gt).item() == doctest::Approx(0.0).epsilon(1e-9));
    auto off = gt.clone();
    for (auto& v : off.values()) v += 0.1;
    CHECK(loss_spo2(off, gt).item() == doctest::Approx(0.01).epsilon(1e-9));
    auto zm = TD::from({1, 4}, {-0.3, 0.1, 0.3, -0.1});
    auto neg = zm.clone();
    for (auto& v : neg.values()) v = -v;
    const double mse = tn::mse_loss(neg, zm).item();
    CHECK(loss_spo2(neg, zm).item() == doctest::Approx(mse + 2.0).epsilon(1e-12));
}

TEST_CASE("loss_end_to_end reduces to loss_spo2") {
    SpO2Prediction<double> p;
    p.y_out = test::random_tensor({2, 4}, 1, 1.0, false);
    p.x_dc_hat = test::random_tensor({2, 3, 2, 5}, 2, 1.0, false);
    p.x_ac_hat = test::random_tensor({2, 3, 2, 5}, 3, 1.0, false);
    const auto gt = test::random_tensor({2, 4}, 4, 1.0, false);
    const auto dc = test::random_tensor({2, 3, 2, 5}, 5, 1.0, false);
    const auto ac = test::random_tensor({2, 3, 2, 5}, 6, 1.0, false);
    const double base = loss_spo2(p.y_out, gt).item();
    CHECK(loss_end_to_end(p, gt, dc, ac, 0.0).item() == base);
    CHECK(loss_end_to_end(p, gt, p.x_dc_hat, p.x_ac_hat, 0.7).item() == base);
    const double r1 = loss_end_to_end(p, gt, dc, ac, 0.3).item() - base;
    const double r2 = loss_end_to_end(p, gt, dc, ac, 0.6).item() - base;
    CHECK(r2 == doctest::Approx(2.0 * r1).epsilon(1e-12));
    const double recon = tn::mse_loss(p.x_dc_hat, dc).item() + tn::mse_loss(p.x_ac_hat, ac).item();
    CHECK(r1 == doctest::Approx(0.3 * recon).epsilon(1e-12));
}

TEST_CASE("full small models pass grad_check") {
    for (Variant v : {Variant::plain, Variant::early, Variant::filter, Variant::end2end}) {
        for (std::uint64_t s = 1; s <= 3; ++s) {
            const auto report = test::model_grad_check(v, s);
            INFO(to_string(v) << " seed " << s << " rel " << report.max_rel_error());
            CHECK(report.passed(1e-4));
        }
    }
}

TEST_CASE("end2end with heads frozen to FIR filters matches the filter variant") {
    ModelConfig fcfg = test::small_model_config(Variant::filter, 11);
    fcfg.dcac_kernel = 61;
    ModelConfig ecfg = fcfg;
    ecfg.variant = Variant::end2end;
    Spo2Net<double> filt(fcfg), e2e(ecfg);
    copy_by_name(filt.parameters(), e2e.parameters());
    copy_by_name(filt.buffers(), e2e.buffers());

    const auto lp = windowed_sinc_lowpass(61, 0.3, 30.0);
    auto bp = windowed_sinc_lowpass(61, 2.5, 30.0);
    const auto lp075 = windowed_sinc_lowpass(61, 0.75, 30.0);
    for (std::size_t i = 0; i < bp.size(); ++i) bp[i] -= lp075[i];
    freeze_head(e2e.dc_head(), lp);
    freeze_head(e2e.ac_head(), bp);

    // Positive slow drift plus an in-band tone per trace.
    const std::size_t N = 4, T = 300;
    TD x = TD::zeros({2, 3, N, T});
    for (std::size_t r = 0; r < 2 * 3 * N; ++r)
        for (std::size_t t = 0; t < T; ++t) {
            const double s = static_cast<double>(t) / 30.0;
            x.values()[r * T + t] = 2.0 + 0.5 * std::sin(2 * M_PI * 0.05 * s + static_cast<double>(r)) +
                                    0.2 * std::sin(2 * M_PI * (1.0 + 0.05 * static_cast<double>(r)) * s);
        }
    ModelInput<double> e_in{x, {}, {}};
    const auto pe = e2e.forward(e_in, false);

    ModelInput<double> exact{{}, fir_time(x, lp), fir_time(x, bp)};
    const auto pf = filt.forward(exact, false);
    for (std::size_t i = 0; i < pf.y_out.numel(); ++i)
        CHECK(pe.y_out.values()[i] == doctest::Approx(pf.y_out.values()[i]).epsilon(1e-9));
}

TEST_CASE("time shifts change the filter-variant output by a bounded amount") {
    const auto cfg = test::small_model_config(Variant::filter, 5);
    Spo2Net<double> net(cfg);
    const std::size_t T = 64;
    const auto base = random_input(1, 6, T + 8, 70);
    auto crop = [&](const TD& src, std::size_t s) {
        TD out = TD::zeros({1, 3, 6, T});
        for (std::size_t r = 0; r < 18; ++r)
            for (std::size_t t = 0; t < T; ++t) out.values()[r * T + t] = src.values()[r * (T + 8) + t + s];
        return out;
    };
    const auto y0 = net.forward({{}, crop(base.x_dc, 0), crop(base.x_ac, 0)}, false).y_out;
    double scale = 0.0;
    for (double v : y0.values()) scale = std::max(scale, std::fabs(v));
    for (std::size_t s : {1u, 2u, 4u, 8u}) {
        const auto ys = net.forward({{}, crop(base.x_dc, s), crop(base.x_ac, s)}, false).y_out;
        double d = 0.0;
        for (std::size_t i = 0; i < ys.numel(); ++i) d = std::max(d, std::fabs(ys.values()[i] - y0.values()[i]));
        MESSAGE("shift " << s << " max |dy| " << d << " (output scale " << scale << ")");
        CHECK(std::isfinite(d));
        CHECK(d <= 10.0 * (scale + 1.0));
    }
}

} // TEST_SUITE
