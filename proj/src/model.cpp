#include "spo2/model.hpp"

#include "spo2/errors.hpp"

#include <cmath>
#include <random>

namespace spo2 {

using tn::NamedTensor;
using tn::Tensor;

std::string to_string(Variant v) {
    switch (v) {
    case Variant::plain:
        return "plain";
    case Variant::early:
        return "early";
    case Variant::filter:
        return "filter";
    case Variant::end2end:
        return "end2end";
    }
    return "unknown";
}

Variant parse_variant(const std::string& name) {
    if (name == "plain") return Variant::plain;
    if (name == "early") return Variant::early;
    if (name == "filter") return Variant::filter;
    if (name == "end2end") return Variant::end2end;
    throw ConfigError("unknown variant '" + name + "' (expected plain|early|filter|end2end)");
}

void validate(const ModelConfig& cfg) {
    if (cfg.stage_channels.size() != 4) {
        throw ConfigError("stage_channels must list exactly 4 stages");
    }
    for (const std::size_t c : cfg.stage_channels) {
        if (c == 0) {
            throw ConfigError("stage channel counts must be positive");
        }
    }
    if (cfg.stem_stride == 0) {
        throw ConfigError("stem_stride must be positive");
    }
    if (cfg.d_spo2 < 2) {
        throw ConfigError("d_spo2 must be at least 2");
    }
    if (!(cfg.alpha >= 0.0) || !std::isfinite(cfg.alpha)) {
        throw ConfigError("alpha must be a finite non-negative number");
    }
    if (cfg.dcac_kernel == 0 || cfg.dcac_kernel % 2 == 0) {
        throw ConfigError("dcac_kernel must be odd so that same padding is symmetric");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
    j = {{"variant", to_string(cfg.variant)},
         {"stage_channels", cfg.stage_channels},
         {"stem_stride", cfg.stem_stride},
         {"d_spo2", cfg.d_spo2},
         {"alpha", cfg.alpha},
         {"dcac_kernel", cfg.dcac_kernel},
         {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
    if (!j.is_object()) {
        throw ConfigError("model config must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "variant") {
            cfg.variant = parse_variant(value.get<std::string>());
        } else if (key == "stage_channels") {
            cfg.stage_channels = value.get<std::vector<std::size_t>>();
        } else if (key == "stem_stride") {
            cfg.stem_stride = value.get<std::size_t>();
        } else if (key == "d_spo2") {
            cfg.d_spo2 = value.get<std::size_t>();
        } else if (key == "alpha") {
            cfg.alpha = value.get<double>();
        } else if (key == "dcac_kernel") {
            cfg.dcac_kernel = value.get<std::size_t>();
        } else if (key == "seed") {
            cfg.seed = value.get<std::uint64_t>();
        } else {
            throw ConfigError("unknown model config key '" + key + "'");
        }
    }
    validate(cfg);
}

namespace detail {

template <typename T>
Tensor<T> ConvBn<T>::forward(const Tensor<T>& x, bool train, bool activate) {
    Tensor<T> y = tn::batchnorm2d(tn::conv2d(x, weight, Tensor<T>{}, opts), gamma, beta, bn, train);
    return activate ? tn::relu(y) : y;
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, bool train) {
    const Tensor<T> main = conv2.forward(conv1.forward(x, train, true), train, false);
    const Tensor<T> skip = shortcut ? shortcut->forward(x, train, false) : x;
    return tn::relu(tn::add(main, skip));
}

template <typename T>
Tensor<T> DcAcHead<T>::forward(const Tensor<T>& x, bool train) {
    const tn::Conv2dOptions same{1, 1, 0, kernel / 2};
    Tensor<T> h = tn::depthwise_conv2d(x, weight1, Tensor<T>{}, same);
    h = tn::relu(tn::batchnorm2d(h, gamma, beta, bn, train));
    return tn::depthwise_conv2d(h, weight2, bias2, same);
}

} // namespace detail

namespace {

template <typename T>
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    Tensor<T> he_uniform(tn::Shape shape, std::size_t fan_in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<T> values(tn::shape_numel(shape));
        for (T& v : values) {
            v = static_cast<T>(dist(rng_));
        }
        return Tensor<T>::from(std::move(shape), std::move(values), true);
    }

    detail::ConvBn<T> conv_bn(std::size_t in_c, std::size_t out_c, std::size_t k,
                              std::size_t stride) {
        detail::ConvBn<T> layer;
        layer.weight = he_uniform({out_c, in_c, k, k}, in_c * k * k);
        layer.gamma = Tensor<T>::full({out_c}, T(1), true);
        layer.beta = Tensor<T>::zeros({out_c}, true);
        layer.bn = tn::BatchNormState<T>(out_c);
        layer.opts = {stride, stride, k / 2, k / 2};
        return layer;
    }

private:
    std::mt19937_64 rng_;
};

template <typename T>
void add_conv_bn(const std::string& prefix, const detail::ConvBn<T>& l,
                 std::vector<NamedTensor<T>>* params, std::vector<NamedTensor<T>>* buffers) {
    if (params) {
        params->push_back({prefix + ".weight", l.weight});
        params->push_back({prefix + ".bn.gamma", l.gamma});
        params->push_back({prefix + ".bn.beta", l.beta});
    }
    if (buffers) {
        buffers->push_back({prefix + ".bn.running_mean", l.bn.running_mean});
        buffers->push_back({prefix + ".bn.running_var", l.bn.running_var});
    }
}

std::size_t input_channels(Variant v) { return v == Variant::early ? 6 : 3; }

bool dual_branch(Variant v) { return v == Variant::filter || v == Variant::end2end; }

} // namespace

template <typename T>
Spo2Net<T>::Spo2Net(const ModelConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    Initializer<T> init(cfg_.seed);
    const auto& ch = cfg_.stage_channels;

    if (cfg_.variant == Variant::end2end) {
        for (auto* head : {&dc_head_, &ac_head_}) {
            detail::DcAcHead<T> h;
            h.kernel = cfg_.dcac_kernel;
            h.weight1 = init.he_uniform({3, 1, 1, h.kernel}, h.kernel);
            h.gamma = Tensor<T>::full({3}, T(1), true);
            h.beta = Tensor<T>::zeros({3}, true);
            h.bn = tn::BatchNormState<T>(3);
            h.weight2 = init.he_uniform({3, 1, 1, h.kernel}, h.kernel);
            h.bias2 = Tensor<T>::zeros({3}, true);
            head->emplace(std::move(h));
        }
    }

    const std::size_t n_branches = dual_branch(cfg_.variant) ? 2 : 1;
    for (std::size_t b = 0; b < n_branches; ++b) {
        detail::Branch<T> branch;
        branch.stem = init.conv_bn(input_channels(cfg_.variant), ch[0], 3, cfg_.stem_stride);
        std::size_t prev = ch[0];
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t stride = s == 0 ? 1 : 2;
            auto& block = branch.stages[s];
            block.conv1 = init.conv_bn(prev, ch[s], 3, stride);
            block.conv2 = init.conv_bn(ch[s], ch[s], 3, 1);
            if (stride != 1 || prev != ch[s]) {
                block.shortcut = init.conv_bn(prev, ch[s], 1, stride);
            }
            prev = ch[s];
        }
        branches_.push_back(std::move(branch));
    }

    if (dual_branch(cfg_.variant)) {
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t c = ch[s];
            const std::size_t cz = tn::mmtm_joint_dim(c, c);
            tn::MmtmParams<T> m;
            m.w_z = init.he_uniform({cz, 2 * c}, 2 * c);
            m.b_z = Tensor<T>::zeros({cz}, true);
            m.w_a = Tensor<T>::zeros({c, cz}, true);
            m.b_a = Tensor<T>::zeros({c}, true);
            m.w_b = Tensor<T>::zeros({c, cz}, true);
            m.b_b = Tensor<T>::zeros({c}, true);
            mmtm_.push_back(std::move(m));
        }
    }

    const std::size_t features = ch[3] * n_branches;
    head_weight_ = init.he_uniform({cfg_.d_spo2, features}, features);
    head_bias_ = Tensor<T>::zeros({cfg_.d_spo2}, true);
}

template <typename T>
Tensor<T> Spo2Net<T>::run_dual(const Tensor<T>& dc_in, const Tensor<T>& ac_in, bool train) {
    auto& dc = branches_[0];
    auto& ac = branches_[1];
    Tensor<T> a = dc.stem.forward(dc_in, train, true);
    Tensor<T> b = ac.stem.forward(ac_in, train, true);
    for (std::size_t s = 0; s < 4; ++s) {
        a = dc.stages[s].forward(a, train);
        b = ac.stages[s].forward(b, train);
        if (fusion_enabled_) {
            std::tie(a, b) = tn::mmtm_fuse(a, b, mmtm_[s]);
        }
    }
    const Tensor<T> features = tn::concat_channels(tn::gap(a), tn::gap(b));
    return tn::linear(features, head_weight_, head_bias_);
}

template <typename T>
SpO2Prediction<T> Spo2Net<T>::forward(const ModelInput<T>& input, bool train) {
    auto require = [](const Tensor<T>& t, const char* name) {
        if (!t.defined()) {
            throw ShapeError(std::string("model input '") + name + "' is required by this variant");
        }
        if (t.rank() != 4 || t.dim(1) != 3) {
            throw ShapeError(std::string("model input '") + name + "' must be (B, 3, N, T), got " +
                             tn::shape_str(t.shape()));
        }
    };
    SpO2Prediction<T> out;
    switch (cfg_.variant) {
    case Variant::plain:
    case Variant::early: {
        Tensor<T> x;
        if (cfg_.variant == Variant::plain) {
            require(input.x, "x");
            x = input.x;
        } else {
            require(input.x_dc, "x_dc");
            require(input.x_ac, "x_ac");
            x = tn::concat_channels(input.x_dc, input.x_ac);
        }
        auto& br = branches_[0];
        Tensor<T> h = br.stem.forward(x, train, true);
        for (auto& stage : br.stages) {
            h = stage.forward(h, train);
        }
        out.y_out = tn::linear(tn::gap(h), head_weight_, head_bias_);
        break;
    }
    case Variant::filter:
        require(input.x_dc, "x_dc");
        require(input.x_ac, "x_ac");
        out.y_out = run_dual(input.x_dc, input.x_ac, train);
        break;
    case Variant::end2end:
        require(input.x, "x");
        out.x_dc_hat = dc_head_->forward(input.x, train);
        out.x_ac_hat = ac_head_->forward(input.x, train);
        out.y_out = run_dual(out.x_dc_hat, out.x_ac_hat, train);
        break;
    }
    return out;
}

template <typename T>
std::vector<NamedTensor<T>> Spo2Net<T>::parameters() const {
    std::vector<NamedTensor<T>> params;
    auto add_head = [&](const std::string& prefix, const detail::DcAcHead<T>& h) {
        params.push_back({prefix + ".conv1.weight", h.weight1});
        params.push_back({prefix + ".bn.gamma", h.gamma});
        params.push_back({prefix + ".bn.beta", h.beta});
        params.push_back({prefix + ".conv2.weight", h.weight2});
        params.push_back({prefix + ".conv2.bias", h.bias2});
    };
    if (dc_head_) {
        add_head("dc_head", *dc_head_);
        add_head("ac_head", *ac_head_);
    }
    const char* names[2] = {"dc", "ac"};
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        const std::string prefix = branches_.size() == 2 ? names[b] : "branch";
        add_conv_bn<T>(prefix + ".stem", branches_[b].stem, &params, nullptr);
        for (std::size_t s = 0; s < 4; ++s) {
            const auto& blk = branches_[b].stages[s];
            const std::string sp = prefix + ".stage" + std::to_string(s + 1);
            add_conv_bn<T>(sp + ".conv1", blk.conv1, &params, nullptr);
            add_conv_bn<T>(sp + ".conv2", blk.conv2, &params, nullptr);
            if (blk.shortcut) {
                add_conv_bn<T>(sp + ".shortcut", *blk.shortcut, &params, nullptr);
            }
        }
    }
    for (std::size_t s = 0; s < mmtm_.size(); ++s) {
        const std::string mp = "mmtm" + std::to_string(s + 1);
        params.push_back({mp + ".w_z", mmtm_[s].w_z});
        params.push_back({mp + ".b_z", mmtm_[s].b_z});
        params.push_back({mp + ".w_a", mmtm_[s].w_a});
        params.push_back({mp + ".b_a", mmtm_[s].b_a});
        params.push_back({mp + ".w_b", mmtm_[s].w_b});
        params.push_back({mp + ".b_b", mmtm_[s].b_b});
    }
    params.push_back({"head.weight", head_weight_});
    params.push_back({"head.bias", head_bias_});
    return params;
}

template <typename T>
std::vector<NamedTensor<T>> Spo2Net<T>::buffers() const {
    std::vector<NamedTensor<T>> buffers;
    if (dc_head_) {
        for (const auto& [prefix, h] : {std::pair{"dc_head", &*dc_head_}, std::pair{"ac_head", &*ac_head_}}) {
            buffers.push_back({std::string(prefix) + ".bn.running_mean", h->bn.running_mean});
            buffers.push_back({std::string(prefix) + ".bn.running_var", h->bn.running_var});
        }
    }
    const char* names[2] = {"dc", "ac"};
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        const std::string prefix = branches_.size() == 2 ? names[b] : "branch";
        add_conv_bn<T>(prefix + ".stem", branches_[b].stem, nullptr, &buffers);
        for (std::size_t s = 0; s < 4; ++s) {
            const auto& blk = branches_[b].stages[s];
            const std::string sp = prefix + ".stage" + std::to_string(s + 1);
            add_conv_bn<T>(sp + ".conv1", blk.conv1, nullptr, &buffers);
            add_conv_bn<T>(sp + ".conv2", blk.conv2, nullptr, &buffers);
            if (blk.shortcut) {
                add_conv_bn<T>(sp + ".shortcut", *blk.shortcut, nullptr, &buffers);
            }
        }
    }
    return buffers;
}

template <typename T>
std::size_t Spo2Net<T>::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) {
        total += p.tensor.numel();
    }
    return total;
}

template <typename T>
Tensor<T> loss_spo2(const Tensor<T>& y_out, const Tensor<T>& y_gt) {
    return tn::add(tn::mse_loss(y_out, y_gt), tn::negcorr_loss(y_out, y_gt));
}

template <typename T>
Tensor<T> loss_end_to_end(const SpO2Prediction<T>& pred, const Tensor<T>& y_gt,
                          const Tensor<T>& x_dc, const Tensor<T>& x_ac, double alpha) {
    const Tensor<T> recon =
        tn::add(tn::mse_loss(pred.x_dc_hat, x_dc), tn::mse_loss(pred.x_ac_hat, x_ac));
    return tn::add(loss_spo2(pred.y_out, y_gt), tn::scale(recon, static_cast<T>(alpha)));
}

template <typename T>
Tensor<T> variant_loss(const ModelConfig& cfg, const SpO2Prediction<T>& pred,
                       const Tensor<T>& y_gt, const ModelInput<T>& input) {
    if (cfg.variant == Variant::end2end) {
        return loss_end_to_end(pred, y_gt, input.x_dc, input.x_ac, cfg.alpha);
    }
    return loss_spo2(pred.y_out, y_gt);
}

template class Spo2Net<float>;
template class Spo2Net<double>;
template Tensor<float> loss_spo2(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> loss_spo2(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> loss_end_to_end(const SpO2Prediction<float>&, const Tensor<float>&,
                                       const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> loss_end_to_end(const SpO2Prediction<double>&, const Tensor<double>&,
                                        const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> variant_loss(const ModelConfig&, const SpO2Prediction<float>&,
                                    const Tensor<float>&, const ModelInput<float>&);
template Tensor<double> variant_loss(const ModelConfig&, const SpO2Prediction<double>&,
                                     const Tensor<double>&, const ModelInput<double>&);

} // namespace spo2
