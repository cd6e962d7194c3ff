#include "spo2/config.hpp"

#include "spo2/errors.hpp"

namespace spo2 {

void validate(const HarnessOptions& h) {
    if (h.k < 2) {
        throw ConfigError("harness.k must be at least 2");
    }
    if (h.fold >= h.k) {
        throw ConfigError("harness.fold must be below harness.k");
    }
    if (!(h.val_fraction >= 0.0 && h.val_fraction < 1.0)) {
        throw ConfigError("harness.val_fraction must lie in [0, 1)");
    }
    if (h.epochs == 0 || h.batch_size < 2) {
        throw ConfigError("harness.epochs must be positive and harness.batch_size at least 2");
    }
    if (!(h.lr > 0.0) || !(h.train_step_s > 0.0) || !(h.test_step_s > 0.0)) {
        throw ConfigError("learning rate and window steps must be positive");
    }
}

void to_json(nlohmann::json& j, const HarnessOptions& h) {
    j = {{"k", h.k},
         {"fold", h.fold},
         {"split_seed", h.split_seed},
         {"val_fraction", h.val_fraction},
         {"epochs", h.epochs},
         {"batch_size", h.batch_size},
         {"lr", h.lr},
         {"shuffle_seed", h.shuffle_seed},
         {"train_step_s", h.train_step_s},
         {"test_step_s", h.test_step_s}};
}

void from_json(const nlohmann::json& j, HarnessOptions& h) {
    if (!j.is_object()) {
        throw ConfigError("harness options must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "k") value.get_to(h.k);
        else if (key == "fold") value.get_to(h.fold);
        else if (key == "split_seed") value.get_to(h.split_seed);
        else if (key == "val_fraction") value.get_to(h.val_fraction);
        else if (key == "epochs") value.get_to(h.epochs);
        else if (key == "batch_size") value.get_to(h.batch_size);
        else if (key == "lr") value.get_to(h.lr);
        else if (key == "shuffle_seed") value.get_to(h.shuffle_seed);
        else if (key == "train_step_s") value.get_to(h.train_step_s);
        else if (key == "test_step_s") value.get_to(h.test_step_s);
        else throw ConfigError("unknown harness option '" + key + "'");
    }
    validate(h);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"model", c.model}, {"synth", c.synth}, {"harness", c.harness}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "model") from_json(value, c.model);
        else if (key == "synth") from_json(value, c.synth);
        else if (key == "harness") from_json(value, c.harness);
        else throw ConfigError("unknown config section '" + key + "'");
    }
}

} // namespace spo2
