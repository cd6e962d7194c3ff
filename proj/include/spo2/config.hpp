#pragma once

#include "spo2/model.hpp"
#include "spo2/synth.hpp"

#include "json.hpp"

#include <cstdint>

namespace spo2 {

struct HarnessOptions {
    std::size_t k = 5;
    std::size_t fold = 0;
    std::uint64_t split_seed = 0;
    double val_fraction = 0.2;
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    std::uint64_t shuffle_seed = 0;
    double train_step_s = 2.0;
    double test_step_s = 10.0;

    bool operator==(const HarnessOptions&) const = default;
};

/// Everything a command needs besides its paths.
struct RunConfig {
    ModelConfig model;
    SynthParams synth;
    HarnessOptions harness;

    bool operator==(const RunConfig&) const = default;
};

void validate(const HarnessOptions& h);

void to_json(nlohmann::json& j, const HarnessOptions& h);
void from_json(const nlohmann::json& j, HarnessOptions& h);
void to_json(nlohmann::json& j, const RunConfig& c);
/// Strict at every level; missing sections and keys keep their defaults.
void from_json(const nlohmann::json& j, RunConfig& c);

} // namespace spo2
