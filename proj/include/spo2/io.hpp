#pragma once

#include "spo2/model.hpp"
#include "spo2/stmap.hpp"
#include "spo2/synth.hpp"

#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace spo2::io {

namespace fs = std::filesystem;

/// 8-byte magic that opens every STM file.
inline constexpr char kStmMagic[8] = {'S', 'T', 'M', 'A', 'P', '\0', '\0', '\1'};

/// STM layout: magic, u32le header length, UTF-8 JSON header, then f32le
/// samples in (channel, roi, time) row-major order.
void write_stm(std::ostream& out, const SpatioTemporalMap& map);
void write_stm(const fs::path& path, const SpatioTemporalMap& map);
SpatioTemporalMap read_stm(std::istream& in);
SpatioTemporalMap read_stm(const fs::path& path);

struct Spo2Sample {
    double t_s = 0.0;
    double pct = 0.0;
};

/// "t_s,spo2_pct" with one row per sample.
void write_spo2_csv(const fs::path& path, const Spo2Trace& trace);
std::vector<Spo2Sample> read_spo2_csv(const fs::path& path);

/// meta.json plus frame_%06d.raw (f32le, hwc).
void write_frames(const fs::path& dir, const FrameSequence& frames);
FrameSequence read_frames(const fs::path& dir);

/// Writes each tensor as f32le into `blob` and returns the manifest entries
/// {name, shape, offset} with offsets in bytes from the start of the blob.
template <typename T>
nlohmann::json write_tensors(std::ostream& blob, const std::vector<tn::NamedTensor<T>>& tensors);

/// Fills `targets` by name from a blob described by `manifest`. Every target
/// must be present with a matching shape.
template <typename T>
void read_tensors(std::istream& blob, const nlohmann::json& manifest,
                  const std::vector<tn::NamedTensor<T>>& targets);

/// Checkpoint directory: model.json {config, tensors} and weights.bin.
/// Parameters and batch-norm buffers are both stored.
void save_checkpoint(const fs::path& dir, const Spo2Net<float>& model);
std::unique_ptr<Spo2Net<float>> load_checkpoint(const fs::path& dir);

/// Dataset directory: manifest.json {subjects: [...], params} plus
/// <id>.stm and <id>_spo2.csv for every subject.
void write_dataset(const fs::path& dir, const std::vector<SubjectRecord>& records,
                   const nlohmann::json& extra_manifest = nlohmann::json::object());
std::vector<std::string> dataset_subjects(const fs::path& dir);
/// Reads one subject; the CSV is resampled to 1 Hz by linear interpolation.
SubjectRecord read_subject(const fs::path& dir, const std::string& subject_id);

void write_json(const fs::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const fs::path& path);

/// True when `dir` is missing or empty.
bool directory_is_empty(const fs::path& dir);

} // namespace spo2::io
