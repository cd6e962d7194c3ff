#include "spo2/io.hpp"

#include "spo2/errors.hpp"
#include "spo2/harness.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace spo2::io {

using nlohmann::json;

namespace {

void write_u32le(std::ostream& out, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                           static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    out.write(bytes, 4);
}

std::uint32_t read_u32le(std::istream& in) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
        throw FormatError("unexpected end of stream reading a 32-bit length");
    }
    return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
           (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void write_f32le(std::ostream& out, const float* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data),
                  static_cast<std::streamsize>(count * sizeof(float)));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            write_u32le(out, std::bit_cast<std::uint32_t>(data[i]));
        }
    }
}

bool read_f32le(std::istream& in, float* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        return static_cast<bool>(
            in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(float))));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            unsigned char b[4];
            if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
            const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
            data[i] = std::bit_cast<float>(u);
        }
        return true;
    }
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot open '" + path.string() + "' for writing");
    }
    return out;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open '" + path.string() + "'");
    }
    return in;
}

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void write_stm(std::ostream& out, const SpatioTemporalMap& map) {
    const json header = {{"subject_id", map.subject_id()},
                         {"channels", SpatioTemporalMap::kChannels},
                         {"n_rois", map.n_rois()},
                         {"n_frames", map.n_frames()},
                         {"fps", map.fps()},
                         {"layout", "c-roi-t"},
                         {"dtype", "f32le"}};
    const std::string text = header.dump();
    out.write(kStmMagic, sizeof kStmMagic);
    write_u32le(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_f32le(out, map.data().data(), map.data().size());
    if (!out) {
        throw InputError("failed writing STM stream");
    }
}

void write_stm(const fs::path& path, const SpatioTemporalMap& map) {
    auto out = open_out(path);
    write_stm(out, map);
}

SpatioTemporalMap read_stm(std::istream& in) {
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kStmMagic, sizeof magic) != 0) {
        throw FormatError("not an STM stream (bad magic)");
    }
    const std::uint32_t len = read_u32le(in);
    std::string text(len, '\0');
    if (!in.read(text.data(), len)) {
        throw FormatError("truncated STM header");
    }
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed STM header: ") + e.what());
    }
    try {
        if (header.at("channels").get<std::size_t>() != SpatioTemporalMap::kChannels ||
            header.at("layout").get<std::string>() != "c-roi-t" ||
            header.at("dtype").get<std::string>() != "f32le") {
            throw FormatError("unsupported STM layout, dtype or channel count");
        }
        SpatioTemporalMap map(header.at("n_rois").get<std::size_t>(),
                              header.at("n_frames").get<std::size_t>(),
                              header.at("fps").get<double>(),
                              header.at("subject_id").get<std::string>());
        if (!read_f32le(in, map.data().data(), map.data().size())) {
            throw FormatError("truncated STM payload");
        }
        return map;
    } catch (const json::exception& e) {
        throw FormatError(std::string("incomplete STM header: ") + e.what());
    }
}

SpatioTemporalMap read_stm(const fs::path& path) {
    auto in = open_in(path);
    return read_stm(in);
}

void write_spo2_csv(const fs::path& path, const Spo2Trace& trace) {
    auto out = open_out(path);
    out << "t_s,spo2_pct\n";
    for (std::size_t k = 0; k < trace.values.size(); ++k) {
        out << format_number(trace.t0 + static_cast<double>(k)) << ','
            << format_number(trace.values[k]) << '\n';
    }
}

std::vector<Spo2Sample> read_spo2_csv(const fs::path& path) {
    auto in = open_in(path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("t_s,spo2_pct", 0) != 0) {
        throw FormatError("'" + path.string() + "' lacks the t_s,spo2_pct header");
    }
    std::vector<Spo2Sample> samples;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto comma = line.find(',');
        try {
            if (comma == std::string::npos) throw std::invalid_argument("missing comma");
            samples.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
        } catch (const std::logic_error&) {
            throw FormatError("'" + path.string() + "' row " + std::to_string(row) +
                              " is not a number pair");
        }
    }
    return samples;
}

void write_frames(const fs::path& dir, const FrameSequence& frames) {
    fs::create_directories(dir);
    const std::size_t width = frames.frames.empty() ? 0 : frames.frames.front().width;
    const std::size_t height = frames.frames.empty() ? 0 : frames.frames.front().height;
    write_json(dir / "meta.json", {{"width", width},
                                   {"height", height},
                                   {"fps", frames.fps},
                                   {"count", frames.frames.size()},
                                   {"dtype", "f32le"},
                                   {"layout", "hwc"}});
    char name[32];
    for (std::size_t i = 0; i < frames.frames.size(); ++i) {
        std::snprintf(name, sizeof name, "frame_%06zu.raw", i);
        auto out = open_out(dir / name);
        write_f32le(out, frames.frames[i].rgb.data(), frames.frames[i].rgb.size());
    }
}

FrameSequence read_frames(const fs::path& dir) {
    json meta;
    try {
        meta = read_json(dir / "meta.json");
    } catch (const Error& e) {
        throw InputError("frame dump '" + dir.string() + "': " + e.what());
    }
    FrameSequence seq;
    std::size_t width = 0, height = 0, count = 0;
    try {
        if (meta.at("dtype") != "f32le" || meta.at("layout") != "hwc") {
            throw InputError("frame dump must be f32le hwc");
        }
        width = meta.at("width").get<std::size_t>();
        height = meta.at("height").get<std::size_t>();
        count = meta.at("count").get<std::size_t>();
        seq.fps = meta.at("fps").get<double>();
    } catch (const json::exception& e) {
        throw InputError(std::string("frame dump meta.json incomplete: ") + e.what());
    }
    const std::size_t bytes = width * height * 3 * sizeof(float);
    seq.frames.resize(count);
    char name[32];
    for (std::size_t i = 0; i < count; ++i) {
        std::snprintf(name, sizeof name, "frame_%06zu.raw", i);
        const fs::path p = dir / name;
        std::error_code ec;
        const auto size = fs::file_size(p, ec);
        if (ec) {
            throw InputError("frame " + std::to_string(i) + " missing (" + p.string() + ")");
        }
        if (size != bytes) {
            throw InputError("frame " + std::to_string(i) + " is corrupt: " + std::to_string(size) +
                             " bytes, expected " + std::to_string(bytes));
        }
        Frame& f = seq.frames[i];
        f.width = width;
        f.height = height;
        f.rgb.resize(width * height * 3);
        auto in = open_in(p);
        if (!read_f32le(in, f.rgb.data(), f.rgb.size())) {
            throw InputError("frame " + std::to_string(i) + " could not be read");
        }
    }
    return seq;
}

template <typename T>
json write_tensors(std::ostream& blob, const std::vector<tn::NamedTensor<T>>& tensors) {
    json manifest = json::array();
    std::size_t offset = 0;
    std::vector<float> buffer;
    for (const auto& nt : tensors) {
        const auto& values = nt.tensor.values();
        buffer.assign(values.begin(), values.end());
        write_f32le(blob, buffer.data(), buffer.size());
        manifest.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"offset", offset}});
        offset += buffer.size() * sizeof(float);
    }
    if (!blob) {
        throw InputError("failed writing tensor blob");
    }
    return manifest;
}

template <typename T>
void read_tensors(std::istream& blob, const json& manifest,
                  const std::vector<tn::NamedTensor<T>>& targets) {
    std::vector<float> buffer;
    for (const auto& nt : targets) {
        const json* entry = nullptr;
        for (const auto& e : manifest) {
            if (e.at("name") == nt.name) {
                entry = &e;
                break;
            }
        }
        if (!entry) {
            throw FormatError("tensor '" + nt.name + "' missing from manifest");
        }
        const auto shape = entry->at("shape").get<tn::Shape>();
        if (shape != nt.tensor.shape()) {
            throw FormatError("tensor '" + nt.name + "' has shape " + tn::shape_str(shape) +
                              ", expected " + tn::shape_str(nt.tensor.shape()));
        }
        buffer.resize(nt.tensor.numel());
        blob.clear();
        blob.seekg(static_cast<std::streamoff>(entry->at("offset").get<std::size_t>()));
        if (!read_f32le(blob, buffer.data(), buffer.size())) {
            throw FormatError("tensor blob truncated at '" + nt.name + "'");
        }
        auto tensor = nt.tensor;
        auto& values = tensor.values();
        for (std::size_t i = 0; i < buffer.size(); ++i) {
            values[i] = static_cast<T>(buffer[i]);
        }
    }
}

template json write_tensors(std::ostream&, const std::vector<tn::NamedTensor<float>>&);
template json write_tensors(std::ostream&, const std::vector<tn::NamedTensor<double>>&);
template void read_tensors(std::istream&, const json&, const std::vector<tn::NamedTensor<float>>&);
template void read_tensors(std::istream&, const json&, const std::vector<tn::NamedTensor<double>>&);

namespace {

std::vector<tn::NamedTensor<float>> checkpoint_tensors(const Spo2Net<float>& model) {
    auto all = model.parameters();
    for (auto& b : model.buffers()) {
        all.push_back(b);
    }
    return all;
}

} // namespace

void save_checkpoint(const fs::path& dir, const Spo2Net<float>& model) {
    fs::create_directories(dir);
    auto blob = open_out(dir / "weights.bin");
    const json manifest = write_tensors(blob, checkpoint_tensors(model));
    blob.close();
    write_json(dir / "model.json",
               {{"config", model.config()}, {"blob", "weights.bin"}, {"tensors", manifest}});
}

std::unique_ptr<Spo2Net<float>> load_checkpoint(const fs::path& dir) {
    const json doc = read_json(dir / "model.json");
    ModelConfig cfg;
    try {
        cfg = doc.at("config").get<ModelConfig>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint config unreadable: ") + e.what());
    }
    auto model = std::make_unique<Spo2Net<float>>(cfg);
    auto blob = open_in(dir / doc.value("blob", std::string("weights.bin")));
    read_tensors(blob, doc.at("tensors"), checkpoint_tensors(*model));
    return model;
}

void write_dataset(const fs::path& dir, const std::vector<SubjectRecord>& records,
                   const json& extra_manifest) {
    fs::create_directories(dir);
    json subjects = json::array();
    for (const auto& rec : records) {
        write_stm(dir / (rec.subject_id + ".stm"), rec.map);
        write_spo2_csv(dir / (rec.subject_id + "_spo2.csv"), rec.spo2);
        subjects.push_back({{"id", rec.subject_id},
                            {"stm", rec.subject_id + ".stm"},
                            {"spo2", rec.subject_id + "_spo2.csv"},
                            {"params", rec.meta}});
    }
    json manifest = extra_manifest;
    manifest["subjects"] = subjects;
    write_json(dir / "manifest.json", manifest);
}

std::vector<std::string> dataset_subjects(const fs::path& dir) {
    const json manifest = read_json(dir / "manifest.json");
    std::vector<std::string> ids;
    try {
        for (const auto& s : manifest.at("subjects")) {
            ids.push_back(s.at("id").get<std::string>());
        }
    } catch (const json::exception& e) {
        throw FormatError("dataset manifest malformed: " + std::string(e.what()));
    }
    if (ids.empty()) {
        throw DataError("dataset '" + dir.string() + "' lists no subjects");
    }
    return ids;
}

SubjectRecord read_subject(const fs::path& dir, const std::string& subject_id) {
    SubjectRecord rec;
    rec.subject_id = subject_id;
    rec.map = read_stm(dir / (subject_id + ".stm"));
    const auto samples = read_spo2_csv(dir / (subject_id + "_spo2.csv"));
    std::vector<TimedSample> timed;
    timed.reserve(samples.size());
    for (const auto& s : samples) {
        timed.push_back({s.t_s, s.pct});
    }
    rec.spo2 = interpolate_spo2(timed);
    const json manifest = read_json(dir / "manifest.json");
    for (const auto& s : manifest.value("subjects", json::array())) {
        if (s.value("id", std::string()) == subject_id && s.contains("params")) {
            from_json(s.at("params"), rec.meta);
        }
    }
    return rec;
}

void write_json(const fs::path& path, const json& doc) {
    auto out = open_out(path);
    out << doc.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    auto in = open_in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

bool directory_is_empty(const fs::path& dir) {
    std::error_code ec;
    if (!fs::exists(dir, ec)) return true;
    return fs::is_directory(dir, ec) && fs::directory_iterator(dir) == fs::directory_iterator();
}

} // namespace spo2::io
