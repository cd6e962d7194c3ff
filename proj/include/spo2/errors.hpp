#pragma once

#include <stdexcept>
#include <string>

namespace spo2 {

/// Base class for every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI when it reports failures as JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define SPO2_DEFINE_ERROR(Name, tag)                                      \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& message) : Error(tag, message) {} \
    }

SPO2_DEFINE_ERROR(DimensionError, "dimension");
SPO2_DEFINE_ERROR(BoundsError, "bounds");
SPO2_DEFINE_ERROR(ParameterError, "parameter");
SPO2_DEFINE_ERROR(LengthError, "length");
SPO2_DEFINE_ERROR(DegenerateSignalError, "degenerate_signal");
SPO2_DEFINE_ERROR(RankError, "rank");
SPO2_DEFINE_ERROR(ShapeError, "shape");
SPO2_DEFINE_ERROR(BatchSizeError, "batch_size");
SPO2_DEFINE_ERROR(ConfigError, "config");
SPO2_DEFINE_ERROR(DataError, "data");
SPO2_DEFINE_ERROR(OrderingError, "ordering");
SPO2_DEFINE_ERROR(RangeError, "range");
SPO2_DEFINE_ERROR(IdentityError, "identity");
SPO2_DEFINE_ERROR(InputError, "input");
SPO2_DEFINE_ERROR(UsageError, "usage");
SPO2_DEFINE_ERROR(FormatError, "format");

#undef SPO2_DEFINE_ERROR

} // namespace spo2
