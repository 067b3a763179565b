#pragma once

#include <stdexcept>
#include <string>

namespace adaptkit {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
    ok = 0,
    internal = 1,
    config = 2,
    data = 3,
    protocol = 4,
    checkpoint = 5,
    backend = 6,
    argument = 7,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual ExitCode code() const noexcept { return ExitCode::internal; }
};

#define ADAPTKIT_DEFINE_ERROR(Name, Code)                                  \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(what) {}            \
        ExitCode code() const noexcept override { return ExitCode::Code; } \
    }

// Shapes, widths or layer lists that do not agree.
ADAPTKIT_DEFINE_ERROR(ConfigError, config);
// Invalid caller-supplied value (empty list, out-of-range k, bad temperature).
ADAPTKIT_DEFINE_ERROR(ArgumentError, argument);
ADAPTKIT_DEFINE_ERROR(BackendError, backend);
// Unreadable files, missing masks, misaligned ground truth.
ADAPTKIT_DEFINE_ERROR(DataError, data);
// Train/eval protocol violations (no anomalies, too few normals for k shots).
ADAPTKIT_DEFINE_ERROR(ProtocolError, protocol);
ADAPTKIT_DEFINE_ERROR(CheckpointError, checkpoint);
// Non-finite loss or gradient during training.
ADAPTKIT_DEFINE_ERROR(NumericError, internal);
// Metric undefined for the given labels (e.g. a single class for AUROC).
ADAPTKIT_DEFINE_ERROR(UndefinedMetricError, data);

#undef ADAPTKIT_DEFINE_ERROR

}  // namespace adaptkit
