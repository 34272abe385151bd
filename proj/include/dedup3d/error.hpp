#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dedup3d {

enum class Errc {
    InvalidArgument,
    DimensionMismatch,
    NonFiniteValue,
    EmptySet,
    DuplicateCaseId,
    IoError,
    BadMagic,
    UnsupportedVersion,
    TruncatedPayload,
    InvalidHeader,
    ParseError,
    DegenerateOutput,
    CodecError,
    EmptyDatabase,
    DegenerateSet,
    EmptyTask,
    MissingGroundTruth,
    ConfigError,
    DataError,
};

constexpr std::string_view errc_name(Errc code) {
    switch (code) {
        case Errc::InvalidArgument: return "InvalidArgument";
        case Errc::DimensionMismatch: return "DimensionMismatch";
        case Errc::NonFiniteValue: return "NonFiniteValue";
        case Errc::EmptySet: return "EmptySet";
        case Errc::DuplicateCaseId: return "DuplicateCaseId";
        case Errc::IoError: return "IoError";
        case Errc::BadMagic: return "BadMagic";
        case Errc::UnsupportedVersion: return "UnsupportedVersion";
        case Errc::TruncatedPayload: return "TruncatedPayload";
        case Errc::InvalidHeader: return "InvalidHeader";
        case Errc::ParseError: return "ParseError";
        case Errc::DegenerateOutput: return "DegenerateOutput";
        case Errc::CodecError: return "CodecError";
        case Errc::EmptyDatabase: return "EmptyDatabase";
        case Errc::DegenerateSet: return "DegenerateSet";
        case Errc::EmptyTask: return "EmptyTask";
        case Errc::MissingGroundTruth: return "MissingGroundTruth";
        case Errc::ConfigError: return "ConfigError";
        case Errc::DataError: return "DataError";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

/// Raised by manifest parsing; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& message)
        : Error(Errc::ParseError, "line " + std::to_string(line) + ": " + message), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace dedup3d
