#pragma once

#include <stdexcept>
#include <string>

namespace tdm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input text; the message carries the line number.
struct ParseError : Error {
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct EmptyDatasetError : Error {
    using Error::Error;
};

// Checkpoint decoding failures; the message carries the byte offset.
struct FormatError : Error {
    FormatError(const std::string& what, std::size_t offset)
        : Error("offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Calls the API does not allow, such as a step outside the schedule.
struct UsageError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

}  // namespace tdm
