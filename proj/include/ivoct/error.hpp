#pragma once

#include <stdexcept>
#include <string>

namespace ivoct {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

// Malformed or missing file content (sidecar, PGM header, JSON schema).
class FormatError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "format"; }
};

// Well-formed files whose content violates an invariant (dimension mismatch, NaN).
class CorruptInputError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "corrupt_input"; }
};

// Caller broke a documented precondition (shape mismatch, even kernel size, ...).
class ContractError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "contract"; }
};

// Invalid configuration or parameter combination.
class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

// Image analysis could not produce a result (e.g. no lumen visible).
class DetectionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "detection"; }
};

// Optimisation diverged (non-finite loss or gradient).
class TrainingError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "training"; }
};

}  // namespace ivoct
