#pragma once

#include <stdexcept>
#include <string>

namespace casskit {

// Error taxonomy. ValidationError and its children map to CLI exit code 1,
// anything else escaping to the top level maps to exit code 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public ValidationError {
public:
    explicit ConfigError(const std::string& what) : ValidationError(what) {}
};

class SpecError : public ValidationError {
public:
    explicit SpecError(const std::string& what) : ValidationError(what) {}
};

class RegistryError : public ValidationError {
public:
    explicit RegistryError(const std::string& what) : ValidationError(what) {}
};

class PairingError : public ValidationError {
public:
    explicit PairingError(const std::string& what) : ValidationError(what) {}
};

class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

class ProtocolError : public ValidationError {
public:
    explicit ProtocolError(const std::string& what) : ValidationError(what) {}
};

// Non-finite loss or other numeric breakdown mid-training.
class NumericsError : public std::runtime_error {
public:
    explicit NumericsError(const std::string& what) : std::runtime_error(what) {}
};

#define CASSKIT_CHECK(cond, exc, msg)                                          \
    do {                                                                       \
        if (!(cond)) throw exc(msg);                                           \
    } while (0)

} // namespace casskit
