// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace selfroute {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or dimensions that do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Out-of-range index (token id, target class, expert id).
class RangeError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration. `key()` names the offending field when known.
class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& message)
        : Error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed or incompatible checkpoint / stats file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Loss or gradient became NaN/Inf.
class NumericError : public Error {
public:
    NumericError(long step, const std::string& message)
        : Error("step " + std::to_string(step) + ": " + message), step_(step) {}

    long step() const noexcept { return step_; }

private:
    long step_;
};

} // namespace selfroute
