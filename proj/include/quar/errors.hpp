/*
 * Copyright 2026 The QuarFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef QUAR_ERRORS_HPP
#define QUAR_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace quar {

/// Divergence, non-convergence, or a violated numerical invariant.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during training; carries the update index.
class DivergenceError : public NumericalError {
public:
    DivergenceError(std::size_t update, const std::string& what)
        : NumericalError("diverged at update " + std::to_string(update) + ": " + what), update_(update)
    {
    }

    std::size_t update() const { return update_; }

private:
    std::size_t update_;
};

/// Malformed, truncated or incompatible model/config file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedFile : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

/// Bad configuration or command-line usage.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace quar

#endif // QUAR_ERRORS_HPP
