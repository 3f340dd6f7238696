// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace grass {

// Root of every error the engine raises. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for an op.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN or Inf appeared where finite values are required.
class NumericalFault : public Error {
public:
    using Error::Error;
};

// API called in a state or with arguments it does not support.
class UsageError : public Error {
public:
    using Error::Error;
};

// User-supplied data (token ids, batches) out of range.
class InputError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Serialized payload failed length or checksum validation.
class IntegrityError : public Error {
public:
    using Error::Error;
};

// Shard used while not resident on the device tier.
class SchedulingError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

// Memory accountant observed a free larger than the live allocation.
class AccountingError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace grass
