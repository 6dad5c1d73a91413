#pragma once

#include <stdexcept>
#include <string>

namespace charforge {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IdentityMismatch : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A stored artifact (pack, checkpoint, report, config) failed validation.
/// `field()` names the first offending field.
class SchemaError : public Error {
public:
    SchemaError(std::string field, const std::string& what)
        : Error("schema violation at '" + field + "': " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class NumericalDivergence : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace charforge
