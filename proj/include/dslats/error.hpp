#pragma once

#include <stdexcept>
#include <string>

namespace dslats {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid state or model evaluation (non-finite input, degenerate geometry).
class ModelError : public Error {
public:
    using Error::Error;
};

// Malformed exchange record: missing timestamps or inconsistent durations.
class ProtocolError : public Error {
public:
    using Error::Error;
};

class TopologyError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class AlignmentError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace dslats
