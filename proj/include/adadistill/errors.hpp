#pragma once

#include <stdexcept>
#include <string>

namespace adadistill {

// Base class for everything this library throws on purpose. Catching
// adadistill::Error at a tool boundary is enough to turn any library
// failure into a clean error report.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A vector whose norm is too small to normalize safely.
class ZeroNormError : public Error {
public:
    explicit ZeroNormError(const std::string& msg) : Error(msg) {}
};

// Two operands whose dimensions do not line up.
class DimensionMismatchError : public Error {
public:
    explicit DimensionMismatchError(const std::string& msg) : Error(msg) {}
};

// NaN or infinity where a finite value is required.
class NonFiniteError : public Error {
public:
    explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

// A class label outside [0, class_count).
class LabelOutOfRangeError : public Error {
public:
    explicit LabelOutOfRangeError(const std::string& msg) : Error(msg) {}
};

// A structurally invalid spec (empty layer list, nonpositive dims, ...).
class InvalidSpecError : public Error {
public:
    explicit InvalidSpecError(const std::string& msg) : Error(msg) {}
};

// Serialized data whose shapes disagree with the accompanying header.
class ShapeMismatchError : public Error {
public:
    explicit ShapeMismatchError(const std::string& msg) : Error(msg) {}
};

// A forward cache consumed twice, or a backward pass with no forward.
class StaleCacheError : public Error {
public:
    explicit StaleCacheError(const std::string& msg) : Error(msg) {}
};

// Batch size that cannot produce a single batch.
class InvalidBatchSizeError : public Error {
public:
    explicit InvalidBatchSizeError(const std::string& msg) : Error(msg) {}
};

// Not enough samples to build the requested pairs or statistics.
class InsufficientSamplesError : public Error {
public:
    explicit InsufficientSamplesError(const std::string& msg) : Error(msg) {}
};

// An empty score list where at least one score is required.
class EmptyScoresError : public Error {
public:
    explicit EmptyScoresError(const std::string& msg) : Error(msg) {}
};

// An index past the end of the container it addresses.
class IndexOutOfRangeError : public Error {
public:
    explicit IndexOutOfRangeError(const std::string& msg) : Error(msg) {}
};

// Identification asked for with an empty gallery.
class EmptyGalleryError : public Error {
public:
    explicit EmptyGalleryError(const std::string& msg) : Error(msg) {}
};

// Training loss went NaN or infinite; the run cannot continue.
class DivergedRunError : public Error {
public:
    explicit DivergedRunError(const std::string& msg) : Error(msg) {}
};

// Malformed or unreadable file content (bad magic, truncated payload,
// unparsable header).
class FileFormatError : public Error {
public:
    explicit FileFormatError(const std::string& msg) : Error(msg) {}
};

} // namespace adadistill
