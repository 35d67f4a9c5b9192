#pragma once

#include <stdexcept>
#include <string>

namespace handpress {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class DegenerateInput : public Error {
public:
    using Error::Error;
};

class InvalidRotation : public Error {
public:
    using Error::Error;
};

class DegenerateConfiguration : public Error {
public:
    using Error::Error;
};

class DegenerateLandmarks : public Error {
public:
    using Error::Error;
};

class OutOfFieldOfView : public Error {
public:
    using Error::Error;
};

class RadiusOutOfRange : public Error {
public:
    using Error::Error;
};

class BehindCamera : public Error {
public:
    using Error::Error;
};

class SizeMismatch : public Error {
public:
    using Error::Error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

class NonFiniteLoss : public Error {
public:
    using Error::Error;
};

class InsufficientFrames : public Error {
public:
    using Error::Error;
};

class DivergedSolve : public Error {
public:
    using Error::Error;
};

class TooFewSamples : public Error {
public:
    using Error::Error;
};

class IndexOutOfRange : public Error {
public:
    using Error::Error;
};

class InvalidDistribution : public Error {
public:
    using Error::Error;
};

class EmptyInput : public Error {
public:
    using Error::Error;
};

class EmptyFingerSet : public Error {
public:
    using Error::Error;
};

class MissingPlane : public Error {
public:
    using Error::Error;
};

class NonMonotoneTime : public Error {
public:
    using Error::Error;
};

class DegenerateRegression : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

} // namespace handpress
