#pragma once

#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace flowmc {

// Exception hierarchy. Everything thrown by this library derives from Error,
// so callers can catch one type at the CLI boundary.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or inconsistent configuration (widths, layer counts, unknown keys).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Tensor or batch dimensions that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Input outside the unit domain or an otherwise invalid sample coordinate.
class DomainError : public Error {
public:
    using Error::Error;
};

// Malformed parameter data: checkpoints, images, scenario files.
class ParamError : public Error {
public:
    using Error::Error;
};

// A density that cannot be normalized (all-zero masses, non-finite logits).
class DegenerateDensityError : public Error {
public:
    using Error::Error;
};

// A gradient with NaN or infinity in it; the optimizer rejects the step.
class NonFiniteGradientError : public Error {
public:
    using Error::Error;
};

inline std::string strfmt(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    char buf[1024];
    std::vsnprintf(buf, sizeof(buf), fmt, ap);
    va_end(ap);
    return std::string(buf);
}

inline bool finite(double x) { return std::isfinite(x); }

inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSqrt2 = 1.41421356237309504880;
inline constexpr double kSqrt2Pi = 2.50662827463100050242;

// Largest double strictly below 1. Unit-interval coordinates are kept in
// [0, 1) so that bin indexing never reads one past the last bin.
inline constexpr double kBelowOne = 1.0 - 0x1p-53;

// Out-of-domain inputs at the right edge get pulled to this value.
inline constexpr double kRightEdge = 1.0 - 0x1p-40;

}  // namespace flowmc
