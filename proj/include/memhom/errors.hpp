#pragma once
// Exception hierarchy shared by all modules.

#include <stdexcept>
#include <string>

namespace memhom {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct AdmissibilityError : Error { using Error::Error; };
struct LayoutError : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct IncompleteSet : Error { using Error::Error; };
struct MissingCoefficient : Error { using Error::Error; };
struct UnknownDefinition : Error { using Error::Error; };
struct IncompatibleRHS : Error { using Error::Error; };
struct SingularBlock : Error { using Error::Error; };

struct NoConvergence : Error {
  int iterations;
  double residual;
  NoConvergence(int it, double res)
      : Error("no convergence after " + std::to_string(it) +
              " iterations, residual " + std::to_string(res)),
        iterations(it), residual(res) {}
};

struct BlowUp : Error {
  int step;
  BlowUp(int s, const std::string& what) : Error(what), step(s) {}
};

}  // namespace memhom
