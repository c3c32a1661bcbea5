#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rpm {

// Invalid user-supplied configuration (bad spec, infeasible ranges, unknown names).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// A caller violated a documented precondition.
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error("contract error: " + msg) {}
};

// Numerical failure (non-finite values, factorization breakdown).
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error("numerical error: " + msg) {}
};

// Filesystem / serialization failure. Message carries the path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Panel geometry constants. Cells are indexed k = 3*i + j for row i, col j in 0..2,
// matching the row-major flatten order of the 3x3 grid.
inline constexpr int kGridSide = 3;
inline constexpr int kCells = 9;

inline constexpr int cell_index(int row, int col) { return kGridSide * row + col; }
inline constexpr int cell_row(int k) { return k / kGridSide; }
inline constexpr int cell_col(int k) { return k % kGridSide; }

}  // namespace rpm
