#pragma once

#include <string>

#include "rsddpm/data.hpp"
#include "rsddpm/tensor.hpp"

namespace rsddpm {

/// Raw tensor file: "RSTENS01" u8 dtype u32 rank u64 dims[rank] then
/// little-endian elements. Reading under the other precision throws
/// PrecisionError.
template <class Real>
void write_tensor(const std::string& path, const Tensor<Real>& t);
template <class Real>
Tensor<Real> read_tensor(const std::string& path);

/// 8-bit binary PGM of a [1, H, W] or [H, W] tensor, mapping [lo, hi] to [0, 255].
template <class Real>
void write_pgm(const std::string& path, const Tensor<Real>& t, double lo = -1.0, double hi = 1.0);

/// Directory with manifest.json plus one tensor file per image, target and corruption.
template <class Real>
void save_dataset(const std::string& dir, const Dataset<Real>& data);
template <class Real>
Dataset<Real> load_dataset(const std::string& dir);

}  // namespace rsddpm
